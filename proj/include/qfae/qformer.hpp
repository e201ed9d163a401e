#pragma once

#include <cstdint>
#include <vector>

#include "qfae/autograd.hpp"
#include "qfae/nn.hpp"

namespace qfae::qformer {

using ad::Tape;
using ad::Var;

struct QFormerConfig {
  int width = 768;
  int heads = 8;
  double mlp_ratio = 4.0;
  int blocks = 1;

  void validate() const;
  bool operator==(const QFormerConfig&) const = default;
};

/// m learnable query tokens of the given width, drawn from N(0, 0.02^2).
template <typename T>
ad::Param<T> init_queries(int m, int width, std::uint64_t seed);

/// Number of queries needed to reconstruct a side x side image with the given
/// decoder patch size.
int query_count(int side, int decoder_patch);

/// One bottleneck block: pre-norm self-attention over the queries, pre-norm
/// cross-attention from the queries into the context, then a pre-norm MLP.
/// Each sub-layer is wrapped in a residual connection.
template <typename T>
struct QFormerBlock {
  nn::LayerNorm<T> norm1;
  nn::SelfAttention<T> self_attn;
  nn::LayerNorm<T> norm2;
  nn::LayerNorm<T> norm_context;
  nn::CrossAttention<T> cross_attn;
  nn::LayerNorm<T> norm3;
  nn::Mlp<T> mlp;

  QFormerBlock() = default;
  QFormerBlock(const std::string& name, const QFormerConfig& cfg);

  Var operator()(Tape<T>& t, Var queries, Var context, ad::AttentionProbs<T>* cross_probs = nullptr) const;
  void init(std::mt19937_64& rng);
  void collect(nn::ParamList<T>& out);
};

template <typename T>
class QFormer {
 public:
  QFormer() = default;
  /// Parameters are zero until init() or a checkpoint import.
  QFormer(const QFormerConfig& cfg, int num_queries);

  void init(std::uint64_t seed);

  /// Z for the given context tokens; one row per query for any context length.
  /// cross_probs, when given, receives the cross-attention weights of every block.
  Var forward(Tape<T>& t, Var context, std::vector<ad::AttentionProbs<T>>* cross_probs = nullptr) const;

  nn::ParamList<T> parameters();
  const QFormerConfig& config() const { return cfg_; }
  int num_queries() const { return static_cast<int>(queries_.value.rows()); }

  ad::Param<T>& queries() { return queries_; }
  std::vector<QFormerBlock<T>>& blocks() { return blocks_; }

 private:
  QFormerConfig cfg_;
  ad::Param<T> queries_;
  std::vector<QFormerBlock<T>> blocks_;
};

extern template class QFormer<float>;
extern template class QFormer<double>;

}  // namespace qfae::qformer
