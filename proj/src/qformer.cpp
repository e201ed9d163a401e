#include "qfae/qformer.hpp"

#include "qfae/errors.hpp"

namespace qfae::qformer {

void QFormerConfig::validate() const {
  if (width <= 0 || heads <= 0 || width % heads != 0) throw ValidationError("qformer: heads must divide width");
  if (blocks < 1) throw ValidationError("qformer: need at least one block");
  if (!(mlp_ratio > 0)) throw ValidationError("qformer: mlp_ratio must be positive");
}

int query_count(int side, int decoder_patch) {
  if (decoder_patch <= 0 || side % decoder_patch != 0) {
    throw ValidationError("decoder patch " + std::to_string(decoder_patch) + " does not divide side " +
                          std::to_string(side));
  }
  const int g = side / decoder_patch;
  return g * g;
}

template <typename T>
ad::Param<T> init_queries(int m, int width, std::uint64_t seed) {
  if (m <= 0 || width <= 0) throw ValidationError("init_queries: m and width must be positive");
  auto p = nn::make_param<T>("qformer.queries", m, width, true);
  std::mt19937_64 rng(seed);
  nn::init_normal(p, 0.02, rng);
  return p;
}

template <typename T>
QFormerBlock<T>::QFormerBlock(const std::string& name, const QFormerConfig& cfg)
    : norm1(name + ".norm1", cfg.width, true),
      self_attn(name + ".self_attn", cfg.width, cfg.heads, true),
      norm2(name + ".norm2", cfg.width, true),
      norm_context(name + ".norm_context", cfg.width, true),
      cross_attn(name + ".cross_attn", cfg.width, cfg.heads, true),
      norm3(name + ".norm3", cfg.width, true),
      mlp(name + ".mlp", cfg.width, cfg.mlp_ratio, true) {}

template <typename T>
Var QFormerBlock<T>::operator()(Tape<T>& t, Var q, Var context, ad::AttentionProbs<T>* cross_probs) const {
  q = t.add(q, self_attn(t, norm1(t, q)));
  q = t.add(q, cross_attn(t, norm2(t, q), norm_context(t, context), cross_probs));
  return t.add(q, mlp(t, norm3(t, q)));
}

template <typename T>
void QFormerBlock<T>::init(std::mt19937_64& rng) {
  self_attn.init(rng);
  cross_attn.init(rng);
  mlp.init(rng);
}

template <typename T>
void QFormerBlock<T>::collect(nn::ParamList<T>& out) {
  norm1.collect(out);
  self_attn.collect(out);
  norm2.collect(out);
  norm_context.collect(out);
  cross_attn.collect(out);
  norm3.collect(out);
  mlp.collect(out);
}

template <typename T>
QFormer<T>::QFormer(const QFormerConfig& cfg, int num_queries) : cfg_(cfg) {
  cfg.validate();
  if (num_queries <= 0) throw ValidationError("qformer: query count must be positive");
  queries_ = nn::make_param<T>("qformer.queries", num_queries, cfg.width, true);
  for (int b = 0; b < cfg.blocks; ++b) blocks_.emplace_back("qformer.block." + std::to_string(b), cfg);
}

template <typename T>
void QFormer<T>::init(std::uint64_t seed) {
  queries_ = init_queries<T>(num_queries(), cfg_.width, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (auto& b : blocks_) b.init(rng);
}

template <typename T>
Var QFormer<T>::forward(Tape<T>& t, Var context, std::vector<ad::AttentionProbs<T>>* cross_probs) const {
  if (t.cols(context) != cfg_.width) {
    throw ValidationError("qformer: context width " + std::to_string(t.cols(context)) + " != query width " +
                          std::to_string(cfg_.width));
  }
  if (t.rows(context) < 1) throw ValidationError("qformer: context must hold at least one token");
  if (cross_probs) cross_probs->assign(blocks_.size(), {});
  Var q = t.param(queries_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    q = blocks_[b](t, q, context, cross_probs ? &(*cross_probs)[b] : nullptr);
  }
  return q;
}

template <typename T>
nn::ParamList<T> QFormer<T>::parameters() {
  nn::ParamList<T> out{&queries_};
  for (auto& b : blocks_) b.collect(out);
  return out;
}

template ad::Param<float> init_queries<float>(int, int, std::uint64_t);
template ad::Param<double> init_queries<double>(int, int, std::uint64_t);
template struct QFormerBlock<float>;
template struct QFormerBlock<double>;
template class QFormer<float>;
template class QFormer<double>;

}  // namespace qfae::qformer
