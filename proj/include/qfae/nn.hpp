#pragma once

// Transformer building blocks on top of the autograd tape. Parameter names
// follow the usual "<prefix>.<layer>.weight" convention so checkpoints and
// backbone archives share one naming scheme.

#include <random>
#include <string>
#include <vector>

#include "qfae/autograd.hpp"
#include "qfae/tensor_archive.hpp"

namespace qfae::nn {

using ad::Matrix;
using ad::Param;
using ad::Tape;
using ad::Var;

template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename T>
Param<T> make_param(std::string name, Eigen::Index rows, Eigen::Index cols, bool trainable) {
  Param<T> p;
  p.name = std::move(name);
  p.value = Matrix<T>::Zero(rows, cols);
  p.trainable = trainable;
  return p;
}

/// Fills with U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
void init_uniform_fan_in(Param<T>& p, Eigen::Index fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(u(rng));
}

template <typename T>
void init_normal(Param<T>& p, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(n(rng));
}

/// Copies a tensor into a parameter, checking the element count.
template <typename T>
void assign(Param<T>& p, const HostTensor& t) {
  if (t.numel() != p.value.size()) {
    throw ManifestError(p.name, "tensor '" + p.name + "' has " + std::to_string(t.numel()) + " elements, expected " +
                                    std::to_string(p.value.size()));
  }
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(t.data[static_cast<std::size_t>(i)]);
}

template <typename T>
HostTensor to_host(const Param<T>& p, std::vector<std::int64_t> shape = {}) {
  HostTensor t;
  t.shape = shape.empty() ? std::vector<std::int64_t>{p.value.rows(), p.value.cols()} : std::move(shape);
  if (t.numel() != p.value.size()) throw ValidationError("to_host: shape does not match parameter " + p.name);
  t.data.resize(static_cast<std::size_t>(p.value.size()));
  for (Eigen::Index i = 0; i < p.value.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(p.value.data()[i]);
  return t;
}

template <typename T>
struct Linear {
  Param<T> weight;  // out x in
  Param<T> bias;    // 1 x out

  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out, bool trainable)
      : weight(make_param<T>(name + ".weight", out, in, trainable)),
        bias(make_param<T>(name + ".bias", 1, out, trainable)) {}

  Eigen::Index in_features() const { return weight.value.cols(); }
  Eigen::Index out_features() const { return weight.value.rows(); }

  Var operator()(Tape<T>& t, Var x) const { return t.linear(x, t.param(weight), t.param(bias)); }

  void init(std::mt19937_64& rng) {
    init_uniform_fan_in(weight, in_features(), rng);
    init_uniform_fan_in(bias, in_features(), rng);
  }

  void collect(ParamList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename T>
struct LayerNorm {
  Param<T> weight;
  Param<T> bias;

  LayerNorm() = default;
  LayerNorm(const std::string& name, Eigen::Index width, bool trainable)
      : weight(make_param<T>(name + ".weight", 1, width, trainable)),
        bias(make_param<T>(name + ".bias", 1, width, trainable)) {
    weight.value.setOnes();
  }

  Var operator()(Tape<T>& t, Var x) const { return t.layer_norm(x, t.param(weight), t.param(bias)); }

  void collect(ParamList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  Mlp() = default;
  Mlp(const std::string& name, Eigen::Index width, double ratio, bool trainable)
      : fc1(name + ".fc1", width, static_cast<Eigen::Index>(static_cast<double>(width) * ratio), trainable),
        fc2(name + ".fc2", static_cast<Eigen::Index>(static_cast<double>(width) * ratio), width, trainable) {}

  Var operator()(Tape<T>& t, Var x) const { return fc2(t, t.gelu(fc1(t, x))); }

  void init(std::mt19937_64& rng) {
    fc1.init(rng);
    fc2.init(rng);
  }

  void collect(ParamList<T>& out) {
    fc1.collect(out);
    fc2.collect(out);
  }
};

/// Self-attention with a fused qkv projection.
template <typename T>
struct SelfAttention {
  Linear<T> qkv;
  Linear<T> proj;
  int heads = 1;

  SelfAttention() = default;
  SelfAttention(const std::string& name, Eigen::Index width, int num_heads, bool trainable)
      : qkv(name + ".qkv", width, 3 * width, trainable), proj(name + ".proj", width, width, trainable), heads(num_heads) {
    if (num_heads <= 0 || width % num_heads != 0) throw ValidationError(name + ": heads must divide width");
  }

  Var operator()(Tape<T>& t, Var x, ad::AttentionProbs<T>* probs = nullptr) const {
    const Eigen::Index d = proj.in_features();
    Var fused = qkv(t, x);
    Var q = t.slice_cols(fused, 0, d);
    Var k = t.slice_cols(fused, d, d);
    Var v = t.slice_cols(fused, 2 * d, d);
    return proj(t, t.attention(q, k, v, heads, probs));
  }

  void init(std::mt19937_64& rng) {
    qkv.init(rng);
    proj.init(rng);
  }

  void collect(ParamList<T>& out) {
    qkv.collect(out);
    proj.collect(out);
  }
};

/// Queries attend over a separate context sequence (keys and values).
template <typename T>
struct CrossAttention {
  Linear<T> q;
  Linear<T> kv;
  Linear<T> proj;
  int heads = 1;

  CrossAttention() = default;
  CrossAttention(const std::string& name, Eigen::Index width, int num_heads, bool trainable)
      : q(name + ".q", width, width, trainable),
        kv(name + ".kv", width, 2 * width, trainable),
        proj(name + ".proj", width, width, trainable),
        heads(num_heads) {
    if (num_heads <= 0 || width % num_heads != 0) throw ValidationError(name + ": heads must divide width");
  }

  Var operator()(Tape<T>& t, Var queries, Var context, ad::AttentionProbs<T>* probs = nullptr) const {
    const Eigen::Index d = proj.in_features();
    Var qv = q(t, queries);
    Var fused = kv(t, context);
    Var k = t.slice_cols(fused, 0, d);
    Var v = t.slice_cols(fused, d, d);
    return proj(t, t.attention(qv, k, v, heads, probs));
  }

  void init(std::mt19937_64& rng) {
    q.init(rng);
    kv.init(rng);
    proj.init(rng);
  }

  void collect(ParamList<T>& out) {
    q.collect(out);
    kv.collect(out);
    proj.collect(out);
  }
};

/// Pre-norm transformer block: x + attn(norm1(x)), then x + mlp(norm2(x)).
template <typename T>
struct TransformerBlock {
  LayerNorm<T> norm1;
  SelfAttention<T> attn;
  LayerNorm<T> norm2;
  Mlp<T> mlp;

  TransformerBlock() = default;
  TransformerBlock(const std::string& name, Eigen::Index width, int heads, double mlp_ratio, bool trainable)
      : norm1(name + ".norm1", width, trainable),
        attn(name + ".attn", width, heads, trainable),
        norm2(name + ".norm2", width, trainable),
        mlp(name + ".mlp", width, mlp_ratio, trainable) {}

  Var operator()(Tape<T>& t, Var x) const {
    x = t.add(x, attn(t, norm1(t, x)));
    return t.add(x, mlp(t, norm2(t, x)));
  }

  void init(std::mt19937_64& rng) {
    attn.init(rng);
    mlp.init(rng);
  }

  void collect(ParamList<T>& out) {
    norm1.collect(out);
    attn.collect(out);
    norm2.collect(out);
    mlp.collect(out);
  }
};

/// Flattens a parameter list into archive tensors (1 x n rows become [n]).
template <typename T>
void export_params(const ParamList<T>& params, NamedTensors& out) {
  for (const Param<T>* p : params) {
    if (p->value.rows() == 1) {
      out[p->name] = to_host(*p, {p->value.cols()});
    } else {
      out[p->name] = to_host(*p);
    }
  }
}

/// Loads every parameter by name; a missing tensor is a manifest error.
template <typename T>
void import_params(const ParamList<T>& params, const NamedTensors& in) {
  for (Param<T>* p : params) {
    auto it = in.find(p->name);
    if (it == in.end()) throw ManifestError(p->name, "missing tensor: " + p->name);
    assign(*p, it->second);
  }
}

}  // namespace qfae::nn
