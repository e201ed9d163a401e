#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// Every value on a tape is a 2-D matrix (rows = tokens, cols = features).
// Images are carried as (C*H) x W matrices so their flat index is c*H*W + y*W + x.
// A node only records a backward closure when at least one input needs a
// gradient, so inference on a tape costs no more than a plain forward pass.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qfae/errors.hpp"

namespace qfae::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Tensor owned by a model. Frozen parameters never receive gradients.
template <typename T>
struct Param {
  std::string name;
  Matrix<T> value;
  bool trainable = true;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Per-head attention probabilities recorded by Tape::attention.
template <typename T>
struct AttentionProbs {
  std::vector<Matrix<T>> heads;  // each Lq x Lk, rows sum to one
};

template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value) { return push(std::move(value), false); }

  Var input(Mat value, bool requires_grad) { return push(std::move(value), requires_grad); }

  /// Leaf bound to a parameter. Repeated calls with the same parameter return
  /// the same leaf so its gradient is accumulated once.
  Var param(const Param<T>& p) {
    auto it = param_leaf_.find(&p);
    if (it != param_leaf_.end()) return Var{it->second};
    Node n;
    n.external = &p.value;
    n.needs_grad = p.trainable;
    n.param = &p;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_leaf_.emplace(&p, id);
    return Var{id};
  }

  const Mat& value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).needs_grad; }

  /// Gradient of the last backward root w.r.t. v; empty if v received none.
  const Mat& grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).grad; }

  Eigen::Index rows(Var v) const { return value(v).rows(); }
  Eigen::Index cols(Var v) const { return value(v).cols(); }
  std::size_t size() const { return nodes_.size(); }

  // ---------------------------------------------------------------- ops

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Mat out = value(a) + value(b);
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Mat out = value(a) - value(b);
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      t.accumulate(a, g);
      t.accumulate(b, -g);
    });
  }

  /// Elementwise product.
  Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    Mat out = value(a).cwiseProduct(value(b));
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
      if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
    });
  }

  Var scale(Var a, T s) {
    Mat out = value(a) * s;
    return record(std::move(out), {a}, [a, s](Tape& t, const Mat& g) { t.accumulate(a, g * s); });
  }

  /// a (n x d) + row (1 x d) broadcast over rows.
  Var add_row(Var a, Var row) {
    if (rows(row) != 1 || cols(row) != cols(a)) throw ValidationError("add_row: shape mismatch");
    Mat out = value(a).rowwise() + value(row).row(0);
    return record(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
      t.accumulate(a, g);
      if (t.needs_grad(row)) t.accumulate(row, Mat(g.colwise().sum()));
    });
  }

  Var matmul(Var a, Var b) {
    if (cols(a) != rows(b)) throw ValidationError("matmul: inner dimensions differ");
    Mat out = value(a) * value(b);
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      if (t.needs_grad(a)) t.accumulate(a, Mat(g * t.value(b).transpose()));
      if (t.needs_grad(b)) t.accumulate(b, Mat(t.value(a).transpose() * g));
    });
  }

  /// x (n x in) * W^T (W is out x in) + bias (1 x out, optional).
  Var linear(Var x, Var w, Var bias = Var{}) {
    if (cols(x) != cols(w)) {
      throw ValidationError("linear: input width " + std::to_string(cols(x)) + " != weight in-features " +
                            std::to_string(cols(w)));
    }
    Mat out = value(x) * value(w).transpose();
    if (bias.valid()) out.rowwise() += value(bias).row(0);
    std::vector<Var> ins{x, w};
    if (bias.valid()) ins.push_back(bias);
    return record(std::move(out), ins, [x, w, bias](Tape& t, const Mat& g) {
      if (t.needs_grad(x)) t.accumulate(x, Mat(g * t.value(w)));
      if (t.needs_grad(w)) t.accumulate(w, Mat(g.transpose() * t.value(x)));
      if (bias.valid() && t.needs_grad(bias)) t.accumulate(bias, Mat(g.colwise().sum()));
    });
  }

  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-6)) {
    const Mat& xv = value(x);
    const Eigen::Index n = xv.rows(), d = xv.cols();
    if (cols(gamma) != d || cols(beta) != d) throw ValidationError("layer_norm: width mismatch");
    auto xhat = std::make_shared<Mat>(n, d);
    auto rstd = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      const T mu = xv.row(r).mean();
      const T var = (xv.row(r).array() - mu).square().mean();
      const T rs = T(1) / std::sqrt(var + eps);
      (*rstd)(r) = rs;
      xhat->row(r) = (xv.row(r).array() - mu) * rs;
    }
    Mat out = (xhat->array().rowwise() * value(gamma).row(0).array()).matrix();
    out.rowwise() += value(beta).row(0);
    return record(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, rstd](Tape& t, const Mat& g) {
      if (t.needs_grad(gamma)) t.accumulate(gamma, Mat(g.cwiseProduct(*xhat).colwise().sum()));
      if (t.needs_grad(beta)) t.accumulate(beta, Mat(g.colwise().sum()));
      if (t.needs_grad(x)) {
        Mat dxhat = (g.array().rowwise() * t.value(gamma).row(0).array()).matrix();
        const auto d = static_cast<T>(dxhat.cols());
        Mat dx(dxhat.rows(), dxhat.cols());
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
          const T m1 = dxhat.row(r).sum() / d;
          const T m2 = dxhat.row(r).dot(xhat->row(r)) / d;
          dx.row(r) = ((dxhat.row(r).array() - m1 - xhat->row(r).array() * m2) * (*rstd)(r)).matrix();
        }
        t.accumulate(x, dx);
      }
    });
  }

  /// Exact (erf) GELU.
  Var gelu(Var x) {
    const Mat& xv = value(x);
    Mat out = xv.unaryExpr([](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2))); });
    return record(std::move(out), {x}, [x](Tape& t, const Mat& g) {
      const T inv_sqrt_2pi = T(0.3989422804014327);
      Mat d = t.value(x).unaryExpr([inv_sqrt_2pi](T v) {
        return T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2))) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
      t.accumulate(x, Mat(g.cwiseProduct(d)));
    });
  }

  /// Multi-head scaled dot-product attention. q: Lq x D, k and v: Lk x D.
  /// Head h uses columns [h*D/heads, (h+1)*D/heads). Scale is 1/sqrt(D/heads).
  Var attention(Var q, Var k, Var v, int heads, AttentionProbs<T>* probs_out = nullptr) {
    const Mat& qv = value(q);
    const Mat& kv = value(k);
    const Mat& vv = value(v);
    const Eigen::Index d = qv.cols();
    if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows()) {
      throw ValidationError("attention: q/k/v shapes are inconsistent");
    }
    if (heads <= 0 || d % heads != 0) throw ValidationError("attention: heads must divide width");
    const Eigen::Index dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    auto probs = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(heads));
    Mat out(qv.rows(), d);
    for (int h = 0; h < heads; ++h) {
      Mat s = (qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose()) * scale;
      softmax_rows_inplace(s);
      out.middleCols(h * dh, dh) = s * vv.middleCols(h * dh, dh);
      (*probs)[static_cast<std::size_t>(h)] = std::move(s);
    }
    if (probs_out) probs_out->heads = *probs;
    return record(std::move(out), {q, k, v}, [q, k, v, heads, dh, scale, probs](Tape& t, const Mat& g) {
      const Mat& qv = t.value(q);
      const Mat& kv = t.value(k);
      const Mat& vv = t.value(v);
      Mat dq = Mat::Zero(qv.rows(), qv.cols());
      Mat dk = Mat::Zero(kv.rows(), kv.cols());
      Mat dv = Mat::Zero(vv.rows(), vv.cols());
      for (int h = 0; h < heads; ++h) {
        const Mat& p = (*probs)[static_cast<std::size_t>(h)];
        const auto go = g.middleCols(h * dh, dh);
        dv.middleCols(h * dh, dh) = p.transpose() * go;
        Mat dp = go * vv.middleCols(h * dh, dh).transpose();
        Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dp.cwiseProduct(p)).rowwise().sum();
        Mat ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * scale;
        dq.middleCols(h * dh, dh) = ds * kv.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) = ds.transpose() * qv.middleCols(h * dh, dh);
      }
      if (t.needs_grad(q)) t.accumulate(q, dq);
      if (t.needs_grad(k)) t.accumulate(k, dk);
      if (t.needs_grad(v)) t.accumulate(v, dv);
    });
  }

  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > cols(a)) throw ValidationError("slice_cols: out of range");
    Mat out = value(a).middleCols(start, count);
    return record(std::move(out), {a}, [a, start, count](Tape& t, const Mat& g) {
      Mat full = Mat::Zero(t.rows(a), t.cols(a));
      full.middleCols(start, count) = g;
      t.accumulate(a, full);
    });
  }

  Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > rows(a)) throw ValidationError("slice_rows: out of range");
    Mat out = value(a).middleRows(start, count);
    return record(std::move(out), {a}, [a, start, count](Tape& t, const Mat& g) {
      Mat full = Mat::Zero(t.rows(a), t.cols(a));
      full.middleRows(start, count) = g;
      t.accumulate(a, full);
    });
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ValidationError("concat_rows: no inputs");
    const Eigen::Index c = cols(parts[0]);
    Eigen::Index total = 0;
    for (Var p : parts) {
      if (cols(p) != c) throw ValidationError("concat_rows: width mismatch");
      total += rows(p);
    }
    Mat out(total, c);
    Eigen::Index r = 0;
    for (Var p : parts) {
      out.middleRows(r, rows(p)) = value(p);
      r += rows(p);
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return record(std::move(out), ins, [ins](Tape& t, const Mat& g) {
      Eigen::Index r = 0;
      for (Var p : ins) {
        const Eigen::Index n = t.rows(p);
        if (t.needs_grad(p)) t.accumulate(p, Mat(g.middleRows(r, n)));
        r += n;
      }
    });
  }

  Var reshape(Var a, Eigen::Index r, Eigen::Index c) {
    const Mat& av = value(a);
    if (r * c != av.size()) throw ValidationError("reshape: element count differs");
    Mat out = Eigen::Map<const Mat>(av.data(), r, c);
    const Eigen::Index ar = av.rows(), ac = av.cols();
    return record(std::move(out), {a}, [a, ar, ac](Tape& t, const Mat& g) {
      t.accumulate(a, Mat(Eigen::Map<const Mat>(g.data(), ar, ac)));
    });
  }

  /// out.flat[i] = a.flat[index[i]]; the index list must be a permutation or
  /// selection of a's flat positions.
  Var gather(Var a, std::shared_ptr<const std::vector<Eigen::Index>> index, Eigen::Index r, Eigen::Index c) {
    if (static_cast<Eigen::Index>(index->size()) != r * c) throw ValidationError("gather: index size mismatch");
    const Mat& av = value(a);
    Mat out(r, c);
    const T* src = av.data();
    T* dst = out.data();
    for (std::size_t i = 0; i < index->size(); ++i) dst[i] = src[(*index)[i]];
    return record(std::move(out), {a}, [a, index](Tape& t, const Mat& g) {
      Mat ga = Mat::Zero(t.rows(a), t.cols(a));
      T* d = ga.data();
      const T* s = g.data();
      for (std::size_t i = 0; i < index->size(); ++i) d[(*index)[i]] += s[i];
      t.accumulate(a, ga);
    });
  }

  /// Row-wise cosine distance 1 - cos(a_r, b_r), returned as an n x 1 column.
  /// Rows where either vector has zero norm yield exactly 1 and no gradient.
  Var cosine_distance_rows(Var a, Var b) {
    check_same_shape(a, b, "cosine_distance_rows");
    const Mat& av = value(a);
    const Mat& bv = value(b);
    const Eigen::Index n = av.rows();
    Mat out(n, 1);
    auto cosv = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(n);
    auto na = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(n);
    auto nb = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      T dot = 0, aa = 0, bb = 0;
      for (Eigen::Index j = 0; j < av.cols(); ++j) {
        dot += av(r, j) * bv(r, j);
        aa += av(r, j) * av(r, j);
        bb += bv(r, j) * bv(r, j);
      }
      (*na)(r) = std::sqrt(aa);
      (*nb)(r) = std::sqrt(bb);
      if (aa == T(0) || bb == T(0)) {
        (*cosv)(r) = T(0);
        out(r, 0) = T(1);
        (*na)(r) = T(0);
        continue;
      }
      const T c = dot / std::sqrt(aa * bb);
      (*cosv)(r) = c;
      out(r, 0) = T(1) - c;
    }
    return record(std::move(out), {a, b}, [a, b, cosv, na, nb](Tape& t, const Mat& g) {
      const Mat& av = t.value(a);
      const Mat& bv = t.value(b);
      Mat da = Mat::Zero(av.rows(), av.cols());
      Mat db = Mat::Zero(bv.rows(), bv.cols());
      for (Eigen::Index r = 0; r < av.rows(); ++r) {
        const T nar = (*na)(r), nbr = (*nb)(r);
        if (nar == T(0) || nbr == T(0)) continue;
        const T c = (*cosv)(r);
        const T gr = g(r, 0);
        // d(1-cos)/db = -(a/|a| - cos * b/|b|) / |b|, symmetric for a.
        db.row(r) = -gr * (av.row(r) / nar - c * (bv.row(r) / nbr)) / nbr;
        da.row(r) = -gr * (bv.row(r) / nbr - c * (av.row(r) / nar)) / nar;
      }
      if (t.needs_grad(a)) t.accumulate(a, da);
      if (t.needs_grad(b)) t.accumulate(b, db);
    });
  }

  /// Mean of all entries, as a 1 x 1 value.
  Var mean(Var a) {
    const Mat& av = value(a);
    const T n = static_cast<T>(av.size());
    Mat out(1, 1);
    out(0, 0) = av.sum() / n;
    const Eigen::Index r = av.rows(), c = av.cols();
    return record(std::move(out), {a}, [a, r, c, n](Tape& t, const Mat& g) {
      t.accumulate(a, Mat(Mat::Constant(r, c, g(0, 0) / n)));
    });
  }

  /// Mean absolute difference, as a 1 x 1 value. Subgradient 0 at equality.
  Var mean_abs_diff(Var a, Var b) {
    check_same_shape(a, b, "mean_abs_diff");
    const Mat diff = value(a) - value(b);
    const T n = static_cast<T>(diff.size());
    Mat out(1, 1);
    out(0, 0) = diff.cwiseAbs().sum() / n;
    auto sign = std::make_shared<Mat>(diff.unaryExpr([](T v) { return T((v > 0) - (v < 0)); }));
    return record(std::move(out), {a, b}, [a, b, sign, n](Tape& t, const Mat& g) {
      Mat ga = *sign * (g(0, 0) / n);
      if (t.needs_grad(b)) t.accumulate(b, Mat(-ga));
      if (t.needs_grad(a)) t.accumulate(a, ga);
    });
  }

  /// Runs the reverse sweep from a 1 x 1 root. Earlier gradients are cleared.
  void backward(Var root) {
    if (rows(root) != 1 || cols(root) != 1) throw ValidationError("backward: root must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    Node& r = nodes_[static_cast<std::size_t>(root.id)];
    if (!r.needs_grad) return;
    r.grad = Mat::Ones(1, 1);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Gradients of trainable parameters reached by the last backward sweep,
  /// in the order the parameters were first bound to this tape.
  std::vector<std::pair<const Param<T>*, Mat>> param_grads() const {
    std::vector<std::pair<const Param<T>*, Mat>> out;
    for (const auto& n : nodes_) {
      if (n.param && n.param->trainable && n.grad.size() != 0) out.emplace_back(n.param, n.grad);
    }
    return out;
  }

  static void softmax_rows_inplace(Mat& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const T mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
  }

 private:
  using Backward = std::function<void(Tape&, const Mat&)>;

  struct Node {
    Mat value;
    const Mat* external = nullptr;
    Mat grad;
    bool needs_grad = false;
    const Param<T>* param = nullptr;
    Backward backward;
  };

  Var push(Mat value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var record(Mat value, std::initializer_list<Var> inputs, Backward fn) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(Mat value, const std::vector<Var>& inputs, Backward fn) {
    bool any = false;
    for (Var v : inputs) any = any || needs_grad(v);
    Node n;
    n.value = std::move(value);
    n.needs_grad = any;
    if (any) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void accumulate(Var v, const Mat& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void check_same_shape(Var a, Var b, const char* op) const {
    if (rows(a) != rows(b) || cols(a) != cols(b)) {
      throw ValidationError(std::string(op) + ": shape mismatch (" + std::to_string(rows(a)) + "x" +
                            std::to_string(cols(a)) + " vs " + std::to_string(rows(b)) + "x" +
                            std::to_string(cols(b)) + ")");
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Param<T>*, int> param_leaf_;
};

}  // namespace qfae::ad
