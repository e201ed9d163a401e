#include "qfae/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qfae/decoder.hpp"
#include "qfae/encoder.hpp"
#include "qfae/perceptual.hpp"
#include "qfae/qformer.hpp"

namespace qfae::gradcheck {

using ad::Matrix;
using ad::Param;
using ad::Tape;
using ad::Var;

double compare(const std::function<Var(Tape<double>&)>& f, const nn::ParamList<double>& targets, const Options& opt,
               std::mt19937_64& rng, std::size_t* coords) {
  std::vector<Matrix<double>> analytic;
  {
    Tape<double> t;
    for (auto* p : targets) (void)t.param(*p);
    const Var loss = f(t);
    t.backward(loss);
    for (auto* p : targets) {
      const Var v = t.param(*p);
      const auto& g = t.grad(v);
      analytic.push_back(g.size() ? g : Matrix<double>::Zero(p->value.rows(), p->value.cols()));
    }
  }
  auto eval = [&]() {
    Tape<double> t;
    return t.value(f(t))(0, 0);
  };

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto& w = targets[i]->value;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(w.size()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    if (opt.max_coords_per_tensor > 0 && idx.size() > static_cast<std::size_t>(opt.max_coords_per_tensor)) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(opt.max_coords_per_tensor));
    }
    for (Eigen::Index k : idx) {
      const double orig = w.data()[k];
      w.data()[k] = orig + opt.step;
      const double up = eval();
      w.data()[k] = orig - opt.step;
      const double down = eval();
      w.data()[k] = orig;
      const double num = (up - down) / (2.0 * opt.step);
      const double ana = analytic[i].data()[k];
      diff2 += (ana - num) * (ana - num);
      a2 += ana * ana;
      n2 += num * num;
      ++count;
    }
  }
  if (coords) *coords = count;
  const double denom = std::sqrt(a2) + std::sqrt(n2);
  return std::sqrt(diff2) / std::max(denom, 1e-12);
}

namespace {

constexpr int kWidth = 16;
constexpr int kSide = 16;
constexpr int kPatch = 4;

Param<double> random_param(const std::string& name, Eigen::Index r, Eigen::Index c, double sd, std::mt19937_64& rng) {
  auto p = nn::make_param<double>(name, r, c, true);
  nn::init_normal(p, sd, rng);
  return p;
}

void jitter(const nn::ParamList<double>& params, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto* p : params)
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += n(rng);
}

// Weighted sum so every output coordinate contributes a distinct gradient.
Var weighted(Tape<double>& t, Var out, const Matrix<double>& r) { return t.mean(t.mul(out, t.constant(r))); }

Matrix<double> random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

encoder::BackboneSpec toy_spec() {
  encoder::BackboneSpec s;
  s.name = "gradcheck";
  s.depth = 2;
  s.width = kWidth;
  s.heads = 2;
  s.patch_size = kPatch;
  s.special_tokens = 1;
  s.tap_layers = {0, 1};
  s.mlp_ratio = 2.0;
  return s;
}

}  // namespace

std::vector<Result> run_all(const Options& opt) {
  std::mt19937_64 rng(opt.seed);
  std::vector<Result> out;
  auto record = [&](const std::string& name, const std::function<Var(Tape<double>&)>& f,
                    const nn::ParamList<double>& targets) {
    Result r;
    r.name = name;
    r.rel_error = compare(f, targets, opt, rng, &r.coords);
    out.push_back(r);
  };

  {
    qformer::QFormerConfig cfg{kWidth, 2, 2.0, 1};
    qformer::QFormer<double> qf(cfg, 9);
    qf.init(rng());
    nn::ParamList<double> params = qf.parameters();
    jitter(params, rng);
    auto context = random_param("input.context", 20, kWidth, 1.0, rng);
    const auto r = random_matrix(9, kWidth, rng);
    params.push_back(&context);
    record("qformer", [&](Tape<double>& t) { return weighted(t, qf.forward(t, t.param(context)), r); }, params);
  }

  {
    decoder::DecoderConfig cfg{kWidth, 1, 2, 2.0, kPatch, 3};
    decoder::Decoder<double> dec(cfg, kSide / kPatch);
    dec.init(rng());
    nn::ParamList<double> params = dec.parameters();
    jitter(params, rng);
    auto z = random_param("input.z", (kSide / kPatch) * (kSide / kPatch), kWidth, 1.0, rng);
    const auto r = random_matrix(3 * kSide, kSide, rng);
    params.push_back(&z);
    record("decoder", [&](Tape<double>& t) { return weighted(t, dec.reconstruct(t, t.param(z)), r); }, params);
  }

  {
    std::vector<encoder::Projection<double>> projs;
    projs.emplace_back(0, 12, kWidth);
    projs.emplace_back(1, 8, kWidth);
    for (auto& p : projs) p.linear.init(rng);
    auto f00 = random_param("input.f00", 16, 12, 1.0, rng);
    auto f01 = random_param("input.f01", 16, 12, 1.0, rng);
    auto f10 = random_param("input.f10", 4, 8, 1.0, rng);
    const auto r = random_matrix(36, kWidth, rng);
    nn::ParamList<double> params;
    for (auto& p : projs) p.linear.collect(params);
    params.push_back(&f00);
    params.push_back(&f01);
    params.push_back(&f10);
    record("projection",
           [&](Tape<double>& t) {
             std::vector<std::vector<Var>> feats{{t.param(f00), t.param(f01)}, {t.param(f10)}};
             return weighted(t, encoder::project_concat(t, feats, projs), r);
           },
           params);
  }

  {
    const auto backbone = encoder::make_toy_backbone(rng(), toy_spec(), kSide / kPatch);
    const perceptual::PerceptualModel<double> model(backbone, kSide, {kPatch, 2 * kPatch});
    const perceptual::ScaleSet scales{{0, 1}, {kPatch, 2 * kPatch}};
    imaging::ImageTensor x(3, kSide, kSide);
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : x.data) v = static_cast<float>(n(rng));
    x.normalized = true;
    const auto target = model.features(x, scales);
    const auto xm = encoder::image_matrix<double>(x);
    for (auto form : {perceptual::LossForm::Hierarchical, perceptual::LossForm::Simple}) {
      auto xrec = nn::make_param<double>("input.x_rec", xm.rows(), xm.cols(), true);
      xrec.value = xm + 0.5 * random_matrix(xm.rows(), xm.cols(), rng);
      record("perceptual_loss." + perceptual::to_string(form),
             [&](Tape<double>& t) { return perceptual::perceptual_loss(t, model, target, t.param(xrec), scales, form); },
             {&xrec});
    }
  }
  return out;
}

double max_error(const std::vector<Result>& results) {
  double m = 0.0;
  for (const auto& r : results) m = std::max(m, r.rel_error);
  return m;
}

}  // namespace qfae::gradcheck
