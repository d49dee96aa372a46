#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gfml/datasets.hpp"
#include "gfml/error.hpp"
#include "gfml/model.hpp"
#include "gfml/rng.hpp"

namespace gfml {

enum class HvpMode { Exact, FiniteDifference };

struct MetaHyper {
  double alpha = 1e-3;  // meta-learning rate
  double beta = 1e-2;   // inner step size
  int tau = 10;         // local iterations per round
  std::size_t batch_size = 40;
  HvpMode hvp = HvpMode::Exact;
};

/// Column-per-sample feature matrix plus labels.
struct Batch {
  Eigen::MatrixXd x;
  std::vector<int> y;

  std::size_t size() const noexcept { return y.size(); }
};

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> rows) {
  Batch b;
  b.x.resize(static_cast<Eigen::Index>(ds.feature_dim), static_cast<Eigen::Index>(rows.size()));
  b.y.reserve(rows.size());
  for (std::size_t c = 0; c < rows.size(); ++c) {
    const auto f = ds.feature(rows[c]);
    for (std::size_t d = 0; d < ds.feature_dim; ++d) {
      b.x(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(c)) = f[d];
    }
    b.y.push_back(ds.labels[rows[c]]);
  }
  return b;
}

inline Batch full_batch(const Dataset& ds) {
  std::vector<std::size_t> rows(ds.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return make_batch(ds, rows);
}

namespace mlp {

inline double elu(double a) { return a > 0.0 ? a : std::expm1(a); }
inline double elu_d1(double a) { return a > 0.0 ? 1.0 : std::exp(a); }
inline double elu_d2(double a) { return a > 0.0 ? 0.0 : std::exp(a); }

using Map = Eigen::Map<const Eigen::MatrixXd>;
using VMap = Eigen::Map<const Eigen::VectorXd>;

/// Read-only layer views over any flat vector laid out like ModelParams.
struct Layers {
  Map w1, w2, w3;
  VMap b1, b2, b3;

  Layers(const ModelShape& s, const Eigen::VectorXd& flat)
      : w1(flat.data() + s.w1_offset(), ix(s.hidden1), ix(s.input)),
        w2(flat.data() + s.w2_offset(), ix(s.hidden2), ix(s.hidden1)),
        w3(flat.data() + s.w3_offset(), ix(s.classes), ix(s.hidden2)),
        b1(flat.data() + s.b1_offset(), ix(s.hidden1)),
        b2(flat.data() + s.b2_offset(), ix(s.hidden2)),
        b3(flat.data() + s.b3_offset(), ix(s.classes)) {}

  static Eigen::Index ix(std::size_t n) { return static_cast<Eigen::Index>(n); }
};

struct Trace {
  Eigen::MatrixXd a1, h1, a2, h2, z, p;
  double loss = 0.0;
};

inline void check_batch(const ModelShape& s, const Batch& b) {
  if (b.size() == 0) throw Error(Errc::ShapeMismatch, "empty batch");
  if (static_cast<std::size_t>(b.x.rows()) != s.input ||
      static_cast<std::size_t>(b.x.cols()) != b.size()) {
    throw Error(Errc::ShapeMismatch, "batch features do not match model input");
  }
  for (int y : b.y) {
    if (y < 0 || static_cast<std::size_t>(y) >= s.classes) {
      throw Error(Errc::ShapeMismatch, "label outside the model's classes");
    }
  }
}

inline Trace run(const ModelShape& s, const Eigen::VectorXd& flat, const Batch& b) {
  check_batch(s, b);
  const Layers L(s, flat);
  Trace t;
  t.a1 = (L.w1 * b.x).colwise() + L.b1;
  t.h1 = t.a1.unaryExpr(&elu);
  t.a2 = (L.w2 * t.h1).colwise() + L.b2;
  t.h2 = t.a2.unaryExpr(&elu);
  t.z = (L.w3 * t.h2).colwise() + L.b3;

  t.p.resize(t.z.rows(), t.z.cols());
  double total = 0.0;
  for (Eigen::Index c = 0; c < t.z.cols(); ++c) {
    const double m = t.z.col(c).maxCoeff();
    const Eigen::VectorXd e = (t.z.col(c).array() - m).exp().matrix();
    const double sum = e.sum();
    t.p.col(c) = e / sum;
    total += m + std::log(sum) - t.z(b.y[static_cast<std::size_t>(c)], c);
  }
  t.loss = total / static_cast<double>(b.size());
  return t;
}

/// Backward-pass intermediates needed again by the Hessian-vector product.
struct Backward {
  Eigen::MatrixXd dz, dh2, da2, dh1, da1;
  Eigen::VectorXd grad;
};

inline Backward backward(const ModelShape& s, const Eigen::VectorXd& flat, const Batch& b,
                         const Trace& t) {
  const Layers L(s, flat);
  const double n = static_cast<double>(b.size());
  Backward g;
  g.dz = t.p;
  for (std::size_t c = 0; c < b.size(); ++c) g.dz(b.y[c], static_cast<Eigen::Index>(c)) -= 1.0;
  g.dz /= n;
  g.dh2 = L.w3.transpose() * g.dz;
  g.da2 = g.dh2.cwiseProduct(t.a2.unaryExpr(&elu_d1));
  g.dh1 = L.w2.transpose() * g.da2;
  g.da1 = g.dh1.cwiseProduct(t.a1.unaryExpr(&elu_d1));

  g.grad.resize(flat.size());
  auto put = [&](std::size_t offset, const Eigen::MatrixXd& m) {
    g.grad.segment(static_cast<Eigen::Index>(offset), m.size()) =
        Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
  };
  put(s.w1_offset(), g.da1 * b.x.transpose());
  put(s.b1_offset(), g.da1.rowwise().sum());
  put(s.w2_offset(), g.da2 * t.h1.transpose());
  put(s.b2_offset(), g.da2.rowwise().sum());
  put(s.w3_offset(), g.dz * t.h2.transpose());
  put(s.b3_offset(), g.dz.rowwise().sum());
  return g;
}

/// Exact H·v by forward-mode differentiation of the backward pass
/// (Pearlmutter's R-operator) through ELU and softmax cross-entropy.
inline Eigen::VectorXd hvp_exact(const ModelShape& s, const Eigen::VectorXd& flat, const Batch& b,
                                 const Eigen::VectorXd& v) {
  const Layers L(s, flat);
  const Layers V(s, v);
  const Trace t = run(s, flat, b);
  const Backward g = backward(s, flat, b, t);
  const double n = static_cast<double>(b.size());

  const Eigen::MatrixXd d1a1 = t.a1.unaryExpr(&elu_d1);
  const Eigen::MatrixXd d1a2 = t.a2.unaryExpr(&elu_d1);

  const Eigen::MatrixXd ra1 = (V.w1 * b.x).colwise() + V.b1;
  const Eigen::MatrixXd rh1 = d1a1.cwiseProduct(ra1);
  const Eigen::MatrixXd ra2 = ((V.w2 * t.h1 + L.w2 * rh1).colwise() + V.b2).eval();
  const Eigen::MatrixXd rh2 = d1a2.cwiseProduct(ra2);
  const Eigen::MatrixXd rz = ((V.w3 * t.h2 + L.w3 * rh2).colwise() + V.b3).eval();
  const Eigen::RowVectorXd pz = t.p.cwiseProduct(rz).colwise().sum();
  const Eigen::MatrixXd rp = t.p.cwiseProduct(rz - Eigen::MatrixXd::Ones(rz.rows(), 1) * pz);

  const Eigen::MatrixXd rdz = rp / n;
  const Eigen::MatrixXd rdh2 = V.w3.transpose() * g.dz + L.w3.transpose() * rdz;
  const Eigen::MatrixXd rda2 =
      rdh2.cwiseProduct(d1a2) + g.dh2.cwiseProduct(t.a2.unaryExpr(&elu_d2)).cwiseProduct(ra2);
  const Eigen::MatrixXd rdh1 = V.w2.transpose() * g.da2 + L.w2.transpose() * rda2;
  const Eigen::MatrixXd rda1 =
      rdh1.cwiseProduct(d1a1) + g.dh1.cwiseProduct(t.a1.unaryExpr(&elu_d2)).cwiseProduct(ra1);

  Eigen::VectorXd out(flat.size());
  auto put = [&](std::size_t offset, const Eigen::MatrixXd& m) {
    out.segment(static_cast<Eigen::Index>(offset), m.size()) =
        Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
  };
  put(s.w1_offset(), rda1 * b.x.transpose());
  put(s.b1_offset(), rda1.rowwise().sum());
  put(s.w2_offset(), rda2 * t.h1.transpose() + g.da2 * rh1.transpose());
  put(s.b2_offset(), rda2.rowwise().sum());
  put(s.w3_offset(), rdz * t.h2.transpose() + g.dz * rh2.transpose());
  put(s.b3_offset(), rdz.rowwise().sum());
  return out;
}

inline Eigen::VectorXd gradient(const ModelShape& s, const Eigen::VectorXd& flat, const Batch& b) {
  return backward(s, flat, b, run(s, flat, b)).grad;
}

/// Symmetric difference of gradients along v/|v| with step
/// eps = 1e-4·(1+|v|), rescaled by |v|.
inline Eigen::VectorXd hvp_fd(const ModelShape& s, const Eigen::VectorXd& flat, const Batch& b,
                              const Eigen::VectorXd& v) {
  const double norm = v.norm();
  if (norm == 0.0) return Eigen::VectorXd::Zero(flat.size());
  const double eps = 1e-4 * (1.0 + norm);
  const Eigen::VectorXd dir = v / norm;
  const Eigen::VectorXd plus = gradient(s, flat + eps * dir, b);
  const Eigen::VectorXd minus = gradient(s, flat - eps * dir, b);
  return (plus - minus) * (norm / (2.0 * eps));
}

}  // namespace mlp

struct ForwardResult {
  Eigen::MatrixXd logits;
  double loss = 0.0;
};

inline ForwardResult forward(const ModelParams& params, const Batch& batch) {
  auto t = mlp::run(params.shape(), params.flat(), batch);
  return {std::move(t.z), t.loss};
}

struct LossGrad {
  double loss = 0.0;
  Eigen::VectorXd grad;
};

inline LossGrad loss_and_gradient(const ModelParams& params, const Batch& batch) {
  const auto t = mlp::run(params.shape(), params.flat(), batch);
  return {t.loss, mlp::backward(params.shape(), params.flat(), batch, t).grad};
}

inline Eigen::VectorXd hessian_vector_product(const ModelParams& params, const Batch& batch,
                                              const Eigen::VectorXd& v,
                                              HvpMode mode = HvpMode::Exact) {
  if (v.size() != params.flat().size()) throw Error(Errc::ShapeMismatch, "direction size");
  return mode == HvpMode::Exact ? mlp::hvp_exact(params.shape(), params.flat(), batch, v)
                                : mlp::hvp_fd(params.shape(), params.flat(), batch, v);
}

// ---------------------------------------------------------------------------
// Meta-gradient
// ---------------------------------------------------------------------------

/// Anything exposing a stochastic gradient and a Hessian-vector product on a
/// batch type can be meta-differentiated.
template <class O>
concept MetaObjective = requires(const O& o, const Eigen::VectorXd& theta,
                                 const typename O::batch_type& b) {
  { o.gradient(theta, b) } -> std::convertible_to<Eigen::VectorXd>;
  { o.hessian_vector(theta, b, theta) } -> std::convertible_to<Eigen::VectorXd>;
};

/// (I - beta·H(theta; d2)) · grad(theta - beta·grad(theta; d0); d1)
template <MetaObjective O>
Eigen::VectorXd meta_gradient(const O& objective, const Eigen::VectorXd& theta, double beta,
                              const typename O::batch_type& d0,
                              const typename O::batch_type& d1,
                              const typename O::batch_type& d2) {
  if (beta == 0.0) return objective.gradient(theta, d1);
  const Eigen::VectorXd inner = theta - beta * objective.gradient(theta, d0);
  const Eigen::VectorXd outer = objective.gradient(inner, d1);
  return outer - beta * objective.hessian_vector(theta, d2, outer);
}

class MlpObjective {
 public:
  using batch_type = Batch;

  explicit MlpObjective(ModelShape shape, HvpMode mode = HvpMode::Exact)
      : shape_(shape), mode_(mode) {}

  Eigen::VectorXd gradient(const Eigen::VectorXd& theta, const Batch& b) const {
    return mlp::gradient(shape_, theta, b);
  }
  Eigen::VectorXd hessian_vector(const Eigen::VectorXd& theta, const Batch& b,
                                 const Eigen::VectorXd& v) const {
    return mode_ == HvpMode::Exact ? mlp::hvp_exact(shape_, theta, b, v)
                                   : mlp::hvp_fd(shape_, theta, b, v);
  }

 private:
  ModelShape shape_;
  HvpMode mode_;
};

inline Eigen::VectorXd meta_gradient(const ModelParams& params, const MetaHyper& hyper,
                                     const Batch& d0, const Batch& d1, const Batch& d2) {
  return meta_gradient(MlpObjective(params.shape(), hyper.hvp), params.flat(), hyper.beta, d0, d1,
                       d2);
}

// ---------------------------------------------------------------------------
// Local training
// ---------------------------------------------------------------------------

struct RoundContribution {
  double u = 0.0;
  double u_raw = 0.0;
  std::vector<double> grad_norms;
  bool clamped = false;
};

struct LocalUpdate {
  ModelParams params;
  RoundContribution contribution;
};

namespace detail {

/// Three batches of `size` rows: disjoint when the pool holds 3·size rows,
/// otherwise each drawn independently with replacement.
inline std::array<std::vector<std::size_t>, 3> draw_batches(std::size_t pool, std::size_t size,
                                                            Rng& rng) {
  std::array<std::vector<std::size_t>, 3> out;
  if (pool >= 3 * size) {
    std::vector<std::size_t> perm(pool);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = 0; i < 3 * size; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool - 1);
      std::swap(perm[i], perm[pick(rng)]);
    }
    for (std::size_t k = 0; k < 3; ++k) {
      out[k].assign(perm.begin() + static_cast<std::ptrdiff_t>(k * size),
                    perm.begin() + static_cast<std::ptrdiff_t>((k + 1) * size));
    }
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, pool - 1);
    for (auto& batch : out) {
      batch.resize(size);
      for (auto& r : batch) r = pick(rng);
    }
  }
  return out;
}

}  // namespace detail

/// Runs hyper.tau meta-gradient steps on `train` and accumulates the
/// training contribution u = sum_t |g_t|^2 - 2(1 + 1/sqrt(|D|))|g_t| with
/// |D| the local training set size, clamped to [-1, 1].
inline LocalUpdate local_update(const ModelParams& params, const MetaHyper& hyper,
                                const Dataset& train, Rng& rng) {
  LocalUpdate out{params, {}};
  if (hyper.tau <= 0) return out;
  if (train.empty()) throw Error(Errc::InvalidParam, "local_update needs training samples");
  if (hyper.batch_size == 0) throw Error(Errc::InvalidParam, "batch_size must be positive");

  const MlpObjective objective(params.shape(), hyper.hvp);
  const double penalty = 2.0 * (1.0 + 1.0 / std::sqrt(static_cast<double>(train.size())));
  Eigen::VectorXd theta = params.flat();
  for (int t = 0; t < hyper.tau; ++t) {
    const auto rows = detail::draw_batches(train.size(), hyper.batch_size, rng);
    const Eigen::VectorXd g =
        meta_gradient(objective, theta, hyper.beta, make_batch(train, rows[0]),
                      make_batch(train, rows[1]), make_batch(train, rows[2]));
    const double norm = g.norm();
    out.contribution.grad_norms.push_back(norm);
    out.contribution.u_raw += norm * norm - penalty * norm;
    theta -= hyper.alpha * g;
  }
  out.contribution.u = std::clamp(out.contribution.u_raw, -1.0, 1.0);
  out.contribution.clamped = out.contribution.u != out.contribution.u_raw;
  out.params = ModelParams(params.shape(), std::move(theta));
  return out;
}

/// Unweighted mean of the models.
inline ModelParams aggregate(std::span<const ModelParams> models) {
  if (models.empty()) throw Error(Errc::EmptyCoalition, "nothing to aggregate");
  Eigen::VectorXd sum = models.front().flat();
  for (std::size_t i = 1; i < models.size(); ++i) {
    if (!(models[i].shape() == models.front().shape())) {
      throw Error(Errc::ShapeMismatch, "aggregating models of different shapes");
    }
    sum += models[i].flat();
  }
  return ModelParams(models.front().shape(), sum / static_cast<double>(models.size()));
}

/// `steps` plain gradient steps of size beta on the support loss.
inline ModelParams personalize(const ModelParams& params, const MetaHyper& hyper,
                               const Batch& support, int steps) {
  if (steps <= 0) return params;
  Eigen::VectorXd theta = params.flat();
  for (int s = 0; s < steps; ++s) theta -= hyper.beta * mlp::gradient(params.shape(), theta, support);
  return ModelParams(params.shape(), std::move(theta));
}

inline ModelParams personalize(const ModelParams& params, const MetaHyper& hyper,
                               const Dataset& support, int steps) {
  if (steps <= 0) return params;
  if (support.empty()) throw Error(Errc::InvalidParam, "empty personalization support");
  return personalize(params, hyper, full_batch(support), steps);
}

struct Embedding {
  Eigen::VectorXd vector;
  int round = 0;
  std::size_t owner = 0;
};

/// Mean activation of the last hidden layer over the probe samples.
inline Eigen::VectorXd embed(const ModelParams& params, const Batch& probe) {
  const auto t = mlp::run(params.shape(), params.flat(), probe);
  return t.h2.rowwise().mean();
}

inline Eigen::VectorXd embed(const ModelParams& params, const Dataset& probe) {
  return embed(params, full_batch(probe));
}

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t count = 0;
};

inline Evaluation evaluate(const ModelParams& params, const Dataset& ds) {
  if (ds.empty()) return {};
  const Batch b = full_batch(ds);
  const auto t = mlp::run(params.shape(), params.flat(), b);
  std::size_t correct = 0;
  for (Eigen::Index c = 0; c < t.z.cols(); ++c) {
    Eigen::Index arg = 0;
    t.z.col(c).maxCoeff(&arg);
    if (arg == b.y[static_cast<std::size_t>(c)]) ++correct;
  }
  return {static_cast<double>(correct) / static_cast<double>(ds.size()), t.loss, ds.size()};
}

}  // namespace gfml
