#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "simulmt/corpus.hpp"
#include "simulmt/error.hpp"
#include "simulmt/rng.hpp"
#include "simulmt/seq2seq.hpp"

namespace simulmt {

/// Adam over any parameter struct exposing visit(f(name, Tensor&)).
template <typename T>
class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  template <typename Params>
  void step(Params& params, Params& grads, double lr) {
    std::vector<Tensor<T>*> p, g;
    params.visit([&](const std::string&, Tensor<T>& t) { p.push_back(&t); });
    grads.visit([&](const std::string&, Tensor<T>& t) { g.push_back(&t); });
    if (m_.empty()) {
      for (auto* t : p) {
        m_.emplace_back(t->size(), T{0});
        v_.emplace_back(t->size(), T{0});
      }
    }
    ++t_;
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T c1 = static_cast<T>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const T c2 = static_cast<T>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
    const T step = static_cast<T>(lr);
    const T eps = static_cast<T>(eps_);
    for (std::size_t k = 0; k < p.size(); ++k) {
      T* pv = p[k]->data();
      const T* gv = g[k]->data();
      T* mv = m_[k].data();
      T* vv = v_[k].data();
      for (std::size_t i = 0; i < p[k]->size(); ++i) {
        mv[i] = b1 * mv[i] + (T{1} - b1) * gv[i];
        vv[i] = b2 * vv[i] + (T{1} - b2) * gv[i] * gv[i];
        const T mhat = mv[i] / c1;
        const T vhat = vv[i] / c2;
        pv[i] -= step * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

/// Linear warmup to `peak`, then inverse square-root decay.
inline double inverse_sqrt_lr(double peak, std::uint64_t step, std::uint64_t warmup) {
  if (warmup == 0) return peak;
  const double s = static_cast<double>(std::max<std::uint64_t>(step, 1));
  const double w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

template <typename Params, typename T>
T global_norm(Params& grads) {
  double acc = 0;
  grads.visit([&](const std::string&, Tensor<T>& t) {
    for (T v : t.values()) acc += static_cast<double>(v) * static_cast<double>(v);
  });
  return static_cast<T>(std::sqrt(acc));
}

template <typename Params, typename T>
void scale_grads(Params& grads, T factor) {
  grads.visit([&](const std::string&, Tensor<T>& t) {
    for (T& v : t.values()) v *= factor;
  });
}

struct TrainHyper {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  std::uint64_t warmup_steps = 200;
  std::size_t batch_tokens = 200;
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must be in (0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must be in (0,1)");
    if (batch_tokens == 0) throw ConfigError("train.batch_tokens must be positive");
    if (epochs == 0) throw ConfigError("train.epochs must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm must be positive");
  }
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean nats per predicted token
  std::uint64_t steps = 0;
};

/// Teacher-forced training. Per epoch the pair order is a seeded shuffle;
/// gradients are accumulated over consecutive pairs until `batch_tokens`
/// predicted tokens, averaged per token, clipped by global norm, then
/// applied with Adam.
template <typename T>
TrainReport train(Seq2SeqModel<T>& model, const Corpus& corpus, const TrainHyper& hyper,
                  const std::function<void(std::size_t, double)>& on_epoch = {}) {
  hyper.validate();
  if (corpus.empty()) throw DataError("training corpus is empty");
  Adam<T> adam(hyper.beta1, hyper.beta2, hyper.adam_eps);
  Seq2SeqParams<T> grads(model.config);
  TrainReport report;
  const Rng rng(hyper.seed);

  std::vector<std::size_t> order(corpus.size());
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng epoch_rng = rng.split(epoch + 1);
    epoch_rng.shuffle(order);

    double epoch_loss = 0;
    std::size_t epoch_tokens = 0;
    std::size_t batch_tokens = 0;
    grads.zero();
    auto apply = [&]() {
      if (batch_tokens == 0) return;
      scale_grads<Seq2SeqParams<T>, T>(grads, T{1} / static_cast<T>(batch_tokens));
      const T norm = global_norm<Seq2SeqParams<T>, T>(grads);
      if (!std::isfinite(norm))
        throw TrainingError("gradient diverged (non-finite norm) at step " + std::to_string(report.steps + 1));
      if (norm > static_cast<T>(hyper.clip_norm))
        scale_grads<Seq2SeqParams<T>, T>(grads, static_cast<T>(hyper.clip_norm) / norm);
      ++report.steps;
      adam.step(model.params, grads, inverse_sqrt_lr(hyper.lr, report.steps, hyper.warmup_steps));
      grads.zero();
      batch_tokens = 0;
    };
    for (std::size_t k : order) {
      const LossResult<T> r = forward_backward(model, corpus.pairs[k], &grads);
      if (!std::isfinite(r.loss_sum))
        throw TrainingError("loss diverged (NaN/Inf) at step " + std::to_string(report.steps + 1));
      epoch_loss += static_cast<double>(r.loss_sum);
      epoch_tokens += r.tokens;
      batch_tokens += r.tokens;
      if (batch_tokens >= hyper.batch_tokens) apply();
    }
    apply();
    report.epoch_loss.push_back(epoch_loss / static_cast<double>(epoch_tokens));
    if (on_epoch) on_epoch(epoch + 1, report.epoch_loss.back());
  }
  return report;
}

/// Mean teacher-forced loss per token over a corpus, no gradients.
template <typename T>
double evaluate_loss(const Seq2SeqModel<T>& model, const Corpus& corpus) {
  double loss = 0;
  std::size_t tokens = 0;
  for (const auto& pair : corpus.pairs) {
    const auto r = forward_backward<T>(model, pair, nullptr);
    loss += static_cast<double>(r.loss_sum);
    tokens += r.tokens;
  }
  return tokens ? loss / static_cast<double>(tokens) : 0.0;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel_error = 0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> offenders;
  bool passed() const { return offenders.empty(); }
};

/// |a - n| / max(|a|, |n|, 1e-6). Below a gradient magnitude of 1e-6 the
/// central difference is dominated by rounding, so the floor stops those
/// coordinates from reporting that noise as relative error.
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

inline void check_gradcheck_args(double epsilon, double tolerance) {
  if (!(epsilon >= 1e-5 && epsilon <= 1e-3)) throw ContractError("gradcheck epsilon must be in [1e-5, 1e-3]");
  if (!(tolerance > 0.0)) throw ContractError("gradcheck tolerance must be positive");
}

/// Generic sampled central-difference check. `params` exposes visit();
/// `loss` evaluates the scalar objective at the current parameter values;
/// `analytic` holds its gradient in the same layout.
template <typename Params, typename LossFn>
GradCheckReport sampled_gradient_check(Params& params, const Params& analytic, LossFn&& loss, double epsilon,
                                       double tolerance, std::size_t samples, std::uint64_t seed) {
  std::vector<std::pair<std::string, Tensor<double>*>> p;
  std::vector<const Tensor<double>*> g;
  params.visit([&](const std::string& name, Tensor<double>& t) { p.emplace_back(name, &t); });
  analytic.visit([&](const std::string&, const Tensor<double>& t) { g.push_back(&t); });
  std::size_t total = 0;
  for (auto& [name, t] : p) total += t->size();
  require(total > 0, "no parameters to check");

  Rng rng(seed);
  GradCheckReport report;
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t flat = static_cast<std::size_t>(rng.below(total));
    std::size_t k = 0;
    while (flat >= p[k].second->size()) flat -= p[k++].second->size();
    double& value = (*p[k].second)[flat];
    const double saved = value;
    value = saved + epsilon;
    const double up = loss();
    value = saved - epsilon;
    const double down = loss();
    value = saved;
    GradCheckEntry e{p[k].first, flat, (*g[k])[flat], (up - down) / (2 * epsilon), 0};
    e.rel_error = relative_error(e.analytic, e.numeric);
    ++report.checked;
    if (e.rel_error >= report.max_rel_error) {
      report.max_rel_error = e.rel_error;
      report.worst = e;
    }
    if (e.rel_error > tolerance) report.offenders.push_back(e);
  }
  return report;
}

/// Checks forward_backward's gradient against central differences on a
/// double-precision copy of the model.
template <typename T>
GradCheckReport gradient_check(const Seq2SeqModel<T>& model, const ParallelPair& pair, double epsilon = 1e-5,
                               double tolerance = 1e-3, std::size_t samples = 200, std::uint64_t seed = 7) {
  check_gradcheck_args(epsilon, tolerance);
  if (pair.source.size() > 6 || pair.target.size() > 6)
    throw ContractError("gradient_check expects a small pair (|x|, |y| <= 6)");
  Seq2SeqModel<double> m = model.template cast<double>();
  Seq2SeqParams<double> grads(m.config);
  grads.zero();
  forward_backward<double>(m, pair, &grads);
  auto loss = [&]() { return forward_backward<double>(m, pair, nullptr).loss_sum; };
  return sampled_gradient_check(m.params, grads, loss, epsilon, tolerance, samples, seed);
}

}  // namespace simulmt
