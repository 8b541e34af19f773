#pragma once

// Read/write classifier on top of a frozen seq2seq model.
//
//   e'(s_i, h_j) = (s_i U) . (h_j V) / sqrt(d_p) + b
//   p_write      = sigmoid(e')
//   action       = WRITE iff p_write >= delta
//
// Trained with class-weighted binary cross-entropy on cells of the
// pseudo-label staircase.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "simulmt/binary_io.hpp"
#include "simulmt/error.hpp"
#include "simulmt/policy_labels.hpp"
#include "simulmt/rng.hpp"
#include "simulmt/seq2seq.hpp"
#include "simulmt/train.hpp"

namespace simulmt {

template <typename T>
struct PolicyParams {
  Tensor<T> U;  // [d_model x d_p], applied to the decoder state
  Tensor<T> V;  // [d_model x d_p], applied to the encoder state
  Tensor<T> b;  // [1]

  PolicyParams() = default;
  PolicyParams(std::size_t d_model, std::size_t d_p) : U({d_model, d_p}), V({d_model, d_p}), b({1}) {
    if (d_p < 4) throw ConfigError("policy.d_p must be >= 4");
  }

  std::size_t d_model() const { return U.rows(); }
  std::size_t d_p() const { return U.cols(); }
  T bias() const { return b[0]; }

  template <typename F>
  void visit(F&& f) {
    f("U", U);
    f("V", V);
    f("b", b);
  }
  template <typename F>
  void visit(F&& f) const {
    f("U", U);
    f("V", V);
    f("b", b);
  }
  void zero() {
    U.fill(T{0});
    V.fill(T{0});
    b.fill(T{0});
  }

  template <typename U2>
  PolicyParams<U2> cast() const {
    PolicyParams<U2> out;
    out.U = U.template cast<U2>();
    out.V = V.template cast<U2>();
    out.b = b.template cast<U2>();
    return out;
  }

  bool all_finite() const { return U.all_finite() && V.all_finite() && b.all_finite(); }
  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

/// U, V ~ U(-1/sqrt(d), 1/sqrt(d)); bias -2 so an untrained policy reads.
template <typename T>
PolicyParams<T> init_policy(std::size_t d_model, std::size_t d_p, std::uint64_t seed, T bias = T(-2)) {
  PolicyParams<T> p(d_model, d_p);
  Rng rng(seed);
  const T scale = T{1} / std::sqrt(static_cast<T>(d_model));
  for (auto* t : {&p.U, &p.V})
    for (auto& v : t->values()) v = static_cast<T>(2.0 * rng.uniform_double() - 1.0) * scale;
  p.b[0] = bias;
  return p;
}

template <typename T>
T energy(const PolicyParams<T>& p, std::span<const T> s, std::span<const T> h) {
  if (s.size() != p.d_model() || h.size() != p.d_model())
    throw ContractError("policy energy: state width " + std::to_string(s.size()) + "/" + std::to_string(h.size()) +
                        " does not match d_model " + std::to_string(p.d_model()));
  std::vector<T> us(p.d_p(), T{0}), vh(p.d_p(), T{0});
  matvec_acc<T>(us, p.U, s);
  matvec_acc<T>(vh, p.V, h);
  return dot<T>(us, vh) / std::sqrt(static_cast<T>(p.d_p())) + p.bias();
}

template <typename T>
T write_probability(const PolicyParams<T>& p, std::span<const T> s, std::span<const T> h) {
  return sigmoid(energy(p, s, h));
}

enum class Action { read, write };

inline const char* to_string(Action a) { return a == Action::write ? "WRITE" : "READ"; }

struct Decision {
  float p_write = 0;
  Action action = Action::read;
  float delta = 0.5f;
  friend bool operator==(const Decision&, const Decision&) = default;
};

inline void check_delta(float delta) {
  if (!(delta > 0.0f && delta < 1.0f)) throw ConfigError("delta must be in (0, 1), got " + std::to_string(delta));
}

/// Threshold rule; a tie (p == delta) writes.
inline Decision threshold_decision(float p_write, float delta) {
  return {p_write, p_write >= delta ? Action::write : Action::read, delta};
}

inline Decision decide(const PolicyParams<float>& p, std::span<const float> s, std::span<const float> h, float delta) {
  check_delta(delta);
  return threshold_decision(write_probability(p, s, h), delta);
}

/// Bernoulli-sampled decision, for studying the stochastic policy only.
inline Decision sample_decision(const PolicyParams<float>& p, std::span<const float> s, std::span<const float> h,
                                Rng& rng) {
  const float pw = write_probability(p, s, h);
  return {pw, rng.uniform() < pw ? Action::write : Action::read, 0.0f};
}

// ---------------------------------------------------------------------------
// Training set

struct PolicyExample {
  std::vector<float> decoder_state;
  std::vector<float> encoder_state;
  std::uint8_t label = 0;
  std::size_t pair = 0;
  std::size_t i = 0;  // 1-based target step
  std::size_t j = 0;  // 1-based visible source length
};

struct PolicyTrainingSet {
  std::vector<PolicyExample> examples;
  double positive_weight = 1.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

namespace detail {

inline std::vector<PolicyExample> pair_examples(const Seq2SeqModel<float>& model, const ParallelPair& pair,
                                                const PolicyLabelMatrix& labels, std::size_t pair_id, bool full_grid) {
  std::vector<PolicyExample> out;
  const auto enc = encode(model, pair.source);
  const auto states = teacher_forced_states(model, enc, pair.target);
  const auto offsets = read_offsets(labels);
  for (std::size_t i = 0; i < pair.target.size(); ++i) {
    const TokenId prev = i == 0 ? kBos : pair.target[i - 1];
    const std::size_t lo = full_grid ? 1 : (i == 0 ? 1 : offsets[i - 1]);
    const std::size_t hi = full_grid ? pair.source.size() : offsets[i];
    for (std::size_t j = lo; j <= hi; ++j) {
      const auto step = decode_step(model, prev, states[i], enc, j);
      auto h = enc.state(j - 1);
      out.push_back({step.decoder_state, {h.begin(), h.end()}, labels(i, j - 1), pair_id, i + 1, j});
    }
  }
  return out;
}

}  // namespace detail

/// Teacher-forced states along each label staircase: for target step i,
/// visible lengths j_{i-1} .. j_i (j_0 = 1). With `full_grid` every cell of
/// the label matrix is emitted instead. Concatenation order is (pair, i, j)
/// regardless of `threads`.
inline PolicyTrainingSet build_training_set(const Seq2SeqModel<float>& model, const Corpus& corpus,
                                            const std::vector<PolicyLabelMatrix>& labels, bool full_grid = false,
                                            std::size_t threads = 1) {
  if (model.config.encoder_mode != EncoderMode::causal)
    throw ContractError("policy features come from the causal (streaming) model");
  if (labels.size() != corpus.size())
    throw DataError("label count " + std::to_string(labels.size()) + " does not match corpus size " +
                    std::to_string(corpus.size()));
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    const auto& p = corpus.pairs[k];
    if (labels[k].target_len != p.target.size() || labels[k].source_len != p.source.size())
      throw DataError("labels for pair " + std::to_string(k) + " have shape " + std::to_string(labels[k].target_len) +
                      "x" + std::to_string(labels[k].source_len) + ", expected " + std::to_string(p.target.size()) +
                      "x" + std::to_string(p.source.size()));
    if (!labels[k].valid()) throw DataError("labels for pair " + std::to_string(k) + " violate the label invariants");
  }

  std::vector<std::vector<PolicyExample>> per_pair(corpus.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k)
      per_pair[k] = detail::pair_examples(model, corpus.pairs[k], labels[k], k, full_grid);
  };
  threads = std::max<std::size_t>(1, std::min(threads, corpus.size()));
  if (threads == 1) {
    work(0, corpus.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (corpus.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back(work, std::min(corpus.size(), t * chunk), std::min(corpus.size(), (t + 1) * chunk));
    for (auto& th : pool) th.join();
  }

  PolicyTrainingSet set;
  for (auto& v : per_pair)
    for (auto& e : v) {
      (e.label ? set.positives : set.negatives)++;
      set.examples.push_back(std::move(e));
    }
  set.positive_weight =
      set.positives == 0 || set.negatives == 0 ? 1.0 : static_cast<double>(set.negatives) / static_cast<double>(set.positives);
  return set;
}

// ---------------------------------------------------------------------------
// Training

struct PolicyHyper {
  double lr = 3e-3;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  std::size_t d_p = 32;
  std::size_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("policy.lr must be >= 0");
    if (epochs == 0) throw ConfigError("policy.epochs must be positive");
    if (d_p < 4) throw ConfigError("policy.d_p must be >= 4");
    if (batch_size == 0) throw ConfigError("policy.batch_size must be positive");
  }
};

struct ClassifierMetrics {
  double accuracy = 0;
  double precision = 0;
  double recall = 0;
  std::size_t count = 0;
};

struct PolicyReport {
  std::vector<double> epoch_loss;
  ClassifierMetrics train_metrics;
  GradCheckReport init_gradcheck;
};

namespace detail {

/// Weighted BCE with logits, stable form: softplus(e) - l*e.
template <typename T>
T weighted_bce(T e, std::uint8_t label, T positive_weight) {
  const T softplus = std::max(e, T{0}) + std::log1p(std::exp(-std::abs(e)));
  const T loss = softplus - (label ? e : T{0});
  return label ? positive_weight * loss : loss;
}

/// Mean weighted loss over `batch`; accumulates d(mean)/dparams into `grads` when non-null.
template <typename T>
T policy_loss(const PolicyParams<T>& p, const std::vector<const PolicyExample*>& batch, T positive_weight,
              PolicyParams<T>* grads) {
  const std::size_t dp = p.d_p();
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dp));
  const T inv_n = T{1} / static_cast<T>(batch.size());
  T total = 0;
  std::vector<T> s, h, us(dp), vh(dp);
  for (const PolicyExample* ex : batch) {
    s.assign(ex->decoder_state.begin(), ex->decoder_state.end());
    h.assign(ex->encoder_state.begin(), ex->encoder_state.end());
    std::fill(us.begin(), us.end(), T{0});
    std::fill(vh.begin(), vh.end(), T{0});
    matvec_acc<T>(us, p.U, s);
    matvec_acc<T>(vh, p.V, h);
    const T e = dot<T>(us, vh) * inv_sqrt + p.bias();
    total += weighted_bce(e, ex->label, positive_weight);
    if (!grads) continue;
    const T w = ex->label ? positive_weight : T{1};
    const T de = w * (sigmoid(e) - static_cast<T>(ex->label)) * inv_n;
    grads->b[0] += de;
    std::vector<T> gu(vh), gv(us);
    for (auto& v : gu) v *= de * inv_sqrt;
    for (auto& v : gv) v *= de * inv_sqrt;
    outer_acc<T>(grads->U, s, gu);
    outer_acc<T>(grads->V, h, gv);
  }
  return total * inv_n;
}

}  // namespace detail

inline ClassifierMetrics evaluate_policy(const PolicyParams<float>& p, const PolicyTrainingSet& set,
                                         float threshold = 0.5f) {
  ClassifierMetrics m;
  std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
  for (const auto& ex : set.examples) {
    const bool pred = write_probability<float>(p, ex.decoder_state, ex.encoder_state) >= threshold;
    const bool gold = ex.label != 0;
    correct += pred == gold;
    tp += pred && gold;
    fp += pred && !gold;
    fn += !pred && gold;
  }
  m.count = set.examples.size();
  m.accuracy = m.count ? static_cast<double>(correct) / static_cast<double>(m.count) : 0.0;
  m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  return m;
}

/// Gradient check of the classifier loss on up to 64 examples, in double.
inline GradCheckReport policy_gradient_check(const PolicyParams<float>& params, const PolicyTrainingSet& set,
                                             double epsilon = 1e-5, double tolerance = 1e-3,
                                             std::size_t samples = 200, std::uint64_t seed = 11) {
  check_gradcheck_args(epsilon, tolerance);
  require(!set.examples.empty(), "policy gradient check needs examples");
  std::vector<const PolicyExample*> batch;
  for (std::size_t k = 0; k < set.examples.size() && batch.size() < 64; ++k) batch.push_back(&set.examples[k]);
  PolicyParams<double> p = params.cast<double>();
  PolicyParams<double> g(p.d_model(), p.d_p());
  g.zero();
  detail::policy_loss<double>(p, batch, set.positive_weight, &g);
  auto loss = [&]() { return detail::policy_loss<double>(p, batch, set.positive_weight, nullptr); };
  return sampled_gradient_check(p, g, loss, epsilon, tolerance, samples, seed);
}

inline std::pair<PolicyParams<float>, PolicyReport> train_policy(const PolicyTrainingSet& set,
                                                                 const PolicyHyper& hyper) {
  hyper.validate();
  if (set.examples.empty()) throw DataError("policy training set is empty");
  const std::size_t d = set.examples.front().decoder_state.size();
  for (const auto& ex : set.examples)
    if (ex.decoder_state.size() != d || ex.encoder_state.size() != d)
      throw DataError("policy example state widths differ");

  const Rng rng(hyper.seed);
  PolicyParams<float> params = init_policy<float>(d, hyper.d_p, rng.split(1).next());
  PolicyReport report;
  report.init_gradcheck = policy_gradient_check(params, set);

  Adam<float> adam(hyper.beta1, hyper.beta2, 1e-8);
  PolicyParams<float> grads(d, hyper.d_p);
  std::vector<std::size_t> order(set.examples.size());
  const auto pw = static_cast<float>(set.positive_weight);
  std::vector<const PolicyExample*> batch;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng epoch_rng = rng.split(100 + epoch);
    epoch_rng.shuffle(order);
    double epoch_loss = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      batch.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + hyper.batch_size); ++k)
        batch.push_back(&set.examples[order[k]]);
      grads.zero();
      const float loss = detail::policy_loss<float>(params, batch, pw, &grads);
      if (!std::isfinite(loss))
        throw TrainingError("policy loss diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                            std::to_string(batches + 1));
      adam.step(params, grads, hyper.lr);
      epoch_loss += loss;
      ++batches;
    }
    report.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
  }
  report.train_metrics = evaluate_policy(params, set);
  return {params, report};
}

// ---------------------------------------------------------------------------
// Policy checkpoints share the ABSM container with kind "policy".

inline void save_policy(const PolicyParams<float>& p, const std::string& path) {
  Container c;
  c.header["kind"] = "policy";
  c.header["config"] = {{"d_model", p.d_model()}, {"d_p", p.d_p()}};
  p.visit([&](const std::string& name, const Tensor<float>& t) { c.tensors.push_back({name, t}); });
  write_container(path, c);
}

inline PolicyParams<float> load_policy(const std::string& path) {
  const Container c = read_container(path);
  std::size_t d = 0, dp = 0;
  try {
    if (c.header.at("kind") != "policy")
      throw FormatError(path + ": checkpoint kind is '" + c.header.at("kind").get<std::string>() +
                        "', expected 'policy'");
    d = c.header.at("config").at("d_model").get<std::size_t>();
    dp = c.header.at("config").at("d_p").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path + ": malformed policy header (" + e.what() + ")");
  }
  PolicyParams<float> p;
  try {
    p = PolicyParams<float>(d, dp);
  } catch (const ConfigError& e) {
    throw CorruptionError(path + ": " + e.what());
  }
  p.visit([&](const std::string& name, Tensor<float>& t) {
    const auto& stored = c.get(name);
    if (stored.shape() != t.shape()) throw CorruptionError(path + ": shape mismatch for tensor '" + name + "'");
    t = stored;
  });
  if (c.tensors.size() != 3) throw CorruptionError(path + ": unexpected tensors in policy checkpoint");
  return p;
}

}  // namespace simulmt
