#pragma once

// Incremental decoding under a read/write policy.
//
// Both decoders are resumable state machines driven by advance(enc, finished):
// they consume as much of the currently visible source as they can commit to
// and return. The batch entry points call advance once with the whole source
// and finished=true; a StreamSession calls it after every pushed token. Since
// both go through the same code, online and offline results are identical.
//
// A decision at the newest visible token is only committed when it cannot
// depend on whether the stream has ended. For greedy that means WRITE with a
// non-EOS argmax; anything else waits for the next token or for finish().
// The beam decoder always waits at that point.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "simulmt/corpus.hpp"
#include "simulmt/error.hpp"
#include "simulmt/policy_net.hpp"
#include "simulmt/seq2seq.hpp"

namespace simulmt {

struct PolicyContext {
  std::span<const float> decoder_state;  // s_i at the current visible length
  std::span<const float> encoder_state;  // h_j, latest visible encoder state
  std::size_t i = 1;                     // 1-based target step being decided
  std::size_t j = 1;                     // source tokens read
  bool source_exhausted = false;
};

/// Read/write policy. Implementations must be pure and must return WRITE
/// whenever the source is exhausted.
class ReadWritePolicy {
 public:
  virtual ~ReadWritePolicy() = default;
  virtual Decision decide(const PolicyContext& ctx) const = 0;
};

/// The trained classifier with a calibration threshold delta.
class LearnedPolicy final : public ReadWritePolicy {
 public:
  LearnedPolicy(PolicyParams<float> params, float delta) : params_(std::move(params)), delta_(delta) {
    check_delta(delta);
  }
  Decision decide(const PolicyContext& ctx) const override {
    const float p = write_probability<float>(params_, ctx.decoder_state, ctx.encoder_state);
    if (ctx.source_exhausted) return {p, Action::write, delta_};
    return threshold_decision(p, delta_);
  }
  float delta() const { return delta_; }
  const PolicyParams<float>& params() const { return params_; }

 private:
  PolicyParams<float> params_;
  float delta_;
};

/// WRITE iff j >= i + k - 1 or the source is exhausted, i.e. g(i) = min(i+k-1, |x|).
inline Decision wait_k_decide(std::size_t k, std::size_t i, std::size_t j, bool source_exhausted) {
  require(i >= 1 && j >= 1, "wait-k needs i >= 1 and j >= 1");
  const bool write = source_exhausted || j + 1 >= i + k;
  return {write ? 1.0f : 0.0f, write ? Action::write : Action::read, 0.5f};
}

class WaitKPolicy final : public ReadWritePolicy {
 public:
  explicit WaitKPolicy(std::size_t k) : k_(k) {
    if (k < 1) throw ConfigError("wait-k needs k >= 1");
  }
  Decision decide(const PolicyContext& ctx) const override {
    return wait_k_decide(k_, ctx.i, ctx.j, ctx.source_exhausted);
  }
  std::size_t k() const { return k_; }

 private:
  std::size_t k_;
};

/// Reads the whole source before writing anything: non-streaming behaviour.
class ForcedReadPolicy final : public ReadWritePolicy {
 public:
  Decision decide(const PolicyContext& ctx) const override {
    return ctx.source_exhausted ? Decision{1.0f, Action::write, 0.5f} : Decision{0.0f, Action::read, 0.5f};
  }
};

/// Writes whenever asked.
class AlwaysWritePolicy final : public ReadWritePolicy {
 public:
  Decision decide(const PolicyContext&) const override { return {1.0f, Action::write, 0.5f}; }
};

struct TraceRecord {
  std::size_t i = 0;
  std::size_t j = 0;
  float p_write = 0;
  Action action = Action::read;
  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct DecodeResult {
  std::vector<TokenId> tokens;       // without EOS
  std::vector<std::size_t> delays;   // g(i): source tokens read when token i was written
  std::vector<TraceRecord> trace;
  std::size_t reads_total = 0;
  std::size_t decoder_calls = 0;
  bool eos = false;                  // terminated by EOS (as opposed to the length cap)
  bool truncated = false;
  float logprob = 0;

  /// Decoder output steps, counting the EOS step when one was taken.
  std::size_t steps() const { return tokens.size() + (eos ? 1 : 0); }

  friend bool operator==(const DecodeResult&, const DecodeResult&) = default;
};

struct DecodeOptions {
  std::size_t beam_size = 1;
  std::size_t max_len_factor = 2;

  std::size_t length_cap(std::size_t source_len) const { return max_len_factor * source_len + 10; }
};

inline void write_trace(std::ostream& out, std::size_t pair_id, const std::vector<TraceRecord>& trace) {
  for (const auto& r : trace)
    out << pair_id << ' ' << r.i << ' ' << r.j << ' ' << r.p_write << ' ' << to_string(r.action) << '\n';
}

namespace detail {

inline void require_causal(const Seq2SeqModel<float>& m) {
  if (m.config.encoder_mode != EncoderMode::causal)
    throw ContractError("streaming decoding needs a causal-encoder model");
}

/// Candidate continuations of one distribution, best first; ties by token id.
inline std::vector<std::pair<TokenId, float>> top_tokens(std::span<const float> logp, std::size_t k, bool allow_eos) {
  std::vector<std::pair<TokenId, float>> all;
  all.reserve(logp.size());
  for (std::size_t v = 0; v < logp.size(); ++v) {
    if (!allow_eos && static_cast<TokenId>(v) == kEos) continue;
    all.emplace_back(static_cast<TokenId>(v), logp[v]);
  }
  k = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                    [](const auto& a, const auto& b) { return a.second > b.second || (a.second == b.second && a.first < b.first); });
  all.resize(k);
  return all;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Greedy

class GreedyStreamer {
 public:
  GreedyStreamer(const Seq2SeqModel<float>& model, const ReadWritePolicy& policy, DecodeOptions options = {})
      : model_(&model), policy_(&policy), options_(options) {
    detail::require_causal(model);
    state_ = initial_state(model);
  }

  /// Progresses as far as the visible source allows.
  void advance(const EncoderStates<float>& enc, bool finished) {
    const std::size_t avail = enc.length();
    if (done_) return;
    if (j_ == 0) {
      if (avail == 0) {
        if (finished) throw LengthError("source sequence is empty");
        return;
      }
      j_ = 1;
    }
    std::vector<float> logp(model_->config.target_vocab_size);
    while (!done_) {
      if (out_.tokens.size() >= options_.length_cap(avail)) {
        if (!finished) return;
        out_.truncated = true;
        break;
      }
      const bool exhausted = finished && j_ == avail;
      const bool frontier = !finished && j_ == avail;
      if (!pending_) {
        pending_ = detail::step_impl<float>(*model_, last_, state_, enc, j_, nullptr);
        ++out_.decoder_calls;
      }
      const std::size_t i = out_.tokens.size() + 1;
      Decision d = policy_->decide({pending_->decoder_state, enc.state(j_ - 1), i, j_, exhausted});
      if (exhausted) d.action = Action::write;

      if (d.action == Action::read) {
        if (frontier) return;
        out_.trace.push_back({i, j_, d.p_write, Action::read});
        ++j_;
        pending_.reset();
        continue;
      }
      TokenId token;
      if (exhausted) {
        token = static_cast<TokenId>(argmax<float>(pending_->logits));
      } else {
        const auto best = static_cast<TokenId>(argmax<float>(pending_->logits));
        if (best == kEos) {
          if (frontier) return;
          std::vector<float> masked = pending_->logits;
          masked[static_cast<std::size_t>(kEos)] = -std::numeric_limits<float>::infinity();
          token = static_cast<TokenId>(argmax<float>(masked));
        } else {
          token = best;
        }
      }
      log_softmax<float>(pending_->logits, logp);
      out_.logprob += logp[static_cast<std::size_t>(token)];
      out_.trace.push_back({i, j_, d.p_write, Action::write});
      state_ = std::move(pending_->state);
      pending_.reset();
      last_ = token;
      if (token == kEos) {
        out_.eos = true;
        break;
      }
      out_.tokens.push_back(token);
      out_.delays.push_back(j_);
    }
    done_ = true;
    out_.reads_total = j_;
  }

  bool done() const { return done_; }
  const std::vector<TokenId>& committed() const { return out_.tokens; }
  const DecodeResult& result() const { return out_; }

 private:
  const Seq2SeqModel<float>* model_;
  const ReadWritePolicy* policy_;
  DecodeOptions options_;
  DecoderState<float> state_;
  std::optional<StepOutput<float>> pending_;
  TokenId last_ = kBos;
  std::size_t j_ = 0;
  bool done_ = false;
  DecodeResult out_;
};

// ---------------------------------------------------------------------------
// Beam

struct Hypothesis {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> delays;
  float logprob = 0;
  DecoderState<float> state;
  TokenId last = kBos;
  std::size_t reads = 0;
  bool finished = false;
  bool eos = false;
  bool truncated = false;
  std::vector<TraceRecord> trace;
  std::optional<StepOutput<float>> pending;

  std::size_t steps() const { return tokens.size() + (eos ? 1 : 0); }
  float normalized_score() const { return logprob / static_cast<float>(std::max<std::size_t>(1, steps())); }
};

struct BeamIteration {
  std::size_t j = 0;
  std::size_t live = 0;
  std::size_t write_classified = 0;
  bool synchronized = true;
};

struct BeamTrace {
  std::vector<BeamIteration> iterations;
  std::size_t violations = 0;
};

class BeamStreamer {
 public:
  BeamStreamer(const Seq2SeqModel<float>& model, const ReadWritePolicy& policy, DecodeOptions options = {})
      : model_(&model), policy_(&policy), options_(options) {
    detail::require_causal(model);
    if (options.beam_size < 1) throw ConfigError("beam_size must be >= 1");
  }

  void advance(const EncoderStates<float>& enc, bool finished) {
    const std::size_t avail = enc.length();
    if (done_) return;
    if (j_ == 0) {
      if (avail == 0) {
        if (finished) throw LengthError("source sequence is empty");
        return;
      }
      j_ = 1;
      Hypothesis root;
      root.state = initial_state(*model_);
      root.reads = 1;
      live_.push_back(std::move(root));
    }
    const std::size_t k = options_.beam_size;
    std::vector<float> logp(model_->config.target_vocab_size);
    while (!done_) {
      if (!finished && j_ == avail) return;
      const bool exhausted = finished && j_ == avail;
      const std::size_t cap = options_.length_cap(avail);
      // The cap is provisional until the source is finished.
      if (!finished && std::any_of(live_.begin(), live_.end(), [&](const Hypothesis& h) { return h.tokens.size() >= cap; }))
        return;

      BeamIteration it{j_, live_.size(), 0, true};
      for (const auto& h : live_)
        if (h.reads != j_) it.synchronized = false;
      if (!it.synchronized) ++trace_.violations;

      // Hypotheses at the length cap leave the beam.
      for (auto& h : live_) {
        if (h.tokens.size() >= cap) {
          h.finished = true;
          h.truncated = true;
          h.pending.reset();
          finished_.push_back(std::move(h));
        }
      }
      std::erase_if(live_, [](const Hypothesis& h) { return h.finished; });
      if (finished_.size() >= k || live_.empty()) {
        trace_.iterations.push_back(it);
        break;
      }

      std::vector<Decision> decisions;
      for (auto& h : live_) {
        if (!h.pending) {
          h.pending = detail::step_impl<float>(*model_, h.last, h.state, enc, j_, nullptr);
          ++decoder_calls_;
        }
        Decision d = policy_->decide({h.pending->decoder_state, enc.state(j_ - 1), h.tokens.size() + 1, j_, exhausted});
        if (exhausted) d.action = Action::write;
        it.write_classified += d.action == Action::write;
        decisions.push_back(d);
      }
      trace_.iterations.push_back(it);

      if (it.write_classified == 0) {
        for (std::size_t n = 0; n < live_.size(); ++n) {
          auto& h = live_[n];
          h.trace.push_back({h.tokens.size() + 1, j_, decisions[n].p_write, Action::read});
          h.pending.reset();
          h.reads = j_ + 1;
        }
        ++j_;
        continue;
      }

      std::vector<Hypothesis> candidates;
      for (std::size_t n = 0; n < live_.size(); ++n) {
        Hypothesis& h = live_[n];
        if (decisions[n].action == Action::read) {
          candidates.push_back(std::move(h));
          continue;
        }
        log_softmax<float>(h.pending->logits, logp);
        for (const auto& [token, lp] : detail::top_tokens(logp, k, exhausted)) {
          Hypothesis c;
          c.tokens = h.tokens;
          c.delays = h.delays;
          c.trace = h.trace;
          c.trace.push_back({h.tokens.size() + 1, j_, decisions[n].p_write, Action::write});
          c.logprob = h.logprob + lp;
          c.state = h.pending->state;
          c.last = token;
          c.reads = j_;
          if (token == kEos) {
            c.finished = true;
            c.eos = true;
          } else {
            c.tokens.push_back(token);
            c.delays.push_back(j_);
          }
          candidates.push_back(std::move(c));
        }
      }
      std::stable_sort(candidates.begin(), candidates.end(),
                       [](const Hypothesis& a, const Hypothesis& b) { return a.logprob > b.logprob; });
      if (candidates.size() > k) candidates.resize(k);
      live_.clear();
      for (auto& c : candidates) (c.finished ? finished_ : live_).push_back(std::move(c));
      if (finished_.size() >= k || live_.empty()) break;
    }
    done_ = true;
  }

  bool done() const { return done_; }

  /// Longest prefix shared by every live and finished hypothesis.
  std::vector<TokenId> committed() const {
    const Hypothesis* first = !live_.empty() ? &live_.front() : (!finished_.empty() ? &finished_.front() : nullptr);
    if (!first) return {};
    if (done_) return best().tokens;
    std::size_t n = first->tokens.size();
    auto shrink = [&](const Hypothesis& h) {
      std::size_t m = 0;
      while (m < std::min(n, h.tokens.size()) && h.tokens[m] == first->tokens[m]) ++m;
      n = m;
    };
    for (const auto& h : live_) shrink(h);
    for (const auto& h : finished_) shrink(h);
    return {first->tokens.begin(), first->tokens.begin() + static_cast<std::ptrdiff_t>(n)};
  }

  /// Best by length-normalized score among finished hypotheses (live ones if none finished).
  const Hypothesis& best() const {
    const auto& pool = finished_.empty() ? live_ : finished_;
    require(!pool.empty(), "beam has no hypotheses");
    const Hypothesis* b = &pool.front();
    for (const auto& h : pool)
      if (h.normalized_score() > b->normalized_score()) b = &h;
    return *b;
  }

  DecodeResult result() const {
    const Hypothesis& h = best();
    DecodeResult r;
    r.tokens = h.tokens;
    r.delays = h.delays;
    r.trace = h.trace;
    r.reads_total = j_;
    r.decoder_calls = decoder_calls_;
    r.eos = h.eos;
    r.truncated = h.truncated;
    r.logprob = h.logprob;
    return r;
  }

  const BeamTrace& trace() const { return trace_; }

 private:
  const Seq2SeqModel<float>* model_;
  const ReadWritePolicy* policy_;
  DecodeOptions options_;
  std::vector<Hypothesis> live_;
  std::vector<Hypothesis> finished_;
  std::size_t j_ = 0;
  std::size_t decoder_calls_ = 0;
  bool done_ = false;
  BeamTrace trace_;
};

// ---------------------------------------------------------------------------
// Batch entry points

inline DecodeResult greedy_stream(const Seq2SeqModel<float>& model, const ReadWritePolicy& policy,
                                  std::span<const TokenId> source, std::size_t max_len_factor = 2) {
  detail::require_causal(model);
  const auto enc = encode(model, source);
  GreedyStreamer g(model, policy, {1, max_len_factor});
  g.advance(enc, true);
  return g.result();
}

struct BeamDecodeResult {
  DecodeResult best;
  BeamTrace trace;
};

inline BeamDecodeResult beam_stream(const Seq2SeqModel<float>& model, const ReadWritePolicy& policy,
                                    std::span<const TokenId> source, std::size_t beam_size,
                                    std::size_t max_len_factor = 2) {
  if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
  detail::require_causal(model);
  const auto enc = encode(model, source);
  BeamStreamer b(model, policy, {beam_size, max_len_factor});
  b.advance(enc, true);
  return {b.result(), b.trace()};
}

/// Non-streaming greedy decoding with the whole source visible at every step.
inline DecodeResult greedy_decode(const Seq2SeqModel<float>& model, std::span<const TokenId> source,
                                  std::size_t max_len_factor = 2) {
  const auto enc = encode(model, source);
  const std::size_t n = enc.length();
  const std::size_t cap = max_len_factor * n + 10;
  DecodeResult r;
  r.reads_total = n;
  DecoderState<float> state = initial_state(model);
  TokenId last = kBos;
  std::vector<float> logp(model.config.target_vocab_size);
  while (true) {
    if (r.tokens.size() >= cap) {
      r.truncated = true;
      break;
    }
    auto out = decode_step(model, last, state, enc, n);
    ++r.decoder_calls;
    const auto token = static_cast<TokenId>(argmax<float>(out.logits));
    log_softmax<float>(out.logits, logp);
    r.logprob += logp[static_cast<std::size_t>(token)];
    state = std::move(out.state);
    last = token;
    if (token == kEos) {
      r.eos = true;
      break;
    }
    r.tokens.push_back(token);
    r.delays.push_back(n);
  }
  return r;
}

/// Non-streaming beam search: expand every live hypothesis each round, keep
/// the top k by raw log-probability, retire EOS hypotheses, stop at k
/// finished; rank by log-probability per step.
inline DecodeResult beam_decode(const Seq2SeqModel<float>& model, std::span<const TokenId> source,
                                std::size_t beam_size, std::size_t max_len_factor = 2) {
  if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
  const auto enc = encode(model, source);
  const std::size_t n = enc.length();
  const std::size_t cap = max_len_factor * n + 10;
  struct Hyp {
    std::vector<TokenId> tokens;
    float logprob = 0;
    DecoderState<float> state;
    TokenId last = kBos;
    bool eos = false;
    bool truncated = false;
    float score() const { return logprob / static_cast<float>(std::max<std::size_t>(1, tokens.size() + (eos ? 1 : 0))); }
  };
  std::vector<Hyp> live{{{}, 0.0f, initial_state(model), kBos, false, false}}, done;
  std::vector<float> logp(model.config.target_vocab_size);
  while (done.size() < beam_size && !live.empty()) {
    std::vector<Hyp> cand;
    for (auto& h : live) {
      if (h.tokens.size() >= cap) {
        h.truncated = true;
        done.push_back(std::move(h));
        continue;
      }
      auto out = decode_step(model, h.last, h.state, enc, n);
      log_softmax<float>(out.logits, logp);
      for (const auto& [token, lp] : detail::top_tokens(logp, beam_size, true)) {
        Hyp c{h.tokens, h.logprob + lp, out.state, token, token == kEos, false};
        if (token != kEos) c.tokens.push_back(token);
        cand.push_back(std::move(c));
      }
    }
    if (done.size() >= beam_size) break;
    std::stable_sort(cand.begin(), cand.end(), [](const Hyp& a, const Hyp& b) { return a.logprob > b.logprob; });
    if (cand.size() > beam_size) cand.resize(beam_size);
    live.clear();
    for (auto& c : cand) (c.eos ? done : live).push_back(std::move(c));
  }
  const auto& pool = done.empty() ? live : done;
  const Hyp* b = &pool.front();
  for (const auto& h : pool)
    if (h.score() > b->score()) b = &h;
  DecodeResult r;
  r.tokens = b->tokens;
  r.delays.assign(b->tokens.size(), n);
  r.reads_total = n;
  r.eos = b->eos;
  r.truncated = b->truncated;
  r.logprob = b->logprob;
  return r;
}

// ---------------------------------------------------------------------------
// Session

enum class DecoderKind { greedy, beam };

/// Token-by-token driver. Output returned by pull_outputs only ever grows.
class StreamSession {
 public:
  StreamSession(const Seq2SeqModel<float>& model, const ReadWritePolicy& policy, DecoderKind kind,
                DecodeOptions options = {})
      : encoder_(model), kind_(kind) {
    if (kind == DecoderKind::greedy)
      greedy_ = std::make_unique<GreedyStreamer>(model, policy, options);
    else
      beam_ = std::make_unique<BeamStreamer>(model, policy, options);
  }

  void push_token(TokenId id) {
    if (finished_) throw SessionError("push_token after finish");
    encoder_.push(id);
    advance();
  }

  void finish() {
    if (finished_) throw SessionError("finish called twice");
    finished_ = true;
    advance();
  }

  /// Tokens committed so far.
  std::vector<TokenId> pull_outputs() const { return committed_; }

  bool finished() const { return finished_; }

  DecodeResult result() const {
    if (!finished_) throw SessionError("result requested before finish");
    return greedy_ ? greedy_->result() : beam_->result();
  }

 private:
  void advance() {
    if (greedy_) {
      greedy_->advance(encoder_.states(), finished_);
      commit(greedy_->committed());
    } else {
      beam_->advance(encoder_.states(), finished_);
      commit(beam_->committed());
    }
  }

  void commit(const std::vector<TokenId>& now) {
    if (now.size() < committed_.size() || !std::equal(committed_.begin(), committed_.end(), now.begin()))
      throw SessionError("decoder retracted committed output");
    committed_ = now;
  }

  CausalEncoderStream<float> encoder_;
  DecoderKind kind_;
  std::unique_ptr<GreedyStreamer> greedy_;
  std::unique_ptr<BeamStreamer> beam_;
  std::vector<TokenId> committed_;
  bool finished_ = false;
};

// ---------------------------------------------------------------------------
// Teacher-forced policy walk

/// Replays the greedy policy walk with the reference target fed to the
/// decoder: for each i, starting from the previous offset (1 for i = 1),
/// read while p_write < delta and j < |x|. Returns the offsets j_i.
inline std::vector<std::size_t> teacher_forced_offsets(const Seq2SeqModel<float>& model,
                                                       const PolicyParams<float>& policy, const ParallelPair& pair,
                                                       float delta) {
  check_delta(delta);
  const auto enc = encode(model, pair.source);
  const auto states = teacher_forced_states(model, enc, pair.target);
  std::vector<std::size_t> offsets;
  std::size_t j = 1;
  for (std::size_t i = 0; i < pair.target.size(); ++i) {
    const TokenId prev = i == 0 ? kBos : pair.target[i - 1];
    while (j < enc.length()) {
      const auto step = decode_step(model, prev, states[i], enc, j);
      if (write_probability<float>(policy, step.decoder_state, enc.state(j - 1)) >= delta) break;
      ++j;
    }
    offsets.push_back(j);
  }
  return offsets;
}

}  // namespace simulmt
