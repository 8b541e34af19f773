#pragma once

// Desk-scale attentional encoder-decoder.
//
// Encoder: stacked GRU layers. In causal mode each layer is a left-to-right
// GRU of width d_model, so h_j depends on x_1..x_j only. In full mode each
// layer is a bidirectional GRU with two d_model/2 halves concatenated.
//
// Decoder step i (inputs y_{i-1} and the recurrent state):
//   q     = stacked GRU(embed(y_{i-1}), previous layer states)
//   e_j   = q . (h_j W_key) / sqrt(d)          for j <= visible_len
//   alpha = softmax(e)
//   c     = sum_j alpha_j h_j
//   s_i   = tanh([q; c] W_comb + b_comb)        (attentional decoder state)
//   logits = s_i W_out + b_out
//
// The recurrent part of the state depends only on the target prefix, so the
// decoder state at (i, j) is a function of y_{<i} and h_{1..j} alone.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "simulmt/corpus.hpp"
#include "simulmt/error.hpp"
#include "simulmt/rng.hpp"
#include "simulmt/tensor.hpp"

namespace simulmt {

enum class EncoderMode { full, causal };

inline std::string to_string(EncoderMode m) { return m == EncoderMode::full ? "full" : "causal"; }

inline EncoderMode parse_encoder_mode(const std::string& s) {
  if (s == "full") return EncoderMode::full;
  if (s == "causal") return EncoderMode::causal;
  throw ConfigError("encoder_mode must be 'full' or 'causal', got '" + s + "'");
}

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  EncoderMode encoder_mode = EncoderMode::causal;
  std::size_t source_vocab_size = 0;
  std::size_t target_vocab_size = 0;
  std::size_t max_len = 64;

  void validate() const {
    if (d_model < 8 || d_model % 2 != 0) throw ConfigError("model.d_model must be even and >= 8");
    if (n_enc_layers < 1) throw ConfigError("model.n_enc_layers must be >= 1");
    if (n_dec_layers < 1) throw ConfigError("model.n_dec_layers must be >= 1");
    if (source_vocab_size <= Vocab::kReserved) throw ConfigError("model.source_vocab_size too small");
    if (target_vocab_size <= Vocab::kReserved) throw ConfigError("model.target_vocab_size too small");
    if (max_len < 3) throw ConfigError("model.max_len must be >= 3");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// GRU weights, input-major: W is [in x 3h], U is [h x 3h], gate order z, r, n.
template <typename T>
struct GruParams {
  Tensor<T> W;
  Tensor<T> U;
  Tensor<T> b;

  GruParams() = default;
  GruParams(std::size_t in, std::size_t hid) : W({in, 3 * hid}), U({hid, 3 * hid}), b({3 * hid}) {}

  std::size_t input_size() const { return W.rows(); }
  std::size_t hidden_size() const { return U.rows(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".W", W);
    f(prefix + ".U", U);
    f(prefix + ".b", b);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".W", W);
    f(prefix + ".U", U);
    f(prefix + ".b", b);
  }
};

template <typename T>
struct Seq2SeqParams {
  Tensor<T> src_embed;  // [Vs x d]
  Tensor<T> tgt_embed;  // [Vt x d]
  std::vector<GruParams<T>> enc_fwd;
  std::vector<GruParams<T>> enc_bwd;  // full mode only
  std::vector<GruParams<T>> dec;
  Tensor<T> attn_key;      // [d x d]
  Tensor<T> combine;       // [2d x d]
  Tensor<T> combine_bias;  // [d]
  Tensor<T> out_proj;      // [d x Vt]
  Tensor<T> out_bias;      // [Vt]

  Seq2SeqParams() = default;
  explicit Seq2SeqParams(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    src_embed = Tensor<T>({c.source_vocab_size, d});
    tgt_embed = Tensor<T>({c.target_vocab_size, d});
    const bool full = c.encoder_mode == EncoderMode::full;
    for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
      enc_fwd.emplace_back(d, full ? d / 2 : d);
      if (full) enc_bwd.emplace_back(d, d / 2);
    }
    for (std::size_t l = 0; l < c.n_dec_layers; ++l) dec.emplace_back(d, d);
    attn_key = Tensor<T>({d, d});
    combine = Tensor<T>({2 * d, d});
    combine_bias = Tensor<T>({d});
    out_proj = Tensor<T>({d, c.target_vocab_size});
    out_bias = Tensor<T>({c.target_vocab_size});
  }

  /// Calls f(name, tensor) for every parameter in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  void zero() {
    visit([](const std::string&, Tensor<T>& t) { t.fill(T{0}); });
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f("src_embed", self.src_embed);
    f("tgt_embed", self.tgt_embed);
    for (std::size_t l = 0; l < self.enc_fwd.size(); ++l) self.enc_fwd[l].visit("enc." + std::to_string(l) + ".fwd", f);
    for (std::size_t l = 0; l < self.enc_bwd.size(); ++l) self.enc_bwd[l].visit("enc." + std::to_string(l) + ".bwd", f);
    for (std::size_t l = 0; l < self.dec.size(); ++l) self.dec[l].visit("dec." + std::to_string(l), f);
    f("attn_key", self.attn_key);
    f("combine", self.combine);
    f("combine_bias", self.combine_bias);
    f("out_proj", self.out_proj);
    f("out_bias", self.out_bias);
  }
};

template <typename T>
struct Seq2SeqModel {
  ModelConfig config;
  Seq2SeqParams<T> params;
  Vocab source_vocab;
  Vocab target_vocab;

  template <typename U>
  Seq2SeqModel<U> cast() const {
    Seq2SeqModel<U> out;
    out.config = config;
    out.params = Seq2SeqParams<U>(config);
    out.source_vocab = source_vocab;
    out.target_vocab = target_vocab;
    std::vector<const Tensor<T>*> src;
    params.visit([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
    std::size_t k = 0;
    out.params.visit([&](const std::string&, Tensor<U>& t) { t = src[k++]->template cast<U>(); });
    return out;
  }

  bool all_finite() const {
    bool ok = true;
    params.visit([&](const std::string&, const Tensor<T>& t) { ok = ok && t.all_finite(); });
    return ok;
  }

  /// FNV-1a over every tensor, in visit order.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    params.visit([&](const std::string&, const Tensor<T>& t) { h = simulmt::checksum(t, h); });
    return h;
  }
};

/// Random initialization: embeddings U(-0.5, 0.5), matrices U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// biases zero.
template <typename T>
Seq2SeqModel<T> make_model(const ModelConfig& config, const Vocab& source_vocab, const Vocab& target_vocab,
                           std::uint64_t seed) {
  ModelConfig c = config;
  c.source_vocab_size = source_vocab.size();
  c.target_vocab_size = target_vocab.size();
  c.validate();
  Seq2SeqModel<T> m;
  m.config = c;
  m.params = Seq2SeqParams<T>(c);
  m.source_vocab = source_vocab;
  m.target_vocab = target_vocab;
  Rng rng(seed);
  m.params.visit([&](const std::string& name, Tensor<T>& t) {
    const bool is_bias = t.rank() == 1;
    const bool is_embed = name.find("embed") != std::string::npos;
    if (is_bias) return;
    const T scale = is_embed ? T(0.5) : T(1) / std::sqrt(static_cast<T>(t.rows()));
    for (auto& v : t.values()) v = static_cast<T>((2.0 * rng.uniform_double() - 1.0)) * scale;
  });
  return m;
}

// ---------------------------------------------------------------------------
// GRU cell

template <typename T>
struct GruCache {
  std::vector<T> x, h_prev, z, r, n, rh;
};

/// h_out = GRU(x, h). When `cache` is non-null the intermediates needed by
/// gru_backward are stored there.
template <typename T>
void gru_step(const GruParams<T>& p, std::span<const T> x, std::span<const T> h, std::span<T> h_out,
              GruCache<T>* cache) {
  const std::size_t H = p.hidden_size();
  std::vector<T> a(p.b.values());
  matvec_acc<T>(a, p.W, x);
  std::span<T> a_zr(a.data(), 2 * H);
  for (std::size_t k = 0; k < H; ++k) {
    if (h[k] != T{0}) axpy<T>(a_zr, p.U.row(k).first(2 * H), h[k]);
  }
  std::vector<T> z(H), r(H), rh(H), n(H);
  for (std::size_t k = 0; k < H; ++k) {
    z[k] = sigmoid(a[k]);
    r[k] = sigmoid(a[H + k]);
    rh[k] = r[k] * h[k];
  }
  std::span<T> a_n(a.data() + 2 * H, H);
  for (std::size_t k = 0; k < H; ++k) {
    if (rh[k] != T{0}) axpy<T>(a_n, p.U.row(k).subspan(2 * H, H), rh[k]);
  }
  for (std::size_t k = 0; k < H; ++k) {
    n[k] = std::tanh(a_n[k]);
    h_out[k] = (T{1} - z[k]) * n[k] + z[k] * h[k];
  }
  if (cache) {
    cache->x.assign(x.begin(), x.end());
    cache->h_prev.assign(h.begin(), h.end());
    cache->z = std::move(z);
    cache->r = std::move(r);
    cache->n = std::move(n);
    cache->rh = std::move(rh);
  }
}

/// Accumulates parameter gradients into `g`, adds input gradient to `dx` and
/// recurrent gradient to `dh_prev`.
template <typename T>
void gru_backward(const GruParams<T>& p, GruParams<T>& g, const GruCache<T>& c, std::span<const T> dh_out,
                  std::span<T> dx, std::span<T> dh_prev) {
  const std::size_t H = p.hidden_size();
  std::vector<T> da(3 * H);
  std::vector<T> drh(H, T{0});
  for (std::size_t k = 0; k < H; ++k) {
    const T dn = dh_out[k] * (T{1} - c.z[k]);
    const T dz = dh_out[k] * (c.h_prev[k] - c.n[k]);
    dh_prev[k] += dh_out[k] * c.z[k];
    da[2 * H + k] = dn * (T{1} - c.n[k] * c.n[k]);
    da[k] = dz * c.z[k] * (T{1} - c.z[k]);
  }
  std::span<const T> da_n(da.data() + 2 * H, H);
  for (std::size_t k = 0; k < H; ++k) {
    drh[k] = dot<T>(p.U.row(k).subspan(2 * H, H), da_n);
    if (c.rh[k] != T{0}) axpy<T>(g.U.row(k).subspan(2 * H, H), da_n, c.rh[k]);
  }
  for (std::size_t k = 0; k < H; ++k) {
    const T dr = drh[k] * c.h_prev[k];
    dh_prev[k] += drh[k] * c.r[k];
    da[H + k] = dr * c.r[k] * (T{1} - c.r[k]);
  }
  std::span<const T> da_zr(da.data(), 2 * H);
  for (std::size_t k = 0; k < H; ++k) {
    dh_prev[k] += dot<T>(p.U.row(k).first(2 * H), da_zr);
    if (c.h_prev[k] != T{0}) axpy<T>(g.U.row(k).first(2 * H), da_zr, c.h_prev[k]);
  }
  axpy<T>(g.b.values(), std::span<const T>(da), T{1});
  outer_acc<T>(g.W, c.x, da);
  matvec_t_acc<T>(dx, p.W, da);
}

// ---------------------------------------------------------------------------
// Encoder

template <typename T>
struct EncoderStates {
  Tensor<T> states;  // [|x| x d]
  Tensor<T> keys;    // [|x| x d], states * W_key
  EncoderMode mode = EncoderMode::causal;

  std::size_t length() const { return states.rank() ? states.rows() : 0; }
  std::span<const T> state(std::size_t j) const { return states.row(j); }
};

template <typename T>
void check_source(const Seq2SeqModel<T>& m, std::span<const TokenId> source) {
  if (source.empty()) throw LengthError("source sequence is empty");
  if (source.size() > m.config.max_len)
    throw LengthError("source length " + std::to_string(source.size()) + " exceeds max_len " +
                      std::to_string(m.config.max_len));
  for (auto id : source)
    if (id < 0 || static_cast<std::size_t>(id) >= m.config.source_vocab_size)
      throw ContractError("source token id " + std::to_string(id) + " outside the vocabulary");
}

/// Incremental causal encoder: pushing tokens one at a time yields the same
/// rows, bit for bit, as encoding the whole sequence at once.
template <typename T>
class CausalEncoderStream {
 public:
  explicit CausalEncoderStream(const Seq2SeqModel<T>& m) : model_(&m) {
    require(m.config.encoder_mode == EncoderMode::causal, "incremental encoding needs a causal encoder");
    const std::size_t d = m.config.d_model;
    hidden_.assign(m.config.n_enc_layers, std::vector<T>(d, T{0}));
    enc_.states = Tensor<T>({0, d});
    enc_.keys = Tensor<T>({0, d});
    enc_.mode = EncoderMode::causal;
  }

  void push(TokenId id) {
    const auto& m = *model_;
    if (id < 0 || static_cast<std::size_t>(id) >= m.config.source_vocab_size)
      throw ContractError("source token id " + std::to_string(id) + " outside the vocabulary");
    if (enc_.length() >= m.config.max_len)
      throw LengthError("source length exceeds max_len " + std::to_string(m.config.max_len));
    const std::size_t d = m.config.d_model;
    std::vector<T> x(m.params.src_embed.row(static_cast<std::size_t>(id)).begin(),
                     m.params.src_embed.row(static_cast<std::size_t>(id)).end());
    std::vector<T> next(d);
    for (std::size_t l = 0; l < hidden_.size(); ++l) {
      gru_step<T>(m.params.enc_fwd[l], x, hidden_[l], next, nullptr);
      hidden_[l] = next;
      x = next;
    }
    std::vector<T> key(d, T{0});
    matvec_acc<T>(key, m.params.attn_key, x);
    enc_.states.push_row(x);
    enc_.keys.push_row(key);
  }

  const EncoderStates<T>& states() const { return enc_; }
  std::size_t length() const { return enc_.length(); }

 private:
  const Seq2SeqModel<T>* model_;
  std::vector<std::vector<T>> hidden_;
  EncoderStates<T> enc_;
};

namespace detail {

/// Per-layer, per-position caches for the encoder backward pass.
template <typename T>
struct EncoderTrace {
  std::vector<std::vector<GruCache<T>>> fwd;  // [layer][t]
  std::vector<std::vector<GruCache<T>>> bwd;  // [layer][t], full mode
};

template <typename T>
Tensor<T> encode_states(const Seq2SeqModel<T>& m, std::span<const TokenId> source, EncoderTrace<T>* trace) {
  const std::size_t d = m.config.d_model;
  const std::size_t n = source.size();
  const bool full = m.config.encoder_mode == EncoderMode::full;
  Tensor<T> layer_in({n, d});
  for (std::size_t t = 0; t < n; ++t) {
    auto e = m.params.src_embed.row(static_cast<std::size_t>(source[t]));
    std::copy(e.begin(), e.end(), layer_in.row(t).begin());
  }
  if (trace) {
    trace->fwd.assign(m.config.n_enc_layers, std::vector<GruCache<T>>(n));
    if (full) trace->bwd.assign(m.config.n_enc_layers, std::vector<GruCache<T>>(n));
  }
  for (std::size_t l = 0; l < m.config.n_enc_layers; ++l) {
    Tensor<T> out({n, d});
    const std::size_t hf = m.params.enc_fwd[l].hidden_size();
    std::vector<T> h(hf, T{0}), next(hf);
    for (std::size_t t = 0; t < n; ++t) {
      gru_step<T>(m.params.enc_fwd[l], layer_in.row(t), h, next, trace ? &trace->fwd[l][t] : nullptr);
      h = next;
      std::copy(h.begin(), h.end(), out.row(t).begin());
    }
    if (full) {
      const std::size_t hb = m.params.enc_bwd[l].hidden_size();
      std::vector<T> hbk(hb, T{0}), nb(hb);
      for (std::size_t t = n; t-- > 0;) {
        gru_step<T>(m.params.enc_bwd[l], layer_in.row(t), hbk, nb, trace ? &trace->bwd[l][t] : nullptr);
        hbk = nb;
        std::copy(hbk.begin(), hbk.end(), out.row(t).begin() + static_cast<std::ptrdiff_t>(hf));
      }
    }
    layer_in = std::move(out);
  }
  return layer_in;
}

template <typename T>
Tensor<T> compute_keys(const Seq2SeqModel<T>& m, const Tensor<T>& states) {
  Tensor<T> keys({states.rows(), m.config.d_model});
  for (std::size_t j = 0; j < states.rows(); ++j) matvec_acc<T>(keys.row(j), m.params.attn_key, states.row(j));
  return keys;
}

}  // namespace detail

/// Encodes a full source sentence with the model's encoder mode.
template <typename T>
EncoderStates<T> encode(const Seq2SeqModel<T>& m, std::span<const TokenId> source) {
  check_source(m, source);
  if (m.config.encoder_mode == EncoderMode::causal) {
    CausalEncoderStream<T> stream(m);
    for (auto id : source) stream.push(id);
    return stream.states();
  }
  EncoderStates<T> enc;
  enc.mode = EncoderMode::full;
  enc.states = detail::encode_states(m, source, static_cast<detail::EncoderTrace<T>*>(nullptr));
  enc.keys = detail::compute_keys(m, enc.states);
  return enc;
}

/// Encodes with an explicit mode; the model must have been built for it.
template <typename T>
EncoderStates<T> encode(const Seq2SeqModel<T>& m, std::span<const TokenId> source, EncoderMode mode) {
  if (mode != m.config.encoder_mode)
    throw ContractError("model was built with a " + to_string(m.config.encoder_mode) + " encoder, not " +
                        to_string(mode));
  return encode(m, source);
}

// ---------------------------------------------------------------------------
// Decoder

template <typename T>
struct DecoderState {
  std::vector<std::vector<T>> layers;
  friend bool operator==(const DecoderState&, const DecoderState&) = default;
};

template <typename T>
DecoderState<T> initial_state(const Seq2SeqModel<T>& m) {
  return {std::vector<std::vector<T>>(m.config.n_dec_layers, std::vector<T>(m.config.d_model, T{0}))};
}

template <typename T>
struct StepOutput {
  DecoderState<T> state;      // recurrent state after consuming y_{i-1}
  std::vector<T> attention;   // visible_len entries
  std::vector<T> decoder_state;  // s_i, the attentional state read by the policy
  std::vector<T> logits;
};

namespace detail {

template <typename T>
struct StepTrace {
  std::vector<GruCache<T>> layers;
  std::vector<T> query, attention, context, combined_in, s;
};

template <typename T>
StepOutput<T> step_impl(const Seq2SeqModel<T>& m, TokenId y_prev, const DecoderState<T>& state,
                        const EncoderStates<T>& enc, std::size_t visible_len, StepTrace<T>* trace) {
  const std::size_t d = m.config.d_model;
  StepOutput<T> out;
  out.state.layers.resize(m.config.n_dec_layers);
  if (trace) trace->layers.resize(m.config.n_dec_layers);
  auto emb = m.params.tgt_embed.row(static_cast<std::size_t>(y_prev));
  std::vector<T> x(emb.begin(), emb.end());
  for (std::size_t l = 0; l < m.config.n_dec_layers; ++l) {
    out.state.layers[l].assign(d, T{0});
    gru_step<T>(m.params.dec[l], x, state.layers[l], out.state.layers[l], trace ? &trace->layers[l] : nullptr);
    x = out.state.layers[l];
  }
  const std::vector<T>& q = out.state.layers.back();
  const T scale = T{1} / std::sqrt(static_cast<T>(d));

  out.attention.resize(visible_len);
  for (std::size_t j = 0; j < visible_len; ++j) out.attention[j] = dot<T>(q, enc.keys.row(j)) * scale;
  softmax_inplace<T>(out.attention);

  std::vector<T> context(d, T{0});
  for (std::size_t j = 0; j < visible_len; ++j) axpy<T>(context, enc.states.row(j), out.attention[j]);

  std::vector<T> combined_in(2 * d);
  std::copy(q.begin(), q.end(), combined_in.begin());
  std::copy(context.begin(), context.end(), combined_in.begin() + static_cast<std::ptrdiff_t>(d));
  out.decoder_state = m.params.combine_bias.values();
  matvec_acc<T>(out.decoder_state, m.params.combine, combined_in);
  for (auto& v : out.decoder_state) v = std::tanh(v);

  out.logits = m.params.out_bias.values();
  matvec_acc<T>(out.logits, m.params.out_proj, out.decoder_state);

  if (trace) {
    trace->query = q;
    trace->attention = out.attention;
    trace->context = std::move(context);
    trace->combined_in = std::move(combined_in);
    trace->s = out.decoder_state;
  }
  return out;
}

}  // namespace detail

/// One decoder step over the first `visible_len` encoder states. States
/// beyond visible_len take no part in the computation.
template <typename T>
StepOutput<T> decode_step(const Seq2SeqModel<T>& m, TokenId y_prev, const DecoderState<T>& state,
                          const EncoderStates<T>& enc, std::size_t visible_len) {
  if (visible_len < 1 || visible_len > enc.length())
    throw ContractError("visible_len " + std::to_string(visible_len) + " outside [1, " +
                        std::to_string(enc.length()) + "]");
  if (y_prev < 0 || static_cast<std::size_t>(y_prev) >= m.config.target_vocab_size)
    throw ContractError("target token id " + std::to_string(y_prev) + " outside the vocabulary");
  return detail::step_impl<T>(m, y_prev, state, enc, visible_len, nullptr);
}

// ---------------------------------------------------------------------------
// Teacher-forced loss and gradients

template <typename T>
struct LossResult {
  T loss_sum = 0;         // summed negative log-likelihood in nats
  std::size_t tokens = 0; // predicted positions, including EOS
};

/// Teacher-forced cross-entropy of `target` (+EOS) given `source`. With
/// `grads` set, the gradient of loss_sum is accumulated into it.
template <typename T>
LossResult<T> forward_backward(const Seq2SeqModel<T>& m, const ParallelPair& pair, Seq2SeqParams<T>* grads) {
  check_source(m, pair.source);
  for (auto id : pair.target)
    if (id < 0 || static_cast<std::size_t>(id) >= m.config.target_vocab_size)
      throw ContractError("target token id " + std::to_string(id) + " outside the vocabulary");

  const std::size_t d = m.config.d_model;
  const std::size_t nx = pair.source.size();
  const std::size_t ny = pair.target.size() + 1;
  const std::size_t V = m.config.target_vocab_size;

  detail::EncoderTrace<T> enc_trace;
  EncoderStates<T> enc;
  enc.mode = m.config.encoder_mode;
  enc.states = detail::encode_states(m, pair.source, grads ? &enc_trace : nullptr);
  enc.keys = detail::compute_keys(m, enc.states);

  std::vector<detail::StepTrace<T>> steps(grads ? ny : 0);
  std::vector<std::vector<T>> dlogits(grads ? ny : 0);
  LossResult<T> result;
  result.tokens = ny;
  DecoderState<T> state = initial_state(m);
  std::vector<T> logp(V);
  for (std::size_t i = 0; i < ny; ++i) {
    const TokenId prev = i == 0 ? kBos : pair.target[i - 1];
    const TokenId gold = i < pair.target.size() ? pair.target[i] : kEos;
    StepOutput<T> out = detail::step_impl<T>(m, prev, state, enc, nx, grads ? &steps[i] : nullptr);
    log_softmax<T>(out.logits, logp);
    result.loss_sum -= logp[static_cast<std::size_t>(gold)];
    if (grads) {
      dlogits[i].resize(V);
      for (std::size_t v = 0; v < V; ++v) dlogits[i][v] = std::exp(logp[v]);
      dlogits[i][static_cast<std::size_t>(gold)] -= T{1};
    }
    state = std::move(out.state);
  }
  if (!grads) return result;

  Seq2SeqParams<T>& g = *grads;
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  Tensor<T> dH({nx, d});
  Tensor<T> dK({nx, d});
  std::vector<std::vector<T>> dstate(m.config.n_dec_layers, std::vector<T>(d, T{0}));

  for (std::size_t i = ny; i-- > 0;) {
    const auto& st = steps[i];
    const TokenId prev = i == 0 ? kBos : pair.target[i - 1];
    // output projection
    axpy<T>(g.out_bias.values(), std::span<const T>(dlogits[i]), T{1});
    outer_acc<T>(g.out_proj, st.s, dlogits[i]);
    std::vector<T> ds(d, T{0});
    matvec_t_acc<T>(ds, m.params.out_proj, dlogits[i]);
    // combine
    for (std::size_t k = 0; k < d; ++k) ds[k] *= (T{1} - st.s[k] * st.s[k]);
    axpy<T>(g.combine_bias.values(), std::span<const T>(ds), T{1});
    outer_acc<T>(g.combine, st.combined_in, ds);
    std::vector<T> dcomb(2 * d, T{0});
    matvec_t_acc<T>(dcomb, m.params.combine, ds);
    std::span<const T> dq_out(dcomb.data(), d);
    std::span<const T> dc(dcomb.data() + d, d);
    // attention
    std::vector<T> dalpha(nx);
    T weighted = 0;
    for (std::size_t j = 0; j < nx; ++j) {
      dalpha[j] = dot<T>(dc, enc.states.row(j));
      weighted += st.attention[j] * dalpha[j];
      axpy<T>(dH.row(j), dc, st.attention[j]);
    }
    std::vector<T> dq(dq_out.begin(), dq_out.end());
    for (std::size_t j = 0; j < nx; ++j) {
      const T de = st.attention[j] * (dalpha[j] - weighted) * scale;
      if (de == T{0}) continue;
      axpy<T>(dq, enc.keys.row(j), de);
      axpy<T>(dK.row(j), std::span<const T>(st.query), de);
    }
    // decoder GRU stack, top to bottom
    axpy<T>(dstate.back(), std::span<const T>(dq), T{1});
    std::vector<T> dx_above;
    for (std::size_t l = m.config.n_dec_layers; l-- > 0;) {
      std::vector<T> dh_out = dstate[l];
      if (!dx_above.empty()) axpy<T>(dh_out, std::span<const T>(dx_above), T{1});
      std::vector<T> dx(m.params.dec[l].input_size(), T{0});
      std::vector<T> dh_prev(d, T{0});
      gru_backward<T>(m.params.dec[l], g.dec[l], st.layers[l], dh_out, dx, dh_prev);
      dstate[l] = std::move(dh_prev);
      dx_above = std::move(dx);
    }
    axpy<T>(g.tgt_embed.row(static_cast<std::size_t>(prev)), std::span<const T>(dx_above), T{1});
  }

  // keys = H W_key
  for (std::size_t j = 0; j < nx; ++j) {
    outer_acc<T>(g.attn_key, enc.states.row(j), dK.row(j));
    matvec_t_acc<T>(dH.row(j), m.params.attn_key, dK.row(j));
  }

  // encoder, top layer to bottom
  const bool full = m.config.encoder_mode == EncoderMode::full;
  Tensor<T> dout = std::move(dH);
  for (std::size_t l = m.config.n_enc_layers; l-- > 0;) {
    Tensor<T> din({nx, d});
    const std::size_t hf = m.params.enc_fwd[l].hidden_size();
    std::vector<T> carry(hf, T{0});
    for (std::size_t t = nx; t-- > 0;) {
      std::vector<T> dh(dout.row(t).begin(), dout.row(t).begin() + static_cast<std::ptrdiff_t>(hf));
      axpy<T>(dh, std::span<const T>(carry), T{1});
      std::vector<T> dprev(hf, T{0});
      gru_backward<T>(m.params.enc_fwd[l], g.enc_fwd[l], enc_trace.fwd[l][t], dh, din.row(t), dprev);
      carry = std::move(dprev);
    }
    if (full) {
      const std::size_t hb = m.params.enc_bwd[l].hidden_size();
      std::vector<T> carry_b(hb, T{0});
      for (std::size_t t = 0; t < nx; ++t) {
        std::vector<T> dh(dout.row(t).begin() + static_cast<std::ptrdiff_t>(hf), dout.row(t).end());
        axpy<T>(dh, std::span<const T>(carry_b), T{1});
        std::vector<T> dprev(hb, T{0});
        gru_backward<T>(m.params.enc_bwd[l], g.enc_bwd[l], enc_trace.bwd[l][t], dh, din.row(t), dprev);
        carry_b = std::move(dprev);
      }
    }
    dout = std::move(din);
  }
  for (std::size_t t = 0; t < nx; ++t)
    axpy<T>(g.src_embed.row(static_cast<std::size_t>(pair.source[t])), std::span<const T>(dout.row(t)), T{1});
  return result;
}

// ---------------------------------------------------------------------------
// Attention extraction

/// |y| x |x| row-stochastic matrix of cross-attention weights.
struct AttentionMatrix {
  std::size_t target_len = 0;
  std::size_t source_len = 0;
  std::vector<float> weights;  // row-major

  float operator()(std::size_t i, std::size_t j) const { return weights[i * source_len + j]; }
  float& operator()(std::size_t i, std::size_t j) { return weights[i * source_len + j]; }
  std::span<const float> row(std::size_t i) const { return {weights.data() + i * source_len, source_len}; }

  friend bool operator==(const AttentionMatrix&, const AttentionMatrix&) = default;
};

/// Teacher-forced cross-attention rows for the reference target tokens
/// (the EOS step is not included). The model has a single decoder
/// cross-attention with one head, so the final-layer attention is used as is.
template <typename T>
AttentionMatrix extract_attention(const Seq2SeqModel<T>& m, const ParallelPair& pair) {
  if (!m.all_finite()) throw ModelStateError("model parameters contain NaN or Inf");
  const EncoderStates<T> enc = encode(m, pair.source);
  AttentionMatrix a;
  a.target_len = pair.target.size();
  a.source_len = pair.source.size();
  a.weights.reserve(a.target_len * a.source_len);
  DecoderState<T> state = initial_state(m);
  for (std::size_t i = 0; i < pair.target.size(); ++i) {
    const TokenId prev = i == 0 ? kBos : pair.target[i - 1];
    StepOutput<T> out = decode_step(m, prev, state, enc, enc.length());
    for (T w : out.attention) a.weights.push_back(static_cast<float>(w));
    state = std::move(out.state);
  }
  return a;
}

template <typename T>
AttentionMatrix extract_attention(const Seq2SeqModel<T>& m, const ParallelPair& pair, EncoderMode mode) {
  if (mode != m.config.encoder_mode)
    throw ContractError("model was built with a " + to_string(m.config.encoder_mode) + " encoder, not " +
                        to_string(mode));
  return extract_attention(m, pair);
}

/// Teacher-forced recurrent states: element i is the state to feed with
/// y_{i-1} when predicting y_i (element 0 is the initial state).
template <typename T>
std::vector<DecoderState<T>> teacher_forced_states(const Seq2SeqModel<T>& m, const EncoderStates<T>& enc,
                                                   std::span<const TokenId> target) {
  std::vector<DecoderState<T>> states;
  states.reserve(target.size() + 1);
  states.push_back(initial_state(m));
  for (std::size_t i = 0; i < target.size(); ++i) {
    const TokenId prev = i == 0 ? kBos : target[i - 1];
    states.push_back(decode_step(m, prev, states.back(), enc, 1).state);
  }
  return states;
}

}  // namespace simulmt
