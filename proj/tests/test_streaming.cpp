#include <gtest/gtest.h>

#include <sstream>

#include "simulmt/streaming.hpp"
#include "simulmt/train.hpp"

using namespace simulmt;

namespace {

struct Trained {
  Corpus corpus;
  Seq2SeqModel<float> model;
  PolicyParams<float> policy;
};

// Small 1:1 model trained once for the whole binary (~2 s).
const Trained& trained() {
  static const Trained t = [] {
    GeneratorParams p;
    p.size = 340;
    p.vocab_size = 12;
    p.fertility_rate = p.merge_rate = p.swap_probability = 0;
    p.min_len = 4;
    p.max_len = 8;
    Trained out;
    out.corpus = generate_synthetic(p, 21);
    Corpus train_set = out.corpus;
    train_set.pairs.resize(300);
    out.corpus.pairs.erase(out.corpus.pairs.begin(), out.corpus.pairs.begin() + 300);
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_enc_layers = cfg.n_dec_layers = 1;
    out.model = make_model<float>(cfg, out.corpus.source_vocab, out.corpus.target_vocab, 4);
    TrainHyper h;
    h.epochs = 40;
    h.warmup_steps = 20;
    h.lr = 1e-2;
    train(out.model, train_set, h);
    out.policy = init_policy<float>(16, 8, 5, 0.0f);
    return out;
  }();
  return t;
}

std::vector<std::unique_ptr<ReadWritePolicy>> policies(const PolicyParams<float>& p) {
  std::vector<std::unique_ptr<ReadWritePolicy>> out;
  out.push_back(std::make_unique<LearnedPolicy>(p, 0.5f));
  out.push_back(std::make_unique<LearnedPolicy>(p, 0.8f));
  out.push_back(std::make_unique<WaitKPolicy>(1));
  out.push_back(std::make_unique<WaitKPolicy>(3));
  out.push_back(std::make_unique<ForcedReadPolicy>());
  return out;
}

void expect_valid_delays(const DecodeResult& r, std::size_t source_len) {
  ASSERT_EQ(r.delays.size(), r.tokens.size());
  for (std::size_t i = 0; i < r.delays.size(); ++i) {
    ASSERT_GE(r.delays[i], 1u);
    ASSERT_LE(r.delays[i], source_len);
    if (i) {
      ASSERT_LE(r.delays[i - 1], r.delays[i]);
    }
  }
}

DecodeResult run_session(const Seq2SeqModel<float>& m, const ReadWritePolicy& policy, DecoderKind kind,
                         std::span<const TokenId> source, std::size_t beam) {
  StreamSession s(m, policy, kind, {beam, 2});
  EXPECT_TRUE(s.pull_outputs().empty());
  std::vector<TokenId> seen;
  for (auto t : source) {
    s.push_token(t);
    const auto now = s.pull_outputs();
    EXPECT_GE(now.size(), seen.size());
    EXPECT_TRUE(std::equal(seen.begin(), seen.end(), now.begin()));
    seen = now;
  }
  s.finish();
  EXPECT_THROW(s.push_token(source[0]), SessionError);
  const auto r = s.result();
  EXPECT_EQ(s.pull_outputs(), r.tokens);
  return r;
}

}  // namespace

TEST(WaitK, Decisions) {
  EXPECT_EQ(wait_k_decide(1, 1, 1, false).action, Action::write);
  EXPECT_EQ(wait_k_decide(3, 2, 3, false).action, Action::read);
  EXPECT_EQ(wait_k_decide(3, 2, 4, false).action, Action::write);
  EXPECT_EQ(wait_k_decide(9, 1, 1, true).action, Action::write);
  EXPECT_THROW(WaitKPolicy(0), ConfigError);
}

TEST(WaitK, ScheduleOnOneToOneTask) {
  const auto& t = trained();
  for (const auto& p : t.corpus.pairs) {
    if (p.source.size() != 5) continue;
    const auto r = greedy_stream(t.model, WaitKPolicy(2), p.source);
    if (r.tokens.size() != 5) continue;
    EXPECT_EQ(r.delays, (std::vector<std::size_t>{2, 3, 4, 5, 5}));
    return;
  }
  FAIL() << "no 5-token sentence decoded to 5 tokens";
}

TEST(Greedy, ForcedReadEqualsNonStreaming) {
  const auto& t = trained();
  ForcedReadPolicy fr;
  for (const auto& p : t.corpus.pairs) {
    const auto s = greedy_stream(t.model, fr, p.source);
    const auto n = greedy_decode(t.model, p.source);
    EXPECT_EQ(s.tokens, n.tokens);
    EXPECT_EQ(s.logprob, n.logprob);
    for (auto g : s.delays) EXPECT_EQ(g, p.source.size());
  }
}

TEST(Greedy, TrainedModelTranslatesHeldOut) {
  const auto& t = trained();
  std::size_t exact = 0;
  for (const auto& p : t.corpus.pairs) exact += greedy_decode(t.model, p.source).tokens == p.target;
  EXPECT_GE(exact, t.corpus.size() * 6 / 10);
}

TEST(Greedy, DecoderCallBoundAndDelays) {
  const auto& t = trained();
  for (const auto& policy : policies(t.policy)) {
    for (const auto& p : t.corpus.pairs) {
      const auto r = greedy_stream(t.model, *policy, p.source);
      expect_valid_delays(r, p.source.size());
      if (!r.truncated) {
        EXPECT_LE(r.decoder_calls, p.source.size() + r.steps() - 1);
      }
      if (r.eos) {
        EXPECT_EQ(r.reads_total, p.source.size());
      }
    }
  }
}

TEST(Greedy, EosMaskedWhileSourceRemains) {
  const auto& t = trained();
  auto m = t.model;
  // Make EOS the favourite everywhere; it must still not appear before the end.
  m.params.out_bias.values()[static_cast<std::size_t>(kEos)] = 50.0f;
  const auto r = greedy_stream(m, WaitKPolicy(1), t.corpus.pairs[0].source);
  EXPECT_EQ(r.tokens.size(), t.corpus.pairs[0].source.size() - 1);
  EXPECT_TRUE(r.eos);
}

TEST(Greedy, TruncationAtLengthCap) {
  auto m = trained().model;
  m.params.out_bias.values()[static_cast<std::size_t>(kEos)] = -100.0f;
  const auto& src = trained().corpus.pairs[0].source;
  const auto r = greedy_stream(m, ForcedReadPolicy(), src);
  EXPECT_TRUE(r.truncated);
  EXPECT_FALSE(r.eos);
  EXPECT_EQ(r.tokens.size(), 2 * src.size() + 10);
  const auto b = beam_stream(m, ForcedReadPolicy(), src, 3);
  EXPECT_TRUE(b.best.truncated);
}

TEST(Beam, SizeOneIsGreedy) {
  const auto& t = trained();
  for (const auto& policy : policies(t.policy)) {
    for (const auto& p : t.corpus.pairs) {
      const auto g = greedy_stream(t.model, *policy, p.source);
      const auto b = beam_stream(t.model, *policy, p.source, 1);
      ASSERT_EQ(g, b.best);
    }
  }
}

TEST(Beam, ForcedReadEqualsNonStreamingBeam) {
  const auto& t = trained();
  for (const auto& p : t.corpus.pairs) {
    const auto s = beam_stream(t.model, ForcedReadPolicy(), p.source, 3);
    const auto n = beam_decode(t.model, p.source, 3);
    EXPECT_EQ(s.best.tokens, n.tokens);
    EXPECT_EQ(s.best.logprob, n.logprob);
  }
}

TEST(Beam, ReadSynchronyAndDelays) {
  const auto& t = trained();
  for (const auto& policy : policies(t.policy)) {
    for (const auto& p : t.corpus.pairs) {
      const auto b = beam_stream(t.model, *policy, p.source, 3);
      EXPECT_EQ(b.trace.violations, 0u);
      for (const auto& it : b.trace.iterations) EXPECT_TRUE(it.synchronized);
      expect_valid_delays(b.best, p.source.size());
    }
  }
}

TEST(Beam, InvalidArguments) {
  const auto& t = trained();
  EXPECT_THROW(beam_stream(t.model, ForcedReadPolicy(), t.corpus.pairs[0].source, 0), ConfigError);
  EXPECT_THROW(greedy_stream(t.model, ForcedReadPolicy(), std::vector<TokenId>{}), LengthError);
  ModelConfig cfg = t.model.config;
  cfg.encoder_mode = EncoderMode::full;
  auto full = make_model<float>(cfg, t.corpus.source_vocab, t.corpus.target_vocab, 1);
  EXPECT_THROW(greedy_stream(full, ForcedReadPolicy(), t.corpus.pairs[0].source), ContractError);
}

TEST(Session, GreedyMatchesBatch) {
  const auto& t = trained();
  for (const auto& policy : policies(t.policy)) {
    for (const auto& p : t.corpus.pairs) {
      const auto batch = greedy_stream(t.model, *policy, p.source);
      const auto online = run_session(t.model, *policy, DecoderKind::greedy, p.source, 1);
      ASSERT_EQ(batch, online);
    }
  }
}

TEST(Session, BeamMatchesBatch) {
  const auto& t = trained();
  for (const auto& policy : policies(t.policy)) {
    for (const auto& p : t.corpus.pairs) {
      const auto batch = beam_stream(t.model, *policy, p.source, 3);
      const auto online = run_session(t.model, *policy, DecoderKind::beam, p.source, 3);
      ASSERT_EQ(batch.best, online);
    }
  }
}

TEST(Session, ThreeTokensAndLifecycle) {
  const auto& t = trained();
  const std::vector<TokenId> src(t.corpus.pairs[0].source.begin(), t.corpus.pairs[0].source.begin() + 3);
  WaitKPolicy wk(1);
  EXPECT_EQ(greedy_stream(t.model, wk, src), run_session(t.model, wk, DecoderKind::greedy, src, 1));
  StreamSession s(t.model, wk, DecoderKind::greedy);
  EXPECT_THROW(s.result(), SessionError);
  s.push_token(src[0]);
  s.finish();
  EXPECT_THROW(s.finish(), SessionError);
}

TEST(Session, WaitOneEmitsBeforeFinish) {
  const auto& t = trained();
  WaitKPolicy wk(1);
  StreamSession s(t.model, wk, DecoderKind::greedy);
  const auto& src = t.corpus.pairs[0].source;
  for (std::size_t k = 0; k + 1 < src.size(); ++k) s.push_token(src[k]);
  EXPECT_GE(s.pull_outputs().size(), src.size() - 2);
}

TEST(TeacherForced, DeltaDominance) {
  const auto& t = trained();
  for (const auto& p : t.corpus.pairs) {
    const auto lo = teacher_forced_offsets(t.model, t.policy, p, 0.5f);
    const auto hi = teacher_forced_offsets(t.model, t.policy, p, 0.9f);
    ASSERT_EQ(lo.size(), p.target.size());
    for (std::size_t i = 0; i < lo.size(); ++i) {
      EXPECT_GE(hi[i], lo[i]);
      if (i) {
        EXPECT_GE(lo[i], lo[i - 1]);
      }
    }
  }
}

TEST(Trace, TextFormat) {
  std::ostringstream out;
  write_trace(out, 7, {{1, 2, 0.25f, Action::read}, {1, 3, 0.75f, Action::write}});
  EXPECT_EQ(out.str(), "7 1 2 0.25 READ\n7 1 3 0.75 WRITE\n");
}
