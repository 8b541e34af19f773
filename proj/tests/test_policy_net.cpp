#include <gtest/gtest.h>

#include <filesystem>

#include "simulmt/policy_labels.hpp"
#include "simulmt/policy_net.hpp"
#include "simulmt/train.hpp"

using namespace simulmt;

namespace {

struct Fixture {
  Corpus corpus;
  Seq2SeqModel<float> model;
  std::vector<PolicyLabelMatrix> labels;
};

Fixture make_fixture(float gamma = 0.5f) {
  GeneratorParams gp;
  gp.size = 24;
  gp.vocab_size = 10;
  gp.max_len = 7;
  Fixture f{generate_synthetic(gp, 8), {}, {}};
  ModelConfig cfg;
  cfg.d_model = 16;
  f.model = make_model<float>(cfg, f.corpus.source_vocab, f.corpus.target_vocab, 2);
  for (const auto& p : f.corpus.pairs) f.labels.push_back(gen_policy_labels(extract_attention(f.model, p), gamma));
  return f;
}

std::string temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "simulmt_test_policy";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

}  // namespace

TEST(Policy, ColdStartPrefersRead) {
  auto p = init_policy<float>(16, 8, 1);
  std::vector<float> zero(16, 0.0f);
  EXPECT_FLOAT_EQ(write_probability<float>(p, zero, zero), sigmoid(-2.0f));
  EXPECT_EQ(decide(p, zero, zero, 0.5f).action, Action::read);
}

TEST(Policy, ThresholdTieWritesAndDeltaRange) {
  EXPECT_EQ(threshold_decision(0.5f, 0.5f).action, Action::write);
  EXPECT_EQ(threshold_decision(0.49f, 0.5f).action, Action::read);
  auto p = init_policy<float>(8, 4, 1);
  std::vector<float> s(8, 0.1f);
  EXPECT_THROW(decide(p, s, s, 0.0f), ConfigError);
  EXPECT_THROW(decide(p, s, s, 1.0f), ConfigError);
}

TEST(Policy, ThresholdMonotonicity) {
  Rng rng(4);
  auto p = init_policy<float>(12, 6, 3, 0.0f);
  for (int n = 0; n < 500; ++n) {
    std::vector<float> s(12), h(12);
    for (auto& v : s) v = static_cast<float>(rng.normal());
    for (auto& v : h) v = static_cast<float>(rng.normal());
    const float d1 = 0.05f + 0.9f * rng.uniform();
    const float d2 = std::min(0.99f, d1 + 0.01f + 0.5f * rng.uniform());
    if (decide(p, s, h, d1).action == Action::read) {
      ASSERT_EQ(decide(p, s, h, d2).action, Action::read);
    }
  }
}

TEST(Policy, SamplingIsSeeded) {
  auto p = init_policy<float>(8, 4, 1, 0.0f);
  std::vector<float> s(8, 0.3f), h(8, -0.2f);
  Rng a(5), b(5);
  for (int n = 0; n < 50; ++n) ASSERT_EQ(sample_decision(p, s, h, a), sample_decision(p, s, h, b));
}

TEST(TrainingSet, StaircaseCellsOnly) {
  auto f = make_fixture();
  auto set = build_training_set(f.model, f.corpus, f.labels);
  std::size_t expected = 0;
  for (const auto& l : f.labels) {
    const auto offsets = read_offsets(l);
    std::size_t prev = 1;
    for (auto o : offsets) {
      expected += o - prev + 1;
      prev = o;
    }
  }
  EXPECT_EQ(set.examples.size(), expected);
  EXPECT_EQ(set.positives + set.negatives, expected);
  EXPECT_EQ(set.positives, [&] {
    std::size_t n = 0;
    for (const auto& p : f.corpus.pairs) n += p.target.size();
    return n;
  }());
  for (const auto& e : set.examples) EXPECT_EQ(e.label, f.labels[e.pair](e.i - 1, e.j - 1));
  EXPECT_DOUBLE_EQ(set.positive_weight, static_cast<double>(set.negatives) / static_cast<double>(set.positives));
}

TEST(TrainingSet, FullGridCoversEveryCell) {
  auto f = make_fixture();
  auto set = build_training_set(f.model, f.corpus, f.labels, true);
  std::size_t cells = 0;
  for (const auto& l : f.labels) cells += l.labels.size();
  EXPECT_EQ(set.examples.size(), cells);
}

TEST(TrainingSet, ThreadCountDoesNotChangeOrder) {
  auto f = make_fixture();
  auto a = build_training_set(f.model, f.corpus, f.labels, false, 1);
  auto b = build_training_set(f.model, f.corpus, f.labels, false, 4);
  ASSERT_EQ(a.examples.size(), b.examples.size());
  for (std::size_t k = 0; k < a.examples.size(); ++k) {
    ASSERT_EQ(a.examples[k].pair, b.examples[k].pair);
    ASSERT_EQ(a.examples[k].i, b.examples[k].i);
    ASSERT_EQ(a.examples[k].j, b.examples[k].j);
    ASSERT_EQ(a.examples[k].decoder_state, b.examples[k].decoder_state);
  }
}

TEST(TrainingSet, Errors) {
  auto f = make_fixture();
  auto fewer = f.labels;
  fewer.pop_back();
  EXPECT_THROW(build_training_set(f.model, f.corpus, fewer), DataError);
  auto wrong = f.labels;
  wrong[0].source_len += 1;
  EXPECT_THROW(build_training_set(f.model, f.corpus, wrong), DataError);
  ModelConfig cfg = f.model.config;
  cfg.encoder_mode = EncoderMode::full;
  auto full = make_model<float>(cfg, f.corpus.source_vocab, f.corpus.target_vocab, 1);
  EXPECT_THROW(build_training_set(full, f.corpus, f.labels), ContractError);
}

TEST(Training, FrozenBaseAndGradcheck) {
  auto f = make_fixture();
  const auto before = f.model.checksum();
  auto set = build_training_set(f.model, f.corpus, f.labels);
  PolicyHyper h;
  h.epochs = 5;
  h.d_p = 8;
  auto [params, report] = train_policy(set, h);
  EXPECT_EQ(f.model.checksum(), before);
  EXPECT_TRUE(report.init_gradcheck.passed()) << report.init_gradcheck.max_rel_error;
  EXPECT_GE(report.init_gradcheck.checked, 200u);
  ASSERT_EQ(report.epoch_loss.size(), 5u);
  EXPECT_LT(report.epoch_loss.back(), report.epoch_loss.front());
  const auto trained_check = policy_gradient_check(params, set);
  EXPECT_TRUE(trained_check.passed()) << trained_check.max_rel_error;
}

TEST(Training, Deterministic) {
  auto f = make_fixture();
  auto set = build_training_set(f.model, f.corpus, f.labels);
  PolicyHyper h;
  h.epochs = 2;
  auto a = train_policy(set, h).first, b = train_policy(set, h).first;
  EXPECT_EQ(a.U, b.U);
  EXPECT_EQ(a.V, b.V);
  EXPECT_EQ(a.b, b.b);
}

TEST(Training, LearnsSeparableLabels) {
  // Label = 1 when the first coordinates of s and h agree in sign.
  Rng rng(3);
  PolicyTrainingSet set;
  for (int n = 0; n < 2000; ++n) {
    PolicyExample e;
    e.decoder_state.resize(8);
    e.encoder_state.resize(8);
    for (auto& v : e.decoder_state) v = static_cast<float>(rng.normal());
    for (auto& v : e.encoder_state) v = static_cast<float>(rng.normal());
    e.label = e.decoder_state[0] * e.encoder_state[0] > 0 ? 1 : 0;
    (e.label ? set.positives : set.negatives)++;
    set.examples.push_back(std::move(e));
  }
  set.positive_weight = static_cast<double>(set.negatives) / static_cast<double>(set.positives);
  PolicyHyper h;
  h.epochs = 20;
  h.d_p = 8;
  auto [params, report] = train_policy(set, h);
  EXPECT_GE(report.train_metrics.accuracy, 0.9);
}

TEST(Training, InvalidHyper) {
  PolicyHyper h;
  h.d_p = 2;
  EXPECT_THROW(h.validate(), ConfigError);
  EXPECT_THROW(train_policy(PolicyTrainingSet{}, PolicyHyper{}), DataError);
}

TEST(Checkpoint, PolicyRoundTrip) {
  auto p = init_policy<float>(16, 8, 9);
  const auto path = temp_path("p.absm");
  save_policy(p, path);
  auto back = load_policy(path);
  EXPECT_EQ(back.U, p.U);
  EXPECT_EQ(back.V, p.V);
  EXPECT_EQ(back.b, p.b);
}

TEST(Checkpoint, KindMismatch) {
  auto f = make_fixture();
  const auto path = temp_path("model.absm");
  save_checkpoint(f.model, path);
  EXPECT_THROW(load_policy(path), FormatError);
  save_policy(init_policy<float>(16, 8, 1), path);
  EXPECT_THROW(load_checkpoint(path), FormatError);
}
