#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "simulmt/metrics.hpp"
#include "simulmt/train.hpp"

using namespace simulmt;

using Sent = std::vector<std::string>;

namespace {

Sent words(const std::string& s) { return split_spaces(s); }

std::vector<std::size_t> wait_k_delays(std::size_t k, std::size_t nx, std::size_t ny) {
  std::vector<std::size_t> g;
  for (std::size_t i = 1; i <= ny; ++i) g.push_back(std::min(i + k - 1, nx));
  return g;
}

}  // namespace

TEST(Bleu, IdentityScoresOne) {
  std::vector<Sent> refs{words("a b c d e"), words("f g h i")};
  const auto r = bleu<std::string>(refs, refs);
  EXPECT_DOUBLE_EQ(r.score, 1.0);
  EXPECT_DOUBLE_EQ(r.brevity_penalty, 1.0);
  EXPECT_EQ(r.hypothesis_length, 9u);
}

TEST(Bleu, DisjointScoresZero) {
  std::vector<Sent> h{words("x y z")}, r{words("a b c")};
  EXPECT_EQ(bleu<std::string>(h, r).score, 0.0);
}

TEST(Bleu, BrevityPenaltyHandCase) {
  std::vector<Sent> h{words("a b c d")}, r{words("a b c d e")};
  const auto rep = bleu<std::string>(h, r);
  for (double p : rep.precisions) EXPECT_DOUBLE_EQ(p, 1.0);
  EXPECT_NEAR(rep.brevity_penalty, std::exp(1.0 - 5.0 / 4.0), 1e-12);
  EXPECT_NEAR(rep.score, 0.7788007830714049, 1e-12);
}

TEST(Bleu, SmoothingOnHigherOrders) {
  // Two-token hypothesis has no 3- or 4-grams; smoothing keeps the score positive.
  std::vector<Sent> h{words("a b")}, r{words("a b")};
  const auto rep = bleu<std::string>(h, r);
  EXPECT_DOUBLE_EQ(rep.precisions[2], 1.0);
  EXPECT_DOUBLE_EQ(rep.score, 1.0);
  std::vector<Sent> h2{words("a c")};
  const auto rep2 = bleu<std::string>(h2, r);
  EXPECT_DOUBLE_EQ(rep2.precisions[0], 0.5);
  EXPECT_DOUBLE_EQ(rep2.precisions[1], 0.5);  // (0 + 1) / (1 + 1)
  EXPECT_GT(rep2.score, 0.0);
}

TEST(Bleu, ClippedCounts) {
  std::vector<Sent> h{words("the the the the")}, r{words("the cat")};
  EXPECT_DOUBLE_EQ(bleu<std::string>(h, r).precisions[0], 0.25);
}

TEST(Bleu, PermutationInvariant) {
  std::vector<Sent> h{words("a b c"), words("d e f g"), words("h i")};
  std::vector<Sent> r{words("a b d"), words("d e f"), words("h i j")};
  const auto base = bleu<std::string>(h, r).score;
  std::vector<Sent> h2{h[2], h[0], h[1]}, r2{r[2], r[0], r[1]};
  EXPECT_DOUBLE_EQ(bleu<std::string>(h2, r2).score, base);
  EXPECT_GE(base, 0.0);
  EXPECT_LE(base, 1.0);
}

TEST(Bleu, Errors) {
  std::vector<Sent> empty;
  EXPECT_THROW(bleu<std::string>(empty, empty), MetricError);
  std::vector<Sent> one{words("a")}, two{words("a"), words("b")};
  EXPECT_THROW(bleu<std::string>(one, two), MetricError);
  std::vector<Sent> blank{Sent{}};
  EXPECT_THROW(bleu<std::string>(one, blank), MetricError);
}

TEST(AverageLag, NonStreamingIsSourceLength) {
  std::vector<std::size_t> g(10, 10);
  EXPECT_NEAR(*average_lag(g, 10, 10), 10.0, 1e-6);
}

TEST(AverageLag, WaitKIsK) {
  EXPECT_NEAR(*average_lag(wait_k_delays(3, 10, 10), 10, 10), 3.0, 1e-6);
  EXPECT_NEAR(*average_lag(wait_k_delays(1, 12, 12), 12, 12), 1.0, 1e-6);
}

TEST(AverageLag, FullySimultaneousIsOne) {
  std::vector<std::size_t> g(10);
  for (std::size_t i = 0; i < 10; ++i) g[i] = i + 1;
  EXPECT_NEAR(*average_lag(g, 10, 10), 1.0, 1e-6);
}

TEST(AverageLag, ReadingOneMoreBeforeEveryWriteAddsOne) {
  // The full source is never reached, so tau = |y| for both schedules.
  std::vector<std::size_t> g{1, 2, 2, 4, 5}, h{2, 3, 3, 5, 6};
  const auto a = *average_lag(std::span(g), 10, 5);
  const auto b = *average_lag(std::span(h), 10, 5);
  EXPECT_NEAR(b - a, 1.0, 1e-12);
}

TEST(AverageLag, FilterAndErrors) {
  std::vector<std::size_t> g{3, 3, 3};
  EXPECT_FALSE(average_lag(g, 3, 3).has_value());
  EXPECT_TRUE(average_lag(g, 3, 3, 1).has_value());
  EXPECT_THROW(average_lag(g, 0, 3), ContractError);
  std::vector<std::size_t> bad{2, 1};
  EXPECT_THROW(average_lag(bad, 8, 2), ContractError);
  std::vector<std::size_t> over{9};
  EXPECT_THROW(average_lag(over, 8, 1), ContractError);
  EXPECT_DOUBLE_EQ(*average_lag(std::vector<std::size_t>{}, 8, 0), 8.0);
}

TEST(Latency, ReportExcludesShortSentences) {
  std::vector<ParallelPair> pairs{{std::vector<TokenId>(10, 4), std::vector<TokenId>(10, 4), {}},
                                  {std::vector<TokenId>(3, 4), std::vector<TokenId>(3, 4), {}}};
  std::vector<DecodeResult> results(2);
  results[0].tokens.assign(10, 4);
  results[0].delays.assign(10, 10);
  results[1].tokens.assign(3, 4);
  results[1].delays.assign(3, 3);
  const auto r = latency_report(results, pairs);
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_EQ(r.included(), 1u);
  EXPECT_DOUBLE_EQ(r.mean_al, 10.0);
  EXPECT_DOUBLE_EQ(mean_reads(results), (10.0 + 3.0) / 2);
}

namespace {

struct SweepFixture {
  Corpus corpus;
  Seq2SeqModel<float> model;
  PolicyParams<float> policy;
};

SweepFixture sweep_fixture() {
  GeneratorParams p;
  p.size = 30;
  p.vocab_size = 10;
  p.min_len = 8;
  p.max_len = 10;
  SweepFixture f{generate_synthetic(p, 2), {}, {}};
  ModelConfig cfg;
  cfg.d_model = 16;
  f.model = make_model<float>(cfg, f.corpus.source_vocab, f.corpus.target_vocab, 3);
  f.policy = init_policy<float>(16, 8, 6, 0.0f);
  return f;
}

}  // namespace

TEST(Sweep, RowsCsvAndDeterminism) {
  auto f = sweep_fixture();
  std::vector<double> deltas{0.5};
  auto rows = sweep_delta(f.model, f.policy, f.corpus.pairs, deltas);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].sentences, 30u);

  std::vector<double> three{0.5, 0.8, 0.9};
  std::ostringstream a, b, c;
  write_sweep_csv(a, sweep_delta(f.model, f.policy, f.corpus.pairs, three));
  write_sweep_csv(b, sweep_delta(f.model, f.policy, f.corpus.pairs, three));
  write_sweep_csv(c, sweep_delta(f.model, f.policy, f.corpus.pairs, three, 1, 4));
  const std::string csv = a.str();
  EXPECT_EQ(csv, b.str());
  EXPECT_EQ(csv, c.str());
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "delta,bleu,al,mean_reads,sentences");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_NE(csv.find("\n0.5000,"), std::string::npos);
}

TEST(Sweep, InvalidDeltas) {
  auto f = sweep_fixture();
  for (auto d : {std::vector<double>{}, std::vector<double>{0.0}, std::vector<double>{0.9, 0.5},
                 std::vector<double>{0.5, 1.0}})
    EXPECT_THROW(sweep_delta(f.model, f.policy, f.corpus.pairs, d), ConfigError);
}

TEST(Sweep, ForcedReadAlIsMeanSourceLength) {
  auto f = sweep_fixture();
  auto dec = decode_corpus(f.model, ForcedReadPolicy(), f.corpus.pairs, 1);
  const auto lat = latency_report(dec.results, f.corpus.pairs);
  double mean_len = 0;
  for (const auto& p : f.corpus.pairs) mean_len += static_cast<double>(p.source.size());
  mean_len /= static_cast<double>(f.corpus.size());
  EXPECT_NEAR(lat.mean_al, mean_len, 1e-9);
}

TEST(Sweep, SvgIsWritten) {
  std::vector<SweepRow> rows{{0.5, 0.6, 2.0, 3.0, 10, 0}, {0.9, 0.8, 3.0, 4.0, 10, 0}};
  std::ostringstream out;
  write_sweep_svg(out, rows);
  EXPECT_NE(out.str().find("<svg"), std::string::npos);
  EXPECT_NE(out.str().find("polyline"), std::string::npos);
}
