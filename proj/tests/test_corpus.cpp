#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "simulmt/corpus.hpp"
#include "simulmt/rng.hpp"

using namespace simulmt;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& content) {
  auto dir = std::filesystem::temp_directory_path() / "simulmt_test_corpus";
  std::filesystem::create_directories(dir);
  auto path = dir / name;
  std::ofstream(path, std::ios::binary) << content;
  return path;
}

GeneratorParams params(std::int64_t size, std::int64_t vocab, double fert, double merge, double swap) {
  GeneratorParams p;
  p.size = size;
  p.vocab_size = vocab;
  p.fertility_rate = fert;
  p.merge_rate = merge;
  p.swap_probability = swap;
  return p;
}

}  // namespace

TEST(Rng, FrozenStream) {
  // Reference values for seed 0, computed once and frozen.
  std::uint64_t s = 0;
  EXPECT_EQ(splitmix64(s), 0xE220A8397B1DCDAFull);
  EXPECT_EQ(splitmix64(s), 0x6E789E6AA1B965F4ull);
  Rng a(42), b(42);
  for (int k = 0; k < 100; ++k) ASSERT_EQ(a.next(), b.next());
}

TEST(Rng, SplitIsIndependentOfParentPosition) {
  Rng a(9);
  const auto child1 = a.split(3).next();
  a.next();
  EXPECT_EQ(a.split(3).next(), child1);
  EXPECT_NE(a.split(4).next(), child1);
}

TEST(Rng, BelowStaysInRange) {
  Rng r(1);
  for (int k = 0; k < 10000; ++k) ASSERT_LT(r.below(7), 7u);
  for (int k = 0; k < 1000; ++k) {
    const float u = r.uniform();
    ASSERT_GE(u, 0.0f);
    ASSERT_LT(u, 1.0f);
  }
}

TEST(Rng, DeriveSeedDependsOnStage) {
  EXPECT_EQ(derive_seed(1, "train_base"), derive_seed(1, "train_base"));
  EXPECT_NE(derive_seed(1, "train_base"), derive_seed(1, "train_policy"));
  EXPECT_NE(derive_seed(1, "train_base"), derive_seed(2, "train_base"));
}

TEST(Vocab, ReservedIdsAndRoundTrip) {
  Vocab v;
  EXPECT_EQ(v.size(), Vocab::kReserved);
  EXPECT_EQ(v.id("</s>"), kEos);
  const auto a = v.add("a");
  EXPECT_EQ(a, 4);
  EXPECT_EQ(v.add("a"), a);
  EXPECT_EQ(v.token(a), "a");
  EXPECT_EQ(v.id("never-seen"), kUnk);
  EXPECT_EQ(Vocab::from_tokens(v.tokens()), v);
  EXPECT_THROW(Vocab::from_tokens({"<pad>", "<s>"}), FormatError);
  EXPECT_THROW(Vocab::from_tokens({"<pad>", "<s>", "</s>", "<unk>", "x", "x"}), FormatError);
}

TEST(Generator, EmptyCorpusKeepsVocab) {
  auto c = generate_synthetic(params(0, 20, 0.2, 0.1, 0.1), 123);
  EXPECT_EQ(c.size(), 0u);
  EXPECT_GT(c.source_vocab.size(), Vocab::kReserved);
  EXPECT_GT(c.target_vocab.size(), Vocab::kReserved);
}

TEST(Generator, Deterministic) {
  const auto p = GeneratorParams{};
  auto a = generate_synthetic(p, 5), b = generate_synthetic(p, 5), c = generate_synthetic(p, 6);
  EXPECT_EQ(a.pairs, b.pairs);
  EXPECT_EQ(a.target_vocab, b.target_vocab);
  EXPECT_NE(a.pairs, c.pairs);
}

TEST(Generator, FertilityLengthIdentity) {
  auto c = generate_synthetic(params(100, 20, 0.2, 0.0, 0.0), 7);
  ASSERT_EQ(c.size(), 100u);
  for (const auto& p : c.pairs) {
    ASSERT_TRUE(p.gold_alignment);
    std::vector<int> links_per_source(p.source.size(), 0);
    for (const auto& l : *p.gold_alignment) ++links_per_source[l.source - 1];
    std::size_t fertile = 0;
    for (int n : links_per_source) fertile += n == 2;
    EXPECT_EQ(p.target.size(), p.source.size() + fertile);
  }
}

TEST(Generator, SwapsCreateCrossings) {
  auto c = generate_synthetic(params(50, 24, 0.0, 0.0, 1.0), 3);
  for (const auto& p : c.pairs) {
    if (p.source.size() < 2) continue;
    const auto& a = *p.gold_alignment;
    bool crossing = false;
    for (const auto& x : a)
      for (const auto& y : a) crossing |= x.target < y.target && x.source > y.source;
    EXPECT_TRUE(crossing);
  }
}

TEST(Generator, AlignmentSoundnessAndAccounting) {
  auto c = generate_synthetic(params(300, 30, 0.2, 0.2, 0.3), 11);
  for (const auto& p : c.pairs) {
    const auto& a = *p.gold_alignment;
    std::vector<int> per_target(p.target.size(), 0), per_source(p.source.size(), 0);
    for (const auto& l : a) {
      ASSERT_GE(l.target, 1u);
      ASSERT_LE(l.target, p.target.size());
      ASSERT_GE(l.source, 1u);
      ASSERT_LE(l.source, p.source.size());
      ++per_target[l.target - 1];
      ++per_source[l.source - 1];
    }
    std::size_t fertile = 0, merged = 0;
    for (int n : per_target) {
      ASSERT_GE(n, 1);
      ASSERT_LE(n, 2);
      merged += n == 2;  // a 2->1 target links both of its sources
    }
    for (int n : per_source) {
      ASSERT_GE(n, 1);
      fertile += n == 2;
    }
    EXPECT_EQ(static_cast<long>(p.target.size()) - static_cast<long>(p.source.size()),
              static_cast<long>(fertile) - static_cast<long>(merged));
    for (auto id : p.source) ASSERT_LT(static_cast<std::size_t>(id), c.source_vocab.size());
    for (auto id : p.target) ASSERT_LT(static_cast<std::size_t>(id), c.target_vocab.size());
  }
}

TEST(Generator, InvalidParamsNameTheField) {
  auto expect_field = [](GeneratorParams p, const std::string& field) {
    try {
      generate_synthetic(p, 1);
      FAIL() << "expected ConfigError for " << field;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  auto p = GeneratorParams{};
  p.vocab_size = 7;
  expect_field(p, "vocab_size");
  p = GeneratorParams{};
  p.fertility_rate = 1.5;
  expect_field(p, "fertility_rate");
  p = GeneratorParams{};
  p.size = -1;
  expect_field(p, "size");
  p = GeneratorParams{};
  p.min_len = 1;
  expect_field(p, "min_len");
}

TEST(Tsv, ParsesSinglePair) {
  auto path = temp_file("one.tsv", "a b\tc d\n");
  auto loaded = load_tsv(path.string());
  ASSERT_EQ(loaded.corpus.size(), 1u);
  const auto& p = loaded.corpus.pairs[0];
  EXPECT_EQ(join_tokens(p.source, loaded.corpus.source_vocab), "a b");
  EXPECT_EQ(join_tokens(p.target, loaded.corpus.target_vocab), "c d");
}

TEST(Tsv, EmptyFile) {
  auto loaded = load_tsv(temp_file("empty.tsv", "").string());
  EXPECT_EQ(loaded.corpus.size(), 0u);
  EXPECT_EQ(loaded.corpus.source_vocab.size(), Vocab::kReserved);
  EXPECT_EQ(loaded.corpus.target_vocab.size(), Vocab::kReserved);
}

TEST(Tsv, MalformedLineNamesLineNumber) {
  auto path = temp_file("bad.tsv", "a\tb\nno tab here\nc\td\n");
  try {
    load_tsv(path.string());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Tsv, EmptySideSkipped) {
  auto loaded = load_tsv(temp_file("skip.tsv", "a\t\n\tb\nx y\tz\n").string());
  EXPECT_EQ(loaded.corpus.size(), 1u);
  EXPECT_EQ(loaded.skipped, 2u);
}

TEST(Tsv, MaxPairsAndUnkMapping) {
  auto path = temp_file("three.tsv", "a\tb\nc\td\ne\tf\n");
  EXPECT_EQ(load_tsv(path.string(), 2).corpus.size(), 2u);
  Vocab sv, tv;
  sv.add("a");
  tv.add("b");
  auto mapped = map_with_vocab(read_tsv_text(path.string()), sv, tv);
  EXPECT_EQ(mapped.pairs[1].source[0], kUnk);
}

TEST(Tsv, WriteReadRoundTripWithAlignment) {
  auto c = generate_synthetic(params(20, 20, 0.2, 0.1, 0.2), 4);
  auto dir = std::filesystem::temp_directory_path() / "simulmt_test_corpus";
  std::filesystem::create_directories(dir);
  write_tsv(c, (dir / "rt.tsv").string());
  write_alignment(c, (dir / "rt.align").string());
  auto loaded = map_with_vocab(read_tsv_text((dir / "rt.tsv").string()), c.source_vocab, c.target_vocab);
  auto align = read_alignment((dir / "rt.align").string());
  ASSERT_EQ(loaded.size(), c.size());
  ASSERT_EQ(align.size(), c.size());
  for (std::size_t k = 0; k < c.size(); ++k) {
    EXPECT_EQ(loaded.pairs[k].source, c.pairs[k].source);
    EXPECT_EQ(loaded.pairs[k].target, c.pairs[k].target);
    EXPECT_EQ(align[k], *c.pairs[k].gold_alignment);
  }
}

TEST(Split, SizesAndDeterminism) {
  auto c = generate_synthetic(params(10, 20, 0.1, 0.1, 0.1), 2);
  auto a = split(c, {0.8, 0.1, 0.1}, 9);
  EXPECT_EQ(a.train.size(), 8u);
  EXPECT_EQ(a.dev.size(), 1u);
  EXPECT_EQ(a.test.size(), 1u);
  auto b = split(c, {0.8, 0.1, 0.1}, 9);
  EXPECT_EQ(a.train.pairs, b.train.pairs);
  EXPECT_EQ(a.test.pairs, b.test.pairs);
}

TEST(Split, ZeroTestFraction) {
  auto c = generate_synthetic(params(10, 20, 0.1, 0.1, 0.1), 2);
  auto s = split(c, {0.5, 0.5, 0.0}, 1);
  EXPECT_EQ(s.test.size(), 0u);
  EXPECT_EQ(s.train.size() + s.dev.size(), 10u);
  std::multiset<std::vector<TokenId>> all, parts;
  for (const auto& p : c.pairs) all.insert(p.source);
  for (const auto& p : s.train.pairs) parts.insert(p.source);
  for (const auto& p : s.dev.pairs) parts.insert(p.source);
  EXPECT_EQ(all, parts);
}

TEST(Split, InvalidFractions) {
  auto c = generate_synthetic(params(10, 20, 0.1, 0.1, 0.1), 2);
  EXPECT_THROW(split(c, {0.5, 0.4, 0.0}, 1), ConfigError);
  EXPECT_THROW(split(c, {1.2, -0.2, 0.0}, 1), ConfigError);
}
