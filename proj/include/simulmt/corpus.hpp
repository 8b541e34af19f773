#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "simulmt/error.hpp"
#include "simulmt/rng.hpp"

namespace simulmt {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;

class Vocab {
 public:
  Vocab() {
    for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) insert(t);
  }

  static constexpr std::size_t kReserved = 4;

  /// Id of `token`, adding it if new.
  TokenId add(std::string_view token) {
    if (auto it = index_.find(std::string(token)); it != index_.end()) return it->second;
    return insert(std::string(token));
  }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  const std::string& token(TokenId id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), "token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Rebuilds a vocabulary from a full token list (reserved entries first).
  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    Vocab v;
    if (tokens.size() < kReserved) throw FormatError("vocabulary shorter than the reserved block");
    for (std::size_t i = 0; i < kReserved; ++i) {
      if (tokens[i] != v.tokens_[i]) throw FormatError("vocabulary reserved token mismatch at " + std::to_string(i));
    }
    for (std::size_t i = kReserved; i < tokens.size(); ++i) {
      if (v.contains(tokens[i])) throw FormatError("duplicate vocabulary token '" + tokens[i] + "'");
      v.insert(tokens[i]);
    }
    return v;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  TokenId insert(std::string token) {
    const auto id = static_cast<TokenId>(tokens_.size());
    index_.emplace(token, id);
    tokens_.push_back(std::move(token));
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// One link of a word alignment; both indices are 1-based.
struct AlignmentLink {
  std::size_t target;
  std::size_t source;
  friend auto operator<=>(const AlignmentLink&, const AlignmentLink&) = default;
};

struct ParallelPair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
  std::optional<std::vector<AlignmentLink>> gold_alignment;

  friend bool operator==(const ParallelPair&, const ParallelPair&) = default;
};

struct GeneratorParams {
  std::int64_t size = 1000;
  std::int64_t vocab_size = 24;
  double fertility_rate = 0.15;
  double merge_rate = 0.1;
  double swap_probability = 0.15;
  std::int64_t min_len = 3;
  std::int64_t max_len = 12;

  void validate() const {
    if (size < 0) throw ConfigError("generator.size must be >= 0");
    if (vocab_size < 8) throw ConfigError("generator.vocab_size must be >= 8");
    auto unit = [](double v, const char* field) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("generator.") + field + " must be in [0,1]");
    };
    unit(fertility_rate, "fertility_rate");
    unit(merge_rate, "merge_rate");
    unit(swap_probability, "swap_probability");
    if (min_len < 2) throw ConfigError("generator.min_len must be >= 2");
    if (max_len < min_len) throw ConfigError("generator.max_len must be >= min_len");
  }

  friend bool operator==(const GeneratorParams&, const GeneratorParams&) = default;
};

struct Corpus {
  std::vector<ParallelPair> pairs;
  Vocab source_vocab;
  Vocab target_vocab;
  std::uint64_t seed = 0;
  std::optional<GeneratorParams> generator_params;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

/// Which vocabulary items carry each synthetic phenomenon. Derived from
/// (params, seed) alone, independent of the sampled sentences.
struct SyntheticLexicon {
  std::vector<bool> fertile;
  std::vector<bool> swap_trigger;
  std::vector<std::pair<std::int64_t, std::int64_t>> merges;

  bool is_merge(std::int64_t a, std::int64_t b) const {
    return std::find(merges.begin(), merges.end(), std::make_pair(a, b)) != merges.end();
  }
};

namespace detail {

inline std::string source_word(std::int64_t v) { return "s" + std::to_string(v); }
inline std::string target_word(std::int64_t v) { return "t" + std::to_string(v); }
inline std::string target_word_part(std::int64_t v, int part) {
  return "t" + std::to_string(v) + "." + std::to_string(part);
}
inline std::string merge_word(std::int64_t a, std::int64_t b) {
  return "m" + std::to_string(a) + "." + std::to_string(b);
}

inline std::size_t rounded_count(double rate, std::int64_t n) {
  return static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
}

}  // namespace detail

inline SyntheticLexicon make_lexicon(const GeneratorParams& p, Rng rng) {
  const auto n = static_cast<std::size_t>(p.vocab_size);
  SyntheticLexicon lex;
  lex.fertile.assign(n, false);
  lex.swap_trigger.assign(n, false);

  std::vector<std::int64_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  for (std::size_t k = 0; k < std::min(n, detail::rounded_count(p.fertility_rate, p.vocab_size)); ++k)
    lex.fertile[static_cast<std::size_t>(perm[k])] = true;

  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  for (std::size_t k = 0; k < std::min(n, detail::rounded_count(p.swap_probability, p.vocab_size)); ++k)
    lex.swap_trigger[static_cast<std::size_t>(perm[k])] = true;

  std::vector<std::int64_t> plain;
  for (std::size_t v = 0; v < n; ++v)
    if (!lex.fertile[v]) plain.push_back(static_cast<std::int64_t>(v));
  const std::size_t wanted = detail::rounded_count(p.merge_rate, p.vocab_size);
  if (plain.size() >= 2) {
    const std::size_t max_pairs = plain.size() * (plain.size() - 1);
    for (std::size_t attempt = 0; lex.merges.size() < std::min(wanted, max_pairs) && attempt < 64 * (wanted + 1);
         ++attempt) {
      const auto a = plain[rng.below(plain.size())];
      const auto b = plain[rng.below(plain.size())];
      if (a != b && !lex.is_merge(a, b)) lex.merges.emplace_back(a, b);
    }
  }
  return lex;
}

/// Seeded synthetic parallel corpus with known alignments.
///
/// Each source word s<v> maps to t<v>; a fertility_rate share of the
/// vocabulary maps to two tokens t<v>.1 t<v>.2; a merge_rate share of
/// designated source bigrams (a b) maps to one token m<a>.<b>; a
/// swap_probability share of words are swap triggers whose target is moved
/// after the following fertility-1 target, creating a crossing. All of it is
/// a deterministic function of the source sentence, so the mapping is
/// learnable.
inline Corpus generate_synthetic(const GeneratorParams& params, std::uint64_t seed) {
  params.validate();
  Corpus corpus;
  corpus.seed = seed;
  corpus.generator_params = params;

  const Rng root(seed);
  const SyntheticLexicon lex = make_lexicon(params, root.split(1));

  for (std::int64_t v = 0; v < params.vocab_size; ++v) corpus.source_vocab.add(detail::source_word(v));
  for (std::int64_t v = 0; v < params.vocab_size; ++v) {
    if (lex.fertile[static_cast<std::size_t>(v)]) {
      corpus.target_vocab.add(detail::target_word_part(v, 1));
      corpus.target_vocab.add(detail::target_word_part(v, 2));
    } else {
      corpus.target_vocab.add(detail::target_word(v));
    }
  }
  for (const auto& [a, b] : lex.merges) corpus.target_vocab.add(detail::merge_word(a, b));

  struct Unit {
    std::vector<TokenId> tokens;
    std::vector<std::size_t> sources;  // 0-based
    bool swappable_head = false;
    bool plain = false;
  };

  Rng rng = root.split(2);
  corpus.pairs.reserve(static_cast<std::size_t>(params.size));
  for (std::int64_t n = 0; n < params.size; ++n) {
    const auto len = static_cast<std::size_t>(rng.range(params.min_len, params.max_len));
    std::vector<std::int64_t> words;
    while (words.size() < len) {
      if (!lex.merges.empty() && len - words.size() >= 2 && rng.bernoulli(params.merge_rate)) {
        const auto& m = lex.merges[rng.below(lex.merges.size())];
        words.push_back(m.first);
        words.push_back(m.second);
      } else {
        words.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(params.vocab_size))));
      }
    }

    std::vector<Unit> units;
    for (std::size_t k = 0; k < words.size();) {
      const auto w = words[k];
      if (k + 1 < words.size() && lex.is_merge(w, words[k + 1])) {
        units.push_back({{corpus.target_vocab.id(detail::merge_word(w, words[k + 1]))}, {k, k + 1}, false, false});
        k += 2;
        continue;
      }
      if (lex.fertile[static_cast<std::size_t>(w)]) {
        units.push_back({{corpus.target_vocab.id(detail::target_word_part(w, 1)),
                          corpus.target_vocab.id(detail::target_word_part(w, 2))},
                         {k},
                         false,
                         false});
      } else {
        units.push_back({{corpus.target_vocab.id(detail::target_word(w))},
                         {k},
                         lex.swap_trigger[static_cast<std::size_t>(w)],
                         true});
      }
      ++k;
    }
    for (std::size_t u = 0; u + 1 < units.size();) {
      if (units[u].plain && units[u].swappable_head && units[u + 1].plain) {
        std::swap(units[u], units[u + 1]);
        u += 2;
      } else {
        ++u;
      }
    }

    ParallelPair pair;
    std::vector<AlignmentLink> links;
    for (const auto w : words) pair.source.push_back(corpus.source_vocab.id(detail::source_word(w)));
    for (const auto& unit : units) {
      for (const auto tok : unit.tokens) {
        pair.target.push_back(tok);
        for (const auto s : unit.sources) links.push_back({pair.target.size(), s + 1});
      }
    }
    pair.gold_alignment = std::move(links);
    corpus.pairs.push_back(std::move(pair));
  }
  return corpus;
}

/// A sentence pair as whitespace-split strings.
struct TextPair {
  std::vector<std::string> source;
  std::vector<std::string> target;
};

inline std::vector<std::string> split_spaces(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ') ++i;
    if (i > start) out.emplace_back(line.substr(start, i - start));
  }
  return out;
}

struct TextCorpus {
  std::vector<TextPair> pairs;
  std::size_t skipped = 0;
};

/// Reads "source<TAB>target" lines. Lines with an empty side are skipped and
/// counted; a line without exactly one tab is a parse error.
inline TextCorpus read_tsv_text(const std::string& path, std::optional<std::size_t> max_pairs = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file '" + path + "'");
  TextCorpus out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (max_pairs && out.pairs.size() >= *max_pairs) break;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tabs = std::count(line.begin(), line.end(), '\t');
    if (tabs != 1) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected 2 tab-separated fields, found " +
                       std::to_string(tabs + 1));
    }
    const auto tab = line.find('\t');
    TextPair pair{split_spaces(std::string_view(line).substr(0, tab)),
                  split_spaces(std::string_view(line).substr(tab + 1))};
    if (pair.source.empty() || pair.target.empty()) {
      ++out.skipped;
      continue;
    }
    out.pairs.push_back(std::move(pair));
  }
  return out;
}

struct LoadedCorpus {
  Corpus corpus;
  std::size_t skipped = 0;
};

/// Loads a TSV corpus and builds vocabularies in order of first appearance.
inline LoadedCorpus load_tsv(const std::string& path, std::optional<std::size_t> max_pairs = std::nullopt) {
  TextCorpus text = read_tsv_text(path, max_pairs);
  LoadedCorpus out;
  out.skipped = text.skipped;
  for (const auto& tp : text.pairs) {
    ParallelPair pair;
    for (const auto& t : tp.source) pair.source.push_back(out.corpus.source_vocab.add(t));
    for (const auto& t : tp.target) pair.target.push_back(out.corpus.target_vocab.add(t));
    out.corpus.pairs.push_back(std::move(pair));
  }
  return out;
}

/// Maps a text corpus through fixed vocabularies; unknown tokens become UNK.
inline Corpus map_with_vocab(const TextCorpus& text, const Vocab& source_vocab, const Vocab& target_vocab) {
  Corpus corpus;
  corpus.source_vocab = source_vocab;
  corpus.target_vocab = target_vocab;
  for (const auto& tp : text.pairs) {
    ParallelPair pair;
    for (const auto& t : tp.source) pair.source.push_back(source_vocab.id(t));
    for (const auto& t : tp.target) pair.target.push_back(target_vocab.id(t));
    corpus.pairs.push_back(std::move(pair));
  }
  return corpus;
}

inline std::string join_tokens(const std::vector<TokenId>& ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

inline void write_tsv(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (const auto& p : corpus.pairs)
    out << join_tokens(p.source, corpus.source_vocab) << '\t' << join_tokens(p.target, corpus.target_vocab) << '\n';
}

/// Sidecar alignment file: one line per pair, space-separated "i-j" links
/// (target i, source j, both 1-based). Pairs without alignment get an empty line.
inline void write_alignment(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (const auto& p : corpus.pairs) {
    if (p.gold_alignment) {
      for (std::size_t k = 0; k < p.gold_alignment->size(); ++k) {
        if (k) out << ' ';
        out << (*p.gold_alignment)[k].target << '-' << (*p.gold_alignment)[k].source;
      }
    }
    out << '\n';
  }
}

inline std::vector<std::vector<AlignmentLink>> read_alignment(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open alignment file '" + path + "'");
  std::vector<std::vector<AlignmentLink>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::vector<AlignmentLink> links;
    for (const auto& item : split_spaces(line)) {
      const auto dash = item.find('-');
      try {
        if (dash == std::string::npos) throw std::invalid_argument(item);
        links.push_back({std::stoul(item.substr(0, dash)), std::stoul(item.substr(dash + 1))});
      } catch (const std::logic_error&) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": bad link '" + item + "'");
      }
    }
    out.push_back(std::move(links));
  }
  return out;
}

struct CorpusSplit {
  Corpus train;
  Corpus dev;
  Corpus test;
};

/// Deterministic shuffle-and-cut. Sizes are round(f * n) for train and dev;
/// test takes the remainder.
inline CorpusSplit split(const Corpus& corpus, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions)
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split fractions must lie in [0,1]");
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng(seed).shuffle(order);

  const std::size_t n = corpus.size();
  const std::size_t n_train = std::min(n, static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n))));
  const std::size_t n_dev =
      std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n))));

  CorpusSplit out;
  for (Corpus* c : {&out.train, &out.dev, &out.test}) {
    c->source_vocab = corpus.source_vocab;
    c->target_vocab = corpus.target_vocab;
    c->seed = corpus.seed;
    c->generator_params = corpus.generator_params;
  }
  for (std::size_t k = 0; k < n; ++k) {
    Corpus& dst = k < n_train ? out.train : (k < n_train + n_dev ? out.dev : out.test);
    dst.pairs.push_back(corpus.pairs[order[k]]);
  }
  return out;
}

}  // namespace simulmt
