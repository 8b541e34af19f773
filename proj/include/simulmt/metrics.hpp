#pragma once

// Corpus BLEU-4 and Average Lagging, plus the delta sweep.
//
// BLEU: modified n-gram precision for n = 1..4 over the whole corpus; for
// n >= 2 both numerator and denominator get +1. BP = exp(1 - r/c) when the
// hypothesis total c is shorter than the reference total r. A zero p_1 gives
// score 0.
//
// AL for delays g (1-based source counts), gamma' = |y| / |x|:
//   tau = first i with g(i) = |x| (|y| if none)
//   AL  = 1/tau * sum_{i<=tau} ( g(i) - (i-1)/gamma' )

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "simulmt/corpus.hpp"
#include "simulmt/error.hpp"
#include "simulmt/streaming.hpp"

namespace simulmt {

struct BleuReport {
  double score = 0;
  std::array<double, 4> precisions{};
  double brevity_penalty = 1;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

template <class Tok>
BleuReport bleu(std::span<const std::vector<Tok>> hypotheses, std::span<const std::vector<Tok>> references) {
  if (hypotheses.empty()) throw MetricError("bleu: empty hypothesis set");
  if (hypotheses.size() != references.size())
    throw MetricError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                      std::to_string(references.size()) + " references");
  std::array<double, 4> match{}, total{};
  BleuReport r;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& h = hypotheses[s];
    const auto& ref = references[s];
    if (ref.empty()) throw MetricError("bleu: reference " + std::to_string(s) + " is empty");
    r.hypothesis_length += h.size();
    r.reference_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<Tok>, std::size_t> ref_counts;
      for (std::size_t k = 0; k + n <= ref.size(); ++k) ++ref_counts[std::vector<Tok>(ref.begin() + k, ref.begin() + k + n)];
      std::map<std::vector<Tok>, std::size_t> hyp_counts;
      for (std::size_t k = 0; k + n <= h.size(); ++k) ++hyp_counts[std::vector<Tok>(h.begin() + k, h.begin() + k + n)];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        match[n - 1] += static_cast<double>(std::min(c, it == ref_counts.end() ? 0 : it->second));
        total[n - 1] += static_cast<double>(c);
      }
    }
  }
  double log_sum = 0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    const double add = n == 0 ? 0.0 : 1.0;
    const double p = total[n] + add > 0 ? (match[n] + add) / (total[n] + add) : 0.0;
    r.precisions[n] = p;
    if (p <= 0) zero = true;
    else log_sum += std::log(p);
  }
  const auto c = static_cast<double>(r.hypothesis_length), ref_len = static_cast<double>(r.reference_length);
  r.brevity_penalty = c >= ref_len ? 1.0 : (c == 0 ? 0.0 : std::exp(1.0 - ref_len / c));
  r.score = zero ? 0.0 : r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

template <class Tok>
BleuReport bleu(const std::vector<std::vector<Tok>>& hypotheses, const std::vector<std::vector<Tok>>& references) {
  return bleu<Tok>(std::span<const std::vector<Tok>>(hypotheses), std::span<const std::vector<Tok>>(references));
}

/// AL of one sentence; nullopt when source_len is below the filter. An empty
/// hypothesis (EOS only, which is written at g = |x|) scores |x|.
inline std::optional<double> average_lag(std::span<const std::size_t> delays, std::size_t source_len,
                                         std::size_t target_len, std::size_t min_source_len = 8) {
  if (source_len == 0) throw ContractError("average_lag: source length is 0");
  if (delays.size() != target_len)
    throw ContractError("average_lag: " + std::to_string(delays.size()) + " delays for target length " +
                        std::to_string(target_len));
  for (std::size_t i = 0; i < delays.size(); ++i) {
    if (delays[i] < 1 || delays[i] > source_len) throw ContractError("average_lag: delay out of range at " + std::to_string(i + 1));
    if (i > 0 && delays[i] < delays[i - 1]) throw ContractError("average_lag: delays decrease at " + std::to_string(i + 1));
  }
  if (source_len < min_source_len) return std::nullopt;
  if (target_len == 0) return static_cast<double>(source_len);
  const double rate = static_cast<double>(target_len) / static_cast<double>(source_len);
  std::size_t tau = target_len;
  for (std::size_t i = 0; i < target_len; ++i) {
    if (delays[i] == source_len) {
      tau = i + 1;
      break;
    }
  }
  double sum = 0;
  for (std::size_t i = 0; i < tau; ++i) sum += static_cast<double>(delays[i]) - static_cast<double>(i) / rate;
  return sum / static_cast<double>(tau);
}

struct LatencyReport {
  double mean_al = 0;
  std::vector<std::optional<double>> per_sentence;
  std::size_t excluded = 0;
  std::size_t included() const { return per_sentence.size() - excluded; }
};

inline LatencyReport latency_report(std::span<const DecodeResult> results, std::span<const ParallelPair> pairs,
                                    std::size_t min_source_len = 8) {
  if (results.size() != pairs.size()) throw ContractError("latency_report: result/pair count mismatch");
  LatencyReport r;
  double sum = 0;
  for (std::size_t s = 0; s < results.size(); ++s) {
    const auto al = average_lag(results[s].delays, pairs[s].source.size(), results[s].tokens.size(), min_source_len);
    r.per_sentence.push_back(al);
    if (al) sum += *al;
    else ++r.excluded;
  }
  if (r.included()) r.mean_al = sum / static_cast<double>(r.included());
  return r;
}

/// Mean over sentences of the mean delay g(i) per written token.
inline double mean_reads(std::span<const DecodeResult> results) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& r : results) {
    if (r.delays.empty()) continue;
    double s = 0;
    for (auto g : r.delays) s += static_cast<double>(g);
    sum += s / static_cast<double>(r.delays.size());
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

inline std::vector<std::string> to_strings(const Vocab& vocab, std::span<const TokenId> ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(vocab.token(id));
  return out;
}

inline BleuReport corpus_bleu(const Vocab& target_vocab, std::span<const DecodeResult> results,
                              std::span<const ParallelPair> pairs) {
  if (results.size() != pairs.size()) throw ContractError("corpus_bleu: result/pair count mismatch");
  std::vector<std::vector<std::string>> hyps, refs;
  for (std::size_t s = 0; s < results.size(); ++s) {
    hyps.push_back(to_strings(target_vocab, results[s].tokens));
    refs.push_back(to_strings(target_vocab, pairs[s].target));
  }
  return bleu<std::string>(hyps, refs);
}

/// Runs f(index) for every index in [0, n) on up to `threads` workers.
/// Each index writes only its own slot, so results do not depend on threads.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) f(i);
    });
  for (auto& th : pool) th.join();
}

struct DecodeFailure {
  std::size_t sentence = 0;
  std::string message;
};

struct CorpusDecode {
  std::vector<DecodeResult> results;
  std::vector<DecodeFailure> failures;
  std::size_t synchrony_violations = 0;
};

/// Decodes every source with the given policy. Failed sentences keep an
/// empty result and are listed in `failures`.
inline CorpusDecode decode_corpus(const Seq2SeqModel<float>& model, const ReadWritePolicy& policy,
                                  std::span<const ParallelPair> pairs, std::size_t beam_size,
                                  std::size_t threads = 1, std::size_t max_len_factor = 2) {
  CorpusDecode out;
  out.results.resize(pairs.size());
  std::vector<std::string> errors(pairs.size());
  std::vector<std::size_t> violations(pairs.size(), 0);
  parallel_for(pairs.size(), threads, [&](std::size_t s) {
    try {
      if (beam_size == 1) {
        out.results[s] = greedy_stream(model, policy, pairs[s].source, max_len_factor);
      } else {
        auto b = beam_stream(model, policy, pairs[s].source, beam_size, max_len_factor);
        out.results[s] = std::move(b.best);
        violations[s] = b.trace.violations;
      }
    } catch (const std::exception& e) {
      errors[s] = e.what();
      if (errors[s].empty()) errors[s] = "decode failed";
    }
  });
  for (std::size_t s = 0; s < pairs.size(); ++s) {
    if (!errors[s].empty()) out.failures.push_back({s, errors[s]});
    out.synchrony_violations += violations[s];
  }
  return out;
}

struct SweepRow {
  double delta = 0;
  double bleu = 0;
  double al = 0;
  double mean_reads = 0;
  std::size_t sentences = 0;
  std::size_t failures = 0;
};

inline void check_deltas(std::span<const double> deltas) {
  if (deltas.empty()) throw ConfigError("sweep: no delta values");
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (!(deltas[i] > 0 && deltas[i] < 1)) throw ConfigError("sweep: delta " + std::to_string(deltas[i]) + " outside (0, 1)");
    if (i > 0 && !(deltas[i] > deltas[i - 1])) throw ConfigError("sweep: deltas must be strictly ascending");
  }
}

/// One decode of the corpus per delta with the same policy parameters.
inline std::vector<SweepRow> sweep_delta(const Seq2SeqModel<float>& model, const PolicyParams<float>& policy,
                                         std::span<const ParallelPair> pairs, std::span<const double> deltas,
                                         std::size_t beam_size = 1, std::size_t threads = 1,
                                         std::size_t min_source_len = 8) {
  check_deltas(deltas);
  if (pairs.empty()) throw DataError("sweep: empty corpus");
  std::vector<SweepRow> rows;
  for (double delta : deltas) {
    SweepRow row;
    row.delta = delta;
    try {
      LearnedPolicy lp(policy, static_cast<float>(delta));
      auto dec = decode_corpus(model, lp, pairs, beam_size, threads);
      row.failures = dec.failures.size();
      std::vector<DecodeResult> ok;
      std::vector<ParallelPair> ok_pairs;
      std::vector<bool> failed(pairs.size(), false);
      for (const auto& f : dec.failures) failed[f.sentence] = true;
      for (std::size_t s = 0; s < pairs.size(); ++s) {
        if (failed[s]) continue;
        ok.push_back(dec.results[s]);
        ok_pairs.push_back(pairs[s]);
      }
      row.sentences = ok.size();
      if (!ok.empty()) {
        row.bleu = corpus_bleu(model.target_vocab, ok, ok_pairs).score;
        row.al = latency_report(ok, ok_pairs, min_source_len).mean_al;
        row.mean_reads = mean_reads(ok);
      }
    } catch (const std::exception&) {
      row.failures = pairs.size();
    }
    rows.push_back(row);
  }
  return rows;
}

inline std::string format4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << "delta,bleu,al,mean_reads,sentences\n";
  for (const auto& r : rows)
    out << format4(r.delta) << ',' << format4(r.bleu) << ',' << format4(r.al) << ',' << format4(r.mean_reads) << ','
        << r.sentences << '\n';
}

/// Minimal line chart: AL on x, BLEU on y, one labelled point per delta.
inline void write_sweep_svg(std::ostream& out, std::span<const SweepRow> rows) {
  const double w = 480, h = 320, pad = 48;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& r : rows) {
    x0 = std::min(x0, r.al), x1 = std::max(x1, r.al);
    y0 = std::min(y0, r.bleu), y1 = std::max(y1, r.bleu);
  }
  if (rows.empty()) x0 = y0 = 0, x1 = y1 = 1;
  if (x1 - x0 < 1e-9) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-9) y0 -= 0.01, y1 += 0.01;
  auto px = [&](double x) { return pad + (x - x0) / (x1 - x0) * (w - 2 * pad); };
  auto py = [&](double y) { return h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad); };
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad << "\" y2=\"" << h - pad << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << h - pad << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << w / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">AL</text>\n";
  out << "<text x=\"14\" y=\"" << h / 2 << "\" transform=\"rotate(-90 14 " << h / 2 << ")\" text-anchor=\"middle\">BLEU</text>\n";
  out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (const auto& r : rows) out << format4(px(r.al)) << ',' << format4(py(r.bleu)) << ' ';
  out << "\"/>\n";
  for (const auto& r : rows) {
    out << "<circle cx=\"" << format4(px(r.al)) << "\" cy=\"" << format4(py(r.bleu)) << "\" r=\"3\"/>\n";
    out << "<text x=\"" << format4(px(r.al) + 5) << "\" y=\"" << format4(py(r.bleu) - 5) << "\" font-size=\"11\">"
        << format4(r.delta) << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace simulmt
