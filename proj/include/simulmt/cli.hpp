#pragma once

// Pipeline driver behind the `simulmt` executable. Stages communicate only
// through files in the run directory, so any stage can be re-run on its own.

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "simulmt/binary_io.hpp"
#include "simulmt/corpus.hpp"
#include "simulmt/error.hpp"
#include "simulmt/label_oracle.hpp"
#include "simulmt/metrics.hpp"
#include "simulmt/policy_labels.hpp"
#include "simulmt/policy_net.hpp"
#include "simulmt/rng.hpp"
#include "simulmt/seq2seq.hpp"
#include "simulmt/streaming.hpp"
#include "simulmt/train.hpp"

namespace simulmt::cli {

namespace fs = std::filesystem;

struct Key {
  std::string name;
  std::string default_value;
  std::string help;
};

/// Every accepted config key. Empty `paths.*` values resolve to a fixed file
/// name inside `run_dir`.
inline const std::vector<Key>& registry() {
  static const std::vector<Key> keys = {
      {"seed", "1", "root seed; each stage derives its own"},
      {"run_dir", "run", "directory for every artifact and config echo"},
      {"threads", "1", "worker threads for per-sentence work"},

      {"paths.train", "", "training split TSV (default run_dir/train.tsv)"},
      {"paths.dev", "", "dev split TSV (default run_dir/dev.tsv)"},
      {"paths.test", "", "test split TSV (default run_dir/test.tsv)"},
      {"paths.base", "", "seq2seq checkpoint (default run_dir/base.absm)"},
      {"paths.attention", "", "attention dump (default run_dir/attention.attn)"},
      {"paths.labels", "", "label dump (default run_dir/labels.plbl)"},
      {"paths.policy", "", "policy checkpoint (default run_dir/policy.absm)"},
      {"paths.hypotheses", "", "decoded output, one line per sentence (default run_dir/hypotheses.txt)"},

      {"data.train_pairs", "5000", "training pairs to generate"},
      {"data.dev_pairs", "500", "dev pairs to generate"},
      {"data.test_pairs", "500", "test pairs to generate"},
      {"data.vocab_size", "24", "source vocabulary size"},
      {"data.fertility_rate", "0.15", "share of source words that become two target words"},
      {"data.merge_rate", "0.1", "share of source bigram heads that merge into one target word"},
      {"data.swap_probability", "0.15", "share of source words that trigger a local swap"},
      {"data.min_len", "3", "minimum source length"},
      {"data.max_len", "12", "maximum source length"},

      {"model.d_model", "64", "hidden width"},
      {"model.n_enc_layers", "2", "encoder GRU layers"},
      {"model.n_dec_layers", "2", "decoder GRU layers"},
      {"model.encoder_mode", "causal", "causal | full"},
      {"model.max_len", "64", "longest accepted sequence"},

      {"train_base.lr", "3e-3", "peak Adam learning rate"},
      {"train_base.warmup_steps", "200", "linear warmup steps before inverse-sqrt decay"},
      {"train_base.batch_tokens", "200", "target tokens per update"},
      {"train_base.epochs", "30", "passes over the training split"},
      {"train_base.clip_norm", "5", "global gradient norm clip"},
      {"train_base.beta1", "0.9", "Adam beta1"},
      {"train_base.beta2", "0.98", "Adam beta2"},

      {"export_align.checkpoint", "", "model whose attention is exported (default paths.base)"},
      {"export_align.split", "train", "train | dev | test"},

      {"gen_labels.gamma", "0.5", "cumulative attention threshold in (0, 1]"},

      {"train_policy.lr", "3e-3", "Adam learning rate"},
      {"train_policy.epochs", "20", "passes over the labelled cells"},
      {"train_policy.d_p", "32", "projection width"},
      {"train_policy.batch_size", "32", "examples per update"},
      {"train_policy.full_grid", "false", "train on every cell instead of the staircase"},
      {"train_policy.dev_eval", "true", "report held-out accuracy on dev pseudo-labels"},

      {"decode.policy", "learned", "learned | wait-k | forced-read"},
      {"decode.delta", "0.9", "write threshold for the learned policy, in (0, 1)"},
      {"decode.k", "3", "lag for wait-k"},
      {"decode.beam", "1", "beam size (1 = greedy)"},
      {"decode.max_len_factor", "2", "output cap is factor * |x| + 10"},
      {"decode.split", "test", "train | dev | test"},
      {"decode.trace", "", "optional READ/WRITE trace file"},

      {"eval.min_source_len", "8", "sentences shorter than this are left out of AL"},
      {"eval.output", "", "metrics JSON (default run_dir/eval.json)"},

      {"sweep.deltas", "0.5,0.8,0.9", "comma-separated ascending deltas"},
      {"sweep.csv", "", "sweep table (default run_dir/sweep.csv)"},
      {"sweep.svg", "", "sweep chart (default run_dir/sweep.svg)"},

      {"gradcheck.samples", "200", "coordinates sampled per check"},
      {"gradcheck.epsilon", "1e-5", "finite-difference step"},
      {"gradcheck.tolerance", "1e-3", "maximum relative error"},
  };
  return keys;
}

inline const std::map<std::string, std::string>& default_files() {
  static const std::map<std::string, std::string> files = {
      {"paths.train", "train.tsv"},           {"paths.dev", "dev.tsv"},
      {"paths.test", "test.tsv"},             {"paths.base", "base.absm"},
      {"paths.attention", "attention.attn"},  {"paths.labels", "labels.plbl"},
      {"paths.policy", "policy.absm"},        {"paths.hypotheses", "hypotheses.txt"},
      {"eval.output", "eval.json"},           {"sweep.csv", "sweep.csv"},
      {"sweep.svg", "sweep.svg"},
  };
  return files;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : registry()) values_[k.name] = k.default_value;
  }

  void set(const std::string& key, const std::string& value, const std::string& where = "command line") {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(where + ": unknown config key '" + key + "'");
    it->second = value;
  }

  /// `key = value` lines; `#` starts a comment line.
  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      const std::string where = path + ":" + std::to_string(n);
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
      set(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)), where);
    }
  }

  void write(std::ostream& out) const {
    for (const auto& k : registry()) out << k.name << " = " << values_.at(k.name) << '\n';
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const std::string& v = str(key);
    double out = 0;
    std::size_t used = 0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (v.empty() || used != v.size() || !std::isfinite(out))
      throw ConfigError(key + ": expected a finite number, got '" + v + "'");
    return out;
  }

  std::uint64_t count(const std::string& key) const {
    const std::string& v = str(key);
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size())
      throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
  }

  bool flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      RunConfig tmp;
      tmp.values_["seed"] = trim(item);
      try {
        out.push_back(tmp.real("seed"));
      } catch (const ConfigError&) {
        throw ConfigError(key + ": bad list item '" + item + "'");
      }
    }
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
  }

  std::string run_dir() const { return str("run_dir"); }

  /// Path value, or the key's default file inside run_dir when empty.
  std::string path(const std::string& key) const {
    const std::string& v = str(key);
    if (!v.empty()) return v;
    auto it = default_files().find(key);
    if (it == default_files().end()) return {};
    return (fs::path(run_dir()) / it->second).string();
  }

  std::string split_path(const std::string& key) const {
    const std::string& s = str(key);
    if (s != "train" && s != "dev" && s != "test")
      throw ConfigError(key + ": expected train, dev or test, got '" + s + "'");
    return path("paths." + s);
  }

  std::uint64_t stage_seed(std::string_view stage) const { return derive_seed(count("seed"), stage); }

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Stage helpers

struct Context {
  RunConfig cfg;
  std::ostream& out;
  std::ostream& err;
};

inline std::size_t threads_of(const RunConfig& cfg) {
  const auto t = cfg.count("threads");
  if (t == 0) throw ConfigError("threads: must be >= 1");
  return t;
}

inline Corpus load_for_model(const std::string& path, const Seq2SeqModel<float>& model, std::ostream& err) {
  const TextCorpus text = read_tsv_text(path);
  if (text.skipped) err << path << ": skipped " << text.skipped << " lines with an empty side\n";
  return map_with_vocab(text, model.source_vocab, model.target_vocab);
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

inline ModelConfig model_config(const RunConfig& cfg) {
  ModelConfig m;
  m.d_model = cfg.count("model.d_model");
  m.n_enc_layers = cfg.count("model.n_enc_layers");
  m.n_dec_layers = cfg.count("model.n_dec_layers");
  m.encoder_mode = parse_encoder_mode(cfg.str("model.encoder_mode"));
  m.max_len = cfg.count("model.max_len");
  return m;
}

inline std::vector<PolicyLabelMatrix> labels_from_model(const Seq2SeqModel<float>& model, const Corpus& corpus,
                                                        float gamma, std::size_t threads) {
  std::vector<PolicyLabelMatrix> out(corpus.size());
  parallel_for(corpus.size(), threads,
               [&](std::size_t k) { out[k] = gen_policy_labels(extract_attention(model, corpus.pairs[k]), gamma); });
  return out;
}

inline std::unique_ptr<ReadWritePolicy> make_policy(const RunConfig& cfg, const Seq2SeqModel<float>& model) {
  const std::string& kind = cfg.str("decode.policy");
  if (kind == "wait-k") return std::make_unique<WaitKPolicy>(cfg.count("decode.k"));
  if (kind == "forced-read") return std::make_unique<ForcedReadPolicy>();
  if (kind != "learned")
    throw ConfigError("decode.policy: expected learned, wait-k or forced-read, got '" + kind + "'");
  const std::string path = cfg.path("paths.policy");
  PolicyParams<float> p = load_policy(path);
  if (p.d_model() != model.config.d_model)
    throw DataError(path + ": policy width " + std::to_string(p.d_model()) + " does not match model width " +
                    std::to_string(model.config.d_model));
  return std::make_unique<LearnedPolicy>(std::move(p), static_cast<float>(cfg.real("decode.delta")));
}

// ---------------------------------------------------------------------------
// Stages

inline void stage_gen_data(Context& c) {
  const auto& cfg = c.cfg;
  const std::uint64_t n_train = cfg.count("data.train_pairs"), n_dev = cfg.count("data.dev_pairs"),
                      n_test = cfg.count("data.test_pairs");
  const std::uint64_t total = n_train + n_dev + n_test;
  if (total == 0) throw ConfigError("data.train_pairs + data.dev_pairs + data.test_pairs must be positive");
  GeneratorParams gp;
  gp.size = static_cast<std::int64_t>(total);
  gp.vocab_size = static_cast<std::int64_t>(cfg.count("data.vocab_size"));
  gp.fertility_rate = cfg.real("data.fertility_rate");
  gp.merge_rate = cfg.real("data.merge_rate");
  gp.swap_probability = cfg.real("data.swap_probability");
  gp.min_len = static_cast<std::int64_t>(cfg.count("data.min_len"));
  gp.max_len = static_cast<std::int64_t>(cfg.count("data.max_len"));
  gp.validate();

  const Corpus corpus = generate_synthetic(gp, cfg.stage_seed("gen_data"));
  const double n = static_cast<double>(total);
  const CorpusSplit parts =
      split(corpus, {static_cast<double>(n_train) / n, static_cast<double>(n_dev) / n, static_cast<double>(n_test) / n},
            cfg.stage_seed("split"));
  for (const auto& [key, part] : {std::pair{"paths.train", &parts.train}, std::pair{"paths.dev", &parts.dev},
                                  std::pair{"paths.test", &parts.test}}) {
    const std::string path = cfg.path(key);
    write_tsv(*part, path);
    write_alignment(*part, fs::path(path).replace_extension(".align").string());
  }
  c.out << "gen-data: " << parts.train.size() << " train, " << parts.dev.size() << " dev, " << parts.test.size()
        << " test pairs\n";
}

inline void stage_train_base(Context& c) {
  const auto& cfg = c.cfg;
  const std::string train_path = cfg.path("paths.train");
  const LoadedCorpus loaded = load_tsv(train_path);
  if (loaded.skipped) c.err << train_path << ": skipped " << loaded.skipped << " lines with an empty side\n";
  if (loaded.corpus.empty()) throw DataError(train_path + ": no training pairs");

  auto model = make_model<float>(model_config(cfg), loaded.corpus.source_vocab, loaded.corpus.target_vocab,
                                 cfg.stage_seed("train_base.init"));
  TrainHyper h;
  h.lr = cfg.real("train_base.lr");
  h.warmup_steps = cfg.count("train_base.warmup_steps");
  h.batch_tokens = cfg.count("train_base.batch_tokens");
  h.epochs = cfg.count("train_base.epochs");
  h.clip_norm = cfg.real("train_base.clip_norm");
  h.beta1 = cfg.real("train_base.beta1");
  h.beta2 = cfg.real("train_base.beta2");
  h.seed = cfg.stage_seed("train_base");
  const TrainReport report = train(model, loaded.corpus, h, [&](std::size_t epoch, double loss) {
    c.out << "epoch " << epoch << " loss " << format4(loss) << '\n' << std::flush;
  });
  if (!model.all_finite()) throw ModelStateError("trained model contains NaN or Inf");

  nlohmann::json j{{"epoch_loss", report.epoch_loss}, {"steps", report.steps}, {"pairs", loaded.corpus.size()}};
  const std::string dev_path = cfg.path("paths.dev");
  if (fs::exists(dev_path)) {
    const Corpus dev = load_for_model(dev_path, model, c.err);
    if (!dev.empty()) {
      j["dev_loss"] = evaluate_loss(model, dev);
      c.out << "dev loss " << format4(j["dev_loss"].get<double>()) << '\n';
    }
  }
  save_checkpoint(model, cfg.path("paths.base"));
  write_json((fs::path(cfg.run_dir()) / "train_base.json").string(), j);
}

inline void stage_export_align(Context& c) {
  const auto& cfg = c.cfg;
  const std::string ckpt = cfg.str("export_align.checkpoint").empty() ? cfg.path("paths.base")
                                                                      : cfg.str("export_align.checkpoint");
  const auto model = load_checkpoint(ckpt);
  const Corpus corpus = load_for_model(cfg.split_path("export_align.split"), model, c.err);
  std::vector<AttentionMatrix> mats(corpus.size());
  parallel_for(corpus.size(), threads_of(cfg),
               [&](std::size_t k) { mats[k] = extract_attention(model, corpus.pairs[k]); });
  write_attention_dump(cfg.path("paths.attention"), mats);
  c.out << "export-align: " << mats.size() << " matrices from " << to_string(model.config.encoder_mode)
        << " model " << ckpt << '\n';
}

inline void stage_gen_labels(Context& c) {
  const auto& cfg = c.cfg;
  const auto gamma = static_cast<float>(cfg.real("gen_labels.gamma"));
  check_gamma(gamma);
  const auto mats = read_attention_dump(cfg.path("paths.attention"));
  std::vector<PolicyLabelMatrix> labels;
  labels.reserve(mats.size());
  for (const auto& a : mats) labels.push_back(gen_policy_labels(a, gamma));
  write_label_dump(cfg.path("paths.labels"), labels);
  const auto d = label_density(labels);
  c.out << "gen-labels: " << labels.size() << " matrices, density " << format4(d.density()) << ", mean lag "
        << format4(d.mean_lag) << '\n';
}

inline void stage_train_policy(Context& c) {
  const auto& cfg = c.cfg;
  const std::size_t threads = threads_of(cfg);
  const auto gamma = static_cast<float>(cfg.real("gen_labels.gamma"));
  const auto base = load_checkpoint(cfg.path("paths.base"));
  const Corpus train_set = load_for_model(cfg.path("paths.train"), base, c.err);
  const auto labels = read_label_dump(cfg.path("paths.labels"), gamma);
  const auto set = build_training_set(base, train_set, labels, cfg.flag("train_policy.full_grid"), threads);

  PolicyHyper h;
  h.lr = cfg.real("train_policy.lr");
  h.epochs = cfg.count("train_policy.epochs");
  h.d_p = cfg.count("train_policy.d_p");
  h.batch_size = cfg.count("train_policy.batch_size");
  h.seed = cfg.stage_seed("train_policy");

  const std::uint64_t before = base.checksum();
  auto [params, report] = train_policy(set, h);
  if (base.checksum() != before) throw ModelStateError("base model changed during policy training");
  if (!report.init_gradcheck.passed())
    throw GradCheckError("policy gradient check failed: max relative error " +
                         std::to_string(report.init_gradcheck.max_rel_error));
  if (!params.all_finite()) throw ModelStateError("trained policy contains NaN or Inf");

  nlohmann::json j{{"examples", set.examples.size()},
                   {"positives", set.positives},
                   {"negatives", set.negatives},
                   {"epoch_loss", report.epoch_loss},
                   {"train_accuracy", report.train_metrics.accuracy},
                   {"gradcheck_max_rel_error", report.init_gradcheck.max_rel_error},
                   {"base_checksum", before}};
  c.out << "train-policy: " << set.examples.size() << " examples, train accuracy "
        << format4(report.train_metrics.accuracy) << '\n';

  const std::string dev_path = cfg.path("paths.dev");
  if (cfg.flag("train_policy.dev_eval") && fs::exists(dev_path)) {
    const std::string label_ckpt = cfg.str("export_align.checkpoint");
    const Corpus dev = load_for_model(dev_path, base, c.err);
    if (!dev.empty()) {
      const auto dev_labels = label_ckpt.empty() ? labels_from_model(base, dev, gamma, threads)
                                                 : labels_from_model(load_checkpoint(label_ckpt), dev, gamma, threads);
      const auto m = evaluate_policy(params, build_training_set(base, dev, dev_labels, false, threads));
      j["dev_accuracy"] = m.accuracy;
      j["dev_precision"] = m.precision;
      j["dev_recall"] = m.recall;
      c.out << "dev accuracy " << format4(m.accuracy) << '\n';
    }
  }
  save_policy(params, cfg.path("paths.policy"));
  write_json((fs::path(cfg.run_dir()) / "train_policy.json").string(), j);
}

struct DecodeRun {
  Seq2SeqModel<float> model;
  Corpus corpus;
  CorpusDecode decoded;
};

inline DecodeRun run_decode(Context& c) {
  const auto& cfg = c.cfg;
  DecodeRun r;
  r.model = load_checkpoint(cfg.path("paths.base"));
  r.corpus = load_for_model(cfg.split_path("decode.split"), r.model, c.err);
  if (r.corpus.empty()) throw DataError(cfg.split_path("decode.split") + ": no sentences to decode");
  const auto policy = make_policy(cfg, r.model);
  const auto beam = cfg.count("decode.beam");
  if (beam == 0) throw ConfigError("decode.beam: must be >= 1");
  r.decoded = decode_corpus(r.model, *policy, r.corpus.pairs, beam, threads_of(cfg), cfg.count("decode.max_len_factor"));
  for (const auto& f : r.decoded.failures) c.err << "sentence " << f.sentence << ": " << f.message << '\n';

  std::ofstream hyp(cfg.path("paths.hypotheses"));
  if (!hyp) throw DataError("cannot write '" + cfg.path("paths.hypotheses") + "'");
  for (const auto& res : r.decoded.results) hyp << join_tokens(res.tokens, r.model.target_vocab) << '\n';
  if (const std::string& t = cfg.str("decode.trace"); !t.empty()) {
    std::ofstream trace(t);
    if (!trace) throw DataError("cannot write '" + t + "'");
    for (std::size_t s = 0; s < r.decoded.results.size(); ++s) write_trace(trace, s, r.decoded.results[s].trace);
  }
  if (!r.decoded.failures.empty())
    throw DataError(std::to_string(r.decoded.failures.size()) + " sentences failed to decode; first: sentence " +
                    std::to_string(r.decoded.failures.front().sentence) + ": " + r.decoded.failures.front().message);
  return r;
}

inline void stage_decode(Context& c) {
  const auto r = run_decode(c);
  c.out << "decode: " << r.decoded.results.size() << " sentences -> " << c.cfg.path("paths.hypotheses") << '\n';
}

inline void stage_eval(Context& c) {
  const auto& cfg = c.cfg;
  const auto r = run_decode(c);
  const auto& results = r.decoded.results;
  const auto bleu_report = corpus_bleu(r.model.target_vocab, results, r.corpus.pairs);
  const auto lat = latency_report(results, r.corpus.pairs, cfg.count("eval.min_source_len"));
  double calls = 0;
  for (const auto& res : results) calls += static_cast<double>(res.decoder_calls);
  nlohmann::json j{{"policy", cfg.str("decode.policy")},
                   {"beam", cfg.count("decode.beam")},
                   {"bleu", bleu_report.score},
                   {"brevity_penalty", bleu_report.brevity_penalty},
                   {"al", lat.mean_al},
                   {"al_sentences", lat.included()},
                   {"al_excluded", lat.excluded},
                   {"mean_reads", mean_reads(results)},
                   {"mean_decoder_calls", calls / static_cast<double>(results.size())},
                   {"sentences", results.size()},
                   {"synchrony_violations", r.decoded.synchrony_violations}};
  if (cfg.str("decode.policy") == "learned") j["delta"] = cfg.real("decode.delta");
  if (cfg.str("decode.policy") == "wait-k") j["k"] = cfg.count("decode.k");
  write_json(cfg.path("eval.output"), j);
  c.out << "bleu " << format4(bleu_report.score) << " al " << format4(lat.mean_al) << " mean_reads "
        << format4(mean_reads(results)) << " sentences " << results.size() << '\n';
}

inline void stage_sweep(Context& c) {
  const auto& cfg = c.cfg;
  const auto deltas = cfg.reals("sweep.deltas");
  check_deltas(deltas);
  const auto model = load_checkpoint(cfg.path("paths.base"));
  const Corpus corpus = load_for_model(cfg.split_path("decode.split"), model, c.err);
  const auto policy = load_policy(cfg.path("paths.policy"));
  const auto beam = cfg.count("decode.beam");
  if (beam == 0) throw ConfigError("decode.beam: must be >= 1");
  const auto rows =
      sweep_delta(model, policy, corpus.pairs, deltas, beam, threads_of(cfg), cfg.count("eval.min_source_len"));
  for (const auto& row : rows)
    if (row.failures) c.err << "delta " << format4(row.delta) << ": " << row.failures << " sentences failed\n";
  {
    std::ofstream csv(cfg.path("sweep.csv"), std::ios::binary);
    if (!csv) throw DataError("cannot write '" + cfg.path("sweep.csv") + "'");
    write_sweep_csv(csv, rows);
    std::ofstream svg(cfg.path("sweep.svg"), std::ios::binary);
    if (!svg) throw DataError("cannot write '" + cfg.path("sweep.svg") + "'");
    write_sweep_svg(svg, rows);
  }
  write_sweep_csv(c.out, rows);
}

inline void stage_gradcheck(Context& c) {
  const auto& cfg = c.cfg;
  GeneratorParams gp;
  gp.size = 40;
  gp.vocab_size = 10;
  gp.min_len = 2;
  gp.max_len = 4;
  const Corpus corpus = generate_synthetic(gp, cfg.stage_seed("gradcheck.data"));
  const ParallelPair* pair = nullptr;
  for (const auto& p : corpus.pairs)
    if (p.source.size() >= 3 && p.target.size() <= 6) {
      pair = &p;
      break;
    }
  if (!pair) throw DataError("gradcheck: no small pair generated");
  const double eps = cfg.real("gradcheck.epsilon"), tol = cfg.real("gradcheck.tolerance");
  const auto samples = cfg.count("gradcheck.samples");
  bool ok = true;
  auto report = [&](const std::string& what, const GradCheckReport& r) {
    c.out << what << ": " << r.checked << " coordinates, max relative error " << r.max_rel_error
          << (r.passed() ? " ok" : " FAIL") << '\n';
    ok = ok && r.passed();
  };
  ModelConfig mc = model_config(cfg);
  Seq2SeqModel<float> causal;
  for (auto mode : {EncoderMode::causal, EncoderMode::full}) {
    mc.encoder_mode = mode;
    auto m = make_model<float>(mc, corpus.source_vocab, corpus.target_vocab, cfg.stage_seed("gradcheck.model"));
    report("seq2seq (" + to_string(mode) + ")", gradient_check(m, *pair, eps, tol, samples, cfg.stage_seed("gradcheck")));
    if (mode == EncoderMode::causal) causal = std::move(m);
  }
  const auto labels = labels_from_model(causal, corpus, 0.5f, 1);
  const auto set = build_training_set(causal, corpus, labels);
  const auto p = init_policy<float>(causal.config.d_model, cfg.count("train_policy.d_p"), cfg.stage_seed("gradcheck.policy"));
  report("policy", policy_gradient_check(p, set, eps, tol, samples, cfg.stage_seed("gradcheck")));
  if (!ok) throw GradCheckError("analytic gradients disagree with finite differences");
}

inline void stage_selftest(Context& c) {
  std::size_t failures = 0;
  auto check = [&](const std::string& what, bool ok) {
    c.out << (ok ? "ok   " : "FAIL ") << what << '\n';
    failures += !ok;
  };

  Rng rng(derive_seed(1, "selftest"));
  bool oracle = true;
  for (int n = 0; n < 2000 && oracle; ++n) {
    const auto a = random_stochastic(rng, 1 + rng.below(8), 1 + rng.below(8), n % 3 == 0);
    for (float g : {0.3f, 0.5f, 0.6f, 0.9f, 1.0f}) oracle = oracle && gen_policy_labels(a, g) == brute_force_labels(a, g);
  }
  check("label generator matches brute-force oracle on 2000 random matrices", oracle);

  std::vector<std::size_t> all(10, 10), wait3, simul;
  for (std::size_t i = 1; i <= 10; ++i) {
    wait3.push_back(std::min<std::size_t>(i + 2, 10));
    simul.push_back(i);
  }
  check("AL of non-streaming decode is |x|", std::abs(*average_lag(all, 10, 10) - 10.0) < 1e-6);
  check("AL of wait-3 on 1:1 lengths is 3", std::abs(*average_lag(wait3, 10, 10) - 3.0) < 1e-6);
  check("AL of fully simultaneous decode is 1", std::abs(*average_lag(simul, 10, 10) - 1.0) < 1e-6);

  GeneratorParams gp;
  gp.size = 30;
  gp.vocab_size = 12;
  const Corpus corpus = generate_synthetic(gp, 3);
  ModelConfig mc;
  mc.d_model = 16;
  const auto model = make_model<float>(mc, corpus.source_vocab, corpus.target_vocab, 4);
  const auto params = init_policy<float>(16, 8, 5, 0.0f);
  std::vector<std::unique_ptr<ReadWritePolicy>> policies;
  policies.push_back(std::make_unique<WaitKPolicy>(2));
  policies.push_back(std::make_unique<LearnedPolicy>(params, 0.5f));
  bool same = true;
  for (const auto& policy : policies)
    for (const auto& p : corpus.pairs)
      same = same && greedy_stream(model, *policy, p.source) == beam_stream(model, *policy, p.source, 1).best;
  check("beam size 1 equals greedy on 30 sentences", same);

  if (failures) throw ModelStateError(std::to_string(failures) + " self-test checks failed");
}

// ---------------------------------------------------------------------------
// Dispatch

inline int exit_code(const Error& e) {
  const std::string& k = e.kind();
  if (k == "config") return 1;
  if (k == "training" || k == "gradcheck" || k == "model-state") return 3;
  return 2;
}

struct Stage {
  std::string name;
  std::string description;
  std::vector<std::string> namespaces;  // key prefixes exposed as flags
  void (*run)(Context&);
};

inline const std::vector<Stage>& stages() {
  static const std::vector<Stage> s = {
      {"gen-data", "generate the synthetic corpus and its train/dev/test split",
       {"data.", "paths.train", "paths.dev", "paths.test"}, stage_gen_data},
      {"train-base", "train the non-streaming seq2seq model",
       {"model.", "train_base.", "paths.train", "paths.dev", "paths.base"}, stage_train_base},
      {"export-align", "dump teacher-forced attention matrices",
       {"export_align.", "paths.train", "paths.dev", "paths.test", "paths.base", "paths.attention"}, stage_export_align},
      {"gen-labels", "turn attention matrices into READ/WRITE pseudo-labels",
       {"gen_labels.", "paths.attention", "paths.labels"}, stage_gen_labels},
      {"train-policy", "train the READ/WRITE classifier on the frozen base model",
       {"train_policy.", "gen_labels.gamma", "export_align.checkpoint", "paths.train", "paths.dev", "paths.base",
        "paths.labels", "paths.policy"},
       stage_train_policy},
      {"decode", "streaming decode of a split",
       {"decode.", "paths.train", "paths.dev", "paths.test", "paths.base", "paths.policy", "paths.hypotheses"},
       stage_decode},
      {"eval", "decode a split and report BLEU, AL and mean reads",
       {"decode.", "eval.", "paths.train", "paths.dev", "paths.test", "paths.base", "paths.policy", "paths.hypotheses"},
       stage_eval},
      {"sweep", "decode once per delta and write the CSV table and SVG chart",
       {"sweep.", "decode.beam", "decode.split", "eval.min_source_len", "paths.train", "paths.dev", "paths.test",
        "paths.base", "paths.policy"},
       stage_sweep},
      {"gradcheck", "finite-difference gradient checks of the seq2seq model and the classifier",
       {"gradcheck.", "model.", "train_policy.d_p"}, stage_gradcheck},
      {"selftest", "run the built-in invariant checks", {}, stage_selftest},
  };
  return s;
}

inline bool key_in(const std::string& key, const std::vector<std::string>& spaces) {
  for (const auto& s : spaces)
    if (s.back() == '.' ? key.rfind(s, 0) == 0 : key == s) return true;
  return false;
}

/// `ns.some_name` -> `--some-name`; `paths.x` -> `--x-path`.
inline std::string flag_name(const std::string& key) {
  std::string leaf = key.substr(key.find('.') == std::string::npos ? 0 : key.find('.') + 1);
  std::replace(leaf.begin(), leaf.end(), '_', '-');
  if (key.rfind("paths.", 0) == 0) leaf += "-path";
  return "--" + leaf;
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Streaming translation toolkit: learned READ/WRITE policy on a frozen seq2seq model", "simulmt"};
  app.require_subcommand(1);

  struct Pending {
    std::string config_file;
    std::vector<std::string> sets;
    std::vector<std::pair<std::string, std::string>> flags;
  } pending;

  std::vector<std::pair<CLI::App*, const Stage*>> subs;
  for (const auto& stage : stages()) {
    CLI::App* sub = app.add_subcommand(stage.name, stage.description);
    sub->add_option("--config", pending.config_file, "key = value config file (CLI flags override it)")
        ->type_name("FILE");
    sub->add_option("--set", pending.sets, "override any config key, as key=value (repeatable)")
        ->type_name("KEY=VALUE");
    for (const auto& k : registry()) {
      const bool global = k.name.find('.') == std::string::npos;
      if (!global && !key_in(k.name, stage.namespaces)) continue;
      const std::string name = k.name;
      std::string shown = k.default_value.empty() ? "" : ", default " + k.default_value;
      sub->add_option_function<std::string>(
          flag_name(name), [&pending, name](const std::string& v) { pending.flags.emplace_back(name, v); },
          k.help + " [config: " + name + shown + "]")
          ->type_name("VALUE");
    }
    subs.emplace_back(sub, &stage);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "simulmt: " << e.what() << '\n';
    return 1;
  }

  const Stage* chosen = nullptr;
  for (auto& [sub, stage] : subs)
    if (sub->parsed()) chosen = stage;
  if (!chosen) {
    err << "simulmt: no subcommand given\n";
    return 1;
  }

  try {
    Context ctx{RunConfig{}, out, err};
    if (!pending.config_file.empty()) ctx.cfg.load_file(pending.config_file);
    for (const auto& kv : pending.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      ctx.cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)), "--set");
    }
    for (const auto& [k, v] : pending.flags) ctx.cfg.set(k, v);

    fs::create_directories(ctx.cfg.run_dir());
    {
      const std::string echo = (fs::path(ctx.cfg.run_dir()) / (chosen->name + ".conf")).string();
      std::ofstream conf(echo);
      if (!conf) throw DataError("cannot write '" + echo + "'");
      conf << "# resolved configuration for `simulmt " << chosen->name << "`\n";
      ctx.cfg.write(conf);
    }
    chosen->run(ctx);
    return 0;
  } catch (const Error& e) {
    err << "simulmt " << chosen->name << ": " << e.kind() << " error: " << e.what() << '\n';
    return exit_code(e);
  } catch (const fs::filesystem_error& e) {
    err << "simulmt " << chosen->name << ": data error: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    err << "simulmt " << chosen->name << ": format error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace simulmt::cli
