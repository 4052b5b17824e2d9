// plnd: command-line entry point for corpus generation, training, neuron
// importance, language-specific neuron detection and deactivation experiments.
//
// Every subcommand validates its inputs before computing, writes outputs
// atomically, and embeds (JSON) or references (CSV sidecar) a run manifest.
// On failure it prints one JSON error record to stderr and exits non-zero:
// 2 for usage errors, 1 for everything else.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "plnd/plnd.hpp"

namespace fs = std::filesystem;
using namespace plnd;

namespace {

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error("usage", what) {}
};

// Re-raises a validation failure as a usage error naming the flags involved.
template <class F>
void validate_flags(const std::string& flags, F&& check) {
  try {
    check();
  } catch (const ConfigError& e) {
    throw UsageError(flags + ": " + e.what());
  }
}

void write_json(const fs::path& path, const ojson& j) { write_file_atomic(path, j.dump(2) + "\n"); }

void write_csv_with_manifest(const fs::path& path, const std::string& csv, const ojson& manifest) {
  fs::path side = path;
  side += ".manifest.json";
  write_json(side, manifest);
  write_file_atomic(path, csv);
}

void require_file(const std::string& flag, const std::string& path) {
  if (!fs::is_regular_file(path)) throw UsageError(flag + ": file '" + path + "' does not exist");
}

std::vector<Tokens> all_docs(const CorpusBundle& b) {
  std::vector<Tokens> out;
  for (const auto& l : b.languages) out.insert(out.end(), l.docs.begin(), l.docs.end());
  return out;
}

const CorpusBundle& pick_split(const CorpusOnDisk& c, const std::string& split) {
  if (split == "train") return c.train;
  if (split == "validation") return c.validation;
  throw UsageError("--split: expected 'train' or 'validation', got '" + split + "'");
}

// Pivot default: the language with the most training documents (first on ties).
std::string default_pivot(const CorpusOnDisk& c) {
  std::string best;
  std::size_t most = 0;
  for (const auto& l : c.train.languages)
    if (best.empty() || l.docs.size() > most) {
      best = l.label;
      most = l.docs.size();
    }
  return best;
}

NeuronSet load_sets_union(const std::vector<std::string>& paths) {
  if (paths.empty()) throw UsageError("--set: at least one neuron-set file is required");
  NeuronSet s = load_neuron_set(paths[0]);
  for (std::size_t i = 1; i < paths.size(); ++i) s = s | load_neuron_set(paths[i]);
  return s;
}

void check_set_model(const NeuronSet& s, const TransformerWeights& w) {
  if (!s.model_hash.empty() && s.model_hash != model_hash(w))
    throw InputError("neuron set '" + s.label + "' was detected on a different model");
  for (const auto& n : s.members) check_neuron(w.config, n);
}

NeuronSet filter_by_kinds(const NeuronSet& s, const std::string& kinds) {
  if (kinds == "all") return s;
  if (kinds == "attn") return filter_kinds(s, [](NeuronKind k) { return is_attention_kind(k); }, "attn");
  if (kinds == "ffn") return filter_kinds(s, [](NeuronKind k) { return !is_attention_kind(k); }, "ffn");
  throw UsageError("--kinds: expected all, attn or ffn, got '" + kinds + "'");
}

std::vector<std::size_t> parse_counts(const std::string& flag, const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument("");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError(flag + ": '" + item + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

std::vector<std::string> parse_labels(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

// ---------------------------------------------------------------------------

struct MakeCorpusArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t vocab = 256;
  std::string languages = "A,B";
  std::string docs = "1200,300";
  std::size_t doc_len = 32;
  double train_fraction = 0.8;
  double shared_fraction = 0.05;
};

void cmd_make_corpus(const MakeCorpusArgs& a) {
  const auto labels = parse_labels(a.languages);
  const auto counts = parse_counts("--docs", a.docs);
  if (counts.size() != labels.size()) throw UsageError("--docs: need one count per language");
  if (!(a.train_fraction > 0.0 && a.train_fraction < 1.0))
    throw UsageError("--train-fraction: must lie in (0, 1)");
  const LanguageInventory inv = default_inventory(a.vocab, labels, a.shared_fraction, a.seed);
  const CorpusBundle bundle = sample_corpus(inv, counts, a.doc_len, a.seed);
  const SplitBundles parts = split(bundle, a.train_fraction, derive_seed(a.seed, "split"));

  const ojson config = {{"vocab", a.vocab},         {"languages", labels},
                        {"docs", counts},           {"doc_len", a.doc_len},
                        {"train_fraction", a.train_fraction}, {"shared_fraction", a.shared_fraction}};
  fs::create_directories(a.out);
  ojson manifest;
  manifest["format"] = "plnd-corpus";
  manifest["seed"] = a.seed;
  manifest["doc_len"] = a.doc_len;
  manifest["train_fraction"] = a.train_fraction;
  manifest["inventory"] = inventory_to_json(inv);
  ojson files = {{"train", ojson::object()}, {"validation", ojson::object()}};
  for (const auto* b : {&parts.train, &parts.validation}) {
    for (const auto& l : b->languages) {
      const std::string name = l.label + "." + b->split + ".txt";
      write_file_atomic(fs::path(a.out) / name, corpus_text(l.docs));
      files[b->split][l.label] = name;
    }
  }
  manifest["files"] = files;
  manifest["manifest"] = run_manifest("make-corpus", config, {}, a.seed);
  write_json(fs::path(a.out) / "bundle.json", manifest);
}

// ---------------------------------------------------------------------------

struct ModelArgs {
  std::size_t layers = 4;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_head = 16;
  std::size_t d_inter = 256;
  std::size_t max_seq_len = 0;  // 0: longest document in the corpus
  double init_scale = 0.02;
  double embed_std = 1.0;
};

void add_model_options(CLI::App* app, ModelArgs& m) {
  app->add_option("--layers", m.layers, "number of transformer blocks");
  app->add_option("--d-model", m.d_model, "residual width");
  app->add_option("--heads", m.heads, "attention heads");
  app->add_option("--d-head", m.d_head, "per-head width");
  app->add_option("--d-inter", m.d_inter, "FFN intermediate width");
  app->add_option("--max-seq-len", m.max_seq_len, "positional table size (default: longest document)");
  app->add_option("--init-scale", m.init_scale, "projection std is init-scale / sqrt(d_model)");
  app->add_option("--embed-std", m.embed_std, "embedding std");
}

ojson model_args_json(const ModelConfig& c, const ModelArgs& m) {
  ojson j = config_to_json(c);
  j["init_scale"] = m.init_scale;
  j["embed_std"] = m.embed_std;
  return j;
}

struct TrainArgs {
  std::string corpus, out, log;
  ModelArgs model;
  std::size_t steps = 1200;
  double lr = 1.0;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

void cmd_train(const TrainArgs& a) {
  require_file("--corpus", a.corpus);
  const CorpusOnDisk corpus = load_bundle(a.corpus);
  const auto docs = all_docs(corpus.train);
  if (docs.empty()) throw InputError("training split is empty");
  std::size_t longest = 0;
  for (const auto& d : docs) longest = std::max(longest, d.size());
  for (const auto& l : corpus.validation.languages)
    for (const auto& d : l.docs) longest = std::max(longest, d.size());
  ModelConfig c{a.model.layers, a.model.d_model, a.model.heads, a.model.d_head, a.model.d_inter,
                corpus.inventory.vocab_size, a.model.max_seq_len ? a.model.max_seq_len : longest};
  validate_flags("--layers/--d-model/--heads/--d-head/--d-inter/--max-seq-len", [&] { c.validate(); });
  TrainConfig tc;
  tc.learning_rate = a.lr;
  tc.steps = a.steps;
  tc.batch_size = a.batch;
  tc.seed = a.seed;
  tc.threads = a.threads;
  validate_flags("--lr/--steps/--batch", [&] { tc.validate(); });

  ojson config = model_args_json(c, a.model);
  config["steps"] = a.steps;
  config["lr"] = a.lr;
  config["batch"] = a.batch;
  const ojson manifest = run_manifest("train", config, {a.corpus}, a.seed);

  const TransformerWeights init = init_random(c, derive_seed(a.seed, "model"), {a.model.init_scale, a.model.embed_std});
  const TrainResult r = train(init, docs, tc);
  if (!a.log.empty()) write_csv_with_manifest(a.log, train_log_csv(r.losses), manifest);
  save_weights(a.out, r.weights, manifest.dump());
}

// ---------------------------------------------------------------------------

struct InitArgs {
  std::string out;
  ModelArgs model;
  std::size_t vocab = 32;
  std::uint64_t seed = 0;
};

void cmd_init(const InitArgs& a) {
  ModelConfig c{a.model.layers, a.model.d_model, a.model.heads, a.model.d_head, a.model.d_inter,
                a.vocab, a.model.max_seq_len ? a.model.max_seq_len : 32};
  validate_flags("--layers/--d-model/--heads/--d-head/--d-inter/--vocab", [&] { c.validate(); });
  ojson config = model_args_json(c, a.model);
  const ojson manifest = run_manifest("init", config, {}, a.seed);
  save_weights(a.out, init_random(c, a.seed, {a.model.init_scale, a.model.embed_std}), manifest.dump());
}

// ---------------------------------------------------------------------------

struct ImportanceArgs {
  std::string model, docs, out;
  std::optional<std::size_t> line;
  std::size_t threads = 1;
};

void cmd_importance(const ImportanceArgs& a) {
  require_file("--model", a.model);
  require_file("--docs", a.docs);
  const TransformerWeights w = load_weights(a.model);
  const auto docs = load_corpus_file(a.docs);
  if (docs.empty()) throw InputError("document file '" + a.docs + "' is empty");
  ojson config = {{"line", a.line ? ojson(*a.line) : ojson("average")}};
  const ojson manifest = run_manifest("importance", config, {a.model, a.docs}, 0);
  if (a.line) {
    if (*a.line >= docs.size()) throw UsageError("--line: only " + std::to_string(docs.size()) + " documents");
    const auto& d = docs[*a.line];
    write_file_atomic(a.out, serialize_importance(imp_all(w, d), model_hash(w), tokens_hash(d), manifest));
  } else {
    const auto maps = importance_maps(w, docs, a.threads);
    write_file_atomic(a.out, serialize_importance(mean_importance(maps), model_hash(w), corpus_hash(docs), manifest));
  }
}

// ---------------------------------------------------------------------------

struct DetectArgs {
  std::string model, corpus, lang, out, split = "train";
  double q = 0.95;
  double p = 1.0;
  std::optional<double> epsilon;
  std::size_t threads = 1;
};

void cmd_detect(const DetectArgs& a) {
  require_file("--model", a.model);
  require_file("--corpus", a.corpus);
  ThresholdPolicy policy{a.q, a.p, a.epsilon};
  validate_flags("--q/--p/--epsilon", [&] { policy.validate(); });
  const TransformerWeights w = load_weights(a.model);
  const CorpusOnDisk corpus = load_bundle(a.corpus);
  const auto& docs = pick_split(corpus, a.split).at(a.lang).docs;
  ojson config = {{"lang", a.lang}, {"split", a.split}, {"policy", policy.to_json()}};
  const ojson manifest = run_manifest("detect", config, {a.model, a.corpus}, 0);
  NeuronSet set = detect(w, docs, policy, a.lang, a.threads);
  ojson j = neuron_set_to_json(set);
  j["fraction_of_neurons"] = static_cast<double>(set.size()) /
                             static_cast<double>(w.config.n_layers * (4 * w.config.d_mid() + 3 * w.config.d_inter));
  j["manifest"] = manifest;
  write_json(a.out, j);
}

// ---------------------------------------------------------------------------

struct OverlapArgs {
  std::vector<std::string> sets;
  std::string out, kinds = "all";
};

void cmd_overlap(const OverlapArgs& a) {
  std::vector<fs::path> inputs;
  std::vector<NeuronSet> sets;
  for (const auto& s : a.sets) {
    require_file("--sets", s);
    inputs.emplace_back(s);
  }
  for (const auto& s : a.sets) sets.push_back(filter_by_kinds(load_neuron_set(s), a.kinds));
  for (auto& s : sets)
    if (s.label.size() > 2 && s.label.back() == ']') s.label = s.label.substr(0, s.label.rfind('['));
  const ojson manifest = run_manifest("overlap", {{"kinds", a.kinds}}, inputs, 0);
  write_csv_with_manifest(a.out, overlap_csv(sets), manifest);
}

// ---------------------------------------------------------------------------

struct DeactivateArgs {
  std::string model, corpus, out, csv, pivot, split = "validation", source = "lang-spec";
  std::vector<std::string> sets;
  bool under = false, s_attn = false, s_ffn = false, gen = false;
  std::size_t n_under = 1, n_gen = 1;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

DeactivationConfig deactivation_config(const DeactivateArgs& a) {
  if (!(a.under || a.s_attn || a.s_ffn || a.gen))
    throw UsageError("--under/--s-attn/--s-ffn/--gen: at least one region flag must be set");
  DeactivationConfig cfg;
  cfg.under = a.under;
  cfg.s_attn = a.s_attn;
  cfg.s_ffn = a.s_ffn;
  cfg.gen = a.gen;
  cfg.seed = a.seed;
  if (a.source == "lang-spec") cfg.source = NeuronSource::LanguageSpecific;
  else if (a.source == "random") cfg.source = NeuronSource::RandomMatched;
  else throw UsageError("--source: expected lang-spec or random, got '" + a.source + "'");
  return cfg;
}

void cmd_deactivate_eval(const DeactivateArgs& a) {
  DeactivationConfig cfg = deactivation_config(a);
  require_file("--model", a.model);
  require_file("--corpus", a.corpus);
  for (const auto& s : a.sets) require_file("--set", s);
  const TransformerWeights w = load_weights(a.model);
  const CorpusOnDisk corpus = load_bundle(a.corpus);
  const NeuronSet set = load_sets_union(a.sets);
  check_set_model(set, w);
  cfg.target = set.label;
  LayerPartition part;
  validate_flags("--n-under/--n-gen", [&] { part = partition(w.config, a.n_under, a.n_gen); });
  const std::string pivot = a.pivot.empty() ? default_pivot(corpus) : a.pivot;
  const auto& eval = pick_split(corpus, a.split);

  std::vector<fs::path> inputs{a.model, a.corpus};
  inputs.insert(inputs.end(), a.sets.begin(), a.sets.end());
  const ojson config = {{"under", cfg.under},     {"s_attn", cfg.s_attn}, {"s_ffn", cfg.s_ffn},
                        {"gen", cfg.gen},         {"source", a.source},   {"target", cfg.target},
                        {"n_under", a.n_under},   {"n_gen", a.n_gen},     {"pivot", pivot},
                        {"split", a.split}};
  const ojson manifest = run_manifest("deactivate-eval", config, inputs, a.seed);

  const ConfigSelection sel = select_config_neurons(set, part, cfg, w.config);
  const EvalReport rep = evaluate(w, sel.mask, eval.languages, pivot, a.threads);

  ojson j;
  j["format"] = "plnd-eval-report";
  j["config_name"] = cfg.name();
  j["config"] = config;
  j["mask_size"] = sel.mask.size();
  j["warnings"] = sel.warnings;
  j["report"] = eval_report_to_json(rep);
  j["manifest"] = manifest;
  for (const auto& warn : sel.warnings) std::cerr << "warning: " << warn << "\n";
  if (!a.csv.empty()) write_csv_with_manifest(a.csv, eval_csv_header() + eval_csv_rows(cfg.name(), rep), manifest);
  write_json(a.out, j);
}

// ---------------------------------------------------------------------------

struct ProbeArgs {
  std::string model, corpus, docs, out;
  std::optional<std::size_t> line;
};

void cmd_probe(const ProbeArgs& a) {
  require_file("--model", a.model);
  require_file("--corpus", a.corpus);
  require_file("--docs", a.docs);
  const TransformerWeights w = load_weights(a.model);
  const CorpusOnDisk corpus = load_bundle(a.corpus);
  const auto docs = load_corpus_file(a.docs);
  if (docs.empty()) throw InputError("document file '" + a.docs + "' is empty");
  const TokenClassifier classifier(corpus.inventory);
  const ojson manifest = run_manifest("probe", {{"line", a.line ? ojson(*a.line) : ojson("average")}},
                                      {a.model, a.corpus, a.docs}, 0);
  ProbeResult r;
  if (a.line) {
    if (*a.line >= docs.size()) throw UsageError("--line: only " + std::to_string(docs.size()) + " documents");
    r = probe_language_ratio(w, docs[*a.line], classifier);
  } else {
    for (std::size_t i = 0; i < docs.size(); ++i) {
      ProbeResult one = probe_language_ratio(w, docs[i], classifier);
      if (i == 0) {
        r = std::move(one);
        continue;
      }
      for (std::size_t l = 0; l < r.fractions.size(); ++l)
        for (std::size_t c = 0; c < r.categories.size(); ++c) r.fractions[l][c] += one.fractions[l][c];
    }
    for (auto& row : r.fractions)
      for (double& f : row) f /= static_cast<double>(docs.size());
  }
  write_csv_with_manifest(a.out, probe_csv(r), manifest);
}

// ---------------------------------------------------------------------------

struct TuneArgs {
  std::string model, corpus, out, pivot, split = "validation";
  std::vector<std::string> sets;
  std::string grid_under = "1,2,3", grid_gen = "1,2";
  std::size_t threads = 1;
};

void cmd_tune_partition(const TuneArgs& a) {
  const auto gu = parse_counts("--grid-under", a.grid_under);
  const auto gg = parse_counts("--grid-gen", a.grid_gen);
  require_file("--model", a.model);
  require_file("--corpus", a.corpus);
  for (const auto& s : a.sets) require_file("--set", s);
  const TransformerWeights w = load_weights(a.model);
  const CorpusOnDisk corpus = load_bundle(a.corpus);
  const NeuronSet set = load_sets_union(a.sets);
  check_set_model(set, w);
  const std::string pivot = a.pivot.empty() ? default_pivot(corpus) : a.pivot;
  std::vector<GridPoint> grid;
  for (auto u : gu)
    for (auto g : gg) grid.push_back({u, g});
  std::vector<fs::path> inputs{a.model, a.corpus};
  inputs.insert(inputs.end(), a.sets.begin(), a.sets.end());
  const ojson manifest = run_manifest(
      "tune-partition", {{"grid_under", gu}, {"grid_gen", gg}, {"pivot", pivot}, {"split", a.split}}, inputs, 0);

  const TuneResult r = tune_partition(w, set, grid, pick_split(corpus, a.split).languages, pivot, a.threads);
  auto table = ojson::array();
  for (const auto& row : r.table) {
    ojson rj = {{"n_under", row.point.n_under}, {"n_gen", row.point.n_gen}, {"valid", row.valid}};
    if (row.valid) {
      rj["mask_size"] = row.mask_size;
      rj["delta"] = row.report.delta;
      rj["report"] = eval_report_to_json(row.report);
    }
    table.push_back(std::move(rj));
  }
  for (const auto& warn : r.warnings) std::cerr << "warning: " << warn << "\n";
  write_json(a.out, {{"format", "plnd-partition-grid"},
                     {"best", {{"n_under", r.best.n_under}, {"n_gen", r.best.n_gen}}},
                     {"table", table},
                     {"warnings", r.warnings},
                     {"manifest", manifest}});
}

// ---------------------------------------------------------------------------

struct FinetuneArgs {
  std::string model, corpus, lang, out, log, split = "train", kinds = "all";
  std::vector<std::string> sets;
  std::size_t steps = 100;
  double lr = 0.5;
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

void cmd_finetune(const FinetuneArgs& a) {
  require_file("--model", a.model);
  require_file("--corpus", a.corpus);
  for (const auto& s : a.sets) require_file("--set", s);
  const TransformerWeights w = load_weights(a.model);
  const CorpusOnDisk corpus = load_bundle(a.corpus);
  const NeuronSet set = filter_by_kinds(load_sets_union(a.sets), a.kinds);
  check_set_model(set, w);
  const auto& docs = pick_split(corpus, a.split).at(a.lang).docs;
  TrainConfig tc;
  tc.learning_rate = a.lr;
  tc.steps = a.steps;
  tc.batch_size = a.batch;
  tc.seed = a.seed;
  tc.threads = a.threads;
  tc.gradient_mask = set.mask();
  validate_flags("--lr/--steps/--batch", [&] { tc.validate(); });
  std::vector<fs::path> inputs{a.model, a.corpus};
  inputs.insert(inputs.end(), a.sets.begin(), a.sets.end());
  ojson config = {{"lang", a.lang},   {"split", a.split}, {"kinds", a.kinds}, {"steps", a.steps},
                  {"lr", a.lr},       {"batch", a.batch}, {"mask", set.label}, {"mask_size", set.size()}};
  const ojson manifest = run_manifest("finetune", config, inputs, a.seed);
  const TrainResult r = train(w, docs, tc);
  if (!a.log.empty()) write_csv_with_manifest(a.log, train_log_csv(r.losses), manifest);
  save_weights(a.out, r.weights, manifest.dump());
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string out;
  std::size_t d_model = 64, d_inter = 512, seq_len = 32, heads = 4, d_head = 16;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
};

void cmd_bench(const BenchArgs& a) {
  ModelConfig c{1, a.d_model, a.heads, a.d_head, a.d_inter, 64, a.seq_len};
  validate_flags("--d-model/--heads/--d-head/--d-inter/--seq-len", [&] { c.validate(); });
  if (a.repeats == 0) throw UsageError("--repeats: must be >= 1");
  const TransformerWeights w = init_random(c, a.seed);
  Rng rng(derive_seed(a.seed, "bench-doc"));
  Tokens doc(a.seq_len);
  for (auto& t : doc) t = static_cast<TokenId>(rng.below(c.vocab_size));
  using clock = std::chrono::steady_clock;

  // Sequential oracle: one forward to capture the FFN input, then one masked
  // recompute per neuron.
  auto t0 = clock::now();
  std::vector<double> oracle(c.d_inter);
  {
    const ForwardTrace tr = forward(w, doc);
    for (std::size_t k = 0; k < c.d_inter; ++k)
      oracle[k] = imp_oracle_sub(w, tr, {0, NeuronKind::Up, static_cast<std::uint32_t>(k)});
  }
  const double oracle_s = std::chrono::duration<double>(clock::now() - t0).count();

  std::vector<double> parallel;
  t0 = clock::now();
  for (std::size_t r = 0; r < a.repeats; ++r) parallel = imp_ffn_parallel(w, doc, 0);
  const double parallel_s = std::chrono::duration<double>(clock::now() - t0).count() / static_cast<double>(a.repeats);

  double max_rel = 0.0;
  for (std::size_t k = 0; k < c.d_inter; ++k) {
    const double den = std::max(std::abs(oracle[k]), std::abs(parallel[k]));
    if (den > 0) max_rel = std::max(max_rel, std::abs(oracle[k] - parallel[k]) / den);
  }
  const ojson config = {{"d_model", a.d_model}, {"d_inter", a.d_inter}, {"seq_len", a.seq_len},
                        {"heads", a.heads},     {"d_head", a.d_head},   {"repeats", a.repeats}};
  ojson j = {{"format", "plnd-bench"},
             {"neurons", c.d_inter},
             {"oracle_seconds", oracle_s},
             {"parallel_seconds", parallel_s},
             {"speedup", oracle_s / parallel_s},
             {"max_rel_deviation", max_rel},
             {"threads", 1},
             {"manifest", run_manifest("bench", config, {}, a.seed)}};
  std::cout << "oracle " << oracle_s << " s, parallel " << parallel_s << " s, speedup "
            << oracle_s / parallel_s << "x\n";
  if (!a.out.empty()) write_json(a.out, j);
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
};

void cmd_report(const ReportArgs& a) {
  std::vector<fs::path> inputs;
  std::string csv = eval_csv_header();
  for (const auto& p : a.inputs) {
    require_file("--inputs", p);
    inputs.emplace_back(p);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(p));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("'" + p + "' is not valid JSON: " + e.what());
    }
    if (j.value("format", "") != "plnd-eval-report") throw FormatError("'" + p + "' is not an eval report");
    csv += eval_csv_rows(j.at("config_name").get<std::string>(), eval_report_from_json(j.at("report")));
  }
  write_csv_with_manifest(a.out, csv, run_manifest("report", ojson::object(), inputs, 0));
}

// ---------------------------------------------------------------------------

struct GradCheckArgs {
  std::string model, docs, out;
  std::size_t samples = 200;
  double tolerance = 1e-5;
  std::uint64_t seed = 0;
};

int cmd_grad_check(const GradCheckArgs& a) {
  require_file("--model", a.model);
  require_file("--docs", a.docs);
  const TransformerWeights w = load_weights(a.model);
  const auto docs = load_corpus_file(a.docs);
  if (docs.empty()) throw InputError("document file '" + a.docs + "' is empty");
  const GradCheckReport r = grad_check(w, docs, a.samples, a.tolerance, a.seed);
  auto entries = ojson::array();
  for (const auto& e : r.entries)
    entries.push_back({{"tensor", e.tensor}, {"offset", e.offset}, {"analytic", e.analytic},
                       {"numeric", e.numeric}, {"rel_error", e.rel_error}});
  ojson j = {{"format", "plnd-grad-check"}, {"passed", r.passed},
             {"max_rel_error", r.max_rel_error}, {"mean_rel_error", r.mean_rel_error},
             {"tolerance", r.tolerance}, {"entries", entries},
             {"manifest", run_manifest("grad-check", {{"samples", a.samples}, {"tolerance", a.tolerance}},
                                       {a.model, a.docs}, a.seed)}};
  std::cout << (r.passed ? "PASS" : "FAIL") << " max_rel_error=" << r.max_rel_error
            << " mean_rel_error=" << r.mean_rel_error << "\n";
  if (!a.out.empty()) write_json(a.out, j);
  return r.passed ? 0 : 3;
}

void print_error(const std::string& kind, const std::string& message, const std::string& cause = "") {
  ojson err = {{"kind", kind}, {"message", message}};
  if (!cause.empty()) err["cause"] = cause;
  std::cerr << ojson{{"error", err}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"plnd: language-specific neuron detection toolkit"};
  app.require_subcommand(1);
  int status = 0;

  MakeCorpusArgs mc;
  auto* s_mc = app.add_subcommand("make-corpus", "generate a synthetic multilingual corpus");
  s_mc->add_option("--out", mc.out, "output directory")->required();
  s_mc->add_option("--seed", mc.seed);
  s_mc->add_option("--vocab", mc.vocab);
  s_mc->add_option("--languages", mc.languages, "comma-separated labels");
  s_mc->add_option("--docs", mc.docs, "comma-separated document counts per language");
  s_mc->add_option("--doc-len", mc.doc_len);
  s_mc->add_option("--train-fraction", mc.train_fraction);
  s_mc->add_option("--shared-fraction", mc.shared_fraction);
  s_mc->callback([&] { cmd_make_corpus(mc); });

  TrainArgs tr;
  auto* s_tr = app.add_subcommand("train", "pre-train the toy model on a corpus bundle");
  s_tr->add_option("--corpus", tr.corpus, "bundle.json")->required();
  s_tr->add_option("--out", tr.out, "weight file")->required();
  s_tr->add_option("--log", tr.log, "training log CSV");
  add_model_options(s_tr, tr.model);
  s_tr->add_option("--steps", tr.steps);
  s_tr->add_option("--lr", tr.lr);
  s_tr->add_option("--batch", tr.batch);
  s_tr->add_option("--seed", tr.seed);
  s_tr->add_option("--threads", tr.threads);
  s_tr->callback([&] { cmd_train(tr); });

  InitArgs in;
  auto* s_in = app.add_subcommand("init", "write a randomly initialized model");
  s_in->add_option("--out", in.out)->required();
  add_model_options(s_in, in.model);
  s_in->add_option("--vocab", in.vocab);
  s_in->add_option("--seed", in.seed);
  s_in->callback([&] { cmd_init(in); });

  ImportanceArgs im;
  auto* s_im = app.add_subcommand("importance", "neuron importance for one document or a corpus average");
  s_im->add_option("--model", im.model)->required();
  s_im->add_option("--docs", im.docs, "token file, one document per line")->required();
  s_im->add_option("--line", im.line, "0-based document index (default: average over all)");
  s_im->add_option("--out", im.out)->required();
  s_im->add_option("--threads", im.threads);
  s_im->callback([&] { cmd_importance(im); });

  DetectArgs de;
  auto* s_de = app.add_subcommand("detect", "detect language-specific neurons");
  s_de->add_option("--model", de.model)->required();
  s_de->add_option("--corpus", de.corpus)->required();
  s_de->add_option("--lang", de.lang)->required();
  s_de->add_option("--split", de.split);
  s_de->add_option("--q", de.q, "per-document importance quantile");
  s_de->add_option("--p", de.p, "fraction of documents");
  s_de->add_option("--epsilon", de.epsilon, "absolute threshold (overrides --q)");
  s_de->add_option("--out", de.out)->required();
  s_de->add_option("--threads", de.threads);
  s_de->callback([&] { cmd_detect(de); });

  OverlapArgs ov;
  auto* s_ov = app.add_subcommand("overlap", "pairwise overlap matrix of neuron sets");
  s_ov->add_option("--sets", ov.sets)->required();
  s_ov->add_option("--kinds", ov.kinds, "all, attn or ffn");
  s_ov->add_option("--out", ov.out)->required();
  s_ov->callback([&] { cmd_overlap(ov); });

  DeactivateArgs dv;
  auto* s_dv = app.add_subcommand("deactivate-eval", "evaluate perplexity under structured deactivation");
  s_dv->add_option("--model", dv.model)->required();
  s_dv->add_option("--set", dv.sets, "neuron set(s); several are united")->required();
  s_dv->add_option("--corpus", dv.corpus)->required();
  s_dv->add_option("--split", dv.split);
  s_dv->add_flag("--under", dv.under);
  s_dv->add_flag("--s-attn", dv.s_attn);
  s_dv->add_flag("--s-ffn", dv.s_ffn);
  s_dv->add_flag("--gen", dv.gen);
  s_dv->add_option("--source", dv.source, "lang-spec or random");
  s_dv->add_option("--seed", dv.seed);
  s_dv->add_option("--n-under", dv.n_under);
  s_dv->add_option("--n-gen", dv.n_gen);
  s_dv->add_option("--pivot", dv.pivot);
  s_dv->add_option("--out", dv.out)->required();
  s_dv->add_option("--csv", dv.csv);
  s_dv->add_option("--threads", dv.threads);
  s_dv->callback([&] { cmd_deactivate_eval(dv); });

  ProbeArgs pr;
  auto* s_pr = app.add_subcommand("probe", "layer-wise language ratio of decoded hidden states");
  s_pr->add_option("--model", pr.model)->required();
  s_pr->add_option("--corpus", pr.corpus, "bundle.json (token classifier)")->required();
  s_pr->add_option("--docs", pr.docs)->required();
  s_pr->add_option("--line", pr.line);
  s_pr->add_option("--out", pr.out)->required();
  s_pr->callback([&] { cmd_probe(pr); });

  TuneArgs tu;
  auto* s_tu = app.add_subcommand("tune-partition", "grid-search the understanding/generation split");
  s_tu->add_option("--model", tu.model)->required();
  s_tu->add_option("--set", tu.sets)->required();
  s_tu->add_option("--corpus", tu.corpus)->required();
  s_tu->add_option("--split", tu.split);
  s_tu->add_option("--grid-under", tu.grid_under);
  s_tu->add_option("--grid-gen", tu.grid_gen);
  s_tu->add_option("--pivot", tu.pivot);
  s_tu->add_option("--out", tu.out)->required();
  s_tu->add_option("--threads", tu.threads);
  s_tu->callback([&] { cmd_tune_partition(tu); });

  FinetuneArgs ft;
  auto* s_ft = app.add_subcommand("finetune", "fine-tune only the neurons of a set");
  s_ft->add_option("--model", ft.model)->required();
  s_ft->add_option("--set", ft.sets)->required();
  s_ft->add_option("--corpus", ft.corpus)->required();
  s_ft->add_option("--lang", ft.lang)->required();
  s_ft->add_option("--split", ft.split);
  s_ft->add_option("--kinds", ft.kinds, "all, attn or ffn");
  s_ft->add_option("--steps", ft.steps);
  s_ft->add_option("--lr", ft.lr);
  s_ft->add_option("--batch", ft.batch);
  s_ft->add_option("--seed", ft.seed);
  s_ft->add_option("--out", ft.out)->required();
  s_ft->add_option("--log", ft.log);
  s_ft->add_option("--threads", ft.threads);
  s_ft->callback([&] { cmd_finetune(ft); });

  BenchArgs be;
  auto* s_be = app.add_subcommand("bench", "time the sequential oracle against the batched FFN formula");
  s_be->add_option("--d-model", be.d_model);
  s_be->add_option("--d-inter", be.d_inter);
  s_be->add_option("--seq-len", be.seq_len);
  s_be->add_option("--heads", be.heads);
  s_be->add_option("--d-head", be.d_head);
  s_be->add_option("--repeats", be.repeats);
  s_be->add_option("--seed", be.seed);
  s_be->add_option("--out", be.out);
  s_be->callback([&] { cmd_bench(be); });

  ReportArgs rp;
  auto* s_rp = app.add_subcommand("report", "merge eval reports into one CSV");
  s_rp->add_option("--inputs", rp.inputs)->required();
  s_rp->add_option("--out", rp.out)->required();
  s_rp->callback([&] { cmd_report(rp); });

  GradCheckArgs gc;
  auto* s_gc = app.add_subcommand("grad-check", "compare analytic gradients with central differences");
  s_gc->add_option("--model", gc.model)->required();
  s_gc->add_option("--docs", gc.docs)->required();
  s_gc->add_option("--samples", gc.samples);
  s_gc->add_option("--tolerance", gc.tolerance);
  s_gc->add_option("--seed", gc.seed);
  s_gc->add_option("--out", gc.out);
  s_gc->callback([&] { status = cmd_grad_check(gc); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  } catch (const UsageError& e) {
    print_error(e.kind(), e.what());
    return 2;
  } catch (const TrainingError& e) {
    print_error(e.kind(), e.what());
    return 1;
  } catch (const Error& e) {
    // Bad files, malformed inputs and config violations are usage errors.
    print_error("usage", e.what(), e.kind());
    return 2;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return status;
}
