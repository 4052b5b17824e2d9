#pragma once

// Layer partitions, structured deactivation, perplexity evaluation with the
// pivot-vs-others delta metric, the logit-lens language probe and partition
// tuning.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "plnd/atlas.hpp"
#include "plnd/corpus.hpp"
#include "plnd/model.hpp"
#include "plnd/parallel.hpp"

namespace plnd {

enum class Region { Understanding, TaskSolving, Generation };

// Understanding = layers [0, n_under), generation = the last n_gen layers,
// task-solving = everything between (never empty).
struct LayerPartition {
  std::size_t n_layers = 0;
  std::size_t n_under = 0;
  std::size_t n_gen = 0;

  Region region_of(std::size_t layer) const {
    if (layer < n_under) return Region::Understanding;
    if (layer >= n_layers - n_gen) return Region::Generation;
    return Region::TaskSolving;
  }

  std::vector<std::size_t> layers_in(Region r) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n_layers; ++i)
      if (region_of(i) == r) out.push_back(i);
    return out;
  }
};

inline LayerPartition partition(std::size_t n_layers, std::size_t n_under, std::size_t n_gen) {
  if (n_under + n_gen >= n_layers)
    throw ConfigError("partition (" + std::to_string(n_under) + ", " + std::to_string(n_gen) +
                      ") leaves no task-solving layer in a " + std::to_string(n_layers) +
                      "-layer model");
  return {n_layers, n_under, n_gen};
}

inline LayerPartition partition(const ModelConfig& c, std::size_t n_under, std::size_t n_gen) {
  return partition(c.n_layers, n_under, n_gen);
}

enum class NeuronSource { LanguageSpecific, RandomMatched };

// Flags name the (region x structure) scopes whose chosen neurons are
// deactivated: Under and Gen cover every kind in their region, S-ATTN covers
// Q/K/V/O in the task-solving region and S-FFN covers GATE/UP/DOWN there.
struct DeactivationConfig {
  bool under = false;
  bool s_attn = false;
  bool s_ffn = false;
  bool gen = false;
  NeuronSource source = NeuronSource::LanguageSpecific;
  std::string target;
  std::uint64_t seed = 0;  // random-matched sampling

  void validate() const {
    if (!(under || s_attn || s_ffn || gen))
      throw ConfigError("deactivation config must enable at least one of Under, S-ATTN, S-FFN, Gen");
  }

  bool in_scope(const LayerPartition& part, const NeuronId& n) const {
    switch (part.region_of(n.layer)) {
      case Region::Understanding: return under;
      case Region::Generation: return gen;
      case Region::TaskSolving: return is_attention_kind(n.kind) ? s_attn : s_ffn;
    }
    return false;
  }

  std::string name() const {
    std::string s;
    auto flag = [&](bool on, const char* tag) {
      if (!on) return;
      if (!s.empty()) s += "+";
      s += tag;
    };
    flag(under, "Under");
    flag(s_attn, "S-ATTN");
    flag(s_ffn, "S-FFN");
    flag(gen, "Gen");
    s += source == NeuronSource::LanguageSpecific ? "/lang-spec" : "/random";
    return s;
  }
};

struct ConfigSelection {
  DeactivationMask mask;
  std::vector<std::string> warnings;
};

inline ConfigSelection select_config_neurons(const NeuronSet& set, const LayerPartition& part,
                                             const DeactivationConfig& cfg,
                                             const ModelConfig& model) {
  cfg.validate();
  if (part.n_layers != model.n_layers) throw InputError("partition does not match the model's layer count");
  NeuronSet scoped = set;
  scoped.members.clear();
  for (const auto& n : set.members) {
    check_neuron(model, n);
    if (cfg.in_scope(part, n)) scoped.members.push_back(n);
  }

  ConfigSelection out;
  auto warn_if_empty = [&](bool on, const char* tag, auto pred) {
    if (!on) return;
    for (const auto& n : scoped.members)
      if (pred(n)) return;
    out.warnings.push_back(std::string(tag) + " is enabled but the set has no members in its scope");
  };
  warn_if_empty(cfg.under, "Under", [&](const NeuronId& n) { return part.region_of(n.layer) == Region::Understanding; });
  warn_if_empty(cfg.s_attn, "S-ATTN", [&](const NeuronId& n) {
    return part.region_of(n.layer) == Region::TaskSolving && is_attention_kind(n.kind);
  });
  warn_if_empty(cfg.s_ffn, "S-FFN", [&](const NeuronId& n) {
    return part.region_of(n.layer) == Region::TaskSolving && !is_attention_kind(n.kind);
  });
  warn_if_empty(cfg.gen, "Gen", [&](const NeuronId& n) { return part.region_of(n.layer) == Region::Generation; });

  if (cfg.source == NeuronSource::LanguageSpecific) {
    out.mask = scoped.mask();
  } else {
    // Every (layer, kind) stratum of `scoped` lies wholly inside an enabled
    // scope, so sampling over whole strata stays in scope.
    out.mask = sample_random_matched(scoped, model, cfg.seed).mask();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct LanguageEval {
  std::string label;
  double before = 0.0;  // held-out perplexity, intact model
  double after = 0.0;   // held-out perplexity, masked model
  double delta = 0.0;   // before - after: negative means degradation
};

struct EvalReport {
  std::string pivot;
  std::vector<LanguageEval> languages;
  double delta_pivot = 0.0;
  double delta_others = 0.0;  // mean over non-pivot languages
  double delta = 0.0;         // delta_pivot - delta_others
};

// Delta is higher-is-better; perplexity is lower-is-better, so
// each language's change is (before - after).
inline double delta_metric(double delta_pivot, double delta_others) { return delta_pivot - delta_others; }

// exp of the mean next-token cross-entropy over all documents.
inline double perplexity(const TransformerWeights& w, std::span<const Tokens> docs,
                         std::size_t threads = 1) {
  if (docs.empty()) throw InputError("perplexity over an empty corpus");
  std::vector<double> losses(docs.size());
  parallel_for(docs.size(), threads, [&](std::size_t i) { losses[i] = loss_ce(w, docs[i]); });
  double total = 0.0;
  for (double l : losses) total += l;
  return std::exp(total / static_cast<double>(docs.size()));
}

// Fills the delta components of a report from its per-language entries.
inline EvalReport summarize_deltas(std::string pivot, std::vector<LanguageEval> languages) {
  EvalReport rep;
  rep.pivot = std::move(pivot);
  rep.languages = std::move(languages);
  bool has_pivot = false;
  double others = 0.0;
  std::size_t n_others = 0;
  for (const auto& e : rep.languages) {
    if (e.label == rep.pivot) {
      rep.delta_pivot = e.delta;
      has_pivot = true;
    } else {
      others += e.delta;
      ++n_others;
    }
  }
  if (!has_pivot) throw InputError("evaluation corpora do not include pivot '" + rep.pivot + "'");
  if (n_others == 0) throw InputError("evaluation needs at least one non-pivot language");
  rep.delta_others = others / static_cast<double>(n_others);
  rep.delta = delta_metric(rep.delta_pivot, rep.delta_others);
  return rep;
}

inline EvalReport evaluate(const TransformerWeights& w, const DeactivationMask& mask,
                           const std::vector<LanguageDocs>& eval_corpora, const std::string& pivot,
                           std::size_t threads = 1) {
  bool has_pivot = false, has_other = false;
  for (const auto& lang : eval_corpora) {
    if (lang.docs.empty()) throw InputError("evaluation corpus for '" + lang.label + "' is empty");
    (lang.label == pivot ? has_pivot : has_other) = true;
  }
  if (!has_pivot) throw InputError("evaluation corpora do not include pivot '" + pivot + "'");
  if (!has_other) throw InputError("evaluation needs at least one non-pivot language");
  const TransformerWeights masked = apply_mask(w, mask);

  std::vector<LanguageEval> langs;
  for (const auto& lang : eval_corpora) {
    LanguageEval e;
    e.label = lang.label;
    e.before = perplexity(w, lang.docs, threads);
    e.after = mask.empty() ? e.before : perplexity(masked, lang.docs, threads);
    e.delta = e.before - e.after;
    langs.push_back(std::move(e));
  }
  return summarize_deltas(pivot, std::move(langs));
}

// ---------------------------------------------------------------------------
// Logit-lens language probe

struct ProbeResult {
  std::vector<std::string> categories;       // languages then "non-word"
  std::vector<std::vector<double>> fractions;  // [layer 0..n_layers][category]
};

// Decodes every position of every h_i through the final norm and the
// unembedding, takes the argmax token (lowest id on ties) and reports the
// per-layer share of each category.
inline ProbeResult probe_language_ratio(const TransformerWeights& w, std::span<const TokenId> doc,
                                        const TokenClassifier& classifier) {
  if (classifier.inventory().vocab_size != w.config.vocab_size)
    throw InputError("classifier vocabulary does not match the model");
  const ForwardTrace tr = forward(w, doc);
  ProbeResult out;
  for (std::size_t c = 0; c < classifier.n_categories(); ++c) out.categories.push_back(classifier.label(c));
  const double inv = 1.0 / static_cast<double>(doc.size());
  for (const Matrix& h : tr.hidden) {
    Matrix normed;
    rmsnorm(h, w.final_norm, normed);
    const Matrix logits = matmul(normed, w.unembed);
    std::vector<std::size_t> counts(classifier.n_categories(), 0);
    for (std::size_t p = 0; p < logits.rows(); ++p) {
      const auto row = logits.row(p);
      std::size_t best = 0;
      for (std::size_t j = 1; j < row.size(); ++j)
        if (row[j] > row[best]) best = j;
      ++counts[classifier.classify(static_cast<TokenId>(best))];
    }
    std::vector<double> f(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) f[c] = static_cast<double>(counts[c]) * inv;
    out.fractions.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Partition tuning

struct GridPoint {
  std::size_t n_under = 0;
  std::size_t n_gen = 0;
};

struct GridRow {
  GridPoint point;
  bool valid = false;
  std::size_t mask_size = 0;
  EvalReport report;
};

struct TuneResult {
  LayerPartition best;
  std::vector<GridRow> table;
  std::vector<std::string> warnings;
};

// Grid search maximizing delta under understanding-only deactivation of `set`.
// Ties go to the smaller n_under, then the smaller n_gen.
inline TuneResult tune_partition(const TransformerWeights& w, const NeuronSet& set,
                                 const std::vector<GridPoint>& grid,
                                 const std::vector<LanguageDocs>& validation,
                                 const std::string& pivot, std::size_t threads = 1) {
  if (grid.empty()) throw ConfigError("partition grid is empty");
  TuneResult out;
  std::optional<std::size_t> best;
  for (const auto& g : grid) {
    GridRow row;
    row.point = g;
    if (g.n_under + g.n_gen >= w.config.n_layers) {
      out.warnings.push_back("skipping grid point (" + std::to_string(g.n_under) + ", " +
                             std::to_string(g.n_gen) + "): no task-solving layer");
      out.table.push_back(std::move(row));
      continue;
    }
    row.valid = true;
    const LayerPartition part = partition(w.config, g.n_under, g.n_gen);
    DeactivationConfig cfg;
    cfg.under = true;
    const auto sel = select_config_neurons(set, part, cfg, w.config);
    row.mask_size = sel.mask.size();
    row.report = evaluate(w, sel.mask, validation, pivot, threads);
    out.table.push_back(std::move(row));
    const std::size_t idx = out.table.size() - 1;
    if (!best) {
      best = idx;
      continue;
    }
    const GridRow& b = out.table[*best];
    const GridRow& r = out.table[idx];
    const bool better =
        r.report.delta > b.report.delta ||
        (r.report.delta == b.report.delta &&
         (r.point.n_under < b.point.n_under ||
          (r.point.n_under == b.point.n_under && r.point.n_gen < b.point.n_gen)));
    if (better) best = idx;
  }
  if (!best) throw ConfigError("no valid partition in the grid");
  out.best = partition(w.config, out.table[*best].point.n_under, out.table[*best].point.n_gen);
  return out;
}

}  // namespace plnd
