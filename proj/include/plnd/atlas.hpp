#pragma once

// Language-specific neuron sets: detection from per-document importance,
// set algebra, overlap ratios, activation counts and matched random baselines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "plnd/importance.hpp"
#include "plnd/model.hpp"
#include "plnd/parallel.hpp"
#include "plnd/rng.hpp"

namespace plnd {

// A neuron is important on a document when its score exceeds the document's
// threshold for its (layer, kind) slice. In quantile mode the threshold is the
// floor(q*m)-th smallest score of the m-score slice (0 when that rank is 0),
// so exactly floor(q*m) distinct scores sit at or below it. In absolute mode
// the threshold is a fixed epsilon and the comparison is `>=`.
// A neuron is detected when it is important in at least ceil(p*n) of n documents.
struct ThresholdPolicy {
  double q = 0.95;
  double p = 1.0;
  std::optional<double> absolute_epsilon;

  void validate() const {
    if (!absolute_epsilon && !(q > 0.0 && q < 1.0)) throw ConfigError("quantile q must lie in (0, 1)");
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("document fraction p must lie in (0, 1]");
    if (absolute_epsilon && !(std::isfinite(*absolute_epsilon) && *absolute_epsilon >= 0.0))
      throw ConfigError("absolute epsilon must be finite and non-negative");
  }

  double threshold(std::span<const double> scores) const {
    if (absolute_epsilon) return *absolute_epsilon;
    const auto rank = static_cast<std::size_t>(std::floor(q * static_cast<double>(scores.size()) + 1e-9));
    if (rank == 0) return 0.0;
    std::vector<double> sorted(scores.begin(), scores.end());
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank - 1), sorted.end());
    return sorted[rank - 1];
  }

  bool important(double score, double threshold) const {
    return absolute_epsilon ? score >= threshold : score > threshold;
  }

  std::size_t required_docs(std::size_t n_docs) const {
    return static_cast<std::size_t>(std::ceil(p * static_cast<double>(n_docs) - 1e-9));
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    if (absolute_epsilon)
      j["epsilon"] = *absolute_epsilon;
    else
      j["q"] = q;
    j["p"] = p;
    return j;
  }
};

struct NeuronSet {
  std::string label;
  std::string model_hash;
  std::vector<NeuronId> members;  // sorted, unique
  nlohmann::ordered_json provenance;

  std::size_t size() const noexcept { return members.size(); }
  bool empty() const noexcept { return members.empty(); }
  bool contains(const NeuronId& n) const {
    return std::binary_search(members.begin(), members.end(), n);
  }
  DeactivationMask mask() const { return DeactivationMask(members); }

  void normalize() {
    std::sort(members.begin(), members.end());
    members.erase(std::unique(members.begin(), members.end()), members.end());
  }
};

inline std::string corpus_hash(std::span<const Tokens> docs) {
  Fnv1a h;
  h.u64(docs.size());
  for (const auto& d : docs) {
    h.u64(d.size());
    for (TokenId t : d) h.u64(t);
  }
  return h.hex();
}

// Per-(layer, kind) thresholds for one document's importance map.
inline std::vector<std::array<double, kAllKinds.size()>> slice_thresholds(
    const ImportanceMap& m, const ThresholdPolicy& policy) {
  std::vector<std::array<double, kAllKinds.size()>> out(m.layers.size());
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    for (std::size_t k = 0; k < kAllKinds.size(); ++k)
      out[i][k] = policy.threshold(m.layers[i].scores[k]);
  return out;
}

// Detection from precomputed per-document importance maps.
inline NeuronSet detect_from_maps(const ModelConfig& config, std::span<const ImportanceMap> maps,
                                  const ThresholdPolicy& policy, std::string label) {
  policy.validate();
  if (maps.empty()) throw InputError("detection corpus is empty");
  // hits[layer][kind][index]
  std::vector<std::array<std::vector<std::size_t>, kAllKinds.size()>> hits(config.n_layers);
  for (std::size_t i = 0; i < config.n_layers; ++i)
    for (NeuronKind k : kAllKinds)
      hits[i][static_cast<std::size_t>(k)].assign(kind_dim(config, k), 0);
  for (const auto& m : maps) {
    const auto th = slice_thresholds(m, policy);
    for (std::size_t i = 0; i < config.n_layers; ++i)
      for (std::size_t k = 0; k < kAllKinds.size(); ++k) {
        const auto& s = m.layers[i].scores[k];
        for (std::size_t j = 0; j < s.size(); ++j)
          if (policy.important(s[j], th[i][k])) ++hits[i][k][j];
      }
  }
  const std::size_t need = policy.required_docs(maps.size());
  NeuronSet set;
  set.label = std::move(label);
  for (std::size_t i = 0; i < config.n_layers; ++i)
    for (NeuronKind k : kAllKinds) {
      const auto& h = hits[i][static_cast<std::size_t>(k)];
      for (std::size_t j = 0; j < h.size(); ++j)
        if (h[j] >= need)
          set.members.push_back({static_cast<std::uint32_t>(i), k, static_cast<std::uint32_t>(j)});
    }
  set.normalize();
  return set;
}

inline std::vector<ImportanceMap> importance_maps(const TransformerWeights& w,
                                                  std::span<const Tokens> docs,
                                                  std::size_t threads = 1) {
  for (const auto& d : docs) check_tokens(w.config, d);
  std::vector<ImportanceMap> maps(docs.size());
  parallel_for(docs.size(), threads, [&](std::size_t i) { maps[i] = imp_all(w, docs[i]); });
  return maps;
}

inline NeuronSet detect(const TransformerWeights& w, std::span<const Tokens> corpus,
                        const ThresholdPolicy& policy, std::string label,
                        std::size_t threads = 1) {
  policy.validate();
  if (corpus.empty()) throw InputError("detection corpus is empty");
  const auto maps = importance_maps(w, corpus, threads);
  NeuronSet set = detect_from_maps(w.config, maps, policy, std::move(label));
  set.model_hash = model_hash(w);
  set.provenance = {{"op", "detect"},
                    {"policy", policy.to_json()},
                    {"corpus_hash", corpus_hash(corpus)},
                    {"n_docs", corpus.size()},
                    {"threshold_rule", policy.absolute_epsilon ? "absolute" : "per-document quantile"}};
  return set;
}

// ---------------------------------------------------------------------------
// Overlap and set algebra

struct OverlapRatio {
  std::size_t shared = 0;
  std::size_t denominator = 0;
  double value() const { return static_cast<double>(shared) / static_cast<double>(denominator); }
};

// |x ∩ y| / |y|. Asymmetric: the denominator is y's size.
inline OverlapRatio overlap(const NeuronSet& x, const NeuronSet& y) {
  if (y.empty()) throw UndefinedRatioError("overlap is undefined for an empty denominator set '" + y.label + "'");
  std::size_t shared = 0;
  auto a = x.members.begin();
  auto b = y.members.begin();
  while (a != x.members.end() && b != y.members.end()) {
    if (*a < *b) ++a;
    else if (*b < *a) ++b;
    else { ++shared; ++a; ++b; }
  }
  return {shared, y.size()};
}

enum class SetOp { Union, Intersection, Difference };

inline NeuronSet set_algebra(SetOp op, const NeuronSet& a, const NeuronSet& b) {
  if (a.model_hash != b.model_hash)
    throw InputError("sets '" + a.label + "' and '" + b.label + "' belong to different models");
  NeuronSet out;
  out.model_hash = a.model_hash;
  const char* sym = "";
  switch (op) {
    case SetOp::Union:
      std::set_union(a.members.begin(), a.members.end(), b.members.begin(), b.members.end(),
                     std::back_inserter(out.members));
      sym = " | ";
      break;
    case SetOp::Intersection:
      std::set_intersection(a.members.begin(), a.members.end(), b.members.begin(), b.members.end(),
                            std::back_inserter(out.members));
      sym = " & ";
      break;
    case SetOp::Difference:
      std::set_difference(a.members.begin(), a.members.end(), b.members.begin(), b.members.end(),
                          std::back_inserter(out.members));
      sym = " - ";
      break;
  }
  out.label = "(" + a.label + sym + b.label + ")";
  out.provenance = {{"op", "algebra"}, {"expr", out.label}};
  return out;
}

inline NeuronSet operator|(const NeuronSet& a, const NeuronSet& b) { return set_algebra(SetOp::Union, a, b); }
inline NeuronSet operator&(const NeuronSet& a, const NeuronSet& b) { return set_algebra(SetOp::Intersection, a, b); }
inline NeuronSet operator-(const NeuronSet& a, const NeuronSet& b) { return set_algebra(SetOp::Difference, a, b); }

// Keeps only members whose kind passes `keep`.
template <class Pred>
NeuronSet filter_kinds(const NeuronSet& s, Pred keep, const std::string& tag) {
  NeuronSet out = s;
  out.members.clear();
  for (const auto& n : s.members)
    if (keep(n.kind)) out.members.push_back(n);
  out.label = s.label + "[" + tag + "]";
  out.provenance = {{"op", "filter"}, {"kinds", tag}, {"source", s.provenance}};
  return out;
}

// ---------------------------------------------------------------------------
// Activation counts

struct LayerActivity {
  std::size_t attention = 0;
  std::size_t ffn = 0;
  std::size_t members_attention = 0;
  std::size_t members_ffn = 0;
};

inline std::vector<LayerActivity> count_active(const TransformerWeights& w, const NeuronSet& set,
                                               std::span<const TokenId> doc,
                                               const ThresholdPolicy& policy) {
  policy.validate();
  for (const auto& n : set.members) check_neuron(w.config, n);
  std::vector<LayerActivity> out(w.config.n_layers);
  if (set.empty()) {
    check_tokens(w.config, doc);
    return out;
  }
  const ImportanceMap m = imp_all(w, doc);
  const auto th = slice_thresholds(m, policy);
  for (const auto& n : set.members) {
    auto& c = out[n.layer];
    const bool attn = is_attention_kind(n.kind);
    (attn ? c.members_attention : c.members_ffn) += 1;
    if (policy.important(m.at(n), th[n.layer][static_cast<std::size_t>(n.kind)]))
      (attn ? c.attention : c.ffn) += 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matched random baseline

// Restriction on where random neurons may be drawn from. Unset fields do not
// restrict. `candidates`, when set, is the exhaustive list of allowed neurons.
struct SamplingScope {
  std::optional<std::vector<std::uint32_t>> layers;
  std::optional<std::vector<NeuronKind>> kinds;
  std::optional<std::vector<NeuronId>> candidates;

  bool contains(const NeuronId& n) const {
    if (layers && std::find(layers->begin(), layers->end(), n.layer) == layers->end()) return false;
    if (kinds && std::find(kinds->begin(), kinds->end(), n.kind) == kinds->end()) return false;
    if (candidates && !std::binary_search(candidates->begin(), candidates->end(), n)) return false;
    return true;
  }
};

// Uniform sample without replacement inside each (layer, kind) stratum of
// reference ∩ scope, matching the reference's per-stratum counts.
inline NeuronSet sample_random_matched(const NeuronSet& reference, const ModelConfig& config,
                                       std::uint64_t seed, SamplingScope scope = {}) {
  if (scope.candidates) std::sort(scope.candidates->begin(), scope.candidates->end());
  std::map<std::pair<std::uint32_t, NeuronKind>, std::size_t> strata;
  for (const auto& n : reference.members) {
    check_neuron(config, n);
    if (scope.contains(n)) ++strata[{n.layer, n.kind}];
  }
  Rng rng(derive_seed(seed, "matched-sample"));
  NeuronSet out;
  out.label = "random~" + reference.label;
  out.model_hash = reference.model_hash;
  for (const auto& [key, count] : strata) {
    const auto [layer, kind] = key;
    std::vector<std::uint32_t> pool;
    for (std::size_t j = 0; j < kind_dim(config, kind); ++j) {
      const NeuronId n{layer, kind, static_cast<std::uint32_t>(j)};
      if (scope.contains(n)) pool.push_back(n.index);
    }
    if (pool.size() < count)
      throw SamplingError("stratum (layer " + std::to_string(layer) + ", " +
                          std::string(kind_name(kind)) + ") has " + std::to_string(pool.size()) +
                          " candidates but " + std::to_string(count) + " are required");
    for (std::size_t i = 0; i < count; ++i) {
      std::swap(pool[i], pool[i + static_cast<std::size_t>(rng.below(pool.size() - i))]);
      out.members.push_back({layer, kind, pool[i]});
    }
  }
  out.normalize();
  out.provenance = {{"op", "random-matched"}, {"seed", seed}, {"reference", reference.label}};
  return out;
}

// Neurons per (layer, kind) stratum.
inline std::map<std::pair<std::uint32_t, NeuronKind>, std::size_t> stratum_counts(
    const std::vector<NeuronId>& ids) {
  std::map<std::pair<std::uint32_t, NeuronKind>, std::size_t> out;
  for (const auto& n : ids) ++out[{n.layer, n.kind}];
  return out;
}

}  // namespace plnd
