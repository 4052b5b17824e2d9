#pragma once

// Synthetic multilingual corpora. Each language is a first-order Markov chain
// over its own disjoint token range; with probability `shared_fraction` a
// position instead emits a token from the common shared ("punctuation") range,
// which leaves the chain state unchanged.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "plnd/errors.hpp"
#include "plnd/model.hpp"
#include "plnd/rng.hpp"

namespace plnd {

struct SyntheticLanguageSpec {
  std::string label;
  TokenId lo = 0;
  TokenId hi = 0;  // exclusive
  std::uint64_t transition_seed = 0;
  double shared_fraction = 0.0;

  std::size_t width() const noexcept { return hi - lo; }
  bool contains(TokenId t) const noexcept { return t >= lo && t < hi; }
};

// The full vocabulary layout: language ranges plus one shared range. Token ids
// outside every range (e.g. specials) classify as non-word.
struct LanguageInventory {
  std::size_t vocab_size = 0;
  TokenId shared_lo = 0;
  TokenId shared_hi = 0;
  std::vector<SyntheticLanguageSpec> languages;

  void validate() const {
    if (languages.empty()) throw ConfigError("inventory declares no languages");
    if (shared_lo > shared_hi || shared_hi > vocab_size)
      throw ConfigError("shared range out of vocabulary");
    for (std::size_t i = 0; i < languages.size(); ++i) {
      const auto& a = languages[i];
      if (a.label.empty()) throw ConfigError("language label must be non-empty");
      if (a.hi > vocab_size || a.lo >= a.hi)
        throw ConfigError("language '" + a.label + "' range out of vocabulary");
      if (a.width() < 8) throw ConfigError("language '" + a.label + "' range narrower than 8");
      if (a.shared_fraction < 0.0 || a.shared_fraction > 0.2)
        throw ConfigError("language '" + a.label + "' shared fraction outside [0, 0.2]");
      if (a.shared_fraction > 0.0 && shared_lo == shared_hi)
        throw ConfigError("language '" + a.label + "' emits shared tokens but the shared range is empty");
      if (a.lo < shared_hi && shared_lo < a.hi)
        throw ConfigError("language '" + a.label + "' overlaps the shared range");
      for (std::size_t j = 0; j < i; ++j) {
        const auto& b = languages[j];
        if (a.label == b.label) throw ConfigError("duplicate language label '" + a.label + "'");
        if (a.lo < b.hi && b.lo < a.hi)
          throw ConfigError("languages '" + b.label + "' and '" + a.label + "' overlap");
      }
    }
  }

  std::size_t index_of(const std::string& label) const {
    for (std::size_t i = 0; i < languages.size(); ++i)
      if (languages[i].label == label) return i;
    throw InputError("unknown language '" + label + "'");
  }
};

// Default layout: 8 special ids, the languages split the middle evenly, and
// the last 8 ids are shared.
inline LanguageInventory default_inventory(std::size_t vocab_size,
                                           const std::vector<std::string>& labels,
                                           double shared_fraction, std::uint64_t seed) {
  constexpr std::size_t specials = 8, shared = 8;
  if (labels.empty()) throw ConfigError("no languages requested");
  if (vocab_size < specials + shared + 8 * labels.size())
    throw ConfigError("vocabulary too small for " + std::to_string(labels.size()) + " languages");
  LanguageInventory inv;
  inv.vocab_size = vocab_size;
  inv.shared_hi = static_cast<TokenId>(vocab_size);
  inv.shared_lo = static_cast<TokenId>(vocab_size - shared);
  const std::size_t width = (vocab_size - specials - shared) / labels.size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    SyntheticLanguageSpec s;
    s.label = labels[i];
    s.lo = static_cast<TokenId>(specials + i * width);
    s.hi = static_cast<TokenId>(specials + (i + 1) * width);
    s.transition_seed = derive_seed(seed, "transitions", i);
    s.shared_fraction = shared_fraction;
    inv.languages.push_back(std::move(s));
  }
  inv.validate();
  return inv;
}

// Maps token ids to a language index, or non_word() for shared/special ids.
class TokenClassifier {
 public:
  explicit TokenClassifier(LanguageInventory inv) : inv_(std::move(inv)) { inv_.validate(); }

  std::size_t non_word() const noexcept { return inv_.languages.size(); }
  std::size_t n_categories() const noexcept { return inv_.languages.size() + 1; }

  std::string label(std::size_t category) const {
    return category == non_word() ? std::string("non-word") : inv_.languages.at(category).label;
  }

  std::size_t classify(TokenId t) const {
    if (t >= inv_.vocab_size)
      throw InputError("token id " + std::to_string(t) + " outside vocabulary");
    for (std::size_t i = 0; i < inv_.languages.size(); ++i)
      if (inv_.languages[i].contains(t)) return i;
    return non_word();
  }

  const LanguageInventory& inventory() const noexcept { return inv_; }

 private:
  LanguageInventory inv_;
};

inline std::string classify_token(TokenId t, const LanguageInventory& inv) {
  TokenClassifier c(inv);
  return c.label(c.classify(t));
}

struct LanguageDocs {
  std::string label;
  std::vector<Tokens> docs;
};

struct CorpusBundle {
  std::vector<LanguageDocs> languages;
  std::string split = "all";
  std::uint64_t seed = 0;

  const LanguageDocs& at(const std::string& label) const {
    for (const auto& l : languages)
      if (l.label == label) return l;
    throw InputError("corpus has no language '" + label + "'");
  }
  std::size_t total_docs() const {
    std::size_t n = 0;
    for (const auto& l : languages) n += l.docs.size();
    return n;
  }
};

namespace detail {

// Sparse transition table: each state has a handful of successors with
// random weights, stored as cumulative probabilities.
struct MarkovChain {
  std::vector<std::vector<std::size_t>> next;
  std::vector<std::vector<double>> cumulative;

  MarkovChain(std::size_t states, std::uint64_t seed) : next(states), cumulative(states) {
    Rng rng(seed);
    const std::size_t branching = std::min<std::size_t>(4, states);
    std::vector<std::size_t> all(states);
    for (std::size_t s = 0; s < states; ++s) {
      for (std::size_t i = 0; i < states; ++i) all[i] = i;
      for (std::size_t i = 0; i < branching; ++i)
        std::swap(all[i], all[i + static_cast<std::size_t>(rng.below(states - i))]);
      double total = 0.0;
      std::vector<double> w(branching);
      for (double& x : w) total += (x = 0.1 + rng.uniform());
      double acc = 0.0;
      for (std::size_t i = 0; i < branching; ++i) {
        next[s].push_back(all[i]);
        acc += w[i] / total;
        cumulative[s].push_back(acc);
      }
      cumulative[s].back() = 1.0;
    }
  }

  std::size_t step(std::size_t state, Rng& rng) const {
    const double u = rng.uniform();
    const auto& c = cumulative[state];
    const auto it = std::lower_bound(c.begin(), c.end(), u);
    return next[state][static_cast<std::size_t>(it - c.begin())];
  }
};

}  // namespace detail

// `docs_per_lang[i]` documents of length `doc_len` for language i.
inline CorpusBundle sample_corpus(const LanguageInventory& inv,
                                  const std::vector<std::size_t>& docs_per_lang,
                                  std::size_t doc_len, std::uint64_t seed) {
  inv.validate();
  if (docs_per_lang.size() != inv.languages.size())
    throw ConfigError("docs_per_lang must list one count per language");
  if (doc_len == 0) throw ConfigError("doc_len must be positive");
  CorpusBundle bundle;
  bundle.seed = seed;
  const std::size_t shared_width = inv.shared_hi - inv.shared_lo;
  for (std::size_t li = 0; li < inv.languages.size(); ++li) {
    const auto& spec = inv.languages[li];
    detail::MarkovChain chain(spec.width(), spec.transition_seed);
    Rng rng(derive_seed(seed, "corpus/" + spec.label));
    LanguageDocs out{spec.label, {}};
    out.docs.reserve(docs_per_lang[li]);
    for (std::size_t d = 0; d < docs_per_lang[li]; ++d) {
      Tokens doc;
      doc.reserve(doc_len);
      std::size_t state = static_cast<std::size_t>(rng.below(spec.width()));
      bool started = false;
      for (std::size_t p = 0; p < doc_len; ++p) {
        if (spec.shared_fraction > 0.0 && rng.uniform() < spec.shared_fraction) {
          doc.push_back(static_cast<TokenId>(inv.shared_lo + rng.below(shared_width)));
          continue;
        }
        if (started) state = chain.step(state, rng);
        started = true;
        doc.push_back(static_cast<TokenId>(spec.lo + state));
      }
      out.docs.push_back(std::move(doc));
    }
    bundle.languages.push_back(std::move(out));
  }
  return bundle;
}

struct SplitBundles {
  CorpusBundle train;
  CorpusBundle validation;
};

// Per-language shuffle, then the first round(n * train_fraction) documents
// (clamped to leave both sides non-empty) go to training.
inline SplitBundles split(const CorpusBundle& bundle, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train_fraction must lie in (0, 1)");
  SplitBundles out;
  out.train.split = "train";
  out.validation.split = "validation";
  out.train.seed = out.validation.seed = bundle.seed;
  for (const auto& lang : bundle.languages) {
    const std::size_t n = lang.docs.size();
    if (n < 2) throw InputError("language '" + lang.label + "' has fewer than 2 documents");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, "split/" + lang.label));
    rng.shuffle(order);
    auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * train_fraction));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    LanguageDocs tr{lang.label, {}}, va{lang.label, {}};
    for (std::size_t i = 0; i < n; ++i)
      (i < n_train ? tr : va).docs.push_back(lang.docs[order[i]]);
    out.train.languages.push_back(std::move(tr));
    out.validation.languages.push_back(std::move(va));
  }
  return out;
}

}  // namespace plnd
