#pragma once

// File formats for importance maps, neuron sets, corpora and reports.

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "plnd/atlas.hpp"
#include "plnd/corpus.hpp"
#include "plnd/importance.hpp"
#include "plnd/weight_io.hpp"
#include "plnd/workflow.hpp"

namespace plnd {

using ojson = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";

// Run manifest embedded in every emitted artifact. Inputs are keyed by file
// name (not full path) so that identical runs in different directories agree.
inline ojson run_manifest(const std::string& command, const ojson& config,
                          const std::vector<std::filesystem::path>& inputs, std::uint64_t seed) {
  ojson hashes = ojson::object();
  for (const auto& p : inputs) hashes[p.filename().string()] = hash_bytes(read_file(p));
  return {{"command", command},
          {"config", config},
          {"input_hashes", hashes},
          {"tool_version", kToolVersion},
          {"seed", seed}};
}

// ---------------------------------------------------------------------------
// Importance maps: plain JSON arrays below 10^4 scores, otherwise a JSON
// manifest line followed by a little-endian double payload (weight-file
// convention) with per-array offsets.

inline constexpr std::size_t kImportanceJsonLimit = 10000;

inline std::string serialize_importance(const ImportanceMap& m, const std::string& model_hash_hex,
                                        const std::string& doc_hash, const ojson& manifest = {}) {
  std::size_t total = 0;
  for (const auto& L : m.layers)
    for (const auto& v : L.scores) total += v.size();
  const bool binary = total >= kImportanceJsonLimit;
  ojson j;
  j["format"] = "plnd-importance";
  j["model_hash"] = model_hash_hex;
  j["doc_hash"] = doc_hash;
  j["n_layers"] = m.layers.size();
  j["encoding"] = binary ? "binary" : "json";
  std::string payload;
  auto layers = ojson::array();
  for (const auto& L : m.layers) {
    ojson lj = ojson::object();
    for (NeuronKind k : kAllKinds) {
      const auto& v = L[k];
      if (binary) {
        lj[std::string(kind_name(k))] = {{"offset", payload.size()}, {"count", v.size()}};
        for (double x : v) detail::put_le_f64(payload, x);
      } else {
        lj[std::string(kind_name(k))] = v;
      }
    }
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  if (!manifest.is_null()) j["manifest"] = manifest;
  std::string out = binary ? j.dump() : j.dump(1);
  out.push_back('\n');
  return out + payload;
}

struct LoadedImportance {
  ImportanceMap map;
  std::string model_hash;
  std::string doc_hash;
};

inline LoadedImportance deserialize_importance(std::string_view bytes) {
  nlohmann::json j;
  std::string_view payload;
  try {
    // JSON encoding may span lines; the binary encoding's header is one line.
    const auto nl = bytes.find('\n');
    const bool maybe_binary = nl != std::string_view::npos && bytes.substr(0, nl).find("\"binary\"") != std::string_view::npos;
    if (maybe_binary) {
      j = nlohmann::json::parse(bytes.substr(0, nl));
      payload = bytes.substr(nl + 1);
    } else {
      j = nlohmann::json::parse(bytes);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("importance file is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != "plnd-importance") throw FormatError("not a plnd importance file");
  LoadedImportance out;
  out.model_hash = j.value("model_hash", "");
  out.doc_hash = j.value("doc_hash", "");
  const bool binary = j.value("encoding", "json") == "binary";
  for (const auto& lj : j.at("layers")) {
    ImportanceMap::Layer L;
    for (NeuronKind k : kAllKinds) {
      const auto& e = lj.at(std::string(kind_name(k)));
      if (binary) {
        const std::size_t off = e.at("offset").get<std::size_t>();
        const std::size_t cnt = e.at("count").get<std::size_t>();
        if (off > payload.size() || (payload.size() - off) / 8 < cnt)
          throw FormatError("importance payload truncated");
        std::vector<double> v(cnt);
        for (std::size_t i = 0; i < cnt; ++i) v[i] = detail::get_le_f64(payload.data() + off + 8 * i);
        L[k] = std::move(v);
      } else {
        L[k] = e.get<std::vector<double>>();
      }
    }
    out.map.layers.push_back(std::move(L));
  }
  if (out.map.layers.size() != j.at("n_layers").get<std::size_t>())
    throw FormatError("importance layer count does not match header");
  return out;
}

// ---------------------------------------------------------------------------
// Neuron sets

inline ojson neuron_set_to_json(const NeuronSet& s) {
  auto members = ojson::array();
  for (const auto& n : s.members) members.push_back({n.layer, std::string(kind_name(n.kind)), n.index});
  return {{"format", "plnd-neuron-set"},
          {"label", s.label},
          {"model_hash", s.model_hash},
          {"size", s.members.size()},
          {"provenance", s.provenance},
          {"members", members}};
}

inline NeuronSet neuron_set_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "plnd-neuron-set") throw FormatError("not a plnd neuron-set file");
  NeuronSet s;
  try {
    s.label = j.at("label").get<std::string>();
    s.model_hash = j.value("model_hash", "");
    s.provenance = ojson::parse(j.at("provenance").dump());
    for (const auto& m : j.at("members")) {
      NeuronId n;
      n.layer = m.at(0).get<std::uint32_t>();
      try {
        n.kind = parse_kind(m.at(1).get<std::string>());
      } catch (const InputError& e) {
        throw FormatError(std::string("bad neuron-set file: ") + e.what());
      }
      n.index = m.at(2).get<std::uint32_t>();
      s.members.push_back(n);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad neuron-set file: ") + e.what());
  }
  s.normalize();
  return s;
}

inline NeuronSet load_neuron_set(const std::filesystem::path& p) {
  try {
    return neuron_set_from_json(nlohmann::json::parse(read_file(p)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

// Overlap matrix: cell (row x, column y) is overlap(x, y) = |x ∩ y| / |y|.
inline std::string overlap_csv(const std::vector<NeuronSet>& sets) {
  std::ostringstream out;
  out << "set";
  for (const auto& s : sets) out << ',' << s.label;
  out << '\n';
  for (const auto& x : sets) {
    out << x.label;
    for (const auto& y : sets) {
      out << ',';
      if (y.empty()) {
        out << "nan";
      } else {
        std::ostringstream cell;
        cell.precision(17);
        cell << overlap(x, y).value();
        out << cell.str();
      }
    }
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Corpora: one document per line, whitespace-separated token ids.

inline std::string corpus_text(const std::vector<Tokens>& docs) {
  std::string out;
  for (const auto& d : docs) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (i) out.push_back(' ');
      out += std::to_string(d[i]);
    }
    out.push_back('\n');
  }
  return out;
}

inline std::vector<Tokens> parse_corpus_text(std::string_view text) {
  std::vector<Tokens> docs;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    Tokens d;
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      std::size_t used = 0;
      unsigned long v = 0;
      try {
        v = std::stoul(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || tok[0] == '-' || v > UINT32_MAX)
        throw FormatError("line " + std::to_string(lineno) + ": '" + tok + "' is not a token id");
      d.push_back(static_cast<TokenId>(v));
    }
    if (!d.empty()) docs.push_back(std::move(d));
  }
  return docs;
}

inline std::vector<Tokens> load_corpus_file(const std::filesystem::path& p) {
  return parse_corpus_text(read_file(p));
}

inline ojson inventory_to_json(const LanguageInventory& inv) {
  auto langs = ojson::array();
  for (const auto& l : inv.languages)
    langs.push_back({{"label", l.label},
                     {"lo", l.lo},
                     {"hi", l.hi},
                     {"transition_seed", l.transition_seed},
                     {"shared_fraction", l.shared_fraction}});
  return {{"vocab_size", inv.vocab_size}, {"shared", {inv.shared_lo, inv.shared_hi}}, {"languages", langs}};
}

inline LanguageInventory inventory_from_json(const nlohmann::json& j) {
  LanguageInventory inv;
  try {
    inv.vocab_size = j.at("vocab_size").get<std::size_t>();
    inv.shared_lo = j.at("shared").at(0).get<TokenId>();
    inv.shared_hi = j.at("shared").at(1).get<TokenId>();
    for (const auto& l : j.at("languages")) {
      SyntheticLanguageSpec s;
      s.label = l.at("label").get<std::string>();
      s.lo = l.at("lo").get<TokenId>();
      s.hi = l.at("hi").get<TokenId>();
      s.transition_seed = l.at("transition_seed").get<std::uint64_t>();
      s.shared_fraction = l.at("shared_fraction").get<double>();
      inv.languages.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad language inventory: ") + e.what());
  }
  inv.validate();
  return inv;
}

// A corpus directory: bundle.json plus <label>.<split>.txt files.
struct CorpusOnDisk {
  LanguageInventory inventory;
  CorpusBundle train;
  CorpusBundle validation;
  std::uint64_t seed = 0;
};

inline CorpusOnDisk load_bundle(const std::filesystem::path& manifest_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("'" + manifest_path.string() + "' is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != "plnd-corpus") throw FormatError("not a plnd corpus manifest");
  CorpusOnDisk out;
  out.inventory = inventory_from_json(j.at("inventory"));
  out.seed = j.value("seed", std::uint64_t{0});
  const auto dir = manifest_path.parent_path();
  for (const char* split : {"train", "validation"}) {
    CorpusBundle& b = std::string(split) == "train" ? out.train : out.validation;
    b.split = split;
    b.seed = out.seed;
    for (const auto& l : out.inventory.languages) {
      const auto file = j.at("files").at(split).at(l.label).get<std::string>();
      b.languages.push_back({l.label, load_corpus_file(dir / file)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline ojson eval_report_to_json(const EvalReport& r) {
  auto langs = ojson::array();
  for (const auto& l : r.languages)
    langs.push_back({{"label", l.label}, {"before", l.before}, {"after", l.after}, {"delta", l.delta}});
  return {{"pivot", r.pivot},
          {"languages", langs},
          {"delta_pivot", r.delta_pivot},
          {"delta_others", r.delta_others},
          {"delta", r.delta}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.pivot = j.at("pivot").get<std::string>();
  for (const auto& l : j.at("languages"))
    r.languages.push_back({l.at("label").get<std::string>(), l.at("before").get<double>(),
                           l.at("after").get<double>(), l.at("delta").get<double>()});
  r.delta_pivot = j.at("delta_pivot").get<double>();
  r.delta_others = j.at("delta_others").get<double>();
  r.delta = j.at("delta").get<double>();
  return r;
}

inline std::string fmt_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

inline std::string eval_csv_header() { return "config,language,before,after,delta_pivot,delta_others,delta\n"; }

inline std::string eval_csv_rows(const std::string& config, const EvalReport& r) {
  std::string out;
  for (const auto& l : r.languages)
    out += config + "," + l.label + "," + fmt_double(l.before) + "," + fmt_double(l.after) + "," +
           fmt_double(r.delta_pivot) + "," + fmt_double(r.delta_others) + "," + fmt_double(r.delta) + "\n";
  return out;
}

inline std::string probe_csv(const ProbeResult& p) {
  std::string out = "layer,language,fraction\n";
  for (std::size_t i = 0; i < p.fractions.size(); ++i)
    for (std::size_t c = 0; c < p.categories.size(); ++c)
      out += std::to_string(i) + "," + p.categories[c] + "," + fmt_double(p.fractions[i][c]) + "\n";
  return out;
}

inline std::string train_log_csv(const std::vector<double>& losses) {
  std::string out = "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out += std::to_string(i) + "," + fmt_double(losses[i]) + "\n";
  return out;
}

}  // namespace plnd
