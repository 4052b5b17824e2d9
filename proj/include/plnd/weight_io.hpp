#pragma once

// Weight file layout:
//   line 1: compact JSON manifest terminated by '\n'
//   rest:   payload of little-endian IEEE-754 doubles, row-major, at the byte
//           offsets listed in the manifest's tensor index.
//
// Manifest:
//   {"format":"plnd-weights","version":1,"config":{...},
//    "tensors":[{"name":..,"shape":[r,c],"offset":bytes},...],
//    "payload_bytes":N, "note":"..."}

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"
#include "plnd/errors.hpp"
#include "plnd/model.hpp"

namespace plnd {

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},   {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"d_head", c.d_head},       {"d_inter", c.d_inter},       {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_head = j.at("d_head").get<std::size_t>();
    c.d_inter = j.at("d_inter").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace detail {

inline void put_le_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_le_f64(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(static_cast<unsigned char>(p[i])) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace detail

// Writes to `path + ".tmp"` and renames, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open '" + tmp.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw InputError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::string serialize_weights(const TransformerWeights& w, const std::string& note = "") {
  nlohmann::ordered_json manifest;
  manifest["format"] = "plnd-weights";
  manifest["version"] = 1;
  manifest["config"] = config_to_json(w.config);
  auto tensors = nlohmann::ordered_json::array();
  std::string payload;
  for_each_tensor(w, [&](const std::string& name, const Matrix& m) {
    tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", payload.size()}});
    for (double v : m.flat()) detail::put_le_f64(payload, v);
  });
  manifest["tensors"] = std::move(tensors);
  manifest["payload_bytes"] = payload.size();
  manifest["note"] = note;
  std::string out = manifest.dump();
  out.push_back('\n');
  out += payload;
  return out;
}

struct LoadedWeights {
  TransformerWeights weights;
  std::string note;
};

namespace detail {
inline LoadedWeights weights_from_manifest(const nlohmann::json& manifest, std::string_view payload);
}

inline LoadedWeights deserialize_weights(std::string_view bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw FormatError("weight file has no manifest line");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (manifest.value("format", "") != "plnd-weights")
    throw FormatError("not a plnd weight file");
  try {
    return detail::weights_from_manifest(manifest, bytes.substr(nl + 1));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad weight manifest: ") + e.what());
  }
}

namespace detail {

inline LoadedWeights weights_from_manifest(const nlohmann::json& manifest, std::string_view payload) {
  if (manifest.contains("payload_bytes") &&
      manifest["payload_bytes"].get<std::size_t>() != payload.size())
    throw FormatError("payload holds " + std::to_string(payload.size()) + " bytes, manifest declares " +
                      manifest["payload_bytes"].dump());
  if (payload.size() % 8 != 0) throw FormatError("payload is not a whole number of doubles");

  LoadedWeights out;
  out.weights = zero_weights(config_from_json(manifest.at("config")));
  out.note = manifest.value("note", "");

  std::map<std::string, Matrix*> by_name;
  for_each_tensor(out.weights, [&](const std::string& name, Matrix& m) { by_name[name] = &m; });
  std::map<std::string, bool> seen;
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array())
    throw FormatError("manifest has no tensor index");
  for (const auto& t : manifest["tensors"]) {
    const std::string name = t.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("unknown tensor name '" + name + "'");
    if (seen[name]) throw FormatError("duplicate tensor '" + name + "'");
    seen[name] = true;
    Matrix& m = *it->second;
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2 || shape[0] != m.rows() || shape[1] != m.cols())
      throw FormatError("tensor '" + name + "' shape " + t.at("shape").dump() +
                        " does not match config (" + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()) + ")");
    const std::size_t offset = t.at("offset").get<std::size_t>();
    const std::size_t nbytes = m.size() * 8;
    if (offset > payload.size() || payload.size() - offset < nbytes)
      throw FormatError("tensor '" + name + "' declares " + std::to_string(m.size()) +
                        " values but the payload is truncated");
    for (std::size_t i = 0; i < m.size(); ++i)
      m.data()[i] = detail::get_le_f64(payload.data() + offset + 8 * i);
  }
  for (const auto& [name, _] : by_name)
    if (!seen.count(name)) throw FormatError("tensor '" + name + "' missing from manifest");
  if (!all_finite(out.weights)) throw FormatError("weight file contains non-finite values");
  return out;
}

}  // namespace detail

inline void save_weights(const std::filesystem::path& path, const TransformerWeights& w,
                         const std::string& note = "") {
  write_file_atomic(path, serialize_weights(w, note));
}

inline TransformerWeights load_weights(const std::filesystem::path& path) {
  return deserialize_weights(read_file(path)).weights;
}

}  // namespace plnd
