#pragma once

// The trained bilingual acceptance model, produced through the CLI with its
// default recipe and cached under the build tree.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "plnd/plnd.hpp"

#ifndef PLND_CLI
#error "PLND_CLI must name the plnd executable"
#endif
#ifndef PLND_FIXTURE_DIR
#error "PLND_FIXTURE_DIR must name a writable directory"
#endif

namespace fixture {

namespace fs = std::filesystem;

inline const std::string kCli = PLND_CLI;
inline const fs::path kDir = PLND_FIXTURE_DIR;

inline int run(const std::string& args) { return std::system((kCli + " " + args).c_str()); }

inline int run_quiet(const std::string& args) {
  return std::system((kCli + " " + args + " >/dev/null 2>&1").c_str());
}

// Commands in pipeline order, with every recipe flag spelled out. The stamp
// file records them so a changed recipe forces regeneration.
inline std::vector<std::string> recipe(const fs::path& d) {
  const std::string c = (d / "corpus").string(), b = (d / "corpus" / "bundle.json").string();
  const std::string m = (d / "model.bin").string();
  return {
      "make-corpus --out " + c + " --seed 1 --vocab 256 --languages A,B --docs 1200,300 --doc-len 32 --train-fraction 0.8",
      "train --corpus " + b + " --out " + m + " --log " + (d / "train.csv").string() +
          " --seed 1 --layers 4 --d-model 64 --heads 4 --d-head 16 --d-inter 256 --steps 1200 --lr 1 --batch 16",
      "detect --model " + m + " --corpus " + b + " --lang A --q 0.95 --p 1 --out " + (d / "set_A.json").string(),
      "detect --model " + m + " --corpus " + b + " --lang B --q 0.95 --p 1 --out " + (d / "set_B.json").string(),
  };
}

inline void ensure() {
  const auto cmds = recipe(kDir);
  std::string stamp;
  for (const auto& c : cmds) stamp += c + "\n";
  const fs::path stamp_path = kDir / "recipe.txt";
  if (fs::exists(stamp_path) && plnd::read_file(stamp_path) == stamp) return;
  fs::create_directories(kDir);
  std::string timings;
  for (const auto& c : cmds) {
    const auto t0 = std::chrono::steady_clock::now();
    if (run(c) != 0) throw std::runtime_error("fixture command failed: " + c);
    timings += c.substr(0, c.find(' ')) + " " +
               std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + "\n";
  }
  plnd::write_file_atomic(kDir / "timings.txt", timings);
  plnd::write_file_atomic(stamp_path, stamp);
}

struct Acceptance {
  plnd::CorpusOnDisk corpus;
  plnd::TransformerWeights model;
  plnd::NeuronSet set_a, set_b;
  fs::path bundle, model_path, set_a_path, set_b_path;
};

inline const Acceptance& acceptance() {
  static const Acceptance a = [] {
    ensure();
    Acceptance x;
    x.bundle = kDir / "corpus" / "bundle.json";
    x.model_path = kDir / "model.bin";
    x.set_a_path = kDir / "set_A.json";
    x.set_b_path = kDir / "set_B.json";
    x.corpus = plnd::load_bundle(x.bundle);
    x.model = plnd::load_weights(x.model_path);
    x.set_a = plnd::load_neuron_set(x.set_a_path);
    x.set_b = plnd::load_neuron_set(x.set_b_path);
    return x;
  }();
  return a;
}

}  // namespace fixture
