#include <gtest/gtest.h>

#include "oracles.hpp"
#include "plnd/plnd.hpp"

using namespace plnd;

namespace {

Tokens random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  Tokens t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.below(vocab));
  return t;
}

ModelConfig sweep_config(std::size_t d_inter) { return {2, 16, 2, 8, d_inter, 32, 16}; }

}  // namespace

TEST(ImpOracleSub, ZeroNeuronScoresZero) {
  auto w = init_random(sweep_config(32), 2);
  w.layers[0].w_up.zero_column(4);
  w.layers[1].wv.zero_column(1);
  const auto t = random_tokens(6, 32, 1);
  EXPECT_EQ(imp_oracle_sub(w, t, {0, NeuronKind::Up, 4}), 0.0);
  EXPECT_EQ(imp_oracle_sub(w, t, {1, NeuronKind::V, 1}), 0.0);
  EXPECT_EQ(imp_oracle_layer(w, t, {0, NeuronKind::Up, 4}), 0.0);
}

TEST(ImpOracleSub, RankOneClosedFormExample) {
  // One position, one intermediate unit with activation 3, W_down = [[2, 0]].
  Matrix act(1, 1), proj(1, 2);
  act(0, 0) = 3.0;
  proj(0, 0) = 2.0;
  EXPECT_EQ(masked_product_delta(act, proj, 0), 6.0);
  EXPECT_EQ(rank_one_scores(act, proj)[0], 6.0);
}

TEST(ImpOracleSub, MatchesParallelUpNeuron5) {
  const auto w = init_random(sweep_config(32), 11);
  const auto t = random_tokens(10, 32, 11);
  const double seq = imp_oracle_sub(w, t, {0, NeuronKind::Up, 5});
  EXPECT_LE(oracle::rel_diff(seq, imp_ffn_parallel(w, t, 0)[5]), 1e-9);
}

TEST(ImpOracleLayer, FfnKindsEqualSubOracle) {
  const auto w = init_random(sweep_config(32), 3);
  const auto tr = forward(w, random_tokens(8, 32, 3));
  for (NeuronKind k : {NeuronKind::Gate, NeuronKind::Up, NeuronKind::Down})
    for (std::uint32_t j : {0u, 7u, 15u}) {
      const NeuronId n{1, k, j};
      // The residual cancels up to rounding.
      EXPECT_LE(oracle::rel_diff(imp_oracle_layer(w, tr, n), imp_oracle_sub(w, tr, n)), 1e-9);
    }
}

TEST(ImpOracleLayer, QueryNeuronIsComputed) {
  const auto w = init_random({1, 16, 2, 8, 32, 32, 16}, 4);
  const double v = imp_oracle_layer(w, random_tokens(8, 32, 4), {0, NeuronKind::Q, 3});
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(v, 0.0);
}

TEST(ImpFfnParallel, ZeroActivationGivesZeroVector) {
  auto w = init_random(sweep_config(32), 1);
  w.layers[1].w_up = Matrix(16, 32);
  for (double s : imp_ffn_parallel(w, random_tokens(5, 32, 1), 1)) EXPECT_EQ(s, 0.0);
}

TEST(ImpFfnParallel, MatchesOracleLoop) {
  for (std::size_t d_inter : {std::size_t{8}, std::size_t{32}, std::size_t{128}}) {
    const ModelConfig c = d_inter == 8 ? ModelConfig{2, 8, 2, 4, 8, 32, 16} : sweep_config(d_inter);
    const auto w = init_random(c, d_inter);
    const auto t = random_tokens(9, 32, d_inter);
    const auto tr = forward(w, t);
    for (std::size_t layer = 0; layer < 2; ++layer) {
      const auto par = imp_ffn_parallel(w, tr, layer);
      ASSERT_EQ(par.size(), d_inter);
      for (NeuronKind kind : {NeuronKind::Gate, NeuronKind::Up, NeuronKind::Down})
        for (std::size_t k = 0; k < d_inter; ++k) {
          const NeuronId n{static_cast<std::uint32_t>(layer), kind, static_cast<std::uint32_t>(k)};
          EXPECT_LE(oracle::rel_diff(par[k], imp_oracle_sub(w, tr, n)), 1e-9) << kind_name(kind) << " " << k;
        }
    }
  }
}

TEST(ImpFfnParallel, DoublingDownProjectionDoublesScores) {
  auto w = init_random(sweep_config(32), 6);
  const auto t = random_tokens(7, 32, 6);
  const auto base = imp_ffn_parallel(w, t, 0);
  for (double& x : w.layers[0].w_down.flat()) x *= 2.0;
  const auto doubled = imp_ffn_parallel(w, t, 0);
  for (std::size_t k = 0; k < base.size(); ++k) EXPECT_EQ(doubled[k], 2.0 * base[k]);
}

TEST(ImpVParallel, ZeroColumnScoresZero) {
  auto w = init_random(sweep_config(32), 8);
  w.layers[0].wv.zero_column(6);
  EXPECT_EQ(imp_v_parallel(w, random_tokens(6, 32, 8), 0)[6], 0.0);
}

TEST(ImpVParallel, MatchesOracleLoop) {
  const auto w = init_random(sweep_config(32), 9);
  const auto tr = forward(w, random_tokens(11, 32, 9));
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const auto par = imp_v_parallel(w, tr, layer);
    ASSERT_EQ(par.size(), w.config.d_mid());
    for (NeuronKind kind : {NeuronKind::V, NeuronKind::O})
      for (std::size_t k = 0; k < par.size(); ++k) {
        const NeuronId n{static_cast<std::uint32_t>(layer), kind, static_cast<std::uint32_t>(k)};
        EXPECT_LE(oracle::rel_diff(par[k], imp_oracle_sub(w, tr, n)), 1e-9);
      }
  }
}

TEST(ImpVParallel, TriplingOutputProjectionTriplesScores) {
  auto w = init_random(sweep_config(32), 10);
  const auto t = random_tokens(7, 32, 10);
  const auto base = imp_v_parallel(w, t, 1);
  for (double& x : w.layers[1].wo.flat()) x *= 3.0;
  const auto tripled = imp_v_parallel(w, t, 1);
  for (std::size_t k = 0; k < base.size(); ++k) EXPECT_DOUBLE_EQ(tripled[k], 3.0 * base[k]);
}

TEST(ImpQkParallel, ZeroQueryColumnScoresZero) {
  auto w = init_random(sweep_config(32), 12);
  w.layers[0].wq.zero_column(2);
  const auto s = imp_qk_parallel(w, random_tokens(8, 32, 12), 0);
  EXPECT_EQ(s.q[2], 0.0);
  EXPECT_EQ(s.k[2], 0.0);
}

TEST(ImpQkParallel, MatchesExplicitPerColumnLoop) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto w = init_random({2, 16, 4, 4, 32, 32, 16}, seed);
    const auto tr = forward(w, random_tokens(10, 32, seed));
    for (std::size_t layer = 0; layer < 2; ++layer) {
      const auto s = imp_qk_parallel(w, tr, layer);
      const auto& L = tr.layers[layer];
      const auto q_loop = oracle::qk_loop(L.q, L.k, 4, 4, false);
      const auto k_loop = oracle::qk_loop(L.q, L.k, 4, 4, true);
      for (std::size_t j = 0; j < q_loop.size(); ++j) {
        EXPECT_LE(oracle::rel_diff(s.q[j], q_loop[j]), 1e-9);
        EXPECT_LE(oracle::rel_diff(s.k[j], k_loop[j]), 1e-9);
      }
    }
  }
}

TEST(ImpQkParallel, SinglePositionScoresZero) {
  const auto w = init_random(sweep_config(32), 13);
  const auto s = imp_qk_parallel(w, Tokens{5}, 1);
  for (double v : s.q) EXPECT_EQ(v, 0.0);
  for (double v : s.k) EXPECT_EQ(v, 0.0);
}

TEST(ImpAll, ZeroFfnWeightsGiveZeroFfnScores) {
  auto w = init_random(sweep_config(32), 14);
  for (auto& L : w.layers) {
    L.w_gate = Matrix(16, 32);
    L.w_up = Matrix(16, 32);
    L.w_down = Matrix(32, 16);
  }
  const auto m = imp_all(w, random_tokens(6, 32, 14));
  for (const auto& L : m.layers)
    for (NeuronKind k : {NeuronKind::Gate, NeuronKind::Up, NeuronKind::Down})
      for (double v : L[k]) EXPECT_EQ(v, 0.0);
}

TEST(ImpAll, BitReproducible) {
  const auto w = init_random(sweep_config(32), 15);
  const auto t = random_tokens(9, 32, 15);
  const auto a = imp_all(w, t), b = imp_all(w, t);
  EXPECT_EQ(serialize_importance(a, "", ""), serialize_importance(b, "", ""));
}

TEST(ImpAll, SpotChecksAgainstOracles) {
  const auto w = init_random(sweep_config(64), 16);
  const auto t = random_tokens(12, 32, 16);
  const auto tr = forward(w, t);
  const auto m = imp_all(w, tr);
  Rng rng(16);
  int checked = 0;
  while (checked < 50) {
    const NeuronKind kind = kAllKinds[rng.below(kAllKinds.size())];
    const NeuronId n{static_cast<std::uint32_t>(rng.below(2)), kind,
                     static_cast<std::uint32_t>(rng.below(kind_dim(w.config, kind)))};
    double ref = 0.0;
    if (kind == NeuronKind::Q || kind == NeuronKind::K) {
      const auto& L = tr.layers[n.layer];
      ref = oracle::qk_loop(L.q, L.k, 2, 8, kind == NeuronKind::K)[n.index];
    } else {
      ref = imp_oracle_sub(w, tr, n);
    }
    EXPECT_LE(oracle::rel_diff(m.at(n), ref), 1e-9) << kind_name(kind);
    ++checked;
  }
}

TEST(ImportanceIo, JsonAndBinaryRoundTrip) {
  for (std::size_t d_inter : {std::size_t{32}, std::size_t{2048}}) {
    const auto w = init_random({2, 16, 2, 8, d_inter, 32, 8}, 3);
    const auto m = imp_all(w, random_tokens(6, 32, 3));
    const auto bytes = serialize_importance(m, "abc", "def");
    const auto back = deserialize_importance(bytes);
    EXPECT_EQ(back.model_hash, "abc");
    EXPECT_EQ(serialize_importance(back.map, "abc", "def"), bytes);
  }
}

TEST(ImportanceErrors, BadLayerOrEmptyDoc) {
  const auto w = init_random(sweep_config(32), 1);
  EXPECT_THROW(imp_ffn_parallel(w, Tokens{1, 2}, 2), InputError);
  EXPECT_THROW(imp_all(w, Tokens{}), InputError);
  EXPECT_THROW(imp_oracle_sub(w, Tokens{1, 2}, {0, NeuronKind::Up, 32}), InputError);
}
