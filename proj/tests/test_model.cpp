#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <cstring>

#include "oracles.hpp"
#include "plnd/plnd.hpp"

using namespace plnd;

namespace {

ModelConfig small_config(std::size_t layers = 2, std::size_t d_model = 8) {
  return {layers, d_model, 2, 4, 4 * d_model, 16, 16};
}

Tokens random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  Tokens t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.below(vocab));
  return t;
}

bool traces_equal(const ForwardTrace& a, const ForwardTrace& b) {
  if (a.hidden.size() != b.hidden.size()) return false;
  for (std::size_t i = 0; i < a.hidden.size(); ++i)
    if (!a.hidden[i].bit_equal(b.hidden[i])) return false;
  return a.logits.bit_equal(b.logits);
}

}  // namespace

TEST(Matrix, KernelsMatchNaiveProducts) {
  Rng rng(5);
  Matrix a(3, 4), b(4, 5), c(5, 4);
  for (Matrix* m : {&a, &b, &c})
    for (double& x : m->flat()) x = rng.normal(0.0, 1.0);
  const Matrix ab = matmul(a, b);
  const auto ref = oracle::mul(oracle::to_mat(a), oracle::to_mat(b));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(ab(i, j), ref[i][j], 1e-12);
  const Matrix act = matmul_nt(a, c);  // a c^T
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * c(j, k);
      EXPECT_NEAR(act(i, j), s, 1e-12);
    }
  Matrix acc(4, 4);
  matmul_tn_acc(a, a, acc);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += a(k, i) * a(k, j);
      EXPECT_NEAR(acc(i, j), s, 1e-12);
    }
}

TEST(Rng, DeterministicAndSeedSensitive) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
  }
  EXPECT_NE(derive_seed(1, "init"), derive_seed(1, "batches"));
  EXPECT_NE(derive_seed(1, "init", 0), derive_seed(1, "init", 1));
  Rng r(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    EXPECT_GT(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(r.below(7), 7u);
  }
}

TEST(Parallel, ResultsIndependentOfThreadCount) {
  std::vector<double> one(100), four(100);
  parallel_for(100, 1, [&](std::size_t i) { one[i] = std::sin(static_cast<double>(i)); });
  parallel_for(100, 4, [&](std::size_t i) { four[i] = std::sin(static_cast<double>(i)); });
  EXPECT_EQ(0, std::memcmp(one.data(), four.data(), one.size() * sizeof(double)));
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw InputError("boom");
               }),
               InputError);
}

TEST(InitRandom, SameSeedSameBytes) {
  const auto c = small_config();
  EXPECT_EQ(serialize_weights(init_random(c, 7)), serialize_weights(init_random(c, 7)));
}

TEST(InitRandom, DifferentSeedsDiffer) {
  const auto c = small_config();
  EXPECT_FALSE(bit_identical(init_random(c, 7), init_random(c, 8)));
}

TEST(InitRandom, NarrowFfnIsConfigError) {
  ModelConfig c = small_config();
  c.d_inter = c.d_model - 1;
  EXPECT_THROW(init_random(c, 1), ConfigError);
}

TEST(InitRandom, RejectsNonPositiveDimensions) {
  for (std::size_t field = 0; field < 7; ++field) {
    ModelConfig c = small_config();
    std::size_t* f[] = {&c.n_layers, &c.d_model, &c.n_heads, &c.d_head, &c.d_inter, &c.vocab_size, &c.max_seq_len};
    *f[field] = 0;
    EXPECT_THROW(c.validate(), ConfigError) << "field " << field;
  }
}

TEST(Forward, EmptyMaskIsIdentity) {
  const auto w = init_random(small_config(), 1);
  const auto t = random_tokens(6, 16, 2);
  const DeactivationMask empty;
  EXPECT_TRUE(traces_equal(forward(w, t), forward(w, t, &empty)));
}

TEST(Forward, MaskingAnAlreadyZeroNeuronChangesNothing) {
  auto w = init_random(small_config(), 1);
  w.layers[1].w_up.zero_column(3);
  w.layers[0].wo.zero_row(2);
  const auto t = random_tokens(6, 16, 2);
  const DeactivationMask mask({{1, NeuronKind::Up, 3}, {0, NeuronKind::O, 2}});
  EXPECT_TRUE(traces_equal(forward(w, t), forward(w, t, &mask)));
}

TEST(Forward, ResidualIdentity) {
  const auto w = init_random({2, 8, 2, 4, 32, 16, 8}, 4);
  const auto t = random_tokens(5, 16, 3);
  const auto tr = forward(w, t);
  for (std::size_t i = 0; i < 2; ++i) {
    const Matrix step = tr.hidden[i + 1] - tr.hidden[i];
    const Matrix parts = tr.layers[i].attn_out + tr.layers[i].ffn_out;
    for (std::size_t j = 0; j < step.size(); ++j)
      EXPECT_NEAR(step.data()[j], parts.data()[j], 1e-12 * (1.0 + std::abs(parts.data()[j])));
  }
}

TEST(Forward, TokenAndLengthValidation) {
  const auto w = init_random(small_config(), 1);
  EXPECT_THROW(forward(w, Tokens{}), InputError);
  EXPECT_THROW(forward(w, Tokens{1, 99}), InputError);
  EXPECT_THROW(forward(w, random_tokens(17, 16, 1)), InputError);
  const DeactivationMask bad({{5, NeuronKind::Q, 0}});
  EXPECT_THROW(forward(w, Tokens{1, 2}, &bad), InputError);
}

TEST(Forward, AttentionRowsAreDistributions) {
  const auto w = init_random(small_config(), 3);
  const auto tr = forward(w, random_tokens(7, 16, 1));
  for (const auto& L : tr.layers)
    for (const auto& P : L.probs)
      for (std::size_t p = 0; p < P.rows(); ++p) {
        double s = 0.0;
        for (std::size_t r = 0; r < P.cols(); ++r) {
          if (r > p) {
            EXPECT_EQ(P(p, r), 0.0);
          }
          s += P(p, r);
        }
        EXPECT_NEAR(s, 1.0, 1e-14);
      }
}

TEST(Loss, UniformLogitsGiveLogVocab) {
  auto w = init_random(small_config(), 1);
  w.unembed = Matrix(w.config.d_model, w.config.vocab_size);
  EXPECT_DOUBLE_EQ(loss_ce(w, random_tokens(9, 16, 5)), std::log(16.0));
}

TEST(Loss, NonNegative) {
  for (std::uint64_t s = 0; s < 10; ++s)
    EXPECT_GE(loss_ce(init_random(small_config(), s), random_tokens(8, 16, s)), 0.0);
}

TEST(Loss, MatchesStraightforwardReimplementation) {
  const ModelConfig c{2, 16, 2, 8, 64, 32, 16};
  const auto w = init_random(c, 3);
  const auto t = random_tokens(16, 32, 77);
  EXPECT_NEAR(loss_ce(w, t), oracle::loss(w, t), 1e-10);
}

TEST(Loss, NeedsTwoTokens) {
  EXPECT_THROW(loss_ce(init_random(small_config(), 1), Tokens{3}), InputError);
}

TEST(WeightIo, RoundTripIsBitIdentical) {
  const auto w = init_random({3, 8, 2, 4, 40, 16, 12}, 21);
  const auto loaded = deserialize_weights(serialize_weights(w, "note"));
  EXPECT_TRUE(bit_identical(w, loaded.weights));
  EXPECT_EQ(loaded.note, "note");
  const auto path = std::filesystem::temp_directory_path() / "plnd_roundtrip.bin";
  save_weights(path, w);
  EXPECT_TRUE(bit_identical(w, load_weights(path)));
  std::filesystem::remove(path);
}

namespace {

// Rewrites a weight file's manifest line and payload.
std::string rewrite(const std::string& bytes, const std::function<void(nlohmann::json&)>& edit,
                    std::size_t drop_payload = 0) {
  const auto nl = bytes.find('\n');
  auto j = nlohmann::json::parse(bytes.substr(0, nl));
  edit(j);
  std::string payload = bytes.substr(nl + 1);
  payload.resize(payload.size() - drop_payload);
  return j.dump() + "\n" + payload;
}

}  // namespace

TEST(WeightIo, ShortPayloadIsFormatError) {
  // A 4x4 tensor whose payload holds 12 values.
  const ModelConfig c{1, 4, 1, 4, 4, 4, 4};
  const auto bytes = serialize_weights(init_random(c, 1));
  const auto broken = rewrite(bytes, [](nlohmann::json& j) {
    j["payload_bytes"] = j["payload_bytes"].get<std::size_t>() - 32;
  }, 32);
  EXPECT_THROW(deserialize_weights(broken), FormatError);
}

TEST(WeightIo, UnknownTensorNameIsListed) {
  const auto bytes = serialize_weights(init_random(small_config(), 1));
  const auto broken = rewrite(bytes, [](nlohmann::json& j) { j["tensors"][0]["name"] = "mystery"; });
  try {
    deserialize_weights(broken);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("mystery"), std::string::npos);
  }
}

TEST(WeightIo, ShapeMismatchAndGarbage) {
  const auto bytes = serialize_weights(init_random(small_config(), 1));
  EXPECT_THROW(deserialize_weights(rewrite(bytes, [](nlohmann::json& j) { j["tensors"][1]["shape"] = {3, 3}; })),
               FormatError);
  EXPECT_THROW(deserialize_weights("not json\n"), FormatError);
  EXPECT_THROW(deserialize_weights(""), FormatError);
}
