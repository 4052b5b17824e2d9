#include <gtest/gtest.h>

#include "fixture.hpp"
#include "plnd/plnd.hpp"

using namespace plnd;

namespace {

Tokens random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  Tokens t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.below(vocab));
  return t;
}

const ModelConfig kSmall{2, 16, 2, 8, 32, 32, 16};

std::vector<Tokens> batch_of(std::size_t n, std::size_t len, std::uint64_t seed) {
  std::vector<Tokens> b;
  for (std::size_t i = 0; i < n; ++i) b.push_back(random_tokens(len, 32, seed + i));
  return b;
}

// Does every coordinate outside the mask's rows/columns match bit for bit?
bool outside_mask_identical(const TransformerWeights& before, const TransformerWeights& after,
                            const DeactivationMask& mask) {
  TransformerWeights a = before, b = after;
  for (const auto& n : mask.ids()) {
    zero_neuron(a, n);
    zero_neuron(b, n);
  }
  return bit_identical(a, b);
}

}  // namespace

TEST(Grads, DeadNeuronHasZeroDirectionalDerivative) {
  auto w = init_random(kSmall, 1);
  w.layers[0].w_down.zero_row(4);
  w.layers[0].w_gate.zero_column(4);
  const auto g = grads(w, batch_of(3, 8, 1));
  for (std::size_t r = 0; r < kSmall.d_model; ++r) EXPECT_EQ(g.layers[0].w_up(r, 4), 0.0);
}

TEST(Grads, MatchCentralDifferences) {
  const auto w = init_random(kSmall, 2);
  const auto r = grad_check(w, batch_of(4, 12, 2), 200, 1e-5, 2);
  EXPECT_TRUE(r.passed) << "max rel error " << r.max_rel_error;
  EXPECT_EQ(r.entries.size(), 200u);
}

TEST(Grads, BitIdenticalAcrossCallsAndThreads) {
  const auto w = init_random(kSmall, 3);
  const auto b = batch_of(5, 9, 3);
  EXPECT_TRUE(bit_identical(grads(w, b), grads(w, b)));
  EXPECT_TRUE(bit_identical(grads(w, b, 1), grads(w, b, 4)));
  EXPECT_THROW(grads(w, std::vector<Tokens>{Tokens{1}}), InputError);
}

TEST(GradCheck, ZeroToleranceFailsAndSingleSample) {
  const auto w = init_random(kSmall, 4);
  const auto b = batch_of(2, 8, 4);
  EXPECT_FALSE(grad_check(w, b, 20, 0.0).passed);
  EXPECT_EQ(grad_check(w, b, 1, 1e-5).entries.size(), 1u);
  EXPECT_THROW(grad_check(w, b, 0, 1e-5), InputError);
}

TEST(Train, ZeroLearningRateKeepsWeights) {
  const auto w = init_random(kSmall, 5);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.steps = 3;
  EXPECT_TRUE(bit_identical(train(w, batch_of(6, 8, 5), cfg).weights, w));
}

TEST(Train, EmptyMaskKeepsWeights) {
  const auto w = init_random(kSmall, 6);
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.gradient_mask = DeactivationMask{};
  EXPECT_TRUE(bit_identical(train(w, batch_of(6, 8, 6), cfg).weights, w));
}

TEST(Train, MaskedUpdateTouchesOnlyMaskedNeurons) {
  const auto w = init_random(kSmall, 7);
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.learning_rate = 0.5;
  const DeactivationMask mask({{0, NeuronKind::Q, 3}, {1, NeuronKind::Down, 9}, {1, NeuronKind::O, 0}});
  cfg.gradient_mask = mask;
  const auto out = train(w, batch_of(6, 8, 7), cfg).weights;
  EXPECT_TRUE(outside_mask_identical(w, out, mask));
  EXPECT_FALSE(bit_identical(w, out));
}

TEST(Train, DeterministicAndLogged) {
  const auto w = init_random(kSmall, 8);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 3;
  cfg.seed = 11;
  const auto corpus = batch_of(7, 8, 8);
  const auto a = train(w, corpus, cfg), b = train(w, corpus, cfg);
  EXPECT_TRUE(bit_identical(a.weights, b.weights));
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(a.losses.size(), 5u);
  cfg.threads = 3;
  EXPECT_TRUE(bit_identical(a.weights, train(w, corpus, cfg).weights));
}

TEST(Train, SmallStepDoesNotIncreaseBatchLoss) {
  const auto w = init_random(kSmall, 9);
  const auto batch = batch_of(4, 10, 9);
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = batch.size();
  cfg.learning_rate = 1e-3;
  // A single pass over the whole corpus is one full batch in some order; the
  // mean loss does not depend on that order.
  const auto out = train(w, batch, cfg).weights;
  EXPECT_LE(batch_loss(out, batch), batch_loss(w, batch));
}

TEST(Train, DivergenceReportsStep) {
  const auto w = init_random(kSmall, 10);
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.learning_rate = 1e12;
  try {
    train(w, batch_of(4, 8, 10), cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_GT(e.step(), 0u);
    EXPECT_LT(e.step(), 50u);
  }
}

TEST(Train, ConfigValidation) {
  const auto w = init_random(kSmall, 11);
  TrainConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(train(w, batch_of(2, 8, 1), cfg), ConfigError);
  cfg.steps = 1;
  cfg.learning_rate = -1.0;
  EXPECT_THROW(train(w, batch_of(2, 8, 1), cfg), ConfigError);
  cfg.learning_rate = 0.1;
  EXPECT_THROW(train(w, std::vector<Tokens>{}, cfg), InputError);
  cfg.gradient_mask = DeactivationMask({{9, NeuronKind::Q, 0}});
  EXPECT_THROW(train(w, batch_of(2, 8, 1), cfg), InputError);
}

// ---------------------------------------------------------------------------
// On the trained bilingual model

TEST(AcceptanceModel, LanguageAFinetuneIsIsolatedAndHelps) {
  const auto& a = fixture::acceptance();
  ASSERT_FALSE(a.set_a.empty());
  TrainConfig cfg;
  cfg.steps = 100;
  cfg.learning_rate = 0.5;
  cfg.batch_size = 8;
  cfg.gradient_mask = a.set_a.mask();
  const auto out = train(a.model, a.corpus.train.at("A").docs, cfg).weights;
  EXPECT_TRUE(outside_mask_identical(a.model, out, a.set_a.mask()));
  const auto& val = a.corpus.validation.at("A").docs;
  EXPECT_LT(perplexity(out, val), perplexity(a.model, val));
}
