#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "plnd/plnd.hpp"

using namespace plnd;

namespace {

LanguageInventory two_languages(double shared = 0.1) { return default_inventory(64, {"A", "B"}, shared, 3); }

std::multiset<Tokens> as_multiset(const std::vector<Tokens>& docs) { return {docs.begin(), docs.end()}; }

}  // namespace

TEST(SampleCorpus, NoSharedTokensStayInRange) {
  const auto inv = two_languages(0.0);
  const auto b = sample_corpus(inv, {20, 20}, 32, 1);
  for (std::size_t i = 0; i < 2; ++i)
    for (const auto& d : b.languages[i].docs)
      for (TokenId t : d) {
        EXPECT_GE(t, inv.languages[i].lo);
        EXPECT_LT(t, inv.languages[i].hi);
      }
}

TEST(SampleCorpus, SameSeedSameBundle) {
  const auto inv = two_languages();
  const auto a = sample_corpus(inv, {10, 5}, 16, 9), b = sample_corpus(inv, {10, 5}, 16, 9);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a.languages[i].docs, b.languages[i].docs);
  EXPECT_NE(a.languages[0].docs, sample_corpus(inv, {10, 5}, 16, 10).languages[0].docs);
}

TEST(SampleCorpus, CountsAndLengths) {
  const auto b = sample_corpus(two_languages(), {50, 50}, 64, 2);
  EXPECT_EQ(b.total_docs(), 100u);
  for (const auto& l : b.languages)
    for (const auto& d : l.docs) EXPECT_EQ(d.size(), 64u);
}

TEST(SampleCorpus, SharedFractionIsRespectedOnAverage) {
  const auto inv = two_languages(0.2);
  const auto b = sample_corpus(inv, {100, 0}, 50, 4);
  std::size_t shared = 0, total = 0;
  for (const auto& d : b.languages[0].docs)
    for (TokenId t : d) {
      total += 1;
      shared += t >= inv.shared_lo && t < inv.shared_hi;
    }
  EXPECT_NEAR(static_cast<double>(shared) / static_cast<double>(total), 0.2, 0.03);
}

TEST(SampleCorpus, Validation) {
  const auto inv = two_languages();
  EXPECT_THROW(sample_corpus(inv, {1}, 8, 1), ConfigError);
  EXPECT_THROW(sample_corpus(inv, {1, 1}, 0, 1), ConfigError);
  EXPECT_THROW(default_inventory(64, {"A", "B"}, 1.5, 1), ConfigError);
  EXPECT_THROW(default_inventory(64, {"A", "A"}, 0.1, 1), ConfigError);
}

TEST(ClassifyToken, LanguageSharedAndTotal) {
  const auto inv = two_languages();
  EXPECT_EQ(classify_token(inv.languages[0].lo, inv), "A");
  EXPECT_EQ(classify_token(inv.languages[1].hi - 1, inv), "B");
  EXPECT_EQ(classify_token(inv.shared_lo, inv), "non-word");
  EXPECT_EQ(classify_token(0, inv), "non-word");
  const TokenClassifier c(inv);
  for (TokenId t = 0; t < inv.vocab_size; ++t) EXPECT_LT(c.classify(t), c.n_categories());
  EXPECT_THROW(c.classify(static_cast<TokenId>(inv.vocab_size)), InputError);
}

TEST(Split, EightyTwenty) {
  const auto b = sample_corpus(two_languages(), {50, 50}, 8, 1);
  const auto s = split(b, 0.8, 2);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(s.train.languages[i].docs.size(), 40u);
    EXPECT_EQ(s.validation.languages[i].docs.size(), 10u);
  }
}

TEST(Split, PartitionsEachLanguage) {
  const auto b = sample_corpus(two_languages(), {31, 17}, 8, 5);
  const auto s = split(b, 0.7, 6);
  for (std::size_t i = 0; i < 2; ++i) {
    auto joined = s.train.languages[i].docs;
    joined.insert(joined.end(), s.validation.languages[i].docs.begin(), s.validation.languages[i].docs.end());
    EXPECT_EQ(as_multiset(joined), as_multiset(b.languages[i].docs));
  }
}

TEST(Split, SameSeedSameSplit) {
  const auto b = sample_corpus(two_languages(), {20, 20}, 8, 5);
  const auto x = split(b, 0.5, 7), y = split(b, 0.5, 7);
  EXPECT_EQ(x.train.languages[1].docs, y.train.languages[1].docs);
  EXPECT_THROW(split(b, 1.0, 7), ConfigError);
}

TEST(CorpusIo, TextRoundTripAndErrors) {
  const auto b = sample_corpus(two_languages(), {5, 5}, 8, 1);
  EXPECT_EQ(parse_corpus_text(corpus_text(b.languages[0].docs)), b.languages[0].docs);
  EXPECT_THROW(parse_corpus_text("1 2 x\n"), FormatError);
  EXPECT_THROW(parse_corpus_text("1 -2\n"), FormatError);
  const auto inv = two_languages();
  EXPECT_EQ(inventory_to_json(inventory_from_json(inventory_to_json(inv))).dump(), inventory_to_json(inv).dump());
}
