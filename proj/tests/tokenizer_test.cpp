// SPDX-License-Identifier: Apache-2.0
#include "molda/tokenizer.hpp"

#include <gtest/gtest.h>

#include "molda/rng.hpp"

namespace molda {
namespace {

const std::vector<std::string> kCorpus = {
    "CC(=O)Oc1ccccc1C(=O)O", "CN1C=NC2=C1C(=O)N(C(=O)N2C)C", "O=C(O)c1ccc(Cl)cc1Br", "c1ccc2ccccc2c1",
    "CC(C)(C)c1ccc(O)cc1",   "C1CC2CCC1CC2",                 "NC(Cc1c[nH]c2ccccc12)C(=O)O",
    "CCOC(=O)c1ccccc1",      "CCN(CC)CC",                    "OC(=O)CCC(=O)O"};

}  // namespace

TEST(WordPiece, AlphabetOnly) {
  const auto v = train_wordpiece({"CCO"}, 9, 1);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "C", "O", "##C",
                                                  "##O"}));
}

TEST(WordPiece, NeverExceedsMaximum) {
  for (std::size_t size : {40u, 60u, 80u, 4096u}) {
    const auto v = train_wordpiece(kCorpus, size, 1);
    EXPECT_LE(v.size(), size);
  }
  EXPECT_EQ(train_wordpiece(kCorpus, 60, 1).size(), 60u);
}

TEST(WordPiece, Deterministic) {
  EXPECT_EQ(train_wordpiece(kCorpus, 64, 2).to_text(), train_wordpiece(kCorpus, 64, 2).to_text());
}

TEST(WordPiece, MergesFrequentPairs) {
  const auto v = train_wordpiece({"CCCC", "CCCC", "CCCC"}, 10, 1);
  ASSERT_EQ(v.size(), 10u);
  EXPECT_TRUE(v.contains("##CC") || v.contains("CC"));
}

TEST(WordPiece, Errors) {
  try {
    train_wordpiece({"", ""}, 100);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyCorpus);
  }
  try {
    train_wordpiece({"CCO"}, 8);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VocabTooSmall);
  }
}

TEST(Encode, RoundTripWithoutUnknowns) {
  const auto v = train_wordpiece(kCorpus, 80, 1);
  Rng rng(3);
  const std::string alphabet = "CNOc1()=[]H2l";
  for (int t = 0; t < 200; ++t) {
    std::string s;
    const std::size_t len = rng.below(60);
    for (std::size_t i = 0; i < len; ++i) s += alphabet[rng.below(alphabet.size())];
    const auto ids = encode(s, v, 128);
    for (int id : ids) EXPECT_NE(id, kUnkId);
    if (ids.size() - 2 <= 126) EXPECT_EQ(decode(ids, v), s);
  }
}

TEST(Encode, EmptyString) {
  const auto v = train_wordpiece(kCorpus, 80, 1);
  EXPECT_EQ(encode("", v), (std::vector<int>{kClsId, kSepId}));
  const auto b = make_batch({encode("", v)}, 128);
  EXPECT_EQ(b.ids.size(), 128u);
  EXPECT_EQ(b.id(0, 0), kClsId);
  EXPECT_EQ(b.id(0, 1), kSepId);
  EXPECT_EQ(b.id(0, 2), kPadId);
}

TEST(Encode, UnknownCharacterBecomesUnk) {
  const auto v = train_wordpiece(kCorpus, 80, 1);
  const auto ids = encode("CC#CC", v);
  EXPECT_NE(std::find(ids.begin(), ids.end(), kUnkId), ids.end());
  EXPECT_EQ(decode(ids, v), "CCCC");
}

TEST(Encode, Truncation) {
  const auto v = train_wordpiece({"CO"}, 9, 1);
  const std::string s(300, 'C');
  const auto ids = encode(s, v, 16);
  EXPECT_EQ(ids.size(), 16u);
  EXPECT_EQ(ids.front(), kClsId);
  EXPECT_EQ(ids.back(), kSepId);
}

TEST(Batch, ShapeAndMask) {
  const auto v = train_wordpiece(kCorpus, 80, 1);
  const auto b = encode_batch(kCorpus, v, 128, 128);
  EXPECT_EQ(b.ids.size(), kCorpus.size() * 128);
  for (std::size_t r = 0; r < b.rows; ++r) {
    EXPECT_EQ(b.id(r, 0), kClsId);
    std::size_t ones = 0;
    for (std::size_t c = 0; c < b.width; ++c) ones += b.attends(r, c);
    EXPECT_EQ(ones, b.lengths[r]);
    for (std::size_t c = 0; c < b.width; ++c) EXPECT_LT(b.id(r, c), static_cast<int>(v.size()));
  }
  const auto tight = encode_batch(kCorpus, v, 128);
  EXPECT_EQ(tight.width, *std::max_element(tight.lengths.begin(), tight.lengths.end()));
}

TEST(Vocabulary, TextRoundTrip) {
  const auto v = train_wordpiece(kCorpus, 70, 1);
  EXPECT_EQ(Vocabulary::from_text(v.to_text()), v);
  EXPECT_EQ(Vocabulary::from_text(v.to_text()).hash(), v.hash());
}

}  // namespace molda
