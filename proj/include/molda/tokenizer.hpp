// SPDX-License-Identifier: Apache-2.0
#pragma once

// WordPiece vocabulary induction and greedy longest-match encoding. A SMILES
// string is treated as one word: the first piece is bare, later pieces carry
// the "##" continuation prefix.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "molda/error.hpp"
#include "molda/hash.hpp"

namespace molda {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kSpecialCount = 5;
inline constexpr std::string_view kContinuation = "##";

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// `tokens` excludes the five special tokens, which always occupy ids 0-4.
  explicit Vocabulary(const std::vector<std::string>& tokens) {
    for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) add(s);
    for (const auto& t : tokens) add(t);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool is_special(int id) const { return id >= 0 && id < kSpecialCount; }
  std::size_t longest_token() const { return longest_; }

  int id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? -1 : it->second;
  }
  bool contains(std::string_view token) const { return id(token) >= 0; }

  /// One token per line; line number is the id.
  std::string to_text() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot write " + path);
    out << to_text();
  }

  static Vocabulary from_text(const std::string& text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      lines.push_back(text.substr(start, end - start));
      start = end + 1;
    }
    static const std::vector<std::string> specials{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    if (lines.size() < specials.size() || !std::equal(specials.begin(), specials.end(), lines.begin()))
      fail(ErrorCode::Format, "vocabulary must start with the five special tokens");
    return Vocabulary(std::vector<std::string>(lines.begin() + kSpecialCount, lines.end()));
  }

  static Vocabulary load(const std::string& path) { return from_text(read_file(path)); }

  std::string hash() const { return hex64(fnv1a(to_text())); }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void add(const std::string& t) {
    if (t.empty()) fail(ErrorCode::Format, "empty token");
    if (ids_.count(t)) fail(ErrorCode::Format, "duplicate token " + t);
    ids_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(t);
    longest_ = std::max(longest_, t.size());
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::size_t longest_ = 0;
};

/// Starts from every corpus character in bare and "##" form, then repeatedly
/// adds the merge with the highest freq(pair) / (freq(left) * freq(right)),
/// breaking ties by the lexicographically smallest (left, right) pair.
/// `vocab_size` counts the special tokens.
inline Vocabulary train_wordpiece(const std::vector<std::string>& corpus, std::size_t vocab_size,
                                  std::uint64_t min_frequency = 2) {
  std::map<std::string, std::uint64_t> word_counts;
  for (const auto& w : corpus)
    if (!w.empty()) ++word_counts[w];
  if (word_counts.empty()) fail(ErrorCode::EmptyCorpus, "no non-empty training lines");

  std::set<char> alphabet;
  for (const auto& [w, _] : word_counts) alphabet.insert(w.begin(), w.end());

  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> ids;
  auto intern = [&](const std::string& t) {
    auto it = ids.find(t);
    if (it != ids.end()) return it->second;
    const int id = static_cast<int>(tokens.size());
    tokens.push_back(t);
    ids.emplace(t, id);
    return id;
  };
  for (char c : alphabet) intern(std::string(1, c));
  for (char c : alphabet) intern(std::string(kContinuation) + c);
  if (vocab_size < tokens.size() + kSpecialCount)
    fail(ErrorCode::VocabTooSmall, "vocabulary size " + std::to_string(vocab_size) + " cannot hold the " +
                                       std::to_string(tokens.size()) + "-token alphabet plus specials");
  std::size_t vocab_tokens = tokens.size();  // tokens that are part of the vocabulary

  struct Word {
    std::vector<int> pieces;
    std::uint64_t count;
  };
  std::vector<Word> words;
  for (const auto& [w, n] : word_counts) {
    Word word{{}, n};
    for (std::size_t i = 0; i < w.size(); ++i)
      word.pieces.push_back(ids.at(i == 0 ? std::string(1, w[i]) : std::string(kContinuation) + w[i]));
    words.push_back(std::move(word));
  }

  auto strip = [](const std::string& t) {
    return t.rfind(kContinuation, 0) == 0 ? t.substr(kContinuation.size()) : t;
  };

  while (vocab_tokens + kSpecialCount < vocab_size) {
    std::unordered_map<std::uint64_t, std::uint64_t> pair_freq;
    std::vector<std::uint64_t> token_freq(tokens.size(), 0);
    for (const auto& w : words) {
      for (std::size_t i = 0; i < w.pieces.size(); ++i) {
        token_freq[static_cast<std::size_t>(w.pieces[i])] += w.count;
        if (i + 1 < w.pieces.size())
          pair_freq[(static_cast<std::uint64_t>(w.pieces[i]) << 32) | static_cast<std::uint32_t>(w.pieces[i + 1])] +=
              w.count;
      }
    }
    bool found = false;
    std::uint64_t best_key = 0, best_pf = 0, best_den = 1;
    for (const auto& [key, pf] : pair_freq) {
      if (pf < min_frequency) continue;
      const auto a = static_cast<std::size_t>(key >> 32);
      const auto b = static_cast<std::size_t>(key & 0xffffffffU);
      const std::uint64_t den = token_freq[a] * token_freq[b];
      bool better = false;
      if (!found) {
        better = true;
      } else {
        const unsigned __int128 lhs = static_cast<unsigned __int128>(pf) * best_den;
        const unsigned __int128 rhs = static_cast<unsigned __int128>(best_pf) * den;
        if (lhs > rhs) {
          better = true;
        } else if (lhs == rhs) {
          const auto ba = static_cast<std::size_t>(best_key >> 32);
          const auto bb = static_cast<std::size_t>(best_key & 0xffffffffU);
          better = std::tie(tokens[a], tokens[b]) < std::tie(tokens[ba], tokens[bb]);
        }
      }
      if (better) {
        found = true;
        best_key = key;
        best_pf = pf;
        best_den = den;
      }
    }
    if (!found) break;
    const int left = static_cast<int>(best_key >> 32);
    const int right = static_cast<int>(best_key & 0xffffffffU);
    const std::string merged = tokens[static_cast<std::size_t>(left)] + strip(tokens[static_cast<std::size_t>(right)]);
    const bool is_new = !ids.count(merged);
    const int merged_id = intern(merged);
    if (is_new) ++vocab_tokens;
    for (auto& w : words) {
      std::vector<int> next;
      next.reserve(w.pieces.size());
      for (std::size_t i = 0; i < w.pieces.size(); ++i) {
        if (i + 1 < w.pieces.size() && w.pieces[i] == left && w.pieces[i + 1] == right) {
          next.push_back(merged_id);
          ++i;
        } else {
          next.push_back(w.pieces[i]);
        }
      }
      w.pieces = std::move(next);
    }
  }
  return Vocabulary(tokens);
}

/// Greedy longest-match-first segmentation wrapped as [CLS] ... [SEP].
/// Interior tokens are truncated to max_len - 2. A character with no
/// matching piece becomes one [UNK].
inline std::vector<int> encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len = 128) {
  if (max_len < 2) fail(ErrorCode::Config, "max_len must be at least 2");
  std::vector<int> out{kClsId};
  std::size_t start = 0;
  std::string candidate;
  while (start < text.size() && out.size() < max_len - 1) {
    const std::size_t longest = std::min(text.size() - start, vocab.longest_token());
    int found = -1;
    std::size_t taken = 0;
    for (std::size_t len = longest; len >= 1; --len) {
      candidate.assign(start > 0 ? kContinuation : std::string_view{});
      candidate.append(text.substr(start, len));
      const int id = vocab.id(candidate);
      if (id >= kSpecialCount) {
        found = id;
        taken = len;
        break;
      }
    }
    if (found < 0) {
      out.push_back(kUnkId);
      start += 1;
    } else {
      out.push_back(found);
      start += taken;
    }
  }
  out.push_back(kSepId);
  return out;
}

/// Drops special tokens and continuation prefixes.
inline std::string decode(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (vocab.is_special(id)) continue;
    const std::string& t = vocab.token(id);
    out += t.rfind(kContinuation, 0) == 0 ? t.substr(kContinuation.size()) : t;
  }
  return out;
}

struct TokenizedBatch {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<int> ids;             // rows x width, row-major
  std::vector<int> attention_mask;  // rows x width
  std::vector<std::size_t> lengths;

  int id(std::size_t r, std::size_t c) const { return ids[r * width + c]; }
  int& id(std::size_t r, std::size_t c) { return ids[r * width + c]; }
  bool attends(std::size_t r, std::size_t c) const { return attention_mask[r * width + c] != 0; }
};

/// Pads encoded rows to a common width; width 0 means the longest row.
inline TokenizedBatch make_batch(const std::vector<std::vector<int>>& rows, std::size_t width = 0) {
  std::size_t longest = 0;
  for (const auto& r : rows) longest = std::max(longest, r.size());
  if (width == 0) width = longest;
  if (width < longest) fail(ErrorCode::ShapeMismatch, "row longer than batch width");
  TokenizedBatch b;
  b.rows = rows.size();
  b.width = width;
  b.ids.assign(b.rows * width, kPadId);
  b.attention_mask.assign(b.rows * width, 0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    b.lengths.push_back(rows[r].size());
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      b.ids[r * width + c] = rows[r][c];
      b.attention_mask[r * width + c] = 1;
    }
  }
  return b;
}

inline TokenizedBatch encode_batch(const std::vector<std::string>& texts, const Vocabulary& vocab,
                                   std::size_t max_len = 128, std::size_t width = 0) {
  std::vector<std::vector<int>> rows;
  rows.reserve(texts.size());
  for (const auto& t : texts) rows.push_back(encode(t, vocab, max_len));
  return make_batch(rows, width);
}

}  // namespace molda
