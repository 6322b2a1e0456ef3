#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace vtlm::text {

struct TimedWord {
  std::string word;
  double start = 0.0;
  double end = 0.0;
};

struct Sentence {
  std::string text;
  double start = 0.0;
  double end = 0.0;
};

// Rule-based sentence breaker: boundary on inter-word gap > gap_threshold
// or when the sentence reaches max_words.
std::vector<Sentence> split_sentences(const std::vector<TimedWord>& stream, double gap_threshold = 1.5,
                                      int max_words = 32);

// Subword vocabulary. Entries are initial pieces or "##"-prefixed
// continuations; contains [UNK] exactly once. Indices are dense from 0 in
// entry order. build() always includes every seen character both as an
// initial piece and as a "##" continuation, so tokenization only falls back
// to [UNK] on characters never seen at build time.
class TextVocab {
 public:
  static constexpr const char* kUnk = "[UNK]";

  TextVocab() = default;
  static TextVocab from_entries(std::vector<std::string> entries);
  static TextVocab build(const std::vector<Sentence>& corpus, size_t max_size = 4096, int min_freq = 1);

  size_t size() const { return entries_.size(); }
  int unk_id() const { return unk_id_; }
  int find(std::string_view piece) const;
  const std::string& entry(int id) const { return entries_.at(static_cast<size_t>(id)); }
  const std::vector<std::string>& entries() const { return entries_; }

  void save(const std::string& path) const;
  static TextVocab load(const std::string& path);

 private:
  std::vector<std::string> entries_;
  std::unordered_map<std::string, int> lookup_;
  int unk_id_ = -1;
};

// Lowercases and maps ASCII punctuation to spaces. Applied before
// tokenization and vocabulary building.
std::string normalize(std::string_view raw);

// Greedy longest-match per whitespace word over the normalized text.
// A word with no match at some position becomes a single [UNK].
std::vector<int> wordpiece_tokenize(std::string_view raw_text, const TextVocab& v);

// Inverse of tokenization for [UNK]-free output: strip "##", join words.
std::string detokenize(std::span<const int> ids, const TextVocab& v);

}  // namespace vtlm::text
