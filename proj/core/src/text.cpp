#include "vtlm/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "vtlm/common.hpp"

namespace vtlm::text {

std::vector<Sentence> split_sentences(const std::vector<TimedWord>& stream, double gap_threshold, int max_words) {
  std::vector<Sentence> out;
  if (stream.empty()) return out;
  if (max_words < 1) throw std::invalid_argument("split_sentences: max_words must be >= 1");

  std::string cur;
  int words = 0;
  double start = stream[0].start;
  double end = stream[0].end;

  auto flush = [&]() {
    if (words == 0) return;
    out.push_back({cur, start, end});
    cur.clear();
    words = 0;
  };

  for (size_t i = 0; i < stream.size(); ++i) {
    const auto& w = stream[i];
    if (words > 0 && w.start - end > gap_threshold) flush();
    if (words == 0) start = w.start;
    if (!cur.empty()) cur += ' ';
    cur += w.word;
    end = w.end;
    ++words;
    if (words >= max_words) flush();
  }
  flush();
  return out;
}

std::string normalize(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (unsigned char c : raw) {
    if (c < 0x80 && std::ispunct(c))
      out += ' ';
    else if (c < 0x80)
      out += static_cast<char>(std::tolower(c));
    else
      out += static_cast<char>(c);  // non-ASCII bytes pass through
  }
  return out;
}

namespace {

std::vector<std::string> whitespace_words(std::string_view s) {
  std::vector<std::string> words;
  size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) words.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return words;
}

}  // namespace

TextVocab TextVocab::from_entries(std::vector<std::string> entries) {
  TextVocab v;
  v.entries_ = std::move(entries);
  for (size_t i = 0; i < v.entries_.size(); ++i) {
    const auto& e = v.entries_[i];
    if (!v.lookup_.emplace(e, static_cast<int>(i)).second)
      throw std::invalid_argument("duplicate vocab entry: " + e);
    if (e == kUnk) v.unk_id_ = static_cast<int>(i);
  }
  if (v.unk_id_ < 0) throw std::invalid_argument("vocab is missing [UNK]");
  return v;
}

TextVocab TextVocab::build(const std::vector<Sentence>& corpus, size_t max_size, int min_freq) {
  std::set<std::string> chars;
  std::map<std::string, size_t> word_freq;
  for (const auto& s : corpus) {
    for (const auto& w : whitespace_words(normalize(s.text))) {
      ++word_freq[w];
      for (char c : w) chars.insert(std::string(1, c));
    }
  }

  std::vector<std::string> entries;
  entries.push_back(kUnk);
  for (const auto& c : chars) entries.push_back(c);
  for (const auto& c : chars) entries.push_back("##" + c);
  if (entries.size() > max_size)
    throw std::invalid_argument("build_vocab: max_size smaller than character inventory");

  // words by frequency desc, ties lexicographic
  std::vector<std::pair<std::string, size_t>> ranked(word_freq.begin(), word_freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::set<std::string> seen(entries.begin(), entries.end());
  for (const auto& [word, freq] : ranked) {
    if (entries.size() >= max_size) break;
    if (freq < static_cast<size_t>(min_freq)) continue;
    if (seen.count(word)) continue;
    entries.push_back(word);
    seen.insert(word);
  }
  return from_entries(std::move(entries));
}

int TextVocab::find(std::string_view piece) const {
  auto it = lookup_.find(std::string(piece));
  return it == lookup_.end() ? -1 : it->second;
}

void TextVocab::save(const std::string& path) const {
  std::ostringstream ss;
  for (const auto& e : entries_) ss << e << '\n';
  write_text_file(path, ss.str());
}

TextVocab TextVocab::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::vector<std::string> entries;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    entries.push_back(line);
  }
  return from_entries(std::move(entries));
}

std::vector<int> wordpiece_tokenize(std::string_view raw_text, const TextVocab& v) {
  std::vector<int> out;
  std::string norm = normalize(raw_text);
  for (const auto& word : whitespace_words(norm)) {
    std::vector<int> pieces;
    size_t start = 0;
    bool bad = false;
    while (start < word.size()) {
      size_t end = word.size();
      int match = -1;
      while (start < end) {
        std::string sub = word.substr(start, end - start);
        if (start > 0) sub = "##" + sub;
        match = v.find(sub);
        if (match >= 0) break;
        --end;
      }
      if (match < 0) {
        bad = true;
        break;
      }
      pieces.push_back(match);
      start = end;
    }
    if (bad)
      out.push_back(v.unk_id());
    else
      out.insert(out.end(), pieces.begin(), pieces.end());
  }
  return out;
}

std::string detokenize(std::span<const int> ids, const TextVocab& v) {
  std::string out;
  for (int id : ids) {
    const std::string& e = v.entry(id);
    if (e.size() > 2 && e.compare(0, 2, "##") == 0) {
      out += e.substr(2);
    } else {
      if (!out.empty()) out += ' ';
      out += e;
    }
  }
  return out;
}

}  // namespace vtlm::text
