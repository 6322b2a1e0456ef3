#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vtlm/common.hpp"
#include "vtlm/text.hpp"

namespace vtlm::corpus {

// Unified id space: 5 specials, then text subwords, then visual words.
struct JointVocab {
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kSep = 2;
  static constexpr int kMask = 3;
  static constexpr int kGlue = 4;  // the text/video joiner token [>]
  static constexpr int kSpecialCount = 5;

  text::TextVocab text;
  uint32_t video_count = 0;

  int text_begin() const { return kSpecialCount; }
  int text_end() const { return kSpecialCount + static_cast<int>(text.size()); }
  int video_begin() const { return text_end(); }
  int video_end() const { return text_end() + static_cast<int>(video_count); }
  int size() const { return video_end(); }

  int text_id(int text_index) const { return text_begin() + text_index; }
  int video_id(uint32_t token) const { return video_begin() + static_cast<int>(token); }
  uint32_t video_token(int id) const { return static_cast<uint32_t>(id - video_begin()); }

  bool is_special(int id) const { return id >= 0 && id < kSpecialCount; }
  bool is_text(int id) const { return id >= text_begin() && id < text_end(); }
  bool is_video(int id) const { return id >= video_begin() && id < video_end(); }

  std::string token_string(int id) const;
};

enum class Regime { text_only, video_only, video_text };

const char* regime_name(Regime r);

struct ClipToken {
  uint32_t token = 0;
  double start = 0.0;
};

struct Document {
  std::string doc_id;
  std::vector<ClipToken> clips;       // time-ordered, fixed stride
  std::vector<text::Sentence> sentences;  // time-ordered
};

// Type tags: A = [CLS], text, [>]; B = video tokens and the trailing [SEP]
// after video. Text-only sequences are all A.
constexpr int kTypeA = 0;
constexpr int kTypeB = 1;

struct MaskLabel {
  int position = 0;
  int original = 0;
};

struct TrainingExample {
  Regime regime = Regime::text_only;
  std::vector<int> input_ids;
  std::vector<int> type_ids;
  std::vector<MaskLabel> mask_labels;
  std::optional<int> alignment;  // c, present iff regime == video_text
};

// A sentence-aligned (or orphan 16-token) run of visual tokens.
struct Segment {
  int sentence = -1;  // -1: not covered by any sentence
  std::vector<uint32_t> tokens;
};

// Clip tokens whose start lies in [sentence.start, sentence.end) belong to
// that sentence; uncovered tokens are chunked in groups of orphan_chunk.
std::vector<Segment> segment_video(const Document& doc, int orphan_chunk = 16);

// keeps indices phase, phase+r, phase+2r, ...
std::vector<uint32_t> subsample_video(std::span<const uint32_t> tokens, int r, int phase);

// BERT-style masking: n = floor(rate*m) (at least 1 when rate>0 and m>0)
// positions drawn from non-special slots; 80% [MASK], 10% random id from the
// same modality, 10% unchanged. Labels record the pre-mask ids.
std::pair<std::vector<int>, std::vector<MaskLabel>> mask_tokens(const std::vector<int>& input_ids,
                                                                const JointVocab& v, double rate, Rng& rng);

struct PairParams {
  double p_neg = 0.5;     // probability the visual segment comes from another document
  double p_concat = 0.5;  // probability of concatenating the next sentence
};

struct ExampleConfig {
  int l_max = 128;
  double mask_rate = 0.15;
  PairParams pair;
};

struct ExampleParts {
  std::vector<int> text_ids;        // joint text ids, no specials
  std::vector<uint32_t> video_tokens;  // raw visual tokens
  std::optional<int> alignment;
};

// Assembles layout + masking for one regime. Truncates over-long sequences
// from the video end first, then the text end.
TrainingExample make_training_example(const ExampleParts& parts, Regime regime, const JointVocab& v,
                                      const ExampleConfig& cfg, Rng& rng);

// Per-document caches used by the samplers.
struct PreparedDoc {
  const Document* doc = nullptr;
  std::vector<std::vector<int>> sentence_ids;  // joint text ids per sentence
  std::vector<Segment> segments;
  std::vector<int> segment_of_sentence;  // index into segments, -1 if none/empty
  std::vector<uint32_t> stream;          // full visual token stream
};

std::vector<PreparedDoc> prepare_documents(const std::vector<Document>& docs, const JointVocab& v);

struct AlignmentPair {
  std::vector<int> text_ids;
  std::vector<uint32_t> video_tokens;
  int c = 1;
};

// Picks a sentence (optionally concatenated with its neighbor) and either its
// own temporal segment (c=1) or one from a different document (c=0).
AlignmentPair sample_alignment_pair(const std::vector<PreparedDoc>& docs, const PairParams& params, Rng& rng);

// Draws ready-to-train examples from a prepared corpus.
class ExampleSampler {
 public:
  ExampleSampler(const std::vector<Document>& docs, const JointVocab& v, ExampleConfig cfg);

  bool has(Regime r) const;
  TrainingExample sample(Regime r, Rng& rng) const;

  const std::vector<PreparedDoc>& prepared() const { return prepared_; }

 private:
  const JointVocab* vocab_;
  ExampleConfig cfg_;
  std::vector<PreparedDoc> prepared_;
  std::vector<size_t> docs_with_text_;
  std::vector<size_t> docs_with_video_;
};

// Corpus file: one document per line,
//   doc_id \t token@start;token@start;... \t start,end,text|start,end,text|...
void write_corpus(const std::vector<Document>& docs, const std::string& path);
std::vector<Document> read_corpus(const std::string& path);

}  // namespace vtlm::corpus
