#include "vtlm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace vtlm::corpus {

std::string JointVocab::token_string(int id) const {
  switch (id) {
    case kPad: return "[PAD]";
    case kCls: return "[CLS]";
    case kSep: return "[SEP]";
    case kMask: return "[MASK]";
    case kGlue: return "[>]";
    default: break;
  }
  if (is_text(id)) return text.entry(id - text_begin());
  if (is_video(id)) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "v%05u", video_token(id));
    return buf;
  }
  throw std::out_of_range("token_string: id out of range");
}

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::text_only: return "text";
    case Regime::video_only: return "video";
    case Regime::video_text: return "video-text";
  }
  return "?";
}

std::vector<Segment> segment_video(const Document& doc, int orphan_chunk) {
  std::vector<Segment> out;
  if (doc.clips.empty()) return out;
  if (orphan_chunk < 1) throw std::invalid_argument("segment_video: orphan_chunk must be >= 1");

  std::vector<bool> covered(doc.clips.size(), false);
  for (size_t s = 0; s < doc.sentences.size(); ++s) {
    Segment seg;
    seg.sentence = static_cast<int>(s);
    for (size_t i = 0; i < doc.clips.size(); ++i) {
      if (covered[i]) continue;
      double t = doc.clips[i].start;
      if (t >= doc.sentences[s].start && t < doc.sentences[s].end) {
        seg.tokens.push_back(doc.clips[i].token);
        covered[i] = true;
      }
    }
    if (!seg.tokens.empty()) out.push_back(std::move(seg));
  }

  Segment orphan;
  for (size_t i = 0; i < doc.clips.size(); ++i) {
    if (covered[i]) continue;
    orphan.tokens.push_back(doc.clips[i].token);
    if (static_cast<int>(orphan.tokens.size()) == orphan_chunk) {
      out.push_back(std::move(orphan));
      orphan = Segment{};
    }
  }
  if (!orphan.tokens.empty()) out.push_back(std::move(orphan));
  return out;
}

std::vector<uint32_t> subsample_video(std::span<const uint32_t> tokens, int r, int phase) {
  if (r < 1 || r > 5) throw std::invalid_argument("subsample_video: rate must be in [1,5]");
  if (phase < 0 || phase >= r) throw std::invalid_argument("subsample_video: phase must be in [0,r)");
  std::vector<uint32_t> out;
  for (size_t i = static_cast<size_t>(phase); i < tokens.size(); i += static_cast<size_t>(r))
    out.push_back(tokens[i]);
  return out;
}

std::pair<std::vector<int>, std::vector<MaskLabel>> mask_tokens(const std::vector<int>& input_ids,
                                                                const JointVocab& v, double rate, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("mask_tokens: rate must be in [0,1]");
  std::vector<int> masked = input_ids;
  std::vector<MaskLabel> labels;
  if (rate == 0.0) return {masked, labels};

  std::vector<int> maskable;
  for (size_t i = 0; i < input_ids.size(); ++i)
    if (!v.is_special(input_ids[i])) maskable.push_back(static_cast<int>(i));
  if (maskable.empty()) return {masked, labels};

  size_t m = maskable.size();
  size_t n = std::max<size_t>(1, static_cast<size_t>(std::floor(rate * static_cast<double>(m) + 1e-9)));
  rng.shuffle(maskable);
  maskable.resize(n);
  std::sort(maskable.begin(), maskable.end());

  for (int pos : maskable) {
    int original = masked[static_cast<size_t>(pos)];
    labels.push_back({pos, original});
    double roll = rng.uniform();
    if (roll < 0.8) {
      masked[static_cast<size_t>(pos)] = JointVocab::kMask;
    } else if (roll < 0.9) {
      // random replacement stays inside the original modality
      int lo = v.is_video(original) ? v.video_begin() : v.text_begin();
      int hi = v.is_video(original) ? v.video_end() : v.text_end();
      masked[static_cast<size_t>(pos)] = static_cast<int>(rng.uniform_int(lo, hi - 1));
    }  // else: left unchanged
  }
  return {masked, labels};
}

TrainingExample make_training_example(const ExampleParts& parts, Regime regime, const JointVocab& v,
                                      const ExampleConfig& cfg, Rng& rng) {
  bool want_text = regime != Regime::video_only;
  bool want_video = regime != Regime::text_only;
  if (want_text && want_video && parts.text_ids.empty() && parts.video_tokens.empty())
    throw std::invalid_argument("make_training_example: empty text and video");
  if (regime == Regime::text_only && parts.text_ids.empty())
    throw std::invalid_argument("make_training_example: text-only example with no text");
  if (regime == Regime::video_only && parts.video_tokens.empty())
    throw std::invalid_argument("make_training_example: video-only example with no video");

  std::vector<int> text = want_text ? parts.text_ids : std::vector<int>{};
  std::vector<uint32_t> video = want_video ? parts.video_tokens : std::vector<uint32_t>{};

  // specials: [CLS] ... [SEP] plus [>] when both modalities are present
  size_t overhead = 2 + (regime == Regime::video_text ? 1 : 0);
  size_t budget = static_cast<size_t>(cfg.l_max);
  if (budget < overhead + 1) throw std::invalid_argument("make_training_example: l_max too small");
  // video truncates first, then text
  while (text.size() + video.size() + overhead > budget && !video.empty()) video.pop_back();
  while (text.size() + video.size() + overhead > budget && !text.empty()) text.pop_back();

  TrainingExample ex;
  ex.regime = regime;
  ex.input_ids.push_back(JointVocab::kCls);
  ex.type_ids.push_back(kTypeA);
  for (int id : text) {
    ex.input_ids.push_back(id);
    ex.type_ids.push_back(kTypeA);
  }
  if (regime == Regime::video_text) {
    ex.input_ids.push_back(JointVocab::kGlue);
    ex.type_ids.push_back(kTypeA);
  }
  for (uint32_t t : video) {
    ex.input_ids.push_back(v.video_id(t));
    ex.type_ids.push_back(kTypeB);
  }
  ex.input_ids.push_back(JointVocab::kSep);
  ex.type_ids.push_back(video.empty() ? kTypeA : kTypeB);

  auto [masked, labels] = mask_tokens(ex.input_ids, v, cfg.mask_rate, rng);
  ex.input_ids = std::move(masked);
  ex.mask_labels = std::move(labels);
  if (regime == Regime::video_text) ex.alignment = parts.alignment.value_or(1);
  return ex;
}

std::vector<PreparedDoc> prepare_documents(const std::vector<Document>& docs, const JointVocab& v) {
  std::vector<PreparedDoc> out(docs.size());
  for (size_t i = 0; i < docs.size(); ++i) {
    PreparedDoc& p = out[i];
    p.doc = &docs[i];
    p.sentence_ids.resize(docs[i].sentences.size());
    for (size_t s = 0; s < docs[i].sentences.size(); ++s) {
      auto text_indices = text::wordpiece_tokenize(docs[i].sentences[s].text, v.text);
      p.sentence_ids[s].reserve(text_indices.size());
      for (int t : text_indices) p.sentence_ids[s].push_back(v.text_id(t));
    }
    p.segments = segment_video(docs[i]);
    p.segment_of_sentence.assign(docs[i].sentences.size(), -1);
    for (size_t g = 0; g < p.segments.size(); ++g)
      if (p.segments[g].sentence >= 0) p.segment_of_sentence[static_cast<size_t>(p.segments[g].sentence)] = static_cast<int>(g);
    p.stream.reserve(docs[i].clips.size());
    for (const auto& c : docs[i].clips) p.stream.push_back(c.token);
  }
  return out;
}

namespace {

// sentence text ids, concatenated with the next sentence w.p. p_concat
std::vector<int> pick_sentence_text(const PreparedDoc& d, size_t sent, double p_concat, Rng& rng) {
  std::vector<int> out = d.sentence_ids[sent];
  if (sent + 1 < d.sentence_ids.size() && rng.bernoulli(p_concat)) {
    const auto& next = d.sentence_ids[sent + 1];
    out.insert(out.end(), next.begin(), next.end());
  }
  return out;
}

}  // namespace

AlignmentPair sample_alignment_pair(const std::vector<PreparedDoc>& docs, const PairParams& params, Rng& rng) {
  std::vector<size_t> eligible;
  for (size_t i = 0; i < docs.size(); ++i) {
    const auto& d = docs[i];
    bool has_pair = false;
    for (size_t s = 0; s < d.sentence_ids.size(); ++s)
      if (!d.sentence_ids[s].empty() && d.segment_of_sentence[s] >= 0) has_pair = true;
    if (has_pair) eligible.push_back(i);
  }
  if (eligible.size() < 2)
    throw std::invalid_argument("sample_alignment_pair: need at least 2 documents with aligned sentences");

  size_t di = eligible[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(eligible.size()) - 1))];
  const PreparedDoc& d = docs[di];
  std::vector<size_t> sentences;
  for (size_t s = 0; s < d.sentence_ids.size(); ++s)
    if (!d.sentence_ids[s].empty() && d.segment_of_sentence[s] >= 0) sentences.push_back(s);
  size_t sent = sentences[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(sentences.size()) - 1))];

  AlignmentPair pair;
  pair.text_ids = d.sentence_ids[sent];
  bool concat = sent + 1 < d.sentence_ids.size() && rng.bernoulli(params.p_concat);
  if (concat) {
    const auto& next = d.sentence_ids[sent + 1];
    pair.text_ids.insert(pair.text_ids.end(), next.begin(), next.end());
  }

  if (rng.bernoulli(params.p_neg)) {
    pair.c = 0;
    size_t other;
    do {
      other = eligible[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(eligible.size()) - 1))];
    } while (other == di);
    const PreparedDoc& od = docs[other];
    std::vector<size_t> segs;
    for (size_t g = 0; g < od.segments.size(); ++g)
      if (!od.segments[g].tokens.empty()) segs.push_back(g);
    size_t g = segs[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(segs.size()) - 1))];
    pair.video_tokens = od.segments[g].tokens;
  } else {
    pair.c = 1;
    // the temporally corresponding segment spans the whole (possibly
    // concatenated) sentence
    pair.video_tokens = d.segments[static_cast<size_t>(d.segment_of_sentence[sent])].tokens;
    if (concat && d.segment_of_sentence[sent + 1] >= 0) {
      const auto& next = d.segments[static_cast<size_t>(d.segment_of_sentence[sent + 1])].tokens;
      pair.video_tokens.insert(pair.video_tokens.end(), next.begin(), next.end());
    }
  }
  return pair;
}

ExampleSampler::ExampleSampler(const std::vector<Document>& docs, const JointVocab& v, ExampleConfig cfg)
    : vocab_(&v), cfg_(cfg), prepared_(prepare_documents(docs, v)) {
  for (size_t i = 0; i < prepared_.size(); ++i) {
    bool text = false;
    for (const auto& s : prepared_[i].sentence_ids)
      if (!s.empty()) text = true;
    if (text) docs_with_text_.push_back(i);
    if (!prepared_[i].stream.empty()) docs_with_video_.push_back(i);
  }
}

bool ExampleSampler::has(Regime r) const {
  switch (r) {
    case Regime::text_only: return !docs_with_text_.empty();
    case Regime::video_only: return !docs_with_video_.empty();
    case Regime::video_text: {
      size_t n = 0;
      for (const auto& d : prepared_)
        for (size_t s = 0; s < d.sentence_ids.size(); ++s)
          if (!d.sentence_ids[s].empty() && d.segment_of_sentence[s] >= 0) {
            ++n;
            break;
          }
      return n >= 2;
    }
  }
  return false;
}

TrainingExample ExampleSampler::sample(Regime r, Rng& rng) const {
  ExampleParts parts;
  switch (r) {
    case Regime::text_only: {
      const auto& d = prepared_[docs_with_text_[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(docs_with_text_.size()) - 1))]];
      std::vector<size_t> nonempty;
      for (size_t s = 0; s < d.sentence_ids.size(); ++s)
        if (!d.sentence_ids[s].empty()) nonempty.push_back(s);
      size_t sent = nonempty[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(nonempty.size()) - 1))];
      parts.text_ids = pick_sentence_text(d, sent, cfg_.pair.p_concat, rng);
      break;
    }
    case Regime::video_only: {
      const auto& d = prepared_[docs_with_video_[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(docs_with_video_.size()) - 1))]];
      // variable-length windows so short contexts are also represented
      size_t hi = std::min(d.stream.size(), static_cast<size_t>(std::max(1, cfg_.l_max - 2)));
      size_t lo = std::min<size_t>(hi, 4);
      size_t len = lo + static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(hi - lo)));
      size_t start = d.stream.size() == len
                         ? 0
                         : static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(d.stream.size() - len)));
      parts.video_tokens.assign(d.stream.begin() + static_cast<std::ptrdiff_t>(start),
                                d.stream.begin() + static_cast<std::ptrdiff_t>(start + len));
      break;
    }
    case Regime::video_text: {
      AlignmentPair pair = sample_alignment_pair(prepared_, cfg_.pair, rng);
      int rate = static_cast<int>(rng.uniform_int(1, 5));
      int phase = static_cast<int>(rng.uniform_int(0, rate - 1));
      parts.text_ids = std::move(pair.text_ids);
      parts.video_tokens = subsample_video(pair.video_tokens, rate, phase);
      if (parts.video_tokens.empty()) parts.video_tokens = {pair.video_tokens.front()};
      parts.alignment = pair.c;
      break;
    }
  }
  return make_training_example(parts, r, *vocab_, cfg_, rng);
}

void write_corpus(const std::vector<Document>& docs, const std::string& path) {
  std::ostringstream ss;
  for (const auto& d : docs) {
    ss << d.doc_id << '\t';
    for (size_t i = 0; i < d.clips.size(); ++i) {
      if (i) ss << ';';
      ss << d.clips[i].token << '@' << fmt_double(d.clips[i].start, 10);
    }
    ss << '\t';
    for (size_t s = 0; s < d.sentences.size(); ++s) {
      if (s) ss << '|';
      ss << fmt_double(d.sentences[s].start, 10) << ',' << fmt_double(d.sentences[s].end, 10) << ','
         << d.sentences[s].text;
    }
    ss << '\n';
  }
  write_text_file(path, ss.str());
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t pos = s.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace

std::vector<Document> read_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::vector<Document> docs;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    if (fields.size() != 3)
      throw std::runtime_error("corpus line " + std::to_string(lineno) + ": expected 3 tab-separated fields");
    Document d;
    d.doc_id = fields[0];
    if (!fields[1].empty()) {
      for (const auto& item : split(fields[1], ';')) {
        size_t at = item.find('@');
        if (at == std::string::npos)
          throw std::runtime_error("corpus line " + std::to_string(lineno) + ": bad clip entry '" + item + "'");
        ClipToken c;
        c.token = static_cast<uint32_t>(std::stoul(item.substr(0, at)));
        c.start = std::stod(item.substr(at + 1));
        d.clips.push_back(c);
      }
    }
    if (!fields[2].empty()) {
      for (const auto& item : split(fields[2], '|')) {
        auto first = item.find(',');
        auto second = item.find(',', first == std::string::npos ? first : first + 1);
        if (first == std::string::npos || second == std::string::npos)
          throw std::runtime_error("corpus line " + std::to_string(lineno) + ": bad sentence entry");
        text::Sentence s;
        s.start = std::stod(item.substr(0, first));
        s.end = std::stod(item.substr(first + 1, second - first - 1));
        s.text = item.substr(second + 1);
        d.sentences.push_back(s);
      }
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

}  // namespace vtlm::corpus
