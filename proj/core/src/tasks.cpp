#include "vtlm/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "vtlm/common.hpp"

namespace vtlm::tasks {

namespace {

using corpus::JointVocab;
using corpus::kTypeA;
using corpus::kTypeB;

struct Batch {
  std::vector<int> ids;
  std::vector<int> types;
};

Batch video_text_layout(std::span<const int> text_ids, std::span<const int> video_ids) {
  Batch b;
  b.ids.push_back(JointVocab::kCls);
  b.types.push_back(kTypeA);
  for (int id : text_ids) {
    b.ids.push_back(id);
    b.types.push_back(kTypeA);
  }
  b.ids.push_back(JointVocab::kGlue);
  b.types.push_back(kTypeA);
  for (int id : video_ids) {
    b.ids.push_back(id);
    b.types.push_back(kTypeB);
  }
  b.ids.push_back(JointVocab::kSep);
  b.types.push_back(kTypeB);
  return b;
}

std::vector<double> softmax_row(std::span<const double> logits) {
  double m = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) denom += std::exp(logits[i] - m);
  double log_denom = std::log(denom) + m;
  for (size_t i = 0; i < logits.size(); ++i) out[i] = std::exp(logits[i] - log_denom);
  return out;
}

}  // namespace

ClozeTemplate ClozeTemplate::parse(const std::string& text, const corpus::JointVocab& v,
                                   std::vector<std::string> roles) {
  ClozeTemplate t;
  t.roles = std::move(roles);
  std::string remaining = text;
  size_t pos = 0;
  while (pos < remaining.size()) {
    size_t mask = remaining.find("[MASK]", pos);
    std::string chunk = remaining.substr(pos, mask == std::string::npos ? std::string::npos : mask - pos);
    for (int piece : text::wordpiece_tokenize(chunk, v.text)) t.ids.push_back(v.text_id(piece));
    if (mask == std::string::npos) break;
    t.slot_positions.push_back(static_cast<int>(t.ids.size()));
    t.ids.push_back(JointVocab::kMask);
    pos = mask + 6;
  }
  if (t.slot_positions.empty()) throw std::invalid_argument("cloze template has no [MASK] slot");
  if (t.slot_positions.size() != t.roles.size())
    throw std::invalid_argument("cloze template: slot/role count mismatch");
  return t;
}

RoleRanking zero_shot_classify(const model::ModelWeights& w, std::span<const uint32_t> video_tokens,
                               const ClozeTemplate& tmpl, const LabelSet& labels, int topk,
                               const corpus::JointVocab& v, bool ablate_video) {
  if (video_tokens.empty()) throw std::invalid_argument("zero_shot_classify: no video tokens");
  if (topk < 1) throw std::invalid_argument("zero_shot_classify: topk must be >= 1");

  std::vector<int> video_ids;
  video_ids.reserve(video_tokens.size());
  for (uint32_t t : video_tokens) video_ids.push_back(ablate_video ? JointVocab::kMask : v.video_id(t));
  Batch b = video_text_layout(tmpl.ids, video_ids);
  if (static_cast<int>(b.ids.size()) > w.cfg.l_max)
    throw std::invalid_argument("zero_shot_classify: sequence exceeds l_max");

  model::ForwardTrace tr = model::forward(w, b.ids, b.types);
  // template slot positions shift by one for the leading [CLS]
  std::vector<int> positions;
  for (int p : tmpl.slot_positions) positions.push_back(p + 1);
  std::vector<double> logits = model::mlm_logits(w, tr.hidden(), positions);

  int V = w.cfg.vocab_size;
  RoleRanking out;
  for (size_t s = 0; s < positions.size(); ++s) {
    const std::string& role = tmpl.roles[s];
    auto it = labels.by_role.find(role);
    if (it == labels.by_role.end()) throw std::invalid_argument("no label set for role " + role);
    std::vector<double> probs = softmax_row({logits.data() + s * static_cast<size_t>(V), static_cast<size_t>(V)});
    std::vector<RankedLabel> ranked;
    ranked.reserve(it->second.size());
    for (int id : it->second) ranked.push_back({id, probs[static_cast<size_t>(id)]});
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const RankedLabel& a, const RankedLabel& b) { return a.prob > b.prob; });
    if (ranked.size() > static_cast<size_t>(topk)) ranked.resize(static_cast<size_t>(topk));
    out[role] = std::move(ranked);
  }
  return out;
}

std::vector<uint32_t> text_to_video(const model::ModelWeights& w, std::span<const int> text_ids, int t_slots,
                                    const corpus::JointVocab& v, int refine_rounds) {
  if (t_slots < 0) throw std::invalid_argument("text_to_video: negative slot count");
  if (t_slots == 0) return {};

  std::vector<int> video_ids(static_cast<size_t>(t_slots), JointVocab::kMask);
  std::vector<uint32_t> result(static_cast<size_t>(t_slots), 0);
  for (int round = 0; round <= refine_rounds; ++round) {
    Batch b = video_text_layout(text_ids, video_ids);
    if (static_cast<int>(b.ids.size()) > w.cfg.l_max)
      throw std::invalid_argument("text_to_video: sequence exceeds l_max");
    model::ForwardTrace tr = model::forward(w, b.ids, b.types);
    int base = 1 + static_cast<int>(text_ids.size()) + 1;  // [CLS] text [>]
    std::vector<int> positions;
    for (int t = 0; t < t_slots; ++t) positions.push_back(base + t);
    std::vector<double> logits = model::mlm_logits(w, tr.hidden(), positions);
    int V = w.cfg.vocab_size;
    for (int t = 0; t < t_slots; ++t) {
      const double* row = logits.data() + static_cast<size_t>(t) * V;
      int best = v.video_begin();
      for (int id = v.video_begin(); id < v.video_end(); ++id)
        if (row[id] > row[best]) best = id;
      result[static_cast<size_t>(t)] = v.video_token(best);
      video_ids[static_cast<size_t>(t)] = best;  // feeds the refinement rounds
    }
  }
  return result;
}

std::vector<std::vector<ForecastEntry>> forecast(const model::ModelWeights& w, std::span<const uint32_t> prefix,
                                                 int horizon, int top_n, const corpus::JointVocab& v) {
  if (prefix.empty()) throw std::invalid_argument("forecast: empty prefix");
  if (horizon < 1) throw std::invalid_argument("forecast: horizon must be >= 1");
  if (top_n < 1) throw std::invalid_argument("forecast: top_n must be >= 1");
  size_t total = prefix.size() + static_cast<size_t>(horizon) + 2;
  if (total > static_cast<size_t>(w.cfg.l_max)) throw std::invalid_argument("forecast: sequence exceeds l_max");

  // video-only layout: [CLS](A) video...(B) [SEP](B)
  std::vector<int> ids, types;
  ids.push_back(JointVocab::kCls);
  types.push_back(kTypeA);
  for (uint32_t t : prefix) {
    ids.push_back(v.video_id(t));
    types.push_back(kTypeB);
  }
  int base = static_cast<int>(ids.size());
  for (int h = 0; h < horizon; ++h) {
    ids.push_back(JointVocab::kMask);
    types.push_back(kTypeB);
  }
  ids.push_back(JointVocab::kSep);
  types.push_back(kTypeB);

  model::ForwardTrace tr = model::forward(w, ids, types);
  std::vector<int> positions;
  for (int h = 0; h < horizon; ++h) positions.push_back(base + h);
  std::vector<double> logits = model::mlm_logits(w, tr.hidden(), positions);

  int V = w.cfg.vocab_size;
  std::vector<std::vector<ForecastEntry>> out(static_cast<size_t>(horizon));
  for (int h = 0; h < horizon; ++h) {
    std::vector<double> probs =
        softmax_row({logits.data() + static_cast<size_t>(h) * V, static_cast<size_t>(V)});
    std::vector<ForecastEntry> entries;
    entries.reserve(v.video_count);
    for (int id = v.video_begin(); id < v.video_end(); ++id)
      entries.push_back({v.video_token(id), probs[static_cast<size_t>(id)]});
    std::stable_sort(entries.begin(), entries.end(),
                     [](const ForecastEntry& a, const ForecastEntry& b) { return a.prob > b.prob; });
    if (entries.size() > static_cast<size_t>(top_n)) entries.resize(static_cast<size_t>(top_n));
    out[static_cast<size_t>(h)] = std::move(entries);
  }
  return out;
}

std::vector<double> extract_features(const model::ModelWeights& w, std::span<const uint32_t> video_tokens,
                                     const corpus::JointVocab& v) {
  if (video_tokens.empty()) throw std::invalid_argument("extract_features: no video tokens");
  ClozeTemplate tmpl = ClozeTemplate::parse(kFeatureTemplate, v,
                                            {"slot0", "slot1", "slot2", "slot3", "slot4"});

  // video truncates from the end to honor l_max
  size_t overhead = tmpl.ids.size() + 3;  // [CLS] ... [>] ... [SEP]
  size_t room = static_cast<size_t>(w.cfg.l_max) > overhead ? static_cast<size_t>(w.cfg.l_max) - overhead : 0;
  if (room == 0) throw std::invalid_argument("extract_features: l_max too small for the template");
  size_t n_video = std::min(video_tokens.size(), room);

  std::vector<int> video_ids;
  for (size_t i = 0; i < n_video; ++i) video_ids.push_back(v.video_id(video_tokens[i]));
  Batch b = video_text_layout(tmpl.ids, video_ids);
  model::ForwardTrace tr = model::forward(w, b.ids, b.types);
  const auto& hidden = tr.hidden();

  int H = w.cfg.hidden;
  std::vector<double> out(static_cast<size_t>(2 * H), 0.0);
  int video_base = 1 + static_cast<int>(tmpl.ids.size()) + 1;
  for (size_t i = 0; i < n_video; ++i)
    for (int j = 0; j < H; ++j)
      out[static_cast<size_t>(j)] += hidden[(static_cast<size_t>(video_base) + i) * H + j];
  for (int j = 0; j < H; ++j) out[static_cast<size_t>(j)] /= static_cast<double>(n_video);

  for (int p : tmpl.slot_positions)
    for (int j = 0; j < H; ++j)
      out[static_cast<size_t>(H + j)] += hidden[(static_cast<size_t>(p) + 1) * H + j];
  for (int j = 0; j < H; ++j) out[static_cast<size_t>(H + j)] /= static_cast<double>(tmpl.slot_positions.size());
  return out;
}

std::string format_ranking_report(const RoleRanking& ranking, const corpus::JointVocab& v) {
  std::ostringstream ss;
  for (const auto& [role, ranked] : ranking) {
    for (size_t r = 0; r < ranked.size(); ++r)
      ss << role << '\t' << (r + 1) << '\t' << v.token_string(ranked[r].id) << '\t'
         << fmt_double(ranked[r].prob, 8) << '\n';
  }
  return ss.str();
}

}  // namespace vtlm::tasks
