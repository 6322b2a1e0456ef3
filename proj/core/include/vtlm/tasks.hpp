#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vtlm/corpus.hpp"
#include "vtlm/model.hpp"

namespace vtlm::tasks {

// the zero-shot classification prompt
inline constexpr const char* kClassifyTemplate = "now let me show you how to [MASK] the [MASK]";
// the feature-extraction prompt
inline constexpr const char* kFeatureTemplate =
    "now let's [MASK] the [MASK] to the [MASK], and then [MASK] the [MASK]";

struct ClozeTemplate {
  std::vector<int> ids;            // joint ids with kMask at the slots
  std::vector<int> slot_positions; // indices into ids
  std::vector<std::string> roles;  // one per slot

  // "[MASK]" markers in `text` become slots; roles are assigned in order.
  static ClozeTemplate parse(const std::string& text, const corpus::JointVocab& v,
                             std::vector<std::string> roles);
};

struct LabelSet {
  // role -> admissible joint text ids
  std::map<std::string, std::vector<int>> by_role;
};

struct RankedLabel {
  int id = 0;
  double prob = 0.0;
};

using RoleRanking = std::map<std::string, std::vector<RankedLabel>>;

// [CLS] template [>] video [SEP]; each role's labels ranked by the slot's
// softmax probability. ablate_video swaps every video token for [MASK].
RoleRanking zero_shot_classify(const model::ModelWeights& w, std::span<const uint32_t> video_tokens,
                               const ClozeTemplate& tmpl, const LabelSet& labels, int topk,
                               const corpus::JointVocab& v, bool ablate_video = false);

// [CLS] text [>] [MASK]*T [SEP]; per-slot argmax restricted to video ids.
std::vector<uint32_t> text_to_video(const model::ModelWeights& w, std::span<const int> text_ids, int t_slots,
                                    const corpus::JointVocab& v, int refine_rounds = 0);

struct ForecastEntry {
  uint32_t token = 0;
  double prob = 0.0;
};

// video-only layout [CLS] prefix [MASK]*horizon [SEP]; per masked step the
// top_n video tokens by probability, descending.
std::vector<std::vector<ForecastEntry>> forecast(const model::ModelWeights& w, std::span<const uint32_t> prefix,
                                                 int horizon, int top_n, const corpus::JointVocab& v);

// mean of video-position hidden states ++ mean of masked-slot hidden states
// under the feature template; always 2H wide.
std::vector<double> extract_features(const model::ModelWeights& w, std::span<const uint32_t> video_tokens,
                                     const corpus::JointVocab& v);

// report lines "role \t rank \t label \t prob"
std::string format_ranking_report(const RoleRanking& ranking, const corpus::JointVocab& v);

}  // namespace vtlm::tasks
