#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace vtlm::eval {

struct EvalRecord {
  // role -> predictions, best first
  std::map<std::string, std::vector<std::string>> predicted;
  // role -> gold label set; a record is correct if any gold label ranks in the top k
  std::map<std::string, std::set<std::string>> gold;
};

// percentage per role
std::map<std::string, double> topk_accuracy(const std::vector<EvalRecord>& records, int k);

// Corpus-level BLEU: clipped modified n-gram precision, geometric mean over
// n = 1..max_n, brevity penalty exp(1 - r/c) when c < r. One reference per
// candidate. Any zero precision gives 0 unless smoothing (add-one) is on.
double bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
            int max_n = 4, bool smooth = false);

// LCS-based F with beta = 1.2: F = ((1+b^2) P R) / (R + b^2 P),
// P = LCS/|candidate|, R = LCS/|reference|.
double rouge_l(const std::string& candidate, const std::string& reference, double beta = 1.2);

// whitespace tokens of the lowercased text (metric tokenization)
std::vector<std::string> metric_tokens(const std::string& s);

size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

}  // namespace vtlm::eval
