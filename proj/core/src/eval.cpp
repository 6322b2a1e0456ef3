#include "vtlm/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <stdexcept>

namespace vtlm::eval {

std::vector<std::string> metric_tokens(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::map<std::string, double> topk_accuracy(const std::vector<EvalRecord>& records, int k) {
  if (records.empty()) throw std::invalid_argument("topk_accuracy: no records");
  if (k < 1) throw std::invalid_argument("topk_accuracy: k must be >= 1");
  std::map<std::string, int> correct, total;
  for (const auto& rec : records) {
    for (const auto& [role, gold] : rec.gold) {
      if (gold.empty()) throw std::invalid_argument("topk_accuracy: empty gold set for role " + role);
      ++total[role];
      auto it = rec.predicted.find(role);
      if (it == rec.predicted.end()) continue;
      size_t upto = std::min(it->second.size(), static_cast<size_t>(k));
      for (size_t i = 0; i < upto; ++i) {
        if (gold.count(it->second[i])) {
          ++correct[role];
          break;
        }
      }
    }
  }
  std::map<std::string, double> out;
  for (const auto& [role, n] : total) out[role] = 100.0 * correct[role] / static_cast<double>(n);
  return out;
}

namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, size_t> ngram_counts(const std::vector<std::string>& tokens, int n) {
  std::map<Ngram, size_t> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (size_t i = 0; i + static_cast<size_t>(n) <= tokens.size(); ++i)
    ++counts[Ngram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                   tokens.begin() + static_cast<std::ptrdiff_t>(i + static_cast<size_t>(n)))];
  return counts;
}

}  // namespace

double bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references, int max_n,
            bool smooth) {
  if (candidates.empty()) throw std::invalid_argument("bleu: empty candidate corpus");
  if (candidates.size() != references.size()) throw std::invalid_argument("bleu: corpus size mismatch");
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");

  std::vector<size_t> matched(static_cast<size_t>(max_n), 0), possible(static_cast<size_t>(max_n), 0);
  size_t cand_len = 0, ref_len = 0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    auto cand = metric_tokens(candidates[i]);
    auto ref = metric_tokens(references[i]);
    cand_len += cand.size();
    ref_len += ref.size();
    for (int n = 1; n <= max_n; ++n) {
      auto cc = ngram_counts(cand, n);
      auto rc = ngram_counts(ref, n);
      for (const auto& [gram, count] : cc) {
        possible[static_cast<size_t>(n - 1)] += count;
        auto it = rc.find(gram);
        if (it != rc.end()) matched[static_cast<size_t>(n - 1)] += std::min(count, it->second);
      }
    }
  }

  double log_prec = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    size_t m = matched[static_cast<size_t>(n - 1)];
    size_t p = possible[static_cast<size_t>(n - 1)];
    if (smooth) {
      ++m;
      ++p;
    }
    if (m == 0 || p == 0) return 0.0;
    log_prec += std::log(static_cast<double>(m) / static_cast<double>(p));
  }
  log_prec /= static_cast<double>(max_n);

  double bp = 1.0;
  if (cand_len == 0) return 0.0;
  if (cand_len < ref_len)
    bp = std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return bp * std::exp(log_prec);
}

size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      if (a[i - 1] == b[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const std::string& candidate, const std::string& reference, double beta) {
  auto cand = metric_tokens(candidate);
  auto ref = metric_tokens(reference);
  if (ref.empty()) throw std::invalid_argument("rouge_l: empty reference");
  if (cand.empty()) return 0.0;
  size_t lcs = lcs_length(cand, ref);
  if (lcs == 0) return 0.0;
  double p = static_cast<double>(lcs) / static_cast<double>(cand.size());
  double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
  double b2 = beta * beta;
  return ((1.0 + b2) * p * r) / (r + b2 * p);
}

}  // namespace vtlm::eval
