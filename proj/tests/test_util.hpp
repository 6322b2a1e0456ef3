#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "vtlm/common.hpp"
#include "vtlm/corpus.hpp"
#include "vtlm/synth.hpp"
#include "vtlm/vq.hpp"

namespace testutil {

// fresh scratch directory under the build tree
inline std::string scratch_dir(const std::string& name) {
  std::filesystem::path p = std::filesystem::temp_directory_path() / "vtlm_tests" / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

inline bool binomial_within_3sigma(double observed_frac, double p, size_t n) {
  double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
  return std::abs(observed_frac - p) <= 3.0 * sigma;
}

// well-separated mixture sample: `per_component` points around each layout centroid
struct Mixture {
  std::vector<vtlm::vq::FeatureVector> points;
  std::vector<int> component;              // generating component per point
  std::vector<std::vector<float>> means;   // component centroids
};

inline Mixture make_mixture(int components, int k, int d, int dim, double sigma, size_t per_component,
                            uint64_t seed) {
  Mixture mix;
  auto layout = vtlm::synth::hierarchical_centroid_layout(components, k, d, dim, std::max(12.0 * sigma, 1.0), seed);
  for (int c = 0; c < components; ++c)
    mix.means.emplace_back(layout.begin() + static_cast<std::ptrdiff_t>(c) * dim,
                           layout.begin() + static_cast<std::ptrdiff_t>(c + 1) * dim);
  vtlm::Rng rng(vtlm::mix_seed(seed, 0x111ULL));
  for (int c = 0; c < components; ++c) {
    for (size_t i = 0; i < per_component; ++i) {
      vtlm::vq::FeatureVector f(static_cast<size_t>(dim));
      for (int j = 0; j < dim; ++j)
        f[static_cast<size_t>(j)] = static_cast<float>(mix.means[static_cast<size_t>(c)][static_cast<size_t>(j)] +
                                                       sigma * rng.normal());
      mix.points.push_back(std::move(f));
      mix.component.push_back(c);
    }
  }
  return mix;
}

// builds a joint vocab straight from synthetic documents
inline vtlm::corpus::JointVocab make_vocab(const std::vector<vtlm::corpus::Document>& docs, uint32_t video_count,
                                           const std::vector<std::string>& extra_words = {}) {
  std::vector<vtlm::text::Sentence> sentences;
  for (const auto& d : docs)
    for (const auto& s : d.sentences) sentences.push_back(s);
  for (const auto& w : extra_words) sentences.push_back({w, 0.0, 0.0});
  vtlm::corpus::JointVocab v;
  v.text = vtlm::text::TextVocab::build(sentences);
  v.video_count = video_count;
  return v;
}

}  // namespace testutil
