#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace vtlm::vq {

using FeatureVector = std::vector<float>;

// Hierarchical k-means codebook: d levels, k children per node.
// Level l (0-based) holds k^(l+1) centroids laid out parent-major, so the
// children of node p at level l are centroids [p*k, (p+1)*k) at level l+1.
// Leaf index == visual token id: id = sum_l path[l] * k^(d-1-l).
struct Codebook {
  uint32_t k = 0;
  uint32_t d = 0;
  uint32_t dim = 0;
  std::vector<std::vector<float>> levels;  // levels[l]: k^(l+1) x dim, row-major

  uint32_t leaf_count() const;
  std::span<const float> centroid(uint32_t level, uint32_t index) const;
  std::span<const float> leaf(uint32_t token) const;
  bool operator==(const Codebook& other) const = default;
};

struct LloydStep {
  std::vector<FeatureVector> centroids;  // updated means
  double distortion;                     // mean squared distance before the update
};

// One Lloyd iteration: assign to nearest centroid (squared Euclidean, ties to
// the lower index), recompute means. Empty clusters are reseeded from the
// farthest point of the largest cluster.
LloydStep lloyd_step(const std::vector<FeatureVector>& points, const std::vector<FeatureVector>& centroids);

// Recursive fit: k-means++ seeded Lloyd at the root, then recurse into each
// child's point subset. Every node runs `restarts` seedings and keeps the
// lowest-distortion one (a single unlucky seeding can strand well-separated
// clusters). Nodes with fewer points than k duplicate existing centroids so
// the leaf count is always k^d. Deterministic given seed, regardless of
// thread count (per-node sub-seeds).
Codebook fit_hierarchical(const std::vector<FeatureVector>& features, uint32_t k, uint32_t d, uint64_t seed,
                          int max_iters = 100, double tol = 1e-6, int threads = 1, int restarts = 4);

// Greedy descent, one level at a time; ties go to the lowest child index.
uint32_t encode(const Codebook& cb, std::span<const float> feature);

FeatureVector centroid_of(const Codebook& cb, uint32_t token);

void save_codebook(const Codebook& cb, const std::string& path);
Codebook load_codebook(const std::string& path);

// Flat f32 feature matrix file ("VQFV"): rows of `dim` floats.
struct FeatureMatrix {
  uint32_t dim = 0;
  std::vector<float> data;  // rows * dim
  size_t rows() const { return dim == 0 ? 0 : data.size() / dim; }
  std::span<const float> row(size_t i) const { return {data.data() + i * dim, dim}; }
};

void save_features(const FeatureMatrix& m, const std::string& path);
FeatureMatrix load_features(const std::string& path);

double squared_distance(std::span<const float> a, std::span<const float> b);

}  // namespace vtlm::vq
