#include "vtlm/vq.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "vtlm/common.hpp"
#include "vtlm/io.hpp"

namespace vtlm::vq {

namespace {
constexpr char kMagic[4] = {'V', 'Q', 'C', 'B'};
constexpr char kFeatMagic[4] = {'V', 'Q', 'F', 'V'};
constexpr uint32_t kVersion = 1;

void check_finite(const std::vector<FeatureVector>& features) {
  for (const auto& f : features)
    for (float v : f)
      if (!std::isfinite(v)) throw std::invalid_argument("non-finite feature value");
}

// Working view over a subset of points, shared feature storage.
struct Subset {
  const std::vector<FeatureVector>* points;
  std::vector<uint32_t> idx;
  std::span<const float> at(size_t i) const { return (*points)[idx[i]]; }
  size_t size() const { return idx.size(); }
};

std::vector<std::vector<double>> kmeans_pp(const Subset& pts, uint32_t k, uint32_t dim, Rng& rng) {
  std::vector<std::vector<double>> centroids;
  centroids.reserve(k);
  size_t n = pts.size();
  std::vector<double> best(n, std::numeric_limits<double>::max());

  size_t first = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(n) - 1));
  centroids.emplace_back(pts.at(first).begin(), pts.at(first).end());

  while (centroids.size() < k) {
    const auto& last = centroids.back();
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double d = 0.0;
      auto p = pts.at(i);
      for (uint32_t j = 0; j < dim; ++j) {
        double diff = static_cast<double>(p[j]) - last[j];
        d += diff * diff;
      }
      best[i] = std::min(best[i], d);
      total += best[i];
    }
    size_t chosen = 0;
    if (total <= 0.0) {
      // all remaining points coincide with a centroid; duplicate deterministically
      chosen = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(n) - 1));
    } else {
      double target = rng.uniform() * total;
      double acc = 0.0;
      chosen = n - 1;
      for (size_t i = 0; i < n; ++i) {
        acc += best[i];
        if (acc >= target) {
          chosen = i;
          break;
        }
      }
    }
    centroids.emplace_back(pts.at(chosen).begin(), pts.at(chosen).end());
  }
  return centroids;
}

size_t nearest(std::span<const float> p, const std::vector<std::vector<double>>& centroids) {
  size_t best = 0;
  double best_d = std::numeric_limits<double>::max();
  for (size_t c = 0; c < centroids.size(); ++c) {
    double d = 0.0;
    for (size_t j = 0; j < p.size(); ++j) {
      double diff = static_cast<double>(p[j]) - centroids[c][j];
      d += diff * diff;
    }
    if (d < best_d) {  // strict: ties stay at the lower index
      best_d = d;
      best = c;
    }
  }
  return best;
}

// Lloyd on a subset; returns the final mean squared distance. Centroids and
// the final assignment are updated in place.
double lloyd_on_subset(const Subset& pts, std::vector<std::vector<double>>& centroids,
                       std::vector<uint32_t>& assign, uint32_t dim, int max_iters, double tol) {
  size_t n = pts.size();
  uint32_t k = static_cast<uint32_t>(centroids.size());
  assign.assign(n, 0);
  double prev = std::numeric_limits<double>::max();

  for (int it = 0; it < max_iters; ++it) {
    double distortion = 0.0;
    std::vector<size_t> count(k, 0);
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    for (size_t i = 0; i < n; ++i) {
      auto p = pts.at(i);
      size_t c = nearest(p, centroids);
      assign[i] = static_cast<uint32_t>(c);
      ++count[c];
      for (uint32_t j = 0; j < dim; ++j) {
        double diff = static_cast<double>(p[j]) - centroids[c][j];
        distortion += diff * diff;
        sums[c][j] += p[j];
      }
    }
    distortion /= static_cast<double>(n);

    // empty clusters: steal the farthest point of the largest cluster
    for (uint32_t c = 0; c < k; ++c) {
      if (count[c] != 0) continue;
      uint32_t big = static_cast<uint32_t>(std::max_element(count.begin(), count.end()) - count.begin());
      if (count[big] <= 1) {
        // nothing left to split; duplicate that centroid
        centroids[c] = centroids[big];
        continue;
      }
      double far_d = -1.0;
      size_t far_i = 0;
      for (size_t i = 0; i < n; ++i) {
        if (assign[i] != big) continue;
        double d = 0.0;
        auto p = pts.at(i);
        for (uint32_t j = 0; j < dim; ++j) {
          double diff = static_cast<double>(p[j]) - centroids[big][j];
          d += diff * diff;
        }
        if (d > far_d) {
          far_d = d;
          far_i = i;
        }
      }
      auto p = pts.at(far_i);
      for (uint32_t j = 0; j < dim; ++j) {
        sums[big][j] -= p[j];
        sums[c][j] = p[j];
      }
      --count[big];
      count[c] = 1;
      assign[far_i] = c;
    }

    for (uint32_t c = 0; c < k; ++c)
      if (count[c] > 0)
        for (uint32_t j = 0; j < dim; ++j) centroids[c][j] = sums[c][j] / static_cast<double>(count[c]);

    double rel = (prev - distortion) / std::max(prev, 1e-300);
    if (it > 0 && rel < tol) break;
    prev = distortion;
  }

  // final assignment and distortion against the converged centroids
  double final_distortion = 0.0;
  for (size_t i = 0; i < n; ++i) {
    size_t c = nearest(pts.at(i), centroids);
    assign[i] = static_cast<uint32_t>(c);
    auto p = pts.at(i);
    for (uint32_t j = 0; j < dim; ++j) {
      double diff = static_cast<double>(p[j]) - centroids[c][j];
      final_distortion += diff * diff;
    }
  }
  return final_distortion / static_cast<double>(n);
}

struct FitContext {
  const std::vector<FeatureVector>* features;
  uint32_t k, d, dim;
  uint64_t seed;
  int max_iters;
  double tol;
  int threads;
  int restarts;
  Codebook* out;
};

// Fits node `node` at `level` over `subset`, writes its k child centroids,
// then recurses. parent_centroid backs the duplicate fallback for empty nodes.
void fit_node(const FitContext& ctx, uint32_t level, uint32_t node, Subset subset,
              const std::vector<double>& parent_centroid) {
  uint32_t k = ctx.k, dim = ctx.dim;
  std::vector<std::vector<double>> centroids;
  std::vector<uint32_t> assign;

  if (subset.size() == 0) {
    centroids.assign(k, parent_centroid);
  } else {
    uint32_t n_seed = static_cast<uint32_t>(std::min<size_t>(subset.size(), k));
    double best = std::numeric_limits<double>::max();
    for (int r = 0; r < std::max(1, ctx.restarts); ++r) {
      Rng rng(mix_seed(ctx.seed, (static_cast<uint64_t>(level) << 32) | node, static_cast<uint64_t>(r)));
      auto cand = kmeans_pp(subset, n_seed, dim, rng);
      // fewer points than k: pad with duplicates so the leaf count stays k^d
      while (cand.size() < k) cand.push_back(cand[cand.size() % n_seed]);
      std::vector<uint32_t> cand_assign;
      double distortion = lloyd_on_subset(subset, cand, cand_assign, dim, ctx.max_iters, ctx.tol);
      if (distortion < best) {
        best = distortion;
        centroids = std::move(cand);
        assign = std::move(cand_assign);
      }
    }
  }

  auto& level_data = ctx.out->levels[level];
  for (uint32_t c = 0; c < k; ++c)
    for (uint32_t j = 0; j < dim; ++j)
      level_data[(static_cast<size_t>(node) * k + c) * dim + j] = static_cast<float>(centroids[c][j]);

  if (level + 1 == ctx.d) return;

  std::vector<Subset> children(k);
  for (auto& ch : children) ch.points = ctx.features;
  for (size_t i = 0; i < subset.size(); ++i) children[assign.empty() ? 0 : assign[i]].idx.push_back(subset.idx[i]);

  auto recurse = [&](size_t begin, size_t end) {
    for (size_t c = begin; c < end; ++c)
      fit_node(ctx, level + 1, node * k + static_cast<uint32_t>(c), std::move(children[c]), centroids[c]);
  };
  if (level == 0 && ctx.threads > 1)
    parallel_for(k, ctx.threads, recurse);
  else
    recurse(0, k);
}

}  // namespace

uint32_t Codebook::leaf_count() const {
  uint32_t n = 1;
  for (uint32_t i = 0; i < d; ++i) n *= k;
  return n;
}

std::span<const float> Codebook::centroid(uint32_t level, uint32_t index) const {
  return {levels[level].data() + static_cast<size_t>(index) * dim, dim};
}

std::span<const float> Codebook::leaf(uint32_t token) const { return centroid(d - 1, token); }

double squared_distance(std::span<const float> a, std::span<const float> b) {
  double d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    d += diff * diff;
  }
  return d;
}

LloydStep lloyd_step(const std::vector<FeatureVector>& points, const std::vector<FeatureVector>& centroids) {
  if (points.empty()) throw std::invalid_argument("lloyd_step: no points");
  if (centroids.empty()) throw std::invalid_argument("lloyd_step: no centroids");
  uint32_t dim = static_cast<uint32_t>(centroids[0].size());

  std::vector<std::vector<double>> work;
  work.reserve(centroids.size());
  for (const auto& c : centroids) work.emplace_back(c.begin(), c.end());

  Subset subset{&points, {}};
  subset.idx.resize(points.size());
  for (size_t i = 0; i < points.size(); ++i) subset.idx[i] = static_cast<uint32_t>(i);

  // single assignment + mean pass, distortion measured before the update
  double distortion = 0.0;
  std::vector<size_t> count(work.size(), 0);
  std::vector<std::vector<double>> sums(work.size(), std::vector<double>(dim, 0.0));
  std::vector<uint32_t> assign(points.size());
  for (size_t i = 0; i < points.size(); ++i) {
    size_t c = nearest(points[i], work);
    assign[i] = static_cast<uint32_t>(c);
    ++count[c];
    for (uint32_t j = 0; j < dim; ++j) {
      double diff = static_cast<double>(points[i][j]) - work[c][j];
      distortion += diff * diff;
      sums[c][j] += points[i][j];
    }
  }
  distortion /= static_cast<double>(points.size());

  for (size_t c = 0; c < work.size(); ++c) {
    if (count[c] == 0) {
      // reseed from the farthest point of the largest cluster
      size_t big = static_cast<size_t>(std::max_element(count.begin(), count.end()) - count.begin());
      double far_d = -1.0;
      size_t far_i = 0;
      for (size_t i = 0; i < points.size(); ++i) {
        if (assign[i] != big) continue;
        double dd = 0.0;
        for (uint32_t j = 0; j < dim; ++j) {
          double diff = static_cast<double>(points[i][j]) - work[big][j];
          dd += diff * diff;
        }
        if (dd > far_d) {
          far_d = dd;
          far_i = i;
        }
      }
      if (count[big] > 1) {
        for (uint32_t j = 0; j < dim; ++j) {
          sums[big][j] -= points[far_i][j];
          sums[c][j] = points[far_i][j];
        }
        --count[big];
        count[c] = 1;
      } else {
        sums[c].assign(work[c].begin(), work[c].end());
        count[c] = 1;
      }
    }
  }

  LloydStep out;
  out.distortion = distortion;
  out.centroids.resize(work.size(), FeatureVector(dim));
  for (size_t c = 0; c < work.size(); ++c)
    for (uint32_t j = 0; j < dim; ++j)
      out.centroids[c][j] = static_cast<float>(sums[c][j] / static_cast<double>(count[c]));
  return out;
}

Codebook fit_hierarchical(const std::vector<FeatureVector>& features, uint32_t k, uint32_t d, uint64_t seed,
                          int max_iters, double tol, int threads, int restarts) {
  if (features.empty()) throw std::invalid_argument("fit_hierarchical: empty input");
  if (k < 1 || d < 1) throw std::invalid_argument("fit_hierarchical: k and d must be >= 1");
  uint32_t dim = static_cast<uint32_t>(features[0].size());
  for (const auto& f : features)
    if (f.size() != dim) throw std::invalid_argument("fit_hierarchical: inconsistent feature dimension");
  check_finite(features);

  Codebook cb;
  cb.k = k;
  cb.d = d;
  cb.dim = dim;
  cb.levels.resize(d);
  size_t level_size = k;
  for (uint32_t l = 0; l < d; ++l) {
    cb.levels[l].assign(level_size * dim, 0.0f);
    level_size *= k;
  }

  Subset root{&features, {}};
  root.idx.resize(features.size());
  for (size_t i = 0; i < features.size(); ++i) root.idx[i] = static_cast<uint32_t>(i);

  // global mean as the fallback parent for the root
  std::vector<double> mean(dim, 0.0);
  for (const auto& f : features)
    for (uint32_t j = 0; j < dim; ++j) mean[j] += f[j];
  for (uint32_t j = 0; j < dim; ++j) mean[j] /= static_cast<double>(features.size());

  FitContext ctx{&features, k, d, dim, seed, max_iters, tol, effective_threads(threads), restarts, &cb};
  fit_node(ctx, 0, 0, std::move(root), mean);
  return cb;
}

uint32_t encode(const Codebook& cb, std::span<const float> feature) {
  if (feature.size() != cb.dim) throw std::invalid_argument("encode: feature dimension mismatch");
  uint32_t node = 0;
  for (uint32_t l = 0; l < cb.d; ++l) {
    uint32_t best = 0;
    double best_d = std::numeric_limits<double>::max();
    for (uint32_t c = 0; c < cb.k; ++c) {
      double d = squared_distance(feature, cb.centroid(l, node * cb.k + c));
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    node = node * cb.k + best;
  }
  return node;
}

FeatureVector centroid_of(const Codebook& cb, uint32_t token) {
  if (token >= cb.leaf_count()) throw std::out_of_range("centroid_of: token id out of range");
  auto span = cb.leaf(token);
  return FeatureVector(span.begin(), span.end());
}

void save_codebook(const Codebook& cb, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  BinaryWriter w(os);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u32(cb.k);
  w.u32(cb.d);
  w.u32(cb.dim);
  for (const auto& level : cb.levels) w.f32s(level.data(), level.size());
  if (!os) throw std::runtime_error("write failed: " + path);
}

Codebook load_codebook(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  BinaryReader r(is);
  r.expect_magic(kMagic, path);
  uint32_t version = r.u32();
  if (version != kVersion) throw FormatError(FormatErrorKind::bad_version, "unsupported codebook version");
  Codebook cb;
  cb.k = r.u32();
  cb.d = r.u32();
  cb.dim = r.u32();
  if (cb.k == 0 || cb.d == 0 || cb.dim == 0 || cb.d > 16)
    throw FormatError(FormatErrorKind::malformed, "implausible codebook header");
  cb.levels.resize(cb.d);
  size_t level_size = cb.k;
  for (uint32_t l = 0; l < cb.d; ++l) {
    cb.levels[l].resize(level_size * cb.dim);
    r.f32s(cb.levels[l].data(), cb.levels[l].size());
    level_size *= cb.k;
  }
  return cb;
}

void save_features(const FeatureMatrix& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  BinaryWriter w(os);
  w.magic(kFeatMagic);
  w.u32(kVersion);
  w.u64(m.rows());
  w.u32(m.dim);
  w.f32s(m.data.data(), m.data.size());
  if (!os) throw std::runtime_error("write failed: " + path);
}

FeatureMatrix load_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  BinaryReader r(is);
  r.expect_magic(kFeatMagic, path);
  if (r.u32() != kVersion) throw FormatError(FormatErrorKind::bad_version, "unsupported features version");
  uint64_t rows = r.u64();
  FeatureMatrix m;
  m.dim = r.u32();
  if (m.dim == 0) throw FormatError(FormatErrorKind::malformed, "zero feature dimension");
  m.data.resize(rows * m.dim);
  r.f32s(m.data.data(), m.data.size());
  return m;
}

}  // namespace vtlm::vq
