#include "vtlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include "vtlm/common.hpp"
#include "vtlm/io.hpp"

namespace vtlm::model {

namespace {

constexpr double kLnEps = 1e-5;
constexpr char kMagic[4] = {'V', 'B', 'C', 'K'};
constexpr uint32_t kVersion = 1;

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

void check_finite(std::span<const double> v, const char* where) {
  for (double x : v)
    if (!std::isfinite(x)) throw std::runtime_error(std::string("non-finite activation in ") + where);
}

// y = W x + b, W row-major [out, in]
void affine(const float* W, const float* b, const double* x, double* y, int out, int in) {
  for (int i = 0; i < out; ++i) {
    const float* row = W + static_cast<size_t>(i) * in;
    double acc = b ? static_cast<double>(b[i]) : 0.0;
    for (int j = 0; j < in; ++j) acc += static_cast<double>(row[j]) * x[j];
    y[i] = acc;
  }
}

// accumulates dW += dy * x^T, db += dy, dx += W^T dy
void affine_backward(const float* W, const double* x, const double* dy, double* dW, double* db, double* dx,
                     int out, int in) {
  for (int i = 0; i < out; ++i) {
    double g = dy[i];
    if (db) db[i] += g;
    double* dWrow = dW + static_cast<size_t>(i) * in;
    const float* Wrow = W + static_cast<size_t>(i) * in;
    for (int j = 0; j < in; ++j) {
      dWrow[j] += g * x[j];
      if (dx) dx[j] += static_cast<double>(Wrow[j]) * g;
    }
  }
}

// per-row layer norm; xhat and 1/std captured for backward
void layer_norm(const double* x, const float* gain, const float* bias, double* out, double* xhat, double* rstd,
                int rows, int width) {
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + static_cast<size_t>(r) * width;
    double mean = 0.0;
    for (int j = 0; j < width; ++j) mean += xr[j];
    mean /= width;
    double var = 0.0;
    for (int j = 0; j < width; ++j) {
      double d = xr[j] - mean;
      var += d * d;
    }
    var /= width;
    double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[r] = rs;
    for (int j = 0; j < width; ++j) {
      double h = (xr[j] - mean) * rs;
      xhat[static_cast<size_t>(r) * width + j] = h;
      out[static_cast<size_t>(r) * width + j] = static_cast<double>(gain[j]) * h + static_cast<double>(bias[j]);
    }
  }
}

void layer_norm_backward(const double* dout, const double* xhat, const double* rstd, const float* gain,
                         double* dgain, double* dbias, double* dx, int rows, int width) {
  for (int r = 0; r < rows; ++r) {
    const double* dor = dout + static_cast<size_t>(r) * width;
    const double* xh = xhat + static_cast<size_t>(r) * width;
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int j = 0; j < width; ++j) {
      double dxh = dor[j] * static_cast<double>(gain[j]);
      sum_dxhat += dxh;
      sum_dxhat_xhat += dxh * xh[j];
      dgain[j] += dor[j] * xh[j];
      dbias[j] += dor[j];
    }
    double inv_w = 1.0 / width;
    for (int j = 0; j < width; ++j) {
      double dxh = dor[j] * static_cast<double>(gain[j]);
      dx[static_cast<size_t>(r) * width + j] +=
          rstd[r] * (dxh - inv_w * sum_dxhat - xh[j] * inv_w * sum_dxhat_xhat);
    }
  }
}

std::vector<uint8_t> dropout_mask(size_t n, double rate, Rng& rng) {
  std::vector<uint8_t> keep(n);
  for (size_t i = 0; i < n; ++i) keep[i] = rng.uniform() >= rate ? 1 : 0;
  return keep;
}

void apply_dropout(std::vector<double>& x, const std::vector<uint8_t>& keep, double rate) {
  double scale = 1.0 / (1.0 - rate);
  for (size_t i = 0; i < x.size(); ++i) x[i] = keep[i] ? x[i] * scale : 0.0;
}

struct TensorSpec {
  std::string name;
  std::vector<uint32_t> dims;
  enum class Init { normal, zeros, ones } init;
};

std::vector<TensorSpec> tensor_specs(const ModelConfig& cfg) {
  uint32_t V = static_cast<uint32_t>(cfg.vocab_size);
  uint32_t H = static_cast<uint32_t>(cfg.hidden);
  uint32_t F = static_cast<uint32_t>(cfg.ffn_dim());
  uint32_t L = static_cast<uint32_t>(cfg.l_max);
  using I = TensorSpec::Init;
  std::vector<TensorSpec> specs = {
      {"tok_emb", {V, H}, I::normal},
      {"pos_emb", {L, H}, I::normal},
      {"type_emb", {2, H}, I::normal},
  };
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    specs.push_back({p + "attn.wq", {H, H}, I::normal});
    specs.push_back({p + "attn.bq", {H}, I::zeros});
    specs.push_back({p + "attn.wk", {H, H}, I::normal});
    specs.push_back({p + "attn.bk", {H}, I::zeros});
    specs.push_back({p + "attn.wv", {H, H}, I::normal});
    specs.push_back({p + "attn.bv", {H}, I::zeros});
    specs.push_back({p + "attn.wo", {H, H}, I::normal});
    specs.push_back({p + "attn.bo", {H}, I::zeros});
    specs.push_back({p + "ln1.g", {H}, I::ones});
    specs.push_back({p + "ln1.b", {H}, I::zeros});
    specs.push_back({p + "ffn.w1", {F, H}, I::normal});
    specs.push_back({p + "ffn.b1", {F}, I::zeros});
    specs.push_back({p + "ffn.w2", {H, F}, I::normal});
    specs.push_back({p + "ffn.b2", {H}, I::zeros});
    specs.push_back({p + "ln2.g", {H}, I::ones});
    specs.push_back({p + "ln2.b", {H}, I::zeros});
  }
  specs.push_back({"mlm.w", {H, H}, I::normal});
  specs.push_back({"mlm.b", {H}, I::zeros});
  specs.push_back({"mlm.ln_g", {H}, I::ones});
  specs.push_back({"mlm.ln_b", {H}, I::zeros});
  specs.push_back({"mlm.out_b", {V}, I::zeros});
  specs.push_back({"align.w", {H}, I::zeros});
  specs.push_back({"align.b", {1}, I::zeros});
  return specs;
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }

double gelu_grad(double x) {
  double phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
  double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
  return phi + x * pdf;
}

void ModelConfig::validate() const {
  if (n_layers < 0 || hidden <= 0 || n_heads <= 0 || ffn_mult <= 0 || vocab_size <= 0 || l_max <= 0)
    throw std::invalid_argument("model config: all sizes must be positive");
  if (hidden % n_heads != 0) throw std::invalid_argument("model config: hidden must be divisible by n_heads");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("model config: dropout must be in [0,1)");
}

int ModelWeights::index_of(const std::string& name) const {
  for (size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return static_cast<int>(i);
  throw std::out_of_range("no such tensor: " + name);
}

Tensor& ModelWeights::at(const std::string& name) { return tensors[static_cast<size_t>(index_of(name))]; }
const Tensor& ModelWeights::at(const std::string& name) const {
  return tensors[static_cast<size_t>(index_of(name))];
}

ModelWeights ModelWeights::init(const ModelConfig& cfg, uint32_t text_vocab_size, uint64_t seed) {
  cfg.validate();
  if (corpus::JointVocab::kSpecialCount + static_cast<int>(text_vocab_size) > cfg.vocab_size)
    throw std::invalid_argument("model init: vocab_size too small for text vocab");
  ModelWeights w;
  w.cfg = cfg;
  w.text_vocab_size = text_vocab_size;
  for (const auto& spec : tensor_specs(cfg)) {
    Tensor t;
    t.name = spec.name;
    t.dims = spec.dims;
    size_t n = 1;
    for (uint32_t d : spec.dims) n *= d;
    t.data.assign(n, 0.0f);
    if (spec.init == TensorSpec::Init::normal) {
      Rng rng(mix_seed(seed, fnv1a64(spec.name.data(), spec.name.size())));
      for (auto& v : t.data) v = static_cast<float>(rng.normal(0.0, 0.02));
    } else if (spec.init == TensorSpec::Init::ones) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    }
    w.tensors.push_back(std::move(t));
  }
  return w;
}

void ModelWeights::set_video_embeddings(const vq::Codebook& cb, uint64_t projection_seed, double row_norm) {
  int begin = video_row_begin();
  int end = video_row_end();
  if (static_cast<int>(cb.leaf_count()) != end - begin)
    throw std::invalid_argument("set_video_embeddings: codebook leaf count does not match video vocab range");
  int H = cfg.hidden;
  int D = static_cast<int>(cb.dim);

  // fixed projection, one stream for the whole matrix
  Rng rng(mix_seed(projection_seed, 0xBEDDEDULL));
  std::vector<double> proj(static_cast<size_t>(H) * D);
  double scale = 1.0 / std::sqrt(static_cast<double>(D));
  for (auto& v : proj) v = rng.normal() * scale;

  auto project = [&](std::span<const double> x, std::vector<double>& out) {
    for (int i = 0; i < H; ++i) {
      double acc = 0.0;
      for (int j = 0; j < D; ++j) acc += proj[static_cast<size_t>(i) * D + j] * x[static_cast<size_t>(j)];
      out[static_cast<size_t>(i)] = acc;
    }
  };

  // Each row sums the per-level centroid deltas along the leaf's path,
  // projected and normalized level by level. Coarse levels usually dominate
  // raw centroid magnitudes; equalizing keeps sibling leaves separable even
  // when the rows are frozen.
  Tensor& emb = at("tok_emb");
  std::vector<double> delta(static_cast<size_t>(D)), v(static_cast<size_t>(H)), row(static_cast<size_t>(H));
  for (int t = 0; t < end - begin; ++t) {
    std::fill(row.begin(), row.end(), 0.0);
    uint32_t stride = cb.leaf_count() / cb.k;  // k^(d-1)
    for (uint32_t level = 0; level < cb.d; ++level) {
      uint32_t node = static_cast<uint32_t>(t) / stride;
      auto c = cb.centroid(level, node);
      if (level == 0) {
        for (int j = 0; j < D; ++j) delta[static_cast<size_t>(j)] = c[static_cast<size_t>(j)];
      } else {
        auto parent = cb.centroid(level - 1, node / cb.k);
        for (int j = 0; j < D; ++j)
          delta[static_cast<size_t>(j)] =
              static_cast<double>(c[static_cast<size_t>(j)]) - static_cast<double>(parent[static_cast<size_t>(j)]);
      }
      project(delta, v);
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 1e-12)
        for (int i = 0; i < H; ++i) row[static_cast<size_t>(i)] += v[static_cast<size_t>(i)] / norm;
      stride = std::max(1u, stride / cb.k);
    }
    double norm = 0.0;
    for (double x : row) norm += x * x;
    norm = std::sqrt(norm);
    double f = norm > 1e-12 ? row_norm / norm : 0.0;
    float* dst = emb.data.data() + (static_cast<size_t>(begin) + t) * H;
    for (int i = 0; i < H; ++i) dst[i] = static_cast<float>(row[static_cast<size_t>(i)] * f);
  }
}

void ModelWeights::apply_freeze(FreezeMode mode) {
  freeze_mode = mode;
  Tensor& emb = at("tok_emb");
  emb.frozen = false;
  emb.frozen_row_begin = emb.frozen_row_end = 0;
  if (mode == FreezeMode::video_rows) {
    emb.frozen_row_begin = static_cast<uint32_t>(video_row_begin());
    emb.frozen_row_end = static_cast<uint32_t>(video_row_end());
  } else if (mode == FreezeMode::all_rows) {
    emb.frozen = true;
  }
}

Gradients make_gradients(const ModelWeights& w) {
  Gradients g(w.tensors.size());
  for (size_t i = 0; i < w.tensors.size(); ++i) g[i].assign(w.tensors[i].size(), 0.0);
  return g;
}

void zero_gradients(Gradients& g) {
  for (auto& t : g) std::fill(t.begin(), t.end(), 0.0);
}

std::vector<double> embed(const ModelWeights& w, std::span<const int> ids, std::span<const int> types) {
  const ModelConfig& cfg = w.cfg;
  if (ids.size() != types.size()) throw std::invalid_argument("embed: ids/types length mismatch");
  if (static_cast<int>(ids.size()) > cfg.l_max) throw std::invalid_argument("embed: sequence longer than l_max");
  int H = cfg.hidden;
  const Tensor& tok = w.at("tok_emb");
  const Tensor& pos = w.at("pos_emb");
  const Tensor& typ = w.at("type_emb");
  std::vector<double> out(ids.size() * static_cast<size_t>(H));
  for (size_t l = 0; l < ids.size(); ++l) {
    int id = ids[l];
    int ty = types[l];
    if (id < 0 || id >= cfg.vocab_size) throw std::invalid_argument("embed: token id out of range");
    if (ty < 0 || ty >= 2) throw std::invalid_argument("embed: type id out of range");
    const float* te = tok.data.data() + static_cast<size_t>(id) * H;
    const float* pe = pos.data.data() + l * static_cast<size_t>(H);
    const float* ye = typ.data.data() + static_cast<size_t>(ty) * H;
    for (int j = 0; j < H; ++j)
      out[l * static_cast<size_t>(H) + j] =
          static_cast<double>(te[j]) + static_cast<double>(pe[j]) + static_cast<double>(ye[j]);
  }
  return out;
}

ForwardTrace forward(const ModelWeights& w, std::span<const int> ids, std::span<const int> types,
                     std::span<const uint8_t> pad_mask, bool dropout_off, uint64_t dropout_seed) {
  const ModelConfig& cfg = w.cfg;
  int L = static_cast<int>(ids.size());
  int H = cfg.hidden;
  int F = cfg.ffn_dim();
  int heads = cfg.n_heads;
  int Dh = cfg.head_dim();
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(Dh));

  ForwardTrace tr;
  tr.L = L;
  tr.ids.assign(ids.begin(), ids.end());
  tr.types.assign(types.begin(), types.end());
  if (!pad_mask.empty()) {
    if (pad_mask.size() != ids.size()) throw std::invalid_argument("forward: pad mask length mismatch");
    tr.pad.assign(pad_mask.begin(), pad_mask.end());
  } else {
    tr.pad.assign(ids.size(), 0);
  }
  tr.dropout_on = !dropout_off && cfg.dropout > 0.0;
  tr.dropout_rate = cfg.dropout;
  tr.emb = embed(w, ids, types);
  check_finite(tr.emb, "embedding");

  std::vector<double> x = tr.emb;
  tr.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (int li = 0; li < cfg.n_layers; ++li) {
    LayerTrace& lt = tr.layers[static_cast<size_t>(li)];
    std::string p = "layer" + std::to_string(li) + ".";
    const Tensor& wq = w.at(p + "attn.wq");
    const Tensor& bq = w.at(p + "attn.bq");
    const Tensor& wk = w.at(p + "attn.wk");
    const Tensor& bk = w.at(p + "attn.bk");
    const Tensor& wv = w.at(p + "attn.wv");
    const Tensor& bv = w.at(p + "attn.bv");
    const Tensor& wo = w.at(p + "attn.wo");
    const Tensor& bo = w.at(p + "attn.bo");

    lt.input = x;
    lt.q.resize(static_cast<size_t>(L) * H);
    lt.k.resize(static_cast<size_t>(L) * H);
    lt.v.resize(static_cast<size_t>(L) * H);
    for (int i = 0; i < L; ++i) {
      const double* xi = x.data() + static_cast<size_t>(i) * H;
      affine(wq.data.data(), bq.data.data(), xi, lt.q.data() + static_cast<size_t>(i) * H, H, H);
      affine(wk.data.data(), bk.data.data(), xi, lt.k.data() + static_cast<size_t>(i) * H, H, H);
      affine(wv.data.data(), bv.data.data(), xi, lt.v.data() + static_cast<size_t>(i) * H, H, H);
    }

    lt.probs.assign(static_cast<size_t>(heads) * L * L, 0.0);
    lt.ctx.assign(static_cast<size_t>(L) * H, 0.0);
    std::vector<double> scores(static_cast<size_t>(L));
    for (int h = 0; h < heads; ++h) {
      int off = h * Dh;
      for (int i = 0; i < L; ++i) {
        const double* qi = lt.q.data() + static_cast<size_t>(i) * H + off;
        double best = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < L; ++j) {
          if (tr.pad[static_cast<size_t>(j)]) continue;
          const double* kj = lt.k.data() + static_cast<size_t>(j) * H + off;
          double s = 0.0;
          for (int d = 0; d < Dh; ++d) s += qi[d] * kj[d];
          s *= inv_sqrt_dh;
          scores[static_cast<size_t>(j)] = s;
          best = std::max(best, s);
        }
        if (best == -std::numeric_limits<double>::infinity()) continue;  // all keys padded
        double denom = 0.0;
        for (int j = 0; j < L; ++j) {
          if (tr.pad[static_cast<size_t>(j)]) continue;
          denom += std::exp(scores[static_cast<size_t>(j)] - best);
        }
        double* prow = lt.probs.data() + (static_cast<size_t>(h) * L + i) * L;
        double* ci = lt.ctx.data() + static_cast<size_t>(i) * H + off;
        for (int j = 0; j < L; ++j) {
          if (tr.pad[static_cast<size_t>(j)]) continue;
          double pj = std::exp(scores[static_cast<size_t>(j)] - best) / denom;
          prow[j] = pj;
          const double* vj = lt.v.data() + static_cast<size_t>(j) * H + off;
          for (int d = 0; d < Dh; ++d) ci[d] += pj * vj[d];
        }
      }
    }

    lt.attn_out.resize(static_cast<size_t>(L) * H);
    for (int i = 0; i < L; ++i)
      affine(wo.data.data(), bo.data.data(), lt.ctx.data() + static_cast<size_t>(i) * H,
             lt.attn_out.data() + static_cast<size_t>(i) * H, H, H);
    if (tr.dropout_on) {
      Rng drng(mix_seed(dropout_seed, static_cast<uint64_t>(li), 0));
      lt.attn_keep = dropout_mask(lt.attn_out.size(), cfg.dropout, drng);
      apply_dropout(lt.attn_out, lt.attn_keep, cfg.dropout);
    }

    lt.res1.resize(static_cast<size_t>(L) * H);
    for (size_t i = 0; i < lt.res1.size(); ++i) lt.res1[i] = x[i] + lt.attn_out[i];

    lt.ln1_xhat.resize(static_cast<size_t>(L) * H);
    lt.ln1_rstd.resize(static_cast<size_t>(L));
    lt.y.resize(static_cast<size_t>(L) * H);
    layer_norm(lt.res1.data(), w.at(p + "ln1.g").data.data(), w.at(p + "ln1.b").data.data(), lt.y.data(),
               lt.ln1_xhat.data(), lt.ln1_rstd.data(), L, H);

    const Tensor& w1 = w.at(p + "ffn.w1");
    const Tensor& b1 = w.at(p + "ffn.b1");
    const Tensor& w2 = w.at(p + "ffn.w2");
    const Tensor& b2 = w.at(p + "ffn.b2");
    lt.ffn_pre.resize(static_cast<size_t>(L) * F);
    lt.ffn_out.resize(static_cast<size_t>(L) * H);
    std::vector<double> act(static_cast<size_t>(F));
    for (int i = 0; i < L; ++i) {
      double* pre = lt.ffn_pre.data() + static_cast<size_t>(i) * F;
      affine(w1.data.data(), b1.data.data(), lt.y.data() + static_cast<size_t>(i) * H, pre, F, H);
      for (int j = 0; j < F; ++j) act[static_cast<size_t>(j)] = gelu(pre[j]);
      affine(w2.data.data(), b2.data.data(), act.data(), lt.ffn_out.data() + static_cast<size_t>(i) * H, H, F);
    }
    if (tr.dropout_on) {
      Rng drng(mix_seed(dropout_seed, static_cast<uint64_t>(li), 1));
      lt.ffn_keep = dropout_mask(lt.ffn_out.size(), cfg.dropout, drng);
      apply_dropout(lt.ffn_out, lt.ffn_keep, cfg.dropout);
    }

    lt.res2.resize(static_cast<size_t>(L) * H);
    for (size_t i = 0; i < lt.res2.size(); ++i) lt.res2[i] = lt.y[i] + lt.ffn_out[i];

    lt.ln2_xhat.resize(static_cast<size_t>(L) * H);
    lt.ln2_rstd.resize(static_cast<size_t>(L));
    lt.out.resize(static_cast<size_t>(L) * H);
    layer_norm(lt.res2.data(), w.at(p + "ln2.g").data.data(), w.at(p + "ln2.b").data.data(), lt.out.data(),
               lt.ln2_xhat.data(), lt.ln2_rstd.data(), L, H);
    check_finite(lt.out, "transformer layer");
    x = lt.out;
  }
  return tr;
}

namespace {

// shared MLM head evaluation; captures intermediates when trace != nullptr
std::vector<double> mlm_head(const ModelWeights& w, std::span<const double> hidden, std::span<const int> positions,
                             ForwardTrace* trace) {
  const ModelConfig& cfg = w.cfg;
  int H = cfg.hidden;
  int V = cfg.vocab_size;
  size_t n = positions.size();
  const Tensor& mw = w.at("mlm.w");
  const Tensor& mb = w.at("mlm.b");
  const Tensor& lng = w.at("mlm.ln_g");
  const Tensor& lnb = w.at("mlm.ln_b");
  const Tensor& tok = w.at("tok_emb");
  const Tensor& outb = w.at("mlm.out_b");

  std::vector<double> logits(n * static_cast<size_t>(V));
  std::vector<double> pre(static_cast<size_t>(H)), act(static_cast<size_t>(H)), g(static_cast<size_t>(H));
  std::vector<double> xhat(static_cast<size_t>(H));
  double rstd = 0.0;
  if (trace) {
    trace->mlm_pre.assign(n * static_cast<size_t>(H), 0.0);
    trace->mlm_xhat.assign(n * static_cast<size_t>(H), 0.0);
    trace->mlm_rstd.assign(n, 0.0);
    trace->mlm_g.assign(n * static_cast<size_t>(H), 0.0);
  }

  for (size_t i = 0; i < n; ++i) {
    int posn = positions[i];
    if (posn < 0 || static_cast<size_t>(posn) * H >= hidden.size())
      throw std::invalid_argument("mlm_logits: position out of range");
    const double* h = hidden.data() + static_cast<size_t>(posn) * H;
    affine(mw.data.data(), mb.data.data(), h, pre.data(), H, H);
    for (int j = 0; j < H; ++j) act[static_cast<size_t>(j)] = gelu(pre[static_cast<size_t>(j)]);
    layer_norm(act.data(), lng.data.data(), lnb.data.data(), g.data(), xhat.data(), &rstd, 1, H);
    if (trace) {
      std::copy(pre.begin(), pre.end(), trace->mlm_pre.begin() + static_cast<std::ptrdiff_t>(i * H));
      std::copy(xhat.begin(), xhat.end(), trace->mlm_xhat.begin() + static_cast<std::ptrdiff_t>(i * H));
      std::copy(g.begin(), g.end(), trace->mlm_g.begin() + static_cast<std::ptrdiff_t>(i * H));
      trace->mlm_rstd[i] = rstd;
    }
    double* lrow = logits.data() + i * static_cast<size_t>(V);
    for (int v = 0; v < V; ++v) {
      const float* e = tok.data.data() + static_cast<size_t>(v) * H;
      double acc = static_cast<double>(outb.data[static_cast<size_t>(v)]);
      for (int j = 0; j < H; ++j) acc += static_cast<double>(e[j]) * g[static_cast<size_t>(j)];
      lrow[v] = acc;
    }
  }
  return logits;
}

}  // namespace

std::vector<double> mlm_logits(const ModelWeights& w, std::span<const double> hidden,
                               std::span<const int> positions) {
  return mlm_head(w, hidden, positions, nullptr);
}

double alignment_logit(const ModelWeights& w, std::span<const double> hidden) {
  int H = w.cfg.hidden;
  const Tensor& aw = w.at("align.w");
  const Tensor& ab = w.at("align.b");
  double z = static_cast<double>(ab.data[0]);
  for (int j = 0; j < H; ++j) z += static_cast<double>(aw.data[static_cast<size_t>(j)]) * hidden[static_cast<size_t>(j)];
  return z;
}

ForwardTrace loss(const ModelWeights& w, const corpus::TrainingExample& ex, bool dropout_off,
                  uint64_t dropout_seed) {
  if (ex.mask_labels.empty() && !ex.alignment.has_value())
    throw std::invalid_argument("loss: example has no mask labels and no alignment label");

  std::vector<uint8_t> pad(ex.input_ids.size(), 0);
  for (size_t i = 0; i < ex.input_ids.size(); ++i)
    if (ex.input_ids[i] == corpus::JointVocab::kPad) pad[i] = 1;

  ForwardTrace tr = forward(w, ex.input_ids, ex.type_ids, pad, dropout_off, dropout_seed);
  tr.regime = ex.regime;

  double total = 0.0;
  int V = w.cfg.vocab_size;

  if (!ex.mask_labels.empty()) {
    switch (ex.regime) {
      case corpus::Regime::text_only: tr.mlm_weight = w.cfg.w_text; break;
      case corpus::Regime::video_only: tr.mlm_weight = w.cfg.w_video; break;
      case corpus::Regime::video_text: tr.mlm_weight = 1.0; break;
    }
    tr.mlm_positions.reserve(ex.mask_labels.size());
    tr.mlm_targets.reserve(ex.mask_labels.size());
    for (const auto& ml : ex.mask_labels) {
      tr.mlm_positions.push_back(ml.position);
      tr.mlm_targets.push_back(ml.original);
    }
    std::vector<double> logits = mlm_head(w, tr.hidden(), tr.mlm_positions, &tr);
    size_t n = tr.mlm_positions.size();
    tr.mlm_probs.assign(n * static_cast<size_t>(V), 0.0);
    double ce = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double* lrow = logits.data() + i * static_cast<size_t>(V);
      double m = *std::max_element(lrow, lrow + V);
      double denom = 0.0;
      for (int v = 0; v < V; ++v) denom += std::exp(lrow[v] - m);
      double lse = m + std::log(denom);
      int target = tr.mlm_targets[i];
      if (target < 0 || target >= V) throw std::invalid_argument("loss: mask label id out of range");
      ce += lse - lrow[target];
      double* prow = tr.mlm_probs.data() + i * static_cast<size_t>(V);
      for (int v = 0; v < V; ++v) prow[v] = std::exp(lrow[v] - lse);
    }
    ce /= static_cast<double>(n);
    total += tr.mlm_weight * ce;
  }

  if (ex.regime == corpus::Regime::video_text && ex.alignment.has_value()) {
    tr.has_alignment = true;
    tr.alignment_target = *ex.alignment;
    tr.alignment_logit = alignment_logit(w, tr.hidden());
    double z = tr.alignment_logit;
    // bce = -[c log s(z) + (1-c) log(1-s(z))]
    double bce = tr.alignment_target == 1 ? softplus(-z) : softplus(z);
    total += w.cfg.w_cross * bce;
  }

  tr.loss_value = total;
  return tr;
}

void backward(const ModelWeights& w, const ForwardTrace& tr, Gradients& grads) {
  const ModelConfig& cfg = w.cfg;
  int L = tr.L;
  int H = cfg.hidden;
  int F = cfg.ffn_dim();
  int V = cfg.vocab_size;
  int heads = cfg.n_heads;
  int Dh = cfg.head_dim();
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(Dh));
  if (grads.size() != w.tensors.size()) throw std::invalid_argument("backward: gradient shape mismatch");
  for (size_t i = 0; i < grads.size(); ++i)
    if (grads[i].size() != w.tensors[i].size()) throw std::invalid_argument("backward: gradient shape mismatch");

  std::vector<double> dhidden(static_cast<size_t>(L) * H, 0.0);

  // alignment head
  if (tr.has_alignment) {
    double s = 1.0 / (1.0 + std::exp(-tr.alignment_logit));
    double dz = cfg.w_cross * (s - static_cast<double>(tr.alignment_target));
    const Tensor& aw = w.at("align.w");
    double* daw = grads[static_cast<size_t>(w.index_of("align.w"))].data();
    double* dab = grads[static_cast<size_t>(w.index_of("align.b"))].data();
    const double* h0 = tr.hidden().data();
    dab[0] += dz;
    for (int j = 0; j < H; ++j) {
      daw[j] += dz * h0[j];
      dhidden[static_cast<size_t>(j)] += dz * static_cast<double>(aw.data[static_cast<size_t>(j)]);
    }
  }

  // masked-token head
  if (!tr.mlm_positions.empty()) {
    size_t n = tr.mlm_positions.size();
    double scale = tr.mlm_weight / static_cast<double>(n);
    const Tensor& tok = w.at("tok_emb");
    const Tensor& mw = w.at("mlm.w");
    double* dtok = grads[static_cast<size_t>(w.index_of("tok_emb"))].data();
    double* doutb = grads[static_cast<size_t>(w.index_of("mlm.out_b"))].data();
    double* dmw = grads[static_cast<size_t>(w.index_of("mlm.w"))].data();
    double* dmb = grads[static_cast<size_t>(w.index_of("mlm.b"))].data();
    double* dlng = grads[static_cast<size_t>(w.index_of("mlm.ln_g"))].data();
    double* dlnb = grads[static_cast<size_t>(w.index_of("mlm.ln_b"))].data();
    const Tensor& lng = w.at("mlm.ln_g");

    std::vector<double> dg(static_cast<size_t>(H)), dact(static_cast<size_t>(H)), dpre(static_cast<size_t>(H));
    for (size_t i = 0; i < n; ++i) {
      const double* prow = tr.mlm_probs.data() + i * static_cast<size_t>(V);
      const double* g = tr.mlm_g.data() + i * static_cast<size_t>(H);
      std::fill(dg.begin(), dg.end(), 0.0);
      for (int v = 0; v < V; ++v) {
        double dl = prow[v] * scale;
        if (v == tr.mlm_targets[i]) dl -= scale;
        if (dl == 0.0) continue;
        doutb[v] += dl;
        const float* e = tok.data.data() + static_cast<size_t>(v) * H;
        double* de = dtok + static_cast<size_t>(v) * H;
        for (int j = 0; j < H; ++j) {
          de[j] += dl * g[j];
          dg[static_cast<size_t>(j)] += dl * static_cast<double>(e[j]);
        }
      }
      // layer norm, then gelu, then the dense transform
      std::fill(dact.begin(), dact.end(), 0.0);
      layer_norm_backward(dg.data(), tr.mlm_xhat.data() + i * static_cast<size_t>(H), &tr.mlm_rstd[i],
                          lng.data.data(), dlng, dlnb, dact.data(), 1, H);
      const double* pre = tr.mlm_pre.data() + i * static_cast<size_t>(H);
      for (int j = 0; j < H; ++j) dpre[static_cast<size_t>(j)] = dact[static_cast<size_t>(j)] * gelu_grad(pre[j]);
      const double* h = tr.hidden().data() + static_cast<size_t>(tr.mlm_positions[i]) * H;
      affine_backward(mw.data.data(), h, dpre.data(), dmw, dmb,
                      dhidden.data() + static_cast<size_t>(tr.mlm_positions[i]) * H, H, H);
    }
  }

  // transformer stack
  std::vector<double> dx = std::move(dhidden);
  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const LayerTrace& lt = tr.layers[static_cast<size_t>(li)];
    std::string p = "layer" + std::to_string(li) + ".";
    auto gptr = [&](const std::string& name) { return grads[static_cast<size_t>(w.index_of(name))].data(); };

    // ln2
    std::vector<double> dres2(static_cast<size_t>(L) * H, 0.0);
    layer_norm_backward(dx.data(), lt.ln2_xhat.data(), lt.ln2_rstd.data(), w.at(p + "ln2.g").data.data(),
                        gptr(p + "ln2.g"), gptr(p + "ln2.b"), dres2.data(), L, H);

    // res2 = y + ffn_out
    std::vector<double> dy = dres2;
    std::vector<double> dffn_out = std::move(dres2);
    if (tr.dropout_on) {
      double scale = 1.0 / (1.0 - tr.dropout_rate);
      for (size_t i = 0; i < dffn_out.size(); ++i) dffn_out[i] = lt.ffn_keep[i] ? dffn_out[i] * scale : 0.0;
    }

    // ffn
    const Tensor& w1 = w.at(p + "ffn.w1");
    const Tensor& w2 = w.at(p + "ffn.w2");
    double* dw1 = gptr(p + "ffn.w1");
    double* db1 = gptr(p + "ffn.b1");
    double* dw2 = gptr(p + "ffn.w2");
    double* db2 = gptr(p + "ffn.b2");
    std::vector<double> act(static_cast<size_t>(F)), dact(static_cast<size_t>(F)), dpre(static_cast<size_t>(F));
    for (int i = 0; i < L; ++i) {
      const double* pre = lt.ffn_pre.data() + static_cast<size_t>(i) * F;
      for (int j = 0; j < F; ++j) act[static_cast<size_t>(j)] = gelu(pre[j]);
      std::fill(dact.begin(), dact.end(), 0.0);
      affine_backward(w2.data.data(), act.data(), dffn_out.data() + static_cast<size_t>(i) * H, dw2, db2,
                      dact.data(), H, F);
      for (int j = 0; j < F; ++j) dpre[static_cast<size_t>(j)] = dact[static_cast<size_t>(j)] * gelu_grad(pre[j]);
      affine_backward(w1.data.data(), lt.y.data() + static_cast<size_t>(i) * H, dpre.data(), dw1, db1,
                      dy.data() + static_cast<size_t>(i) * H, F, H);
    }

    // ln1
    std::vector<double> dres1(static_cast<size_t>(L) * H, 0.0);
    layer_norm_backward(dy.data(), lt.ln1_xhat.data(), lt.ln1_rstd.data(), w.at(p + "ln1.g").data.data(),
                        gptr(p + "ln1.g"), gptr(p + "ln1.b"), dres1.data(), L, H);

    // res1 = input + attn_out
    std::vector<double> dinput = dres1;
    std::vector<double> dattn = std::move(dres1);
    if (tr.dropout_on) {
      double scale = 1.0 / (1.0 - tr.dropout_rate);
      for (size_t i = 0; i < dattn.size(); ++i) dattn[i] = lt.attn_keep[i] ? dattn[i] * scale : 0.0;
    }

    // output projection
    const Tensor& wo = w.at(p + "attn.wo");
    std::vector<double> dctx(static_cast<size_t>(L) * H, 0.0);
    for (int i = 0; i < L; ++i)
      affine_backward(wo.data.data(), lt.ctx.data() + static_cast<size_t>(i) * H,
                      dattn.data() + static_cast<size_t>(i) * H, gptr(p + "attn.wo"), gptr(p + "attn.bo"),
                      dctx.data() + static_cast<size_t>(i) * H, H, H);

    // attention core
    std::vector<double> dq(static_cast<size_t>(L) * H, 0.0);
    std::vector<double> dk(static_cast<size_t>(L) * H, 0.0);
    std::vector<double> dv(static_cast<size_t>(L) * H, 0.0);
    std::vector<double> dprow(static_cast<size_t>(L));
    for (int h = 0; h < heads; ++h) {
      int off = h * Dh;
      for (int i = 0; i < L; ++i) {
        const double* prow = lt.probs.data() + (static_cast<size_t>(h) * L + i) * L;
        const double* dctx_i = dctx.data() + static_cast<size_t>(i) * H + off;
        double dot = 0.0;
        for (int j = 0; j < L; ++j) {
          if (prow[j] == 0.0) {
            dprow[static_cast<size_t>(j)] = 0.0;
            continue;
          }
          const double* vj = lt.v.data() + static_cast<size_t>(j) * H + off;
          double dp = 0.0;
          for (int d = 0; d < Dh; ++d) dp += dctx_i[d] * vj[d];
          dprow[static_cast<size_t>(j)] = dp;
          dot += dp * prow[j];
          double* dvj = dv.data() + static_cast<size_t>(j) * H + off;
          for (int d = 0; d < Dh; ++d) dvj[d] += prow[j] * dctx_i[d];
        }
        const double* qi = lt.q.data() + static_cast<size_t>(i) * H + off;
        double* dqi = dq.data() + static_cast<size_t>(i) * H + off;
        for (int j = 0; j < L; ++j) {
          if (prow[j] == 0.0) continue;
          double ds = prow[j] * (dprow[static_cast<size_t>(j)] - dot) * inv_sqrt_dh;
          const double* kj = lt.k.data() + static_cast<size_t>(j) * H + off;
          double* dkj = dk.data() + static_cast<size_t>(j) * H + off;
          for (int d = 0; d < Dh; ++d) {
            dqi[d] += ds * kj[d];
            dkj[d] += ds * qi[d];
          }
        }
      }
    }

    // q/k/v projections
    const Tensor& wq = w.at(p + "attn.wq");
    const Tensor& wk = w.at(p + "attn.wk");
    const Tensor& wv = w.at(p + "attn.wv");
    for (int i = 0; i < L; ++i) {
      const double* xi = lt.input.data() + static_cast<size_t>(i) * H;
      double* dxi = dinput.data() + static_cast<size_t>(i) * H;
      affine_backward(wq.data.data(), xi, dq.data() + static_cast<size_t>(i) * H, gptr(p + "attn.wq"),
                      gptr(p + "attn.bq"), dxi, H, H);
      affine_backward(wk.data.data(), xi, dk.data() + static_cast<size_t>(i) * H, gptr(p + "attn.wk"),
                      gptr(p + "attn.bk"), dxi, H, H);
      affine_backward(wv.data.data(), xi, dv.data() + static_cast<size_t>(i) * H, gptr(p + "attn.wv"),
                      gptr(p + "attn.bv"), dxi, H, H);
    }

    dx = std::move(dinput);
  }

  // embedding scatter
  double* dtok = grads[static_cast<size_t>(w.index_of("tok_emb"))].data();
  double* dpos = grads[static_cast<size_t>(w.index_of("pos_emb"))].data();
  double* dtyp = grads[static_cast<size_t>(w.index_of("type_emb"))].data();
  for (int l = 0; l < L; ++l) {
    const double* dl = dx.data() + static_cast<size_t>(l) * H;
    double* dt = dtok + static_cast<size_t>(tr.ids[static_cast<size_t>(l)]) * H;
    double* dp = dpos + static_cast<size_t>(l) * H;
    double* dy = dtyp + static_cast<size_t>(tr.types[static_cast<size_t>(l)]) * H;
    for (int j = 0; j < H; ++j) {
      dt[j] += dl[j];
      dp[j] += dl[j];
      dy[j] += dl[j];
    }
  }

  // frozen tensors / rows produce no gradient
  for (size_t t = 0; t < w.tensors.size(); ++t) {
    const Tensor& tw = w.tensors[t];
    if (tw.frozen) {
      std::fill(grads[t].begin(), grads[t].end(), 0.0);
    } else if (tw.frozen_row_end > tw.frozen_row_begin) {
      size_t cols = tw.cols();
      std::fill(grads[t].begin() + static_cast<std::ptrdiff_t>(tw.frozen_row_begin * cols),
                grads[t].begin() + static_cast<std::ptrdiff_t>(tw.frozen_row_end * cols), 0.0);
    }
  }
}

double loss_and_gradients(const ModelWeights& w, const corpus::TrainingExample& ex, Gradients* grads,
                          bool dropout_off, uint64_t dropout_seed) {
  ForwardTrace tr = loss(w, ex, dropout_off, dropout_seed);
  if (grads) backward(w, tr, *grads);
  return tr.loss_value;
}

void save_checkpoint(const std::string& path, const ModelWeights& w, const std::vector<Tensor>* extra) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  BinaryWriter bw(os);
  bw.magic(kMagic);
  bw.u32(kVersion);
  bw.u32(static_cast<uint32_t>(w.cfg.n_layers));
  bw.u32(static_cast<uint32_t>(w.cfg.hidden));
  bw.u32(static_cast<uint32_t>(w.cfg.n_heads));
  bw.u32(static_cast<uint32_t>(w.cfg.ffn_mult));
  bw.u32(static_cast<uint32_t>(w.cfg.vocab_size));
  bw.u32(static_cast<uint32_t>(w.cfg.l_max));
  bw.f64(w.cfg.dropout);
  bw.f64(w.cfg.w_text);
  bw.f64(w.cfg.w_video);
  bw.f64(w.cfg.w_cross);
  bw.u32(w.text_vocab_size);
  bw.u32(static_cast<uint32_t>(w.freeze_mode));
  uint32_t count = static_cast<uint32_t>(w.tensors.size() + (extra ? extra->size() : 0));
  bw.u32(count);
  auto write_tensor = [&](const Tensor& t) {
    bw.str(t.name);
    bw.u32(static_cast<uint32_t>(t.dims.size()));
    for (uint32_t d : t.dims) bw.u32(d);
    bw.f32s(t.data.data(), t.data.size());
  };
  for (const auto& t : w.tensors) write_tensor(t);
  if (extra)
    for (const auto& t : *extra) write_tensor(t);
  if (!os) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  BinaryReader br(is);
  br.expect_magic(kMagic, path);
  if (br.u32() != kVersion) throw FormatError(FormatErrorKind::bad_version, "unsupported checkpoint version");

  ModelConfig cfg;
  cfg.n_layers = static_cast<int>(br.u32());
  cfg.hidden = static_cast<int>(br.u32());
  cfg.n_heads = static_cast<int>(br.u32());
  cfg.ffn_mult = static_cast<int>(br.u32());
  cfg.vocab_size = static_cast<int>(br.u32());
  cfg.l_max = static_cast<int>(br.u32());
  cfg.dropout = br.f64();
  cfg.w_text = br.f64();
  cfg.w_video = br.f64();
  cfg.w_cross = br.f64();
  uint32_t text_vocab = br.u32();
  uint32_t freeze = br.u32();
  cfg.validate();

  Checkpoint ck;
  ck.weights.cfg = cfg;
  ck.weights.text_vocab_size = text_vocab;
  auto specs = tensor_specs(cfg);
  std::unordered_map<std::string, size_t> expected;
  ck.weights.tensors.resize(specs.size());
  for (size_t i = 0; i < specs.size(); ++i) {
    ck.weights.tensors[i].name = specs[i].name;
    ck.weights.tensors[i].dims = specs[i].dims;
    expected[specs[i].name] = i;
  }

  uint32_t count = br.u32();
  std::vector<bool> seen(specs.size(), false);
  for (uint32_t t = 0; t < count; ++t) {
    std::string name = br.str();
    uint32_t rank = br.u32();
    if (rank > 8) throw FormatError(FormatErrorKind::malformed, "implausible tensor rank");
    std::vector<uint32_t> dims(rank);
    size_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      dims[i] = br.u32();
      n *= dims[i];
    }
    std::vector<float> data(n);
    br.f32s(data.data(), n);
    auto it = expected.find(name);
    if (it != expected.end()) {
      Tensor& dst = ck.weights.tensors[it->second];
      if (dims != dst.dims)
        throw FormatError(FormatErrorKind::shape_mismatch, "tensor " + name + " has unexpected shape");
      dst.data = std::move(data);
      seen[it->second] = true;
    } else {
      Tensor e;
      e.name = std::move(name);
      e.dims = std::move(dims);
      e.data = std::move(data);
      ck.extra.push_back(std::move(e));
    }
  }
  for (size_t i = 0; i < specs.size(); ++i)
    if (!seen[i])
      throw FormatError(FormatErrorKind::shape_mismatch, "checkpoint missing tensor " + specs[i].name);

  ck.weights.apply_freeze(static_cast<FreezeMode>(freeze));
  return ck;
}

}  // namespace vtlm::model
