#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vtlm/corpus.hpp"
#include "vtlm/vq.hpp"

namespace vtlm::model {

struct ModelConfig {
  int n_layers = 2;
  int hidden = 64;
  int n_heads = 4;
  int ffn_mult = 4;
  int vocab_size = 0;
  int l_max = 128;
  double dropout = 0.1;
  // objective weights: w_text/w_video scale their regimes' masked-token term,
  // w_cross scales the alignment term (the video-text masked term has weight 1)
  double w_text = 1.0;
  double w_video = 1.0;
  double w_cross = 1.0;

  int head_dim() const { return hidden / n_heads; }
  int ffn_dim() const { return hidden * ffn_mult; }
  void validate() const;
};

enum class FreezeMode : uint32_t { none = 0, video_rows = 1, all_rows = 2 };

struct Tensor {
  std::string name;
  std::vector<uint32_t> dims;
  std::vector<float> data;
  bool frozen = false;
  // for row-frozen 2-D tensors: rows [begin, end) receive no updates
  uint32_t frozen_row_begin = 0;
  uint32_t frozen_row_end = 0;

  size_t size() const { return data.size(); }
  uint32_t rows() const { return dims.empty() ? 0 : dims[0]; }
  uint32_t cols() const { return dims.size() < 2 ? 1 : dims[1]; }
};

// All parameters, flat f32 storage. Arithmetic everywhere runs in double;
// f32 is the persistent representation, which keeps checkpoints lossless.
struct ModelWeights {
  ModelConfig cfg;
  uint32_t text_vocab_size = 0;
  FreezeMode freeze_mode = FreezeMode::none;
  std::vector<Tensor> tensors;

  int index_of(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  int video_row_begin() const { return corpus::JointVocab::kSpecialCount + static_cast<int>(text_vocab_size); }
  int video_row_end() const { return cfg.vocab_size; }

  static ModelWeights init(const ModelConfig& cfg, uint32_t text_vocab_size, uint64_t seed);

  // video-token embedding rows from leaf centroids via a seeded Gaussian
  // projection, rescaled to row_norm
  void set_video_embeddings(const vq::Codebook& cb, uint64_t projection_seed, double row_norm = 0.2);

  void apply_freeze(FreezeMode mode);
};

using Gradients = std::vector<std::vector<double>>;  // parallel to tensors

Gradients make_gradients(const ModelWeights& w);
void zero_gradients(Gradients& g);

struct LayerTrace {
  std::vector<double> input;      // L x H
  std::vector<double> q, k, v;    // L x H
  std::vector<double> probs;      // heads x L x L
  std::vector<double> ctx;        // L x H
  std::vector<double> attn_out;   // L x H, after output proj (+ dropout)
  std::vector<uint8_t> attn_keep;
  std::vector<double> res1;       // L x H
  std::vector<double> ln1_xhat;   // L x H
  std::vector<double> ln1_rstd;   // L
  std::vector<double> y;          // L x H
  std::vector<double> ffn_pre;    // L x F
  std::vector<double> ffn_out;    // L x H (+ dropout)
  std::vector<uint8_t> ffn_keep;
  std::vector<double> res2;       // L x H
  std::vector<double> ln2_xhat;   // L x H
  std::vector<double> ln2_rstd;   // L
  std::vector<double> out;        // L x H
};

struct ForwardTrace {
  int L = 0;
  std::vector<int> ids, types;
  std::vector<uint8_t> pad;  // 1 = [PAD] position
  bool dropout_on = false;
  double dropout_rate = 0.0;
  std::vector<double> emb;  // L x H
  std::vector<LayerTrace> layers;

  const std::vector<double>& hidden() const { return layers.empty() ? emb : layers.back().out; }

  // loss-head intermediates (set by loss())
  corpus::Regime regime = corpus::Regime::text_only;
  double mlm_weight = 0.0;
  std::vector<int> mlm_positions;
  std::vector<int> mlm_targets;
  std::vector<double> mlm_pre;    // n x H
  std::vector<double> mlm_xhat;   // n x H
  std::vector<double> mlm_rstd;   // n
  std::vector<double> mlm_g;      // n x H
  std::vector<double> mlm_probs;  // n x V
  bool has_alignment = false;
  int alignment_target = 0;
  double alignment_logit = 0.0;
  double loss_value = 0.0;
};

// out[l] = tok_emb[id_l] + pos_emb[l] + type_emb[type_l]
std::vector<double> embed(const ModelWeights& w, std::span<const int> ids, std::span<const int> types);

// Post-layer-norm encoder. pad_mask may be empty (nothing padded); padded
// positions are excluded as attention keys. Throws on non-finite activations.
ForwardTrace forward(const ModelWeights& w, std::span<const int> ids, std::span<const int> types,
                     std::span<const uint8_t> pad_mask = {}, bool dropout_off = true, uint64_t dropout_seed = 0);

// logit(l, v) = tok_emb[v] . g(hidden_l) + out_bias[v], with
// g = layer_norm(gelu(W h + b)); output projection is tied to the embedding.
std::vector<double> mlm_logits(const ModelWeights& w, std::span<const double> hidden,
                               std::span<const int> positions);

double alignment_logit(const ModelWeights& w, std::span<const double> hidden);

// Weighted pseudo-likelihood objective for one example: mean masked-token
// cross-entropy plus (video-text only) alignment binary cross-entropy.
ForwardTrace loss(const ModelWeights& w, const corpus::TrainingExample& ex, bool dropout_off = true,
                  uint64_t dropout_seed = 0);

// Exact gradients of trace.loss_value; accumulates into grads. Frozen
// tensors/rows are zeroed on the way out.
void backward(const ModelWeights& w, const ForwardTrace& trace, Gradients& grads);

double loss_and_gradients(const ModelWeights& w, const corpus::TrainingExample& ex, Gradients* grads,
                          bool dropout_off = true, uint64_t dropout_seed = 0);

// Checkpoint file ("VBCK"): config header then named f32 tensors. Extra
// tensors (optimizer state) ride along and come back in `extra`.
void save_checkpoint(const std::string& path, const ModelWeights& w, const std::vector<Tensor>* extra = nullptr);

struct Checkpoint {
  ModelWeights weights;
  std::vector<Tensor> extra;
};

Checkpoint load_checkpoint(const std::string& path);

double gelu(double x);
double gelu_grad(double x);

}  // namespace vtlm::model
