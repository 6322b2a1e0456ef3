#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vtlm/corpus.hpp"
#include "vtlm/model.hpp"

namespace vtlm::train {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  int total_steps = 1000;
  int batch_size = 32;
  double lr_init = 1e-5;
  double warmup_fraction = 0.01;
  AdamConfig adam;
  // regime sampling weights (mixing ratio), text : video : video-text
  double regime_text = 1.0;
  double regime_video = 1.0;
  double regime_cross = 1.0;
  uint64_t seed = 1;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  int threads = 1;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  model::FreezeMode freeze = model::FreezeMode::video_rows;
  double video_embedding_norm = 0.2;

  void validate() const;
};

// linear warmup to lr_init over warmup_fraction*total_steps, then linear
// decay to 0 at total_steps
double lr_at(int64_t step, const TrainConfig& cfg);

struct AdamState {
  std::vector<std::vector<float>> m, v;  // parallel to weights
  int64_t step = 0;

  static AdamState init(const model::ModelWeights& w);
};

// one bias-corrected Adam step; frozen tensors/rows are skipped
void adam_update(model::ModelWeights& w, const model::Gradients& grads, AdamState& state, double lr,
                 const AdamConfig& cfg);

struct TrainResult {
  std::string checkpoint_path;
  std::string metrics_path;
  std::vector<std::string> metrics_lines;  // "step \t regime \t loss \t lr"
  model::ModelWeights weights;
  AdamState adam;
};

// Full loop: sample regime-mixed batches, average per-example gradients,
// Adam with the linear schedule, periodic checkpoints + metrics log.
// Deterministic given (config, seed) at a fixed thread count; per-step RNG is
// counter-derived so a resumed run replays the same batches.
TrainResult train(const std::vector<corpus::Document>& docs, const corpus::JointVocab& vocab,
                  const vq::Codebook* codebook, model::ModelConfig mcfg, TrainConfig tcfg,
                  corpus::ExampleConfig ecfg, const std::string& out_dir, const std::string& resume_from = {});

// Adam moments and step counter as checkpoint rider tensors ("adam." prefix).
std::vector<model::Tensor> adam_to_tensors(const model::ModelWeights& w, const AdamState& s);
AdamState adam_from_tensors(const model::ModelWeights& w, const std::vector<model::Tensor>& extra);

}  // namespace vtlm::train
