#include "vtlm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "vtlm/common.hpp"

namespace vtlm::train {

void TrainConfig::validate() const {
  if (total_steps <= 0) throw std::invalid_argument("train config: total_steps must be > 0");
  if (batch_size <= 0) throw std::invalid_argument("train config: batch_size must be > 0");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
    throw std::invalid_argument("train config: warmup_fraction must be in [0,1)");
  if (lr_init < 0.0) throw std::invalid_argument("train config: negative learning rate");
  if (regime_text < 0.0 || regime_video < 0.0 || regime_cross < 0.0)
    throw std::invalid_argument("train config: negative regime weight");
  if (regime_text + regime_video + regime_cross <= 0.0)
    throw std::invalid_argument("train config: all regime weights zero");
}

double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) throw std::invalid_argument("lr_at: step out of range");
  double total = static_cast<double>(cfg.total_steps);
  double warmup = cfg.warmup_fraction * total;
  double s = static_cast<double>(step);
  if (s < warmup) return cfg.lr_init * s / warmup;
  return cfg.lr_init * (total - s) / (total - warmup);
}

AdamState AdamState::init(const model::ModelWeights& w) {
  AdamState s;
  s.m.resize(w.tensors.size());
  s.v.resize(w.tensors.size());
  for (size_t i = 0; i < w.tensors.size(); ++i) {
    s.m[i].assign(w.tensors[i].size(), 0.0f);
    s.v[i].assign(w.tensors[i].size(), 0.0f);
  }
  return s;
}

void adam_update(model::ModelWeights& w, const model::Gradients& grads, AdamState& state, double lr,
                 const AdamConfig& cfg) {
  if (grads.size() != w.tensors.size() || state.m.size() != w.tensors.size())
    throw std::invalid_argument("adam_update: shape mismatch");
  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  for (size_t t = 0; t < w.tensors.size(); ++t) {
    model::Tensor& tw = w.tensors[t];
    if (grads[t].size() != tw.size()) throw std::invalid_argument("adam_update: shape mismatch");
    if (tw.frozen) continue;
    size_t cols = tw.cols();
    size_t freeze_lo = static_cast<size_t>(tw.frozen_row_begin) * cols;
    size_t freeze_hi = static_cast<size_t>(tw.frozen_row_end) * cols;
    for (size_t i = 0; i < tw.size(); ++i) {
      if (i >= freeze_lo && i < freeze_hi) continue;
      double g = grads[t][i];
      if (!std::isfinite(g)) throw std::runtime_error("adam_update: non-finite gradient");
      double m = cfg.beta1 * static_cast<double>(state.m[t][i]) + (1.0 - cfg.beta1) * g;
      double v = cfg.beta2 * static_cast<double>(state.v[t][i]) + (1.0 - cfg.beta2) * g * g;
      state.m[t][i] = static_cast<float>(m);
      state.v[t][i] = static_cast<float>(v);
      double update = lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      tw.data[i] = static_cast<float>(static_cast<double>(tw.data[i]) - update);
    }
  }
}

std::vector<model::Tensor> adam_to_tensors(const model::ModelWeights& w, const AdamState& s) {
  std::vector<model::Tensor> out;
  out.reserve(w.tensors.size() * 2 + 1);
  for (size_t i = 0; i < w.tensors.size(); ++i) {
    model::Tensor m;
    m.name = "adam.m." + w.tensors[i].name;
    m.dims = w.tensors[i].dims;
    m.data = s.m[i];
    out.push_back(std::move(m));
    model::Tensor v;
    v.name = "adam.v." + w.tensors[i].name;
    v.dims = w.tensors[i].dims;
    v.data = s.v[i];
    out.push_back(std::move(v));
  }
  model::Tensor step;
  step.name = "adam.step";
  step.dims = {1};
  step.data = {static_cast<float>(s.step)};
  out.push_back(std::move(step));
  return out;
}

AdamState adam_from_tensors(const model::ModelWeights& w, const std::vector<model::Tensor>& extra) {
  AdamState s = AdamState::init(w);
  for (const auto& t : extra) {
    if (t.name == "adam.step") {
      s.step = static_cast<int64_t>(t.data.at(0));
      continue;
    }
    bool is_m = t.name.rfind("adam.m.", 0) == 0;
    bool is_v = t.name.rfind("adam.v.", 0) == 0;
    if (!is_m && !is_v) continue;
    std::string base = t.name.substr(7);
    int idx = w.index_of(base);
    auto& dst = is_m ? s.m[static_cast<size_t>(idx)] : s.v[static_cast<size_t>(idx)];
    if (t.data.size() != dst.size()) throw std::runtime_error("adam state shape mismatch for " + t.name);
    dst = t.data;
  }
  return s;
}

namespace {

corpus::Regime pick_regime(const TrainConfig& cfg, Rng& rng) {
  double total = cfg.regime_text + cfg.regime_video + cfg.regime_cross;
  double roll = rng.uniform() * total;
  if (roll < cfg.regime_text) return corpus::Regime::text_only;
  if (roll < cfg.regime_text + cfg.regime_video) return corpus::Regime::video_only;
  return corpus::Regime::video_text;
}

}  // namespace

TrainResult train(const std::vector<corpus::Document>& docs, const corpus::JointVocab& vocab,
                  const vq::Codebook* codebook, model::ModelConfig mcfg, TrainConfig tcfg,
                  corpus::ExampleConfig ecfg, const std::string& out_dir, const std::string& resume_from) {
  tcfg.validate();
  if (mcfg.vocab_size == 0) mcfg.vocab_size = vocab.size();
  if (mcfg.vocab_size != vocab.size())
    throw std::invalid_argument("train: model vocab_size disagrees with the joint vocabulary");
  mcfg.validate();
  if (ecfg.l_max > mcfg.l_max) ecfg.l_max = mcfg.l_max;

  corpus::ExampleSampler sampler(docs, vocab, ecfg);
  if (tcfg.regime_text > 0.0 && !sampler.has(corpus::Regime::text_only))
    throw std::invalid_argument("train: text regime weighted but corpus has no text");
  if (tcfg.regime_video > 0.0 && !sampler.has(corpus::Regime::video_only))
    throw std::invalid_argument("train: video regime weighted but corpus has no video");
  if (tcfg.regime_cross > 0.0 && !sampler.has(corpus::Regime::video_text))
    throw std::invalid_argument("train: video-text regime weighted but corpus has no aligned pairs");

  std::filesystem::create_directories(out_dir);

  TrainResult result;
  int64_t start_step = 0;
  if (!resume_from.empty()) {
    model::Checkpoint ck = model::load_checkpoint(resume_from);
    if (ck.weights.cfg.vocab_size != mcfg.vocab_size)
      throw std::invalid_argument("train: resume checkpoint vocab mismatch");
    result.weights = std::move(ck.weights);
    result.adam = adam_from_tensors(result.weights, ck.extra);
    start_step = result.adam.step;
  } else {
    result.weights = model::ModelWeights::init(mcfg, static_cast<uint32_t>(vocab.text.size()),
                                               mix_seed(tcfg.seed, 0x1417ULL));
    if (codebook) result.weights.set_video_embeddings(*codebook, mix_seed(tcfg.seed, 0x9207ULL),
                                                      tcfg.video_embedding_norm);
    result.weights.apply_freeze(tcfg.freeze);
    result.adam = AdamState::init(result.weights);
  }

  int threads = effective_threads(tcfg.threads);
  int batch = tcfg.batch_size;

  // per-chunk gradient buffers; reduced in chunk order so a fixed thread
  // count gives bitwise-identical results
  size_t workers = std::min<size_t>(static_cast<size_t>(threads), static_cast<size_t>(batch));
  size_t chunk = (static_cast<size_t>(batch) + workers - 1) / workers;
  size_t n_chunks = (static_cast<size_t>(batch) + chunk - 1) / chunk;
  std::vector<model::Gradients> chunk_grads;
  for (size_t c = 0; c < n_chunks; ++c) chunk_grads.push_back(model::make_gradients(result.weights));
  model::Gradients total_grads = model::make_gradients(result.weights);

  std::ostringstream metrics;
  std::vector<double> ex_loss(static_cast<size_t>(batch));
  std::vector<corpus::Regime> ex_regime(static_cast<size_t>(batch));

  auto save_ck = [&](const std::string& path) {
    auto extra = adam_to_tensors(result.weights, result.adam);
    model::save_checkpoint(path, result.weights, &extra);
  };

  for (int64_t step = start_step; step < tcfg.total_steps; ++step) {
    for (auto& g : chunk_grads) model::zero_gradients(g);

    parallel_for(static_cast<size_t>(batch), threads, [&](size_t begin, size_t end) {
      size_t c = begin / chunk;
      for (size_t i = begin; i < end; ++i) {
        Rng rng(mix_seed(tcfg.seed, 0xBA7C4ULL, static_cast<uint64_t>(step), i));
        corpus::Regime regime = pick_regime(tcfg, rng);
        corpus::TrainingExample ex = sampler.sample(regime, rng);
        uint64_t dropout_seed = mix_seed(tcfg.seed, 0xD207ULL, static_cast<uint64_t>(step), i);
        bool dropout_off = mcfg.dropout <= 0.0;
        ex_regime[i] = regime;
        ex_loss[i] = model::loss_and_gradients(result.weights, ex, &chunk_grads[c], dropout_off, dropout_seed);
      }
    });

    model::zero_gradients(total_grads);
    for (const auto& g : chunk_grads)
      for (size_t t = 0; t < g.size(); ++t)
        for (size_t i = 0; i < g[t].size(); ++i) total_grads[t][i] += g[t][i];
    double inv_batch = 1.0 / static_cast<double>(batch);
    for (auto& t : total_grads)
      for (auto& v : t) v *= inv_batch;

    if (tcfg.grad_clip > 0.0) {
      double norm2 = 0.0;
      for (const auto& t : total_grads)
        for (double v : t) norm2 += v * v;
      double norm = std::sqrt(norm2);
      if (norm > tcfg.grad_clip) {
        double scale = tcfg.grad_clip / norm;
        for (auto& t : total_grads)
          for (auto& v : t) v *= scale;
      }
    }

    double lr = lr_at(step, tcfg);
    adam_update(result.weights, total_grads, result.adam, lr, tcfg.adam);

    // one metrics line per regime present in the batch
    double sums[3] = {0, 0, 0};
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < batch; ++i) {
      int r = static_cast<int>(ex_regime[static_cast<size_t>(i)]);
      sums[r] += ex_loss[static_cast<size_t>(i)];
      ++counts[r];
    }
    for (int r = 0; r < 3; ++r) {
      if (counts[r] == 0) continue;
      std::string line = std::to_string(step) + '\t' + corpus::regime_name(static_cast<corpus::Regime>(r)) +
                         '\t' + fmt_double(sums[r] / counts[r]) + '\t' + fmt_double(lr);
      metrics << line << '\n';
      result.metrics_lines.push_back(line);
    }

    if (tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 &&
        step + 1 < tcfg.total_steps) {
      save_ck(out_dir + "/checkpoint_step" + std::to_string(step + 1) + ".bin");
    }
  }

  result.checkpoint_path = out_dir + "/checkpoint.bin";
  save_ck(result.checkpoint_path);
  result.metrics_path = out_dir + "/metrics.tsv";
  write_text_file(result.metrics_path, metrics.str());
  return result;
}

}  // namespace vtlm::train
