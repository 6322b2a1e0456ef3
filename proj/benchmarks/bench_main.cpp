#include <benchmark/benchmark.h>

#include "vtlm/common.hpp"
#include "vtlm/corpus.hpp"
#include "vtlm/model.hpp"
#include "vtlm/synth.hpp"
#include "vtlm/text.hpp"
#include "vtlm/vq.hpp"

using namespace vtlm;

namespace {

std::vector<vq::FeatureVector> bench_points(int n, int dim) {
  Rng rng(7);
  std::vector<vq::FeatureVector> pts(static_cast<size_t>(n), vq::FeatureVector(static_cast<size_t>(dim)));
  for (auto& p : pts)
    for (auto& x : p) x = static_cast<float>(rng.normal());
  return pts;
}

void BM_VqFit(benchmark::State& state) {
  auto pts = bench_points(2000, 32);
  for (auto _ : state) {
    auto cb = vq::fit_hierarchical(pts, 4, 2, 1, 25);
    benchmark::DoNotOptimize(cb);
  }
}
BENCHMARK(BM_VqFit)->Unit(benchmark::kMillisecond);

void BM_VqEncode(benchmark::State& state) {
  auto pts = bench_points(2000, 32);
  auto cb = vq::fit_hierarchical(pts, 8, 2, 1, 25);
  size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(vq::encode(cb, pts[i++ % pts.size()]));
  }
}
BENCHMARK(BM_VqEncode);

void BM_Wordpiece(benchmark::State& state) {
  auto vocab = text::TextVocab::build({{"now i pour the bowl and then whisk the batter until smooth", 0, 1}});
  for (auto _ : state) {
    benchmark::DoNotOptimize(text::wordpiece_tokenize("now i whisk the unbatterable bowl", vocab));
  }
}
BENCHMARK(BM_Wordpiece);

struct ModelFixture {
  corpus::JointVocab vocab;
  model::ModelWeights weights;
  corpus::TrainingExample ex;

  ModelFixture() : weights(make_weights()) {
    ex.regime = corpus::Regime::video_text;
    ex.input_ids = {corpus::JointVocab::kCls, vocab.text_id(1), corpus::JointVocab::kMask, vocab.text_id(3),
                    corpus::JointVocab::kGlue, vocab.video_id(0), corpus::JointVocab::kMask, vocab.video_id(2),
                    corpus::JointVocab::kSep};
    ex.type_ids = {0, 0, 0, 0, 0, 1, 1, 1, 1};
    ex.mask_labels = {{2, vocab.text_id(2)}, {6, vocab.video_id(1)}};
    ex.alignment = 1;
  }

  model::ModelWeights make_weights() {
    std::vector<std::string> entries = {"[UNK]"};
    for (int i = 1; i < 64; ++i) entries.push_back("w" + std::to_string(i));
    vocab.text = text::TextVocab::from_entries(std::move(entries));
    vocab.video_count = 100;
    model::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.hidden = 48;
    cfg.n_heads = 4;
    cfg.ffn_mult = 2;
    cfg.vocab_size = vocab.size();
    cfg.l_max = 40;
    cfg.dropout = 0.0;
    return model::ModelWeights::init(cfg, static_cast<uint32_t>(vocab.text.size()), 3);
  }
};

void BM_Forward(benchmark::State& state) {
  ModelFixture f;
  for (auto _ : state) {
    auto tr = model::forward(f.weights, f.ex.input_ids, f.ex.type_ids);
    benchmark::DoNotOptimize(tr.hidden().data());
  }
}
BENCHMARK(BM_Forward);

void BM_LossAndGradients(benchmark::State& state) {
  ModelFixture f;
  auto grads = model::make_gradients(f.weights);
  for (auto _ : state) {
    model::zero_gradients(grads);
    benchmark::DoNotOptimize(model::loss_and_gradients(f.weights, f.ex, &grads));
  }
}
BENCHMARK(BM_LossAndGradients);

void BM_SynthGenerate(benchmark::State& state) {
  synth::SyntheticSpec spec;
  spec.n_verbs = 5;
  spec.n_nouns = 5;
  spec.layout_k = 5;
  spec.layout_d = 2;
  spec.feature_dim = 16;
  spec.n_docs = 50;
  spec.transition = synth::transition_uniform(25);
  for (auto _ : state) {
    auto out = synth::synth_generate(spec, 3);
    benchmark::DoNotOptimize(out.features.data.data());
  }
}
BENCHMARK(BM_SynthGenerate)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
