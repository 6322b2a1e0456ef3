#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "test_util.hpp"
#include "vtlm/trainer.hpp"

using namespace vtlm;
using corpus::Document;
using corpus::JointVocab;
using train::TrainConfig;

namespace {

std::vector<Document> overfit_docs() {
  std::vector<Document> docs(2);
  docs[0].doc_id = "a";
  docs[0].sentences = {{"now i pour the bowl", 0.0, 3.0}, {"now i stir the pan", 3.0, 6.0}};
  docs[0].clips = {{1, 0.0}, {1, 1.5}, {2, 3.0}, {2, 4.5}};
  docs[1].doc_id = "b";
  docs[1].sentences = {{"now i bake the cake", 0.0, 3.0}, {"now i cut the bread", 3.0, 6.0}};
  docs[1].clips = {{3, 0.0}, {3, 1.5}, {4, 3.0}, {4, 4.5}};
  return docs;
}

model::ModelConfig tiny_model(const JointVocab& v) {
  model::ModelConfig m;
  m.n_layers = 1;
  m.hidden = 16;
  m.n_heads = 2;
  m.ffn_mult = 2;
  m.vocab_size = v.size();
  m.l_max = 24;
  m.dropout = 0.0;
  return m;
}

}  // namespace

TEST_CASE("lr_at: no warmup") {
  TrainConfig cfg;
  cfg.total_steps = 100;
  cfg.lr_init = 2e-3;
  cfg.warmup_fraction = 0.0;
  CHECK(train::lr_at(0, cfg) == doctest::Approx(2e-3));
  CHECK(train::lr_at(100, cfg) == doctest::Approx(0.0));
  CHECK(train::lr_at(50, cfg) == doctest::Approx(1e-3));
  CHECK_THROWS_AS(train::lr_at(-1, cfg), std::invalid_argument);
  CHECK_THROWS_AS(train::lr_at(101, cfg), std::invalid_argument);
}

TEST_CASE("lr_at: warmup then decay, piecewise linear, nonnegative, continuous") {
  TrainConfig cfg;
  cfg.total_steps = 1000;
  cfg.lr_init = 1e-2;
  cfg.warmup_fraction = 0.1;
  CHECK(train::lr_at(0, cfg) == doctest::Approx(0.0));
  CHECK(train::lr_at(50, cfg) == doctest::Approx(5e-3));
  CHECK(train::lr_at(100, cfg) == doctest::Approx(1e-2));
  CHECK(train::lr_at(550, cfg) == doctest::Approx(5e-3));
  CHECK(train::lr_at(1000, cfg) == doctest::Approx(0.0));
  double prev = train::lr_at(0, cfg);
  for (int s = 1; s <= 1000; ++s) {
    double cur = train::lr_at(s, cfg);
    CHECK(cur >= 0.0);
    CHECK(std::abs(cur - prev) <= cfg.lr_init / 100.0 + 1e-12);  // continuity at step granularity
    prev = cur;
  }
}

TEST_CASE("adam_update: zero gradient and zero state is the identity") {
  auto v = testutil::make_vocab(overfit_docs(), 8);
  auto m = tiny_model(v);
  auto w = model::ModelWeights::init(m, static_cast<uint32_t>(v.text.size()), 5);
  auto before = w.tensors;
  auto grads = model::make_gradients(w);
  auto state = train::AdamState::init(w);
  train::adam_update(w, grads, state, 0.1, {});
  for (size_t t = 0; t < w.tensors.size(); ++t) CHECK(w.tensors[t].data == before[t].data);
  for (const auto& mm : state.m)
    for (float x : mm) CHECK(x == 0.0f);
}

TEST_CASE("adam_update: hand-computed first step on a scalar") {
  // theta=0, g=1, lr=0.1 -> m_hat=1, v_hat=1, delta ~= -0.1
  JointVocab v;
  v.text = text::TextVocab::from_entries({"[UNK]"});
  v.video_count = 1;
  model::ModelConfig m;
  m.n_layers = 0;
  m.hidden = 1;
  m.n_heads = 1;
  m.ffn_mult = 1;
  m.vocab_size = v.size();
  m.l_max = 2;
  m.dropout = 0.0;
  auto w = model::ModelWeights::init(m, 1, 3);
  auto& t = w.at("align.b");
  t.data[0] = 0.0f;
  auto grads = model::make_gradients(w);
  grads[static_cast<size_t>(w.index_of("align.b"))][0] = 1.0;
  auto state = train::AdamState::init(w);
  train::adam_update(w, grads, state, 0.1, {});
  CHECK(state.step == 1);
  CHECK(t.data[0] == doctest::Approx(-0.1).epsilon(1e-6));

  // frozen tensors ignore any gradient
  auto w2 = model::ModelWeights::init(m, 1, 3);
  w2.at("align.b").frozen = true;
  auto g2 = model::make_gradients(w2);
  g2[static_cast<size_t>(w2.index_of("align.b"))][0] = 123.0;
  auto s2 = train::AdamState::init(w2);
  train::adam_update(w2, g2, s2, 0.1, {});
  CHECK(w2.at("align.b").data[0] == 0.0f);

  // non-finite gradients are rejected
  auto g3 = model::make_gradients(w);
  g3[0][0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(train::adam_update(w, g3, state, 0.1, {}), std::runtime_error);
}

TEST_CASE("training on a tiny corpus cuts the loss by half within 200 steps") {
  auto docs = overfit_docs();
  auto v = testutil::make_vocab(docs, 8);
  auto m = tiny_model(v);
  TrainConfig t;
  t.total_steps = 200;
  t.batch_size = 8;
  t.lr_init = 3e-3;
  t.warmup_fraction = 0.0;
  t.seed = 11;
  t.freeze = model::FreezeMode::none;
  corpus::ExampleConfig e;
  e.l_max = 24;

  auto dir = testutil::scratch_dir("train_overfit");
  auto result = train::train(docs, v, nullptr, m, t, e, dir);

  // average the first and last 20 per-step losses
  auto mean_loss = [&](size_t begin, size_t end) {
    double sum = 0.0;
    int n = 0;
    for (size_t i = begin; i < end; ++i) {
      const auto& line = result.metrics_lines[i];
      size_t p1 = line.find('\t');
      size_t p2 = line.find('\t', p1 + 1);
      size_t p3 = line.find('\t', p2 + 1);
      sum += std::stod(line.substr(p2 + 1, p3 - p2 - 1));
      ++n;
    }
    return sum / n;
  };
  double first = mean_loss(0, 20);
  double last = mean_loss(result.metrics_lines.size() - 20, result.metrics_lines.size());
  CHECK(last < 0.5 * first);
}

TEST_CASE("identical seeds give identical metrics logs") {
  auto docs = overfit_docs();
  auto v = testutil::make_vocab(docs, 8);
  auto m = tiny_model(v);
  TrainConfig t;
  t.total_steps = 25;
  t.batch_size = 4;
  t.lr_init = 1e-3;
  t.seed = 7;
  corpus::ExampleConfig e;
  e.l_max = 24;

  auto r1 = train::train(docs, v, nullptr, m, t, e, testutil::scratch_dir("train_det1"));
  auto r2 = train::train(docs, v, nullptr, m, t, e, testutil::scratch_dir("train_det2"));
  CHECK(r1.metrics_lines == r2.metrics_lines);
  CHECK(fnv1a64_file(r1.checkpoint_path) == fnv1a64_file(r2.checkpoint_path));

  TrainConfig t2 = t;
  t2.seed = 8;
  auto r3 = train::train(docs, v, nullptr, m, t2, e, testutil::scratch_dir("train_det3"));
  CHECK(r1.metrics_lines != r3.metrics_lines);
}

TEST_CASE("resume from a checkpoint replays the uninterrupted run exactly") {
  auto docs = overfit_docs();
  auto v = testutil::make_vocab(docs, 8);
  auto m = tiny_model(v);
  TrainConfig t;
  t.total_steps = 30;
  t.batch_size = 4;
  t.lr_init = 1e-3;
  t.seed = 19;
  t.checkpoint_every = 10;
  corpus::ExampleConfig e;
  e.l_max = 24;

  auto dir_full = testutil::scratch_dir("train_full");
  auto full = train::train(docs, v, nullptr, m, t, e, dir_full);

  auto dir_resume = testutil::scratch_dir("train_resume");
  auto resumed = train::train(docs, v, nullptr, m, t, e, dir_resume, dir_full + "/checkpoint_step20.bin");

  // the resumed log must be exactly the tail of the full log
  REQUIRE(resumed.metrics_lines.size() < full.metrics_lines.size());
  std::vector<std::string> tail(full.metrics_lines.end() - static_cast<std::ptrdiff_t>(resumed.metrics_lines.size()),
                                full.metrics_lines.end());
  CHECK(resumed.metrics_lines == tail);
  CHECK(fnv1a64_file(resumed.checkpoint_path) == fnv1a64_file(full.checkpoint_path));
}

TEST_CASE("train rejects a weighted regime with no data") {
  std::vector<Document> docs(2);
  docs[0].doc_id = "a";
  docs[0].clips = {{1, 0.0}, {2, 1.5}};  // video only, no sentences
  docs[1].doc_id = "b";
  docs[1].clips = {{3, 0.0}};
  JointVocab v;
  v.text = text::TextVocab::from_entries({"[UNK]"});
  v.video_count = 8;
  auto m = tiny_model(v);
  TrainConfig t;
  t.total_steps = 5;
  t.batch_size = 2;
  corpus::ExampleConfig e;
  CHECK_THROWS_AS(train::train(docs, v, nullptr, m, t, e, testutil::scratch_dir("train_bad")),
                  std::invalid_argument);

  // dropping the empty regimes trains fine
  t.regime_text = 0.0;
  t.regime_cross = 0.0;
  auto r = train::train(docs, v, nullptr, m, t, e, testutil::scratch_dir("train_videoonly"));
  CHECK(!r.metrics_lines.empty());
}

TEST_CASE("metrics lines are step, regime, loss, lr") {
  auto docs = overfit_docs();
  auto v = testutil::make_vocab(docs, 8);
  auto m = tiny_model(v);
  TrainConfig t;
  t.total_steps = 3;
  t.batch_size = 6;
  t.seed = 2;
  corpus::ExampleConfig e;
  e.l_max = 24;
  auto r = train::train(docs, v, nullptr, m, t, e, testutil::scratch_dir("train_metrics"));
  for (const auto& line : r.metrics_lines) {
    int tabs = 0;
    for (char c : line)
      if (c == '\t') ++tabs;
    CHECK(tabs == 3);
  }
  std::ifstream is(r.metrics_path);
  std::string first_line;
  std::getline(is, first_line);
  CHECK(first_line == r.metrics_lines[0]);
}
