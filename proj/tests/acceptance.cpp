// Acceptance suite: one pass/fail line per criterion, runnable via ctest.
// The training-backed criteria share two pretraining runs (deterministic-cycle
// corpus A for masked-token accuracy / zero-shot / alignment / data-size,
// branching-Markov corpus B for forecasting).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <set>

#include "test_util.hpp"
#include "vtlm/corpus.hpp"
#include "vtlm/eval.hpp"
#include "vtlm/model.hpp"
#include "vtlm/synth.hpp"
#include "vtlm/tasks.hpp"
#include "vtlm/trainer.hpp"
#include "vtlm/vq.hpp"

using namespace vtlm;
using corpus::Document;
using corpus::JointVocab;

namespace {

double now_s() {
  using clock = std::chrono::steady_clock;
  static const auto t0 = clock::now();
  return std::chrono::duration<double>(clock::now() - t0).count();
}

struct Timer {
  double start = now_s();
  double elapsed() const { return now_s() - start; }
};

void report(int criterion, bool pass, const std::string& detail, double seconds) {
  std::printf("[%s] criterion %d: %s (%.1fs)\n", pass ? "PASS" : "FAIL", criterion, detail.c_str(), seconds);
  std::fflush(stdout);
}

const std::vector<std::string> kTemplateWords = {"let", "me", "show", "you", "how", "to", "and", "then", "s"};

// ---------------------------------------------------------------------------
// shared pipeline pieces

struct BuiltCorpus {
  synth::SynthOutput raw;
  vq::Codebook codebook;
  std::vector<Document> docs;
  JointVocab vocab;
  std::vector<uint32_t> state_token;  // latent state -> visual token
};

std::vector<Document> tokenize_docs(const synth::SynthOutput& out, const vq::Codebook& cb) {
  std::vector<Document> docs;
  docs.reserve(out.docs.size());
  for (const auto& rd : out.docs) {
    Document d;
    d.doc_id = rd.doc_id;
    d.sentences = rd.sentences;
    for (const auto& c : rd.clips)
      d.clips.push_back({vq::encode(cb, out.features.row(c.feature_row)), c.start});
    docs.push_back(std::move(d));
  }
  return docs;
}

BuiltCorpus build_corpus(const synth::SyntheticSpec& spec, uint64_t gen_seed, uint64_t vq_seed,
                         const vq::Codebook* reuse_cb = nullptr, const text::TextVocab* reuse_vocab = nullptr) {
  BuiltCorpus b;
  b.raw = synth::synth_generate(spec, gen_seed);
  if (reuse_cb) {
    b.codebook = *reuse_cb;
  } else {
    std::vector<vq::FeatureVector> pts;
    pts.reserve(b.raw.features.rows());
    for (size_t r = 0; r < b.raw.features.rows(); ++r) {
      auto row = b.raw.features.row(r);
      pts.emplace_back(row.begin(), row.end());
    }
    b.codebook = vq::fit_hierarchical(pts, static_cast<uint32_t>(spec.layout_k),
                                      static_cast<uint32_t>(spec.layout_d), vq_seed, 100, 1e-6, 2);
  }
  b.docs = tokenize_docs(b.raw, b.codebook);
  if (reuse_vocab) {
    b.vocab.text = *reuse_vocab;
  } else {
    std::vector<text::Sentence> sentences;
    for (const auto& d : b.docs)
      for (const auto& s : d.sentences) sentences.push_back(s);
    for (const auto& w : kTemplateWords) sentences.push_back({w, 0.0, 0.0});
    b.vocab.text = text::TextVocab::build(sentences);
  }
  b.vocab.video_count = b.codebook.leaf_count();
  for (int s = 0; s < b.raw.spec.states(); ++s)
    b.state_token.push_back(vq::encode(b.codebook, b.raw.state_centroids.row(static_cast<size_t>(s))));
  return b;
}

synth::SyntheticSpec spec_a() {
  synth::SyntheticSpec spec;
  spec.n_verbs = 10;
  spec.n_nouns = 10;
  spec.feature_dim = 24;
  spec.sigma = 0.05;
  spec.clips_per_sentence = 2;
  spec.n_docs = 120;
  spec.sentences_per_doc = 8;
  spec.layout_k = 10;
  spec.layout_d = 2;
  spec.layout_seed = 7;
  spec.transition = synth::transition_cycle(100);
  return spec;
}

synth::SyntheticSpec spec_b() {
  synth::SyntheticSpec spec;
  spec.n_verbs = 4;
  spec.n_nouns = 4;  // dense 16-state layout, every leaf occupied
  spec.feature_dim = 16;
  spec.sigma = 0.05;
  spec.clips_per_sentence = 1;
  spec.n_docs = 150;
  spec.sentences_per_doc = 12;
  spec.layout_k = 4;
  spec.layout_d = 2;
  spec.layout_seed = 9;
  spec.transition = synth::transition_branching(16, {0.5, 0.3, 0.2});
  return spec;
}

model::ModelConfig model_cfg(const JointVocab& v) {
  model::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden = 64;
  cfg.n_heads = 4;
  cfg.ffn_mult = 2;
  cfg.vocab_size = v.size();
  cfg.l_max = 40;
  cfg.dropout = 0.0;
  return cfg;
}

train::TrainConfig train_cfg(int steps, uint64_t seed) {
  train::TrainConfig t;
  t.total_steps = steps;
  t.batch_size = 32;
  t.lr_init = 2e-3;
  t.warmup_fraction = 0.01;
  t.seed = seed;
  t.threads = 2;
  t.freeze = model::FreezeMode::video_rows;
  return t;
}

struct TrainedModel {
  BuiltCorpus train_corpus;
  BuiltCorpus eval_corpus;
  model::ModelWeights weights;
};

// corpus A shared across criteria 3,4,5,6
struct SharedA {
  BuiltCorpus train_full;
  BuiltCorpus eval;
  model::ModelWeights weights_full;   // 100% run
  double train_seconds_full = 0.0;
};

const SharedA& shared_a() {
  static std::unique_ptr<SharedA> cache;
  if (!cache) {
    cache = std::make_unique<SharedA>();
    auto spec = spec_a();
    cache->train_full = build_corpus(spec, 101, 11);
    auto eval_spec = spec;
    eval_spec.n_docs = 40;
    cache->eval = build_corpus(eval_spec, 202, 0, &cache->train_full.codebook, &cache->train_full.vocab.text);
    Timer t;
    corpus::ExampleConfig e;
    e.l_max = 40;
    auto result = train::train(cache->train_full.docs, cache->train_full.vocab, &cache->train_full.codebook,
                               model_cfg(cache->train_full.vocab), train_cfg(5000, 31), e,
                               testutil::scratch_dir("accept_a_full"));
    cache->weights_full = std::move(result.weights);
    cache->train_seconds_full = t.elapsed();
    std::fprintf(stderr, "[setup] corpus A full run trained in %.0fs\n", cache->train_seconds_full);
  }
  return *cache;
}

// masked-token accuracy over interior positions of video-only sequences
double mlm_video_accuracy(const model::ModelWeights& w, const BuiltCorpus& eval_corpus) {
  int correct = 0, total = 0;
  for (const auto& doc : eval_corpus.docs) {
    std::vector<int> ids, types;
    ids.push_back(JointVocab::kCls);
    types.push_back(corpus::kTypeA);
    for (const auto& c : doc.clips) {
      ids.push_back(eval_corpus.vocab.video_id(c.token));
      types.push_back(corpus::kTypeB);
    }
    ids.push_back(JointVocab::kSep);
    types.push_back(corpus::kTypeB);
    for (size_t p = 2; p + 2 < ids.size(); ++p) {  // interior token positions
      int original = ids[p];
      std::vector<int> masked = ids;
      masked[p] = JointVocab::kMask;
      auto tr = model::forward(w, masked, types);
      auto logits = model::mlm_logits(w, tr.hidden(), std::vector<int>{static_cast<int>(p)});
      int argmax = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      if (argmax == original) ++correct;
      ++total;
    }
  }
  return 100.0 * correct / std::max(1, total);
}

struct ZeroShotResult {
  double verb_top1 = 0.0;
  double noun_top1 = 0.0;
  double verb_top5 = 0.0;
  int records = 0;
};

ZeroShotResult zero_shot_eval(const model::ModelWeights& w, const BuiltCorpus& eval_corpus, bool ablate) {
  const auto& vocab = eval_corpus.vocab;
  auto tmpl = tasks::ClozeTemplate::parse(tasks::kClassifyTemplate, vocab, {"verb", "noun"});
  tasks::LabelSet labels;
  const auto& spec = eval_corpus.raw.spec;
  for (const auto& v : spec.verbs) labels.by_role["verb"].push_back(vocab.text_id(vocab.text.find(v)));
  for (const auto& n : spec.nouns) labels.by_role["noun"].push_back(vocab.text_id(vocab.text.find(n)));

  auto prepared = corpus::prepare_documents(eval_corpus.docs, vocab);
  std::vector<eval::EvalRecord> records;
  for (size_t di = 0; di < eval_corpus.docs.size(); ++di) {
    const auto& prep = prepared[di];
    const auto& rd = eval_corpus.raw.docs[di];
    for (size_t s = 0; s < rd.states.size(); ++s) {
      if (prep.segment_of_sentence[s] < 0) continue;
      const auto& seg = prep.segments[static_cast<size_t>(prep.segment_of_sentence[s])];
      auto ranking = tasks::zero_shot_classify(w, seg.tokens, tmpl, labels, 5, vocab, ablate);
      eval::EvalRecord rec;
      for (const auto& [role, ranked] : ranking)
        for (const auto& r : ranked) rec.predicted[role].push_back(vocab.token_string(r.id));
      rec.gold["verb"] = {spec.verbs[static_cast<size_t>(spec.verb_of(rd.states[s]))]};
      rec.gold["noun"] = {spec.nouns[static_cast<size_t>(spec.noun_of(rd.states[s]))]};
      records.push_back(std::move(rec));
    }
  }
  ZeroShotResult out;
  out.records = static_cast<int>(records.size());
  auto top1 = eval::topk_accuracy(records, 1);
  auto top5 = eval::topk_accuracy(records, 5);
  out.verb_top1 = top1["verb"];
  out.noun_top1 = top1["noun"];
  out.verb_top5 = top5["verb"];
  return out;
}

double alignment_auc(const model::ModelWeights& w, const BuiltCorpus& eval_corpus, int pairs, uint64_t seed) {
  const auto& vocab = eval_corpus.vocab;
  auto prepared = corpus::prepare_documents(eval_corpus.docs, vocab);
  Rng rng(seed);
  std::vector<std::pair<double, int>> scored;  // (logit, label)
  corpus::ExampleConfig cfg;
  cfg.l_max = 40;
  cfg.mask_rate = 0.0;
  for (int i = 0; i < pairs; ++i) {
    corpus::PairParams p;
    p.p_neg = i % 2 == 0 ? 0.0 : 1.0;  // alternate positives and negatives
    p.p_concat = 0.5;
    auto pair = corpus::sample_alignment_pair(prepared, p, rng);
    corpus::ExampleParts parts;
    parts.text_ids = pair.text_ids;
    parts.video_tokens = pair.video_tokens;
    parts.alignment = pair.c;
    auto ex = corpus::make_training_example(parts, corpus::Regime::video_text, vocab, cfg, rng);
    auto tr = model::forward(w, ex.input_ids, ex.type_ids);
    scored.push_back({model::alignment_logit(w, tr.hidden()), pair.c});
  }
  // rank-sum AUC, ties averaged
  std::sort(scored.begin(), scored.end());
  double pos_rank_sum = 0.0;
  size_t pos = 0, neg = 0;
  for (size_t i = 0; i < scored.size();) {
    size_t j = i;
    while (j < scored.size() && scored[j].first == scored[i].first) ++j;
    double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
    for (size_t k = i; k < j; ++k)
      if (scored[k].second == 1) pos_rank_sum += avg_rank;
    i = j;
  }
  for (const auto& [logit, label] : scored) (label == 1 ? pos : neg)++;
  if (pos == 0 || neg == 0) return 0.0;
  return (pos_rank_sum - 0.5 * static_cast<double>(pos) * (pos + 1)) / (static_cast<double>(pos) * neg);
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("criterion 1: hierarchical VQ recovers a well-separated mixture") {
  Timer t;
  auto mix = testutil::make_mixture(9, 3, 2, 8, 0.08, 556, 31);  // ~5k points
  REQUIRE(mix.points.size() >= 5000);

  auto cb = vq::fit_hierarchical(mix.points, 3, 2, 17);
  std::map<int, std::map<uint32_t, int>> votes;
  for (size_t i = 0; i < mix.points.size(); ++i) votes[mix.component[i]][vq::encode(cb, mix.points[i])]++;
  size_t correct = 0;
  std::set<uint32_t> used;
  bool distinct = true;
  for (auto& [comp, counts] : votes) {
    auto best = std::max_element(counts.begin(), counts.end(),
                                 [](const auto& a, const auto& b) { return a.second < b.second; });
    if (used.count(best->first)) distinct = false;
    used.insert(best->first);
    correct += static_cast<size_t>(best->second);
  }
  double recovery = static_cast<double>(correct) / mix.points.size();

  // distortion non-increasing across successive Lloyd steps on the same data
  std::vector<vq::FeatureVector> centroids = {mix.points[0], mix.points[1], mix.points[2],
                                              mix.points[3], mix.points[4], mix.points[5],
                                              mix.points[6], mix.points[7], mix.points[8]};
  bool monotone = true;
  double prev = std::numeric_limits<double>::max();
  for (int it = 0; it < 30; ++it) {
    auto step = vq::lloyd_step(mix.points, centroids);
    if (step.distortion > prev + 1e-12) monotone = false;
    prev = step.distortion;
    centroids = step.centroids;
  }

  bool pass = recovery >= 0.99 && distinct && monotone && t.elapsed() < 10.0;
  report(1, pass,
         "VQ partition recovery " + fmt_double(100.0 * recovery, 4) + "% (>=99), Lloyd monotone: " +
             (monotone ? "yes" : "no"),
         t.elapsed());
  CHECK(recovery >= 0.99);
  CHECK(distinct);
  CHECK(monotone);
  CHECK(t.elapsed() < 10.0);
}

TEST_CASE("criterion 2: analytic gradients match finite differences everywhere") {
  Timer t;
  // config pinned: 2 layers, H=16, 2 heads, V=50, L=16
  JointVocab v;
  std::vector<std::string> entries = {"[UNK]"};
  for (int i = 1; i < 39; ++i) entries.push_back("w" + std::to_string(i));
  v.text = text::TextVocab::from_entries(std::move(entries));
  v.video_count = 6;
  REQUIRE(v.size() == 50);

  model::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden = 16;
  cfg.n_heads = 2;
  cfg.ffn_mult = 4;
  cfg.vocab_size = 50;
  cfg.l_max = 16;
  cfg.dropout = 0.0;
  cfg.w_cross = 0.7;
  auto w = model::ModelWeights::init(cfg, static_cast<uint32_t>(v.text.size()), 4242);

  corpus::TrainingExample ex;
  ex.regime = corpus::Regime::video_text;
  ex.input_ids = {JointVocab::kCls, v.text_id(1), JointVocab::kMask, v.text_id(3),  v.text_id(4),
                  JointVocab::kGlue, v.video_id(0), JointVocab::kMask, v.video_id(2), JointVocab::kSep};
  ex.type_ids = {0, 0, 0, 0, 0, 0, 1, 1, 1, 1};
  ex.mask_labels = {{2, v.text_id(2)}, {7, v.video_id(1)}};
  ex.alignment = 1;

  model::Gradients grads = model::make_gradients(w);
  model::loss_and_gradients(w, ex, &grads);

  double worst_overall = 0.0;
  std::string worst_tensor;
  bool pass = true;
  for (size_t ti = 0; ti < w.tensors.size(); ++ti) {
    double worst = 0.0;
    for (size_t i = 0; i < w.tensors[ti].size(); ++i) {
      float original = w.tensors[ti].data[i];
      double h = std::max(1e-4, std::abs(static_cast<double>(original)) * 1e-3);
      float hi = static_cast<float>(static_cast<double>(original) + h);
      float lo = static_cast<float>(static_cast<double>(original) - h);
      w.tensors[ti].data[i] = hi;
      double fp = model::loss(w, ex).loss_value;
      w.tensors[ti].data[i] = lo;
      double fm = model::loss(w, ex).loss_value;
      w.tensors[ti].data[i] = original;
      double fd = (fp - fm) / (static_cast<double>(hi) - static_cast<double>(lo));
      double an = grads[ti][i];
      // 1e-6 floor: sub-noise components are compared absolutely
      double rel = std::abs(an - fd) / std::max(std::abs(an) + std::abs(fd), 1e-6);
      worst = std::max(worst, rel);
    }
    if (worst >= 1e-4) pass = false;
    if (worst > worst_overall) {
      worst_overall = worst;
      worst_tensor = w.tensors[ti].name;
    }
  }
  pass = pass && t.elapsed() < 60.0;
  report(2, pass,
         "gradient check on all " + std::to_string(w.tensors.size()) + " tensors, worst rel err " +
             fmt_double(worst_overall, 3) + " (" + worst_tensor + ", tol 1e-4)",
         t.elapsed());
  CHECK(worst_overall < 1e-4);
  CHECK(t.elapsed() < 60.0);
}

TEST_CASE("criterion 3: masked-token learnability on the deterministic corpus") {
  Timer t;
  const auto& a = shared_a();

  // untrained baseline
  auto fresh = model::ModelWeights::init(model_cfg(a.train_full.vocab),
                                         static_cast<uint32_t>(a.train_full.vocab.text.size()), 999);
  double untrained = mlm_video_accuracy(fresh, a.eval);
  double trained = mlm_video_accuracy(a.weights_full, a.eval);
  double train_time = a.train_seconds_full;

  bool pass = trained >= 90.0 && untrained <= 15.0 && train_time < 600.0;
  report(3, pass,
         "held-out masked-token accuracy " + fmt_double(trained, 4) + "% (>=90), untrained " +
             fmt_double(untrained, 3) + "% (<=15), train " + fmt_double(train_time, 3) + "s (<600)",
         t.elapsed());
  CHECK(trained >= 90.0);
  CHECK(untrained <= 15.0);
  CHECK(train_time < 600.0);
}

TEST_CASE("criterion 4: cross-modal beats the language prior on zero-shot verbs") {
  Timer t;
  const auto& a = shared_a();
  auto cross = zero_shot_eval(a.weights_full, a.eval, false);
  auto prior = zero_shot_eval(a.weights_full, a.eval, true);

  bool pass = cross.verb_top1 >= 80.0 && prior.verb_top1 <= 20.0 && cross.verb_top1 > prior.verb_top1;
  report(4, pass,
         "zero-shot verb top-1: cross-modal " + fmt_double(cross.verb_top1, 4) + "% (>=80), language prior " +
             fmt_double(prior.verb_top1, 4) + "% (<=20, 2x chance), records " + std::to_string(cross.records),
         t.elapsed());
  CHECK(cross.verb_top1 >= 80.0);
  CHECK(prior.verb_top1 <= 20.0);
  CHECK(cross.verb_top1 > prior.verb_top1);

  // trained-model spot check: each state's sentence generates its designated
  // token (one token per sentence, as in the generation recipe)
  const auto& vocab = a.train_full.vocab;
  const auto& spec = a.train_full.raw.spec;
  int t2v_hits = 0, t2v_total = 0;
  for (int s = 0; s < spec.states(); ++s) {
    std::string sentence = "now i " + spec.verbs[static_cast<size_t>(spec.verb_of(s))] + " the " +
                           spec.nouns[static_cast<size_t>(spec.noun_of(s))];
    std::vector<int> text_ids;
    for (int piece : text::wordpiece_tokenize(sentence, vocab.text)) text_ids.push_back(vocab.text_id(piece));
    auto tokens = tasks::text_to_video(a.weights_full, text_ids, 1, vocab);
    if (tokens[0] == a.train_full.state_token[static_cast<size_t>(s)]) ++t2v_hits;
    ++t2v_total;
  }
  double t2v = static_cast<double>(t2v_hits) / std::max(1, t2v_total);
  INFO("text-to-video designated-token rate ", t2v);
  CHECK(t2v >= 0.9);
}

TEST_CASE("criterion 5: accuracy grows with training data size") {
  Timer t;
  const auto& a = shared_a();

  auto subset_weights = [&](double fraction, uint64_t seed) {
    size_t n = static_cast<size_t>(a.train_full.docs.size() * fraction);
    std::vector<Document> docs(a.train_full.docs.begin(), a.train_full.docs.begin() + static_cast<std::ptrdiff_t>(n));
    corpus::ExampleConfig e;
    e.l_max = 40;
    auto result = train::train(docs, a.train_full.vocab, &a.train_full.codebook, model_cfg(a.train_full.vocab),
                               train_cfg(5000, seed), e,
                               testutil::scratch_dir("accept_a_" + std::to_string(static_cast<int>(fraction * 100))));
    return std::move(result.weights);
  };

  auto w25 = subset_weights(0.25, 31);
  auto w50 = subset_weights(0.50, 31);
  double acc25 = zero_shot_eval(w25, a.eval, false).verb_top1;
  double acc50 = zero_shot_eval(w50, a.eval, false).verb_top1;
  double acc100 = zero_shot_eval(a.weights_full, a.eval, false).verb_top1;

  bool monotone_gap = acc100 >= acc25 + 5.0;
  bool between = acc50 >= acc25 - 3.0 && acc50 <= acc100 + 3.0;
  bool pass = monotone_gap && between && t.elapsed() < 1800.0;
  report(5, pass,
         "verb top-1 by data size: 25% -> " + fmt_double(acc25, 4) + ", 50% -> " + fmt_double(acc50, 4) +
             ", 100% -> " + fmt_double(acc100, 4) + " (need +5 gap, 3-point slack)",
         t.elapsed());
  CHECK(monotone_gap);
  CHECK(between);
  CHECK(t.elapsed() < 1800.0);
}

TEST_CASE("criterion 6: alignment head separates held-out pairs") {
  Timer t;
  const auto& a = shared_a();
  double auc = alignment_auc(a.weights_full, a.eval, 600, 77);
  bool pass = auc >= 0.9;
  report(6, pass, "held-out alignment AUC " + fmt_double(auc, 4) + " (>=0.9)", t.elapsed());
  CHECK(auc >= 0.9);
}

TEST_CASE("criterion 7: step-1 forecasts recover the transition structure") {
  Timer t;
  auto spec = spec_b();
  auto train_corpus = build_corpus(spec, 303, 13);
  auto eval_spec = spec;
  eval_spec.n_docs = 40;
  auto eval_corpus = build_corpus(eval_spec, 404, 0, &train_corpus.codebook, &train_corpus.vocab.text);

  corpus::ExampleConfig e;
  e.l_max = 40;
  auto tcfg = train_cfg(9000, 53);
  tcfg.regime_text = 1.0;
  tcfg.regime_video = 4.0;
  tcfg.regime_cross = 1.0;
  // structured centroid-projection similarity between sibling tokens caps
  // the tied-softmax margins at this width; let the video rows train
  tcfg.freeze = model::FreezeMode::none;
  auto result = train::train(train_corpus.docs, train_corpus.vocab, &train_corpus.codebook,
                             model_cfg(train_corpus.vocab), tcfg, e, testutil::scratch_dir("accept_b"));
  const auto& w = result.weights;
  const auto& vocab = train_corpus.vocab;

  // token -> state (injective for well-separated states)
  std::map<uint32_t, int> state_of_token;
  for (int s = 0; s < spec.states(); ++s) state_of_token[train_corpus.state_token[static_cast<size_t>(s)]] = s;
  REQUIRE(state_of_token.size() == static_cast<size_t>(spec.states()));

  // per start state: a natural prefix from the eval docs ending in that state
  std::map<int, std::vector<uint32_t>> prefix_of_state;
  for (size_t di = 0; di < eval_corpus.raw.docs.size(); ++di) {
    const auto& rd = eval_corpus.raw.docs[di];
    for (size_t p = 5; p < rd.states.size(); ++p) {
      int s = rd.states[p];
      if (prefix_of_state.count(s)) continue;
      std::vector<uint32_t> prefix;
      for (size_t q = 0; q <= p; ++q) prefix.push_back(eval_corpus.docs[di].clips[q].token);
      prefix_of_state[s] = std::move(prefix);
    }
  }

  int matched = 0, total = 0;
  for (int s = 0; s < spec.states(); ++s) {
    auto it = prefix_of_state.find(s);
    if (it == prefix_of_state.end()) continue;
    ++total;
    auto truth_top = synth::transition_top(spec.transition, spec.states(), s, 3);
    std::set<uint32_t> truth_tokens;
    for (int ts : truth_top) truth_tokens.insert(train_corpus.state_token[static_cast<size_t>(ts)]);
    auto steps = tasks::forecast(w, it->second, 1, 3, vocab);
    std::set<uint32_t> predicted;
    for (const auto& entry : steps[0]) predicted.insert(entry.token);
    if (predicted == truth_tokens) ++matched;
  }
  double frac = total > 0 ? static_cast<double>(matched) / total : 0.0;
  bool pass = total >= 10 && frac >= 0.9;
  report(7, pass,
         "forecast top-3 set matches the transition oracle for " + std::to_string(matched) + "/" +
             std::to_string(total) + " start states (>=90%)",
         t.elapsed());
  CHECK(total >= 10);
  CHECK(frac >= 0.9);
}

TEST_CASE("criterion 8: metric oracles") {
  Timer t;
  double bleu_hand = eval::bleu({"the cat sat"}, {"the cat sat down"}, 1);
  double bleu_expect = std::exp(1.0 - 4.0 / 3.0);
  double rouge_hand = eval::rouge_l("a b c d", "a c d");
  double rouge_expect = 183.0 / 208.0;  // P=3/4, R=1, beta=1.2 under the stated formula
  double bleu_identity = eval::bleu({"a b c"}, {"a b c"}, 3);
  double rouge_identity = eval::rouge_l("x y z", "x y z");
  double bleu_disjoint = eval::bleu({"a b"}, {"c d"}, 2);
  double rouge_disjoint = eval::rouge_l("a b", "c d");

  Rng rng(5);
  std::vector<eval::EvalRecord> records;
  std::vector<std::string> labels;
  for (int i = 0; i < 10; ++i) labels.push_back("l" + std::to_string(i));
  for (int r = 0; r < 300; ++r) {
    eval::EvalRecord rec;
    auto shuffled = labels;
    rng.shuffle(shuffled);
    rec.predicted["role"] = shuffled;
    rec.gold["role"] = {labels[static_cast<size_t>(rng.uniform_int(0, 9))]};
    records.push_back(std::move(rec));
  }
  bool monotone = true;
  double prev = -1.0;
  for (int k = 1; k <= 10; ++k) {
    double acc = eval::topk_accuracy(records, k)["role"];
    if (acc < prev - 1e-12) monotone = false;
    prev = acc;
  }

  bool pass = std::abs(bleu_hand - bleu_expect) < 1e-6 && std::abs(rouge_hand - rouge_expect) < 1e-6 &&
              bleu_identity == 1.0 && rouge_identity == 1.0 && bleu_disjoint == 0.0 && rouge_disjoint == 0.0 &&
              monotone;
  report(8, pass,
         "BLEU " + fmt_double(bleu_hand, 6) + " (exp(-1/3)), ROUGE-L " + fmt_double(rouge_hand, 6) +
             " (183/208), identities exact, disjoint exact, top-k monotone",
         t.elapsed());
  CHECK(std::abs(bleu_hand - bleu_expect) < 1e-6);
  CHECK(std::abs(rouge_hand - rouge_expect) < 1e-6);
  CHECK(bleu_identity == 1.0);
  CHECK(rouge_identity == 1.0);
  CHECK(bleu_disjoint == 0.0);
  CHECK(rouge_disjoint == 0.0);
  CHECK(monotone);
}

TEST_CASE("criterion 9: determinism and persistence") {
  Timer t;

  auto spec = spec_a();
  spec.n_docs = 16;
  spec.sentences_per_doc = 6;

  auto run_pipeline = [&](const std::string& tag) {
    auto dir = testutil::scratch_dir("accept_det_" + tag);
    auto built = build_corpus(spec, 55, 66);
    vq::save_codebook(built.codebook, dir + "/codebook.bin");
    corpus::write_corpus(built.docs, dir + "/corpus.txt");
    built.vocab.text.save(dir + "/vocab.txt");
    corpus::ExampleConfig e;
    e.l_max = 40;
    auto mcfg = model_cfg(built.vocab);
    auto result = train::train(built.docs, built.vocab, &built.codebook, mcfg, train_cfg(40, 88), e, dir);

    // a small report from the trained model
    auto tmpl = tasks::ClozeTemplate::parse(tasks::kClassifyTemplate, built.vocab, {"verb", "noun"});
    tasks::LabelSet labels;
    for (const auto& v : built.raw.spec.verbs)
      labels.by_role["verb"].push_back(built.vocab.text_id(built.vocab.text.find(v)));
    for (const auto& n : built.raw.spec.nouns)
      labels.by_role["noun"].push_back(built.vocab.text_id(built.vocab.text.find(n)));
    auto ranking = tasks::zero_shot_classify(result.weights, std::vector<uint32_t>{built.docs[0].clips[0].token},
                                             tmpl, labels, 3, built.vocab);
    write_text_file(dir + "/report.txt", tasks::format_ranking_report(ranking, built.vocab));
    return dir;
  };

  auto d1 = run_pipeline("one");
  auto d2 = run_pipeline("two");
  bool identical = true;
  for (const char* rel : {"/codebook.bin", "/corpus.txt", "/vocab.txt", "/checkpoint.bin", "/metrics.tsv",
                          "/report.txt"})
    identical = identical && fnv1a64_file(d1 + rel) == fnv1a64_file(d2 + rel);

  // resume reproduces the uninterrupted run
  auto built = build_corpus(spec, 55, 66);
  corpus::ExampleConfig e;
  e.l_max = 40;
  auto mcfg = model_cfg(built.vocab);
  auto tc = train_cfg(30, 99);
  tc.checkpoint_every = 10;
  auto full_dir = testutil::scratch_dir("accept_det_full");
  auto resume_dir = testutil::scratch_dir("accept_det_resume");
  auto full = train::train(built.docs, built.vocab, &built.codebook, mcfg, tc, e, full_dir);
  auto resumed = train::train(built.docs, built.vocab, &built.codebook, mcfg, tc, e, resume_dir,
                              full_dir + "/checkpoint_step20.bin");
  bool resume_ok = false;
  if (resumed.metrics_lines.size() < full.metrics_lines.size()) {
    std::vector<std::string> tail(
        full.metrics_lines.end() - static_cast<std::ptrdiff_t>(resumed.metrics_lines.size()),
        full.metrics_lines.end());
    resume_ok = resumed.metrics_lines == tail &&
                fnv1a64_file(resumed.checkpoint_path) == fnv1a64_file(full.checkpoint_path);
  }

  bool pass = identical && resume_ok;
  report(9, pass,
         std::string("byte-identical rerun: ") + (identical ? "yes" : "no") + ", resume replays the log: " +
             (resume_ok ? "yes" : "no"),
         t.elapsed());
  CHECK(identical);
  CHECK(resume_ok);
}
