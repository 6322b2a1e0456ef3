// vtlm: joint video-text token modeling pipeline driver.
// Subcommands cover the synthetic corpus, the quantizer, pretraining and the
// inference recipes. Machine-readable results go to stdout, logs to stderr.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "vtlm/common.hpp"
#include "vtlm/corpus.hpp"
#include "vtlm/eval.hpp"
#include "vtlm/model.hpp"
#include "vtlm/synth.hpp"
#include "vtlm/tasks.hpp"
#include "vtlm/text.hpp"
#include "vtlm/trainer.hpp"
#include "vtlm/vq.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace vtlm;

namespace {

struct Manifest {
  std::string command;
  uint64_t seed = 0;
  json config = json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;

  void write(const std::string& out_dir) const {
    json j;
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = config;
    auto hash_list = [](const std::vector<std::string>& paths) {
      json arr = json::array();
      for (const auto& p : paths) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a64_file(p)));
        arr.push_back({{"path", p}, {"fnv1a64", buf}});
      }
      return arr;
    };
    j["inputs"] = hash_list(inputs);
    j["outputs"] = hash_list(outputs);
    write_text_file(out_dir + "/manifest.json", j.dump(2) + "\n");
  }
};

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<uint32_t> parse_tokens(const std::string& s) {
  std::vector<uint32_t> out;
  for (const auto& item : split_list(s)) out.push_back(static_cast<uint32_t>(std::stoul(item)));
  return out;
}

corpus::JointVocab load_joint_vocab(const std::string& vocab_path, uint32_t video_count) {
  corpus::JointVocab v;
  v.text = text::TextVocab::load(vocab_path);
  v.video_count = video_count;
  return v;
}

// gold file: doc_id \t sentence_idx \t verb \t noun
struct GoldRecord {
  std::string doc_id;
  int sentence = 0;
  std::string verb, noun;
};

std::vector<GoldRecord> load_gold(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::vector<GoldRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_list(line, '\t');
    if (fields.size() != 4) throw std::runtime_error("bad gold line: " + line);
    out.push_back({fields[0], std::stoi(fields[1]), fields[2], fields[3]});
  }
  return out;
}

tasks::LabelSet load_labels(const std::string& path, const corpus::JointVocab& v) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  tasks::LabelSet out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_list(line, '\t');
    if (fields.size() != 2) throw std::runtime_error("bad label line: " + line);
    int idx = v.text.find(fields[1]);
    if (idx < 0) throw std::runtime_error("label word not in vocab: " + fields[1]);
    out.by_role[fields[0]].push_back(v.text_id(idx));
  }
  return out;
}

struct CommonFlags {
  uint64_t seed = 1;
  std::string out_dir;
  int threads = 1;
  bool deterministic = false;

  int effective() const { return deterministic ? 1 : threads; }
};

void add_common(CLI::App* cmd, CommonFlags& f, bool need_out = true) {
  cmd->set_config("--config", "", "key=value config file; command-line flags win");
  cmd->add_option("--seed", f.seed, "global RNG seed");
  auto* out = cmd->add_option("--out-dir", f.out_dir, "output directory");
  if (need_out) out->required();
  cmd->add_option("--threads", f.threads, "worker thread cap (0 = hardware)");
  cmd->add_flag("--deterministic", f.deterministic, "force serial, byte-stable execution");
}

// ---------------------------------------------------------------------------
// synth-gen

struct SynthArgs {
  CommonFlags common;
  synth::SyntheticSpec spec;
  std::string transition = "uniform";
  std::string branch_probs = "0.5,0.3,0.2";
};

int run_synth_gen(SynthArgs& a) {
  int S = a.spec.states();
  if (a.transition == "uniform")
    a.spec.transition = synth::transition_uniform(S);
  else if (a.transition == "cycle")
    a.spec.transition = synth::transition_cycle(S);
  else if (a.transition == "branching") {
    std::vector<double> probs;
    for (const auto& p : split_list(a.branch_probs)) probs.push_back(std::stod(p));
    a.spec.transition = synth::transition_branching(S, probs);
  } else {
    throw std::runtime_error("unknown transition kind: " + a.transition);
  }

  auto out = synth::synth_generate(a.spec, a.common.seed);
  fs::create_directories(a.common.out_dir);
  const std::string& dir = a.common.out_dir;

  vq::save_features(out.features, dir + "/features.bin");
  vq::save_features(out.state_centroids, dir + "/state_centroids.bin");

  // raw documents: clip field carries feature row indices, not tokens yet
  std::vector<corpus::Document> raw;
  for (const auto& d : out.docs) {
    corpus::Document doc;
    doc.doc_id = d.doc_id;
    doc.sentences = d.sentences;
    for (const auto& c : d.clips) doc.clips.push_back({static_cast<uint32_t>(c.feature_row), c.start});
    raw.push_back(std::move(doc));
  }
  corpus::write_corpus(raw, dir + "/docs_raw.txt");

  std::ostringstream gold;
  for (const auto& d : out.docs)
    for (size_t s = 0; s < d.states.size(); ++s)
      gold << d.doc_id << '\t' << s << '\t' << out.spec.verbs[static_cast<size_t>(out.spec.verb_of(d.states[s]))]
           << '\t' << out.spec.nouns[static_cast<size_t>(out.spec.noun_of(d.states[s]))] << '\n';
  write_text_file(dir + "/gold.txt", gold.str());

  std::ostringstream labels;
  for (const auto& v : out.spec.verbs) labels << "verb\t" << v << '\n';
  for (const auto& n : out.spec.nouns) labels << "noun\t" << n << '\n';
  write_text_file(dir + "/labels.txt", labels.str());

  json truth;
  truth["n_verbs"] = out.spec.n_verbs;
  truth["n_nouns"] = out.spec.n_nouns;
  truth["verbs"] = out.spec.verbs;
  truth["nouns"] = out.spec.nouns;
  truth["sigma"] = out.spec.sigma;
  truth["feature_dim"] = out.spec.feature_dim;
  truth["clips_per_sentence"] = out.spec.clips_per_sentence;
  truth["layout_k"] = out.spec.layout_k;
  truth["layout_d"] = out.spec.layout_d;
  truth["transition"] = out.spec.transition;
  write_text_file(dir + "/truth.json", truth.dump(2) + "\n");

  Manifest man;
  man.command = "synth-gen";
  man.seed = a.common.seed;
  man.config = {{"verbs", a.spec.n_verbs},
                {"nouns", a.spec.n_nouns},
                {"dim", a.spec.feature_dim},
                {"sigma", a.spec.sigma},
                {"docs", a.spec.n_docs},
                {"sentences_per_doc", a.spec.sentences_per_doc},
                {"clips_per_sentence", a.spec.clips_per_sentence},
                {"transition", a.transition},
                {"layout_seed", a.spec.layout_seed}};
  man.outputs = {dir + "/features.bin", dir + "/state_centroids.bin", dir + "/docs_raw.txt",
                 dir + "/gold.txt", dir + "/labels.txt", dir + "/truth.json"};
  man.write(dir);

  std::cout << "documents\t" << out.docs.size() << "\nclips\t" << out.features.rows() << "\nstates\t" << S
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// fit-vq

struct FitArgs {
  CommonFlags common;
  std::string features;
  uint32_t k = 12;
  uint32_t d = 4;
  int max_iters = 100;
  double tol = 1e-6;
  int restarts = 4;
};

int run_fit_vq(FitArgs& a) {
  auto m = vq::load_features(a.features);
  std::vector<vq::FeatureVector> pts;
  pts.reserve(m.rows());
  for (size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    pts.emplace_back(row.begin(), row.end());
  }
  auto cb = vq::fit_hierarchical(pts, a.k, a.d, a.common.seed, a.max_iters, a.tol, a.common.effective(),
                                 a.restarts);
  fs::create_directories(a.common.out_dir);
  std::string path = a.common.out_dir + "/codebook.bin";
  vq::save_codebook(cb, path);

  Manifest man;
  man.command = "fit-vq";
  man.seed = a.common.seed;
  man.config = {{"k", a.k}, {"d", a.d}, {"max_iters", a.max_iters}, {"tol", a.tol}};
  man.inputs = {a.features};
  man.outputs = {path};
  man.write(a.common.out_dir);

  std::cout << "codebook\t" << path << "\nleaves\t" << cb.leaf_count() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// build-corpus

struct BuildArgs {
  CommonFlags common;
  std::string docs, features, codebook;
  std::string vocab_in;
  std::string truth;
  std::string state_centroids;
  std::string extra_words;
  size_t max_vocab = 4096;
  int min_freq = 1;
};

int run_build_corpus(BuildArgs& a) {
  auto raw = corpus::read_corpus(a.docs);
  auto feats = vq::load_features(a.features);
  auto cb = vq::load_codebook(a.codebook);
  if (cb.dim != feats.dim) throw std::runtime_error("codebook/feature dimension mismatch");

  std::vector<corpus::Document> docs(raw.size());
  parallel_for(raw.size(), a.common.effective(), [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      docs[i].doc_id = raw[i].doc_id;
      docs[i].sentences = raw[i].sentences;
      for (const auto& c : raw[i].clips) {
        if (c.token >= feats.rows()) throw std::runtime_error("feature row out of range in " + raw[i].doc_id);
        docs[i].clips.push_back({vq::encode(cb, feats.row(c.token)), c.start});
      }
    }
  });

  fs::create_directories(a.common.out_dir);
  const std::string& dir = a.common.out_dir;
  corpus::write_corpus(docs, dir + "/corpus.txt");

  text::TextVocab vocab;
  if (!a.vocab_in.empty()) {
    vocab = text::TextVocab::load(a.vocab_in);
  } else {
    std::vector<text::Sentence> sentences;
    for (const auto& d : docs)
      for (const auto& s : d.sentences) sentences.push_back(s);
    for (const auto& w : split_list(a.extra_words)) sentences.push_back({w, 0.0, 0.0});
    vocab = text::TextVocab::build(sentences, a.max_vocab, a.min_freq);
  }
  vocab.save(dir + "/vocab.txt");

  Manifest man;
  man.command = "build-corpus";
  man.seed = a.common.seed;
  man.config = {{"max_vocab", a.max_vocab}, {"min_freq", a.min_freq}, {"extra_words", a.extra_words}};
  man.inputs = {a.docs, a.features, a.codebook};
  man.outputs = {dir + "/corpus.txt", dir + "/vocab.txt"};

  // ground-truth mapping: encode each latent state centroid
  if (!a.truth.empty() && !a.state_centroids.empty()) {
    json truth = json::parse(read_text_file(a.truth));
    auto centroids = vq::load_features(a.state_centroids);
    std::vector<std::string> verbs = truth["verbs"], nouns = truth["nouns"];
    std::ostringstream map;
    for (size_t vi = 0; vi < verbs.size(); ++vi)
      for (size_t ni = 0; ni < nouns.size(); ++ni) {
        size_t state = vi * nouns.size() + ni;
        uint32_t token = vq::encode(cb, centroids.row(state));
        map << verbs[vi] << ',' << nouns[ni] << " -> " << token << '\n';
      }
    write_text_file(dir + "/truth_map.txt", map.str());
    man.inputs.push_back(a.truth);
    man.inputs.push_back(a.state_centroids);
    man.outputs.push_back(dir + "/truth_map.txt");
  }

  man.write(dir);
  std::cout << "corpus\t" << dir + "/corpus.txt" << "\nvocab_size\t" << vocab.size() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
  CommonFlags common;
  std::string corpus_path, vocab_path, codebook;
  std::string resume;
  model::ModelConfig mcfg;
  train::TrainConfig tcfg;
  corpus::ExampleConfig ecfg;
  std::string regime_weights = "1,1,1";
  std::string freeze = "video";
};

int run_pretrain(PretrainArgs& a) {
  auto cb = vq::load_codebook(a.codebook);
  auto vocab = load_joint_vocab(a.vocab_path, cb.leaf_count());
  auto docs = corpus::read_corpus(a.corpus_path);

  auto weights = split_list(a.regime_weights);
  if (weights.size() != 3) throw std::runtime_error("--regime-weights wants three comma-separated values");
  a.tcfg.regime_text = std::stod(weights[0]);
  a.tcfg.regime_video = std::stod(weights[1]);
  a.tcfg.regime_cross = std::stod(weights[2]);
  if (a.freeze == "none")
    a.tcfg.freeze = model::FreezeMode::none;
  else if (a.freeze == "video")
    a.tcfg.freeze = model::FreezeMode::video_rows;
  else if (a.freeze == "all")
    a.tcfg.freeze = model::FreezeMode::all_rows;
  else
    throw std::runtime_error("--freeze must be none, video or all");
  a.tcfg.seed = a.common.seed;
  a.tcfg.threads = a.common.effective();
  a.mcfg.vocab_size = vocab.size();

  auto result = train::train(docs, vocab, &cb, a.mcfg, a.tcfg, a.ecfg, a.common.out_dir, a.resume);

  Manifest man;
  man.command = "pretrain";
  man.seed = a.common.seed;
  man.config = {{"steps", a.tcfg.total_steps}, {"batch", a.tcfg.batch_size},  {"lr", a.tcfg.lr_init},
                {"warmup", a.tcfg.warmup_fraction}, {"layers", a.mcfg.n_layers}, {"hidden", a.mcfg.hidden},
                {"heads", a.mcfg.n_heads},    {"l_max", a.mcfg.l_max},       {"dropout", a.mcfg.dropout},
                {"mask_rate", a.ecfg.mask_rate}, {"regime_weights", a.regime_weights}, {"freeze", a.freeze}};
  man.inputs = {a.corpus_path, a.vocab_path, a.codebook};
  man.outputs = {result.checkpoint_path, result.metrics_path};
  man.write(a.common.out_dir);

  std::cout << "checkpoint\t" << result.checkpoint_path << "\nmetrics\t" << result.metrics_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval-zeroshot

struct ZeroShotArgs {
  CommonFlags common;
  std::string checkpoint, vocab_path, corpus_path, gold, labels;
  std::string template_text = tasks::kClassifyTemplate;
  std::string roles = "verb,noun";
  std::string topk = "1,5";
  bool ablate_video = false;
};

int run_eval_zeroshot(ZeroShotArgs& a) {
  auto ck = model::load_checkpoint(a.checkpoint);
  auto vocab = load_joint_vocab(a.vocab_path, static_cast<uint32_t>(ck.weights.cfg.vocab_size) -
                                                  corpus::JointVocab::kSpecialCount -
                                                  static_cast<uint32_t>(ck.weights.text_vocab_size));
  if (vocab.size() != ck.weights.cfg.vocab_size)
    throw std::runtime_error("vocab file does not match the checkpoint vocabulary");

  auto docs = corpus::read_corpus(a.corpus_path);
  auto prepared = corpus::prepare_documents(docs, vocab);
  std::map<std::string, size_t> doc_index;
  for (size_t i = 0; i < docs.size(); ++i) doc_index[docs[i].doc_id] = i;

  auto gold = load_gold(a.gold);
  auto labels = load_labels(a.labels, vocab);
  auto tmpl = tasks::ClozeTemplate::parse(a.template_text, vocab, split_list(a.roles));

  std::vector<int> ks;
  for (const auto& k : split_list(a.topk)) ks.push_back(std::stoi(k));
  int max_k = *std::max_element(ks.begin(), ks.end());

  std::vector<eval::EvalRecord> records;
  std::ostringstream report;
  size_t skipped = 0;
  for (const auto& g : gold) {
    auto it = doc_index.find(g.doc_id);
    if (it == doc_index.end()) throw std::runtime_error("gold references unknown document " + g.doc_id);
    const auto& prep = prepared[it->second];
    if (g.sentence < 0 || static_cast<size_t>(g.sentence) >= prep.segment_of_sentence.size() ||
        prep.segment_of_sentence[static_cast<size_t>(g.sentence)] < 0) {
      ++skipped;
      continue;
    }
    const auto& seg = prep.segments[static_cast<size_t>(prep.segment_of_sentence[static_cast<size_t>(g.sentence)])];
    auto ranking =
        tasks::zero_shot_classify(ck.weights, seg.tokens, tmpl, labels, max_k, vocab, a.ablate_video);
    report << "# record " << g.doc_id << ':' << g.sentence << " verb=" << g.verb << " noun=" << g.noun << '\n'
           << tasks::format_ranking_report(ranking, vocab);
    eval::EvalRecord rec;
    for (const auto& [role, ranked] : ranking)
      for (const auto& r : ranked) rec.predicted[role].push_back(vocab.token_string(r.id));
    rec.gold["verb"] = {g.verb};
    rec.gold["noun"] = {g.noun};
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw std::runtime_error("no usable eval records");
  if (skipped) std::cerr << "skipped " << skipped << " records without visual segments\n";

  fs::create_directories(a.common.out_dir);
  std::string report_path = a.common.out_dir + (a.ablate_video ? "/report_ablated.txt" : "/report.txt");
  write_text_file(report_path, report.str());

  std::ostringstream summary;
  for (int k : ks) {
    auto acc = eval::topk_accuracy(records, k);
    for (const auto& [role, pct] : acc)
      summary << role << "_top" << k << '\t' << fmt_double(pct, 6) << '\n';
  }
  write_text_file(a.common.out_dir + "/summary.tsv", summary.str());
  std::cout << summary.str();

  Manifest man;
  man.command = "eval-zeroshot";
  man.seed = a.common.seed;
  man.config = {{"template", a.template_text}, {"roles", a.roles}, {"topk", a.topk},
                {"ablate_video", a.ablate_video}};
  man.inputs = {a.checkpoint, a.vocab_path, a.corpus_path, a.gold, a.labels};
  man.outputs = {report_path, a.common.out_dir + "/summary.tsv"};
  man.write(a.common.out_dir);
  return 0;
}

// ---------------------------------------------------------------------------
// generate / forecast / extract-features

struct GenerateArgs {
  CommonFlags common;
  std::string checkpoint, vocab_path, text_input;
  int slots = 4;
  int refine = 0;
  std::string codebook;
  bool emit_centroids = false;
};

int run_generate(GenerateArgs& a) {
  auto ck = model::load_checkpoint(a.checkpoint);
  auto vocab = load_joint_vocab(a.vocab_path, static_cast<uint32_t>(ck.weights.cfg.vocab_size) -
                                                  corpus::JointVocab::kSpecialCount -
                                                  static_cast<uint32_t>(ck.weights.text_vocab_size));
  std::vector<int> text;
  for (int piece : text::wordpiece_tokenize(a.text_input, vocab.text)) text.push_back(vocab.text_id(piece));
  auto tokens = tasks::text_to_video(ck.weights, text, a.slots, vocab, a.refine);

  std::optional<vq::Codebook> cb;
  if (!a.codebook.empty() && a.emit_centroids) cb = vq::load_codebook(a.codebook);

  std::ostringstream out;
  for (size_t t = 0; t < tokens.size(); ++t) {
    out << t << '\t' << tokens[t];
    if (cb) {
      auto c = vq::centroid_of(*cb, tokens[t]);
      out << '\t';
      for (size_t j = 0; j < c.size(); ++j) out << (j ? "," : "") << fmt_double(c[j], 6);
    }
    out << '\n';
  }
  std::cout << out.str();
  if (!a.common.out_dir.empty()) {
    fs::create_directories(a.common.out_dir);
    write_text_file(a.common.out_dir + "/generated.tsv", out.str());
    Manifest man;
    man.command = "generate";
    man.seed = a.common.seed;
    man.config = {{"text", a.text_input}, {"slots", a.slots}, {"refine", a.refine}};
    man.inputs = {a.checkpoint, a.vocab_path};
    man.outputs = {a.common.out_dir + "/generated.tsv"};
    man.write(a.common.out_dir);
  }
  return 0;
}

struct ForecastArgs {
  CommonFlags common;
  std::string checkpoint, vocab_path, prefix;
  int horizon = 3;
  int top_n = 3;
};

int run_forecast(ForecastArgs& a) {
  auto ck = model::load_checkpoint(a.checkpoint);
  auto vocab = load_joint_vocab(a.vocab_path, static_cast<uint32_t>(ck.weights.cfg.vocab_size) -
                                                  corpus::JointVocab::kSpecialCount -
                                                  static_cast<uint32_t>(ck.weights.text_vocab_size));
  auto prefix = parse_tokens(a.prefix);
  auto steps = tasks::forecast(ck.weights, prefix, a.horizon, a.top_n, vocab);
  std::ostringstream out;
  for (size_t s = 0; s < steps.size(); ++s)
    for (size_t r = 0; r < steps[s].size(); ++r)
      out << "step" << (s + 1) << '\t' << (r + 1) << '\t' << vocab.token_string(vocab.video_id(steps[s][r].token))
          << '\t' << fmt_double(steps[s][r].prob, 8) << '\n';
  std::cout << out.str();
  if (!a.common.out_dir.empty()) {
    fs::create_directories(a.common.out_dir);
    write_text_file(a.common.out_dir + "/forecast.tsv", out.str());
    Manifest man;
    man.command = "forecast";
    man.seed = a.common.seed;
    man.config = {{"prefix", a.prefix}, {"horizon", a.horizon}, {"top", a.top_n}};
    man.inputs = {a.checkpoint, a.vocab_path};
    man.outputs = {a.common.out_dir + "/forecast.tsv"};
    man.write(a.common.out_dir);
  }
  return 0;
}

struct FeatureArgs {
  CommonFlags common;
  std::string checkpoint, vocab_path;
  std::string tokens;
  std::string corpus_path;
};

int run_extract_features(FeatureArgs& a) {
  auto ck = model::load_checkpoint(a.checkpoint);
  auto vocab = load_joint_vocab(a.vocab_path, static_cast<uint32_t>(ck.weights.cfg.vocab_size) -
                                                  corpus::JointVocab::kSpecialCount -
                                                  static_cast<uint32_t>(ck.weights.text_vocab_size));
  std::ostringstream out;
  auto emit = [&](const std::string& tag, std::span<const uint32_t> clip) {
    auto f = tasks::extract_features(ck.weights, clip, vocab);
    out << tag << '\t';
    for (size_t j = 0; j < f.size(); ++j) out << (j ? "," : "") << fmt_double(f[j], 8);
    out << '\n';
  };
  if (!a.tokens.empty()) {
    auto clip = parse_tokens(a.tokens);
    emit("clip", clip);
  } else if (!a.corpus_path.empty()) {
    auto docs = corpus::read_corpus(a.corpus_path);
    auto vocab_docs = corpus::prepare_documents(docs, vocab);
    for (size_t i = 0; i < docs.size(); ++i)
      for (const auto& seg : vocab_docs[i].segments) {
        if (seg.tokens.empty()) continue;
        emit(docs[i].doc_id + ":" + std::to_string(seg.sentence), seg.tokens);
      }
  } else {
    throw std::runtime_error("extract-features needs --tokens or --corpus");
  }
  std::cout << out.str();
  if (!a.common.out_dir.empty()) {
    fs::create_directories(a.common.out_dir);
    write_text_file(a.common.out_dir + "/features.tsv", out.str());
    Manifest man;
    man.command = "extract-features";
    man.seed = a.common.seed;
    man.config = {{"tokens", a.tokens}, {"corpus", a.corpus_path}};
    man.inputs = {a.checkpoint, a.vocab_path};
    man.outputs = {a.common.out_dir + "/features.tsv"};
    man.write(a.common.out_dir);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// metrics

struct MetricsArgs {
  CommonFlags common;
  std::string candidates, references;
  std::string report, gold;
  std::string topk = "1,5";
  int max_n = 4;
  bool smooth = false;
  std::string series;
};

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

int run_metrics(MetricsArgs& a) {
  std::ostringstream out, series;
  if (!a.candidates.empty()) {
    auto cands = read_lines(a.candidates);
    auto refs = read_lines(a.references);
    out << "bleu\t" << fmt_double(eval::bleu(cands, refs, a.max_n, a.smooth), 8) << '\n';
    double rouge_sum = 0.0;
    for (size_t i = 0; i < cands.size(); ++i) {
      double f = eval::rouge_l(cands[i], refs[i]);
      rouge_sum += f;
      series << i << '\t' << fmt_double(f, 8) << '\n';
    }
    out << "rouge_l\t" << fmt_double(rouge_sum / static_cast<double>(cands.size()), 8) << '\n';
  } else if (!a.report.empty()) {
    // report records are "# record <id> ..." blocks of role/rank/label/prob lines
    auto gold = load_gold(a.gold);
    std::map<std::string, const GoldRecord*> gold_by_key;
    for (const auto& g : gold) gold_by_key[g.doc_id + ":" + std::to_string(g.sentence)] = &g;

    std::vector<eval::EvalRecord> records;
    eval::EvalRecord cur;
    bool have = false;
    auto flush = [&]() {
      if (have) records.push_back(cur);
      cur = eval::EvalRecord{};
      have = false;
    };
    for (const auto& line : read_lines(a.report)) {
      if (line.rfind("# record ", 0) == 0) {
        flush();
        std::string key = line.substr(9, line.find(' ', 9) - 9);
        auto it = gold_by_key.find(key);
        if (it == gold_by_key.end()) throw std::runtime_error("report record missing from gold: " + key);
        cur.gold["verb"] = {it->second->verb};
        cur.gold["noun"] = {it->second->noun};
        have = true;
        continue;
      }
      if (line.empty()) continue;
      auto fields = split_list(line, '\t');
      if (fields.size() != 4) throw std::runtime_error("bad report line: " + line);
      cur.predicted[fields[0]].push_back(fields[2]);
    }
    flush();
    if (records.empty()) throw std::runtime_error("empty report");
    for (const auto& k : split_list(a.topk)) {
      auto acc = eval::topk_accuracy(records, std::stoi(k));
      for (const auto& [role, pct] : acc) out << role << "_top" << k << '\t' << fmt_double(pct, 6) << '\n';
    }
  } else {
    throw std::runtime_error("metrics needs either --candidates/--references or --report/--gold");
  }

  std::cout << out.str();
  if (!a.series.empty()) write_text_file(a.series, series.str());
  if (!a.common.out_dir.empty()) {
    fs::create_directories(a.common.out_dir);
    write_text_file(a.common.out_dir + "/metrics.tsv", out.str());
    Manifest man;
    man.command = "metrics";
    man.seed = a.common.seed;
    man.config = {{"max_n", a.max_n}, {"smooth", a.smooth}, {"topk", a.topk}};
    for (const auto& p : {a.candidates, a.references, a.report, a.gold})
      if (!p.empty()) man.inputs.push_back(p);
    man.outputs = {a.common.out_dir + "/metrics.tsv"};
    man.write(a.common.out_dir);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint video-text token modeling pipeline"};
  app.require_subcommand(0, 1);

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth-gen", "generate the synthetic paired corpus");
  add_common(synth_cmd, synth_args.common);
  synth_cmd->add_option("--verbs", synth_args.spec.n_verbs, "verb count");
  synth_cmd->add_option("--nouns", synth_args.spec.n_nouns, "noun count");
  synth_cmd->add_option("--dim", synth_args.spec.feature_dim, "feature dimension");
  synth_cmd->add_option("--sigma", synth_args.spec.sigma, "emission noise");
  synth_cmd->add_option("--docs", synth_args.spec.n_docs, "document count");
  synth_cmd->add_option("--sentences-per-doc", synth_args.spec.sentences_per_doc, "sentences per document");
  synth_cmd->add_option("--clips-per-sentence", synth_args.spec.clips_per_sentence, "clips per sentence");
  synth_cmd->add_option("--layout-k", synth_args.spec.layout_k, "centroid layout branching");
  synth_cmd->add_option("--layout-d", synth_args.spec.layout_d, "centroid layout depth");
  synth_cmd->add_option("--layout-seed", synth_args.spec.layout_seed, "centroid layout seed");
  synth_cmd->add_option("--transition", synth_args.transition, "uniform | cycle | branching");
  synth_cmd->add_option("--branch-probs", synth_args.branch_probs, "branching probabilities");

  FitArgs fit_args;
  auto* fit_cmd = app.add_subcommand("fit-vq", "fit the hierarchical k-means codebook");
  add_common(fit_cmd, fit_args.common);
  fit_cmd->add_option("--features", fit_args.features, "features.bin")->required();
  fit_cmd->add_option("--k", fit_args.k, "branching factor");
  fit_cmd->add_option("--d", fit_args.d, "depth");
  fit_cmd->add_option("--max-iters", fit_args.max_iters, "Lloyd iteration cap");
  fit_cmd->add_option("--tol", fit_args.tol, "relative distortion tolerance");
  fit_cmd->add_option("--restarts", fit_args.restarts, "k-means++ restarts per node");

  BuildArgs build_args;
  auto* build_cmd = app.add_subcommand("build-corpus", "tokenize documents and build the vocab");
  add_common(build_cmd, build_args.common);
  build_cmd->add_option("--docs", build_args.docs, "raw documents file")->required();
  build_cmd->add_option("--features", build_args.features, "features.bin")->required();
  build_cmd->add_option("--codebook", build_args.codebook, "codebook.bin")->required();
  build_cmd->add_option("--vocab-in", build_args.vocab_in, "reuse an existing vocab file");
  build_cmd->add_option("--truth", build_args.truth, "truth.json (for the state->token map)");
  build_cmd->add_option("--state-centroids", build_args.state_centroids, "state_centroids.bin");
  build_cmd->add_option("--extra-words", build_args.extra_words, "comma-separated words to add to the vocab");
  build_cmd->add_option("--max-vocab", build_args.max_vocab, "vocab size cap");
  build_cmd->add_option("--min-freq", build_args.min_freq, "minimum word frequency");

  PretrainArgs pre_args;
  auto* pre_cmd = app.add_subcommand("pretrain", "train the joint masked-token model");
  add_common(pre_cmd, pre_args.common);
  pre_cmd->add_option("--corpus", pre_args.corpus_path, "corpus.txt")->required();
  pre_cmd->add_option("--vocab", pre_args.vocab_path, "vocab.txt")->required();
  pre_cmd->add_option("--codebook", pre_args.codebook, "codebook.bin")->required();
  pre_cmd->add_option("--resume", pre_args.resume, "checkpoint to resume from");
  pre_cmd->add_option("--steps", pre_args.tcfg.total_steps, "total optimization steps");
  pre_cmd->add_option("--batch", pre_args.tcfg.batch_size, "examples per step");
  pre_cmd->add_option("--lr", pre_args.tcfg.lr_init, "initial learning rate");
  pre_cmd->add_option("--warmup-frac", pre_args.tcfg.warmup_fraction, "linear warmup fraction");
  pre_cmd->add_option("--checkpoint-every", pre_args.tcfg.checkpoint_every, "periodic checkpoint interval");
  pre_cmd->add_option("--grad-clip", pre_args.tcfg.grad_clip, "global-norm gradient clip (0 = off)");
  pre_cmd->add_option("--regime-weights", pre_args.regime_weights, "text,video,video-text sampling weights");
  pre_cmd->add_option("--freeze", pre_args.freeze, "none | video | all embedding rows");
  pre_cmd->add_option("--embedding-norm", pre_args.tcfg.video_embedding_norm, "video embedding row norm");
  pre_cmd->add_option("--layers", pre_args.mcfg.n_layers, "transformer layers");
  pre_cmd->add_option("--hidden", pre_args.mcfg.hidden, "hidden width");
  pre_cmd->add_option("--heads", pre_args.mcfg.n_heads, "attention heads");
  pre_cmd->add_option("--ffn-mult", pre_args.mcfg.ffn_mult, "FFN width multiplier");
  pre_cmd->add_option("--l-max", pre_args.mcfg.l_max, "max sequence length");
  pre_cmd->add_option("--dropout", pre_args.mcfg.dropout, "dropout rate");
  pre_cmd->add_option("--w-text", pre_args.mcfg.w_text, "text masked-term weight");
  pre_cmd->add_option("--w-video", pre_args.mcfg.w_video, "video masked-term weight");
  pre_cmd->add_option("--w-cross", pre_args.mcfg.w_cross, "alignment term weight");
  pre_cmd->add_option("--mask-rate", pre_args.ecfg.mask_rate, "masking rate");
  pre_cmd->add_option("--p-neg", pre_args.ecfg.pair.p_neg, "negative-pair probability");
  pre_cmd->add_option("--p-concat", pre_args.ecfg.pair.p_concat, "neighbor concatenation probability");

  ZeroShotArgs zs_args;
  auto* zs_cmd = app.add_subcommand("eval-zeroshot", "cloze classification against gold labels");
  add_common(zs_cmd, zs_args.common);
  zs_cmd->add_option("--checkpoint", zs_args.checkpoint, "checkpoint.bin")->required();
  zs_cmd->add_option("--vocab", zs_args.vocab_path, "vocab.txt")->required();
  zs_cmd->add_option("--corpus", zs_args.corpus_path, "eval corpus")->required();
  zs_cmd->add_option("--gold", zs_args.gold, "gold labels file")->required();
  zs_cmd->add_option("--labels", zs_args.labels, "label set file")->required();
  zs_cmd->add_option("--template", zs_args.template_text, "cloze template");
  zs_cmd->add_option("--roles", zs_args.roles, "slot roles, comma-separated");
  zs_cmd->add_option("--topk", zs_args.topk, "accuracy cutoffs");
  zs_cmd->add_flag("--ablate-video", zs_args.ablate_video, "replace video tokens with [MASK]");

  GenerateArgs gen_args;
  auto* gen_cmd = app.add_subcommand("generate", "text-to-video token generation");
  add_common(gen_cmd, gen_args.common, false);
  gen_cmd->add_option("--checkpoint", gen_args.checkpoint, "checkpoint.bin")->required();
  gen_cmd->add_option("--vocab", gen_args.vocab_path, "vocab.txt")->required();
  gen_cmd->add_option("--text", gen_args.text_input, "input sentence")->required();
  gen_cmd->add_option("--slots", gen_args.slots, "video tokens to generate");
  gen_cmd->add_option("--refine", gen_args.refine, "iterative refinement rounds");
  gen_cmd->add_option("--codebook", gen_args.codebook, "codebook.bin for centroid output");
  gen_cmd->add_flag("--emit-centroids", gen_args.emit_centroids, "append centroid vectors");

  ForecastArgs fc_args;
  auto* fc_cmd = app.add_subcommand("forecast", "future visual-token forecasting");
  add_common(fc_cmd, fc_args.common, false);
  fc_cmd->add_option("--checkpoint", fc_args.checkpoint, "checkpoint.bin")->required();
  fc_cmd->add_option("--vocab", fc_args.vocab_path, "vocab.txt")->required();
  fc_cmd->add_option("--prefix", fc_args.prefix, "comma-separated visual tokens")->required();
  fc_cmd->add_option("--horizon", fc_args.horizon, "future steps");
  fc_cmd->add_option("--top", fc_args.top_n, "candidates per step");

  FeatureArgs feat_args;
  auto* feat_cmd = app.add_subcommand("extract-features", "dense 2H features from video tokens");
  add_common(feat_cmd, feat_args.common, false);
  feat_cmd->add_option("--checkpoint", feat_args.checkpoint, "checkpoint.bin")->required();
  feat_cmd->add_option("--vocab", feat_args.vocab_path, "vocab.txt")->required();
  feat_cmd->add_option("--tokens", feat_args.tokens, "comma-separated visual tokens");
  feat_cmd->add_option("--corpus", feat_args.corpus_path, "corpus file (per-segment features)");

  MetricsArgs met_args;
  auto* met_cmd = app.add_subcommand("metrics", "text or ranking metrics from report files");
  add_common(met_cmd, met_args.common, false);
  met_cmd->add_option("--candidates", met_args.candidates, "candidate segments, one per line");
  met_cmd->add_option("--references", met_args.references, "reference segments, one per line");
  met_cmd->add_option("--report", met_args.report, "ranking report file");
  met_cmd->add_option("--gold", met_args.gold, "gold labels file");
  met_cmd->add_option("--topk", met_args.topk, "accuracy cutoffs");
  met_cmd->add_option("--max-n", met_args.max_n, "highest n-gram order");
  met_cmd->add_flag("--smooth", met_args.smooth, "add-one smoothing");
  met_cmd->add_option("--series", met_args.series, "per-segment series output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  if (app.get_subcommands().empty()) {
    std::cerr << app.help() << std::endl;
    return 2;
  }

  try {
    if (*synth_cmd) return run_synth_gen(synth_args);
    if (*fit_cmd) return run_fit_vq(fit_args);
    if (*build_cmd) return run_build_corpus(build_args);
    if (*pre_cmd) return run_pretrain(pre_args);
    if (*zs_cmd) return run_eval_zeroshot(zs_args);
    if (*gen_cmd) return run_generate(gen_args);
    if (*fc_cmd) return run_forecast(fc_args);
    if (*feat_cmd) return run_extract_features(feat_args);
    if (*met_cmd) return run_metrics(met_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 2;
}
