// Drives the installed CLI binary end to end on a tiny synthetic pipeline.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <string>

#include "test_util.hpp"
#include "vtlm/common.hpp"

namespace {

int run(const std::string& args) {
  std::string cmd = std::string(VTLM_CLI_PATH) + " " + args + " >/dev/null 2>/dev/null";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

int run_to(const std::string& args, const std::string& stdout_path) {
  std::string cmd = std::string(VTLM_CLI_PATH) + " " + args + " > " + stdout_path + " 2>/dev/null";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

// one full tiny pipeline under dir; returns the pretrain checkpoint path
void pipeline(const std::string& dir, int seed) {
  std::string s = std::to_string(seed);
  REQUIRE(run("synth-gen --out-dir " + dir + "/synth --seed " + s +
              " --verbs 3 --nouns 3 --dim 8 --layout-k 3 --layout-d 2 --docs 8 --sentences-per-doc 4 "
              "--transition cycle --sigma 0.05") == 0);
  REQUIRE(run("fit-vq --features " + dir + "/synth/features.bin --k 3 --d 2 --out-dir " + dir +
              "/vq --seed " + s) == 0);
  REQUIRE(run("build-corpus --docs " + dir + "/synth/docs_raw.txt --features " + dir +
              "/synth/features.bin --codebook " + dir + "/vq/codebook.bin --truth " + dir +
              "/synth/truth.json --state-centroids " + dir + "/synth/state_centroids.bin --out-dir " + dir +
              "/corpus --extra-words let,me,show,you,how,to --seed " + s) == 0);
  REQUIRE(run("pretrain --corpus " + dir + "/corpus/corpus.txt --vocab " + dir +
              "/corpus/vocab.txt --codebook " + dir + "/vq/codebook.bin --out-dir " + dir +
              "/train --steps 20 --batch 4 --lr 1e-3 --layers 1 --hidden 16 --heads 2 --l-max 32 "
              "--dropout 0 --deterministic --seed " + s) == 0);
}

}  // namespace

TEST_CASE("no arguments prints usage and exits 2") {
  CHECK(run("") == 2);
}

TEST_CASE("unknown subcommand exits 2") {
  CHECK(run("frobnicate") == 2);
}

TEST_CASE("missing required flags exit 2, runtime failures exit 1") {
  CHECK(run("fit-vq --out-dir /tmp/x") == 2);                                 // --features missing
  CHECK(run("fit-vq --features /nonexistent.bin --out-dir /tmp/x") == 1);     // runtime error
}

TEST_CASE("full synthetic pipeline completes and downstream commands work") {
  auto dir = testutil::scratch_dir("cli_pipeline");
  pipeline(dir, 5);

  CHECK(run_to("eval-zeroshot --checkpoint " + dir + "/train/checkpoint.bin --vocab " + dir +
                   "/corpus/vocab.txt --corpus " + dir + "/corpus/corpus.txt --gold " + dir +
                   "/synth/gold.txt --labels " + dir + "/synth/labels.txt --out-dir " + dir + "/zs",
               dir + "/zs_out.txt") == 0);
  {
    std::ifstream is(dir + "/zs_out.txt");
    std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    CHECK(content.find("verb_top1\t") != std::string::npos);
    CHECK(content.find("noun_top5\t") != std::string::npos);
  }

  CHECK(run_to("generate --checkpoint " + dir + "/train/checkpoint.bin --vocab " + dir +
                   "/corpus/vocab.txt --text \"now i pour the bowl\" --slots 3 --codebook " + dir +
                   "/vq/codebook.bin --emit-centroids",
               dir + "/gen_out.txt") == 0);
  CHECK(run("forecast --checkpoint " + dir + "/train/checkpoint.bin --vocab " + dir +
            "/corpus/vocab.txt --prefix 0,1 --horizon 2 --top 3") == 0);
  CHECK(run("extract-features --checkpoint " + dir + "/train/checkpoint.bin --vocab " + dir +
            "/corpus/vocab.txt --tokens 0,1,2") == 0);

  // metrics in ranking mode over the emitted report
  CHECK(run("metrics --report " + dir + "/zs/report.txt --gold " + dir + "/synth/gold.txt --topk 1,5") == 0);

  // manifest exists for every artifact-producing step
  for (const char* sub : {"/synth", "/vq", "/corpus", "/train", "/zs"})
    CHECK(std::ifstream(dir + sub + std::string("/manifest.json")).good());
}

TEST_CASE("reruns with the same seed are byte-identical") {
  auto d1 = testutil::scratch_dir("cli_rerun1");
  auto d2 = testutil::scratch_dir("cli_rerun2");
  pipeline(d1, 7);
  pipeline(d2, 7);
  for (const char* rel : {"/vq/codebook.bin", "/corpus/corpus.txt", "/corpus/vocab.txt",
                          "/train/checkpoint.bin", "/train/metrics.tsv", "/synth/features.bin",
                          "/corpus/truth_map.txt"})
    CHECK(vtlm::fnv1a64_file(d1 + rel) == vtlm::fnv1a64_file(d2 + rel));

  auto d3 = testutil::scratch_dir("cli_rerun3");
  pipeline(d3, 8);
  CHECK(vtlm::fnv1a64_file(d1 + "/train/checkpoint.bin") != vtlm::fnv1a64_file(d3 + "/train/checkpoint.bin"));
}

TEST_CASE("metrics text mode computes bleu and rouge from files") {
  auto dir = testutil::scratch_dir("cli_metrics");
  vtlm::write_text_file(dir + "/cand.txt", "the cat sat\n");
  vtlm::write_text_file(dir + "/ref.txt", "the cat sat down\n");
  REQUIRE(run_to("metrics --candidates " + dir + "/cand.txt --references " + dir +
                     "/ref.txt --max-n 1 --series " + dir + "/series.tsv",
                 dir + "/out.txt") == 0);
  std::ifstream is(dir + "/out.txt");
  std::string line;
  double bleu_val = -1;
  while (std::getline(is, line)) {
    if (line.rfind("bleu\t", 0) == 0) bleu_val = std::stod(line.substr(5));
  }
  CHECK(bleu_val == doctest::Approx(std::exp(1.0 - 4.0 / 3.0)).epsilon(1e-6));
  CHECK(std::ifstream(dir + "/series.tsv").good());
}

TEST_CASE("config file supplies defaults and flags win") {
  auto dir = testutil::scratch_dir("cli_config");
  vtlm::write_text_file(dir + "/cfg.ini", "verbs=3\nnouns=3\ndim=8\nlayout-k=3\nlayout-d=2\ndocs=4\n");
  REQUIRE(run("synth-gen --config " + dir + "/cfg.ini --out-dir " + dir + "/a --seed 1 --docs 6") == 0);
  // flag --docs 6 overrides config docs=4
  auto docs = vtlm::read_text_file(dir + "/a/docs_raw.txt");
  int lines = 0;
  for (char c : docs)
    if (c == '\n') ++lines;
  CHECK(lines == 6);
}
