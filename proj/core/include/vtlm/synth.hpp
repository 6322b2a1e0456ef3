#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vtlm/text.hpp"
#include "vtlm/vq.hpp"

namespace vtlm::synth {

// Latent program for paired text-video generation. States are (verb, noun)
// pairs walked by a Markov chain; each state emits one sentence
// "now i <verb> the <noun>" and `clips_per_sentence` feature vectors around
// that state's centroid.
struct SyntheticSpec {
  int n_verbs = 10;
  int n_nouns = 10;
  int feature_dim = 24;
  double sigma = 0.05;
  int clips_per_sentence = 1;
  int n_docs = 100;
  int sentences_per_doc = 8;
  double clip_stride = 1.5;
  // centroid layout grid; k^d must cover n_verbs*n_nouns and feature_dim >= k*d
  int layout_k = 10;
  int layout_d = 2;
  uint64_t layout_seed = 7;
  std::vector<double> transition;  // S x S row-major; rows sum to 1 within 1e-9
  std::vector<std::string> verbs;  // defaults filled when empty
  std::vector<std::string> nouns;

  int states() const { return n_verbs * n_nouns; }
  int state_of(int verb, int noun) const { return verb * n_nouns + noun; }
  int verb_of(int state) const { return state / n_nouns; }
  int noun_of(int state) const { return state % n_nouns; }
  void validate() const;
};

struct RawClip {
  size_t feature_row = 0;
  double start = 0.0;
};

struct RawDocument {
  std::string doc_id;
  std::vector<int> states;  // one per sentence
  std::vector<text::Sentence> sentences;
  std::vector<RawClip> clips;
};

struct SynthOutput {
  SyntheticSpec spec;
  std::vector<RawDocument> docs;
  vq::FeatureMatrix features;         // all clip features, in document order
  vq::FeatureMatrix state_centroids;  // S rows, the latent emission means
};

SynthOutput synth_generate(const SyntheticSpec& spec, uint64_t seed);

// Transition matrix builders.
std::vector<double> transition_uniform(int states);
std::vector<double> transition_cycle(int states);  // deterministic s -> (s+1) mod S
// each state branches to offsets {1,3,7} (mod S) with the given probabilities
std::vector<double> transition_branching(int states, const std::vector<double>& probs);

// Indices (descending probability) of the top-n successors of `state`.
std::vector<int> transition_top(const std::vector<double>& transition, int states, int state, int n);

// Well-separated centroid layout on a k-ary hierarchical grid: level offsets
// live on disjoint coordinate axes, coarser levels scaled up, and the whole
// layout is rescaled so the min pairwise distance is >= separation.
// Requires dim >= k*d and count <= k^d.
std::vector<float> hierarchical_centroid_layout(int count, int k, int d, int dim, double separation,
                                                uint64_t seed);

std::vector<std::string> default_verbs();
std::vector<std::string> default_nouns();

}  // namespace vtlm::synth
