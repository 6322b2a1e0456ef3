#include "vtlm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "vtlm/common.hpp"

namespace vtlm::synth {

std::vector<std::string> default_verbs() {
  return {"pour", "stir", "bake", "cut", "mix", "heat", "fry", "boil", "chop", "whisk",
          "peel", "grate", "knead", "toast", "blend", "season"};
}

std::vector<std::string> default_nouns() {
  return {"bowl", "pan", "egg", "flour", "onion", "sauce", "bread", "cake", "milk", "salt",
          "butter", "sugar", "dough", "garlic", "cheese", "pepper"};
}

void SyntheticSpec::validate() const {
  if (n_verbs < 1 || n_nouns < 1) throw std::invalid_argument("synthetic spec: need at least one verb and noun");
  if (n_docs < 1 || sentences_per_doc < 1) throw std::invalid_argument("synthetic spec: empty corpus");
  if (clips_per_sentence < 1) throw std::invalid_argument("synthetic spec: clips_per_sentence must be >= 1");
  if (sigma < 0.0) throw std::invalid_argument("synthetic spec: sigma must be >= 0");
  int S = states();
  int leaves = 1;
  for (int i = 0; i < layout_d; ++i) leaves *= layout_k;
  if (leaves < S) throw std::invalid_argument("synthetic spec: layout k^d smaller than state count");
  if (feature_dim < layout_k * layout_d)
    throw std::invalid_argument("synthetic spec: feature_dim must be >= layout_k * layout_d");
  if (transition.size() != static_cast<size_t>(S) * static_cast<size_t>(S))
    throw std::invalid_argument("synthetic spec: transition matrix must be S x S");
  for (int r = 0; r < S; ++r) {
    double sum = 0.0;
    for (int c = 0; c < S; ++c) {
      double p = transition[static_cast<size_t>(r) * S + c];
      if (p < 0.0) throw std::invalid_argument("synthetic spec: negative transition probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw std::invalid_argument("synthetic spec: transition row " + std::to_string(r) + " does not sum to 1");
  }
}

std::vector<double> transition_uniform(int states) {
  std::vector<double> t(static_cast<size_t>(states) * states, 1.0 / states);
  return t;
}

std::vector<double> transition_cycle(int states) {
  std::vector<double> t(static_cast<size_t>(states) * states, 0.0);
  for (int s = 0; s < states; ++s) t[static_cast<size_t>(s) * states + (s + 1) % states] = 1.0;
  return t;
}

std::vector<double> transition_branching(int states, const std::vector<double>& probs) {
  static const int kOffsets[] = {1, 3, 7};
  if (probs.empty() || probs.size() > 3) throw std::invalid_argument("transition_branching: 1..3 probabilities");
  double sum = std::accumulate(probs.begin(), probs.end(), 0.0);
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("transition_branching: probabilities must sum to 1");
  std::vector<double> t(static_cast<size_t>(states) * states, 0.0);
  for (int s = 0; s < states; ++s)
    for (size_t b = 0; b < probs.size(); ++b)
      t[static_cast<size_t>(s) * states + (s + kOffsets[b]) % states] += probs[b];
  return t;
}

std::vector<int> transition_top(const std::vector<double>& transition, int states, int state, int n) {
  std::vector<int> idx(static_cast<size_t>(states));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return transition[static_cast<size_t>(state) * states + a] > transition[static_cast<size_t>(state) * states + b];
  });
  idx.resize(static_cast<size_t>(std::min(n, states)));
  return idx;
}

std::vector<float> hierarchical_centroid_layout(int count, int k, int d, int dim, double separation, uint64_t seed) {
  if (k < 1 || d < 1) throw std::invalid_argument("layout: k and d must be >= 1");
  int leaves = 1;
  for (int i = 0; i < d; ++i) leaves *= k;
  if (count > leaves) throw std::invalid_argument("layout: count exceeds k^d");
  if (dim < k * d) throw std::invalid_argument("layout: dim must be >= k*d");

  // level l branch b sits on axis l*k+b; coarser levels 6x larger
  std::vector<double> scale(static_cast<size_t>(d));
  double s = 1.0;
  for (int l = d - 1; l >= 0; --l) {
    scale[static_cast<size_t>(l)] = s;
    s *= 6.0;
  }

  // base-k digit reversal: consecutive indices land in different coarse
  // branches, so partial layouts (count < k^d) still occupy every branch
  // evenly and stay recoverable by top-down clustering
  std::vector<double> raw(static_cast<size_t>(count) * dim, 0.0);
  for (int c = 0; c < count; ++c) {
    int rem = c;
    for (int l = 0; l < d; ++l) {
      int branch = rem % k;
      rem /= k;
      raw[static_cast<size_t>(c) * dim + l * k + branch] = scale[static_cast<size_t>(l)];
    }
  }

  // small seeded jitter so duplicated-leaf degeneracies never line up exactly
  Rng rng(mix_seed(seed, 0x1A4007ULL));
  for (auto& v : raw) v += 0.01 * rng.normal();

  double min_d2 = std::numeric_limits<double>::max();
  for (int a = 0; a < count; ++a)
    for (int b = a + 1; b < count; ++b) {
      double d2 = 0.0;
      for (int j = 0; j < dim; ++j) {
        double diff = raw[static_cast<size_t>(a) * dim + j] - raw[static_cast<size_t>(b) * dim + j];
        d2 += diff * diff;
      }
      min_d2 = std::min(min_d2, d2);
    }
  double factor = count > 1 ? separation / std::sqrt(min_d2) : 1.0;

  std::vector<float> out(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<float>(raw[i] * factor);
  return out;
}

SynthOutput synth_generate(const SyntheticSpec& spec_in, uint64_t seed) {
  SyntheticSpec spec = spec_in;
  if (spec.verbs.empty()) {
    auto all = default_verbs();
    if (static_cast<size_t>(spec.n_verbs) > all.size())
      throw std::invalid_argument("synthetic spec: not enough default verbs; provide names");
    spec.verbs.assign(all.begin(), all.begin() + spec.n_verbs);
  }
  if (spec.nouns.empty()) {
    auto all = default_nouns();
    if (static_cast<size_t>(spec.n_nouns) > all.size())
      throw std::invalid_argument("synthetic spec: not enough default nouns; provide names");
    spec.nouns.assign(all.begin(), all.begin() + spec.n_nouns);
  }
  if (spec.transition.empty()) spec.transition = transition_uniform(spec.states());
  spec.validate();

  int S = spec.states();
  SynthOutput out;
  // centroid spacing >= 10 sigma, with margin (and a floor for sigma == 0)
  double separation = std::max(12.0 * spec.sigma, 1.0);
  out.state_centroids.dim = static_cast<uint32_t>(spec.feature_dim);
  out.state_centroids.data =
      hierarchical_centroid_layout(S, spec.layout_k, spec.layout_d, spec.feature_dim, separation, spec.layout_seed);

  out.features.dim = static_cast<uint32_t>(spec.feature_dim);
  out.docs.reserve(static_cast<size_t>(spec.n_docs));

  for (int di = 0; di < spec.n_docs; ++di) {
    Rng rng(mix_seed(seed, 0xD0C5ULL, static_cast<uint64_t>(di)));
    RawDocument doc;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "doc%05d", di);
    doc.doc_id = buf;

    int state = static_cast<int>(rng.uniform_int(0, S - 1));
    double sentence_span = spec.clips_per_sentence * spec.clip_stride;
    for (int si = 0; si < spec.sentences_per_doc; ++si) {
      doc.states.push_back(state);
      text::Sentence sent;
      sent.text = "now i " + spec.verbs[static_cast<size_t>(spec.verb_of(state))] + " the " +
                  spec.nouns[static_cast<size_t>(spec.noun_of(state))];
      sent.start = si * sentence_span;
      sent.end = (si + 1) * sentence_span;
      doc.sentences.push_back(sent);

      const float* mu = out.state_centroids.data.data() + static_cast<size_t>(state) * spec.feature_dim;
      for (int c = 0; c < spec.clips_per_sentence; ++c) {
        RawClip clip;
        clip.start = sent.start + c * spec.clip_stride;
        clip.feature_row = out.features.rows();
        for (int j = 0; j < spec.feature_dim; ++j)
          out.features.data.push_back(static_cast<float>(mu[j] + spec.sigma * rng.normal()));
        doc.clips.push_back(clip);
      }

      // next state
      double roll = rng.uniform();
      double acc = 0.0;
      int next = S - 1;
      for (int c = 0; c < S; ++c) {
        acc += spec.transition[static_cast<size_t>(state) * S + c];
        if (roll < acc) {
          next = c;
          break;
        }
      }
      state = next;
    }
    out.docs.push_back(std::move(doc));
  }

  out.spec = std::move(spec);
  return out;
}

}  // namespace vtlm::synth
