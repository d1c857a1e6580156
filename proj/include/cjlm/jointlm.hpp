#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cjlm/common.hpp"
#include "cjlm/corpus.hpp"
#include "cjlm/encoder.hpp"

namespace cjlm {

struct JointConfig {
  std::size_t tgt_vocab = 0;
  std::vector<std::size_t> hidden = {200};

  bool operator==(const JointConfig&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  JointConfig joint;
  bool emit_eos = true;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct JointModelParams {
  Matrix tgt_embeddings;       // V_tgt x d_t; shared with the attention DNN
  std::vector<Affine> hidden;  // first maps r + k d_t -> hidden[0]
  Matrix softmax_w;            // V_tgt x hidden.back()
  Vector softmax_b;

  static JointModelParams zeros(const ModelConfig& cfg);

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    visit(*this, fn);
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    fn(std::string("tgt_embeddings"), self.tgt_embeddings);
    for (std::size_t i = 0; i < self.hidden.size(); ++i) {
      fn("hidden." + std::to_string(i) + ".w", self.hidden[i].w);
      fn("hidden." + std::to_string(i) + ".b", self.hidden[i].b);
    }
    fn(std::string("softmax.w"), self.softmax_w);
    fn(std::string("softmax.b"), self.softmax_b);
  }
};

// Encoder and predictor parameters plus the configuration that shapes them.
struct Model {
  ModelConfig config;
  EncoderParams encoder;
  JointModelParams joint;

  static Model zeros(const ModelConfig& cfg);

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    encoder.for_each_tensor(fn);
    joint.for_each_tensor(fn);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    encoder.for_each_tensor(fn);
    joint.for_each_tensor(fn);
  }
};

// Weights uniform in [-scale, scale], biases zero, PAD embedding rows zero.
// Values are rounded to storage precision.
void initialize(Model& model, std::uint64_t seed, double scale = 0.08);

struct PredictorTrace {
  Vector input;                // [phi; emb(history_1); ...; emb(history_k)]
  std::vector<Vector> hidden;  // sigmoid activations per hidden layer
  Vector log_probs;
};

// Log-probabilities over the target vocabulary given phi and the k previous
// target words.
Vector predict_log_probs(const Vector& phi, std::span<const WordId> history, const JointModelParams& params,
                         PredictorTrace* trace = nullptr);

// Encoder input for a sample under the model's arch; drops head positions
// unless the arch consumes them.
EncoderInput encoder_input(const TrainingSample& sample, const EncoderConfig& cfg);

double sample_log_prob(const TrainingSample& sample, const Model& model);

// exp(-mean log p), natural log.
double perplexity(std::span<const TrainingSample> samples, const Model& model);

// Fraction of samples whose most probable word is the gold target.
double accuracy(std::span<const TrainingSample> samples, const Model& model);

}  // namespace cjlm
