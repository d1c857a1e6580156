#include "cjlm/jointlm.hpp"

#include <cmath>

#include <fmt/format.h>

#include "cjlm/random.hpp"

namespace cjlm {

using Eigen::Index;

void ModelConfig::validate() const {
  encoder.validate();
  if (joint.tgt_vocab < Vocabulary::kReserved + 1) throw ConfigError("target vocabulary must hold a content token");
  if (encoder.tgt_emb_dim == 0) throw ConfigError("target embedding dimension must be positive");
  if (joint.hidden.empty()) throw ConfigError("predictor needs at least one hidden layer");
  for (auto h : joint.hidden) {
    if (h == 0) throw ConfigError("hidden layer width must be positive");
  }
}

JointModelParams JointModelParams::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const auto& enc = cfg.encoder;
  JointModelParams p;
  p.tgt_embeddings = Matrix::Zero(static_cast<Index>(cfg.joint.tgt_vocab), static_cast<Index>(enc.tgt_emb_dim));
  std::size_t in = enc.repr_dim + enc.history * enc.tgt_emb_dim;
  for (auto h : cfg.joint.hidden) {
    p.hidden.emplace_back(h, in);
    in = h;
  }
  p.softmax_w = Matrix::Zero(static_cast<Index>(cfg.joint.tgt_vocab), static_cast<Index>(in));
  p.softmax_b = Vector::Zero(static_cast<Index>(cfg.joint.tgt_vocab));
  return p;
}

Model Model::zeros(const ModelConfig& cfg) {
  Model m;
  m.config = cfg;
  m.encoder = EncoderParams::zeros(cfg.encoder);
  m.joint = JointModelParams::zeros(cfg);
  return m;
}

void initialize(Model& model, std::uint64_t seed, double scale) {
  Rng rng(seed);
  model.for_each_tensor([&](const std::string& name, auto& t) {
    const bool bias = name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = bias ? 0.0 : rng.uniform(-scale, scale);
    round_to_storage(t);
  });
  model.encoder.src_embeddings.row(Vocabulary::kPad).setZero();
  model.joint.tgt_embeddings.row(Vocabulary::kPad).setZero();
}

Vector predict_log_probs(const Vector& phi, std::span<const WordId> history, const JointModelParams& params,
                         PredictorTrace* trace) {
  const Index dt = params.tgt_embeddings.cols();
  Vector x(phi.size() + static_cast<Index>(history.size()) * dt);
  x.head(phi.size()) = phi;
  for (std::size_t j = 0; j < history.size(); ++j) {
    WordId id = history[j];
    if (id < 0 || id >= params.tgt_embeddings.rows()) throw Error(fmt::format("history id {} outside vocabulary", id));
    x.segment(phi.size() + static_cast<Index>(j) * dt, dt) = params.tgt_embeddings.row(id).transpose();
  }
  if (params.hidden.empty() || params.hidden.front().w.cols() != x.size()) {
    throw ConfigError("predictor input does not match the first hidden layer");
  }

  std::vector<Vector> hidden;
  hidden.reserve(params.hidden.size());
  const Vector* a = &x;
  for (const auto& layer : params.hidden) {
    hidden.push_back(sigmoid(layer.w * *a + layer.b));
    a = &hidden.back();
  }
  Vector logits = params.softmax_w * *a + params.softmax_b;
  const double max = logits.maxCoeff();
  const double log_z = max + std::log((logits.array() - max).exp().sum());
  logits.array() -= log_z;

  if (trace) {
    trace->input = std::move(x);
    trace->hidden = std::move(hidden);
    trace->log_probs = logits;
  }
  return logits;
}

EncoderInput encoder_input(const TrainingSample& sample, const EncoderConfig& cfg) {
  EncoderInput in;
  in.source_ids = sample.source_ids;
  in.affiliated = sample.affiliated;
  if (cfg.arch == Arch::tag_dep) in.head_positions = sample.head_positions;
  in.history = sample.history;
  return in;
}

double sample_log_prob(const TrainingSample& sample, const Model& model) {
  const auto& cfg = model.config.encoder;
  if (sample.history.size() != cfg.history) throw Error("sample history length does not match the model");
  if (sample.target < 0 || sample.target >= model.joint.softmax_b.size()) throw Error("target id outside vocabulary");
  auto trace = encode(encoder_input(sample, cfg), cfg, model.encoder, model.joint.tgt_embeddings);
  return predict_log_probs(trace.phi, sample.history, model.joint)(sample.target);
}

double perplexity(std::span<const TrainingSample> samples, const Model& model) {
  if (samples.empty()) throw Error("perplexity of an empty sample set");
  double total = 0.0;
  for (const auto& s : samples) total += sample_log_prob(s, model);
  return std::exp(-total / static_cast<double>(samples.size()));
}

double accuracy(std::span<const TrainingSample> samples, const Model& model) {
  if (samples.empty()) throw Error("accuracy of an empty sample set");
  const auto& cfg = model.config.encoder;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    auto trace = encode(encoder_input(s, cfg), cfg, model.encoder, model.joint.tgt_embeddings);
    Index best = 0;
    predict_log_probs(trace.phi, s.history, model.joint).maxCoeff(&best);
    if (best == s.target) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

}  // namespace cjlm
