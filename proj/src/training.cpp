#include "cjlm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <thread>
#include <utility>

#include <fmt/format.h>

#include "cjlm/random.hpp"
#include "cjlm/tensor.hpp"

namespace cjlm {

namespace {

using Eigen::Index;
using StridedRows = Eigen::Map<const Matrix, 0, Eigen::OuterStride<>>;

StridedRows windows(const Matrix& m, Index count, Index span, Index step) {
  return StridedRows(m.data(), count, span * m.cols(), Eigen::OuterStride<>(step * m.cols()));
}

template <typename Derived>
auto sigmoid_grad(const Eigen::MatrixBase<Derived>& activation) {
  return (activation.array() * (1.0 - activation.array())).matrix();
}

// Backward through convolve(). Accumulates into the filter gradients and
// d_input; d_prefix receives the gradient of the prepended vector.
void convolve_backward(const Matrix& input, const Matrix& output, const Matrix& d_output, const Matrix& filters,
                       const Vector& prefix, Matrix& d_filters, Vector& d_biases, Matrix& d_input,
                       Vector* d_prefix) {
  const Index width = input.cols();
  const Index span = EncoderConfig::kWindow;
  const Index n = output.rows();
  const Index p = prefix.size();
  Matrix d_pre = d_output.cwiseProduct(sigmoid_grad(output));
  Vector col_sum = d_pre.colwise().sum().transpose();

  d_filters.rightCols(span * width).noalias() += d_pre.transpose() * windows(input, n, span, 1);
  d_biases += col_sum;
  if (p > 0) {
    d_filters.leftCols(p).noalias() += col_sum * prefix.transpose();
    if (d_prefix) *d_prefix = filters.leftCols(p).transpose() * col_sum;
  }
  Matrix d_windows = d_pre * filters.rightCols(span * width);
  for (Index i = 0; i < n; ++i) {
    Eigen::Map<Eigen::RowVectorXd>(d_input.data() + i * width, span * width) += d_windows.row(i);
  }
}

// Backward through a stack of affine+sigmoid layers. Returns d_input.
Vector dense_stack_backward(const Vector& input, const std::vector<Vector>& activations,
                            const std::vector<Affine>& layers, std::vector<Affine>& grads, Vector d_out) {
  for (std::size_t l = layers.size(); l-- > 0;) {
    const Vector& below = l == 0 ? input : activations[l - 1];
    Vector d_pre = d_out.cwiseProduct(sigmoid_grad(activations[l]));
    grads[l].w.noalias() += d_pre * below.transpose();
    grads[l].b += d_pre;
    d_out = layers[l].w.transpose() * d_pre;
  }
  return d_out;
}

void encoder_backward(const Vector& d_phi, const ForwardTrace& t, const EncoderInput& in, const EncoderConfig& cfg,
                      const EncoderParams& p, EncoderParams& g, Matrix& d_tgt_embeddings) {
  // Layer-5
  Vector d5 = d_phi.cwiseProduct(sigmoid_grad(t.phi));
  g.proj_w.noalias() += d5 * t.layer4.transpose();
  g.proj_b += d5;
  Vector d4 = p.proj_w.transpose() * d5;

  // Layer-4
  Matrix d3 = Matrix::Zero(t.layer3.rows(), t.layer3.cols());
  if (cfg.fusion == Fusion::gating) {
    // out = sum_i w_i z_i, w = softmax(z w_g)
    Vector along = t.layer3 * d4;
    Vector d_scores = t.global_omega.cwiseProduct((along.array() - d4.dot(t.layer4)).matrix());
    d3.noalias() += t.global_omega * d4.transpose();
    d3.noalias() += d_scores * p.gate_global_w.transpose();
    g.gate_global_w.noalias() += t.layer3.transpose() * d_scores;
  } else {
    const auto k = static_cast<Index>(cfg.pool_k);
    for (Index c = 0; c < d3.cols(); ++c) {
      for (Index i = 0; i < k; ++i) {
        d3(t.global_topk[static_cast<std::size_t>(c * k + i)], c) += d4(c) / static_cast<double>(k);
      }
    }
  }

  // Layer-3
  Matrix d2 = Matrix::Zero(t.layer2.rows(), t.layer2.cols());
  convolve_backward(t.layer2, t.layer3, d3, p.conv3_w, Vector(), g.conv3_w, g.conv3_b, d2, nullptr);

  // Layer-2
  Matrix d1 = Matrix::Zero(t.layer1.rows(), t.layer1.cols());
  Matrix d0 = Matrix::Zero(t.layer0.rows(), t.layer0.cols());
  if (cfg.fusion == Fusion::gating) {
    const Index gate_width = 4 * t.layer0.cols();
    const Index row_width = t.layer0.cols();
    for (Index j = 0; j < d2.rows(); ++j) {
      const double a = t.local_alpha(j);
      const double d_alpha = d2.row(j).dot(t.layer1.row(2 * j) - t.layer1.row(2 * j + 1));
      d1.row(2 * j) += a * d2.row(j);
      d1.row(2 * j + 1) += (1.0 - a) * d2.row(j);
      const double d_pre = d_alpha * a * (1.0 - a);
      Eigen::Map<const Vector> gate_in(t.layer0.data() + 2 * j * row_width, gate_width);
      g.gate_local_w += d_pre * gate_in;
      g.gate_local_b(0) += d_pre;
      Eigen::Map<Vector>(d0.data() + 2 * j * row_width, gate_width) += d_pre * p.gate_local_w;
    }
  } else {
    const Index f = d2.cols();
    for (Index j = 0; j < d2.rows(); ++j) {
      for (Index c = 0; c < f; ++c) d1(t.local_argmax[static_cast<std::size_t>(j * f + c)], c) += d2(j, c);
    }
  }

  // Layer-1
  const bool attention = cfg.arch == Arch::attention;
  const Vector prefix = attention ? t.attn_layers.back() : Vector();
  Vector d_prefix;
  convolve_backward(t.layer0, t.layer1, d1, p.conv1_w, prefix, g.conv1_w, g.conv1_b, d0, &d_prefix);

  // Layer-0; tag columns are inputs, not parameters.
  const Index d = static_cast<Index>(cfg.emb_dim);
  for (std::size_t i = 0; i < in.source_ids.size(); ++i) {
    WordId id = in.source_ids[i];
    if (id == Vocabulary::kPad) continue;
    g.src_embeddings.row(id) += d0.row(static_cast<Index>(i)).head(d);
  }

  if (attention) {
    Vector d_x = dense_stack_backward(t.attn_input, t.attn_layers, p.attn, g.attn, d_prefix);
    const Index dt = d_tgt_embeddings.cols();
    for (std::size_t j = 0; j < in.history.size(); ++j) {
      d_tgt_embeddings.row(in.history[j]) += d_x.segment(static_cast<Index>(j) * dt, dt).transpose();
    }
  }
}

// Adds the gradient of -log p(target) to `g`; returns that loss.
double accumulate_sample(const TrainingSample& s, const Model& model, GradientStore& g) {
  const auto& cfg = model.config.encoder;
  const EncoderInput in = encoder_input(s, cfg);
  const ForwardTrace t = encode(in, cfg, model.encoder, model.joint.tgt_embeddings);
  PredictorTrace pt;
  const Vector log_probs = predict_log_probs(t.phi, s.history, model.joint, &pt);
  if (s.target < 0 || s.target >= log_probs.size()) throw Error("target id outside vocabulary");
  const double loss = -log_probs(s.target);

  const auto& jm = model.joint;
  Vector d_logits = log_probs.array().exp();
  d_logits(s.target) -= 1.0;
  const Vector& top = pt.hidden.back();
  g.joint.softmax_w.noalias() += d_logits * top.transpose();
  g.joint.softmax_b += d_logits;
  Vector d_top = jm.softmax_w.transpose() * d_logits;
  Vector d_x = dense_stack_backward(pt.input, pt.hidden, jm.hidden, g.joint.hidden, std::move(d_top));

  const Index r = t.phi.size();
  const Index dt = jm.tgt_embeddings.cols();
  for (std::size_t j = 0; j < s.history.size(); ++j) {
    g.joint.tgt_embeddings.row(s.history[j]) += d_x.segment(r + static_cast<Index>(j) * dt, dt).transpose();
  }
  encoder_backward(d_x.head(r), t, in, cfg, model.encoder, g.encoder, g.joint.tgt_embeddings);
  return loss;
}

void check_finite(const GradientStore& g) {
  g.for_each_tensor([](const std::string& name, const auto& t) {
    if (!t.allFinite()) throw NonFiniteGradient(name);
  });
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
  if (minibatch < 1) throw ConfigError("minibatch must be at least 1");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("gradient clip norm must be positive");
}

GradientStore GradientStore::zeros(const ModelConfig& cfg) {
  return GradientStore{EncoderParams::zeros(cfg.encoder), JointModelParams::zeros(cfg)};
}

void GradientStore::set_zero() {
  for_each_tensor([](const std::string&, auto& t) { t.setZero(); });
}

GradientStore& GradientStore::operator+=(const GradientStore& other) {
  auto mine = tensor_views(*this);
  auto theirs = tensor_views(other);
  for (std::size_t i = 0; i < mine.size(); ++i) {
    auto& a = mine[i].values;
    const auto& b = theirs[i].values;
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += b[j];
  }
  return *this;
}

GradientStore& GradientStore::operator*=(double scale) {
  for_each_tensor([&](const std::string&, auto& t) { t *= scale; });
  return *this;
}

double GradientStore::squared_norm() const {
  double sum = 0.0;
  for_each_tensor([&](const std::string&, const auto& t) { sum += t.squaredNorm(); });
  return sum;
}

double minibatch_loss(std::span<const TrainingSample> batch, const Model& model) {
  if (batch.empty()) throw Error("empty minibatch");
  double total = 0.0;
  for (const auto& s : batch) total -= sample_log_prob(s, model);
  return total / static_cast<double>(batch.size());
}

BackwardResult backward(std::span<const TrainingSample> batch, const Model& model, std::size_t threads) {
  if (batch.empty()) throw Error("empty minibatch");
  const std::size_t shards = std::clamp<std::size_t>(threads, 1, batch.size());

  std::vector<GradientStore> grads;
  grads.reserve(shards);
  for (std::size_t s = 0; s < shards; ++s) grads.push_back(GradientStore::zeros(model.config));
  std::vector<double> losses(shards, 0.0);

  auto run = [&](std::size_t shard) {
    const std::size_t begin = batch.size() * shard / shards;
    const std::size_t end = batch.size() * (shard + 1) / shards;
    for (std::size_t i = begin; i < end; ++i) losses[shard] += accumulate_sample(batch[i], model, grads[shard]);
  };
  if (shards == 1) {
    run(0);
  } else {
    std::vector<std::exception_ptr> errors(shards);
    std::vector<std::thread> workers;
    for (std::size_t s = 0; s < shards; ++s) {
      workers.emplace_back([&, s] {
        try {
          run(s);
        } catch (...) {
          errors[s] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  double loss = 0.0;
  for (std::size_t s = 0; s < shards; ++s) {
    loss += losses[s];
    if (s > 0) grads[0] += grads[s];
  }
  const double scale = 1.0 / static_cast<double>(batch.size());
  grads[0] *= scale;
  check_finite(grads[0]);
  return {std::move(grads[0]), loss * scale};
}

double sgd_step(Model& model, const GradientStore& gradients, double lr, std::optional<double> clip) {
  double scale = 1.0;
  if (clip) {
    const double norm = std::sqrt(gradients.squared_norm());
    if (norm > *clip) scale = *clip / norm;
  }
  if (lr == 0.0) return scale;
  auto params = tensor_views(model);
  auto grads = tensor_views(gradients);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].values;
    const auto& g = grads[i].values;
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] = static_cast<double>(static_cast<float>(p[j] - lr * scale * g[j]));
    }
  }
  return scale;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 1000 + epoch));
  rng.shuffle(order);
  return order;
}

TrainResult train(std::span<const TrainingSample> samples, const TrainConfig& train_cfg, const ModelConfig& model_cfg,
                  std::span<const TrainingSample> held_out, const EpochCallback& on_epoch) {
  model_cfg.validate();
  Model model = Model::zeros(model_cfg);
  initialize(model, derive_seed(train_cfg.seed, 0), train_cfg.init_scale);
  return train(samples, train_cfg, std::move(model), held_out, on_epoch);
}

TrainResult train(std::span<const TrainingSample> samples, const TrainConfig& train_cfg, Model model,
                  std::span<const TrainingSample> held_out, const EpochCallback& on_epoch) {
  train_cfg.validate();
  if (samples.empty()) throw Error("no training samples");

  TrainResult result{std::move(model), {}};
  Model& m = result.model;
  Model last_good = m;
  double lr = train_cfg.learning_rate;
  double best_ppl = std::numeric_limits<double>::infinity();
  std::vector<TrainingSample> batch;

  for (std::size_t epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto order = epoch_order(samples.size(), train_cfg.seed, epoch);
    double total = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += train_cfg.minibatch) {
      const std::size_t end = std::min(order.size(), begin + train_cfg.minibatch);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(samples[order[i]]);

      BackwardResult step;
      try {
        step = backward(batch, m, train_cfg.threads);
      } catch (const NonFiniteGradient& e) {
        throw DivergenceError(fmt::format("epoch {}: {}", epoch, e.what()), std::move(last_good), result.metrics);
      }
      if (!std::isfinite(step.loss)) {
        throw DivergenceError(fmt::format("epoch {}: training loss became non-finite", epoch), std::move(last_good),
                              result.metrics);
      }
      if (!step.gradients.encoder.src_embeddings.row(Vocabulary::kPad).isZero(0.0) ||
          !step.gradients.joint.tgt_embeddings.row(Vocabulary::kPad).isZero(0.0)) {
        throw Error("gradient reached a PAD embedding row");
      }
      total += step.loss * static_cast<double>(end - begin);
      sgd_step(m, step.gradients, lr, train_cfg.grad_clip);
    }

    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.train_nll = total / static_cast<double>(samples.size());
    metrics.learning_rate = lr;
    if (!held_out.empty()) {
      const double ppl = perplexity(held_out, m);
      metrics.heldout_ppl = ppl;
      if (train_cfg.lr_halving) {
        if (ppl >= best_ppl) lr *= 0.5;
        best_ppl = std::min(best_ppl, ppl);
      }
    }
    metrics.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.metrics.push_back(metrics);
    if (on_epoch) on_epoch(metrics, result.model);
    last_good = m;
  }
  return result;
}

double GradCheckReport::max_relative_error() const {
  double worst = 0.0;
  for (const auto& g : groups) worst = std::max(worst, g.max_relative_error);
  return worst;
}

GradCheckReport gradient_check(const Model& model, std::span<const TrainingSample> batch,
                               const GradCheckOptions& options, const GradientMutator& mutate) {
  if (!(options.epsilon > 0.0)) throw Error("epsilon must be positive");
  auto analytic = backward(batch, model).gradients;
  if (mutate) mutate(analytic);

  Model probe = model;
  auto params = tensor_views(probe);
  auto grads = tensor_views(std::as_const(analytic));
  std::vector<int> base_choice;
  const long double base = extended_minibatch_loss(batch, probe, &base_choice);
  const long double eps = options.epsilon;
  GradCheckReport report;
  Rng rng(0x5eed);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& values = params[i].values;
    std::vector<std::size_t> coords(values.size());
    for (std::size_t j = 0; j < coords.size(); ++j) coords[j] = j;
    if (options.coordinates > 0 && options.coordinates < coords.size()) {
      rng.shuffle(coords);
      coords.resize(options.coordinates);
    }
    GroupError group{params[i].name, 0.0, 0, 0, 0};
    for (std::size_t c : coords) {
      const double saved = values[c];
      std::vector<int> plus_choice;
      std::vector<int> minus_choice;
      values[c] = saved + options.epsilon;
      const long double plus = extended_minibatch_loss(batch, probe, &plus_choice);
      values[c] = saved - options.epsilon;
      const long double minus = extended_minibatch_loss(batch, probe, &minus_choice);
      values[c] = saved;

      // Max pooling is piecewise smooth; never difference across a kink.
      const bool plus_ok = plus_choice == base_choice;
      const bool minus_ok = minus_choice == base_choice;
      long double fd;
      if (plus_ok && minus_ok) {
        fd = (plus - minus) / (2.0L * eps);
      } else if (plus_ok || minus_ok) {
        fd = plus_ok ? (plus - base) / eps : (base - minus) / eps;
        ++group.one_sided;
      } else {
        ++group.skipped;
        continue;
      }
      const double numeric = static_cast<double>(fd);
      const double a = grads[i].values[c];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      group.max_relative_error = std::max(group.max_relative_error, rel);
      ++group.checked;
    }
    report.groups.push_back(std::move(group));
  }
  return report;
}

GradCheckReport gradient_check(const ModelConfig& cfg, std::uint64_t seed, const GradCheckOptions& options,
                               const GradientMutator& mutate) {
  if (!(options.epsilon > 0.0)) throw Error("epsilon must be positive");
  Model model = Model::zeros(cfg);
  initialize(model, derive_seed(seed, 1), options.init_scale);
  // Non-zero biases so that their gradients are exercised away from symmetry.
  Rng rng(derive_seed(seed, 2));
  model.for_each_tensor([&](const std::string& name, auto& t) {
    if (name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0) {
      for (Index j = 0; j < t.size(); ++j) t.data()[j] = rng.uniform(-options.init_scale, options.init_scale);
    }
  });
  auto batch = random_samples(cfg, std::max<std::size_t>(1, options.batch), derive_seed(seed, 3));
  return gradient_check(model, batch, options, mutate);
}

ModelConfig small_check_config(Arch arch, Fusion fusion, std::size_t pool_k) {
  ModelConfig cfg;
  auto& e = cfg.encoder;
  e.arch = arch;
  e.fusion = fusion;
  e.pool_k = pool_k;
  e.src_vocab = 20;
  e.emb_dim = 8;
  e.tgt_emb_dim = 8;
  e.attn_dim = 8;
  e.filters1 = 6;
  e.filters3 = 6;
  e.repr_dim = 8;
  e.maxlen = 10;
  e.history = 3;
  cfg.joint.tgt_vocab = 20;
  cfg.joint.hidden = {12};
  return cfg;
}

std::vector<TrainingSample> random_samples(const ModelConfig& cfg, std::size_t count, std::uint64_t seed) {
  const auto& e = cfg.encoder;
  Rng rng(seed);
  const auto content = [&](std::size_t vocab) {
    return static_cast<WordId>(Vocabulary::kReserved + rng.index(vocab - Vocabulary::kReserved));
  };
  std::vector<TrainingSample> out;
  for (std::size_t n = 0; n < count; ++n) {
    TrainingSample s;
    const std::size_t len = 1 + rng.index(e.maxlen);
    const std::size_t offset = e.maxlen - len;
    s.source_ids.assign(e.maxlen, Vocabulary::kPad);
    for (std::size_t i = offset; i < e.maxlen; ++i) s.source_ids[i] = content(e.src_vocab);
    const std::size_t affiliated = 1 + rng.index(std::min<std::size_t>(2, len));
    for (std::size_t a = 0; a < affiliated; ++a) {
      s.affiliated.push_back(static_cast<int>(offset + rng.index(len)));
      s.head_positions.push_back(static_cast<int>(offset + rng.index(len)));
    }
    for (auto* v : {&s.affiliated, &s.head_positions}) {
      std::sort(v->begin(), v->end());
      v->erase(std::unique(v->begin(), v->end()), v->end());
    }
    for (std::size_t j = 0; j < e.history; ++j) {
      s.history.push_back(rng.index(4) == 0 ? Vocabulary::kBos : content(cfg.joint.tgt_vocab));
    }
    s.target = rng.index(8) == 0 ? Vocabulary::kEos : content(cfg.joint.tgt_vocab);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cjlm
