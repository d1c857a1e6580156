#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cjlm/corpus.hpp"
#include "cjlm/jointlm.hpp"

namespace cjlm {

struct TrainConfig {
  double learning_rate = 0.1;
  std::size_t minibatch = 500;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  bool lr_halving = false;  // halve when held-out perplexity stops improving
  std::optional<double> grad_clip;  // global L2 norm
  double init_scale = 0.08;
  // Minibatches are split into this many contiguous shards whose gradients are
  // summed in shard order, so results depend on the value but not on timing.
  std::size_t threads = 1;

  void validate() const;
};

// Gradients, shape-congruent with the model parameters.
struct GradientStore {
  EncoderParams encoder;
  JointModelParams joint;

  static GradientStore zeros(const ModelConfig& cfg);
  void set_zero();
  GradientStore& operator+=(const GradientStore& other);
  GradientStore& operator*=(double scale);
  double squared_norm() const;

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

class NonFiniteGradient : public Error {
 public:
  explicit NonFiniteGradient(const std::string& tensor)
      : Error("non-finite gradient in " + tensor), tensor_(tensor) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

// Mean negative log-likelihood of the batch.
double minibatch_loss(std::span<const TrainingSample> batch, const Model& model);

struct BackwardResult {
  GradientStore gradients;
  double loss;
};

// Exact gradients of minibatch_loss for every learnable tensor.
BackwardResult backward(std::span<const TrainingSample> batch, const Model& model, std::size_t threads = 1);

// p <- p - lr * g after optional global-norm clipping. Returns the factor the
// gradients were scaled by (1 when not clipped).
double sgd_step(Model& model, const GradientStore& gradients, double lr,
                std::optional<double> clip = std::nullopt);

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_nll = 0.0;
  std::optional<double> heldout_ppl;
  double learning_rate = 0.0;
  double seconds = 0.0;
};

// Sample order for an epoch; a pure function of (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch);

struct TrainResult {
  Model model;
  std::vector<EpochMetrics> metrics;
};

// Thrown when the training loss becomes non-finite. Carries the model as it
// was after the last completed epoch.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, Model last_good, std::vector<EpochMetrics> metrics)
      : Error(what), last_good_(std::move(last_good)), metrics_(std::move(metrics)) {}
  const Model& last_good() const { return last_good_; }
  const std::vector<EpochMetrics>& metrics() const { return metrics_; }

 private:
  Model last_good_;
  std::vector<EpochMetrics> metrics_;
};

// Called after every epoch with its metrics and the model as it stands.
using EpochCallback = std::function<void(const EpochMetrics&, const Model&)>;

TrainResult train(std::span<const TrainingSample> samples, const TrainConfig& train_cfg, const ModelConfig& model_cfg,
                  std::span<const TrainingSample> held_out = {}, const EpochCallback& on_epoch = {});

// Continues training an existing model.
TrainResult train(std::span<const TrainingSample> samples, const TrainConfig& train_cfg, Model model,
                  std::span<const TrainingSample> held_out = {}, const EpochCallback& on_epoch = {});

// Minibatch loss recomputed in long double along a scalar-loop path that
// shares no code with encode()/predict_log_probs(). When given, `selections`
// receives every max-pooling choice, so callers can detect kinks.
long double extended_minibatch_loss(std::span<const TrainingSample> batch, const Model& model,
                                    std::vector<int>* selections = nullptr);

struct GroupError {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t one_sided = 0;  // a pooling choice flipped on one side of the probe
  std::size_t skipped = 0;    // flipped on both sides
};

struct GradCheckReport {
  std::vector<GroupError> groups;

  double max_relative_error() const;
  bool passed(double tolerance = 1e-4) const { return max_relative_error() < tolerance; }
};

struct GradCheckOptions {
  double epsilon = 1e-4;
  std::size_t batch = 4;
  // Coordinates checked per tensor; 0 checks all of them.
  std::size_t coordinates = 0;
  double init_scale = 0.5;
};

// Applied to the analytic gradients before comparison; lets tests inject faults.
using GradientMutator = std::function<void(GradientStore&)>;

// Compares backward() against central differences on `batch`.
GradCheckReport gradient_check(const Model& model, std::span<const TrainingSample> batch,
                               const GradCheckOptions& options, const GradientMutator& mutate = {});

// Random model and batch drawn from `seed`.
GradCheckReport gradient_check(const ModelConfig& cfg, std::uint64_t seed, const GradCheckOptions& options = {},
                               const GradientMutator& mutate = {});

// d = d_t = 8, F1 = F3 = 6, maxlen 10, V = 20, k = 3, hidden 12.
ModelConfig small_check_config(Arch arch, Fusion fusion, std::size_t pool_k = 2);

// Random samples valid for `cfg` (affiliated and head positions always set).
std::vector<TrainingSample> random_samples(const ModelConfig& cfg, std::size_t count, std::uint64_t seed);

}  // namespace cjlm
