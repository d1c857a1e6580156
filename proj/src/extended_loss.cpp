// Scalar-loop forward pass in long double. Used by the gradient check, where
// double roundoff in the loss would swamp very small gradients.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cjlm/training.hpp"

namespace cjlm {

namespace {

using Real = long double;
using Rows = std::vector<std::vector<Real>>;

Real logistic(Real x) { return 1.0L / (1.0L + std::exp(-x)); }

Real weight(const Matrix& w, std::size_t r, std::size_t c) {
  return static_cast<Real>(w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
}

Real at(const Vector& v, std::size_t i) { return static_cast<Real>(v(static_cast<Eigen::Index>(i))); }

std::vector<Real> dense(const Affine& layer, const std::vector<Real>& x) {
  std::vector<Real> y(static_cast<std::size_t>(layer.w.rows()));
  for (std::size_t r = 0; r < y.size(); ++r) {
    Real s = at(layer.b, r);
    for (std::size_t c = 0; c < x.size(); ++c) s += weight(layer.w, r, c) * x[c];
    y[r] = logistic(s);
  }
  return y;
}

Rows convolution(const Rows& in, const Matrix& w, const Vector& b, const std::vector<Real>& prefix) {
  const std::size_t width = in.front().size();
  const std::size_t n = in.size() - 2;
  Rows out(n, std::vector<Real>(static_cast<std::size_t>(w.rows())));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < out[i].size(); ++f) {
      Real s = at(b, f);
      std::size_t col = 0;
      for (Real p : prefix) s += weight(w, f, col++) * p;
      for (std::size_t o = 0; o < 3; ++o) {
        for (std::size_t c = 0; c < width; ++c) s += weight(w, f, col++) * in[i + o][c];
      }
      out[i][f] = logistic(s);
    }
  }
  return out;
}

Real sample_loss(const TrainingSample& s, const Model& m, std::vector<int>* selections) {
  const auto& cfg = m.config.encoder;
  const auto& p = m.encoder;
  const std::size_t d = cfg.emb_dim;
  const bool tagged = cfg.arch == Arch::tag || cfg.arch == Arch::tag_dep;

  Rows layer0(cfg.maxlen, std::vector<Real>(cfg.input_width(), 0.0L));
  for (std::size_t i = 0; i < cfg.maxlen; ++i) {
    const WordId id = s.source_ids[i];
    if (id == Vocabulary::kPad) continue;
    for (std::size_t c = 0; c < d; ++c) layer0[i][c] = weight(p.src_embeddings, static_cast<std::size_t>(id), c);
  }
  if (tagged) {
    for (int a : s.affiliated) layer0[static_cast<std::size_t>(a)][d] = 1.0L;
  }
  if (cfg.arch == Arch::tag_dep) {
    for (int h : s.head_positions) layer0[static_cast<std::size_t>(h)][d + 1] = 1.0L;
  }

  auto history_input = [&] {
    std::vector<Real> x;
    for (WordId id : s.history) {
      for (Eigen::Index c = 0; c < m.joint.tgt_embeddings.cols(); ++c) {
        x.push_back(static_cast<Real>(m.joint.tgt_embeddings(id, c)));
      }
    }
    return x;
  };

  std::vector<Real> prefix;
  if (cfg.arch == Arch::attention) {
    prefix = history_input();
    for (const auto& layer : p.attn) prefix = dense(layer, prefix);
  }
  const Rows layer1 = convolution(layer0, p.conv1_w, p.conv1_b, prefix);

  const std::size_t l2 = layer1.size() / 2;
  const std::size_t f1 = layer1.front().size();
  Rows layer2(l2, std::vector<Real>(f1));
  for (std::size_t j = 0; j < l2; ++j) {
    if (cfg.fusion == Fusion::gating) {
      Real g = at(p.gate_local_b, 0);
      std::size_t col = 0;
      for (std::size_t r = 2 * j; r < 2 * j + 4; ++r) {
        for (Real v : layer0[r]) g += at(p.gate_local_w, col++) * v;
      }
      const Real alpha = logistic(g);
      for (std::size_t f = 0; f < f1; ++f) layer2[j][f] = alpha * layer1[2 * j][f] + (1.0L - alpha) * layer1[2 * j + 1][f];
    } else {
      for (std::size_t f = 0; f < f1; ++f) {
        const bool second = layer1[2 * j + 1][f] > layer1[2 * j][f];
        layer2[j][f] = second ? layer1[2 * j + 1][f] : layer1[2 * j][f];
        if (selections) selections->push_back(second ? 1 : 0);
      }
    }
  }

  const Rows layer3 = convolution(layer2, p.conv3_w, p.conv3_b, {});
  const std::size_t f3 = layer3.front().size();
  std::vector<Real> layer4(f3, 0.0L);
  if (cfg.fusion == Fusion::gating) {
    std::vector<Real> score(layer3.size(), 0.0L);
    for (std::size_t i = 0; i < layer3.size(); ++i) {
      for (std::size_t f = 0; f < f3; ++f) score[i] += at(p.gate_global_w, f) * layer3[i][f];
    }
    const Real top = *std::max_element(score.begin(), score.end());
    Real z = 0.0L;
    for (auto& v : score) z += (v = std::exp(v - top));
    for (std::size_t i = 0; i < layer3.size(); ++i) {
      for (std::size_t f = 0; f < f3; ++f) layer4[f] += score[i] / z * layer3[i][f];
    }
  } else {
    std::vector<int> order(layer3.size());
    for (std::size_t f = 0; f < f3; ++f) {
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return layer3[static_cast<std::size_t>(a)][f] > layer3[static_cast<std::size_t>(b)][f];
      });
      for (std::size_t i = 0; i < cfg.pool_k; ++i) {
        layer4[f] += layer3[static_cast<std::size_t>(order[i])][f] / static_cast<Real>(cfg.pool_k);
        if (selections) selections->push_back(order[i]);
      }
    }
  }

  std::vector<Real> x(static_cast<std::size_t>(p.proj_w.rows()));
  for (std::size_t r = 0; r < x.size(); ++r) {
    Real v = at(p.proj_b, r);
    for (std::size_t c = 0; c < f3; ++c) v += weight(p.proj_w, r, c) * layer4[c];
    x[r] = logistic(v);
  }
  const auto hist = history_input();
  x.insert(x.end(), hist.begin(), hist.end());
  for (const auto& layer : m.joint.hidden) x = dense(layer, x);

  const auto& sw = m.joint.softmax_w;
  std::vector<Real> logits(static_cast<std::size_t>(sw.rows()));
  for (std::size_t v = 0; v < logits.size(); ++v) {
    Real l = at(m.joint.softmax_b, v);
    for (std::size_t c = 0; c < x.size(); ++c) l += weight(sw, v, c) * x[c];
    logits[v] = l;
  }
  const Real top = *std::max_element(logits.begin(), logits.end());
  Real z = 0.0L;
  for (Real l : logits) z += std::exp(l - top);
  return top + std::log(z) - logits[static_cast<std::size_t>(s.target)];
}

}  // namespace

long double extended_minibatch_loss(std::span<const TrainingSample> batch, const Model& model,
                                    std::vector<int>* selections) {
  if (batch.empty()) throw Error("empty minibatch");
  Real total = 0.0L;
  for (const auto& s : batch) total += sample_loss(s, model, selections);
  return total / static_cast<Real>(batch.size());
}

}  // namespace cjlm
