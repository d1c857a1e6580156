#include "cjlm/encoder.hpp"

#include <algorithm>
#include <numeric>

#include <fmt/format.h>

namespace cjlm {

namespace {

using Eigen::Index;
using StridedRows = Eigen::Map<const Matrix, 0, Eigen::OuterStride<>>;

// Rows [i, i + span) of a row-major matrix, flattened, for every i stepping by
// `step`. Overlapping windows share storage.
StridedRows windows(const Matrix& m, Index count, Index span, Index step) {
  return StridedRows(m.data(), count, span * m.cols(), Eigen::OuterStride<>(step * m.cols()));
}

void check_position(int p, const EncoderConfig& cfg, std::span<const WordId> source_ids, const char* what) {
  if (p < 0 || static_cast<std::size_t>(p) >= cfg.maxlen) {
    throw Error(fmt::format("{} position {} outside [0, {})", what, p, cfg.maxlen));
  }
  if (source_ids[static_cast<std::size_t>(p)] == 0) {
    throw Error(fmt::format("{} position {} indexes padding", what, p));
  }
}

}  // namespace

std::string_view to_string(Arch arch) {
  switch (arch) {
    case Arch::generic: return "generic";
    case Arch::tag: return "tag";
    case Arch::tag_dep: return "tag_dep";
    case Arch::attention: return "attention";
  }
  return "?";
}

std::string_view to_string(Fusion fusion) { return fusion == Fusion::gating ? "gating" : "pooling"; }

Arch parse_arch(std::string_view name) {
  for (Arch a : {Arch::generic, Arch::tag, Arch::tag_dep, Arch::attention}) {
    if (name == to_string(a)) return a;
  }
  if (name == "tagcnn") return Arch::tag;
  if (name == "incnn") return Arch::attention;
  throw ConfigError(fmt::format("unknown arch '{}'", name));
}

Fusion parse_fusion(std::string_view name) {
  if (name == "gating") return Fusion::gating;
  if (name == "pooling") return Fusion::pooling;
  throw ConfigError(fmt::format("unknown fusion '{}'", name));
}

std::size_t EncoderConfig::input_width() const {
  switch (arch) {
    case Arch::tag: return emb_dim + 1;
    case Arch::tag_dep: return emb_dim + 2;
    default: return emb_dim;
  }
}

void EncoderConfig::validate() const {
  if (src_vocab < 5) throw ConfigError("source vocabulary must hold at least one content token");
  if (emb_dim == 0 || filters1 == 0 || filters3 == 0 || repr_dim == 0) {
    throw ConfigError("layer dimensions must be positive");
  }
  if (arch == Arch::attention && (attn_dim == 0 || attn_depth == 0 || tgt_emb_dim == 0 || history == 0)) {
    throw ConfigError("attention arch needs positive attn_dim, attn_depth, tgt_emb_dim and history");
  }
  if (maxlen < kWindow) throw ConfigError("maxlen shorter than the convolution window");
  if (layer1_len() % 2 != 0) {
    throw ConfigError(fmt::format("maxlen {} gives odd Layer-1 length {}; maxlen - 2 must be even", maxlen,
                                  layer1_len()));
  }
  if (layer2_len() < kWindow) throw ConfigError(fmt::format("maxlen {} leaves no Layer-3 locations", maxlen));
  if (fusion == Fusion::pooling && (pool_k < 1 || pool_k > layer3_len())) {
    throw ConfigError(fmt::format("pool_k {} outside [1, {}]", pool_k, layer3_len()));
  }
}

EncoderParams EncoderParams::zeros(const EncoderConfig& cfg) {
  cfg.validate();
  const auto d0 = static_cast<Index>(cfg.input_width());
  const auto f1 = static_cast<Index>(cfg.filters1);
  const auto f3 = static_cast<Index>(cfg.filters3);
  EncoderParams p;
  p.src_embeddings = Matrix::Zero(static_cast<Index>(cfg.src_vocab), static_cast<Index>(cfg.emb_dim));
  p.conv1_w = Matrix::Zero(f1, static_cast<Index>(cfg.prefix_width()) + 3 * d0);
  p.conv1_b = Vector::Zero(f1);
  if (cfg.fusion == Fusion::gating) {
    p.gate_local_w = Vector::Zero(4 * d0);
    p.gate_local_b = Vector::Zero(1);
    p.gate_global_w = Vector::Zero(f3);
  }
  p.conv3_w = Matrix::Zero(f3, 3 * f1);
  p.conv3_b = Vector::Zero(f3);
  p.proj_w = Matrix::Zero(static_cast<Index>(cfg.repr_dim), f3);
  p.proj_b = Vector::Zero(static_cast<Index>(cfg.repr_dim));
  if (cfg.arch == Arch::attention) {
    std::size_t in = cfg.history * cfg.tgt_emb_dim;
    for (std::size_t i = 0; i < cfg.attn_depth; ++i) {
      p.attn.emplace_back(cfg.attn_dim, in);
      in = cfg.attn_dim;
    }
  }
  return p;
}

Matrix embed_source(const EncoderInput& input, const EncoderConfig& cfg, const Matrix& src_embeddings) {
  if (input.source_ids.size() != cfg.maxlen) {
    throw Error(fmt::format("source has {} ids, expected maxlen {}", input.source_ids.size(), cfg.maxlen));
  }
  if (!input.head_positions.empty() && cfg.arch != Arch::tag_dep) {
    throw ConfigError(fmt::format("head positions given to arch {}", to_string(cfg.arch)));
  }
  const Index d = static_cast<Index>(cfg.emb_dim);
  Matrix layer0 = Matrix::Zero(static_cast<Index>(cfg.maxlen), static_cast<Index>(cfg.input_width()));
  for (std::size_t i = 0; i < cfg.maxlen; ++i) {
    WordId id = input.source_ids[i];
    if (id == 0) continue;
    if (id < 0 || id >= src_embeddings.rows()) throw Error(fmt::format("source id {} outside vocabulary", id));
    layer0.row(static_cast<Index>(i)).head(d) = src_embeddings.row(id);
  }
  if (cfg.arch == Arch::tag || cfg.arch == Arch::tag_dep) {
    for (int p : input.affiliated) {
      check_position(p, cfg, input.source_ids, "affiliated");
      layer0(p, d) = 1.0;
    }
  }
  if (cfg.arch == Arch::tag_dep) {
    for (int p : input.head_positions) {
      check_position(p, cfg, input.source_ids, "head");
      layer0(p, d + 1) = 1.0;
    }
  }
  return layer0;
}

Matrix convolve(const Matrix& input, const Matrix& filters, const Vector& biases, const Vector& prefix) {
  const Index width = input.cols();
  const Index span = EncoderConfig::kWindow;
  if (input.rows() < span) throw ConfigError("convolution input shorter than the window");
  if (filters.cols() != prefix.size() + span * width || filters.rows() != biases.size()) {
    throw ConfigError(fmt::format("filter shape {}x{} does not match window width {} and {} biases", filters.rows(),
                                  filters.cols(), prefix.size() + span * width, biases.size()));
  }
  const Index out = input.rows() - span + 1;
  Vector shift = biases;
  if (prefix.size() > 0) shift.noalias() += filters.leftCols(prefix.size()) * prefix;
  Matrix pre = windows(input, out, span, 1) * filters.rightCols(span * width).transpose();
  pre.rowwise() += shift.transpose();
  return sigmoid(pre);
}

Matrix local_gate(const Matrix& layer1, const Matrix& layer0, const Vector& gate_w, double gate_b, Vector* alpha) {
  const Index l1 = layer1.rows();
  if (l1 % 2 != 0) throw ConfigError("local gating needs an even number of Layer-1 locations");
  if (layer0.rows() != l1 + 2 || gate_w.size() != 4 * layer0.cols()) throw ConfigError("local gate shape mismatch");
  const Index l2 = l1 / 2;
  Vector a = sigmoid(((windows(layer0, l2, 4, 2) * gate_w).array() + gate_b).matrix());
  Matrix out(l2, layer1.cols());
  for (Index j = 0; j < l2; ++j) {
    out.row(j) = a(j) * layer1.row(2 * j) + (1.0 - a(j)) * layer1.row(2 * j + 1);
  }
  if (alpha) *alpha = std::move(a);
  return out;
}

Vector global_gate(const Matrix& layer3, const Vector& w_g, Vector* omega) {
  if (layer3.rows() < 1 || w_g.size() != layer3.cols()) throw ConfigError("global gate shape mismatch");
  Vector scores = layer3 * w_g;
  Vector w = (scores.array() - scores.maxCoeff()).exp();
  w /= w.sum();
  Vector out = layer3.transpose() * w;
  if (omega) *omega = std::move(w);
  return out;
}

Matrix pool_local(const Matrix& layer1, std::vector<int>* argmax) {
  const Index l1 = layer1.rows();
  if (l1 % 2 != 0) throw ConfigError("local pooling needs an even number of Layer-1 locations");
  const Index l2 = l1 / 2;
  const Index f = layer1.cols();
  Matrix out(l2, f);
  if (argmax) argmax->assign(static_cast<std::size_t>(l2 * f), 0);
  for (Index j = 0; j < l2; ++j) {
    for (Index c = 0; c < f; ++c) {
      Index row = layer1(2 * j + 1, c) > layer1(2 * j, c) ? 2 * j + 1 : 2 * j;
      out(j, c) = layer1(row, c);
      if (argmax) (*argmax)[static_cast<std::size_t>(j * f + c)] = static_cast<int>(row);
    }
  }
  return out;
}

Vector pool_global(const Matrix& layer3, std::size_t pool_k, std::vector<int>* selected) {
  const Index l3 = layer3.rows();
  const Index f = layer3.cols();
  if (pool_k < 1 || static_cast<Index>(pool_k) > l3) {
    throw ConfigError(fmt::format("pool_k {} outside [1, {}]", pool_k, l3));
  }
  const Index k = static_cast<Index>(pool_k);
  Vector out(f);
  if (selected) selected->assign(static_cast<std::size_t>(f * k), 0);
  std::vector<int> order(static_cast<std::size_t>(l3));
  for (Index c = 0; c < f; ++c) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      double va = layer3(a, c);
      double vb = layer3(b, c);
      return va > vb || (va == vb && a < b);
    });
    double sum = 0.0;
    for (Index i = 0; i < k; ++i) {
      sum += layer3(order[static_cast<std::size_t>(i)], c);
      if (selected) (*selected)[static_cast<std::size_t>(c * k + i)] = order[static_cast<std::size_t>(i)];
    }
    out(c) = sum / static_cast<double>(k);
  }
  return out;
}

Vector project_final(const Vector& layer4, const Matrix& proj_w, const Vector& proj_b) {
  if (proj_w.cols() != layer4.size() || proj_w.rows() != proj_b.size()) throw ConfigError("projection shape mismatch");
  return sigmoid(proj_w * layer4 + proj_b);
}

Vector compute_attention_signal(std::span<const WordId> history, const Matrix& tgt_embeddings,
                                const std::vector<Affine>& layers, Vector* input, std::vector<Vector>* activations) {
  const Index dt = tgt_embeddings.cols();
  Vector x(static_cast<Index>(history.size()) * dt);
  for (std::size_t j = 0; j < history.size(); ++j) {
    WordId id = history[j];
    if (id < 0 || id >= tgt_embeddings.rows()) throw Error(fmt::format("history id {} outside vocabulary", id));
    x.segment(static_cast<Index>(j) * dt, dt) = tgt_embeddings.row(id).transpose();
  }
  if (layers.empty() || layers.front().w.cols() != x.size()) throw ConfigError("attention DNN shape mismatch");
  if (activations) activations->clear();
  Vector a = x;
  for (const auto& layer : layers) {
    a = sigmoid(layer.w * a + layer.b);
    if (activations) activations->push_back(a);
  }
  if (input) *input = std::move(x);
  return a;
}

ForwardTrace encode(const EncoderInput& input, const EncoderConfig& cfg, const EncoderParams& params,
                    const Matrix& tgt_embeddings) {
  if ((cfg.arch == Arch::tag || cfg.arch == Arch::tag_dep) && input.affiliated.empty()) {
    throw Error(fmt::format("arch {} requires affiliated source positions", to_string(cfg.arch)));
  }
  if (cfg.arch == Arch::attention && input.history.size() != cfg.history) {
    throw Error(fmt::format("arch {} requires a history of {} words, got {}", to_string(cfg.arch), cfg.history,
                            input.history.size()));
  }

  ForwardTrace t;
  t.layer0 = embed_source(input, cfg, params.src_embeddings);

  Vector prefix;
  if (cfg.arch == Arch::attention) {
    prefix = compute_attention_signal(input.history, tgt_embeddings, params.attn, &t.attn_input, &t.attn_layers);
  }
  t.layer1 = convolve(t.layer0, params.conv1_w, params.conv1_b, prefix);

  if (cfg.fusion == Fusion::gating) {
    t.layer2 = local_gate(t.layer1, t.layer0, params.gate_local_w, params.gate_local_b(0), &t.local_alpha);
  } else {
    t.layer2 = pool_local(t.layer1, &t.local_argmax);
  }

  t.layer3 = convolve(t.layer2, params.conv3_w, params.conv3_b);

  if (cfg.fusion == Fusion::gating) {
    t.layer4 = global_gate(t.layer3, params.gate_global_w, &t.global_omega);
  } else {
    t.layer4 = pool_global(t.layer3, cfg.pool_k, &t.global_topk);
  }

  t.phi = project_final(t.layer4, params.proj_w, params.proj_b);
  return t;
}

}  // namespace cjlm
