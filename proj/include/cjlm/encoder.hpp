#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cjlm/common.hpp"

namespace cjlm {

enum class Arch {
  generic,    // plain CNN encoder
  tag,        // affiliated words carry a tag bit
  tag_dep,    // plus a second bit for dependency heads of affiliated words
  attention,  // history-derived signal h prepended to every Layer-1 window
};

enum class Fusion { gating, pooling };

std::string_view to_string(Arch arch);
std::string_view to_string(Fusion fusion);
Arch parse_arch(std::string_view name);
Fusion parse_fusion(std::string_view name);

struct EncoderConfig {
  static constexpr std::size_t kWindow = 3;

  Arch arch = Arch::generic;
  std::size_t src_vocab = 0;
  std::size_t emb_dim = 100;      // d
  std::size_t tgt_emb_dim = 100;  // d_t
  std::size_t attn_dim = 100;     // h_dim, attention arch only
  std::size_t attn_depth = 1;     // affine+sigmoid layers producing h
  std::size_t filters1 = 100;
  std::size_t filters3 = 100;
  std::size_t repr_dim = 100;
  std::size_t maxlen = 40;
  std::size_t history = 3;
  Fusion fusion = Fusion::gating;
  std::size_t pool_k = 8;  // pooling fusion only

  // Layer-0 row width: embedding plus tag bits.
  std::size_t input_width() const;
  // Width of the vector prepended to each Layer-1 window.
  std::size_t prefix_width() const { return arch == Arch::attention ? attn_dim : 0; }
  std::size_t layer1_len() const { return maxlen - (kWindow - 1); }
  std::size_t layer2_len() const { return layer1_len() / 2; }
  std::size_t layer3_len() const { return layer2_len() - (kWindow - 1); }

  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

struct EncoderParams {
  Matrix src_embeddings;  // V_src x d; PAD row stays zero
  Matrix conv1_w;         // F1 x (prefix + 3 d0)
  Vector conv1_b;
  Vector gate_local_w;  // 4 d0, gating only
  Vector gate_local_b;  // 1, gating only
  Matrix conv3_w;       // F3 x 3 F1
  Vector conv3_b;
  Vector gate_global_w;  // F3, gating only
  Matrix proj_w;         // r x F3
  Vector proj_b;
  std::vector<Affine> attn;  // attention arch only; first layer maps k d_t -> h_dim

  static EncoderParams zeros(const EncoderConfig& cfg);

  // Calls fn(name, tensor) for every learnable tensor, skipping tensors the
  // configuration does not use.
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
    auto call = [&](const std::string& name, auto& t) {
      if (t.size() > 0) fn(name, t);
    };
    call("src_embeddings", self.src_embeddings);
    call("conv1.w", self.conv1_w);
    call("conv1.b", self.conv1_b);
    call("gate_local.w", self.gate_local_w);
    call("gate_local.b", self.gate_local_b);
    call("conv3.w", self.conv3_w);
    call("conv3.b", self.conv3_b);
    call("gate_global.w", self.gate_global_w);
    call("proj.w", self.proj_w);
    call("proj.b", self.proj_b);
    for (std::size_t i = 0; i < self.attn.size(); ++i) {
      call("attn." + std::to_string(i) + ".w", self.attn[i].w);
      call("attn." + std::to_string(i) + ".b", self.attn[i].b);
    }
  }
};

// Guide inputs for one encoding. Positions index the padded source.
struct EncoderInput {
  std::span<const WordId> source_ids;
  std::span<const int> affiliated;
  std::span<const int> head_positions;
  std::span<const WordId> history;
};

// All intermediate activations of one forward pass.
struct ForwardTrace {
  Matrix layer0;  // maxlen x d0
  Vector attn_input;
  std::vector<Vector> attn_layers;  // back() is h
  Matrix layer1;                    // L1 x F1
  Vector local_alpha;               // L2, gating
  std::vector<int> local_argmax;    // L2 x F1 chosen Layer-1 rows, pooling
  Matrix layer2;                    // L2 x F1
  Matrix layer3;                    // L3 x F3
  Vector global_omega;              // L3, gating
  std::vector<int> global_topk;     // F3 x pool_k chosen Layer-3 rows, pooling
  Vector layer4;                    // F3
  Vector phi;                       // r
};

Matrix embed_source(const EncoderInput& input, const EncoderConfig& cfg, const Matrix& src_embeddings);

// Narrow convolution with window 3 and sigmoid activation. `prefix`, when
// non-empty, is prepended to every window.
Matrix convolve(const Matrix& input, const Matrix& filters, const Vector& biases, const Vector& prefix = Vector());

// Blends Layer-1 window pairs (2j, 2j+1) with a scalar gate computed from
// Layer-0 rows 2j..2j+3.
Matrix local_gate(const Matrix& layer1, const Matrix& layer0, const Vector& gate_w, double gate_b,
                  Vector* alpha = nullptr);

// Softmax-weighted sum over locations.
Vector global_gate(const Matrix& layer3, const Vector& w_g, Vector* omega = nullptr);

// Size-2 max pooling over non-overlapping row pairs; ties pick the lower row.
Matrix pool_local(const Matrix& layer1, std::vector<int>* argmax = nullptr);

// Mean of the pool_k largest values of each column; ties pick lower rows.
Vector pool_global(const Matrix& layer3, std::size_t pool_k, std::vector<int>* selected = nullptr);

Vector project_final(const Vector& layer4, const Matrix& proj_w, const Vector& proj_b);

Vector compute_attention_signal(std::span<const WordId> history, const Matrix& tgt_embeddings,
                                const std::vector<Affine>& layers, Vector* input = nullptr,
                                std::vector<Vector>* activations = nullptr);

// Full pipeline. tgt_embeddings is only read by the attention arch.
ForwardTrace encode(const EncoderInput& input, const EncoderConfig& cfg, const EncoderParams& params,
                    const Matrix& tgt_embeddings);

}  // namespace cjlm
