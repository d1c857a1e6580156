#include "cjlm/inspect.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cjlm/tensor.hpp"

namespace cjlm {

namespace {

void histogram(std::ostream& out, std::span<const double> values, double lo, double hi, std::size_t bins) {
  std::vector<std::size_t> counts(bins, 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    auto b = width > 0.0 ? static_cast<std::size_t>(std::floor((v - lo) / width)) : 0;
    counts[std::min(b, bins - 1)] += 1;
  }
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < bins; ++b) {
    out << fmt::format("{:.6g},{:.6g},{}\n", lo + width * static_cast<double>(b),
                       lo + width * static_cast<double>(b + 1), counts[b]);
  }
}

}  // namespace

void inspect_model(const ModelArtifact& artifact, std::ostream& out, std::span<const TrainingSample> samples,
                   std::size_t bins) {
  bins = std::max<std::size_t>(bins, 1);
  const auto& cfg = artifact.model.config;
  const auto& e = cfg.encoder;

  out << "# config\n";
  out << fmt::format("arch={}\nfusion={}\npool_k={}\nemb_dim={}\ntgt_emb_dim={}\nattn_dim={}\nattn_depth={}\n",
                     to_string(e.arch), to_string(e.fusion), e.pool_k, e.emb_dim, e.tgt_emb_dim, e.attn_dim,
                     e.attn_depth);
  out << fmt::format("filters1={}\nfilters3={}\nrepr_dim={}\nmaxlen={}\nhistory={}\n", e.filters1, e.filters3,
                     e.repr_dim, e.maxlen, e.history);
  out << fmt::format("layer_lengths={}/{}/{}\n", e.layer1_len(), e.layer2_len(), e.layer3_len());
  out << fmt::format("src_vocab={}\ntgt_vocab={}\nhidden={}\nemit_eos={}\n", e.src_vocab, cfg.joint.tgt_vocab,
                     fmt::join(cfg.joint.hidden, ","), cfg.emit_eos);
  out << fmt::format("seed={}\ntrain_samples={}\nepochs_trained={}\n", artifact.provenance.seed,
                     artifact.provenance.samples, artifact.provenance.metrics.size());

  out << "\n# parameters\nname,shape,count,mean,std,min,max,l2\n";
  for (const auto& t : tensor_views(artifact.model)) {
    const auto v = t.values;
    double sum = 0.0, sq = 0.0, lo = v.empty() ? 0.0 : v[0], hi = lo;
    for (double x : v) {
      sum += x;
      sq += x * x;
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    const double n = static_cast<double>(v.size());
    const double mean = sum / n;
    const double var = std::max(0.0, sq / n - mean * mean);
    out << fmt::format("{},{},{},{:.6g},{:.6g},{:.6g},{:.6g},{:.6g}\n", t.name, fmt::join(t.dims, "x"), v.size(),
                       mean, std::sqrt(var), lo, hi, std::sqrt(sq));
  }

  const auto& wg = artifact.model.encoder.gate_global_w;
  if (wg.size() > 0) {
    out << "\n# global_gate_w_histogram\n";
    histogram(out, std::span<const double>(wg.data(), static_cast<std::size_t>(wg.size())), wg.minCoeff(),
              wg.maxCoeff(), bins);
  }

  if (!samples.empty() && e.fusion == Fusion::gating) {
    const auto l3 = static_cast<Eigen::Index>(e.layer3_len());
    Vector mean = Vector::Zero(l3);
    Vector peak = Vector::Zero(l3);
    std::vector<double> all;
    std::vector<double> max_weight;
    for (const auto& s : samples) {
      auto trace = encode(encoder_input(s, e), e, artifact.model.encoder, artifact.model.joint.tgt_embeddings);
      mean += trace.global_omega;
      Eigen::Index argmax = 0;
      max_weight.push_back(trace.global_omega.maxCoeff(&argmax));
      peak(argmax) += 1.0;
      all.insert(all.end(), trace.global_omega.data(), trace.global_omega.data() + trace.global_omega.size());
    }
    mean /= static_cast<double>(samples.size());
    out << "\n# omega_by_location\nlocation,mean_omega,argmax_count\n";
    for (Eigen::Index i = 0; i < l3; ++i) out << fmt::format("{},{:.6g},{}\n", i, mean(i), peak(i));
    out << "\n# omega_histogram\n";
    histogram(out, all, 0.0, 1.0, bins);
    out << "\n# omega_max_histogram\n";
    histogram(out, max_weight, 0.0, 1.0, bins);
  }
}

}  // namespace cjlm
