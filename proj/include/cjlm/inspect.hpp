#pragma once

#include <iosfwd>
#include <span>

#include "cjlm/model_io.hpp"

namespace cjlm {

// Plain-text dump with CSV sections: configuration, per-tensor statistics,
// a histogram of the global-gate weights w_g and, when samples are given and
// the model gates, the distribution of the gate's location weights.
void inspect_model(const ModelArtifact& artifact, std::ostream& out, std::span<const TrainingSample> samples = {},
                   std::size_t bins = 10);

}  // namespace cjlm
