#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cjlm/corpus.hpp"
#include "cjlm/jointlm.hpp"
#include "cjlm/training.hpp"

namespace cjlm {

struct Provenance {
  std::uint64_t seed = 0;
  std::size_t corpus_lines = 0;
  std::size_t samples = 0;
  std::size_t skipped_unalignable = 0;
  std::size_t skipped_too_long = 0;
  std::vector<EpochMetrics> metrics;  // wall time is not stored
};

// Everything needed to score with a trained model.
struct ModelArtifact {
  static constexpr std::uint32_t kFormatVersion = 1;

  Model model;  // carries the ModelConfig
  TrainConfig train;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
  Provenance provenance;
};

class ModelFormatError : public Error {
 public:
  explicit ModelFormatError(const std::string& what) : Error(what) {}
};

// File layout, little-endian:
//   "CJLM" | u32 version | u64 n | n bytes UTF-8 JSON (configs, vocabularies,
//   provenance) | u32 tensor count | per tensor: u32 name length, name,
//   u32 rank, u64 dims[rank], row-major f32 payload | u64 FNV-1a checksum of
//   all preceding bytes.
void save_model(const ModelArtifact& artifact, const std::string& path);
ModelArtifact load_model(const std::string& path);

std::vector<std::uint8_t> serialize_model(const ModelArtifact& artifact);
ModelArtifact deserialize_model(const std::vector<std::uint8_t>& bytes);

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size);

}  // namespace cjlm
