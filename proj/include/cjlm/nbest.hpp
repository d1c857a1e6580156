#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cjlm/corpus.hpp"
#include "cjlm/model_io.hpp"

namespace cjlm {

// One line of a Moses-style n-best list:
//   id ||| tokens ||| features ||| score
//   id ||| tokens ||| alignment ||| features ||| score
// where alignment holds "i-j" (hypothesis word - source word) pairs.
struct NBestEntry {
  std::size_t sentence_id = 0;
  std::vector<std::string> hypothesis;
  // Links stored as (source, target = hypothesis index).
  std::optional<AlignmentLinkSet> alignment;
  std::vector<std::string> fields;  // raw text between separators, verbatim
  std::size_t feature_field = 0;
};

NBestEntry parse_nbest_line(std::string_view line);

// Appends " name value" to the feature field; every other byte is kept.
std::string annotate_nbest_line(const NBestEntry& entry, std::string_view feature_name, double value);

struct SourceSentence {
  std::vector<std::string> tokens;
  std::optional<std::vector<int>> heads;
};

// Samples whose log-probabilities sum to the hypothesis score: one per
// hypothesis word plus EOS when the model predicts it.
std::vector<TrainingSample> hypothesis_samples(const ModelArtifact& artifact, const SourceSentence& source,
                                               std::span<const std::string> hypothesis,
                                               const std::optional<AlignmentLinkSet>& alignment,
                                               std::size_t sentence_id);

double score_hypothesis(const ModelArtifact& artifact, const SourceSentence& source,
                        std::span<const std::string> hypothesis, const std::optional<AlignmentLinkSet>& alignment,
                        std::size_t sentence_id = 0);

struct ScoreOptions {
  std::string feature_name = "CNNJLM=";
  std::size_t threads = 1;
};

// Scores every line of `nbest` and writes the annotated lines, in input order.
std::size_t score_nbest(const ModelArtifact& artifact, std::span<const SourceSentence> sources, std::istream& nbest,
                        std::ostream& out, const ScoreOptions& options = {});

std::vector<SourceSentence> read_sources(const std::string& source_path, const std::optional<std::string>& heads_path);

}  // namespace cjlm
