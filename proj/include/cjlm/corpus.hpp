#pragma once

#include <compare>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cjlm/common.hpp"

namespace cjlm {

// Bidirectional token/id map. Ids 0..3 are reserved for PAD, UNK, BOS and EOS.
class Vocabulary {
 public:
  static constexpr WordId kPad = 0;
  static constexpr WordId kUnk = 1;
  static constexpr WordId kBos = 2;
  static constexpr WordId kEos = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary();

  // Rebuilds a vocabulary from its token list (reserved tokens first), as
  // stored in a model file.
  static Vocabulary from_tokens(std::vector<std::string> tokens, std::size_t limit);

  WordId id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(WordId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::size_t size() const { return tokens_.size(); }
  std::size_t limit() const { return limit_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_ && limit_ == other.limit_; }

 private:
  friend Vocabulary build_vocabulary(std::span<const std::vector<std::string>>, std::size_t);
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, WordId> index_;
  std::size_t limit_ = 0;
};

// Keeps the `limit` most frequent tokens; ties at the cutoff go to the token
// seen first.
Vocabulary build_vocabulary(std::span<const std::vector<std::string>> sentences, std::size_t limit);

std::vector<WordId> map_tokens(std::span<const std::string> tokens, const Vocabulary& vocab);

// Left-pads with PAD up to maxlen.
std::vector<WordId> pad_source(std::span<const WordId> ids, std::size_t maxlen);

struct AlignmentLink {
  int source;
  int target;
  auto operator<=>(const AlignmentLink&) const = default;
};

// Sorted, duplicate-free set of 0-based (source, target) links.
struct AlignmentLinkSet {
  std::vector<AlignmentLink> links;

  void insert(AlignmentLink link);
  bool empty() const { return links.empty(); }
  bool within(std::size_t source_len, std::size_t target_len) const;
  bool operator==(const AlignmentLinkSet&) const = default;
};

// Parses whitespace separated "i-j" pairs.
AlignmentLinkSet parse_alignment_line(std::string_view line);

class UnalignableError : public Error {
 public:
  UnalignableError() : Error("unalignable sentence") {}
};

// Source indices affiliated with target word t. Unaligned words inherit from
// the closest aligned target word; on equal distance the right one wins.
std::vector<int> compute_affiliation(int t, const AlignmentLinkSet& alignment, std::size_t target_len);

// Dependency heads, one per source token, -1 for the root. Validates a single
// root, index range and acyclicity.
std::vector<int> parse_heads_line(std::string_view line, std::size_t source_len);

struct AlignedSentencePair {
  std::vector<std::string> source_tokens;
  std::vector<std::string> target_tokens;
  AlignmentLinkSet alignment;
  std::optional<std::vector<int>> heads;
};

struct TrainingSample {
  std::vector<WordId> source_ids;  // maxlen, left-padded
  std::vector<int> affiliated;     // positions in source_ids
  std::vector<int> head_positions; // heads of affiliated words, positions in source_ids
  std::vector<WordId> history;     // k previous target ids, BOS-filled
  WordId target = Vocabulary::kUnk;

  bool operator==(const TrainingSample&) const = default;
};

struct ExtractOptions {
  std::size_t history = 3;
  std::size_t maxlen = 40;
  bool emit_eos = false;
};

// One sample per target word, plus an EOS sample when requested. Throws
// UnalignableError when no target word is aligned.
std::vector<TrainingSample> extract_samples(const AlignedSentencePair& pair, const Vocabulary& src_vocab,
                                            const Vocabulary& tgt_vocab, const ExtractOptions& options);

struct SampleSet {
  std::vector<TrainingSample> samples;
  std::size_t sentences = 0;
  std::size_t skipped_unalignable = 0;
  std::size_t skipped_too_long = 0;
};

SampleSet extract_corpus(std::span<const AlignedSentencePair> pairs, const Vocabulary& src_vocab,
                         const Vocabulary& tgt_vocab, const ExtractOptions& options);

std::vector<std::string> split_tokens(std::string_view line);

// Reads source, target, alignment and (optionally) heads files, which must all
// have the same number of lines.
std::vector<AlignedSentencePair> read_parallel_corpus(const std::string& source_path, const std::string& target_path,
                                                      const std::string& alignment_path,
                                                      const std::optional<std::string>& heads_path);

std::vector<std::string> read_lines(const std::string& path);

}  // namespace cjlm
