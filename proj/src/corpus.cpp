#include "cjlm/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>

#include <fmt/format.h>

namespace cjlm {

namespace {

const char* const kReservedTokens[Vocabulary::kReserved] = {"<pad>", "<unk>", "<s>", "</s>"};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }

// Calls fn(token, offset) for each whitespace separated token.
template <typename Fn>
void for_each_token(std::string_view line, Fn&& fn) {
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    std::size_t start = i;
    while (i < line.size() && !is_space(line[i])) ++i;
    if (i > start) fn(line.substr(start, i - start), start);
  }
}

bool parse_int(std::string_view text, int& out) {
  if (text.empty()) return false;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

}  // namespace

Vocabulary::Vocabulary() {
  for (const char* token : kReservedTokens) add(token);
}

void Vocabulary::add(const std::string& token) {
  index_.emplace(token, static_cast<WordId>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens, std::size_t limit) {
  if (tokens.size() < kReserved) throw Error("vocabulary is missing reserved tokens");
  for (std::size_t i = 0; i < kReserved; ++i) {
    if (tokens[i] != kReservedTokens[i]) throw Error("vocabulary reserved token mismatch at id " + std::to_string(i));
  }
  if (tokens.size() > limit + kReserved) throw Error("vocabulary exceeds its limit");
  Vocabulary vocab;
  vocab.limit_ = limit;
  for (std::size_t i = kReserved; i < tokens.size(); ++i) {
    if (vocab.contains(tokens[i])) throw Error("duplicate vocabulary token '" + tokens[i] + "'");
    vocab.add(tokens[i]);
  }
  return vocab;
}

WordId Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

Vocabulary build_vocabulary(std::span<const std::vector<std::string>> sentences, std::size_t limit) {
  if (limit < 1) throw ConfigError("vocabulary limit must be at least 1");

  struct Entry {
    std::string token;
    std::size_t count;
  };
  std::vector<Entry> entries;  // first-occurrence order
  std::unordered_map<std::string, std::size_t> position;
  const Vocabulary reserved;
  bool any = false;
  for (const auto& sentence : sentences) {
    for (const auto& token : sentence) {
      any = true;
      if (reserved.contains(token)) continue;
      auto [it, inserted] = position.emplace(token, entries.size());
      if (inserted) {
        entries.push_back({token, 1});
      } else {
        ++entries[it->second].count;
      }
    }
  }
  if (!any) throw Error("empty corpus");

  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.count > b.count; });
  if (entries.size() > limit) entries.resize(limit);

  Vocabulary vocab;
  vocab.limit_ = limit;
  for (const auto& e : entries) vocab.add(e.token);
  return vocab;
}

std::vector<WordId> map_tokens(std::span<const std::string> tokens, const Vocabulary& vocab) {
  std::vector<WordId> ids;
  ids.reserve(tokens.size());
  for (const auto& token : tokens) ids.push_back(vocab.id(token));
  return ids;
}

std::vector<WordId> pad_source(std::span<const WordId> ids, std::size_t maxlen) {
  if (ids.size() > maxlen) {
    throw Error(fmt::format("sentence exceeds maxlen ({} > {})", ids.size(), maxlen));
  }
  std::vector<WordId> out(maxlen - ids.size(), Vocabulary::kPad);
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

void AlignmentLinkSet::insert(AlignmentLink link) {
  auto it = std::lower_bound(links.begin(), links.end(), link);
  if (it == links.end() || *it != link) links.insert(it, link);
}

bool AlignmentLinkSet::within(std::size_t source_len, std::size_t target_len) const {
  return std::all_of(links.begin(), links.end(), [&](const AlignmentLink& l) {
    return l.source >= 0 && l.target >= 0 && static_cast<std::size_t>(l.source) < source_len &&
           static_cast<std::size_t>(l.target) < target_len;
  });
}

AlignmentLinkSet parse_alignment_line(std::string_view line) {
  AlignmentLinkSet set;
  for_each_token(line, [&](std::string_view pair, std::size_t offset) {
    std::size_t dash = pair.find('-');
    int source = 0;
    int target = 0;
    if (dash == std::string_view::npos || !parse_int(pair.substr(0, dash), source) ||
        !parse_int(pair.substr(dash + 1), target) || source < 0 || target < 0) {
      throw ParseError(fmt::format("malformed alignment pair '{}'", pair), offset + 1);
    }
    set.insert({source, target});
  });
  return set;
}

std::vector<int> compute_affiliation(int t, const AlignmentLinkSet& alignment, std::size_t target_len) {
  if (t < 0 || static_cast<std::size_t>(t) >= target_len) {
    throw Error(fmt::format("target index {} out of range for length {}", t, target_len));
  }
  std::vector<std::vector<int>> by_target(target_len);
  for (const auto& link : alignment.links) {
    if (link.target >= 0 && static_cast<std::size_t>(link.target) < target_len) {
      by_target[static_cast<std::size_t>(link.target)].push_back(link.source);
    }
  }
  const int n = static_cast<int>(target_len);
  for (int distance = 0; distance < n; ++distance) {
    int right = t + distance;
    if (right < n && !by_target[static_cast<std::size_t>(right)].empty()) {
      return by_target[static_cast<std::size_t>(right)];
    }
    int left = t - distance;
    if (left >= 0 && !by_target[static_cast<std::size_t>(left)].empty()) {
      return by_target[static_cast<std::size_t>(left)];
    }
  }
  throw UnalignableError();
}

std::vector<int> parse_heads_line(std::string_view line, std::size_t source_len) {
  std::vector<int> heads;
  for_each_token(line, [&](std::string_view token, std::size_t offset) {
    int head = 0;
    if (!parse_int(token, head)) throw ParseError(fmt::format("malformed head index '{}'", token), offset + 1);
    heads.push_back(head);
  });
  if (heads.size() != source_len) {
    throw ParseError(fmt::format("expected {} head indices, found {}", source_len, heads.size()));
  }
  const int n = static_cast<int>(source_len);
  int roots = 0;
  for (int i = 0; i < n; ++i) {
    int h = heads[static_cast<std::size_t>(i)];
    if (h == -1) {
      ++roots;
    } else if (h < 0 || h >= n) {
      throw ParseError(fmt::format("head index {} of token {} out of range", h, i));
    } else if (h == i) {
      throw ParseError(fmt::format("token {} is its own head", i));
    }
  }
  if (roots != 1) throw ParseError(fmt::format("expected exactly one root, found {}", roots));

  // Following heads from any token must reach the root within n steps.
  for (int i = 0; i < n; ++i) {
    int node = i;
    int steps = 0;
    while (node != -1) {
      if (++steps > n) throw ParseError(fmt::format("dependency cycle through token {}", i));
      node = heads[static_cast<std::size_t>(node)];
    }
  }
  return heads;
}

std::vector<TrainingSample> extract_samples(const AlignedSentencePair& pair, const Vocabulary& src_vocab,
                                            const Vocabulary& tgt_vocab, const ExtractOptions& options) {
  const std::size_t src_len = pair.source_tokens.size();
  const std::size_t tgt_len = pair.target_tokens.size();
  if (!pair.alignment.within(src_len, tgt_len)) throw Error("alignment link out of range");
  if (pair.heads && pair.heads->size() != src_len) throw Error("head count does not match source length");

  const auto padded = pad_source(map_tokens(pair.source_tokens, src_vocab), options.maxlen);
  const int offset = static_cast<int>(options.maxlen - src_len);
  const auto target_ids = map_tokens(pair.target_tokens, tgt_vocab);

  if (tgt_len == 0) throw UnalignableError();

  std::vector<TrainingSample> samples;
  samples.reserve(tgt_len + (options.emit_eos ? 1 : 0));
  auto make = [&](std::size_t n, int affiliation_of, WordId target) {
    TrainingSample s;
    s.source_ids = padded;
    for (int a : compute_affiliation(affiliation_of, pair.alignment, tgt_len)) {
      s.affiliated.push_back(a + offset);
      if (pair.heads) {
        int head = (*pair.heads)[static_cast<std::size_t>(a)];
        if (head >= 0) s.head_positions.push_back(head + offset);
      }
    }
    std::sort(s.head_positions.begin(), s.head_positions.end());
    s.head_positions.erase(std::unique(s.head_positions.begin(), s.head_positions.end()), s.head_positions.end());
    s.history.assign(options.history, Vocabulary::kBos);
    for (std::size_t j = 0; j < options.history; ++j) {
      // history[j] holds the word at position n - history + j
      std::size_t back = options.history - j;
      if (n >= back) s.history[j] = target_ids[n - back];
    }
    s.target = target;
    samples.push_back(std::move(s));
  };

  for (std::size_t n = 0; n < tgt_len; ++n) make(n, static_cast<int>(n), target_ids[n]);
  if (options.emit_eos) make(tgt_len, static_cast<int>(tgt_len - 1), Vocabulary::kEos);
  return samples;
}

SampleSet extract_corpus(std::span<const AlignedSentencePair> pairs, const Vocabulary& src_vocab,
                         const Vocabulary& tgt_vocab, const ExtractOptions& options) {
  SampleSet set;
  for (const auto& pair : pairs) {
    ++set.sentences;
    if (pair.source_tokens.size() > options.maxlen) {
      ++set.skipped_too_long;
      continue;
    }
    try {
      auto samples = extract_samples(pair, src_vocab, tgt_vocab, options);
      set.samples.insert(set.samples.end(), std::make_move_iterator(samples.begin()),
                         std::make_move_iterator(samples.end()));
    } catch (const UnalignableError&) {
      ++set.skipped_unalignable;
    }
  }
  return set;
}

std::vector<std::string> split_tokens(std::string_view line) {
  std::vector<std::string> tokens;
  for_each_token(line, [&](std::string_view token, std::size_t) { tokens.emplace_back(token); });
  return tokens;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<AlignedSentencePair> read_parallel_corpus(const std::string& source_path, const std::string& target_path,
                                                      const std::string& alignment_path,
                                                      const std::optional<std::string>& heads_path) {
  const auto source = read_lines(source_path);
  const auto target = read_lines(target_path);
  const auto alignment = read_lines(alignment_path);
  std::vector<std::string> heads;
  if (heads_path) heads = read_lines(*heads_path);

  auto check = [&](const std::vector<std::string>& other, const std::string& path) {
    if (other.size() != source.size()) {
      throw Error(fmt::format("line count mismatch between '{}' ({} lines) and '{}' ({} lines); first divergent line {}",
                              source_path, source.size(), path, other.size(),
                              std::min(source.size(), other.size()) + 1));
    }
  };
  check(target, target_path);
  check(alignment, alignment_path);
  if (heads_path) check(heads, *heads_path);

  std::vector<AlignedSentencePair> pairs;
  pairs.reserve(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) {
    AlignedSentencePair pair;
    pair.source_tokens = split_tokens(source[i]);
    pair.target_tokens = split_tokens(target[i]);
    try {
      pair.alignment = parse_alignment_line(alignment[i]);
      if (!pair.alignment.within(pair.source_tokens.size(), pair.target_tokens.size())) {
        throw ParseError("alignment link out of range");
      }
      if (heads_path) pair.heads = parse_heads_line(heads[i], pair.source_tokens.size());
    } catch (const ParseError& e) {
      throw ParseError(fmt::format("line {}: {}", i + 1, e.what()));
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

}  // namespace cjlm
