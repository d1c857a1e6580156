#include "cjlm/nbest.hpp"

#include <algorithm>
#include <charconv>
#include <istream>
#include <ostream>
#include <thread>

#include <fmt/format.h>

namespace cjlm {

namespace {

constexpr std::string_view kSeparator = "|||";

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool needs_alignment(Arch arch) { return arch == Arch::tag || arch == Arch::tag_dep; }

}  // namespace

NBestEntry parse_nbest_line(std::string_view line) {
  NBestEntry entry;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(kSeparator, start);
    if (pos == std::string_view::npos) {
      entry.fields.emplace_back(line.substr(start));
      break;
    }
    entry.fields.emplace_back(line.substr(start, pos - start));
    start = pos + kSeparator.size();
  }
  if (entry.fields.size() != 4 && entry.fields.size() != 5) {
    throw ParseError(fmt::format("n-best line has {} fields, expected 4 or 5", entry.fields.size()));
  }

  const auto id = trim(entry.fields[0]);
  const auto [ptr, ec] = std::from_chars(id.data(), id.data() + id.size(), entry.sentence_id);
  if (id.empty() || ec != std::errc() || ptr != id.data() + id.size()) {
    throw ParseError(fmt::format("bad n-best sentence id '{}'", id));
  }
  entry.hypothesis = split_tokens(entry.fields[1]);
  if (entry.fields.size() == 5 && !trim(entry.fields[2]).empty()) {
    AlignmentLinkSet links;
    for (const auto& l : parse_alignment_line(entry.fields[2]).links) links.insert({l.target, l.source});
    entry.alignment = std::move(links);
  }
  entry.feature_field = entry.fields.size() - 2;
  return entry;
}

std::string annotate_nbest_line(const NBestEntry& entry, std::string_view feature_name, double value) {
  std::string out;
  for (std::size_t i = 0; i < entry.fields.size(); ++i) {
    if (i > 0) out += kSeparator;
    if (i != entry.feature_field) {
      out += entry.fields[i];
      continue;
    }
    const std::string& f = entry.fields[i];
    const auto end = f.find_last_not_of(" \t\r");
    const std::size_t keep = end == std::string::npos ? 0 : end + 1;
    out.append(f, 0, keep);
    out += fmt::format(" {} {:.6f}", feature_name, value);
    out.append(f, keep, std::string::npos);
  }
  return out;
}

std::vector<TrainingSample> hypothesis_samples(const ModelArtifact& artifact, const SourceSentence& source,
                                               std::span<const std::string> hypothesis,
                                               const std::optional<AlignmentLinkSet>& alignment,
                                               std::size_t sentence_id) {
  const auto& cfg = artifact.model.config;
  const Arch arch = cfg.encoder.arch;
  const std::size_t len = hypothesis.size();

  if (needs_alignment(arch) && !alignment && len > 0) {
    throw PreconditionError(
        fmt::format("sentence {}: arch {} requires a hypothesis alignment", sentence_id, to_string(arch)));
  }
  if (needs_alignment(arch) && len == 0) {
    throw PreconditionError(
        fmt::format("sentence {}: arch {} cannot score an empty hypothesis", sentence_id, to_string(arch)));
  }
  if (arch == Arch::tag_dep && !source.heads) {
    throw PreconditionError(fmt::format("sentence {}: arch tag_dep requires source dependency heads", sentence_id));
  }
  if (source.tokens.size() > cfg.encoder.maxlen) {
    throw Error(fmt::format("sentence {}: source length {} exceeds maxlen {}", sentence_id, source.tokens.size(),
                            cfg.encoder.maxlen));
  }
  if (alignment && !alignment->within(source.tokens.size(), len)) {
    throw ParseError(fmt::format("sentence {}: alignment link out of range", sentence_id));
  }

  const auto padded = pad_source(map_tokens(source.tokens, artifact.source_vocab), cfg.encoder.maxlen);
  const int offset = static_cast<int>(cfg.encoder.maxlen - source.tokens.size());
  const auto ids = map_tokens(hypothesis, artifact.target_vocab);
  const std::size_t k = cfg.encoder.history;
  const std::size_t terms = len + (cfg.emit_eos ? 1 : 0);

  std::vector<TrainingSample> samples;
  samples.reserve(terms);
  for (std::size_t n = 0; n < terms; ++n) {
    TrainingSample s;
    s.source_ids = padded;
    s.target = n < len ? ids[n] : Vocabulary::kEos;
    s.history.assign(k, Vocabulary::kBos);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t back = k - j;
      if (n >= back) s.history[j] = ids[n - back];
    }
    if (needs_alignment(arch)) {
      std::vector<int> affiliated;
      try {
        affiliated = compute_affiliation(static_cast<int>(std::min(n, len - 1)), *alignment, len);
      } catch (const UnalignableError&) {
        throw Error(fmt::format("sentence {}: hypothesis has no aligned word", sentence_id));
      }
      for (int a : affiliated) {
        s.affiliated.push_back(a + offset);
        if (arch == Arch::tag_dep) {
          const int head = (*source.heads)[static_cast<std::size_t>(a)];
          if (head >= 0) s.head_positions.push_back(head + offset);
        }
      }
      std::sort(s.head_positions.begin(), s.head_positions.end());
      s.head_positions.erase(std::unique(s.head_positions.begin(), s.head_positions.end()), s.head_positions.end());
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

double score_hypothesis(const ModelArtifact& artifact, const SourceSentence& source,
                        std::span<const std::string> hypothesis, const std::optional<AlignmentLinkSet>& alignment,
                        std::size_t sentence_id) {
  double total = 0.0;
  for (const auto& s : hypothesis_samples(artifact, source, hypothesis, alignment, sentence_id)) {
    total += sample_log_prob(s, artifact.model);
  }
  return total;
}

std::size_t score_nbest(const ModelArtifact& artifact, std::span<const SourceSentence> sources, std::istream& nbest,
                        std::ostream& out, const ScoreOptions& options) {
  std::vector<std::string> lines;
  for (std::string line; std::getline(nbest, line);) lines.push_back(std::move(line));

  std::vector<std::string> annotated(lines.size());
  auto score_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      NBestEntry entry;
      try {
        entry = parse_nbest_line(lines[i]);
      } catch (const ParseError& e) {
        throw ParseError(fmt::format("n-best line {}: {}", i + 1, e.what()));
      }
      if (entry.sentence_id >= sources.size()) {
        throw PreconditionError(fmt::format("n-best line {}: sentence id {} has no source sentence", i + 1,
                                            entry.sentence_id));
      }
      const double value = score_hypothesis(artifact, sources[entry.sentence_id], entry.hypothesis, entry.alignment,
                                            entry.sentence_id);
      annotated[i] = annotate_nbest_line(entry, options.feature_name, value);
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(options.threads, 1, std::max<std::size_t>(1, lines.size()));
  if (workers == 1) {
    score_range(0, lines.size());
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          score_range(lines.size() * w / workers, lines.size() * (w + 1) / workers);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  for (const auto& line : annotated) out << line << '\n';
  return annotated.size();
}

std::vector<SourceSentence> read_sources(const std::string& source_path, const std::optional<std::string>& heads_path) {
  const auto lines = read_lines(source_path);
  std::vector<std::string> heads;
  if (heads_path) {
    heads = read_lines(*heads_path);
    if (heads.size() != lines.size()) {
      throw Error(fmt::format("line count mismatch between '{}' ({} lines) and '{}' ({} lines); first divergent line {}",
                              source_path, lines.size(), *heads_path, heads.size(),
                              std::min(lines.size(), heads.size()) + 1));
    }
  }
  std::vector<SourceSentence> sources;
  sources.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    SourceSentence s;
    s.tokens = split_tokens(lines[i]);
    if (heads_path) {
      try {
        s.heads = parse_heads_line(heads[i], s.tokens.size());
      } catch (const ParseError& e) {
        throw ParseError(fmt::format("heads line {}: {}", i + 1, e.what()));
      }
    }
    sources.push_back(std::move(s));
  }
  return sources;
}

}  // namespace cjlm
