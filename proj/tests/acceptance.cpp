// One PASS/FAIL line per acceptance criterion. Exits 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <fmt/core.h>

#include "cjlm/model_io.hpp"
#include "cjlm/random.hpp"
#include "cjlm/training.hpp"
#include "cli.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

using namespace cjlm;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kPredictorSumTolerance = 1e-6;
constexpr double kOmegaSumTolerance = 1e-9;
constexpr double kGuidedAccuracy = 0.95;
constexpr double kAttentionAccuracy = 0.90;
constexpr double kUnguidedAccuracy = 0.40;
constexpr double kGuideSeconds = 600.0;
constexpr std::size_t kEpochBudget = 50;
constexpr double kToyPerplexityFraction = 0.2;
constexpr double kPoolingShare = 0.9;

// Training setup shared by the synthetic tasks. The library default init of
// 0.08 leaves the sigmoid layers nearly flat at this scale.
constexpr std::size_t kTaskEpochs = 30;
constexpr double kTaskLearningRate = 0.5;
constexpr double kTaskInit = 0.6;
constexpr std::size_t kTaskMinibatch = 16;
constexpr double kPoolingInit = 1.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

ModelConfig task_config(Arch arch, Fusion fusion, std::size_t maxlen, std::size_t vocab, std::size_t pool_k = 2) {
  ModelConfig c;
  auto& e = c.encoder;
  e.arch = arch;
  e.fusion = fusion;
  e.pool_k = pool_k;
  e.src_vocab = vocab;
  e.emb_dim = e.tgt_emb_dim = e.attn_dim = 32;
  e.filters1 = e.filters3 = 64;
  e.repr_dim = 64;
  e.maxlen = maxlen;
  c.joint.tgt_vocab = vocab;
  c.joint.hidden = {128};
  return c;
}

TrainConfig task_training(std::size_t epochs = kTaskEpochs) {
  TrainConfig t;
  t.learning_rate = kTaskLearningRate;
  t.minibatch = kTaskMinibatch;
  t.epochs = epochs;
  t.init_scale = kTaskInit;
  t.seed = 1;
  return t;
}

double task_accuracy(const synthetic::Task& task, const ModelConfig& cfg, std::size_t epochs = kTaskEpochs,
                     double init = kTaskInit) {
  auto training = task_training(epochs);
  training.init_scale = init;
  auto result = train(task.train, training, cfg);
  return accuracy(task.test, result.model);
}

Outcome gradient_exactness() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_at;
  bool ok = true;
  for (Arch arch : {Arch::generic, Arch::tag, Arch::tag_dep, Arch::attention}) {
    for (Fusion fusion : {Fusion::gating, Fusion::pooling}) {
      auto report = gradient_check(small_check_config(arch, fusion), 7);
      for (const auto& g : report.groups) {
        if (g.checked == 0) ok = false;
        if (g.max_relative_error >= worst) {
          worst = g.max_relative_error;
          worst_at = fmt::format("{}/{}/{}", to_string(arch), to_string(fusion), g.name);
        }
      }
      ok = ok && report.passed(kGradTolerance);
    }
  }
  const double secs = seconds_since(start);
  return {ok && secs < kGradSeconds,
          fmt::format("max_rel_error={:.3g} at {} (< {:g}), {:.1f}s (< {:g}s)", worst, worst_at, kGradTolerance, secs,
                      kGradSeconds)};
}

Outcome normalization() {
  Rng rng(2024);
  double worst_p = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto arch = static_cast<Arch>(trial % 4);
    auto cfg = small_check_config(arch, Fusion::gating);
    cfg.joint.tgt_vocab = 5 + rng.index(200);
    cfg.joint.hidden = {1 + rng.index(32)};
    Model m = Model::zeros(cfg);
    initialize(m, derive_seed(2024, static_cast<std::uint64_t>(trial)), rng.uniform(0.01, 4.0));
    Vector phi(static_cast<Eigen::Index>(cfg.encoder.repr_dim));
    for (Eigen::Index i = 0; i < phi.size(); ++i) phi(i) = rng.uniform();
    std::vector<WordId> history(cfg.encoder.history);
    for (auto& w : history) w = static_cast<WordId>(rng.index(cfg.joint.tgt_vocab));
    const Vector lp = predict_log_probs(phi, history, m.joint);
    worst_p = std::max(worst_p, std::abs(lp.array().exp().sum() - 1.0));
  }
  double worst_w = 0.0;
  bool open_interval = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto locations = static_cast<Eigen::Index>(2 + rng.index(39));
    const auto filters = static_cast<Eigen::Index>(1 + rng.index(100));
    const double scale = rng.uniform(0.1, 10.0);
    Matrix layer3(locations, filters);
    for (Eigen::Index i = 0; i < layer3.size(); ++i) layer3.data()[i] = rng.uniform();
    Vector w(filters);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = rng.uniform(-scale, scale);
    Vector omega;
    global_gate(layer3, w, &omega);
    worst_w = std::max(worst_w, std::abs(omega.sum() - 1.0));
    open_interval = open_interval && (omega.array() > 0.0).all() && (omega.array() < 1.0).all();
  }
  return {worst_p <= kPredictorSumTolerance && worst_w <= kOmegaSumTolerance && open_interval,
          fmt::format("max |sum p - 1|={:.3g} (<= {:g}), max |sum omega - 1|={:.3g} (<= {:g}), omega in (0,1): {}",
                      worst_p, kPredictorSumTolerance, worst_w, kOmegaSumTolerance, open_interval ? "yes" : "no")};
}

Outcome shape_law() {
  bool ok = true;
  std::string shapes;
  for (Arch arch : {Arch::generic, Arch::tag, Arch::tag_dep, Arch::attention}) {
    ModelConfig cfg;
    cfg.encoder.arch = arch;
    cfg.encoder.src_vocab = 50;
    cfg.joint.tgt_vocab = 50;
    Model m = Model::zeros(cfg);
    initialize(m, 3);
    auto sample = random_samples(cfg, 1, 4).front();
    auto t = encode(encoder_input(sample, cfg.encoder), cfg.encoder, m.encoder, m.joint.tgt_embeddings);
    ok = ok && t.layer1.rows() == 38 && t.layer2.rows() == 19 && t.layer3.rows() == 17 && t.phi.size() == 100;
    shapes = fmt::format("{}/{}/{} phi={}", t.layer1.rows(), t.layer2.rows(), t.layer3.rows(), t.phi.size());
  }
  return {ok, "locations " + shapes + " for every arch"};
}

Outcome tag_guidance() {
  const auto start = std::chrono::steady_clock::now();
  auto task = synthetic::tag_task(11, 5000, 1000, 12);
  const auto vocab = synthetic::task_vocab();
  const double tag = task_accuracy(task, task_config(Arch::tag, Fusion::gating, 12, vocab));
  const double generic = task_accuracy(task, task_config(Arch::generic, Fusion::gating, 12, vocab));
  const double secs = seconds_since(start);
  return {tag >= kGuidedAccuracy && generic <= kUnguidedAccuracy && secs < kGuideSeconds,
          fmt::format("tag={:.3f} (>= {:g}), generic={:.3f} (<= {:g}), {} epochs, {:.0f}s (< {:g}s)", tag,
                      kGuidedAccuracy, generic, kUnguidedAccuracy, kTaskEpochs, secs, kGuideSeconds)};
}

Outcome attention_guidance() {
  const auto start = std::chrono::steady_clock::now();
  // 12 tokens left-padded to 16 leave the gate 5 top-layer locations; with
  // maxlen 12 there are only 3 and inCNN stalls near 80%.
  auto task = synthetic::keyed_task(12, 5000, 1000, 16);
  const auto vocab = synthetic::task_vocab();
  const double attention = task_accuracy(task, task_config(Arch::attention, Fusion::gating, 16, vocab), kEpochBudget);
  const double generic = task_accuracy(task, task_config(Arch::generic, Fusion::gating, 16, vocab), kEpochBudget);
  const double secs = seconds_since(start);
  return {attention >= kAttentionAccuracy && generic <= kUnguidedAccuracy && secs < kGuideSeconds,
          fmt::format("attention={:.3f} (>= {:g}), generic={:.3f} (<= {:g}), {} epochs, {:.0f}s (< {:g}s)",
                      attention, kAttentionAccuracy, generic, kUnguidedAccuracy, kEpochBudget, secs, kGuideSeconds)};
}

Outcome toy_learning() {
  auto train_pairs = synthetic::toy_translation(1, 500);
  auto held_pairs = synthetic::toy_translation(2, 100);
  std::vector<std::vector<std::string>> src, tgt;
  for (const auto& p : train_pairs) {
    src.push_back(p.source_tokens);
    tgt.push_back(p.target_tokens);
  }
  const auto sv = build_vocabulary(src, 20000);
  const auto tv = build_vocabulary(tgt, 20000);
  ExtractOptions options;
  options.maxlen = 10;
  options.emit_eos = true;
  const auto train_set = extract_corpus(train_pairs, sv, tv, options);
  const auto held_set = extract_corpus(held_pairs, sv, tv, options);
  const double limit = kToyPerplexityFraction * static_cast<double>(tv.size());
  bool ok = true;
  std::string detail;
  for (Arch arch : {Arch::generic, Arch::tag, Arch::tag_dep, Arch::attention}) {
    auto cfg = task_config(arch, Fusion::gating, 10, sv.size());
    cfg.joint.tgt_vocab = tv.size();
    auto result = train(train_set.samples, task_training(20), cfg);
    const double ppl = perplexity(held_set.samples, result.model);
    ok = ok && ppl < limit;
    detail += fmt::format("{}={:.3f} ", to_string(arch), ppl);
  }
  return {ok, detail + fmt::format("(< {:.1f} = {:g} x V_tgt {})", limit, kToyPerplexityFraction, tv.size())};
}

// Compares one alignment, given as (source, target) pairs, with the oracle.
bool affiliation_agrees(const std::vector<std::pair<int, int>>& links, int target_len) {
  AlignmentLinkSet set;
  for (auto [s, t] : links) set.insert({s, t});
  for (int t = 0; t < target_len; ++t) {
    auto expect = oracle::affiliation(t, links, target_len);
    try {
      auto got = compute_affiliation(t, set, static_cast<std::size_t>(target_len));
      if (!expect || got != *expect) return false;
    } catch (const UnalignableError&) {
      if (expect) return false;
    }
  }
  return true;
}

Outcome affiliation_equivalence() {
  std::size_t cases = 0, mismatches = 0;
  // Every link set whenever the grid has at most 16 cells.
  for (int sl = 1; sl <= 6; ++sl) {
    for (int tl = 1; tl <= 6; ++tl) {
      const int cells = sl * tl;
      if (cells > 16) continue;
      for (std::uint32_t mask = 0; mask < (1u << cells); ++mask) {
        std::vector<std::pair<int, int>> links;
        for (int c = 0; c < cells; ++c) {
          if (mask & (1u << c)) links.emplace_back(c % sl, c / sl);
        }
        ++cases;
        mismatches += !affiliation_agrees(links, tl);
      }
    }
  }
  // Larger grids: the result only depends on which target words are aligned
  // and on the chosen word's source set, so every aligned-column pattern is
  // enumerated with every source set for one column and distinct fixed sets
  // for the others.
  for (int sl = 1; sl <= 6; ++sl) {
    for (int tl = 1; tl <= 6; ++tl) {
      if (sl * tl <= 16) continue;
      for (std::uint32_t aligned = 0; aligned < (1u << tl); ++aligned) {
        for (int probe = 0; probe < tl; ++probe) {
          if (!(aligned & (1u << probe))) continue;
          for (std::uint32_t sources = 1; sources < (1u << sl); ++sources) {
            std::vector<std::pair<int, int>> links;
            for (int t = 0; t < tl; ++t) {
              if (!(aligned & (1u << t))) continue;
              if (t == probe) {
                for (int s = 0; s < sl; ++s) {
                  if (sources & (1u << s)) links.emplace_back(s, t);
                }
              } else {
                links.emplace_back(t % sl, t);
              }
            }
            ++cases;
            mismatches += !affiliation_agrees(links, tl);
          }
        }
      }
    }
  }
  Rng rng(77);
  for (int trial = 0; trial < 10000; ++trial) {
    const int sl = 7 + static_cast<int>(rng.index(34));
    const int tl = 7 + static_cast<int>(rng.index(34));
    const double density = rng.uniform(0.0, 0.2);
    std::vector<std::pair<int, int>> links;
    for (int s = 0; s < sl; ++s) {
      for (int t = 0; t < tl; ++t) {
        if (rng.uniform() < density) links.emplace_back(s, t);
      }
    }
    ++cases;
    mismatches += !affiliation_agrees(links, tl);
  }
  return {mismatches == 0, fmt::format("{} alignments, {} mismatches", cases, mismatches)};
}

Outcome pooling_parity() {
  // maxlen 22 gives 8 Layer-3 locations, room for every k. Averaging k
  // locations dilutes the tagged one, and k = 4 or 8 sits on a loss plateau
  // for 30-50 epochs before it learns. A wider init (for every mode alike)
  // shortens the plateau; the full epoch budget is used.
  auto task = synthetic::tag_task(13, 5000, 1000, 22);
  const auto vocab = synthetic::task_vocab();
  const double gating = task_accuracy(task, task_config(Arch::tag, Fusion::gating, 22, vocab), kEpochBudget,
                                     kPoolingInit);
  bool ok = true;
  std::string detail = fmt::format("{} epochs, gating={:.3f}", kEpochBudget, gating);
  for (std::size_t k : {2, 4, 8}) {
    const double pooling = task_accuracy(task, task_config(Arch::tag, Fusion::pooling, 22, vocab, k),
                                        kEpochBudget, kPoolingInit);
    ok = ok && pooling >= kPoolingShare * gating;
    detail += fmt::format(" k{}={:.3f}", k, pooling);
  }
  double worst = 0.0;
  for (Arch arch : {Arch::generic, Arch::tag, Arch::tag_dep, Arch::attention}) {
    for (std::size_t k : {1, 2}) {
      auto report = gradient_check(small_check_config(arch, Fusion::pooling, k), 8);
      worst = std::max(worst, report.max_relative_error());
      ok = ok && report.passed(kGradTolerance);
    }
  }
  return {ok, detail + fmt::format(" (>= {:g} x gating), pooling grad max_rel_error={:.3g}", kPoolingShare, worst)};
}

ModelArtifact random_artifact(Arch arch, std::uint64_t seed) {
  ModelArtifact a;
  std::vector<std::vector<std::string>> src{{"a", "b", "c", "d", "e", "f"}}, tgt{{"x", "y", "z", "w"}};
  a.source_vocab = build_vocabulary(src, 100);
  a.target_vocab = build_vocabulary(tgt, 100);
  auto cfg = small_check_config(arch, Fusion::gating);
  cfg.encoder.src_vocab = a.source_vocab.size();
  cfg.joint.tgt_vocab = a.target_vocab.size();
  a.model = Model::zeros(cfg);
  initialize(a.model, seed, 1.0);
  return a;
}

Outcome serialization() {
  const auto path = (fs::temp_directory_path() / "cjlm_acceptance_model.cjlm").string();
  std::size_t compared = 0, different = 0;
  for (Arch arch : {Arch::generic, Arch::tag, Arch::tag_dep, Arch::attention}) {
    auto a = random_artifact(arch, 21);
    save_model(a, path);
    auto b = load_model(path);
    for (const auto& s : random_samples(a.model.config, 250, 22)) {
      ++compared;
      different += sample_log_prob(s, a.model) != sample_log_prob(s, b.model);
    }
  }
  auto bytes = serialize_model(random_artifact(Arch::tag, 23));
  std::size_t rejected = 0, tried = 0;
  Rng rng(24);
  for (int trial = 0; trial < 200; ++trial) {
    auto bad = bytes;
    bad[rng.index(bad.size())] ^= static_cast<std::uint8_t>(1u << rng.index(8));
    ++tried;
    try {
      deserialize_model(bad);
    } catch (const ModelFormatError&) {
      ++rejected;
    }
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() - 1);
  ++tried;
  try {
    deserialize_model(truncated);
  } catch (const ModelFormatError&) {
    ++rejected;
  }
  fs::remove(path);
  return {compared == 1000 && different == 0 && rejected == tried,
          fmt::format("{} log-probs, {} differ; {}/{} damaged files rejected", compared, different, rejected, tried)};
}

Outcome determinism() {
  const auto dir = fs::temp_directory_path() / "cjlm_acceptance_determinism";
  fs::create_directories(dir);
  std::ofstream src(dir / "c.src"), tgt(dir / "c.tgt"), align(dir / "c.align");
  for (const auto& p : synthetic::toy_translation(5, 200)) {
    for (std::size_t i = 0; i < p.source_tokens.size(); ++i) src << (i ? " " : "") << p.source_tokens[i];
    for (std::size_t i = 0; i < p.target_tokens.size(); ++i) tgt << (i ? " " : "") << p.target_tokens[i];
    for (std::size_t i = 0; i < p.alignment.links.size(); ++i) {
      align << (i ? " " : "") << p.alignment.links[i].source << '-' << p.alignment.links[i].target;
    }
    src << '\n';
    tgt << '\n';
    align << '\n';
  }
  src.close();
  tgt.close();
  align.close();
  auto run = [&](const std::string& out) {
    std::vector<std::string> args{"train", "--src", (dir / "c.src").string(), "--tgt", (dir / "c.tgt").string(),
                                  "--align", (dir / "c.align").string(), "--arch", "attention", "--emb-dim", "16",
                                  "--filters", "16", "--repr-dim", "16", "--hidden", "32", "--maxlen", "10",
                                  "--epochs", "3", "--minibatch", "32", "--threads", "2", "--seed", "9", "--out",
                                  (dir / out).string()};
    std::ostringstream o, e;
    return run_cli(args, o, e);
  };
  const int a = run("a.cjlm");
  const int b = run("b.cjlm");
  auto slurp = [&](const char* name) {
    std::ifstream in(dir / name, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  const auto fa = slurp("a.cjlm");
  const auto fb = slurp("b.cjlm");
  fs::remove_all(dir);
  return {a == 0 && b == 0 && !fa.empty() && fa == fb,
          fmt::format("exit codes {} {}, {} and {} bytes, identical: {}", a, b, fa.size(), fb.size(),
                      fa == fb ? "yes" : "no")};
}

}  // namespace

// Optional arguments pick criteria by number; all run by default.
int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient exactness", gradient_exactness},
      {"normalization", normalization},
      {"shape law", shape_law},
      {"tag guide signal", tag_guidance},
      {"attention guide signal", attention_guidance},
      {"toy translation learning", toy_learning},
      {"affiliation oracle", affiliation_equivalence},
      {"pooling parity", pooling_parity},
      {"serialization fidelity", serialization},
      {"training determinism", determinism},
  };
  int failures = 0;
  std::vector<bool> selected(criteria.size(), argc == 1);
  for (int a = 1; a < argc; ++a) {
    const auto n = static_cast<std::size_t>(std::atoi(argv[a]));
    if (n >= 1 && n <= criteria.size()) selected[n - 1] = true;
  }
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected[i]) continue;
    Outcome outcome;
    try {
      outcome = criteria[i].second();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    failures += !outcome.pass;
    std::cout << fmt::format("{} {:>2} {}: {}", outcome.pass ? "PASS" : "FAIL", i + 1, criteria[i].first,
                             outcome.detail)
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
