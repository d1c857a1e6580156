#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "cjlm/corpus.hpp"
#include "cjlm/inspect.hpp"
#include "cjlm/model_io.hpp"
#include "cjlm/nbest.hpp"
#include "cjlm/training.hpp"

namespace cjlm {

namespace {

// Usage problems detected after CLI11 has parsed the flags.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(what) {}
};

struct CorpusFlags {
  std::string src, tgt, align;
  std::optional<std::string> heads;

  void add(CLI::App& cmd, const std::string& prefix, bool required) {
    auto* s = cmd.add_option("--" + prefix + "src", src, "source sentences, one per line");
    auto* t = cmd.add_option("--" + prefix + "tgt", tgt, "target sentences, one per line");
    auto* a = cmd.add_option("--" + prefix + "align", align, "0-based i-j alignments, one line per pair");
    cmd.add_option("--" + prefix + "heads", heads, "dependency heads per source token, -1 for the root");
    if (required) {
      s->required();
      t->required();
      a->required();
    }
  }
  bool given() const { return !src.empty() || !tgt.empty() || !align.empty(); }
  std::vector<AlignedSentencePair> read(const std::string& what) const {
    if (src.empty() || tgt.empty() || align.empty()) {
      throw UsageError(what + " needs source, target and alignment files");
    }
    return read_parallel_corpus(src, tgt, align, heads);
  }
};

struct TrainFlags {
  CorpusFlags corpus;
  CorpusFlags dev;
  std::string arch = "generic";
  std::string fusion = "gating";
  std::size_t pool_k = 8;
  std::size_t emb_dim = 100;
  std::optional<std::size_t> tgt_emb_dim;
  std::optional<std::size_t> attn_dim;
  std::size_t attn_depth = 1;
  std::size_t filters = 100;
  std::optional<std::size_t> filters1, filters3;
  std::size_t repr_dim = 100;
  std::vector<std::size_t> hidden = {200};
  std::size_t maxlen = 40;
  std::size_t ngram = 4;
  std::size_t vocab_limit = 20000;
  bool emit_eos = true;
  TrainConfig train;
  std::optional<double> clip;
  std::optional<std::string> metrics;
  std::string out;
};

std::ofstream open_output(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error(fmt::format("cannot write '{}'", path));
  return f;
}

std::string metrics_line(const EpochMetrics& m) {
  std::string ppl = m.heldout_ppl ? fmt::format("{:.6f}", *m.heldout_ppl) : "na";
  return fmt::format("epoch={} train_nll={:.6f} heldout_ppl={} lr={:.6g} seconds={:.3f}", m.epoch, m.train_nll, ppl,
                     m.learning_rate, m.seconds);
}

ExtractOptions extract_options(const ModelConfig& cfg) {
  return ExtractOptions{cfg.encoder.history, cfg.encoder.maxlen, cfg.emit_eos};
}

int run_train(const TrainFlags& f, std::ostream& out) {
  if (f.ngram < 2) throw UsageError("--ngram must be at least 2");
  ModelConfig cfg;
  auto& e = cfg.encoder;
  e.arch = parse_arch(f.arch);
  e.fusion = parse_fusion(f.fusion);
  e.pool_k = f.pool_k;
  e.emb_dim = f.emb_dim;
  e.tgt_emb_dim = f.tgt_emb_dim.value_or(f.emb_dim);
  e.attn_dim = f.attn_dim.value_or(f.emb_dim);
  e.attn_depth = f.attn_depth;
  e.filters1 = f.filters1.value_or(f.filters);
  e.filters3 = f.filters3.value_or(f.filters);
  e.repr_dim = f.repr_dim;
  e.maxlen = f.maxlen;
  e.history = f.ngram - 1;
  cfg.joint.hidden = f.hidden;
  cfg.emit_eos = f.emit_eos;

  TrainConfig tc = f.train;
  tc.grad_clip = f.clip;
  tc.validate();
  if (e.arch == Arch::tag_dep && !f.corpus.heads) throw PreconditionError("tag_dep training needs --heads");

  const auto pairs = f.corpus.read("training");
  std::vector<std::vector<std::string>> src_side, tgt_side;
  for (const auto& p : pairs) {
    src_side.push_back(p.source_tokens);
    tgt_side.push_back(p.target_tokens);
  }
  ModelArtifact artifact;
  artifact.source_vocab = build_vocabulary(src_side, f.vocab_limit);
  artifact.target_vocab = build_vocabulary(tgt_side, f.vocab_limit);
  e.src_vocab = artifact.source_vocab.size();
  cfg.joint.tgt_vocab = artifact.target_vocab.size();
  cfg.validate();

  const SampleSet set = extract_corpus(pairs, artifact.source_vocab, artifact.target_vocab, extract_options(cfg));
  out << fmt::format("corpus lines={} samples={} skipped_unalignable={} skipped_too_long={}\n", pairs.size(),
                     set.samples.size(), set.skipped_unalignable, set.skipped_too_long);

  std::vector<TrainingSample> held_out;
  if (f.dev.given()) {
    if (e.arch == Arch::tag_dep && !f.dev.heads) throw PreconditionError("tag_dep held-out data needs --dev-heads");
    held_out = extract_corpus(f.dev.read("held-out data"), artifact.source_vocab, artifact.target_vocab,
                              extract_options(cfg))
                   .samples;
  }

  std::optional<std::ofstream> metrics_file;
  if (f.metrics) metrics_file = open_output(*f.metrics);
  auto report = [&](const EpochMetrics& m, const Model&) {
    const std::string line = metrics_line(m);
    out << line << '\n' << std::flush;
    if (metrics_file) *metrics_file << line << '\n' << std::flush;
  };

  TrainResult result = train(set.samples, tc, cfg, held_out, report);
  artifact.model = std::move(result.model);
  artifact.train = tc;
  artifact.provenance = Provenance{tc.seed, pairs.size(), set.samples.size(), set.skipped_unalignable,
                                   set.skipped_too_long, std::move(result.metrics)};
  save_model(artifact, f.out);
  out << fmt::format("saved {}\n", f.out);
  return 0;
}

int run_eval(const std::string& model_path, const CorpusFlags& data, std::ostream& out) {
  const ModelArtifact artifact = load_model(model_path);
  const auto& cfg = artifact.model.config;
  if (cfg.encoder.arch == Arch::tag_dep && !data.heads) throw PreconditionError("tag_dep model needs --heads");
  const auto pairs = data.read("evaluation");
  const SampleSet set = extract_corpus(pairs, artifact.source_vocab, artifact.target_vocab, extract_options(cfg));
  if (set.samples.empty()) throw Error("no scorable samples");
  out << fmt::format("perplexity={:.6f} samples={} skipped_unalignable={} skipped_too_long={}\n",
                     perplexity(set.samples, artifact.model), set.samples.size(), set.skipped_unalignable,
                     set.skipped_too_long);
  return 0;
}

struct ScoreFlags {
  std::string model, src, nbest = "-", out = "-";
  std::optional<std::string> heads;
  ScoreOptions options;
};

int run_score(const ScoreFlags& f, std::ostream& out) {
  const ModelArtifact artifact = load_model(f.model);
  const auto sources = read_sources(f.src, f.heads);
  std::ifstream nbest_file;
  if (f.nbest != "-") {
    nbest_file.open(f.nbest);
    if (!nbest_file) throw Error(fmt::format("cannot open '{}'", f.nbest));
  }
  std::istream& in = f.nbest == "-" ? std::cin : nbest_file;
  if (f.out == "-") {
    score_nbest(artifact, sources, in, out, f.options);
  } else {
    auto file = open_output(f.out);
    score_nbest(artifact, sources, in, file, f.options);
  }
  return 0;
}

struct GradCheckFlags {
  std::uint64_t seed = 7;
  double epsilon = 1e-4;
  double tolerance = 1e-4;
  std::size_t coordinates = 0;
  std::size_t pool_k = 2;
  std::vector<std::string> archs = {"generic", "tag", "tag_dep", "attention"};
  std::vector<std::string> fusions = {"gating", "pooling"};
};

int run_grad_check(const GradCheckFlags& f, std::ostream& out, std::ostream& err) {
  GradCheckOptions options;
  options.epsilon = f.epsilon;
  options.coordinates = f.coordinates;
  if (!(f.epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  double worst = 0.0;
  out << "arch,fusion,group,max_rel_error,checked,one_sided,skipped\n";
  for (const auto& a : f.archs) {
    for (const auto& fu : f.fusions) {
      const auto report = gradient_check(small_check_config(parse_arch(a), parse_fusion(fu), f.pool_k), f.seed, options);
      for (const auto& g : report.groups) {
        out << fmt::format("{},{},{},{:.3e},{},{},{}\n", a, fu, g.name, g.max_relative_error, g.checked, g.one_sided,
                           g.skipped);
      }
      worst = std::max(worst, report.max_relative_error());
    }
  }
  const bool ok = worst < f.tolerance;
  out << fmt::format("max_rel_error={:.3e} tolerance={:.1e} result={}\n", worst, f.tolerance, ok ? "pass" : "fail");
  if (!ok) {
    err << fmt::format("error: check: max relative error {:.3e} exceeds {:.1e}\n", worst, f.tolerance);
    return 1;
  }
  return 0;
}

struct InspectFlags {
  std::string model;
  CorpusFlags data;
  std::size_t bins = 10;
  std::size_t max_samples = 1000;
};

int run_inspect(const InspectFlags& f, std::ostream& out) {
  const ModelArtifact artifact = load_model(f.model);
  std::vector<TrainingSample> samples;
  if (f.data.given()) {
    const auto& cfg = artifact.model.config;
    samples = extract_corpus(f.data.read("inspection"), artifact.source_vocab, artifact.target_vocab,
                             extract_options(cfg))
                  .samples;
    if (samples.size() > f.max_samples) samples.resize(f.max_samples);
  }
  inspect_model(artifact, out, samples, f.bins);
  return 0;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Convolutional joint language model toolkit", "cjlm"};
  app.require_subcommand(1);

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "train a joint model from aligned parallel text");
  tf.corpus.add(*train_cmd, "", true);
  tf.dev.add(*train_cmd, "dev-", false);
  train_cmd->add_option("--arch", tf.arch, "generic, tag, tag_dep or attention")->capture_default_str();
  train_cmd->add_option("--fusion", tf.fusion, "gating or pooling")->capture_default_str();
  train_cmd->add_option("--pool-k", tf.pool_k, "k of the global k-max pooling")->capture_default_str();
  train_cmd->add_option("--emb-dim", tf.emb_dim, "source word embedding size")->capture_default_str();
  train_cmd->add_option("--tgt-emb-dim", tf.tgt_emb_dim, "target word embedding size (default: --emb-dim)");
  train_cmd->add_option("--attn-dim", tf.attn_dim, "attention signal size (default: --emb-dim)");
  train_cmd->add_option("--attn-depth", tf.attn_depth, "layers of the attention network")->capture_default_str();
  train_cmd->add_option("--filters", tf.filters, "filters in both convolution layers")->capture_default_str();
  train_cmd->add_option("--filters1", tf.filters1, "filters in the first convolution layer");
  train_cmd->add_option("--filters3", tf.filters3, "filters in the second convolution layer");
  train_cmd->add_option("--repr-dim", tf.repr_dim, "size of the source representation")->capture_default_str();
  train_cmd->add_option("--hidden", tf.hidden, "hidden layer sizes of the predictor")->capture_default_str();
  train_cmd->add_option("--maxlen", tf.maxlen, "maximum source length")->capture_default_str();
  train_cmd->add_option("--ngram", tf.ngram, "n-gram order; the history holds n-1 words")->capture_default_str();
  train_cmd->add_option("--vocab-limit", tf.vocab_limit, "most frequent words kept per side")->capture_default_str();
  train_cmd->add_option("--minibatch", tf.train.minibatch)->capture_default_str();
  train_cmd->add_option("--epochs", tf.train.epochs)->capture_default_str();
  train_cmd->add_option("--lr", tf.train.learning_rate, "learning rate")->capture_default_str();
  train_cmd->add_flag("--lr-halving", tf.train.lr_halving, "halve the rate when held-out perplexity stalls");
  train_cmd->add_option("--clip", tf.clip, "global gradient norm limit");
  train_cmd->add_option("--init-scale", tf.train.init_scale)->capture_default_str();
  train_cmd->add_option("--seed", tf.train.seed)->capture_default_str();
  train_cmd->add_flag("--emit-eos,!--no-eos", tf.emit_eos, "predict end of sentence (default on)");
  train_cmd->add_option("--threads", tf.train.threads, "gradient shards per minibatch")->capture_default_str();
  train_cmd->add_option("--metrics", tf.metrics, "also write metrics lines to this file");
  train_cmd->add_option("--out", tf.out, "model file")->required();

  std::string eval_model;
  CorpusFlags eval_data;
  auto* eval_cmd = app.add_subcommand("eval-ppl", "perplexity (natural log) of a model on aligned text");
  eval_cmd->add_option("--model", eval_model)->required();
  eval_data.add(*eval_cmd, "", true);

  ScoreFlags sf;
  auto* score_cmd = app.add_subcommand("score-nbest", "append a joint-model feature to an n-best list");
  score_cmd->add_option("--model", sf.model)->required();
  score_cmd->add_option("--src", sf.src, "source sentences indexed by n-best id")->required();
  score_cmd->add_option("--heads", sf.heads, "source dependency heads");
  score_cmd->add_option("--nbest", sf.nbest, "n-best list, - for stdin")->capture_default_str();
  score_cmd->add_option("--out", sf.out, "annotated n-best list, - for stdout")->capture_default_str();
  score_cmd->add_option("--feature-name", sf.options.feature_name)->capture_default_str();
  score_cmd->add_option("--threads", sf.options.threads)->capture_default_str();

  GradCheckFlags gf;
  auto* grad_cmd = app.add_subcommand("grad-check", "compare backpropagation with finite differences");
  grad_cmd->add_option("--seed", gf.seed)->capture_default_str();
  grad_cmd->add_option("--epsilon", gf.epsilon)->capture_default_str();
  grad_cmd->add_option("--tolerance", gf.tolerance)->capture_default_str();
  grad_cmd->add_option("--coordinates", gf.coordinates, "coordinates per tensor, 0 for all")->capture_default_str();
  grad_cmd->add_option("--pool-k", gf.pool_k)->capture_default_str();
  grad_cmd->add_option("--arch", gf.archs)->capture_default_str();
  grad_cmd->add_option("--fusion", gf.fusions)->capture_default_str();

  InspectFlags inf;
  auto* inspect_cmd = app.add_subcommand("inspect", "dump configuration, parameter statistics and gate histograms");
  inspect_cmd->add_option("--model", inf.model)->required();
  inf.data.add(*inspect_cmd, "", false);
  inspect_cmd->add_option("--bins", inf.bins)->capture_default_str();
  inspect_cmd->add_option("--max-samples", inf.max_samples)->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (*train_cmd) return run_train(tf, out);
    if (*eval_cmd) return run_eval(eval_model, eval_data, out);
    if (*score_cmd) return run_score(sf, out);
    if (*grad_cmd) return run_grad_check(gf, out, err);
    if (*inspect_cmd) return run_inspect(inf, out);
  } catch (const UsageError& e) {
    err << "error: usage: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const PreconditionError& e) {
    err << "error: precondition: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "error: config: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const ParseError& e) {
    err << "error: parse: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const ModelFormatError& e) {
    err << "error: model: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const DivergenceError& e) {
    err << "error: diverged: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: runtime: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 2;
}

}  // namespace cjlm
