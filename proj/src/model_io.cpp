#include "cjlm/model_io.hpp"

#include <bit>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fcntl.h>
#include <unistd.h>

#include <fmt/format.h>
#include <json.hpp>

#include "cjlm/tensor.hpp"

namespace cjlm {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'C', 'J', 'L', 'M'};

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  const std::uint8_t* take(std::size_t n) {
    if (n > size_ - pos_) throw ModelFormatError("truncated model file");
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  bool done() const { return pos_ == size_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

json encoder_to_json(const EncoderConfig& e) {
  return {{"arch", to_string(e.arch)},     {"src_vocab", e.src_vocab}, {"emb_dim", e.emb_dim},
          {"tgt_emb_dim", e.tgt_emb_dim},  {"attn_dim", e.attn_dim},   {"attn_depth", e.attn_depth},
          {"filters1", e.filters1},        {"filters3", e.filters3},   {"repr_dim", e.repr_dim},
          {"maxlen", e.maxlen},            {"history", e.history},     {"fusion", to_string(e.fusion)},
          {"pool_k", e.pool_k}};
}

EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig e;
  e.arch = parse_arch(j.at("arch").get<std::string>());
  e.src_vocab = j.at("src_vocab");
  e.emb_dim = j.at("emb_dim");
  e.tgt_emb_dim = j.at("tgt_emb_dim");
  e.attn_dim = j.at("attn_dim");
  e.attn_depth = j.at("attn_depth");
  e.filters1 = j.at("filters1");
  e.filters3 = j.at("filters3");
  e.repr_dim = j.at("repr_dim");
  e.maxlen = j.at("maxlen");
  e.history = j.at("history");
  e.fusion = parse_fusion(j.at("fusion").get<std::string>());
  e.pool_k = j.at("pool_k");
  return e;
}

json train_to_json(const TrainConfig& t) {
  json j = {{"learning_rate", t.learning_rate}, {"minibatch", t.minibatch}, {"epochs", t.epochs},
            {"seed", t.seed},                   {"lr_halving", t.lr_halving}, {"init_scale", t.init_scale},
            {"threads", t.threads}};
  j["grad_clip"] = t.grad_clip ? json(*t.grad_clip) : json(nullptr);
  return j;
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.learning_rate = j.at("learning_rate");
  t.minibatch = j.at("minibatch");
  t.epochs = j.at("epochs");
  t.seed = j.at("seed");
  t.lr_halving = j.at("lr_halving");
  t.init_scale = j.at("init_scale");
  t.threads = j.at("threads");
  if (!j.at("grad_clip").is_null()) t.grad_clip = j.at("grad_clip").get<double>();
  return t;
}

json vocab_to_json(const Vocabulary& v) { return {{"limit", v.limit()}, {"tokens", v.tokens()}}; }

Vocabulary vocab_from_json(const json& j) {
  return Vocabulary::from_tokens(j.at("tokens").get<std::vector<std::string>>(), j.at("limit").get<std::size_t>());
}

json provenance_to_json(const Provenance& p) {
  json metrics = json::array();
  for (const auto& m : p.metrics) {
    json e = {{"epoch", m.epoch}, {"train_nll", m.train_nll}, {"learning_rate", m.learning_rate}};
    e["heldout_ppl"] = m.heldout_ppl ? json(*m.heldout_ppl) : json(nullptr);
    metrics.push_back(std::move(e));
  }
  return {{"seed", p.seed},
          {"corpus_lines", p.corpus_lines},
          {"samples", p.samples},
          {"skipped_unalignable", p.skipped_unalignable},
          {"skipped_too_long", p.skipped_too_long},
          {"metrics", std::move(metrics)}};
}

Provenance provenance_from_json(const json& j) {
  Provenance p;
  p.seed = j.at("seed");
  p.corpus_lines = j.at("corpus_lines");
  p.samples = j.at("samples");
  p.skipped_unalignable = j.at("skipped_unalignable");
  p.skipped_too_long = j.at("skipped_too_long");
  for (const auto& e : j.at("metrics")) {
    EpochMetrics m;
    m.epoch = e.at("epoch");
    m.train_nll = e.at("train_nll");
    m.learning_rate = e.at("learning_rate");
    if (!e.at("heldout_ppl").is_null()) m.heldout_ppl = e.at("heldout_ppl").get<double>();
    p.metrics.push_back(m);
  }
  return p;
}

}  // namespace

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> serialize_model(const ModelArtifact& a) {
  const auto& cfg = a.model.config;
  json header = {{"encoder", encoder_to_json(cfg.encoder)},
                 {"joint", {{"tgt_vocab", cfg.joint.tgt_vocab}, {"hidden", cfg.joint.hidden}}},
                 {"emit_eos", cfg.emit_eos},
                 {"train", train_to_json(a.train)},
                 {"source_vocab", vocab_to_json(a.source_vocab)},
                 {"target_vocab", vocab_to_json(a.target_vocab)},
                 {"provenance", provenance_to_json(a.provenance)}};
  const std::string text = header.dump();

  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(ModelArtifact::kFormatVersion);
  w.u64(text.size());
  w.bytes(text.data(), text.size());

  const auto tensors = tensor_views(a.model);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) w.u64(d);
    for (double v : t.values) w.f32(static_cast<float>(v));
  }
  auto& buf = w.buffer();
  const std::uint64_t checksum = fnv1a64(buf.data(), buf.size());
  w.u64(checksum);
  return std::move(buf);
}

ModelArtifact deserialize_model(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes.data(), bytes.size());
  if (std::memcmp(r.take(4), kMagic, 4) != 0) throw ModelFormatError("not a CJLM model file");
  const std::uint32_t version = r.u32();
  if (version != ModelArtifact::kFormatVersion) {
    throw ModelFormatError(fmt::format("unsupported version {}", version));
  }
  if (bytes.size() < 16) throw ModelFormatError("truncated model file");
  {
    Reader tail(bytes.data() + bytes.size() - 8, 8);
    if (tail.u64() != fnv1a64(bytes.data(), bytes.size() - 8)) throw ModelFormatError("checksum mismatch");
  }

  const std::uint64_t text_size = r.u64();
  const auto* text = reinterpret_cast<const char*>(r.take(text_size));
  ModelArtifact a;
  try {
    const json header = json::parse(std::string(text, text_size));
    ModelConfig cfg;
    cfg.encoder = encoder_from_json(header.at("encoder"));
    cfg.joint.tgt_vocab = header.at("joint").at("tgt_vocab");
    cfg.joint.hidden = header.at("joint").at("hidden").get<std::vector<std::size_t>>();
    cfg.emit_eos = header.at("emit_eos");
    a.model = Model::zeros(cfg);
    a.train = train_from_json(header.at("train"));
    a.source_vocab = vocab_from_json(header.at("source_vocab"));
    a.target_vocab = vocab_from_json(header.at("target_vocab"));
    a.provenance = provenance_from_json(header.at("provenance"));
  } catch (const json::exception& e) {
    throw ModelFormatError(std::string("bad model header: ") + e.what());
  }
  if (a.source_vocab.size() != a.model.config.encoder.src_vocab ||
      a.target_vocab.size() != a.model.config.joint.tgt_vocab) {
    throw ModelFormatError("vocabulary sizes disagree with the model configuration");
  }

  auto tensors = tensor_views(a.model);
  const std::uint32_t count = r.u32();
  if (count != tensors.size()) {
    throw ModelFormatError(fmt::format("expected {} tensors, found {}", tensors.size(), count));
  }
  for (auto& t : tensors) {
    const std::uint32_t name_size = r.u32();
    const auto* name = reinterpret_cast<const char*>(r.take(name_size));
    if (std::string(name, name_size) != t.name) {
      throw ModelFormatError(fmt::format("expected tensor '{}', found '{}'", t.name, std::string(name, name_size)));
    }
    const std::uint32_t rank = r.u32();
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = r.u64();
    if (dims != t.dims) throw ModelFormatError(fmt::format("tensor '{}' has unexpected shape", t.name));
    for (double& v : t.values) v = static_cast<double>(r.f32());
  }
  r.u64();  // checksum, verified above
  if (!r.done()) throw ModelFormatError("trailing bytes after checksum");
  return a;
}

void save_model(const ModelArtifact& artifact, const std::string& path) {
  const auto bytes = serialize_model(artifact);
  const std::string tmp = path + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw Error(fmt::format("cannot write '{}': {}", path, std::strerror(errno)));
  std::size_t written = 0;
  while (written < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + written, bytes.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      const int err = errno;
      ::close(fd);
      ::unlink(tmp.c_str());
      throw Error(fmt::format("cannot write '{}': {}", path, std::strerror(err)));
    }
    written += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) {
    ::unlink(tmp.c_str());
    throw Error(fmt::format("cannot flush '{}': {}", path, std::strerror(errno)));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    ::unlink(tmp.c_str());
    throw Error(fmt::format("cannot rename '{}' to '{}': {}", tmp, path, std::strerror(errno)));
  }
}

ModelArtifact load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open model '{}'", path));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace cjlm
