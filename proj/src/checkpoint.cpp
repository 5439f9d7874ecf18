#include "zsq/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "zsq/error.hpp"
#include "zsq/io.hpp"

namespace zsq {
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'Z', 'S', 'Q', 'D'};
constexpr std::size_t kDigestBytes = 32;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <class T>
  void pod(T v) {
    bytes(&v, sizeof v);
  }
  void str(std::string_view s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string& out() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view data, std::string origin) : data_(data), origin_(std::move(origin)) {}
  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) fail("truncated payload");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T pod() {
    T v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > data_.size() - pos_) fail("truncated payload");
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(origin_ + ": " + what + " at byte " + std::to_string(pos_));
  }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string origin_;
};

std::string digest(const EVP_MD* md, std::string_view bytes) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out, &len, md, nullptr) != 1) throw IoError("digest computation failed");
  return std::string(reinterpret_cast<const char*>(out), len);
}

std::string hex(std::string_view raw) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s;
  for (unsigned char c : raw) {
    s += kDigits[c >> 4];
    s += kDigits[c & 15];
  }
  return s;
}

void write_quantizer(Writer& w, const std::string& name, const QuantizerParams& q) {
  w.str(name);
  w.pod(static_cast<std::uint8_t>(q.bits));
  w.pod(static_cast<std::uint8_t>(q.kind == QuantKind::kWeight ? 0 : 1));
  w.pod(static_cast<std::uint8_t>(q.asymmetric ? 1 : 0));
  w.pod(q.step_value());
  w.pod(q.offset_value());
}

}  // namespace

std::string serialize_checkpoint(const Detector& model, const CheckpointMeta& meta) {
  nlohmann::json j;
  j["kind"] = meta.kind;
  j["seed"] = meta.seed;
  j["config_hash"] = meta.config_hash;
  j["epoch"] = meta.epoch;
  j["metrics"] = meta.metrics;
  j["model"] = {{"image_size", model.config.image_size},
                {"num_classes", model.config.num_classes},
                {"channels", model.config.channels}};

  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.pod(kCheckpointVersion);
  w.str(j.dump());

  std::vector<NamedTensor> tensors = model.parameters();
  for (auto& b : model.buffers()) tensors.push_back(std::move(b));
  w.pod(static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    w.str(t.name);
    w.pod(static_cast<std::uint32_t>(t.tensor.dim()));
    for (std::size_t d : t.tensor.shape()) w.pod(static_cast<std::uint64_t>(d));
    const auto v = t.tensor.data();
    w.bytes(v.data(), v.size() * sizeof(double));
  }

  std::vector<std::pair<std::string, const QuantizerParams*>> quants;
  for (const ConvLayer* c : model.conv_layers()) {
    if (c->weight_quant) quants.emplace_back(c->name + ".w", &*c->weight_quant);
    if (c->act_quant) quants.emplace_back(c->name + ".a", &*c->act_quant);
  }
  w.pod(static_cast<std::uint32_t>(quants.size()));
  for (const auto& [name, q] : quants) write_quantizer(w, name, *q);

  const std::string sum = digest(EVP_sha256(), w.out());
  w.bytes(sum.data(), sum.size());
  return std::move(w.out());
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < sizeof kMagic + sizeof(std::uint32_t) + kDigestBytes)
    throw ParseError(origin + ": truncated checkpoint (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw ParseError(origin + ": not a checkpoint (bad magic)");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + sizeof kMagic, sizeof version);
  if (version != kCheckpointVersion)
    throw ParseError(origin + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  const std::string_view body(bytes.data(), bytes.size() - kDigestBytes);
  if (digest(EVP_sha256(), body) != bytes.substr(body.size()))
    throw ParseError(origin + ": checksum mismatch, file is corrupt");

  Reader r(body, origin);
  char magic[4];
  r.bytes(magic, sizeof magic);
  r.pod<std::uint32_t>();

  Checkpoint ck;
  DetectorConfig cfg;
  try {
    const nlohmann::json j = nlohmann::json::parse(r.str());
    ck.meta.kind = j.at("kind").get<std::string>();
    ck.meta.seed = j.at("seed").get<std::uint64_t>();
    ck.meta.config_hash = j.at("config_hash").get<std::string>();
    ck.meta.epoch = j.at("epoch").get<std::size_t>();
    ck.meta.metrics = j.at("metrics").get<std::map<std::string, double>>();
    const auto& m = j.at("model");
    cfg.image_size = m.at("image_size").get<std::size_t>();
    cfg.num_classes = m.at("num_classes").get<int>();
    cfg.channels = m.at("channels").get<std::array<std::size_t, 3>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(origin + ": bad metadata: " + e.what());
  }
  ck.model = Detector::build(cfg);

  std::vector<NamedTensor> expected = ck.model.parameters();
  for (auto& b : ck.model.buffers()) expected.push_back(std::move(b));
  const auto count = r.pod<std::uint32_t>();
  if (count != expected.size())
    r.fail("tensor table has " + std::to_string(count) + " entries, architecture needs " +
           std::to_string(expected.size()));
  for (NamedTensor& t : expected) {
    const std::string name = r.str();
    if (name != t.name) r.fail("expected tensor '" + t.name + "', found '" + name + "'");
    const auto dims = r.pod<std::uint32_t>();
    Shape shape;
    for (std::uint32_t d = 0; d < dims; ++d) shape.push_back(static_cast<std::size_t>(r.pod<std::uint64_t>()));
    if (shape != t.tensor.shape()) r.fail("tensor '" + name + "' has the wrong shape");
    auto v = t.tensor.data();
    r.bytes(v.data(), v.size() * sizeof(double));
  }

  const auto nq = r.pod<std::uint32_t>();
  auto layers = ck.model.conv_layers();
  for (std::uint32_t i = 0; i < nq; ++i) {
    const std::string name = r.str();
    const int bits = r.pod<std::uint8_t>();
    const auto kind = r.pod<std::uint8_t>() == 0 ? QuantKind::kWeight : QuantKind::kActivation;
    const bool asym = r.pod<std::uint8_t>() != 0;
    const double step = r.pod<double>();
    const double offset = r.pod<double>();
    const std::size_t dot = name.rfind('.');
    if (dot == std::string::npos) r.fail("bad quantizer name '" + name + "'");
    const std::string layer = name.substr(0, dot), role = name.substr(dot + 1);
    auto it = std::find_if(layers.begin(), layers.end(), [&](const ConvLayer* c) { return c->name == layer; });
    if (it == layers.end()) r.fail("quantizer for unknown layer '" + layer + "'");
    if (role != "w" && role != "a") r.fail("bad quantizer role in '" + name + "'");
    auto& slot = role == "w" ? (*it)->weight_quant : (*it)->act_quant;
    if (slot) r.fail("duplicate quantizer '" + name + "'");
    QuantizerParams q = QuantizerParams::make(bits, kind, asym, step);
    if (asym) q.offset.data()[0] = offset;
    slot = std::move(q);
  }
  if (!r.done()) r.fail("trailing bytes");
  return ck;
}

void save_checkpoint(const Detector& model, const CheckpointMeta& meta, const fs::path& path) {
  write_file(path, serialize_checkpoint(model, meta));
}

Checkpoint load_checkpoint(const fs::path& path) { return parse_checkpoint(read_file(path), path.string()); }

std::string sha256_hex(std::string_view bytes) { return hex(digest(EVP_sha256(), bytes)); }

std::string git_blob_hash(std::string_view bytes) {
  std::string framed = "blob " + std::to_string(bytes.size());
  framed += '\0';
  framed.append(bytes);
  return hex(digest(EVP_sha1(), framed));
}

std::string content_hash(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("cannot hash missing path " + path.string());
  if (!fs::is_directory(path)) return git_blob_hash(read_file(path));
  std::vector<std::string> lines;
  for (const auto& e : fs::recursive_directory_iterator(path)) {
    if (!e.is_regular_file()) continue;
    lines.push_back(fs::relative(e.path(), path).generic_string() + ' ' + git_blob_hash(read_file(e.path())));
  }
  std::sort(lines.begin(), lines.end());
  std::string listing;
  for (const auto& l : lines) listing += l + '\n';
  return git_blob_hash(listing);
}

}  // namespace zsq
