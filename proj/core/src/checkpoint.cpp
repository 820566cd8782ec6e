#include "safeft/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace safeft {

namespace {

constexpr char kMagic[8] = {'S', 'A', 'F', 'E', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<unsigned char>& buffer() { return out_; }

 private:
  std::vector<unsigned char> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string str() {
    const auto n = uint<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void expect_magic() {
    need(sizeof(kMagic));
    if (std::memcmp(in_.data() + pos_, kMagic, sizeof(kMagic)) != 0) throw CheckpointError("not a checkpoint file");
    pos_ += sizeof(kMagic);
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return in_.size(); }

 private:
  const std::vector<unsigned char>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> tensor_bytes(const Tensor& t) {
  Writer w;
  for (double v : t.data()) w.f64(v);
  return std::move(w.buffer());
}

std::vector<unsigned char> encode_checkpoint(const Model& model, const std::vector<std::string>& names) {
  std::vector<const Parameter*> selected;
  if (names.empty()) {
    for (const auto& p : model.parameters()) selected.push_back(&p);
  } else {
    for (const auto& n : names) selected.push_back(&model.parameter(n));
  }

  const auto& c = model.config();
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.uint(kCheckpointVersion);
  for (std::uint64_t v : {static_cast<std::uint64_t>(c.n_layers), static_cast<std::uint64_t>(c.d_model),
                          static_cast<std::uint64_t>(c.n_heads), static_cast<std::uint64_t>(c.d_ff),
                          static_cast<std::uint64_t>(c.vocab_size), static_cast<std::uint64_t>(c.max_seq),
                          static_cast<std::uint64_t>(c.n_classes), static_cast<std::uint64_t>(c.lora_rank)}) {
    w.uint(v);
  }
  w.f64(c.lora_alpha);
  w.f64(c.lora_dropout);

  w.uint(static_cast<std::uint32_t>(model.adapters().size()));
  for (const auto& a : model.adapters()) {
    w.uint(static_cast<std::uint8_t>(a.status));
    w.uint(static_cast<std::uint32_t>(a.freeze_epoch.value_or(-1)));
  }

  w.uint(static_cast<std::uint32_t>(selected.size()));
  std::uint64_t offset = 0;
  for (const auto* p : selected) {
    w.str(p->name);
    const auto& shape = p->value->shape();
    w.uint(static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) w.uint(static_cast<std::uint64_t>(e));
    w.uint(offset);
    offset += p->value->bytes();
  }
  for (const auto* p : selected) {
    for (double v : p->value->data()) w.f64(v);
  }
  return std::move(w.buffer());
}

CheckpointData decode_checkpoint(const std::vector<unsigned char>& bytes) {
  Reader r(bytes);
  r.expect_magic();
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  CheckpointData data;
  auto& c = data.config;
  c.n_layers = static_cast<int>(r.uint<std::uint64_t>());
  c.d_model = r.uint<std::uint64_t>();
  c.n_heads = r.uint<std::uint64_t>();
  c.d_ff = r.uint<std::uint64_t>();
  c.vocab_size = r.uint<std::uint64_t>();
  c.max_seq = r.uint<std::uint64_t>();
  c.n_classes = r.uint<std::uint64_t>();
  c.lora_rank = r.uint<std::uint64_t>();
  c.lora_alpha = r.f64();
  c.lora_dropout = r.f64();

  const auto n_adapters = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_adapters; ++i) {
    AdapterState a;
    const auto status = r.uint<std::uint8_t>();
    if (status > 1) throw CheckpointError("bad adapter status");
    a.status = static_cast<AdapterStatus>(status);
    const auto fe = static_cast<std::int32_t>(r.uint<std::uint32_t>());
    if (fe >= 0) a.freeze_epoch = fe;
    data.adapters.push_back(a);
  }

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> manifest;
  const auto count = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str();
    const auto rank = r.uint<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.uint<std::uint64_t>());
    e.offset = r.uint<std::uint64_t>();
    manifest.push_back(std::move(e));
  }
  const std::size_t base = r.pos();
  for (const auto& e : manifest) {
    const std::size_t n = shape_numel(e.shape);
    if (base + e.offset + n * 8 > bytes.size()) throw CheckpointError("tensor " + e.name + " runs past end of file");
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      const std::size_t at = base + e.offset + i * 8;
      for (std::size_t b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[at + b]) << (8 * b);
      values[i] = std::bit_cast<double>(bits);
    }
    data.tensors.emplace(e.name, Tensor(e.shape, std::move(values)));
  }
  return data;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path, const std::vector<std::string>& names) {
  const auto bytes = encode_checkpoint(model, names);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void apply_checkpoint(Model& model, const CheckpointData& data) {
  if (!(data.config == model.config())) throw CheckpointError("checkpoint was written for a different model config");
  if (data.adapters.size() != model.adapters().size()) throw CheckpointError("adapter count mismatch");
  for (const auto& [name, t] : data.tensors) {
    Tensor& dst = model.mutable_value(name);
    if (dst.shape() != t.shape()) throw CheckpointError("shape mismatch for " + name);
    dst = t;
  }
  for (std::size_t i = 0; i < data.adapters.size(); ++i) model.set_adapter(static_cast<int>(i), data.adapters[i]);
}

Model load_model(const std::filesystem::path& path) {
  auto data = read_checkpoint(path);
  auto model = Model::init(data.config, 0);
  if (data.tensors.size() != model.parameters().size()) {
    throw CheckpointError(path.string() + " is a partial snapshot, not a full checkpoint");
  }
  apply_checkpoint(model, data);
  return model;
}

}  // namespace safeft
