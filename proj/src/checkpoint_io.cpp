#include "hpmi/checkpoint_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace hpmi {

namespace {

constexpr char kMagic[4] = {'H', 'P', 'M', 'I'};

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_i64(std::vector<uint8_t>& out, int64_t v) { put_u64(out, static_cast<uint64_t>(v)); }

void put_f64(std::vector<uint8_t>& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

class Cursor {
 public:
  Cursor(const std::vector<uint8_t>& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  size_t offset() const { return off_; }

  void need(size_t n, const char* what) {
    if (off_ + n > bytes_.size()) {
      throw ParseError("checkpoint " + path_ + ": truncated while reading " + what + " at byte offset " +
                       std::to_string(off_));
    }
  }

  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint16_t>(bytes_[off_] | (bytes_[off_ + 1] << 8));
    off_ += 2;
    return v;
  }

  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[off_ + static_cast<size_t>(i)]) << (8 * i);
    off_ += 4;
    return v;
  }

  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes_[off_ + static_cast<size_t>(i)]) << (8 * i);
    off_ += 8;
    return v;
  }

  int64_t i64(const char* what) { return static_cast<int64_t>(u64(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

  void raw(void* dst, size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + off_, n);
    off_ += n;
  }

  bool done() const { return off_ == bytes_.size(); }

  const std::string& path() const { return path_; }

 private:
  const std::vector<uint8_t>& bytes_;
  std::string path_;
  size_t off_ = 0;
};

TransformerCheckpoint zeros_checkpoint(const ModelConfig& config) {
  config.validate();
  const int64_t d = config.model_width();
  TransformerCheckpoint c;
  c.config = config;
  c.embed = Tensor::zeros({config.patch_dim + 1, d});
  c.pos = Tensor::zeros({config.tokens, d});
  c.layers.resize(static_cast<size_t>(config.layers));
  for (LayerWeights& l : c.layers) {
    for (int64_t h = 0; h < config.heads; ++h) {
      l.wq.push_back(Tensor::zeros({d, config.head_width}));
      l.wk.push_back(Tensor::zeros({d, config.head_width}));
      l.wv.push_back(Tensor::zeros({d, config.head_width}));
    }
    l.w0 = Tensor::zeros({d, d});
    l.b0 = Tensor::zeros({d});
    l.ln1_gamma = Tensor::zeros({d});
    l.ln1_beta = Tensor::zeros({d});
    l.w1 = Tensor::zeros({d, config.ffn_width});
    l.b1 = Tensor::zeros({config.ffn_width});
    l.w2 = Tensor::zeros({config.ffn_width, d});
    l.b2 = Tensor::zeros({d});
    l.ln2_gamma = Tensor::zeros({d});
    l.ln2_beta = Tensor::zeros({d});
  }
  c.classifier_w = Tensor::zeros({d, config.classes});
  c.classifier_b = Tensor::zeros({config.classes});
  return c;
}

}  // namespace

void save_checkpoint(const TransformerCheckpoint& ckpt, const std::string& path) {
  ckpt.validate();
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u16(out, kCheckpointVersion);
  const ModelConfig& c = ckpt.config;
  put_i64(out, c.layers);
  put_i64(out, c.heads);
  put_i64(out, c.head_width);
  put_i64(out, c.ffn_width);
  put_i64(out, c.classes);
  put_i64(out, c.tokens);
  put_i64(out, c.patch_dim);
  put_f64(out, c.ln_epsilon);
  put_i64(out, ckpt.segmented_head);

  for_each_tensor(ckpt, [&](const char*, const Tensor& t) {
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) put_u64(out, static_cast<uint64_t>(d));
    for (int64_t i = 0; i < t.numel(); ++i) put_f64(out, t.at(i));
  });

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write failed for " + path);
}

TransformerCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("checkpoint " + path + ": cannot open");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Cursor in(bytes, path);

  char magic[4];
  in.raw(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError("checkpoint " + path + ": bad magic at byte offset 0");
  }
  const uint16_t version = in.u16("version");
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint " + path + ": unsupported version " + std::to_string(version) + " at byte offset 4");
  }

  ModelConfig c;
  c.layers = in.i64("config.layers");
  c.heads = in.i64("config.heads");
  c.head_width = in.i64("config.head_width");
  c.ffn_width = in.i64("config.ffn_width");
  c.classes = in.i64("config.classes");
  c.tokens = in.i64("config.tokens");
  c.patch_dim = in.i64("config.patch_dim");
  c.ln_epsilon = in.f64("config.ln_epsilon");
  const int64_t segmented_head = in.i64("config.segmented_head");

  TransformerCheckpoint ckpt = zeros_checkpoint(c);
  ckpt.segmented_head = segmented_head;

  for_each_tensor(ckpt, [&](const char* name, Tensor& t) {
    const size_t header_off = in.offset();
    const uint32_t rank = in.u32(name);
    std::vector<int64_t> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(in.u64(name));
    if (shape != t.shape()) {
      throw ParseError("checkpoint " + path + ": tensor " + name + " has shape " + shape_to_string(shape) +
                       ", expected " + t.shape_string() + " (byte offset " + std::to_string(header_off) + ")");
    }
    in.raw(t.data(), static_cast<size_t>(t.numel()) * sizeof(double), name);
  });

  if (!in.done()) {
    throw ParseError("checkpoint " + path + ": " + std::to_string(bytes.size() - in.offset()) +
                     " trailing bytes at byte offset " + std::to_string(in.offset()));
  }
  ckpt.validate();
  return ckpt;
}

TransformerCheckpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
  TransformerCheckpoint ckpt = load_checkpoint(path);
  if (!(ckpt.config == expected)) {
    throw ContractError("checkpoint " + path + ": config mismatch in fields: " + expected.diff(ckpt.config));
  }
  return ckpt;
}

}  // namespace hpmi
