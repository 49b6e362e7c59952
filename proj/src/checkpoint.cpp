#include "icl/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace icl::net {

namespace {

static_assert(sizeof(float) == 4);

class Writer {
 public:
  void bytes(const void* p, size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <typename U>
  void le(U v) {
    for (size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float f) { le(std::bit_cast<uint32_t>(f)); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  void need(size_t n) const {
    if (pos_ + n > s_.size()) throw ConfigError("checkpoint truncated");
  }
  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(le<uint32_t>()); }
  std::string str(size_t n) {
    need(n);
    std::string r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  const std::string& s_;
  size_t pos_ = 0;
};

}  // namespace

std::string serialize(const ParamSet<float>& params) {
  Writer w;
  w.bytes("ICLB", 4);
  w.le<uint32_t>(kCheckpointVersion);
  w.le<uint32_t>(static_cast<uint32_t>(params.size()));
  for (const auto& t : params.tensors()) {
    if (t.name.size() > 0xFFFF) throw ConfigError("tensor name too long");
    w.le<uint16_t>(static_cast<uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    if (t.rank == 1) {
      if (t.value.rows() != 1) throw ConfigError("rank-1 tensor '" + t.name + "' must be a single row");
      w.le<uint8_t>(1);
      w.le<uint32_t>(static_cast<uint32_t>(t.value.cols()));
    } else {
      w.le<uint8_t>(2);
      w.le<uint32_t>(static_cast<uint32_t>(t.value.rows()));
      w.le<uint32_t>(static_cast<uint32_t>(t.value.cols()));
    }
    for (Eigen::Index i = 0; i < t.value.size(); ++i) w.f32(t.value.data()[i]);
  }
  return w.take();
}

ParamSet<float> deserialize(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(4) != "ICLB") throw ConfigError("not a checkpoint (bad magic)");
  const uint32_t version = r.le<uint32_t>();
  if (version != kCheckpointVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  const uint32_t count = r.le<uint32_t>();
  ParamSet<float> p;
  for (uint32_t t = 0; t < count; ++t) {
    const uint16_t len = r.le<uint16_t>();
    const std::string name = r.str(len);
    const uint8_t rank = r.le<uint8_t>();
    if (rank != 1 && rank != 2) throw ConfigError("tensor '" + name + "' has unsupported rank");
    uint32_t rows = 1, cols;
    if (rank == 2) rows = r.le<uint32_t>();
    cols = r.le<uint32_t>();
    r.need(static_cast<size_t>(rows) * cols * 4);
    auto& m = p.add(name, static_cast<int>(rows), static_cast<int>(cols), rank);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f32();
  }
  if (!r.done()) throw ConfigError("trailing bytes after checkpoint tensors");
  return p;
}

std::string config_echo_path(const std::string& checkpoint_path) { return checkpoint_path + ".json"; }

void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot write '" + tmp + "'");
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) throw ConfigError("write failed for '" + tmp + "'");
  }
  fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::string& path, const ParamSet<float>& params, const std::string& config_json) {
  write_file_atomic(path, serialize(params));
  if (!config_json.empty()) write_file_atomic(config_echo_path(path), config_json);
}

ParamSet<float> load_checkpoint(const std::string& path) { return deserialize(read_file(path)); }

}  // namespace icl::net
