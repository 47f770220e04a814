// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "ssmsep/errors.h"
#include "ssmsep/separator.h"

namespace ssmsep {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'M', 'B'};

template <typename U>
void put(std::string& out, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

class Reader {
 public:
  Reader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  template <typename U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)), sizeof(U));
    return v;
  }
  const char* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw IoError(origin_ + ": truncated checkpoint");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::string string() {
    const auto n = get<std::uint32_t>();
    return {take(n), n};
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

Reader open(const std::filesystem::path& path, ModelConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Reader r(std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()), path.string());
  if (std::memcmp(r.take(4), kMagic, 4) != 0) throw IoError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  try {
    config = ModelConfig::from_json(r.string());
  } catch (const ConfigError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return r;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const SeparatorWeights<T>& weights) {
  auto w = weights;  // visit is non-const; copies share storage
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = w.config.to_json();
  put<std::uint32_t>(out, std::uint32_t(cfg.size()));
  out += cfg;
  std::uint32_t count = 0;
  w.visit([&](const std::string&, Var<T>&) { ++count; });
  put<std::uint32_t>(out, count);
  w.visit([&](const std::string& name, Var<T>& v) {
    put<std::uint32_t>(out, std::uint32_t(name.size()));
    out += name;
    put<std::uint8_t>(out, sizeof(T) == 4 ? 0 : 1);
    put<std::uint32_t>(out, std::uint32_t(v.value().rank()));
    for (std::size_t d : v.shape()) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(v.value().data()), v.value().size() * sizeof(T));
  });
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  ModelConfig c;
  open(path, c);
  return c;
}

template <typename T>
SeparatorWeights<T> load_checkpoint(const std::filesystem::path& path) {
  ModelConfig config;
  Reader r = open(path, config);
  std::map<std::string, Tensor<T>> stored;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.string();
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > 1) throw IoError(path.string() + ": unknown dtype tag for " + name);
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = std::size_t(r.get<std::uint64_t>());
    Tensor<T> t(shape);
    const std::size_t n = t.size();
    if (dtype == 0) {
      const char* p = r.take(n * 4);
      for (std::size_t k = 0; k < n; ++k) {
        float v;
        std::memcpy(&v, p + 4 * k, 4);
        t[k] = T(v);
      }
    } else {
      const char* p = r.take(n * 8);
      for (std::size_t k = 0; k < n; ++k) {
        double v;
        std::memcpy(&v, p + 8 * k, 8);
        t[k] = T(v);
      }
    }
    stored.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw IoError(path.string() + ": trailing bytes after tensors");

  SeparatorWeights<T> w(config);
  std::size_t matched = 0;
  w.visit([&](const std::string& name, Var<T>& v) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw ContractError(path.string() + ": missing tensor " + name);
    if (it->second.shape() != v.shape())
      throw ContractError(path.string() + ": shape mismatch for " + name + ": stored " +
                          shape_str(it->second.shape()) + ", expected " + shape_str(v.shape()));
    v.mutable_value() = std::move(it->second);
    ++matched;
  });
  if (matched != stored.size()) throw ContractError(path.string() + ": unexpected extra tensors");
  return w;
}

template void save_checkpoint<float>(const std::filesystem::path&, const SeparatorWeights<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const SeparatorWeights<double>&);
template SeparatorWeights<float> load_checkpoint<float>(const std::filesystem::path&);
template SeparatorWeights<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace ssmsep
