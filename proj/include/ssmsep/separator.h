// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Time-frequency grid separator. Feature grids are held as [T, F, C]
// (frames, bins, channels) so every per-position projection is a GEMM
// over the last axis.

#ifndef SSMSEP_SEPARATOR_H_
#define SSMSEP_SEPARATOR_H_

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ssmsep/bmamba.h"
#include "ssmsep/spectral.h"

namespace ssmsep {

struct ModelConfig {
  std::size_t blocks = 6;
  std::size_t channels = 128;       // C
  std::size_t module_hidden = 256;  // Mamba inner width
  std::size_t bmamba_hidden = 128;  // Mamba model width
  std::size_t kernel = 8;           // unfold K
  std::size_t stride = 1;           // unfold S
  std::size_t window = 512;
  std::size_t hop = 128;
  std::size_t fft_size = 512;
  int sample_rate = 16000;
  std::size_t speakers = 2;  // J
  std::size_t heads = 4;
  std::size_t attn_qk_dim = 0;  // per head; 0 selects max(1, C / 8)
  std::size_t d_state = 16;
  std::size_t conv_width = 4;
  bool fd_uses_bmamba = true;
  bool td_uses_bmamba = true;
  std::size_t infer_chunk = 64;  // sequences per inference batch; 0 disables

  std::size_t bins() const noexcept { return fft_size / 2 + 1; }
  std::size_t qk_dim() const noexcept { return attn_qk_dim ? attn_qk_dim : std::max<std::size_t>(1, channels / 8); }
  std::size_t v_dim() const noexcept { return channels / heads; }
  StftConfig stft() const { return {window, hop, fft_size, WindowType::kHann}; }
  MambaDims mamba_dims() const;
  // Throws ConfigError when an invariant fails.
  void validate() const;

  std::string to_json() const;
  // Missing keys keep their defaults; unknown keys raise ConfigError.
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

// FD or TD module: unfold along the sequence axis, normalize, project to
// the recurrent width, bidirectional mixing, then a transposed conv
// (projection + overlap-add fold) back to C channels, plus the residual.
template <typename T>
struct DualPathWeights {
  std::size_t kernel = 1, stride = 1;
  bool use_bmamba = true;
  Var<T> norm_gain;  // [K*C]
  Var<T> norm_bias;  // [K*C]
  Var<T> in_proj;    // [Hb, K*C]
  BMambaWeights<T> mamba;
  BGruWeights<T> gru;
  Var<T> out_proj;  // [K*C, Hb]

  DualPathWeights(const ModelConfig& c, bool use_bmamba);
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
  void init(std::mt19937_64& rng);
};

template <typename T>
struct TfaWeights {
  std::size_t heads = 1;
  Var<T> q_proj, k_proj;  // [heads*dk, C]
  Var<T> v_proj;          // [heads*dv, C]
  Var<T> q_gain, q_bias, k_gain, k_bias, v_gain, v_bias;
  Var<T> out_proj;  // [C, heads*dv]

  explicit TfaWeights(const ModelConfig& c);
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
  void init(std::mt19937_64& rng);
};

template <typename T>
struct BlockWeights {
  DualPathWeights<T> fd;
  DualPathWeights<T> td;
  TfaWeights<T> tfa;
};

template <typename T>
struct SeparatorWeights {
  ModelConfig config;
  Var<T> stem;  // [C, 2, 3, 3]
  std::vector<BlockWeights<T>> blocks;
  Var<T> head;  // [2J, C, 3, 3]

  explicit SeparatorWeights(const ModelConfig& c);
  void visit(const ParamVisitor<T>& f);
  void init(std::uint64_t seed);
  std::vector<Var<T>> parameters();
  void set_requires_grad(bool on);
};

namespace ag {

// Modules over z [T, F, C]. `chunk` > 0 evaluates independent sequences in
// groups of that size (inference only).
template <typename T>
Var<T> fd_module(const Var<T>& z, const DualPathWeights<T>& w, std::size_t chunk = 0);
template <typename T>
Var<T> td_module(const Var<T>& z, const DualPathWeights<T>& w, std::size_t chunk = 0);
// When `attention` is non-null it receives the [heads, T, T] weights.
template <typename T>
Var<T> tfa_module(const Var<T>& z, const TfaWeights<T>& w, Tensor<T>* attention = nullptr);

}  // namespace ag

template <typename T>
class Separator {
 public:
  explicit Separator(SeparatorWeights<T> weights);

  const ModelConfig& config() const noexcept { return weights_.config; }
  SeparatorWeights<T>& weights() noexcept { return weights_; }
  const SeparatorWeights<T>& weights() const noexcept { return weights_; }
  const Stft<T>& stft() const noexcept { return stft_; }

  // spec [2, F, T] -> [J, 2, F, T]. Throws NumericError carrying the block
  // index if a block output is non-finite.
  Var<T> forward_spec(const Var<T>& spec) const;
  // mix [L] -> estimates [J, L]. Normalizes by the mixture std and restores
  // it on output.
  Var<T> forward(const Tensor<T>& mix) const;
  // Inference entry point: J buffers, each exactly the input length.
  std::vector<AudioBuffer> separate(const AudioBuffer& mix) const;

 private:
  SeparatorWeights<T> weights_;
  Stft<T> stft_;
};

struct ModelComplexity {
  std::size_t params = 0;
  std::size_t block_params = 0;  // everything inside the B blocks
  std::size_t io_params = 0;     // stem and head
  double macs_per_second = 0;    // for 1 s of audio at config.sample_rate
};

ModelComplexity count_params_macs(const ModelConfig& config);

// Checkpoint container. Layout (little-endian):
//   "SPMB" | u32 version | u32 len | config json | u32 count |
//   count x { u32 len | name | u8 dtype (0 f32, 1 f64) | u32 rank | u64 dims[rank] | data }
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const SeparatorWeights<T>& weights);
// Converts stored tensors to T. Throws IoError on malformed files and
// ContractError when names or shapes disagree with the stored config.
template <typename T>
SeparatorWeights<T> load_checkpoint(const std::filesystem::path& path);
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace ssmsep

#endif  // SSMSEP_SEPARATOR_H_
