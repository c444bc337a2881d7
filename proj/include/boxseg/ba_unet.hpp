#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "boxseg/checkpoint.hpp"
#include "boxseg/ops.hpp"

namespace boxseg {

struct ArchConfig {
  std::size_t base_channels = 8;
  std::size_t levels = 3;
  std::size_t attention_inter_channels_divisor = 2;
  std::size_t input_channels = 1;
  std::size_t output_channels = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static ArchConfig from_json(const nlohmann::json& j);

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

// Registers every trainable tensor under a dotted name.
template <typename T>
class ParameterRegistry {
 public:
  explicit ParameterRegistry(std::mt19937_64& rng) : rng_(rng) {}

  // Uniform in +-bound (zeros when bound is 0), requires_grad leaf.
  Tensor<T> make(const std::string& name, Dims dims, double bound);
  std::vector<NamedParameter<T>>& params() { return params_; }

 private:
  std::mt19937_64& rng_;
  std::vector<NamedParameter<T>> params_;
};

template <typename T>
struct ConvLayer {
  ops::ConvSpec spec;
  bool transposed = false;
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;

  ConvLayer() = default;
  // Weights uniform in +-weight_gain / sqrt(fan_in); biases in +-1 / sqrt(fan_in).
  ConvLayer(ParameterRegistry<T>& reg, const std::string& name, const ops::ConvSpec& spec, bool transposed = false,
            double weight_gain = kHeGain);
  static constexpr double kHeGain = 2.449489742783178;  // sqrt(6)
  Tensor<T> operator()(const Tensor<T>& x) const;
};

/// Conv3d(3x3x3, stride 1, pad 1) -> frozen BN -> ReLU.
template <typename T>
struct ConvUnit {
  ConvLayer<T> conv;
  ops::FrozenBatchNorm bn;

  ConvUnit() = default;
  ConvUnit(ParameterRegistry<T>& reg, const std::string& name, std::size_t in, std::size_t out);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

/// Residual block: 1x1x1 reduce -> BN -> ReLU -> 3x3x3 -> BN -> ReLU ->
/// 1x1x1 restore -> BN -> + input -> ReLU. Reduction is channels/2 (min 1).
/// The restore conv starts at unit gain so the residual branch stays small.
template <typename T>
struct Bottleneck {
  static constexpr double kRestoreGain = 1.0;
  ConvLayer<T> reduce, mid, restore;
  ops::FrozenBatchNorm bn_reduce, bn_mid, bn_restore;

  Bottleneck() = default;
  Bottleneck(ParameterRegistry<T>& reg, const std::string& name, std::size_t channels);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

/// Additive attention gate with a third, lower-level encoder input.
///
/// The gate (half resolution) is upsampled x2, then
///   a     = ReLU(Wg g + Wx skip + Wl lower + b)
///   alpha = sigmoid(psi(a))
/// and the block returns skip * alpha, alpha broadcast over channels. All
/// projections are 1x1x1 convolutions to skip_channels / divisor (min 1).
template <typename T>
struct AttentionBlock {
  ConvLayer<T> w_gate, w_skip, w_lower, psi;

  AttentionBlock() = default;
  AttentionBlock(ParameterRegistry<T>& reg, const std::string& name, std::size_t skip_ch, std::size_t gate_ch,
                 std::size_t lower_ch, std::size_t inter_ch);
  Tensor<T> operator()(const Tensor<T>& skip, const Tensor<T>& gate, const Tensor<T>& lower) const;
  // Attention coefficients alone, N x 1 x D x H x W.
  Tensor<T> coefficients(const Tensor<T>& skip, const Tensor<T>& gate, const Tensor<T>& lower) const;
};

/// Three-level 3D encoder/decoder with bottleneck blocks and three-input
/// attention gates, ending in a 1x1x1 conv and sigmoid.
///
/// Channel plan: encoder [c, 2c, 4c], bridge 8c, decoder mirrored. Encoder
/// level i records its input (the previous pooled map, or the raw image) as
/// the lower-level feature and its bottleneck output as the skip. Decoder
/// level i upsamples with a 2x2x2 transposed conv, gates skip_i with the
/// pre-upsampling map and lower_i, concatenates [gated, upsampled] and runs a
/// conv unit plus bottleneck.
template <typename T>
class BaUnet {
 public:
  // Head bias starts at logit(kForegroundPrior).
  static constexpr double kForegroundPrior = 0.01;

  BaUnet(const ArchConfig& config, uint64_t seed);

  const ArchConfig& config() const { return config_; }

  /// N x C_in x D x H x W -> N x C_out x D x H x W in (0,1). D, H, W must be
  /// divisible by 8.
  Tensor<T> forward(const Tensor<T>& x) const;
  // Pre-sigmoid output of the final 1x1x1 conv.
  Tensor<T> logits(const Tensor<T>& x) const;

  std::vector<NamedParameter<T>>& parameters() { return params_; }
  const std::vector<NamedParameter<T>>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad();

  // Head conv of the final 1x1x1 layer; tests zero it to pin the output at 0.5.
  ConvLayer<T>& head_conv() { return head_out_; }

  // Every attention block, encoder-depth order (level 1 first).
  std::vector<AttentionBlock<T>*> attention_blocks();

  std::vector<StoredTensor> state() const;
  void load_state(const std::vector<StoredTensor>& tensors);

  // arch.json + params.json + blobs.
  void save(const std::filesystem::path& dir) const;
  static BaUnet load(const std::filesystem::path& dir);

 private:
  ArchConfig config_;
  std::vector<NamedParameter<T>> params_;

  struct EncoderLevel {
    ConvUnit<T> unit;
    Bottleneck<T> block;
  };
  struct DecoderLevel {
    ConvLayer<T> up;
    AttentionBlock<T> attention;
    ConvUnit<T> unit;
    Bottleneck<T> block;
  };

  std::vector<EncoderLevel> encoder_;
  ConvUnit<T> bridge_unit_;
  Bottleneck<T> bridge_block_;
  std::vector<DecoderLevel> decoder_;  // index 0 = level 1 (full resolution)
  ConvUnit<T> head_unit_;
  Bottleneck<T> head_block_;
  ConvLayer<T> head_out_;
};

extern template class BaUnet<float>;
extern template class BaUnet<double>;

}  // namespace boxseg
