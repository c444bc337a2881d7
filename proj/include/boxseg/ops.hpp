#pragma once

#include <array>
#include <optional>
#include <vector>

#include "boxseg/tensor.hpp"

// Differentiable operators over N x C x D x H x W feature maps. Each op
// records a backward closure when any input requires a gradient.
namespace boxseg::ops {

using Triple = std::array<std::size_t, 3>;

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  Triple kernel{3, 3, 3};
  Triple stride{1, 1, 1};
  Triple padding{1, 1, 1};
  bool has_bias = true;

  void validate() const;
  // Weight dims: conv (out, in, k...), transposed conv (in, out, k...).
  Dims conv_weight_dims() const;
  Dims transposed_weight_dims() const;
};

ConvSpec conv_spec(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad, bool bias = true);

// floor((d + 2p - k) / s) + 1 per axis.
Triple conv_output_size(const Triple& in, const ConvSpec& spec);
// (d - 1) s - 2p + k per axis.
Triple transposed_output_size(const Triple& in, const ConvSpec& spec);

/// Cross-correlation with zero padding.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias, const ConvSpec& spec);

/// Adjoint of conv3d in its input: with the channel counts of `spec`
/// swapped, <conv3d(x, w), y> = <conv_transpose3d(y, w), x> for the same
/// weight buffer.
template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                           const ConvSpec& spec);

/// Non-overlapping 2x2x2 max. Spatial dims must be even; the gradient goes
/// to the first maximum in scan order.
template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x);

/// Per-channel affine transform with fixed statistics:
/// y = gamma (x - mean) / sqrt(var + eps) + beta. None of the four vectors
/// is trainable.
struct FrozenBatchNorm {
  std::vector<double> gamma, beta, mean, var;
  static constexpr double kEps = 1e-5;

  static FrozenBatchNorm identity(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
};

template <typename T>
Tensor<T> frozen_batchnorm(const Tensor<T>& x, const FrozenBatchNorm& bn);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// x (N,C,...) times gate (N,1,...), the gate broadcast over channels.
template <typename T>
Tensor<T> mul_channel_broadcast(const Tensor<T>& x, const Tensor<T>& gate);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Trilinear resampling to `out_size` with half-pixel (align_corners=false)
/// coordinates.
template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, const Triple& out_size);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

}  // namespace boxseg::ops
