#include "boxseg/ba_unet.hpp"

#include <cmath>
#include <map>

#include "boxseg/volume_io.hpp"

namespace boxseg {

using ops::ConvSpec;

void ArchConfig::validate() const {
  if (levels != 3) throw TensorError("arch: levels must be 3");
  if (base_channels < 1) throw TensorError("arch: base_channels must be >= 1");
  if (attention_inter_channels_divisor < 1) throw TensorError("arch: attention_inter_channels_divisor must be >= 1");
  if (input_channels < 1 || output_channels < 1) throw TensorError("arch: channel counts must be >= 1");
}

nlohmann::json ArchConfig::to_json() const {
  return {{"base_channels", base_channels},
          {"levels", levels},
          {"attention_inter_channels_divisor", attention_inter_channels_divisor},
          {"input_channels", input_channels},
          {"output_channels", output_channels}};
}

ArchConfig ArchConfig::from_json(const nlohmann::json& j) {
  ArchConfig c;
  c.base_channels = j.value("base_channels", c.base_channels);
  c.levels = j.value("levels", c.levels);
  c.attention_inter_channels_divisor = j.value("attention_inter_channels_divisor", c.attention_inter_channels_divisor);
  c.input_channels = j.value("input_channels", c.input_channels);
  c.output_channels = j.value("output_channels", c.output_channels);
  c.validate();
  return c;
}

template <typename T>
Tensor<T> ParameterRegistry<T>::make(const std::string& name, Dims dims, double bound) {
  std::vector<T> values(dims_numel(dims), T(0));
  if (bound > 0.0) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : values) v = static_cast<T>(dist(rng_));
  }
  auto t = Tensor<T>::from(std::move(dims), std::move(values), true);
  params_.push_back({name, t});
  return t;
}

template <typename T>
ConvLayer<T>::ConvLayer(ParameterRegistry<T>& reg, const std::string& name, const ConvSpec& s, bool is_transposed,
                        double weight_gain)
    : spec(s), transposed(is_transposed) {
  spec.validate();
  const std::size_t kvol = spec.kernel[0] * spec.kernel[1] * spec.kernel[2];
  const std::size_t svol = spec.stride[0] * spec.stride[1] * spec.stride[2];
  // Taps feeding one output voxel.
  const double fan_in = transposed ? static_cast<double>(spec.in_channels * std::max<std::size_t>(1, kvol / svol))
                                   : static_cast<double>(spec.in_channels * kvol);
  weight = reg.make(name + ".weight", transposed ? spec.transposed_weight_dims() : spec.conv_weight_dims(),
                    weight_gain / std::sqrt(fan_in));
  if (spec.has_bias) bias = reg.make(name + ".bias", {spec.out_channels}, 1.0 / std::sqrt(fan_in));
}

template <typename T>
Tensor<T> ConvLayer<T>::operator()(const Tensor<T>& x) const {
  return transposed ? ops::conv_transpose3d(x, weight, bias, spec) : ops::conv3d(x, weight, bias, spec);
}

template <typename T>
ConvUnit<T>::ConvUnit(ParameterRegistry<T>& reg, const std::string& name, std::size_t in, std::size_t out)
    : conv(reg, name + ".conv", ops::conv_spec(in, out, 3, 1, 1)), bn(ops::FrozenBatchNorm::identity(out)) {}

template <typename T>
Tensor<T> ConvUnit<T>::operator()(const Tensor<T>& x) const {
  return ops::relu(ops::frozen_batchnorm(conv(x), bn));
}

template <typename T>
Bottleneck<T>::Bottleneck(ParameterRegistry<T>& reg, const std::string& name, std::size_t channels) {
  const std::size_t r = std::max<std::size_t>(1, channels / 2);
  reduce = ConvLayer<T>(reg, name + ".reduce", ops::conv_spec(channels, r, 1, 1, 0));
  mid = ConvLayer<T>(reg, name + ".mid", ops::conv_spec(r, r, 3, 1, 1));
  restore = ConvLayer<T>(reg, name + ".restore", ops::conv_spec(r, channels, 1, 1, 0), false, kRestoreGain);
  bn_reduce = ops::FrozenBatchNorm::identity(r);
  bn_mid = ops::FrozenBatchNorm::identity(r);
  bn_restore = ops::FrozenBatchNorm::identity(channels);
}

template <typename T>
Tensor<T> Bottleneck<T>::operator()(const Tensor<T>& x) const {
  auto h = ops::relu(ops::frozen_batchnorm(reduce(x), bn_reduce));
  h = ops::relu(ops::frozen_batchnorm(mid(h), bn_mid));
  h = ops::frozen_batchnorm(restore(h), bn_restore);
  return ops::relu(ops::add(h, x));
}

template <typename T>
AttentionBlock<T>::AttentionBlock(ParameterRegistry<T>& reg, const std::string& name, std::size_t skip_ch,
                                  std::size_t gate_ch, std::size_t lower_ch, std::size_t inter_ch)
    : w_gate(reg, name + ".w_gate", ops::conv_spec(gate_ch, inter_ch, 1, 1, 0, false)),
      w_skip(reg, name + ".w_skip", ops::conv_spec(skip_ch, inter_ch, 1, 1, 0, true)),
      w_lower(reg, name + ".w_lower", ops::conv_spec(lower_ch, inter_ch, 1, 1, 0, false)),
      psi(reg, name + ".psi", ops::conv_spec(inter_ch, 1, 1, 1, 0, true)) {}

template <typename T>
Tensor<T> AttentionBlock<T>::coefficients(const Tensor<T>& skip, const Tensor<T>& gate, const Tensor<T>& lower) const {
  const ops::Triple size{skip.dim(2), skip.dim(3), skip.dim(4)};
  if (lower.dim(2) != size[0] || lower.dim(3) != size[1] || lower.dim(4) != size[2])
    throw TensorError("attention: lower-level features " + dims_string(lower.dims()) + " do not match skip " +
                      dims_string(skip.dims()));
  for (std::size_t a = 0; a < 3; ++a)
    if (gate.dim(2 + a) * 2 != size[a])
      throw TensorError("attention: gate " + dims_string(gate.dims()) + " is not half the skip resolution " +
                        dims_string(skip.dims()));
  const auto g = ops::upsample_trilinear(gate, size);
  const auto a = ops::relu(ops::add(ops::add(w_gate(g), w_skip(skip)), w_lower(lower)));
  return ops::sigmoid(psi(a));
}

template <typename T>
Tensor<T> AttentionBlock<T>::operator()(const Tensor<T>& skip, const Tensor<T>& gate, const Tensor<T>& lower) const {
  return ops::mul_channel_broadcast(skip, coefficients(skip, gate, lower));
}

template <typename T>
BaUnet<T>::BaUnet(const ArchConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  ParameterRegistry<T> reg(rng);
  const std::size_t c = config_.base_channels;
  const std::size_t ch[3] = {c, 2 * c, 4 * c};
  const std::size_t in_ch[3] = {config_.input_channels, c, 2 * c};

  for (std::size_t l = 0; l < 3; ++l) {
    const std::string name = "enc" + std::to_string(l + 1);
    encoder_.push_back({ConvUnit<T>(reg, name + ".unit", in_ch[l], ch[l]), Bottleneck<T>(reg, name + ".block", ch[l])});
  }
  bridge_unit_ = ConvUnit<T>(reg, "bridge.unit", 4 * c, 8 * c);
  bridge_block_ = Bottleneck<T>(reg, "bridge.block", 8 * c);

  decoder_.resize(3);
  for (std::size_t l = 3; l-- > 0;) {
    const std::string name = "dec" + std::to_string(l + 1);
    const std::size_t below = l == 2 ? 8 * c : ch[l + 1];
    const std::size_t inter = std::max<std::size_t>(1, ch[l] / config_.attention_inter_channels_divisor);
    auto& d = decoder_[l];
    d.up = ConvLayer<T>(reg, name + ".up", ops::conv_spec(below, ch[l], 2, 2, 0), true);
    d.attention = AttentionBlock<T>(reg, name + ".attention", ch[l], below, in_ch[l], inter);
    d.unit = ConvUnit<T>(reg, name + ".unit", 2 * ch[l], ch[l]);
    d.block = Bottleneck<T>(reg, name + ".block", ch[l]);
  }
  head_unit_ = ConvUnit<T>(reg, "head.unit", c, c);
  head_block_ = Bottleneck<T>(reg, "head.block", c);
  head_out_ = ConvLayer<T>(reg, "head.out", ops::conv_spec(c, config_.output_channels, 1, 1, 0));
  const T prior_logit = static_cast<T>(std::log(kForegroundPrior / (1.0 - kForegroundPrior)));
  for (auto& b : head_out_.bias->mutable_values()) b = prior_logit;
  params_ = std::move(reg.params());
}

template <typename T>
Tensor<T> BaUnet<T>::logits(const Tensor<T>& x) const {
  if (x.rank() != 5 || x.dim(1) != config_.input_channels)
    throw TensorError("ba_unet: expected N x " + std::to_string(config_.input_channels) + " x D x H x W input, got " +
                      dims_string(x.dims()));
  for (std::size_t a = 2; a < 5; ++a)
    if (x.dim(a) % 8 != 0 || x.dim(a) == 0)
      throw TensorError("ba_unet: spatial dims must be divisible by 8, got " + dims_string(x.dims()));

  Tensor<T> skip[3], lower[3];
  Tensor<T> h = x;
  for (std::size_t l = 0; l < 3; ++l) {
    lower[l] = h;
    skip[l] = encoder_[l].block(encoder_[l].unit(h));
    h = ops::maxpool3d(skip[l]);
  }
  h = bridge_block_(bridge_unit_(h));
  for (std::size_t l = 3; l-- > 0;) {
    const auto& d = decoder_[l];
    const auto up = d.up(h);
    const auto gated = d.attention(skip[l], h, lower[l]);
    h = d.block(d.unit(ops::concat_channels(gated, up)));
  }
  return head_out_(head_block_(head_unit_(h)));
}

template <typename T>
Tensor<T> BaUnet<T>::forward(const Tensor<T>& x) const {
  return ops::sigmoid(logits(x));
}

template <typename T>
std::size_t BaUnet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void BaUnet<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
std::vector<AttentionBlock<T>*> BaUnet<T>::attention_blocks() {
  std::vector<AttentionBlock<T>*> out;
  for (auto& d : decoder_) out.push_back(&d.attention);
  return out;
}

template <typename T>
std::vector<StoredTensor> BaUnet<T>::state() const {
  std::vector<StoredTensor> out;
  for (const auto& p : params_) {
    const auto v = p.tensor.values();
    std::vector<float> data(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) data[i] = static_cast<float>(v[i]);
    out.push_back({p.name, p.tensor.dims(), std::move(data), true});
  }
  return out;
}

template <typename T>
void BaUnet<T>::load_state(const std::vector<StoredTensor>& tensors) {
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  for (auto& p : params_) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw TensorError("checkpoint: missing parameter '" + p.name + "'");
    if (it->second->dims != p.tensor.dims())
      throw TensorError("checkpoint: parameter '" + p.name + "' has dims " + dims_string(it->second->dims) + ", model expects " +
                        dims_string(p.tensor.dims()));
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->data[i]);
  }
  if (by_name.size() != params_.size()) throw TensorError("checkpoint: holds tensors the architecture does not define");
}

template <typename T>
void BaUnet<T>::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_json(config_.to_json(), dir / "arch.json");
  save_tensors(state(), dir);
}

template <typename T>
BaUnet<T> BaUnet<T>::load(const std::filesystem::path& dir) {
  BaUnet<T> model(ArchConfig::from_json(read_json(dir / "arch.json")), 0);
  model.load_state(load_tensors(dir));
  return model;
}

template class ParameterRegistry<float>;
template class ParameterRegistry<double>;
template struct ConvLayer<float>;
template struct ConvLayer<double>;
template struct ConvUnit<float>;
template struct ConvUnit<double>;
template struct Bottleneck<float>;
template struct Bottleneck<double>;
template struct AttentionBlock<float>;
template struct AttentionBlock<double>;
template class BaUnet<float>;
template class BaUnet<double>;

}  // namespace boxseg
