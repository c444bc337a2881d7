#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "boxseg/ba_unet.hpp"
#include "oracles.hpp"

using namespace boxseg;
using TD = Tensor<double>;

namespace {

constexpr double kBlockTolerance = 1e-6;
constexpr double kNetworkTolerance = 1e-4;

std::size_t conv_params(std::size_t in, std::size_t out, std::size_t k, bool bias = true) {
  return out * in * k * k * k + (bias ? out : 0);
}
std::size_t unit_params(std::size_t in, std::size_t out) { return conv_params(in, out, 3); }
std::size_t block_params(std::size_t ch) {
  const std::size_t r = std::max<std::size_t>(1, ch / 2);
  return conv_params(ch, r, 1) + conv_params(r, r, 3) + conv_params(r, ch, 1);
}
std::size_t attention_params(std::size_t skip, std::size_t gate, std::size_t lower, std::size_t inter) {
  return gate * inter + skip * inter + inter + lower * inter + inter + 1;
}

std::size_t expected_params(const ArchConfig& a) {
  const std::size_t c = a.base_channels;
  const std::size_t ch[3] = {c, 2 * c, 4 * c}, in[3] = {a.input_channels, c, 2 * c};
  std::size_t n = 0;
  for (int l = 0; l < 3; ++l) n += unit_params(in[l], ch[l]) + block_params(ch[l]);
  n += unit_params(4 * c, 8 * c) + block_params(8 * c);
  for (int l = 0; l < 3; ++l) {
    const std::size_t below = l == 2 ? 8 * c : ch[l + 1];
    const std::size_t inter = std::max<std::size_t>(1, ch[l] / a.attention_inter_channels_divisor);
    n += conv_params(below, ch[l], 2) + attention_params(ch[l], below, in[l], inter) + unit_params(2 * ch[l], ch[l]) +
         block_params(ch[l]);
  }
  n += unit_params(c, c) + block_params(c) + conv_params(c, a.output_channels, 1);
  return n;
}

double check_params(std::vector<NamedParameter<double>>& params, const std::function<TD()>& build, std::size_t stride) {
  oracle::Probe probe;
  for (auto& p : params) p.tensor.zero_grad();
  probe.loss(build()).backward();
  oracle::GradCheck result;
  for (auto& p : params) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < p.tensor.numel(); i += stride) idx.push_back(i);
    oracle::central_differences(p.tensor, [&] { return probe(build()); }, 1e-6, result, &idx);
  }
  EXPECT_GT(result.checked, 0u);
  return result.max_error;
}

}  // namespace

TEST(ArchConfig, Validation) {
  ArchConfig a;
  EXPECT_NO_THROW(a.validate());
  a.base_channels = 0;
  EXPECT_THROW(a.validate(), std::exception);
  a = ArchConfig{};
  a.levels = 4;
  EXPECT_THROW(a.validate(), std::exception);
  a = ArchConfig{};
  a.base_channels = 6;
  EXPECT_EQ(ArchConfig::from_json(a.to_json()), a);
}

TEST(BaUnet, ParameterCountMatchesChannelPlan) {
  for (std::size_t c : {1u, 2u, 4u, 8u}) {
    ArchConfig a;
    a.base_channels = c;
    EXPECT_EQ(BaUnet<float>(a, 0).parameter_count(), expected_params(a)) << "base " << c;
  }
  ArchConfig a;
  a.attention_inter_channels_divisor = 4;
  EXPECT_EQ(BaUnet<float>(a, 0).parameter_count(), expected_params(a));
}

TEST(BaUnet, ShapesAndRange) {
  ArchConfig a;
  a.base_channels = 2;
  BaUnet<float> net(a, 3);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<float> v(8 * 16 * 8);
  for (auto& e : v) e = u(rng);
  const auto y = net.forward(Tensor<float>::from({1, 1, 8, 16, 8}, v));
  EXPECT_EQ(y.dims(), (Dims{1, 1, 8, 16, 8}));
  for (auto e : y.values()) {
    EXPECT_GT(e, 0.0f);
    EXPECT_LT(e, 1.0f);
  }
  EXPECT_THROW(net.forward(Tensor<float>::zeros({1, 1, 8, 12, 8})), TensorError);
  EXPECT_THROW(net.forward(Tensor<float>::zeros({1, 2, 8, 8, 8})), TensorError);
}

TEST(BaUnet, ZeroHeadGivesHalf) {
  ArchConfig a;
  a.base_channels = 2;
  BaUnet<float> net(a, 4);
  for (auto& w : net.head_conv().weight.mutable_values()) w = 0;
  for (auto& b : net.head_conv().bias->mutable_values()) b = 0;
  const auto y = net.forward(Tensor<float>::zeros({1, 1, 8, 8, 8}));
  for (auto e : y.values()) EXPECT_EQ(e, 0.5f);
}

TEST(BaUnet, SeedDeterminesInitialisation) {
  ArchConfig a;
  a.base_channels = 2;
  BaUnet<float> x(a, 9), y(a, 9), z(a, 10);
  bool differs = false;
  for (std::size_t i = 0; i < x.parameters().size(); ++i) {
    const auto p = x.parameters()[i].tensor.values(), q = y.parameters()[i].tensor.values(),
               r = z.parameters()[i].tensor.values();
    EXPECT_TRUE(std::equal(p.begin(), p.end(), q.begin()));
    differs |= !std::equal(p.begin(), p.end(), r.begin());
  }
  EXPECT_TRUE(differs);
}

TEST(AttentionBlock, ZeroProjectionGivesHalfAndSaturationPassesSkip) {
  std::mt19937_64 rng(2);
  ParameterRegistry<double> reg(rng);
  AttentionBlock<double> att(reg, "att", 3, 4, 2, 2);
  auto skip = oracle::random_tensor(rng, {1, 3, 4, 4, 2}, -1, 1, false);
  auto gate = oracle::random_tensor(rng, {1, 4, 2, 2, 1}, -1, 1, false);
  auto lower = oracle::random_tensor(rng, {1, 2, 4, 4, 2}, -1, 1, false);

  for (auto& w : att.psi.weight.mutable_values()) w = 0;
  att.psi.bias->mutable_values()[0] = 0;
  const auto half = att.coefficients(skip, gate, lower);
  for (auto e : half.values()) EXPECT_EQ(e, 0.5);

  att.psi.bias->mutable_values()[0] = 50;
  const auto out = att(skip, gate, lower);
  for (std::size_t i = 0; i < skip.numel(); ++i) EXPECT_NEAR(out.values()[i], skip.values()[i], 1e-15);

  att.psi.bias->mutable_values()[0] = -50;
  const auto closed = att(skip, gate, lower);
  for (auto e : closed.values()) EXPECT_NEAR(e, 0.0, 1e-20);

  EXPECT_THROW(att(skip, oracle::random_tensor(rng, {1, 4, 4, 4, 2}, -1, 1, false), lower), TensorError);
}

TEST(ConvUnit, IdentityKernelIsRelu) {
  std::mt19937_64 rng(3);
  ParameterRegistry<double> reg(rng);
  ConvUnit<double> unit(reg, "u", 1, 1);
  auto w = unit.conv.weight.mutable_values();
  std::fill(w.begin(), w.end(), 0.0);
  w[13] = 1.0;  // centre tap
  unit.conv.bias->mutable_values()[0] = 0;
  auto x = oracle::random_tensor(rng, {1, 1, 3, 4, 5}, -1, 1, false);
  const auto y = unit(x);
  const double scale = 1.0 / std::sqrt(1.0 + ops::FrozenBatchNorm::kEps);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.values()[i], std::max(0.0, x.values()[i]) * scale, 1e-15);
}

TEST(Bottleneck, ZeroWeightsLeaveResidualPath) {
  std::mt19937_64 rng(7);
  ParameterRegistry<double> reg(rng);
  Bottleneck<double> block(reg, "b", 4);
  for (auto& p : reg.params())
    for (auto& v : p.tensor.mutable_values()) v = 0;
  const auto x = oracle::random_tensor(rng, {1, 4, 2, 2, 2}, -1, 1, false);
  const auto y = block(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.values()[i], std::max(0.0, x.values()[i]));
}

TEST(BlockGradients, ConvUnitBottleneckAttention) {
  std::mt19937_64 rng(4);
  ParameterRegistry<double> reg(rng);
  ConvUnit<double> unit(reg, "unit", 2, 3);
  Bottleneck<double> block(reg, "block", 4);
  AttentionBlock<double> att(reg, "att", 3, 4, 2, 2);
  auto& params = reg.params();
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& p : params)
    for (auto& v : p.tensor.mutable_values()) v = u(rng);

  auto x = oracle::random_tensor(rng, {1, 2, 4, 2, 4});
  auto xb = oracle::random_tensor(rng, {1, 4, 2, 4, 2});
  auto skip = oracle::random_tensor(rng, {1, 3, 4, 4, 2});
  auto gate = oracle::random_tensor(rng, {1, 4, 2, 2, 1});
  auto lower = oracle::random_tensor(rng, {1, 2, 4, 4, 2});

  std::vector<NamedParameter<double>> inputs{{"x", x}, {"xb", xb}, {"skip", skip}, {"gate", gate}, {"lower", lower}};
  for (auto& p : params) inputs.push_back(p);
  EXPECT_LT(check_params(inputs, [&] { return unit(x); }, 1), kBlockTolerance);
  EXPECT_LT(check_params(inputs, [&] { return block(xb); }, 1), kBlockTolerance);
  EXPECT_LT(check_params(inputs, [&] { return att(skip, gate, lower); }, 1), kBlockTolerance);
}

TEST(BlockGradients, TinyNetworkSampledParameters) {
  ArchConfig a;
  a.base_channels = 2;
  BaUnet<double> net(a, 5);
  std::mt19937_64 rng(6);
  auto x = oracle::random_tensor(rng, {1, 1, 8, 8, 8}, 0, 1, false);
  EXPECT_LT(check_params(net.parameters(), [&] { return net.forward(x); }, 7), kNetworkTolerance);
}

TEST(BaUnet, SaveLoadRoundTrip) {
  ArchConfig a;
  a.base_channels = 2;
  const BaUnet<float> net(a, 11);
  const auto dir = std::filesystem::temp_directory_path() / "boxseg_test_ba_unet";
  std::filesystem::remove_all(dir);
  net.save(dir);
  const auto back = BaUnet<float>::load(dir);
  EXPECT_EQ(back.config(), a);
  ASSERT_EQ(back.parameters().size(), net.parameters().size());
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    EXPECT_EQ(back.parameters()[i].name, net.parameters()[i].name);
    const auto p = net.parameters()[i].tensor.values(), q = back.parameters()[i].tensor.values();
    EXPECT_TRUE(std::equal(p.begin(), p.end(), q.begin(), q.end()));
  }
  auto state = net.state();
  state.pop_back();
  BaUnet<float> other(a, 0);
  EXPECT_THROW(other.load_state(state), TensorError);
  ArchConfig bigger = a;
  bigger.base_channels = 3;
  BaUnet<float> wrong(bigger, 0);
  EXPECT_THROW(wrong.load_state(net.state()), TensorError);
}
