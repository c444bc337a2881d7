#include "boxseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "boxseg/parallel.hpp"

namespace boxseg::ops {

void ConvSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) throw TensorError("conv spec: channel counts must be >= 1");
  for (int a = 0; a < 3; ++a)
    if (kernel[a] < 1 || stride[a] < 1) throw TensorError("conv spec: kernel and stride must be >= 1");
}

Dims ConvSpec::conv_weight_dims() const { return {out_channels, in_channels, kernel[0], kernel[1], kernel[2]}; }
Dims ConvSpec::transposed_weight_dims() const { return {in_channels, out_channels, kernel[0], kernel[1], kernel[2]}; }

ConvSpec conv_spec(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad, bool bias) {
  return {in, out, {k, k, k}, {stride, stride, stride}, {pad, pad, pad}, bias};
}

Triple conv_output_size(const Triple& in, const ConvSpec& spec) {
  Triple out{};
  for (int a = 0; a < 3; ++a) {
    const long span = static_cast<long>(in[a] + 2 * spec.padding[a]) - static_cast<long>(spec.kernel[a]);
    if (span < 0) throw TensorError("conv3d: output dim < 1 (input too small for kernel)");
    out[a] = static_cast<std::size_t>(span) / spec.stride[a] + 1;
  }
  return out;
}

Triple transposed_output_size(const Triple& in, const ConvSpec& spec) {
  Triple out{};
  for (int a = 0; a < 3; ++a) {
    const long d = static_cast<long>((in[a] - 1) * spec.stride[a] + spec.kernel[a]) - 2 * static_cast<long>(spec.padding[a]);
    if (d < 1) throw TensorError("conv_transpose3d: output dim < 1");
    out[a] = static_cast<std::size_t>(d);
  }
  return out;
}

namespace {

Triple spatial(const Dims& d) { return {d[2], d[3], d[4]}; }
std::size_t volume_of(const Triple& t) { return t[0] * t[1] * t[2]; }

void require_5d(const Dims& d, const char* op) {
  if (d.size() != 5) throw TensorError(std::string(op) + ": expected N x C x D x H x W, got " + dims_string(d));
}

// Conv geometry in the forward-conv frame: `x` has cx channels over `in`,
// `y` has cy channels over `out`, weights are (cy, cx, k...).
struct Geometry {
  std::size_t n, cx, cy;
  Triple in, out, k, s, p;
};

// Output indices o with 0 <= o*s + off < extent, as [lo, hi).
struct Range {
  long lo, hi;
};
Range valid(long out_count, long stride, long off, long extent) {
  long lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  long hi = extent - 1 - off < 0 ? 0 : (extent - 1 - off) / stride + 1;
  return {lo, std::min(hi, out_count)};
}

template <typename T>
void conv_forward_kernel(const T* x, const T* w, const T* bias, T* y, const Geometry& g) {
  const std::size_t in_vol = volume_of(g.in), out_vol = volume_of(g.out);
  const long ID = static_cast<long>(g.in[0]), IH = static_cast<long>(g.in[1]), IW = static_cast<long>(g.in[2]);
  const long OD = static_cast<long>(g.out[0]), OH = static_cast<long>(g.out[1]), OW = static_cast<long>(g.out[2]);
  const long sd = static_cast<long>(g.s[0]), sh = static_cast<long>(g.s[1]), sw = static_cast<long>(g.s[2]);
  const std::size_t ksz = volume_of(g.k);
  parallel_for(g.n * g.cy, [&](std::size_t job) {
    const std::size_t n = job / g.cy, oc = job % g.cy;
    T* yb = y + job * out_vol;
    std::fill(yb, yb + out_vol, bias ? bias[oc] : T(0));
    for (std::size_t ic = 0; ic < g.cx; ++ic) {
      const T* xb = x + (n * g.cx + ic) * in_vol;
      const T* wk = w + (oc * g.cx + ic) * ksz;
      for (std::size_t kd = 0; kd < g.k[0]; ++kd)
        for (std::size_t kh = 0; kh < g.k[1]; ++kh)
          for (std::size_t kw = 0; kw < g.k[2]; ++kw) {
            const T wv = wk[(kd * g.k[1] + kh) * g.k[2] + kw];
            const long offd = static_cast<long>(kd) - static_cast<long>(g.p[0]);
            const long offh = static_cast<long>(kh) - static_cast<long>(g.p[1]);
            const long offw = static_cast<long>(kw) - static_cast<long>(g.p[2]);
            const Range rd = valid(OD, sd, offd, ID), rh = valid(OH, sh, offh, IH), rw = valid(OW, sw, offw, IW);
            for (long od = rd.lo; od < rd.hi; ++od)
              for (long oh = rh.lo; oh < rh.hi; ++oh) {
                T* yr = yb + (od * OH + oh) * OW;
                const T* xr = xb + ((od * sd + offd) * IH + (oh * sh + offh)) * IW;
                for (long ow = rw.lo; ow < rw.hi; ++ow) yr[ow] += wv * xr[ow * sw + offw];
              }
          }
    }
  });
}

// dx += conv^T(dy): scatter of each output gradient through the kernel.
template <typename T>
void conv_backward_data_kernel(const T* dy, const T* w, T* dx, const Geometry& g) {
  const std::size_t in_vol = volume_of(g.in), out_vol = volume_of(g.out);
  const long ID = static_cast<long>(g.in[0]), IH = static_cast<long>(g.in[1]), IW = static_cast<long>(g.in[2]);
  const long OD = static_cast<long>(g.out[0]), OH = static_cast<long>(g.out[1]), OW = static_cast<long>(g.out[2]);
  const long sd = static_cast<long>(g.s[0]), sh = static_cast<long>(g.s[1]), sw = static_cast<long>(g.s[2]);
  const std::size_t ksz = volume_of(g.k);
  parallel_for(g.n * g.cx, [&](std::size_t job) {
    const std::size_t n = job / g.cx, ic = job % g.cx;
    T* xb = dx + job * in_vol;
    for (std::size_t oc = 0; oc < g.cy; ++oc) {
      const T* yb = dy + (n * g.cy + oc) * out_vol;
      const T* wk = w + (oc * g.cx + ic) * ksz;
      for (std::size_t kd = 0; kd < g.k[0]; ++kd)
        for (std::size_t kh = 0; kh < g.k[1]; ++kh)
          for (std::size_t kw = 0; kw < g.k[2]; ++kw) {
            const T wv = wk[(kd * g.k[1] + kh) * g.k[2] + kw];
            const long offd = static_cast<long>(kd) - static_cast<long>(g.p[0]);
            const long offh = static_cast<long>(kh) - static_cast<long>(g.p[1]);
            const long offw = static_cast<long>(kw) - static_cast<long>(g.p[2]);
            const Range rd = valid(OD, sd, offd, ID), rh = valid(OH, sh, offh, IH), rw = valid(OW, sw, offw, IW);
            for (long od = rd.lo; od < rd.hi; ++od)
              for (long oh = rh.lo; oh < rh.hi; ++oh) {
                const T* yr = yb + (od * OH + oh) * OW;
                T* xr = xb + ((od * sd + offd) * IH + (oh * sh + offh)) * IW;
                for (long ow = rw.lo; ow < rw.hi; ++ow) xr[ow * sw + offw] += wv * yr[ow];
              }
          }
    }
  });
}

// dw += sum over batch and output positions of dy * shifted x.
template <typename T>
void conv_backward_weight_kernel(const T* x, const T* dy, T* dw, const Geometry& g) {
  const std::size_t in_vol = volume_of(g.in), out_vol = volume_of(g.out);
  const long ID = static_cast<long>(g.in[0]), IH = static_cast<long>(g.in[1]), IW = static_cast<long>(g.in[2]);
  const long OD = static_cast<long>(g.out[0]), OH = static_cast<long>(g.out[1]), OW = static_cast<long>(g.out[2]);
  const long sd = static_cast<long>(g.s[0]), sh = static_cast<long>(g.s[1]), sw = static_cast<long>(g.s[2]);
  const std::size_t ksz = volume_of(g.k);
  parallel_for(g.cy, [&](std::size_t oc) {
    for (std::size_t ic = 0; ic < g.cx; ++ic) {
      T* wk = dw + (oc * g.cx + ic) * ksz;
      for (std::size_t kd = 0; kd < g.k[0]; ++kd)
        for (std::size_t kh = 0; kh < g.k[1]; ++kh)
          for (std::size_t kw = 0; kw < g.k[2]; ++kw) {
            const long offd = static_cast<long>(kd) - static_cast<long>(g.p[0]);
            const long offh = static_cast<long>(kh) - static_cast<long>(g.p[1]);
            const long offw = static_cast<long>(kw) - static_cast<long>(g.p[2]);
            const Range rd = valid(OD, sd, offd, ID), rh = valid(OH, sh, offh, IH), rw = valid(OW, sw, offw, IW);
            T acc = 0;
            for (std::size_t n = 0; n < g.n; ++n) {
              const T* xb = x + (n * g.cx + ic) * in_vol;
              const T* yb = dy + (n * g.cy + oc) * out_vol;
              for (long od = rd.lo; od < rd.hi; ++od)
                for (long oh = rh.lo; oh < rh.hi; ++oh) {
                  const T* yr = yb + (od * OH + oh) * OW;
                  const T* xr = xb + ((od * sd + offd) * IH + (oh * sh + offh)) * IW;
                  for (long ow = rw.lo; ow < rw.hi; ++ow) acc += yr[ow] * xr[ow * sw + offw];
                }
            }
            wk[(kd * g.k[1] + kh) * g.k[2] + kw] += acc;
          }
    }
  });
}

template <typename T>
void bias_backward(const T* dy, T* db, std::size_t n, std::size_t channels, std::size_t vol) {
  for (std::size_t c = 0; c < channels; ++c) {
    T acc = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = dy + (b * channels + c) * vol;
      for (std::size_t i = 0; i < vol; ++i) acc += p[i];
    }
    db[c] += acc;
  }
}

template <typename T>
void check_weight(const Tensor<T>& weight, const Dims& expected, const std::optional<Tensor<T>>& bias, std::size_t bias_len,
                  bool has_bias, const char* op) {
  if (weight.dims() != expected)
    throw TensorError(std::string(op) + ": weight dims " + dims_string(weight.dims()) + ", expected " + dims_string(expected));
  if (has_bias != bias.has_value()) throw TensorError(std::string(op) + ": bias presence does not match spec.has_bias");
  if (bias && bias->dims() != Dims{bias_len}) throw TensorError(std::string(op) + ": bias must have one entry per output channel");
}

template <typename T>
T* grad_of(TensorNode<T>& self, std::size_t parent) {
  auto& p = self.parents.at(parent);
  return p->requires_grad ? p->grad.data() : nullptr;
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias, const ConvSpec& spec) {
  spec.validate();
  require_5d(x.dims(), "conv3d");
  if (x.dim(1) != spec.in_channels)
    throw TensorError("conv3d: channel mismatch (input has " + std::to_string(x.dim(1)) + ", spec expects " +
                      std::to_string(spec.in_channels) + ")");
  check_weight(weight, spec.conv_weight_dims(), bias, spec.out_channels, spec.has_bias, "conv3d");

  const Geometry g{x.dim(0), spec.in_channels, spec.out_channels, spatial(x.dims()), conv_output_size(spatial(x.dims()), spec),
                   spec.kernel, spec.stride, spec.padding};
  Dims out_dims{g.n, g.cy, g.out[0], g.out[1], g.out[2]};
  std::vector<T> y(dims_numel(out_dims));
  conv_forward_kernel(x.values().data(), weight.values().data(), bias ? bias->values().data() : nullptr, y.data(), g);

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return Tensor<T>::make_result(std::move(out_dims), std::move(y), std::move(inputs), [g](TensorNode<T>& self) {
    const T* dy = self.grad.data();
    const T* xv = self.parents[0]->values.data();
    const T* wv = self.parents[1]->values.data();
    if (T* dx = grad_of(self, 0)) conv_backward_data_kernel(dy, wv, dx, g);
    if (T* dw = grad_of(self, 1)) conv_backward_weight_kernel(xv, dy, dw, g);
    if (self.parents.size() > 2)
      if (T* db = grad_of(self, 2)) bias_backward(dy, db, g.n, g.cy, volume_of(g.out));
  });
}

template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                           const ConvSpec& spec) {
  spec.validate();
  require_5d(x.dims(), "conv_transpose3d");
  if (x.dim(1) != spec.in_channels)
    throw TensorError("conv_transpose3d: channel mismatch (input has " + std::to_string(x.dim(1)) + ", spec expects " +
                      std::to_string(spec.in_channels) + ")");
  check_weight(weight, spec.transposed_weight_dims(), bias, spec.out_channels, spec.has_bias, "conv_transpose3d");

  // Forward-conv frame: the transposed output plays the conv input.
  const Triple out_size = transposed_output_size(spatial(x.dims()), spec);
  const Geometry g{x.dim(0), spec.out_channels, spec.in_channels, out_size, spatial(x.dims()),
                   spec.kernel, spec.stride, spec.padding};
  Dims out_dims{g.n, spec.out_channels, out_size[0], out_size[1], out_size[2]};
  std::vector<T> y(dims_numel(out_dims), T(0));
  conv_backward_data_kernel(x.values().data(), weight.values().data(), y.data(), g);
  if (bias) {
    const auto b = bias->values();
    const std::size_t vol = volume_of(out_size);
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t c = 0; c < spec.out_channels; ++c) {
        T* p = y.data() + (n * spec.out_channels + c) * vol;
        for (std::size_t i = 0; i < vol; ++i) p[i] += b[c];
      }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return Tensor<T>::make_result(std::move(out_dims), std::move(y), std::move(inputs), [g](TensorNode<T>& self) {
    const T* gy = self.grad.data();
    const T* xv = self.parents[0]->values.data();
    const T* wv = self.parents[1]->values.data();
    if (T* dx = grad_of(self, 0)) {
      std::vector<T> tmp(self.parents[0]->values.size());
      conv_forward_kernel(gy, wv, static_cast<const T*>(nullptr), tmp.data(), g);
      for (std::size_t i = 0; i < tmp.size(); ++i) dx[i] += tmp[i];
    }
    if (T* dw = grad_of(self, 1)) conv_backward_weight_kernel(gy, xv, dw, g);
    if (self.parents.size() > 2)
      if (T* db = grad_of(self, 2)) bias_backward(gy, db, g.n, g.cx, volume_of(g.in));
  });
}

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x) {
  require_5d(x.dims(), "maxpool3d");
  const auto& d = x.dims();
  for (int a = 2; a < 5; ++a)
    if (d[static_cast<std::size_t>(a)] % 2 != 0)
      throw TensorError("maxpool3d: odd spatial dim " + dims_string(d) + "; pad or resize upstream to even sizes");

  const std::size_t planes = d[0] * d[1], D = d[2], H = d[3], W = d[4];
  const std::size_t OD = D / 2, OH = H / 2, OW = W / 2;
  Dims out_dims{d[0], d[1], OD, OH, OW};
  std::vector<T> y(dims_numel(out_dims));
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.size());
  const auto xv = x.values();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t od = 0; od < OD; ++od)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow) {
          std::size_t best = 0;
          bool first = true;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b)
              for (std::size_t c = 0; c < 2; ++c) {
                const std::size_t idx = ((pl * D + 2 * od + a) * H + 2 * oh + b) * W + 2 * ow + c;
                if (first || xv[idx] > xv[best]) {
                  best = idx;
                  first = false;
                }
              }
          const std::size_t o = ((pl * OD + od) * OH + oh) * OW + ow;
          y[o] = xv[best];
          (*argmax)[o] = best;
        }
  return Tensor<T>::make_result(std::move(out_dims), std::move(y), {x}, [argmax](TensorNode<T>& self) {
    T* dx = grad_of(self, 0);
    for (std::size_t o = 0; o < argmax->size(); ++o) dx[(*argmax)[o]] += self.grad[o];
  });
}

FrozenBatchNorm FrozenBatchNorm::identity(std::size_t channels) {
  return {std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0),
          std::vector<double>(channels, 1.0)};
}

template <typename T>
Tensor<T> frozen_batchnorm(const Tensor<T>& x, const FrozenBatchNorm& bn) {
  require_5d(x.dims(), "frozen_batchnorm");
  const std::size_t C = x.dim(1);
  if (bn.gamma.size() != C || bn.beta.size() != C || bn.mean.size() != C || bn.var.size() != C)
    throw TensorError("frozen_batchnorm: statistics length does not match channel count " + std::to_string(C));
  std::vector<T> scale(C), shift(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (bn.var[c] < 0) throw TensorError("frozen_batchnorm: negative variance");
    const double s = bn.gamma[c] / std::sqrt(bn.var[c] + FrozenBatchNorm::kEps);
    scale[c] = static_cast<T>(s);
    shift[c] = static_cast<T>(bn.beta[c] - s * bn.mean[c]);
  }
  const std::size_t vol = x.dim(2) * x.dim(3) * x.dim(4);
  const auto xv = x.values();
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t c = (i / vol) % C;
    y[i] = scale[c] * xv[i] + shift[c];
  }
  return Tensor<T>::make_result(x.dims(), std::move(y), {x}, [scale, vol, C](TensorNode<T>& self) {
    T* dx = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += scale[(i / vol) % C] * self.grad[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  const auto xv = x.values();
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  return Tensor<T>::make_result(x.dims(), std::move(y), {x}, [](TensorNode<T>& self) {
    T* dx = grad_of(self, 0);
    const auto& xv = self.parents[0]->values;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (xv[i] > T(0)) dx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const auto xv = x.values();
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-xv[i]));
  return Tensor<T>::make_result(x.dims(), std::move(y), {x}, [](TensorNode<T>& self) {
    T* dx = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T s = self.values[i];
      dx[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims() != b.dims()) throw TensorError("add: shape mismatch " + dims_string(a.dims()) + " vs " + dims_string(b.dims()));
  const auto av = a.values(), bv = b.values();
  std::vector<T> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return Tensor<T>::make_result(a.dims(), std::move(y), {a, b}, [](TensorNode<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (T* d = grad_of(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims() != b.dims()) throw TensorError("mul: shape mismatch " + dims_string(a.dims()) + " vs " + dims_string(b.dims()));
  const auto av = a.values(), bv = b.values();
  std::vector<T> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return Tensor<T>::make_result(a.dims(), std::move(y), {a, b}, [](TensorNode<T>& self) {
    const auto& av = self.parents[0]->values;
    const auto& bv = self.parents[1]->values;
    if (T* da = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i] * bv[i];
    if (T* db = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) db[i] += self.grad[i] * av[i];
  });
}

template <typename T>
Tensor<T> mul_channel_broadcast(const Tensor<T>& x, const Tensor<T>& gate) {
  require_5d(x.dims(), "mul_channel_broadcast");
  require_5d(gate.dims(), "mul_channel_broadcast");
  if (gate.dim(1) != 1 || gate.dim(0) != x.dim(0) || spatial(gate.dims()) != spatial(x.dims()))
    throw TensorError("mul_channel_broadcast: gate " + dims_string(gate.dims()) + " incompatible with " + dims_string(x.dims()));
  const std::size_t C = x.dim(1), vol = volume_of(spatial(x.dims()));
  const auto xv = x.values(), gv = gate.values();
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t n = i / (C * vol), v = i % vol;
    y[i] = xv[i] * gv[n * vol + v];
  }
  return Tensor<T>::make_result(x.dims(), std::move(y), {x, gate}, [C, vol](TensorNode<T>& self) {
    const auto& xv = self.parents[0]->values;
    const auto& gv = self.parents[1]->values;
    T* dx = grad_of(self, 0);
    T* dg = grad_of(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const std::size_t g = (i / (C * vol)) * vol + i % vol;
      if (dx) dx[i] += self.grad[i] * gv[g];
      if (dg) dg[g] += self.grad[i] * xv[i];
    }
  });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_5d(a.dims(), "concat_channels");
  require_5d(b.dims(), "concat_channels");
  if (a.dim(0) != b.dim(0) || spatial(a.dims()) != spatial(b.dims()))
    throw TensorError("concat_channels: shape mismatch " + dims_string(a.dims()) + " vs " + dims_string(b.dims()));
  const std::size_t N = a.dim(0), ca = a.dim(1), cb = b.dim(1), vol = volume_of(spatial(a.dims()));
  Dims out_dims{N, ca + cb, a.dim(2), a.dim(3), a.dim(4)};
  std::vector<T> y(dims_numel(out_dims));
  const auto av = a.values(), bv = b.values();
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(n * ca * vol), ca * vol, y.begin() + static_cast<std::ptrdiff_t>(n * (ca + cb) * vol));
    std::copy_n(bv.begin() + static_cast<std::ptrdiff_t>(n * cb * vol), cb * vol,
                y.begin() + static_cast<std::ptrdiff_t>((n * (ca + cb) + ca) * vol));
  }
  return Tensor<T>::make_result(std::move(out_dims), std::move(y), {a, b}, [N, ca, cb, vol](TensorNode<T>& self) {
    T* da = grad_of(self, 0);
    T* db = grad_of(self, 1);
    for (std::size_t n = 0; n < N; ++n) {
      const T* g = self.grad.data() + n * (ca + cb) * vol;
      if (da)
        for (std::size_t i = 0; i < ca * vol; ++i) da[n * ca * vol + i] += g[i];
      if (db)
        for (std::size_t i = 0; i < cb * vol; ++i) db[n * cb * vol + i] += g[ca * vol + i];
    }
  });
}

namespace {

struct LinearTap {
  std::size_t lo, hi;
  double w_hi;
};

std::vector<LinearTap> half_pixel_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = std::clamp((static_cast<double>(o) + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    taps[o] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, const Triple& out_size) {
  require_5d(x.dims(), "upsample_trilinear");
  for (auto s : out_size)
    if (s < 1) throw TensorError("upsample_trilinear: output dims must be >= 1");
  const Triple in = spatial(x.dims());
  const auto td = half_pixel_taps(in[0], out_size[0]), th = half_pixel_taps(in[1], out_size[1]),
             tw = half_pixel_taps(in[2], out_size[2]);
  const std::size_t planes = x.dim(0) * x.dim(1), in_vol = volume_of(in), out_vol = volume_of(out_size);
  Dims out_dims{x.dim(0), x.dim(1), out_size[0], out_size[1], out_size[2]};

  // Visits the eight (input index, weight) taps of every output voxel.
  auto for_taps = [=](auto&& fn) {
    for (std::size_t pl = 0; pl < planes; ++pl)
      for (std::size_t d = 0; d < out_size[0]; ++d)
        for (std::size_t h = 0; h < out_size[1]; ++h)
          for (std::size_t w = 0; w < out_size[2]; ++w) {
            const std::size_t o = pl * out_vol + (d * out_size[1] + h) * out_size[2] + w;
            const std::size_t zd[2] = {td[d].lo, td[d].hi}, zh[2] = {th[h].lo, th[h].hi}, zw[2] = {tw[w].lo, tw[w].hi};
            const double wd[2] = {1 - td[d].w_hi, td[d].w_hi}, wh[2] = {1 - th[h].w_hi, th[h].w_hi},
                         ww[2] = {1 - tw[w].w_hi, tw[w].w_hi};
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int c = 0; c < 2; ++c)
                  fn(o, pl * in_vol + (zd[a] * in[1] + zh[b]) * in[2] + zw[c], static_cast<T>(wd[a] * wh[b] * ww[c]));
          }
  };

  std::vector<T> y(dims_numel(out_dims), T(0));
  const auto xv = x.values();
  for_taps([&](std::size_t o, std::size_t i, T wt) { y[o] += wt * xv[i]; });
  return Tensor<T>::make_result(std::move(out_dims), std::move(y), {x}, [for_taps](TensorNode<T>& self) {
    T* dx = grad_of(self, 0);
    const auto& g = self.grad;
    for_taps([&](std::size_t o, std::size_t i, T wt) { dx[i] += wt * g[o]; });
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  return Tensor<T>::make_result({1}, {acc}, {x}, [](TensorNode<T>& self) {
    T* dx = grad_of(self, 0);
    const T g = self.grad[0];
    for (std::size_t i = 0; i < self.parents[0]->values.size(); ++i) dx[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  const T n = static_cast<T>(x.numel());
  return Tensor<T>::make_result({1}, {acc / n}, {x}, [n](TensorNode<T>& self) {
    T* dx = grad_of(self, 0);
    const T g = self.grad[0] / n;
    for (std::size_t i = 0; i < self.parents[0]->values.size(); ++i) dx[i] += g;
  });
}

#define BOXSEG_INSTANTIATE_OPS(T)                                                                                   \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&, const ConvSpec&); \
  template Tensor<T> conv_transpose3d(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&,         \
                                      const ConvSpec&);                                                             \
  template Tensor<T> maxpool3d(const Tensor<T>&);                                                                   \
  template Tensor<T> frozen_batchnorm(const Tensor<T>&, const FrozenBatchNorm&);                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                                        \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                       \
  template Tensor<T> mul_channel_broadcast(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> upsample_trilinear(const Tensor<T>&, const Triple&);                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                                         \
  template Tensor<T> mean(const Tensor<T>&);

BOXSEG_INSTANTIATE_OPS(float)
BOXSEG_INSTANTIATE_OPS(double)

}  // namespace boxseg::ops
