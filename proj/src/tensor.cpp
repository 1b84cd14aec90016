#include "casl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace casl {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) {
    if (extent == 0) throw std::invalid_argument("tensor extents must be positive");
    n *= extent;
  }
  return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
  }
}

}  // namespace

namespace detail {

void TensorNode::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

}  // namespace detail

namespace detail {

thread_local bool g_grad_mode = true;

bool grad_mode_enabled() { return g_grad_mode; }

}  // namespace detail

NoGradGuard::NoGradGuard() : previous_(detail::g_grad_mode) {
  detail::g_grad_mode = false;
}

NoGradGuard::~NoGradGuard() { detail::g_grad_mode = previous_; }

Tensor make_op_result(Shape shape, std::vector<double> data, const char* op,
                      std::vector<Tensor> parents,
                      std::function<void(detail::TensorNode&)> bw) {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs_grad = false;
  if (detail::grad_mode_enabled()) {
    for (const Tensor& p : parents) needs_grad = needs_grad || p.requires_grad();
  }
  node->requires_grad = needs_grad;
  if (needs_grad) {
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(bw);
  }
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_data(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_product(shape);
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data.assign(n, value);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  std::size_t n = shape_product(shape);
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  if (values.empty()) {
    node->data.assign(n, 0.0);
  } else {
    if (values.size() != n) {
      throw std::invalid_argument("data length " + std::to_string(values.size()) +
                                  " does not match shape " +
                                  shape_to_string(node->shape));
    }
    node->data = std::move(values);
  }
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

double Tensor::value() const {
  if (!is_scalar()) {
    throw std::invalid_argument("value() requires a scalar, got shape " +
                                shape_to_string(shape()));
  }
  return node_->data[0];
}

std::span<const double> Tensor::grad() const {
  if (node_->grad.empty()) {
    throw std::logic_error("gradient not computed for this tensor");
  }
  return node_->grad;
}

std::span<double> Tensor::raw_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(a.shape(), std::move(out), "add", {a, b},
                        [an, bn](detail::TensorNode& self) {
                          if (an->requires_grad) {
                            an->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              an->grad[i] += self.grad[i];
                          }
                          if (bn->requires_grad) {
                            bn->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              bn->grad[i] += self.grad[i];
                          }
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(a.shape(), std::move(out), "sub", {a, b},
                        [an, bn](detail::TensorNode& self) {
                          if (an->requires_grad) {
                            an->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              an->grad[i] += self.grad[i];
                          }
                          if (bn->requires_grad) {
                            bn->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              bn->grad[i] -= self.grad[i];
                          }
                        });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  std::vector<double> out(a.size());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(a.shape(), std::move(out), "hadamard", {a, b},
                        [an, bn](detail::TensorNode& self) {
                          if (an->requires_grad) {
                            an->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              an->grad[i] += self.grad[i] * bn->data[i];
                          }
                          if (bn->requires_grad) {
                            bn->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              bn->grad[i] += self.grad[i] * an->data[i];
                          }
                        });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * factor;
  auto an = a.node();
  return make_op_result(a.shape(), std::move(out), "scale", {a},
                        [an, factor](detail::TensorNode& self) {
                          an->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            an->grad[i] += self.grad[i] * factor;
                        });
}

Tensor scale_by(const Tensor& v, const Tensor& s) {
  if (!s.is_scalar())
    throw std::invalid_argument("scale_by: scale must be a scalar, got " +
                                shape_to_string(s.shape()));
  const double sv = s.data()[0];
  std::vector<double> out(v.size());
  const double* pv = v.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pv[i] * sv;
  auto vn = v.node();
  auto sn = s.node();
  return make_op_result(v.shape(), std::move(out), "scale_by", {v, s},
                        [vn, sn, sv](detail::TensorNode& self) {
                          if (vn->requires_grad) {
                            vn->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              vn->grad[i] += self.grad[i] * sv;
                          }
                          if (sn->requires_grad) {
                            sn->ensure_grad();
                            double acc = 0.0;
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              acc += self.grad[i] * vn->data[i];
                            sn->grad[0] += acc;
                          }
                        });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  auto an = a.node();
  return make_op_result(a.shape(), std::move(out), "relu", {a},
                        [an](detail::TensorNode& self) {
                          an->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            if (an->data[i] > 0.0) an->grad[i] += self.grad[i];
                        });
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(pa[i]);
  auto an = a.node();
  std::vector<double> saved = out;
  return make_op_result(a.shape(), std::move(out), "sigmoid", {a},
                        [an, saved = std::move(saved)](detail::TensorNode& self) {
                          an->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            an->grad[i] += self.grad[i] * saved[i] * (1.0 - saved[i]);
                        });
}

Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.size());
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(pa[i]);
  auto an = a.node();
  std::vector<double> saved = out;
  return make_op_result(a.shape(), std::move(out), "tanh", {a},
                        [an, saved = std::move(saved)](detail::TensorNode& self) {
                          an->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            an->grad[i] += self.grad[i] * (1.0 - saved[i] * saved[i]);
                        });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw std::invalid_argument("matmul: shape mismatch " +
                                shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
  }
  const std::size_t rows = a.shape()[0];
  const std::size_t inner = a.shape()[1];
  const std::size_t cols = b.shape()[1];
  std::vector<double> out(rows * cols, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < inner; ++k) {
      const double av = pa[r * inner + k];
      const double* brow = pb + k * cols;
      double* orow = out.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) orow[c] += av * brow[c];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(
      {rows, cols}, std::move(out), "matmul", {a, b},
      [an, bn, rows, inner, cols](detail::TensorNode& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          // dA = G * B^T
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < inner; ++k) {
              double acc = 0.0;
              const double* grow = self.grad.data() + r * cols;
              const double* brow = bn->data.data() + k * cols;
              for (std::size_t c = 0; c < cols; ++c) acc += grow[c] * brow[c];
              an->grad[r * inner + k] += acc;
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          // dB = A^T * G
          for (std::size_t k = 0; k < inner; ++k)
            for (std::size_t r = 0; r < rows; ++r) {
              const double av = an->data[r * inner + k];
              const double* grow = self.grad.data() + r * cols;
              double* brow = bn->grad.data() + k * cols;
              for (std::size_t c = 0; c < cols; ++c) brow[c] += av * grow[c];
            }
        }
      });
}

Tensor matvec(const Tensor& w, const Tensor& x) {
  if (w.rank() != 2 || x.rank() != 1 || w.shape()[1] != x.shape()[0]) {
    throw std::invalid_argument("matvec: shape mismatch " +
                                shape_to_string(w.shape()) + " vs " +
                                shape_to_string(x.shape()));
  }
  const std::size_t rows = w.shape()[0];
  const std::size_t cols = w.shape()[1];
  std::vector<double> out(rows, 0.0);
  const double* pw = w.data().data();
  const double* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wrow = pw + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += wrow[c] * px[c];
    out[r] = acc;
  }
  auto wn = w.node();
  auto xn = x.node();
  return make_op_result(
      {rows}, std::move(out), "matvec", {w, x},
      [wn, xn, rows, cols](detail::TensorNode& self) {
        if (wn->requires_grad) {
          wn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const double g = self.grad[r];
            if (g == 0.0) continue;
            double* wrow = wn->grad.data() + r * cols;
            const double* px = xn->data.data();
            for (std::size_t c = 0; c < cols; ++c) wrow[c] += g * px[c];
          }
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const double g = self.grad[r];
            if (g == 0.0) continue;
            const double* wrow = wn->data.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) xn->grad[c] += g * wrow[c];
          }
        }
      });
}

Tensor affine(const Tensor& w, const Tensor& x, const Tensor& b) {
  if (w.rank() != 2 || x.rank() != 1 || w.shape()[1] != x.shape()[0] ||
      b.rank() != 1 || b.shape()[0] != w.shape()[0]) {
    throw std::invalid_argument("affine: shape mismatch " +
                                shape_to_string(w.shape()) + " x " +
                                shape_to_string(x.shape()) + " + " +
                                shape_to_string(b.shape()));
  }
  const std::size_t rows = w.shape()[0];
  const std::size_t cols = w.shape()[1];
  std::vector<double> out(rows);
  const double* pw = w.data().data();
  const double* px = x.data().data();
  const double* pb = b.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wrow = pw + r * cols;
    double acc = pb[r];
    for (std::size_t c = 0; c < cols; ++c) acc += wrow[c] * px[c];
    out[r] = acc;
  }
  auto wn = w.node();
  auto xn = x.node();
  auto bn = b.node();
  return make_op_result(
      {rows}, std::move(out), "affine", {w, x, b},
      [wn, xn, bn, rows, cols](detail::TensorNode& self) {
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) bn->grad[r] += self.grad[r];
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const double g = self.grad[r];
            if (g == 0.0) continue;
            double* wrow = wn->grad.data() + r * cols;
            const double* px = xn->data.data();
            for (std::size_t c = 0; c < cols; ++c) wrow[c] += g * px[c];
          }
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const double g = self.grad[r];
            if (g == 0.0) continue;
            const double* wrow = wn->data.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) xn->grad[c] += g * wrow[c];
          }
        }
      });
}

// ---- convolution ----

namespace {

struct ConvDims {
  std::size_t c_in, h, w, c_out, oh, ow;
  std::ptrdiff_t pad_h, pad_w;  // padding before (top/left)
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernels) {
  if (input.rank() != 3) {
    throw std::invalid_argument("conv2d: input must be [C,H,W], got " +
                                shape_to_string(input.shape()));
  }
  if (kernels.rank() != 4 || kernels.shape()[2] != 3 || kernels.shape()[3] != 3) {
    throw std::invalid_argument("conv2d: kernels must be [C_out,C_in,3,3], got " +
                                shape_to_string(kernels.shape()));
  }
  if (kernels.shape()[1] != input.shape()[0]) {
    throw std::invalid_argument("conv2d: channel mismatch, input " +
                                shape_to_string(input.shape()) + " vs kernels " +
                                shape_to_string(kernels.shape()));
  }
  ConvDims d;
  d.c_in = input.shape()[0];
  d.h = input.shape()[1];
  d.w = input.shape()[2];
  d.c_out = kernels.shape()[0];
  d.oh = (d.h + 1) / 2;
  d.ow = (d.w + 1) / 2;
  // Total padding (out-1)*2 + 3 - H, split with the shortfall at bottom/right.
  auto pad_before = [](std::size_t in, std::size_t out) {
    std::ptrdiff_t total = static_cast<std::ptrdiff_t>((out - 1) * 2 + 3) -
                           static_cast<std::ptrdiff_t>(in);
    return total > 0 ? total / 2 : 0;
  };
  d.pad_h = pad_before(d.h, d.oh);
  d.pad_w = pad_before(d.w, d.ow);
  return d;
}

}  // namespace

namespace {

// Output rows whose full 3x3 window is in bounds; rows outside the range get
// the guarded path. Same arithmetic either way.
struct ConvInterior {
  std::size_t oy_lo, oy_hi, ox_lo, ox_hi;
};

ConvInterior conv_interior(const ConvDims& d) {
  ConvInterior r;
  r.oy_lo = static_cast<std::size_t>((d.pad_h + 1) / 2);
  r.ox_lo = static_cast<std::size_t>((d.pad_w + 1) / 2);
  auto hi = [](std::size_t in, std::ptrdiff_t pad, std::size_t out) {
    std::ptrdiff_t last = (static_cast<std::ptrdiff_t>(in) + pad - 3) / 2;
    last = std::min<std::ptrdiff_t>(last, static_cast<std::ptrdiff_t>(out) - 1);
    return last < 0 ? std::size_t{0} : static_cast<std::size_t>(last + 1);
  };
  r.oy_hi = hi(d.h, d.pad_h, d.oh);
  r.ox_hi = hi(d.w, d.pad_w, d.ow);
  return r;
}

inline void conv_cell_guarded(const ConvDims& d, const double* iplane,
                              const double* kbase, std::size_t oy,
                              std::size_t ox, double gv, double* acc,
                              double* kgrad, double* igrad) {
  const std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy) * 2 - d.pad_h;
  const std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox) * 2 - d.pad_w;
  for (int ky = 0; ky < 3; ++ky) {
    const std::ptrdiff_t iy = iy0 + ky;
    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
    for (int kx = 0; kx < 3; ++kx) {
      const std::ptrdiff_t ix = ix0 + kx;
      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
      const double iv = iplane[iy * d.w + ix];
      if (acc) *acc += kbase[ky * 3 + kx] * iv;
      if (kgrad) kgrad[ky * 3 + kx] += gv * iv;
      if (igrad) igrad[iy * d.w + ix] += gv * kbase[ky * 3 + kx];
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
  ConvDims d = conv_dims(input, kernels);
  if (bias.rank() != 1 || bias.shape()[0] != d.c_out) {
    throw std::invalid_argument("conv2d: bias must be [C_out], got " +
                                shape_to_string(bias.shape()));
  }
  const ConvInterior in_region = conv_interior(d);
  std::vector<double> out(d.c_out * d.oh * d.ow);
  const double* pin = input.data().data();
  const double* pk = kernels.data().data();
  const double* pbias = bias.data().data();
  for (std::size_t co = 0; co < d.c_out; ++co) {
    double* oplane = out.data() + co * d.oh * d.ow;
    for (std::size_t i = 0; i < d.oh * d.ow; ++i) oplane[i] = pbias[co];
    for (std::size_t ci = 0; ci < d.c_in; ++ci) {
      const double* iplane = pin + ci * d.h * d.w;
      const double* kbase = pk + (co * d.c_in + ci) * 9;
      const double k0 = kbase[0], k1 = kbase[1], k2 = kbase[2];
      const double k3 = kbase[3], k4 = kbase[4], k5 = kbase[5];
      const double k6 = kbase[6], k7 = kbase[7], k8 = kbase[8];
      for (std::size_t oy = 0; oy < d.oh; ++oy) {
        double* orow = oplane + oy * d.ow;
        const bool row_interior = oy >= in_region.oy_lo && oy < in_region.oy_hi;
        if (row_interior) {
          const std::size_t iy0 = oy * 2 - static_cast<std::size_t>(d.pad_h);
          const double* r0 = iplane + iy0 * d.w;
          const double* r1 = r0 + d.w;
          const double* r2 = r1 + d.w;
          for (std::size_t ox = in_region.ox_lo; ox < in_region.ox_hi; ++ox) {
            const std::size_t ix0 = ox * 2 - static_cast<std::size_t>(d.pad_w);
            orow[ox] += k0 * r0[ix0] + k1 * r0[ix0 + 1] + k2 * r0[ix0 + 2] +
                        k3 * r1[ix0] + k4 * r1[ix0 + 1] + k5 * r1[ix0 + 2] +
                        k6 * r2[ix0] + k7 * r2[ix0 + 1] + k8 * r2[ix0 + 2];
          }
          for (std::size_t ox = 0; ox < in_region.ox_lo; ++ox)
            conv_cell_guarded(d, iplane, kbase, oy, ox, 0.0, &orow[ox], nullptr,
                              nullptr);
          for (std::size_t ox = in_region.ox_hi; ox < d.ow; ++ox)
            conv_cell_guarded(d, iplane, kbase, oy, ox, 0.0, &orow[ox], nullptr,
                              nullptr);
        } else {
          for (std::size_t ox = 0; ox < d.ow; ++ox)
            conv_cell_guarded(d, iplane, kbase, oy, ox, 0.0, &orow[ox], nullptr,
                              nullptr);
        }
      }
    }
  }
  auto in_node = input.node();
  auto k_node = kernels.node();
  auto b_node = bias.node();
  return make_op_result(
      {d.c_out, d.oh, d.ow}, std::move(out), "conv2d", {input, kernels, bias},
      [in_node, k_node, b_node, d, in_region](detail::TensorNode& self) {
        const double* g = self.grad.data();
        if (b_node->requires_grad) {
          b_node->ensure_grad();
          for (std::size_t co = 0; co < d.c_out; ++co) {
            double acc = 0.0;
            const double* gplane = g + co * d.oh * d.ow;
            for (std::size_t i = 0; i < d.oh * d.ow; ++i) acc += gplane[i];
            b_node->grad[co] += acc;
          }
        }
        const bool want_k = k_node->requires_grad;
        const bool want_in = in_node->requires_grad;
        if (!want_k && !want_in) return;
        if (want_k) k_node->ensure_grad();
        if (want_in) in_node->ensure_grad();
        for (std::size_t co = 0; co < d.c_out; ++co) {
          const double* gplane = g + co * d.oh * d.ow;
          for (std::size_t ci = 0; ci < d.c_in; ++ci) {
            const double* iplane = in_node->data.data() + ci * d.h * d.w;
            const double* kbase = k_node->data.data() + (co * d.c_in + ci) * 9;
            double* kgrad = want_k ? k_node->grad.data() + (co * d.c_in + ci) * 9
                                   : nullptr;
            double* igrad = want_in ? in_node->grad.data() + ci * d.h * d.w
                                    : nullptr;
            double a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0,
                   a7 = 0, a8 = 0;
            const double k0 = kbase[0], k1 = kbase[1], k2 = kbase[2];
            const double k3 = kbase[3], k4 = kbase[4], k5 = kbase[5];
            const double k6 = kbase[6], k7 = kbase[7], k8 = kbase[8];
            for (std::size_t oy = 0; oy < d.oh; ++oy) {
              const double* grow = gplane + oy * d.ow;
              const bool row_interior =
                  oy >= in_region.oy_lo && oy < in_region.oy_hi;
              if (row_interior) {
                const std::size_t iy0 =
                    oy * 2 - static_cast<std::size_t>(d.pad_h);
                const double* r0 = iplane + iy0 * d.w;
                const double* r1 = r0 + d.w;
                const double* r2 = r1 + d.w;
                double* g0 = igrad ? igrad + iy0 * d.w : nullptr;
                double* g1 = g0 ? g0 + d.w : nullptr;
                double* g2 = g1 ? g1 + d.w : nullptr;
                for (std::size_t ox = in_region.ox_lo; ox < in_region.ox_hi;
                     ++ox) {
                  const double gv = grow[ox];
                  const std::size_t ix0 =
                      ox * 2 - static_cast<std::size_t>(d.pad_w);
                  if (want_k) {
                    a0 += gv * r0[ix0];
                    a1 += gv * r0[ix0 + 1];
                    a2 += gv * r0[ix0 + 2];
                    a3 += gv * r1[ix0];
                    a4 += gv * r1[ix0 + 1];
                    a5 += gv * r1[ix0 + 2];
                    a6 += gv * r2[ix0];
                    a7 += gv * r2[ix0 + 1];
                    a8 += gv * r2[ix0 + 2];
                  }
                  if (igrad) {
                    g0[ix0] += gv * k0;
                    g0[ix0 + 1] += gv * k1;
                    g0[ix0 + 2] += gv * k2;
                    g1[ix0] += gv * k3;
                    g1[ix0 + 1] += gv * k4;
                    g1[ix0 + 2] += gv * k5;
                    g2[ix0] += gv * k6;
                    g2[ix0 + 1] += gv * k7;
                    g2[ix0 + 2] += gv * k8;
                  }
                }
                for (std::size_t ox = 0; ox < in_region.ox_lo; ++ox)
                  conv_cell_guarded(d, iplane, kbase, oy, ox, grow[ox], nullptr,
                                    want_k ? kgrad : nullptr, igrad);
                for (std::size_t ox = in_region.ox_hi; ox < d.ow; ++ox)
                  conv_cell_guarded(d, iplane, kbase, oy, ox, grow[ox], nullptr,
                                    want_k ? kgrad : nullptr, igrad);
              } else {
                for (std::size_t ox = 0; ox < d.ow; ++ox)
                  conv_cell_guarded(d, iplane, kbase, oy, ox, grow[ox], nullptr,
                                    want_k ? kgrad : nullptr, igrad);
              }
            }
            if (want_k) {
              kgrad[0] += a0;
              kgrad[1] += a1;
              kgrad[2] += a2;
              kgrad[3] += a3;
              kgrad[4] += a4;
              kgrad[5] += a5;
              kgrad[6] += a6;
              kgrad[7] += a7;
              kgrad[8] += a8;
            }
          }
        }
      });
}

// ---- shape ops ----

Tensor flatten(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  auto an = a.node();
  return make_op_result({a.size()}, std::move(out), "flatten", {a},
                        [an](detail::TensorNode& self) {
                          an->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            an->grad[i] += self.grad[i];
                        });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 1)
      throw std::invalid_argument("concat: inputs must be rank 1, got " +
                                  shape_to_string(p.shape()));
    total += p.size();
  }
  std::vector<double> out;
  out.reserve(total);
  for (const Tensor& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<detail::TensorNode>> nodes;
  nodes.reserve(parts.size());
  for (const Tensor& p : parts) nodes.push_back(p.node());
  return make_op_result({total}, std::move(out), "concat", parts,
                        [nodes](detail::TensorNode& self) {
                          std::size_t off = 0;
                          for (const auto& n : nodes) {
                            if (n->requires_grad) {
                              n->ensure_grad();
                              for (std::size_t i = 0; i < n->data.size(); ++i)
                                n->grad[i] += self.grad[off + i];
                            }
                            off += n->data.size();
                          }
                        });
}

Tensor slice(const Tensor& v, std::size_t offset, std::size_t len) {
  if (v.rank() != 1 || offset + len > v.size()) {
    throw std::invalid_argument("slice: range [" + std::to_string(offset) + "," +
                                std::to_string(offset + len) +
                                ") out of bounds for " +
                                shape_to_string(v.shape()));
  }
  std::vector<double> out(v.data().begin() + offset,
                          v.data().begin() + offset + len);
  auto vn = v.node();
  return make_op_result({len}, std::move(out), "slice", {v},
                        [vn, offset, len](detail::TensorNode& self) {
                          vn->ensure_grad();
                          for (std::size_t i = 0; i < len; ++i)
                            vn->grad[offset + i] += self.grad[i];
                        });
}

Tensor pick(const Tensor& v, std::size_t index) {
  if (v.rank() != 1 || index >= v.size()) {
    throw std::invalid_argument("pick: index " + std::to_string(index) +
                                " out of bounds for " +
                                shape_to_string(v.shape()));
  }
  auto vn = v.node();
  return make_op_result({1}, {v.data()[index]}, "pick", {v},
                        [vn, index](detail::TensorNode& self) {
                          vn->ensure_grad();
                          vn->grad[index] += self.grad[0];
                        });
}

// ---- reductions / distributions ----

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  auto an = a.node();
  return make_op_result({1}, {acc}, "sum", {a},
                        [an](detail::TensorNode& self) {
                          an->ensure_grad();
                          const double g = self.grad[0];
                          for (double& gv : an->grad) gv += g;
                        });
}

Tensor softmax(const Tensor& v) {
  if (v.rank() != 1 || v.size() == 0)
    throw std::invalid_argument("softmax: input must be a nonempty vector");
  double maxv = -std::numeric_limits<double>::infinity();
  for (double x : v.data()) {
    if (std::isnan(x)) throw std::invalid_argument("softmax: NaN input");
    maxv = std::max(maxv, x);
  }
  std::vector<double> out(v.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(v.data()[i] - maxv);
    denom += out[i];
  }
  for (double& x : out) x /= denom;
  auto vn = v.node();
  std::vector<double> saved = out;
  return make_op_result(
      v.shape(), std::move(out), "softmax", {v},
      [vn, saved = std::move(saved)](detail::TensorNode& self) {
        vn->ensure_grad();
        double dot = 0.0;
        for (std::size_t i = 0; i < saved.size(); ++i)
          dot += self.grad[i] * saved[i];
        for (std::size_t i = 0; i < saved.size(); ++i)
          vn->grad[i] += saved[i] * (self.grad[i] - dot);
      });
}

Tensor log_sum_exp(const Tensor& v) {
  if (v.rank() != 1 || v.size() == 0)
    throw std::invalid_argument("log_sum_exp: input must be a nonempty vector");
  double maxv = -std::numeric_limits<double>::infinity();
  for (double x : v.data()) {
    if (std::isnan(x)) throw std::invalid_argument("log_sum_exp: NaN input");
    maxv = std::max(maxv, x);
  }
  std::vector<double> p(v.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(v.data()[i] - maxv);
    denom += p[i];
  }
  const double lse = maxv + std::log(denom);
  for (double& x : p) x /= denom;
  auto vn = v.node();
  return make_op_result({1}, {lse}, "log_sum_exp", {v},
                        [vn, p = std::move(p)](detail::TensorNode& self) {
                          vn->ensure_grad();
                          const double g = self.grad[0];
                          for (std::size_t i = 0; i < p.size(); ++i)
                            vn->grad[i] += g * p[i];
                        });
}

// ---- reverse accumulation ----

void backward(const Tensor& loss) {
  if (!loss.defined() || !loss.is_scalar()) {
    throw std::invalid_argument(
        "backward: loss must be a scalar, got " +
        (loss.defined() ? shape_to_string(loss.shape()) : std::string("undefined")));
  }
  // Iterative post-order DFS; BPTT graphs get deep enough that recursion
  // would be a stack hazard.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> visited;
  struct Frame {
    detail::TensorNode* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::TensorNode* parent = f.node->parents[f.next_parent++].get();
      if (visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorNode* node = *it;
    if (!node->backward_fn) continue;
    if (node->grad.empty()) continue;  // unreachable from the loss gradient
    for (double g : node->grad) {
      if (!std::isfinite(g)) {
        throw NumericError(std::string("non-finite gradient at node '") +
                           node->op + "'");
      }
    }
    node->backward_fn(*node);
  }
}

}  // namespace casl
