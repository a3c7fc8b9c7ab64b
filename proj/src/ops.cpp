#include <atwb/ops.hpp>

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <string>

namespace atwb {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

void require_rank(const std::string& op, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got shape " +
                             to_string(shape));
  }
}

void require_axis(const std::string& op, const std::string& axis, std::size_t expected,
                  std::size_t actual) {
  if (expected != actual) throw ShapeError(op, axis, expected, actual);
}

struct ConvGeometry {
  std::size_t n, c, h, w;     // input
  std::size_t f, kh, kw;      // kernel
  std::size_t stride, pad;
  std::size_t oh, ow;         // output
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

// col [C*kh*kw, OH*OW] for one sample.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                   static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                     static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(g.h) &&
                                x < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.ow + ox] =
                inside ? image[(c * g.h + static_cast<std::size_t>(y)) * g.w +
                               static_cast<std::size_t>(x)]
                       : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accumulate(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                   static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                     static_cast<std::ptrdiff_t>(g.pad);
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.w)) continue;
            image[(c * g.h + static_cast<std::size_t>(y)) * g.w + static_cast<std::size_t>(x)] +=
                row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& kernel, const Var<T>& bias,
              Conv2dParams params) {
  const std::string op = "conv2d";
  require_rank(op, input.shape(), 4);
  require_rank(op, kernel.shape(), 4);
  if (params.stride == 0) throw ValueError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = input.shape()[0];
  g.c = input.shape()[1];
  g.h = input.shape()[2];
  g.w = input.shape()[3];
  g.f = kernel.shape()[0];
  g.kh = kernel.shape()[2];
  g.kw = kernel.shape()[3];
  g.stride = params.stride;
  g.pad = params.padding;
  require_axis(op, "C (input channels vs kernel)", kernel.shape()[1], g.c);
  if (g.h + 2 * g.pad < g.kh) throw ShapeError(op, "H", g.kh, g.h + 2 * g.pad);
  if (g.w + 2 * g.pad < g.kw) throw ShapeError(op, "W", g.kw, g.w + 2 * g.pad);
  if (bias.defined()) {
    require_rank(op, bias.shape(), 1);
    require_axis(op, "F (bias vs kernel filters)", g.f, bias.shape()[0]);
  }
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  const std::size_t patch = g.patch();
  const std::size_t positions = g.positions();
  const bool needs_grad = any_requires_grad({input, kernel, bias});

  Tensor<T> out({g.n, g.f, g.oh, g.ow});
  // Columns are kept for backward only when some gradient is wanted.
  std::vector<T> cols(needs_grad ? g.n * patch * positions : patch * positions);
  ConstMatrixMap<T> k(kernel.value().data(), static_cast<Eigen::Index>(g.f),
                      static_cast<Eigen::Index>(patch));
  for (std::size_t n = 0; n < g.n; ++n) {
    T* col = cols.data() + (needs_grad ? n * patch * positions : 0);
    im2col(input.value().data() + n * g.c * g.h * g.w, g, col);
    ConstMatrixMap<T> colm(col, static_cast<Eigen::Index>(patch),
                           static_cast<Eigen::Index>(positions));
    MatrixMap<T> o(out.data() + n * g.f * positions, static_cast<Eigen::Index>(g.f),
                   static_cast<Eigen::Index>(positions));
    o.noalias() = k * colm;
    if (bias.defined()) {
      for (std::size_t f = 0; f < g.f; ++f) o.row(static_cast<Eigen::Index>(f)).array() += bias.value()[f];
    }
  }

  return tape.record(
      op, std::move(out), {input, kernel, bias},
      [input, kernel, bias, g, cols = std::move(cols)](const Tensor<T>& grad) mutable {
        const std::size_t patch = g.patch();
        const std::size_t positions = g.positions();
        const auto P = static_cast<Eigen::Index>(positions);
        const auto F = static_cast<Eigen::Index>(g.f);
        const auto CKK = static_cast<Eigen::Index>(patch);
        ConstMatrixMap<T> k(kernel.value().data(), F, CKK);
        T* gk = kernel.requires_grad() ? kernel.grad_buffer().data() : nullptr;
        T* gx = input.requires_grad() ? input.grad_buffer().data() : nullptr;
        T* gb = bias.requires_grad() ? bias.grad_buffer().data() : nullptr;
        std::vector<T> gcol(gx ? patch * positions : 0);
        for (std::size_t n = 0; n < g.n; ++n) {
          ConstMatrixMap<T> go(grad.data() + n * g.f * positions, F, P);
          if (gk) {
            ConstMatrixMap<T> colm(cols.data() + n * patch * positions, CKK, P);
            MatrixMap<T>(gk, F, CKK).noalias() += go * colm.transpose();
          }
          if (gb) {
            for (std::size_t f = 0; f < g.f; ++f) gb[f] += go.row(static_cast<Eigen::Index>(f)).sum();
          }
          if (gx) {
            MatrixMap<T> gc(gcol.data(), CKK, P);
            gc.noalias() = k.transpose() * go;
            col2im_accumulate(gcol.data(), g, gx + n * g.c * g.h * g.w);
          }
        }
      });
}

template <typename T>
MaxPoolResult<T> maxpool2d_with_indices(Tape<T>& tape, const Var<T>& input, std::size_t k,
                                        std::size_t stride) {
  const std::string op = "maxpool2d";
  require_rank(op, input.shape(), 4);
  if (k == 0 || stride == 0) throw ValueError("maxpool2d: window and stride must be positive");
  const auto& s = input.shape();
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  if (h < k || (h - k) % stride != 0) {
    throw ShapeError(op, "H extent " + std::to_string(h) + " is not tiled by window " +
                             std::to_string(k) + " with stride " + std::to_string(stride));
  }
  if (w < k || (w - k) % stride != 0) {
    throw ShapeError(op, "W extent " + std::to_string(w) + " is not tiled by window " +
                             std::to_string(k) + " with stride " + std::to_string(stride));
  }
  const std::size_t oh = (h - k) / stride + 1;
  const std::size_t ow = (w - k) / stride + 1;
  Tensor<T> out({n, c, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  const T* x = input.value().data();
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = base + (oy * stride) * w + ox * stride;
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t idx = base + (oy * stride + i) * w + ox * stride + j;
            if (x[idx] > x[best]) best = idx;
          }
        }
        argmax[o] = best;
        out[o] = x[best];
      }
    }
  }
  MaxPoolResult<T> result;
  result.argmax = argmax;
  result.output = tape.record(op, std::move(out), {input},
                              [input, argmax = std::move(argmax)](const Tensor<T>& grad) mutable {
                                auto& gx = input.grad_buffer();
                                for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += grad[i];
                              });
  return result;
}

template <typename T>
Var<T> dense(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  const std::string op = "dense";
  require_rank(op, input.shape(), 2);
  require_rank(op, weight.shape(), 2);
  const std::size_t n = input.shape()[0], d = input.shape()[1], k = weight.shape()[1];
  require_axis(op, "D (input features vs weight rows)", weight.shape()[0], d);
  if (bias.defined()) {
    require_rank(op, bias.shape(), 1);
    require_axis(op, "K (bias vs weight columns)", k, bias.shape()[0]);
  }
  // Plain loops: every output row is summed in the same order regardless of
  // batch size, so predictions do not depend on how images are batched.
  Tensor<T> out({n, k});
  const T* x = input.value().data();
  const T* wt = weight.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    T* row = out.data() + r * k;
    for (std::size_t j = 0; j < k; ++j) row[j] = bias.defined() ? bias.value()[j] : T{0};
    for (std::size_t i = 0; i < d; ++i) {
      const T xi = x[r * d + i];
      const T* wrow = wt + i * k;
      for (std::size_t j = 0; j < k; ++j) row[j] += xi * wrow[j];
    }
  }
  return tape.record(op, std::move(out), {input, weight, bias},
                     [input, weight, bias, n, d, k](const Tensor<T>& grad) mutable {
                       const T* g = grad.data();
                       if (input.requires_grad()) {
                         T* gx = input.grad_buffer().data();
                         const T* wt = weight.value().data();
                         for (std::size_t r = 0; r < n; ++r) {
                           for (std::size_t i = 0; i < d; ++i) {
                             T acc{0};
                             for (std::size_t j = 0; j < k; ++j) acc += g[r * k + j] * wt[i * k + j];
                             gx[r * d + i] += acc;
                           }
                         }
                       }
                       if (weight.requires_grad()) {
                         T* gw = weight.grad_buffer().data();
                         const T* x = input.value().data();
                         for (std::size_t r = 0; r < n; ++r) {
                           for (std::size_t i = 0; i < d; ++i) {
                             const T xi = x[r * d + i];
                             for (std::size_t j = 0; j < k; ++j) gw[i * k + j] += xi * g[r * k + j];
                           }
                         }
                       }
                       if (bias.requires_grad()) {
                         T* gb = bias.grad_buffer().data();
                         for (std::size_t r = 0; r < n; ++r) {
                           for (std::size_t j = 0; j < k; ++j) gb[j] += g[r * k + j];
                         }
                       }
                     });
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& input) {
  Tensor<T> out = Tensor<T>::zeros_like(input.value());
  const auto x = input.value().values();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return tape.record("relu", std::move(out), {input}, [input](const Tensor<T>& grad) mutable {
    auto& gx = input.grad_buffer();
    const auto x = input.value().values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > T{0}) gx[i] += grad[i];
    }
  });
}

template <typename T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const std::string op = "concat_channels";
  require_rank(op, a.shape(), 4);
  require_rank(op, b.shape(), 4);
  require_axis(op, "N", a.shape()[0], b.shape()[0]);
  require_axis(op, "H", a.shape()[2], b.shape()[2]);
  require_axis(op, "W", a.shape()[3], b.shape()[3]);
  const std::size_t n = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  const std::size_t plane = a.shape()[2] * a.shape()[3];
  Tensor<T> out({n, ca + cb, a.shape()[2], a.shape()[3]});
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(a.value().data() + s * ca * plane, ca * plane, out.data() + s * (ca + cb) * plane);
    std::copy_n(b.value().data() + s * cb * plane, cb * plane,
                out.data() + s * (ca + cb) * plane + ca * plane);
  }
  return tape.record(op, std::move(out), {a, b},
                     [a, b, n, ca, cb, plane](const Tensor<T>& grad) mutable {
                       for (std::size_t s = 0; s < n; ++s) {
                         const T* g = grad.data() + s * (ca + cb) * plane;
                         if (a.requires_grad()) {
                           T* ga = a.grad_buffer().data() + s * ca * plane;
                           for (std::size_t i = 0; i < ca * plane; ++i) ga[i] += g[i];
                         }
                         if (b.requires_grad()) {
                           T* gb = b.grad_buffer().data() + s * cb * plane;
                           for (std::size_t i = 0; i < cb * plane; ++i) gb[i] += g[ca * plane + i];
                         }
                       }
                     });
}

template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& input) {
  require_rank("global_avg_pool", input.shape(), 4);
  const std::size_t n = input.shape()[0], c = input.shape()[1];
  const std::size_t plane = input.shape()[2] * input.shape()[3];
  Tensor<T> out({n, c});
  const T* x = input.value().data();
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc{0};
    for (std::size_t p = 0; p < plane; ++p) acc += x[i * plane + p];
    out[i] = acc / static_cast<T>(plane);
  }
  return tape.record("global_avg_pool", std::move(out), {input},
                     [input, n, c, plane](const Tensor<T>& grad) mutable {
                       T* gx = input.grad_buffer().data();
                       for (std::size_t i = 0; i < n * c; ++i) {
                         const T share = grad[i] / static_cast<T>(plane);
                         for (std::size_t p = 0; p < plane; ++p) gx[i * plane + p] += share;
                       }
                     });
}

template <typename T>
Var<T> dropout(Tape<T>& tape, const Var<T>& input, double p, Prng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ValueError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return input;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask = Tensor<T>::zeros_like(input.value());
  for (auto& m : mask.values()) m = rng.bernoulli(p) ? T{0} : keep_scale;
  Tensor<T> out = Tensor<T>::zeros_like(input.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input.value()[i] * mask[i];
  return tape.record("dropout", std::move(out), {input},
                     [input, mask = std::move(mask)](const Tensor<T>& grad) mutable {
                       auto& gx = input.grad_buffer();
                       for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += grad[i] * mask[i];
                     });
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add", "operand shapes " + to_string(a.shape()) + " and " +
                                to_string(b.shape()) + " differ");
  }
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return tape.record("add", std::move(out), {a, b}, [a, b](const Tensor<T>& grad) mutable {
    accumulate_grad(a, grad);
    accumulate_grad(b, grad);
  });
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& scalar, const Var<T>& x) {
  if (scalar.value().size() != 1) {
    throw ShapeError("scale", "scalar operand has shape " + to_string(scalar.shape()));
  }
  const T s = scalar.value()[0];
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= s;
  return tape.record("scale", std::move(out), {scalar, x},
                     [scalar, x](const Tensor<T>& grad) mutable {
                       if (scalar.requires_grad()) {
                         T acc{0};
                         for (std::size_t i = 0; i < grad.size(); ++i) acc += grad[i] * x.value()[i];
                         scalar.grad_buffer()[0] += acc;
                       }
                       if (x.requires_grad()) {
                         const T s = scalar.value()[0];
                         auto& gx = x.grad_buffer();
                         for (std::size_t i = 0; i < grad.size(); ++i) gx[i] += grad[i] * s;
                       }
                     });
}

template <typename T>
Var<T> multiply_spatial(Tape<T>& tape, const Var<T>& weights, const Var<T>& x) {
  const std::string op = "multiply_spatial";
  require_rank(op, weights.shape(), 4);
  require_rank(op, x.shape(), 4);
  require_axis(op, "C (weights)", 1, weights.shape()[1]);
  require_axis(op, "N", x.shape()[0], weights.shape()[0]);
  require_axis(op, "H", x.shape()[2], weights.shape()[2]);
  require_axis(op, "W", x.shape()[3], weights.shape()[3]);
  const std::size_t n = x.shape()[0], c = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  Tensor<T> out = x.value();
  for (std::size_t s = 0; s < n; ++s) {
    const T* a = weights.value().data() + s * plane;
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* o = out.data() + (s * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) o[p] *= a[p];
    }
  }
  return tape.record(op, std::move(out), {weights, x},
                     [weights, x, n, c, plane](const Tensor<T>& grad) mutable {
                       for (std::size_t s = 0; s < n; ++s) {
                         const T* a = weights.value().data() + s * plane;
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           const std::size_t base = (s * c + ch) * plane;
                           if (x.requires_grad()) {
                             T* gx = x.grad_buffer().data() + base;
                             for (std::size_t p = 0; p < plane; ++p) gx[p] += grad[base + p] * a[p];
                           }
                           if (weights.requires_grad()) {
                             T* ga = weights.grad_buffer().data() + s * plane;
                             const T* xv = x.value().data() + base;
                             for (std::size_t p = 0; p < plane; ++p) ga[p] += grad[base + p] * xv[p];
                           }
                         }
                       }
                     });
}

template <typename T>
Var<T> spatial_softmax(Tape<T>& tape, const Var<T>& input) {
  require_rank("spatial_softmax", input.shape(), 4);
  const std::size_t planes = input.shape()[0] * input.shape()[1];
  const std::size_t plane = input.shape()[2] * input.shape()[3];
  Tensor<T> out = Tensor<T>::zeros_like(input.value());
  const T* x = input.value().data();
  for (std::size_t q = 0; q < planes; ++q) {
    const T* in = x + q * plane;
    T* o = out.data() + q * plane;
    T peak = in[0];
    for (std::size_t p = 1; p < plane; ++p) peak = std::max(peak, in[p]);
    T total{0};
    for (std::size_t p = 0; p < plane; ++p) {
      o[p] = std::exp(in[p] - peak);
      total += o[p];
    }
    for (std::size_t p = 0; p < plane; ++p) o[p] /= total;
  }
  Tensor<T> probs = out;
  return tape.record("spatial_softmax", std::move(out), {input},
                     [input, planes, plane, probs = std::move(probs)](const Tensor<T>& grad) mutable {
                       T* gx = input.grad_buffer().data();
                       for (std::size_t q = 0; q < planes; ++q) {
                         const T* s = probs.data() + q * plane;
                         const T* g = grad.data() + q * plane;
                         T dot{0};
                         for (std::size_t p = 0; p < plane; ++p) dot += g[p] * s[p];
                         for (std::size_t p = 0; p < plane; ++p) gx[q * plane + p] += s[p] * (g[p] - dot);
                       }
                     });
}

template <typename T>
Var<T> sum_channels(Tape<T>& tape, const Var<T>& input) {
  require_rank("sum_channels", input.shape(), 4);
  const std::size_t n = input.shape()[0], c = input.shape()[1];
  const std::size_t plane = input.shape()[2] * input.shape()[3];
  Tensor<T> out({n, 1, input.shape()[2], input.shape()[3]});
  for (std::size_t s = 0; s < n; ++s) {
    T* o = out.data() + s * plane;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* x = input.value().data() + (s * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) o[p] += x[p];
    }
  }
  return tape.record("sum_channels", std::move(out), {input},
                     [input, n, c, plane](const Tensor<T>& grad) mutable {
                       T* gx = input.grad_buffer().data();
                       for (std::size_t s = 0; s < n; ++s) {
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           for (std::size_t p = 0; p < plane; ++p) {
                             gx[(s * c + ch) * plane + p] += grad[s * plane + p];
                           }
                         }
                       }
                     });
}

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& input, Shape shape) {
  Tensor<T> out = input.value().reshaped(std::move(shape));
  return tape.record("reshape", std::move(out), {input}, [input](const Tensor<T>& grad) mutable {
    auto& gx = input.grad_buffer();
    for (std::size_t i = 0; i < grad.size(); ++i) gx[i] += grad[i];
  });
}

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& input) {
  T acc{0};
  for (T v : input.value().values()) acc += v;
  return tape.record("sum", Tensor<T>({1}, acc), {input}, [input](const Tensor<T>& grad) mutable {
    for (auto& g : input.grad_buffer().values()) g += grad[0];
  });
}

template <typename T>
Var<T> weighted_sum(Tape<T>& tape, const Var<T>& input, const Tensor<T>& weights) {
  if (weights.shape() != input.shape()) {
    throw ShapeError("weighted_sum", "weights " + to_string(weights.shape()) +
                                         " do not match input " + to_string(input.shape()));
  }
  T acc{0};
  for (std::size_t i = 0; i < weights.size(); ++i) acc += input.value()[i] * weights[i];
  return tape.record("weighted_sum", Tensor<T>({1}, acc), {input},
                     [input, weights](const Tensor<T>& grad) mutable {
                       auto& gx = input.grad_buffer();
                       for (std::size_t i = 0; i < weights.size(); ++i) gx[i] += grad[0] * weights[i];
                     });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  require_rank("softmax_rows", logits.shape(), 2);
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  Tensor<T> probs = Tensor<T>::zeros_like(logits);
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.data() + r * k;
    T* p = probs.data() + r * k;
    T peak = z[0];
    for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, z[j]);
    T total{0};
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(z[j] - peak);
      total += p[j];
    }
    for (std::size_t j = 0; j < k; ++j) p[j] /= total;
  }
  return probs;
}

namespace {

void check_labels(const std::string& op, std::span<const int> labels, std::size_t n,
                  std::size_t k) {
  if (labels.size() != n) throw ShapeError(op, "N (labels vs logits)", n, labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ValueError(op + ": label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " is outside [0, " + std::to_string(k) + ")");
    }
  }
}

}  // namespace

template <typename T>
std::vector<double> cross_entropy_per_row(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank("cross_entropy_per_row", logits.shape(), 2);
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  check_labels("cross_entropy_per_row", labels, n, k);
  std::vector<double> losses(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.data() + r * k;
    double peak = z[0];
    for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, static_cast<double>(z[j]));
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(static_cast<double>(z[j]) - peak);
    losses[r] = peak + std::log(total) - static_cast<double>(z[labels[r]]);
  }
  return losses;
}

template <typename T>
CrossEntropy<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits,
                                      std::span<const int> labels, const Tensor<T>* class_weights,
                                      Reduction reduction) {
  const std::string op = "softmax_cross_entropy";
  require_rank(op, logits.shape(), 2);
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  check_labels(op, labels, n, k);
  if (class_weights) {
    require_rank(op, class_weights->shape(), 1);
    require_axis(op, "K (class weights)", k, class_weights->shape()[0]);
  }
  Tensor<T> probs = softmax_rows(logits.value());
  const T denom = reduction == Reduction::mean ? static_cast<T>(n) : T{1};
  std::vector<T> row_weight(n, T{1});
  T total{0};
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.value().data() + r * k;
    T peak = z[0];
    for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, z[j]);
    T lse{0};
    for (std::size_t j = 0; j < k; ++j) lse += std::exp(z[j] - peak);
    const T nll = peak + std::log(lse) - z[labels[r]];
    if (class_weights) row_weight[r] = (*class_weights)[static_cast<std::size_t>(labels[r])];
    total += row_weight[r] * nll;
  }
  CrossEntropy<T> result;
  result.probabilities = probs;
  std::vector<int> label_copy(labels.begin(), labels.end());
  result.loss = tape.record(
      op, Tensor<T>({1}, total / denom), {logits},
      [logits, probs = std::move(probs), label_copy = std::move(label_copy),
       row_weight = std::move(row_weight), denom, k](const Tensor<T>& grad) mutable {
        T* gz = logits.grad_buffer().data();
        for (std::size_t r = 0; r < label_copy.size(); ++r) {
          const T coeff = grad[0] * row_weight[r] / denom;
          for (std::size_t j = 0; j < k; ++j) {
            const T target = static_cast<std::size_t>(label_copy[r]) == j ? T{1} : T{0};
            gz[r * k + j] += coeff * (probs[r * k + j] - target);
          }
        }
      });
  return result;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  require_rank("argmax_rows", logits.shape(), 2);
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  std::vector<int> out(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.data() + r * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (z[j] > z[best]) best = j;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

#define ATWB_INSTANTIATE_OPS(T)                                                                 \
  template Var<T> conv2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, Conv2dParams);  \
  template MaxPoolResult<T> maxpool2d_with_indices(Tape<T>&, const Var<T>&, std::size_t,       \
                                                   std::size_t);                               \
  template Var<T> dense(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                \
  template Var<T> relu(Tape<T>&, const Var<T>&);                                               \
  template Var<T> concat_channels(Tape<T>&, const Var<T>&, const Var<T>&);                     \
  template Var<T> global_avg_pool(Tape<T>&, const Var<T>&);                                    \
  template Var<T> dropout(Tape<T>&, const Var<T>&, double, Prng&, bool);                       \
  template Var<T> add(Tape<T>&, const Var<T>&, const Var<T>&);                                 \
  template Var<T> scale(Tape<T>&, const Var<T>&, const Var<T>&);                               \
  template Var<T> multiply_spatial(Tape<T>&, const Var<T>&, const Var<T>&);                    \
  template Var<T> spatial_softmax(Tape<T>&, const Var<T>&);                                    \
  template Var<T> sum_channels(Tape<T>&, const Var<T>&);                                       \
  template Var<T> reshape(Tape<T>&, const Var<T>&, Shape);                                     \
  template Var<T> sum(Tape<T>&, const Var<T>&);                                                \
  template Var<T> weighted_sum(Tape<T>&, const Var<T>&, const Tensor<T>&);                     \
  template CrossEntropy<T> softmax_cross_entropy(Tape<T>&, const Var<T>&, std::span<const int>, \
                                                 const Tensor<T>*, Reduction);                 \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                           \
  template std::vector<double> cross_entropy_per_row(const Tensor<T>&, std::span<const int>);  \
  template std::vector<int> argmax_rows(const Tensor<T>&);

ATWB_INSTANTIATE_OPS(float)
ATWB_INSTANTIATE_OPS(double)

}  // namespace atwb
