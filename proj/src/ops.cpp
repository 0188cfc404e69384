#include "ctsl/ops.hpp"

#include <cmath>
#include <stdexcept>

#include "ctsl/kernels.hpp"

namespace ctsl::ops {
namespace {

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

void accumulate(Var v, const Tensor& g) {
  if (!v.tape().requires_grad(v)) return;
  add_inplace(v.tape().grad_buffer(v), g);
}

bool needs(Var v) { return v.valid() && v.tape().requires_grad(v); }

struct ConvGeometry {
  std::size_t cin, t, h, w;
  std::size_t cout, cin_g, kt, kh, kw;
  std::size_t to, ho, wo;
  std::size_t groups;
  std::array<std::size_t, 3> stride, pad;

  std::size_t kernel() const { return kt * kh * kw; }
  std::size_t positions() const { return to * ho * wo; }
  std::size_t cout_g() const { return cout / groups; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Conv3dSpec& spec) {
  require(x.size() == 4, "conv3d: input must be [C, T, H, W]");
  require(w.size() == 5, "conv3d: weight must be [Cout, Cin/g, kt, kh, kw]");
  require(spec.groups >= 1, "conv3d: groups must be positive");
  ConvGeometry g{};
  g.cin = x[0];
  g.t = x[1];
  g.h = x[2];
  g.w = x[3];
  g.cout = w[0];
  g.cin_g = w[1];
  g.kt = w[2];
  g.kh = w[3];
  g.kw = w[4];
  g.groups = spec.groups;
  g.stride = spec.stride;
  g.pad = spec.padding;
  require(g.cin % g.groups == 0 && g.cout % g.groups == 0, "conv3d: channels not divisible by groups");
  require(g.cin / g.groups == g.cin_g, "conv3d: weight input channels do not match input");
  const std::array<std::size_t, 3> in{g.t, g.h, g.w};
  const std::array<std::size_t, 3> k{g.kt, g.kh, g.kw};
  std::array<std::size_t, 3> out{};
  for (int a = 0; a < 3; ++a) {
    require(spec.stride[a] >= 1, "conv3d: stride must be positive");
    require(in[a] + 2 * spec.padding[a] >= k[a], "conv3d: kernel larger than padded input");
    out[a] = (in[a] + 2 * spec.padding[a] - k[a]) / spec.stride[a] + 1;
  }
  g.to = out[0];
  g.ho = out[1];
  g.wo = out[2];
  return g;
}

// cols [cin_g * K, N] for one group.
void im2col(const ConvGeometry& g, const double* x, std::size_t group, double* cols) {
  const std::size_t n = g.positions();
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    const double* xc = x + (group * g.cin_g + c) * g.t * g.h * g.w;
    for (std::size_t a = 0; a < g.kt; ++a)
      for (std::size_t b = 0; b < g.kh; ++b)
        for (std::size_t d = 0; d < g.kw; ++d) {
          double* row = cols + ((c * g.kt + a) * g.kh * g.kw + b * g.kw + d) * n;
          std::size_t idx = 0;
          for (std::size_t ot = 0; ot < g.to; ++ot) {
            const long it = long(ot * g.stride[0] + a) - long(g.pad[0]);
            for (std::size_t oh = 0; oh < g.ho; ++oh) {
              const long ih = long(oh * g.stride[1] + b) - long(g.pad[1]);
              for (std::size_t ow = 0; ow < g.wo; ++ow, ++idx) {
                const long iw = long(ow * g.stride[2] + d) - long(g.pad[2]);
                const bool inside = it >= 0 && it < long(g.t) && ih >= 0 && ih < long(g.h) &&
                                    iw >= 0 && iw < long(g.w);
                row[idx] = inside ? xc[(std::size_t(it) * g.h + std::size_t(ih)) * g.w + std::size_t(iw)] : 0.0;
              }
            }
          }
        }
  }
}

void col2im(const ConvGeometry& g, const double* cols, std::size_t group, double* dx) {
  const std::size_t n = g.positions();
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    double* xc = dx + (group * g.cin_g + c) * g.t * g.h * g.w;
    for (std::size_t a = 0; a < g.kt; ++a)
      for (std::size_t b = 0; b < g.kh; ++b)
        for (std::size_t d = 0; d < g.kw; ++d) {
          const double* row = cols + ((c * g.kt + a) * g.kh * g.kw + b * g.kw + d) * n;
          std::size_t idx = 0;
          for (std::size_t ot = 0; ot < g.to; ++ot) {
            const long it = long(ot * g.stride[0] + a) - long(g.pad[0]);
            for (std::size_t oh = 0; oh < g.ho; ++oh) {
              const long ih = long(oh * g.stride[1] + b) - long(g.pad[1]);
              for (std::size_t ow = 0; ow < g.wo; ++ow, ++idx) {
                const long iw = long(ow * g.stride[2] + d) - long(g.pad[2]);
                if (it >= 0 && it < long(g.t) && ih >= 0 && ih < long(g.h) && iw >= 0 &&
                    iw < long(g.w)) {
                  xc[(std::size_t(it) * g.h + std::size_t(ih)) * g.w + std::size_t(iw)] += row[idx];
                }
              }
            }
          }
        }
  }
}

inline double gelu_value(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  const double u = k * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  constexpr double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

}  // namespace

Shape conv3d_output_shape(const Shape& input, const Shape& weight, const Conv3dSpec& spec) {
  const ConvGeometry g = conv_geometry(input, weight, spec);
  return Shape{g.cout, g.to, g.ho, g.wo};
}

Var add(Var a, Var b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor out = a.value();
  add_inplace(out, b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](const Tensor& g) {
    accumulate(a, g);
    accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor out = a.value();
  add_inplace(out, b.value(), -1.0);
  return a.tape().record(std::move(out), {a, b}, [a, b](const Tensor& g) {
    accumulate(a, g);
    if (needs(b)) add_inplace(b.tape().grad_buffer(b), g, -1.0);
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return a.tape().record(std::move(out), {a}, [a, s](const Tensor& g) {
    add_inplace(a.tape().grad_buffer(a), g, s);
  });
}

Var gelu(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = gelu_value(v);
  return a.tape().record(std::move(out), {a}, [a](const Tensor& g) {
    Tensor& ga = a.tape().grad_buffer(a);
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * gelu_grad(x[i]);
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](const Tensor& g) {
    Tensor& ga = a.tape().grad_buffer(a);
    kernels::axpy(1.0, g.data(), ga.data(), g.size());
  });
}

Var transpose(Var a) {
  require(a.value().rank() == 2, "transpose: rank-2 input required");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out(Shape{c, r});
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return a.tape().record(std::move(out), {a}, [a, r, c](const Tensor& g) {
    Tensor& ga = a.tape().grad_buffer(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Shape shape = parts.front().shape();
  require(!shape.empty(), "concat_rows: scalar inputs");
  const std::size_t inner = shape_size(shape) / shape[0];
  std::size_t rows = 0;
  for (const Var& p : parts) {
    Shape s = p.shape();
    require(s.size() == shape.size(), "concat_rows: rank mismatch");
    for (std::size_t i = 1; i < s.size(); ++i) require(s[i] == shape[i], "concat_rows: trailing shape mismatch");
    rows += s[0];
  }
  shape[0] = rows;
  Tensor out(shape);
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
    off += p.value().size();
  }
  (void)inner;
  return parts.front().tape().record(std::move(out), parts, [parts](const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t n = p.value().size();
      if (needs(p)) kernels::axpy(1.0, g.data() + off, p.tape().grad_buffer(p).data(), n);
      off += n;
    }
  });
}

Var linear(Var x, Var w, Var b) {
  require(x.value().rank() == 2 && w.value().rank() == 2, "linear: rank-2 operands required");
  const std::size_t n = x.dim(0), cin = x.dim(1), cout = w.dim(0);
  require(w.dim(1) == cin, "linear: weight does not match input width");
  if (b.valid()) require(b.value().size() == cout, "linear: bias size mismatch");
  Tensor out(Shape{n, cout});
  kernels::gemm(false, true, n, cout, cin, x.value().data(), cin, w.value().data(), cin, 0.0,
                out.data(), cout);
  if (b.valid()) {
    const double* bv = b.value().data();
    for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, bv, out.row(i), cout);
  }
  std::vector<Var> inputs{x, w};
  if (b.valid()) inputs.push_back(b);
  return x.tape().record(std::move(out), inputs, [x, w, b, n, cin, cout](const Tensor& g) {
    if (needs(x)) {
      kernels::gemm(false, false, n, cin, cout, g.data(), cout, w.value().data(), cin, 1.0,
                    x.tape().grad_buffer(x).data(), cin);
    }
    if (needs(w)) {
      kernels::gemm(true, false, cout, cin, n, g.data(), cout, x.value().data(), cin, 1.0,
                    w.tape().grad_buffer(w).data(), cin);
    }
    if (needs(b)) {
      Tensor& gb = b.tape().grad_buffer(b);
      for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, g.row(i), gb.data(), cout);
    }
  });
}

Var matmul(Var a, Var b, bool trans_a, bool trans_b) {
  require(a.value().rank() == 2 && b.value().rank() == 2, "matmul: rank-2 operands required");
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  require(k == kb, "matmul: inner dimensions differ");
  const std::size_t lda = a.dim(1), ldb = b.dim(1);
  Tensor out(Shape{m, n});
  kernels::gemm(trans_a, trans_b, m, n, k, a.value().data(), lda, b.value().data(), ldb, 0.0,
                out.data(), n);
  return a.tape().record(std::move(out), {a, b},
                         [a, b, trans_a, trans_b, m, n, k, lda, ldb](const Tensor& g) {
    // C = op(A) op(B);  dop(A) = G op(B)^T,  dop(B) = op(A)^T G.
    if (needs(a)) {
      Tensor& ga = a.tape().grad_buffer(a);
      if (!trans_a) {
        kernels::gemm(false, !trans_b, m, k, n, g.data(), n, b.value().data(), ldb, 1.0, ga.data(), lda);
      } else {
        // dA = op(B) G^T, A is k x m
        kernels::gemm(trans_b, true, k, m, n, b.value().data(), ldb, g.data(), n, 1.0, ga.data(), lda);
      }
    }
    if (needs(b)) {
      Tensor& gb = b.tape().grad_buffer(b);
      if (!trans_b) {
        kernels::gemm(!trans_a, false, k, n, m, a.value().data(), lda, g.data(), n, 1.0, gb.data(), ldb);
      } else {
        // dB = G^T op(A), B is n x k
        kernels::gemm(true, trans_a, n, k, m, g.data(), n, a.value().data(), lda, 1.0, gb.data(), ldb);
      }
    }
  });
}

Var softmax_rows(Var x) {
  require(x.value().rank() == 2, "softmax_rows: rank-2 input required");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out = x.value();
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.row(i);
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= s;
  }
  Tensor probs = out;
  return x.tape().record(std::move(out), {x}, [x, r, c, probs = std::move(probs)](const Tensor& g) {
    Tensor& gx = x.tape().grad_buffer(x);
    for (std::size_t i = 0; i < r; ++i) {
      const double dotv = kernels::dot(g.row(i), probs.row(i), c);
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += probs[i * c + j] * (g[i * c + j] - dotv);
    }
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  require(x.value().rank() == 2, "layer_norm_rows: rank-2 input required");
  const std::size_t n = x.dim(0), c = x.dim(1);
  require(gamma.value().size() == c && beta.value().size() == c, "layer_norm_rows: affine size mismatch");
  Tensor xhat(Shape{n, c});
  std::vector<double> inv_std(n);
  Tensor out(Shape{n, c});
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xv.row(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= double(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= double(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mean) * inv_std[i];
      xhat[i * c + j] = h;
      out[i * c + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, n, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor& g) {
    const Tensor& gv = gamma.value();
    if (needs(gamma)) {
      Tensor& gg = gamma.tape().grad_buffer(gamma);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
    }
    if (needs(beta)) {
      Tensor& gb = beta.tape().grad_buffer(beta);
      for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, g.row(i), gb.data(), c);
    }
    if (needs(x)) {
      Tensor& gx = x.tape().grad_buffer(x);
      std::vector<double> dh(c);
      for (std::size_t i = 0; i < n; ++i) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          dh[j] = g[i * c + j] * gv[j];
          mean_dh += dh[j];
          mean_dh_h += dh[j] * xhat[i * c + j];
        }
        mean_dh /= double(c);
        mean_dh_h /= double(c);
        for (std::size_t j = 0; j < c; ++j) {
          gx[i * c + j] += inv_std[i] * (dh[j] - mean_dh - xhat[i * c + j] * mean_dh_h);
        }
      }
    }
  });
}

Var conv3d(Var x, Var w, Var b, const Conv3dSpec& spec) {
  const ConvGeometry geo = conv_geometry(x.shape(), w.shape(), spec);
  if (b.valid()) require(b.value().size() == geo.cout, "conv3d: bias size mismatch");
  const std::size_t n = geo.positions();
  const std::size_t rows = geo.cin_g * geo.kernel();
  const std::size_t cout_g = geo.cout_g();
  Tensor out(Shape{geo.cout, geo.to, geo.ho, geo.wo});
  const bool keep_cols = needs(w) || needs(x);
  std::vector<double> all_cols(keep_cols ? geo.groups * rows * n : 0);
  std::vector<double> scratch(keep_cols ? 0 : rows * n);
  for (std::size_t grp = 0; grp < geo.groups; ++grp) {
    double* cols = keep_cols ? all_cols.data() + grp * rows * n : scratch.data();
    im2col(geo, x.value().data(), grp, cols);
    kernels::gemm(false, false, cout_g, n, rows, w.value().data() + grp * cout_g * rows, rows, cols, n,
                  0.0, out.data() + grp * cout_g * n, n);
  }
  if (b.valid()) {
    const Tensor& bv = b.value();
    for (std::size_t co = 0; co < geo.cout; ++co) {
      double* o = out.data() + co * n;
      for (std::size_t i = 0; i < n; ++i) o[i] += bv[co];
    }
  }
  std::vector<Var> inputs{x, w};
  if (b.valid()) inputs.push_back(b);
  return x.tape().record(std::move(out), inputs,
                         [x, w, b, geo, n, rows, cout_g, cols = std::move(all_cols)](const Tensor& g) {
    if (needs(b)) {
      Tensor& gb = b.tape().grad_buffer(b);
      for (std::size_t co = 0; co < geo.cout; ++co) {
        const double* go = g.data() + co * n;
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += go[i];
        gb[co] += s;
      }
    }
    std::vector<double> dcols(needs(x) ? rows * n : 0);
    for (std::size_t grp = 0; grp < geo.groups; ++grp) {
      const double* gout = g.data() + grp * cout_g * n;
      const double* c = cols.data() + grp * rows * n;
      if (needs(w)) {
        kernels::gemm(false, true, cout_g, rows, n, gout, n, c, n, 1.0,
                      w.tape().grad_buffer(w).data() + grp * cout_g * rows, rows);
      }
      if (needs(x)) {
        kernels::gemm(true, false, rows, n, cout_g, w.value().data() + grp * cout_g * rows, rows, gout,
                      n, 0.0, dcols.data(), n);
        col2im(geo, dcols.data(), grp, x.tape().grad_buffer(x).data());
      }
    }
  });
}

Var conv_transpose3d_patch(Var x, Var w, Var b) {
  require(x.value().rank() == 4, "conv_transpose3d_patch: input must be [C, T, H, W]");
  require(w.value().rank() == 5, "conv_transpose3d_patch: weight must be [Cin, Cout, kt, kh, kw]");
  const std::size_t cin = x.dim(0), t = x.dim(1), h = x.dim(2), wd = x.dim(3);
  require(w.dim(0) == cin, "conv_transpose3d_patch: weight input channels mismatch");
  const std::size_t cout = w.dim(1), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  if (b.valid()) require(b.value().size() == cout, "conv_transpose3d_patch: bias size mismatch");
  const std::size_t k = kt * kh * kw;
  const std::size_t n = t * h * wd;
  const std::size_t ot = t * kt, oh = h * kh, ow = wd * kw;
  // ycols [cout * k, n] = W^T x
  std::vector<double> ycols(cout * k * n);
  kernels::gemm(true, false, cout * k, n, cin, w.value().data(), cout * k, x.value().data(), n, 0.0,
                ycols.data(), n);
  Tensor out(Shape{cout, ot, oh, ow});
  auto out_index = [=](std::size_t co, std::size_t kidx, std::size_t pos) {
    const std::size_t a = kidx / (kh * kw), bb = (kidx / kw) % kh, c = kidx % kw;
    const std::size_t pt = pos / (h * wd), ph = (pos / wd) % h, pw = pos % wd;
    return ((co * ot + pt * kt + a) * oh + ph * kh + bb) * ow + pw * kw + c;
  };
  for (std::size_t co = 0; co < cout; ++co) {
    const double bias = b.valid() ? b.value()[co] : 0.0;
    for (std::size_t kidx = 0; kidx < k; ++kidx) {
      const double* src = ycols.data() + (co * k + kidx) * n;
      for (std::size_t pos = 0; pos < n; ++pos) out[out_index(co, kidx, pos)] = src[pos] + bias;
    }
  }
  std::vector<Var> inputs{x, w};
  if (b.valid()) inputs.push_back(b);
  return x.tape().record(std::move(out), inputs, [x, w, b, cin, cout, k, n, out_index](const Tensor& g) {
    std::vector<double> gcols(cout * k * n);
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t kidx = 0; kidx < k; ++kidx) {
        double* dst = gcols.data() + (co * k + kidx) * n;
        for (std::size_t pos = 0; pos < n; ++pos) dst[pos] = g[out_index(co, kidx, pos)];
      }
    if (needs(b)) {
      Tensor& gb = b.tape().grad_buffer(b);
      for (std::size_t co = 0; co < cout; ++co) {
        double s = 0.0;
        for (std::size_t i = 0; i < k * n; ++i) s += gcols[co * k * n + i];
        gb[co] += s;
      }
    }
    if (needs(x)) {
      kernels::gemm(false, false, cin, n, cout * k, w.value().data(), cout * k, gcols.data(), n, 1.0,
                    x.tape().grad_buffer(x).data(), n);
    }
    if (needs(w)) {
      kernels::gemm(false, true, cin, cout * k, n, x.value().data(), n, gcols.data(), n, 1.0,
                    w.tape().grad_buffer(w).data(), cout * k);
    }
  });
}

Var self_attention(Var qkv, std::size_t heads) {
  require(qkv.value().rank() == 2, "self_attention: qkv must be [N, 3C]");
  const std::size_t n = qkv.dim(0);
  require(qkv.dim(1) % 3 == 0, "self_attention: width not divisible by 3");
  const std::size_t c = qkv.dim(1) / 3;
  require(heads >= 1 && c % heads == 0, "self_attention: channels not divisible by heads");
  const std::size_t dh = c / heads;
  const std::size_t ld = 3 * c;
  const double inv = 1.0 / std::sqrt(double(dh));
  const double* base = qkv.value().data();
  Tensor out(Shape{n, c});
  std::vector<double> probs(heads * n * n);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    double* p = probs.data() + hd * n * n;
    kernels::gemm(false, true, n, n, dh, base + hd * dh, ld, base + c + hd * dh, ld, 0.0, p, n);
    for (std::size_t i = 0; i < n; ++i) {
      double* row = p + i * n;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] *= inv;
        mx = std::max(mx, row[j]);
      }
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        s += row[j];
      }
      for (std::size_t j = 0; j < n; ++j) row[j] /= s;
    }
    kernels::gemm(false, false, n, dh, n, p, n, base + 2 * c + hd * dh, ld, 0.0, out.data() + hd * dh, c);
  }
  return qkv.tape().record(std::move(out), {qkv},
                           [qkv, n, c, dh, ld, heads, inv, probs = std::move(probs)](const Tensor& g) {
    const double* base = qkv.value().data();
    Tensor& gq = qkv.tape().grad_buffer(qkv);
    std::vector<double> dp(n * n);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const double* p = probs.data() + hd * n * n;
      const double* go = g.data() + hd * dh;
      // dV = P^T dO
      kernels::gemm(true, false, n, dh, n, p, n, go, c, 1.0, gq.data() + 2 * c + hd * dh, ld);
      // dP = dO V^T
      kernels::gemm(false, true, n, n, dh, go, c, base + 2 * c + hd * dh, ld, 0.0, dp.data(), n);
      for (std::size_t i = 0; i < n; ++i) {
        const double dotv = kernels::dot(dp.data() + i * n, p + i * n, n);
        for (std::size_t j = 0; j < n; ++j) dp[i * n + j] = p[i * n + j] * (dp[i * n + j] - dotv) * inv;
      }
      // dQ = dS K, dK = dS^T Q
      kernels::gemm(false, false, n, dh, n, dp.data(), n, base + c + hd * dh, ld, 1.0, gq.data() + hd * dh, ld);
      kernels::gemm(true, false, n, dh, n, dp.data(), n, base + hd * dh, ld, 1.0, gq.data() + c + hd * dh, ld);
    }
  });
}

Var mean_rows(Var x) {
  require(x.value().rank() == 2, "mean_rows: rank-2 input required");
  const std::size_t n = x.dim(0), c = x.dim(1);
  require(n > 0, "mean_rows: empty input");
  Tensor out(Shape{c});
  for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0 / double(n), x.value().row(i), out.data(), c);
  return x.tape().record(std::move(out), {x}, [x, n, c](const Tensor& g) {
    Tensor& gx = x.tape().grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0 / double(n), g.data(), gx.row(i), c);
  });
}

Var pool_over_space(Var tokens, std::size_t frames) {
  require(tokens.value().rank() == 2, "pool_over_space: tokens must be [N, C]");
  const std::size_t n = tokens.dim(0), c = tokens.dim(1);
  require(frames > 0 && n % frames == 0, "pool_over_space: token count not divisible by frames");
  const std::size_t s = n / frames;
  const double w = 1.0 / double(s);
  Tensor out(Shape{frames, c});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t p = 0; p < s; ++p) kernels::axpy(w, tokens.value().row(t * s + p), out.row(t), c);
  return tokens.tape().record(std::move(out), {tokens}, [tokens, frames, s, c, w](const Tensor& g) {
    Tensor& gt = tokens.tape().grad_buffer(tokens);
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t p = 0; p < s; ++p) kernels::axpy(w, g.row(t), gt.row(t * s + p), c);
  });
}

Var pool_over_time(Var tokens, std::size_t frames) {
  require(tokens.value().rank() == 2, "pool_over_time: tokens must be [N, C]");
  const std::size_t n = tokens.dim(0), c = tokens.dim(1);
  require(frames > 0 && n % frames == 0, "pool_over_time: token count not divisible by frames");
  const std::size_t s = n / frames;
  const double w = 1.0 / double(frames);
  Tensor out(Shape{s, c});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t p = 0; p < s; ++p) kernels::axpy(w, tokens.value().row(t * s + p), out.row(p), c);
  return tokens.tape().record(std::move(out), {tokens}, [tokens, frames, s, c, w](const Tensor& g) {
    Tensor& gt = tokens.tape().grad_buffer(tokens);
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t p = 0; p < s; ++p) kernels::axpy(w, g.row(p), gt.row(t * s + p), c);
  });
}

Var add_frame_bias(Var grid, Var bias) {
  require(grid.value().rank() == 4, "add_frame_bias: grid must be [C, T, H, W]");
  const std::size_t c = grid.dim(0), t = grid.dim(1), hw = grid.dim(2) * grid.dim(3);
  require(bias.value().rank() == 2 && bias.dim(0) == t && bias.dim(1) == c,
          "add_frame_bias: bias must be [T, C]");
  Tensor out = grid.value();
  const Tensor& bv = bias.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t f = 0; f < t; ++f) {
      double* o = out.data() + (ch * t + f) * hw;
      const double v = bv[f * c + ch];
      for (std::size_t i = 0; i < hw; ++i) o[i] += v;
    }
  return grid.tape().record(std::move(out), {grid, bias}, [grid, bias, c, t, hw](const Tensor& g) {
    accumulate(grid, g);
    if (needs(bias)) {
      Tensor& gb = bias.tape().grad_buffer(bias);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t f = 0; f < t; ++f) {
          const double* gg = g.data() + (ch * t + f) * hw;
          double s = 0.0;
          for (std::size_t i = 0; i < hw; ++i) s += gg[i];
          gb[f * c + ch] += s;
        }
    }
  });
}

Var straight_through(Var z, const Tensor& quantized) {
  require(z.shape() == quantized.shape(), "straight_through: shape mismatch");
  return z.tape().record(quantized, {z}, [z](const Tensor& g) { accumulate(z, g); });
}

Var mse(Var x, const Tensor& target) {
  require(x.value().size() == target.size(), "mse: size mismatch");
  const std::size_t n = x.value().size();
  require(n > 0, "mse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x.value()[i] - target[i];
    s += d * d;
  }
  return x.tape().record(Tensor::scalar(s / double(n)), {x}, [x, target, n](const Tensor& g) {
    Tensor& gx = x.tape().grad_buffer(x);
    const double k = 2.0 * g[0] / double(n);
    for (std::size_t i = 0; i < n; ++i) gx[i] += k * (x.value()[i] - target[i]);
  });
}

}  // namespace ctsl::ops
