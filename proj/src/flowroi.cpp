#include "ctsl/flowroi.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace ctsl::flowroi {
namespace {

// Six polynomial coefficients per pixel: 1, x, y, x^2, y^2, xy.
struct PolyImage {
  std::size_t height = 0, width = 0;
  std::vector<std::array<double, 6>> coef;
};

long clampi(long v, long lo, long hi) { return std::max(lo, std::min(v, hi)); }

Image gaussian_blur(const Image& src, double sigma) {
  if (sigma <= 0.0) return src;
  const long radius = std::max<long>(1, long(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double s = 0.0;
  for (long i = -radius; i <= radius; ++i) s += k[i + radius] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
  for (double& v : k) v /= s;
  const long h = long(src.height), w = long(src.width);
  Image tmp = src, out = src;
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long i = -radius; i <= radius; ++i) acc += k[i + radius] * src.pixels[y * w + clampi(x + i, 0, w - 1)];
      tmp.pixels[y * w + x] = acc;
    }
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp.pixels[clampi(y + i, 0, h - 1) * w + x];
      out.pixels[y * w + x] = acc;
    }
  return out;
}

double sample_bilinear(const std::vector<double>& img, std::size_t h, std::size_t w, double y, double x) {
  const double yc = std::clamp(y, 0.0, double(h - 1)), xc = std::clamp(x, 0.0, double(w - 1));
  const std::size_t y0 = std::size_t(yc), x0 = std::size_t(xc);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = yc - double(y0), fx = xc - double(x0);
  return (1 - fy) * ((1 - fx) * img[y0 * w + x0] + fx * img[y0 * w + x1]) +
         fy * ((1 - fx) * img[y1 * w + x0] + fx * img[y1 * w + x1]);
}

Image resize(const Image& src, std::size_t h, std::size_t w) {
  Image out{h, w, std::vector<double>(h * w)};
  const double sy = double(src.height) / double(h), sx = double(src.width) / double(w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      out.pixels[y * w + x] =
          sample_bilinear(src.pixels, src.height, src.width, (double(y) + 0.5) * sy - 0.5, (double(x) + 0.5) * sx - 0.5);
    }
  return out;
}

// Weighted least-squares fit of a quadratic polynomial in each pixel
// neighbourhood with Gaussian applicability (normalised convolution with full
// certainty, replicated borders).
PolyImage poly_expand(const Image& img, std::size_t n, double sigma) {
  const long r = long(n);
  std::vector<double> g(2 * r + 1);
  double gs = 0.0;
  for (long i = -r; i <= r; ++i) gs += g[i + r] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
  for (double& v : g) v /= gs;

  // Gram matrix of the basis under the applicability.
  Eigen::Matrix<double, 6, 6> gram = Eigen::Matrix<double, 6, 6>::Zero();
  for (long y = -r; y <= r; ++y)
    for (long x = -r; x <= r; ++x) {
      const double a = g[y + r] * g[x + r];
      const Eigen::Matrix<double, 6, 1> b(1.0, double(x), double(y), double(x * x), double(y * y), double(x * y));
      gram += a * b * b.transpose();
    }
  const Eigen::Matrix<double, 6, 6> gram_inv = gram.inverse();

  const long h = long(img.height), w = long(img.width);
  // Horizontal pass: moments 0, 1, 2 in x.
  std::vector<std::array<double, 3>> hx(h * w);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      std::array<double, 3> m{0, 0, 0};
      for (long i = -r; i <= r; ++i) {
        const double v = g[i + r] * img.pixels[y * w + clampi(x + i, 0, w - 1)];
        m[0] += v;
        m[1] += double(i) * v;
        m[2] += double(i * i) * v;
      }
      hx[y * w + x] = m;
    }
  PolyImage out{img.height, img.width, std::vector<std::array<double, 6>>(h * w)};
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double c1 = 0, cx = 0, cy = 0, cxx = 0, cyy = 0, cxy = 0;
      for (long j = -r; j <= r; ++j) {
        const auto& m = hx[clampi(y + j, 0, h - 1) * w + x];
        const double gj = g[j + r];
        c1 += gj * m[0];
        cx += gj * m[1];
        cxx += gj * m[2];
        cy += gj * double(j) * m[0];
        cyy += gj * double(j * j) * m[0];
        cxy += gj * double(j) * m[1];
      }
      const Eigen::Matrix<double, 6, 1> c(c1, cx, cy, cxx, cyy, cxy);
      const Eigen::Matrix<double, 6, 1> coef = gram_inv * c;
      for (int k = 0; k < 6; ++k) out.coef[y * w + x][k] = coef[k];
    }
  return out;
}

// Five accumulated entries per pixel: G11, G12, G22, h1, h2.
using Matrices = std::vector<std::array<double, 5>>;

Matrices update_matrices(const PolyImage& p1, const PolyImage& p2, const std::vector<double>& flow) {
  const std::size_t h = p1.height, w = p1.width;
  Matrices m(h * w);
  // Coefficient planes of the second image for bilinear sampling.
  std::array<std::vector<double>, 5> planes;
  for (int k = 0; k < 5; ++k) planes[k].resize(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    planes[0][i] = p2.coef[i][1];
    planes[1][i] = p2.coef[i][2];
    planes[2][i] = p2.coef[i][3];
    planes[3][i] = p2.coef[i][4];
    planes[4][i] = p2.coef[i][5];
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      const double fx = flow[2 * i], fy = flow[2 * i + 1];
      const double sx = double(x) + fx, sy = double(y) + fy;
      std::array<double, 5> out{0, 0, 0, 0, 0};
      if (sx >= 0.0 && sy >= 0.0 && sx <= double(w - 1) && sy <= double(h - 1)) {
        const auto& c1 = p1.coef[i];
        const double b2x = sample_bilinear(planes[0], h, w, sy, sx);
        const double b2y = sample_bilinear(planes[1], h, w, sy, sx);
        const double a2xx = sample_bilinear(planes[2], h, w, sy, sx);
        const double a2yy = sample_bilinear(planes[3], h, w, sy, sx);
        const double a2xy = sample_bilinear(planes[4], h, w, sy, sx);
        const double a11 = 0.5 * (c1[3] + a2xx);
        const double a22 = 0.5 * (c1[4] + a2yy);
        const double a12 = 0.25 * (c1[5] + a2xy);
        const double db1 = -0.5 * (b2x - c1[1]) + a11 * fx + a12 * fy;
        const double db2 = -0.5 * (b2y - c1[2]) + a12 * fx + a22 * fy;
        out[0] = a11 * a11 + a12 * a12;
        out[1] = a12 * (a11 + a22);
        out[2] = a12 * a12 + a22 * a22;
        out[3] = a11 * db1 + a12 * db2;
        out[4] = a12 * db1 + a22 * db2;
      }
      m[i] = out;
    }
  return m;
}

Matrices box_blur(const Matrices& m, std::size_t h, std::size_t w, std::size_t window) {
  const long r = long(window / 2);
  Matrices tmp(h * w), out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::array<double, 5> acc{0, 0, 0, 0, 0};
      for (long i = -r; i <= r; ++i) {
        const auto& v = m[y * w + clampi(long(x) + i, 0, long(w) - 1)];
        for (int k = 0; k < 5; ++k) acc[k] += v[k];
      }
      tmp[y * w + x] = acc;
    }
  const double norm = 1.0 / double((2 * r + 1) * (2 * r + 1));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::array<double, 5> acc{0, 0, 0, 0, 0};
      for (long i = -r; i <= r; ++i) {
        const auto& v = tmp[clampi(long(y) + i, 0, long(h) - 1) * w + x];
        for (int k = 0; k < 5; ++k) acc[k] += v[k];
      }
      for (int k = 0; k < 5; ++k) acc[k] *= norm;
      out[y * w + x] = acc;
    }
  return out;
}

void solve_flow(const Matrices& m, std::vector<double>& flow) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& v = m[i];
    const double idet = 1.0 / (v[0] * v[2] - v[1] * v[1] + 1e-3);
    flow[2 * i] = (v[2] * v[3] - v[1] * v[4]) * idet;
    flow[2 * i + 1] = (v[0] * v[4] - v[1] * v[3]) * idet;
  }
}

void check_image(const Image& img, const char* name) {
  if (img.pixels.size() != img.height * img.width) throw std::invalid_argument(std::string("farneback: ") + name + " size mismatch");
  for (double v : img.pixels) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string("farneback: non-finite value in ") + name);
  }
}

}  // namespace

double MotionField::total_magnitude() const {
  double s = 0.0;
  for (std::size_t i = 0; i < height * width; ++i) s += std::hypot(flow[2 * i], flow[2 * i + 1]);
  return s;
}

MotionField farneback_flow(const Image& frame_a, const Image& frame_b, const FlowConfig& cfg) {
  check_image(frame_a, "frame_a");
  check_image(frame_b, "frame_b");
  if (frame_a.height != frame_b.height || frame_a.width != frame_b.width) {
    throw std::invalid_argument("farneback: frames differ in shape");
  }
  const std::size_t min_side = 2 * cfg.poly_n + 1;
  if (frame_a.height < min_side || frame_a.width < min_side) {
    throw std::invalid_argument("farneback: image smaller than the polynomial neighbourhood");
  }
  if (!(cfg.pyramid_scale > 0.0 && cfg.pyramid_scale < 1.0)) throw std::invalid_argument("farneback: pyramid scale must be in (0, 1)");
  if (cfg.levels == 0 || cfg.iterations == 0 || cfg.window_size == 0) throw std::invalid_argument("farneback: zero levels/iterations/window");

  // Pyramid levels whose images still fit the polynomial neighbourhood.
  std::size_t levels = 0;
  for (std::size_t k = 0; k < cfg.levels; ++k) {
    const double f = std::pow(cfg.pyramid_scale, double(k));
    const auto h = std::size_t(std::lround(double(frame_a.height) * f));
    const auto w = std::size_t(std::lround(double(frame_a.width) * f));
    if (h < min_side || w < min_side) break;
    levels = k + 1;
  }

  // The solver's regulariser assumes 8-bit intensities; frames arrive in [0, 1].
  Image scaled_a = frame_a, scaled_b = frame_b;
  for (double& v : scaled_a.pixels) v *= 255.0;
  for (double& v : scaled_b.pixels) v *= 255.0;

  std::vector<double> flow;
  std::size_t fh = 0, fw = 0;
  for (std::size_t k = levels; k-- > 0;) {
    const double f = std::pow(cfg.pyramid_scale, double(k));
    const auto h = std::size_t(std::lround(double(frame_a.height) * f));
    const auto w = std::size_t(std::lround(double(frame_a.width) * f));
    Image a = scaled_a, b = scaled_b;
    if (k > 0) {
      const double sigma = (1.0 / f - 1.0) * 0.5;
      a = resize(gaussian_blur(scaled_a, sigma), h, w);
      b = resize(gaussian_blur(scaled_b, sigma), h, w);
    }
    std::vector<double> next(h * w * 2, 0.0);
    if (!flow.empty()) {
      // Upsample the coarser estimate and rescale displacements.
      const double sy = double(fh) / double(h), sx = double(fw) / double(w);
      std::vector<double> fxp(fh * fw), fyp(fh * fw);
      for (std::size_t i = 0; i < fh * fw; ++i) {
        fxp[i] = flow[2 * i];
        fyp[i] = flow[2 * i + 1];
      }
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double yy = (double(y) + 0.5) * sy - 0.5, xx = (double(x) + 0.5) * sx - 0.5;
          next[2 * (y * w + x)] = sample_bilinear(fxp, fh, fw, yy, xx) / sx;
          next[2 * (y * w + x) + 1] = sample_bilinear(fyp, fh, fw, yy, xx) / sy;
        }
    }
    flow = std::move(next);
    fh = h;
    fw = w;
    const PolyImage pa = poly_expand(a, cfg.poly_n, cfg.poly_sigma);
    const PolyImage pb = poly_expand(b, cfg.poly_n, cfg.poly_sigma);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      const Matrices m = box_blur(update_matrices(pa, pb, flow), h, w, cfg.window_size);
      solve_flow(m, flow);
    }
  }
  MotionField field;
  field.height = frame_a.height;
  field.width = frame_a.width;
  field.flow = std::move(flow);
  return field;
}

ROIWindow locate_roi(const VoxelVideo& video, std::size_t size, const RoiConfig& cfg) {
  video.validate();
  if (video.frames < 2) throw std::invalid_argument("locate_roi: need at least two frames");
  if (size == 0 || size % 2 != 0) throw std::invalid_argument("locate_roi: window size must be even and positive");
  if (size > std::min(video.height, video.width)) throw std::invalid_argument("locate_roi: window larger than the image");

  const double floor = cfg.magnitude_floor_per_pixel * double(video.height * video.width);
  double sum_y = 0.0, sum_x = 0.0;
  std::size_t used = 0;
  for (std::size_t d = 0; d < video.depth; ++d) {
    Image prev{video.height, video.width, video.frame(0, d)};
    for (std::size_t t = 0; t + 1 < video.frames; ++t) {
      Image next{video.height, video.width, video.frame(t + 1, d)};
      const MotionField f = farneback_flow(prev, next, cfg.flow);
      double total = 0.0, cy = 0.0, cx = 0.0;
      for (std::size_t y = 0; y < f.height; ++y)
        for (std::size_t x = 0; x < f.width; ++x) {
          const double m = std::hypot(f.dx(y, x), f.dy(y, x));
          total += m;
          cy += m * double(y);
          cx += m * double(x);
        }
      if (total >= floor && total > 0.0) {
        sum_y += cy / total;
        sum_x += cx / total;
        ++used;
      }
      prev = std::move(next);
    }
  }

  ROIWindow win;
  win.size = size;
  win.fields_used = used;
  if (used == 0) {
    if (!cfg.fallback_to_center) throw std::runtime_error("locate_roi: no motion above the magnitude floor");
    win.fallback = true;
    win.motion_center_y = 0.5 * double(video.height);
    win.motion_center_x = 0.5 * double(video.width);
  } else {
    win.motion_center_y = sum_y / double(used);
    win.motion_center_x = sum_x / double(used);
  }
  const long half = long(size / 2);
  auto place = [&](double c, std::size_t extent) {
    const long top = std::clamp(long(std::lround(c)) - half, 0L, long(extent) - long(size));
    return double(top + half);
  };
  win.center_y = place(win.motion_center_y, video.height);
  win.center_x = place(win.motion_center_x, video.width);
  return win;
}

VoxelVideo crop_roi(const VoxelVideo& video, const ROIWindow& window) {
  video.validate();
  const std::size_t s = window.size;
  if (s == 0 || window.center_y < double(s / 2) || window.center_x < double(s / 2)) {
    throw std::out_of_range("crop_roi: window out of bounds");
  }
  const std::size_t top = window.top(), left = window.left();
  if (top + s > video.height || left + s > video.width) throw std::out_of_range("crop_roi: window out of bounds");
  VoxelVideo out = VoxelVideo::zeros(s, s, video.frames, video.depth);
  out.spacing = video.spacing;
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      for (std::size_t t = 0; t < video.frames; ++t)
        for (std::size_t d = 0; d < video.depth; ++d) out.at(y, x, t, d) = video.at(top + y, left + x, t, d);
  return out;
}

}  // namespace ctsl::flowroi
