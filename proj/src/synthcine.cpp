#include "ctsl/synthcine.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "ctsl/rng.hpp"

namespace ctsl {
namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Geometry {
  double cy, cx;
  double radius;
  double amplitude;
  double axis_angle;  // orientation of the ellipse major axis
};

// Radius of the shell at normalised height z in [0, 1] (base to apex), polar
// angle theta and cardiac phase s in [0, 1].
double shell_radius(const PhantomParams& p, const Geometry& g, double z, double theta, double s) {
  const double taper = 1.0 - 0.35 * z * z;
  const double ellipse = 1.0 + p.ellipticity * std::cos(2.0 * (theta - g.axis_angle));
  return taper * ellipse * (g.radius - g.amplitude * s);
}

double tissue(const PhantomParams& p, double rho, double r) {
  const double w = p.ring_width;
  const double wall = std::exp(-(rho - r) * (rho - r) / (2.0 * w * w));
  const double pool = 0.45 * sigmoid((r - 1.5 * w - rho) / 0.8);
  return wall + pool;
}

// Cardiac phase: 0 at end-diastole (t = 0), 1 at end-systole (t = T / 2).
double phase(std::size_t t, std::size_t frames) {
  const double s = std::sin(std::numbers::pi * double(t) / double(frames));
  return s * s;
}

void normalize(VoxelVideo& v) {
  float lo = v.data.front(), hi = v.data.front();
  for (float x : v.data) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  const float span = hi - lo;
  for (float& x : v.data) x = span > 0.0f ? (x - lo) / span : 0.0f;
}

VoxelVideo render_short_axis(const PhantomParams& p, const Geometry& g, const std::vector<double>& texture) {
  VoxelVideo v = VoxelVideo::zeros(p.height, p.width, p.frames, p.depth);
  for (std::size_t d = 0; d < p.depth; ++d) {
    const double z = p.depth > 1 ? double(d) / double(p.depth - 1) : 0.0;
    for (std::size_t t = 0; t < p.frames; ++t) {
      const double s = phase(t, p.frames);
      for (std::size_t y = 0; y < p.height; ++y)
        for (std::size_t x = 0; x < p.width; ++x) {
          const double dy = double(y) - g.cy, dx = double(x) - g.cx;
          const double rho = std::hypot(dy, dx);
          const double r = shell_radius(p, g, z, std::atan2(dy, dx), s);
          const double val = tissue(p, rho, r) + texture[(y * p.width + x) * p.depth + d];
          v.at(y, x, t, d) = static_cast<float>(val);
        }
    }
  }
  normalize(v);
  return v;
}

VoxelVideo render_long_axis(const PhantomParams& p, const Geometry& g, double plane_angle, double tilt,
                            const std::vector<double>& texture) {
  VoxelVideo v = VoxelVideo::zeros(p.height, p.width, p.frames, p.depth);
  const double ey = std::sin(plane_angle), ex = std::cos(plane_angle);
  const double ny = ex, nx = -ey;  // plane normal in SA coordinates
  const double top = 0.2 * double(p.height), len = 0.6 * double(p.height);
  const double yc = 0.5 * double(p.height - 1), xc = 0.5 * double(p.width - 1);
  const double ct = std::cos(tilt), st = std::sin(tilt);
  for (std::size_t d = 0; d < p.depth; ++d) {
    const double offset =
        (double(d) - 0.5 * double(p.depth - 1)) * (1.6 * g.radius / double(std::max<std::size_t>(p.depth, 1)));
    for (std::size_t t = 0; t < p.frames; ++t) {
      const double s = phase(t, p.frames);
      for (std::size_t y = 0; y < p.height; ++y)
        for (std::size_t x = 0; x < p.width; ++x) {
          const double ry = double(y) - yc, rx = double(x) - xc;
          const double yy = ct * ry - st * rx + yc;
          const double xx = st * ry + ct * rx + xc;
          const double z = (yy - top) / len;
          const double u = xx - xc;
          const double py = offset * ny + u * ey;
          const double px = offset * nx + u * ex;
          const double rho = std::hypot(py, px);
          const double zc = std::clamp(z, 0.0, 1.0);
          const double r = shell_radius(p, g, zc, std::atan2(py, px), s);
          // Fade the shell out beyond base and apex.
          const double extent = sigmoid(z / 0.03) * sigmoid((1.0 - z) / 0.03);
          const double val = extent * tissue(p, rho, r) + texture[(y * p.width + x) * p.depth + d];
          v.at(y, x, t, d) = static_cast<float>(val);
        }
    }
  }
  normalize(v);
  return v;
}

}  // namespace

std::string_view view_name(View v) {
  switch (v) {
    case View::SA: return "SA";
    case View::CH2: return "CH2";
    case View::CH3: return "CH3";
    case View::CH4: return "CH4";
  }
  return "?";
}

View parse_view(std::string_view name) {
  for (View v : kAllViews) {
    if (view_name(v) == name) return v;
  }
  throw std::invalid_argument("unknown view '" + std::string(name) + "'");
}

VoxelVideo VoxelVideo::zeros(std::size_t h, std::size_t w, std::size_t t, std::size_t d) {
  VoxelVideo v;
  v.height = h;
  v.width = w;
  v.frames = t;
  v.depth = d;
  v.data.assign(h * w * t * d, 0.0f);
  return v;
}

std::vector<double> VoxelVideo::frame(std::size_t t, std::size_t d) const {
  std::vector<double> out(height * width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) out[y * width + x] = at(y, x, t, d);
  return out;
}

Tensor VoxelVideo::to_dthw() const {
  Tensor out(Shape{depth, frames, height, width});
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t d = 0; d < depth; ++d) {
          out[((d * frames + t) * height + y) * width + x] = at(y, x, t, d);
        }
  return out;
}

VoxelVideo VoxelVideo::temporal_crop(std::size_t start, std::size_t length) const {
  if (length == 0 || length > frames) throw std::invalid_argument("temporal_crop: bad length");
  VoxelVideo out = zeros(height, width, length, depth);
  out.spacing = spacing;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t t = 0; t < length; ++t)
        for (std::size_t d = 0; d < depth; ++d) out.at(y, x, t, d) = at(y, x, (start + t) % frames, d);
  return out;
}

void VoxelVideo::validate() const {
  if (height == 0 || width == 0 || frames == 0 || depth == 0) {
    throw std::invalid_argument("voxel video: all dimensions must be >= 1");
  }
  if (data.size() != height * width * frames * depth) {
    throw std::invalid_argument("voxel video: payload does not match dimensions");
  }
  for (float v : data) {
    if (!std::isfinite(v)) throw std::invalid_argument("voxel video: non-finite value");
  }
}

void StudyRecord::validate() const {
  if (!(time > 0.0) || !std::isfinite(time)) throw std::invalid_argument("study " + study_id + ": time must be > 0");
  if (event != 0 && event != 1) throw std::invalid_argument("study " + study_id + ": event must be 0 or 1");
  for (const VoxelVideo& v : views) v.validate();
  const std::size_t frames = views[0].frames;
  for (const VoxelVideo& v : views) {
    if (v.frames != frames) throw std::invalid_argument("study " + study_id + ": views disagree on T");
  }
}

PhantomParams PhantomParams::full_size() {
  PhantomParams p;
  p.height = 96;
  p.width = 96;
  p.frames = 24;
  p.depth = 24;
  p.radius = 26.0;
  p.radius_jitter = 2.0;
  p.ring_width = 4.0;
  p.amplitude_min = 1.5;
  p.amplitude_max = 11.0;
  p.center_jitter = 4.0;
  return p;
}

void PhantomParams::validate() const {
  if (height == 0 || width == 0 || frames == 0 || depth == 0) {
    throw std::invalid_argument("phantom: dimensions must be positive");
  }
  if (!(radius > 0.0) || !(ring_width > 0.0)) throw std::invalid_argument("phantom: radius and ring width must be positive");
  if (amplitude_min < 0.0 || amplitude_max < amplitude_min) {
    throw std::invalid_argument("phantom: amplitude range must satisfy 0 <= min <= max");
  }
  if (amplitude_max >= radius - radius_jitter) {
    throw std::invalid_argument("phantom: contraction amplitude exceeds the ring radius");
  }
  if (ellipticity < 0.0 || ellipticity >= 0.5) throw std::invalid_argument("phantom: ellipticity must be in [0, 0.5)");
  if (ehr_informative > ehr_dim) throw std::invalid_argument("phantom: more informative covariates than EHR columns");
  if (!(baseline_hazard > 0.0)) throw std::invalid_argument("phantom: baseline hazard must be positive");
  if (censoring_fraction < 0.0 || censoring_fraction >= 1.0) {
    throw std::invalid_argument("phantom: censoring fraction must be in [0, 1)");
  }
}

double contraction_amplitude(const PhantomParams& params, double latent_risk) {
  return params.amplitude_min + (params.amplitude_max - params.amplitude_min) * (1.0 - normal_cdf(latent_risk));
}

double censoring_rate(const PhantomParams& p) {
  if (p.censoring_fraction <= 0.0) return 0.0;
  // Expected censored fraction E_L[c / (c + h0 exp(beta L))], L ~ N(0, 1),
  // by midpoint quadrature; increasing in c, so bisect on log c.
  auto fraction = [&](double c) {
    constexpr int kSteps = 1600;
    constexpr double kLo = -8.0, kHi = 8.0;
    const double h = (kHi - kLo) / kSteps;
    double num = 0.0, den = 0.0;
    for (int i = 0; i < kSteps; ++i) {
      const double l = kLo + (i + 0.5) * h;
      const double w = std::exp(-0.5 * l * l);
      const double rate = p.baseline_hazard * std::exp(p.beta_true * l);
      num += w * c / (c + rate);
      den += w;
    }
    return num / den;
  };
  double lo = std::log(p.baseline_hazard) - 30.0, hi = std::log(p.baseline_hazard) + 30.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (fraction(std::exp(mid)) < p.censoring_fraction) lo = mid; else hi = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

StudyRecord generate_study(const PhantomParams& params, std::uint64_t seed) {
  params.validate();
  const Rng root(seed);
  StudyRecord rec;
  char id[32];
  std::snprintf(id, sizeof(id), "s%llu", static_cast<unsigned long long>(seed));
  rec.study_id = id;

  Rng risk_rng = root.fork(1);
  rec.latent_risk = risk_rng.normal();

  Rng geo_rng = root.fork(2);
  Geometry g{};
  g.cy = params.center_y.value_or(0.5 * double(params.height - 1)) + geo_rng.uniform(-1.0, 1.0) * params.center_jitter;
  g.cx = params.center_x.value_or(0.5 * double(params.width - 1)) + geo_rng.uniform(-1.0, 1.0) * params.center_jitter;
  g.radius = params.radius + geo_rng.uniform(-1.0, 1.0) * params.radius_jitter;
  g.axis_angle = geo_rng.uniform(0.0, std::numbers::pi);
  g.amplitude = contraction_amplitude(params, rec.latent_risk);
  std::array<double, 3> tilts{};
  for (double& t : tilts) t = geo_rng.uniform(-1.0, 1.0) * params.view_tilt_deg * std::numbers::pi / 180.0;

  Rng tex_rng = root.fork(3);
  std::array<std::vector<double>, 4> textures;
  for (auto& tex : textures) {
    tex.resize(params.height * params.width * params.depth);
    for (double& v : tex) v = params.noise_sd * tex_rng.normal();
  }

  rec.view(View::SA) = render_short_axis(params, g, textures[0]);
  const std::array<double, 3> plane_angles{0.0, std::numbers::pi / 3.0, 2.0 * std::numbers::pi / 3.0};
  for (std::size_t i = 0; i < 3; ++i) {
    rec.view(kLongAxisViews[i]) = render_long_axis(params, g, plane_angles[i], tilts[i], textures[i + 1]);
  }

  Rng ehr_rng = root.fork(4);
  rec.ehr.resize(params.ehr_dim);
  for (std::size_t k = 0; k < params.ehr_dim; ++k) {
    const double noise = ehr_rng.normal();
    rec.ehr[k] = (k < params.ehr_informative ? params.ehr_signal * rec.latent_risk : 0.0) + noise;
  }

  Rng surv_rng = root.fork(5);
  const double event_time = surv_rng.exponential(params.baseline_hazard * std::exp(params.beta_true * rec.latent_risk));
  const double c_rate = censoring_rate(params);
  const double censor_time = c_rate > 0.0 ? surv_rng.exponential(c_rate) : INFINITY;
  if (event_time <= censor_time) {
    rec.time = event_time;
    rec.event = 1;
  } else {
    rec.time = censor_time;
    rec.event = 0;
  }
  return rec;
}

std::vector<StudyRecord> generate_cohort(const PhantomParams& params, std::size_t n, std::uint64_t seed) {
  std::vector<StudyRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    StudyRecord rec = generate_study(params, seed * 1000003ULL + i);
    char id[32];
    std::snprintf(id, sizeof(id), "study_%04zu", i);
    rec.study_id = id;
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace ctsl
