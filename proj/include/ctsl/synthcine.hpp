#pragma once

// Synthetic multi-view 4D cine studies with a planted risk signal.
//
// The phantom is a contracting, slightly elliptical myocardial shell around a
// long axis that runs through the short-axis stack. Short-axis (SA) slices cut
// it perpendicular to the axis; the three long-axis views (CH2/CH3/CH4) are
// planes containing the axis at 0, 60 and 120 degrees, with a small in-plane
// tilt per view. Contraction amplitude is a decreasing function of the hidden
// risk, and survival times follow an exponential hazard in that risk.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ctsl/tensor.hpp"

namespace ctsl {

enum class View { SA = 0, CH2 = 1, CH3 = 2, CH4 = 3 };

inline constexpr std::array<View, 4> kAllViews{View::SA, View::CH2, View::CH3, View::CH4};
inline constexpr std::array<View, 3> kLongAxisViews{View::CH2, View::CH3, View::CH4};

std::string_view view_name(View v);
View parse_view(std::string_view name);

// H x W x T x D cine volume stored as float32, row-major with depth fastest.
struct VoxelVideo {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t frames = 0;
  std::size_t depth = 0;
  double spacing = 1.0;
  std::vector<float> data;

  static VoxelVideo zeros(std::size_t h, std::size_t w, std::size_t t, std::size_t d);

  std::size_t index(std::size_t y, std::size_t x, std::size_t t, std::size_t d) const {
    return ((y * width + x) * frames + t) * depth + d;
  }
  float& at(std::size_t y, std::size_t x, std::size_t t, std::size_t d) { return data[index(y, x, t, d)]; }
  float at(std::size_t y, std::size_t x, std::size_t t, std::size_t d) const { return data[index(y, x, t, d)]; }

  // One H x W frame at (t, d) as doubles, row-major.
  std::vector<double> frame(std::size_t t, std::size_t d) const;
  // Network layout [D, T, H, W].
  Tensor to_dthw() const;
  // Frames start, start+1, ... (mod T), `length` of them.
  VoxelVideo temporal_crop(std::size_t start, std::size_t length) const;

  // Throws std::invalid_argument on zero dimensions, size mismatch or non-finite values.
  void validate() const;

  friend bool operator==(const VoxelVideo&, const VoxelVideo&) = default;
};

struct StudyRecord {
  std::string study_id;
  std::array<VoxelVideo, 4> views;  // indexed by View
  std::vector<double> ehr;
  double time = 0.0;
  int event = 0;
  double latent_risk = 0.0;  // synthesis truth; never part of the model-facing EHR

  const VoxelVideo& view(View v) const { return views[static_cast<std::size_t>(v)]; }
  VoxelVideo& view(View v) { return views[static_cast<std::size_t>(v)]; }

  void validate() const;
};

struct PhantomParams {
  std::size_t height = 40;
  std::size_t width = 40;
  std::size_t frames = 16;
  std::size_t depth = 8;

  // Shell axis position in SA pixel coordinates; image centre when unset.
  std::optional<double> center_y;
  std::optional<double> center_x;
  double center_jitter = 2.0;

  double radius = 9.0;  // basal radius, pixels
  double radius_jitter = 0.75;
  double ring_width = 1.6;
  double ellipticity = 0.12;

  double amplitude_min = 0.5;  // contraction amplitude range, pixels
  double amplitude_max = 4.0;
  double noise_sd = 0.03;  // static texture, identical across frames
  double view_tilt_deg = 5.0;

  std::size_t ehr_dim = 8;
  std::size_t ehr_informative = 2;
  double ehr_signal = 0.35;  // loading of latent risk on informative covariates

  double baseline_hazard = 0.1;
  double beta_true = 2.0;
  double censoring_fraction = 0.2;

  // Throws std::invalid_argument when the geometry or rates are unusable.
  void validate() const;

  static PhantomParams desk() { return PhantomParams{}; }
  // 96 x 96 ROI-sized frames, 24 frames, 24 slices.
  static PhantomParams full_size();
};

// Monotone decreasing map from latent risk to contraction amplitude.
double contraction_amplitude(const PhantomParams& params, double latent_risk);

// Rate of the exponential censoring distribution that censors the requested
// fraction of the population in expectation.
double censoring_rate(const PhantomParams& params);

StudyRecord generate_study(const PhantomParams& params, std::uint64_t seed);

// n studies with ids study_0000.. and per-study seeds derived from `seed`.
std::vector<StudyRecord> generate_cohort(const PhantomParams& params, std::size_t n, std::uint64_t seed);

}  // namespace ctsl
