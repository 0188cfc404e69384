#pragma once

// Mask-free myocardial motion localisation: dense two-frame optical flow by
// polynomial expansion (Farneback), flow-magnitude centroids, and a fixed
// s x s crop around their mean.

#include <cstddef>
#include <vector>

#include "ctsl/synthcine.hpp"

namespace ctsl::flowroi {

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // row-major

  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

struct FlowConfig {
  std::size_t levels = 3;
  double pyramid_scale = 0.5;
  std::size_t window_size = 9;
  std::size_t iterations = 3;
  std::size_t poly_n = 5;  // neighbourhood radius of the polynomial fit
  double poly_sigma = 1.1;
};

// Per-pixel displacement from frame a to frame b. Channel 0 is the horizontal
// (column) component, channel 1 the vertical (row) component.
struct MotionField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> flow;  // H x W x 2
  std::size_t frame_index = 0;
  std::size_t depth_index = 0;

  double dx(std::size_t y, std::size_t x) const { return flow[(y * width + x) * 2]; }
  double dy(std::size_t y, std::size_t x) const { return flow[(y * width + x) * 2 + 1]; }
  double total_magnitude() const;
};

MotionField farneback_flow(const Image& frame_a, const Image& frame_b, const FlowConfig& cfg = {});

struct ROIWindow {
  double center_y = 0.0;  // centre of the clamped window
  double center_x = 0.0;
  std::size_t size = 0;  // s, even
  double motion_center_y = 0.0;  // aggregated motion centroid before clamping
  double motion_center_x = 0.0;
  std::size_t fields_used = 0;
  bool fallback = false;  // true when no field carried enough motion

  std::size_t top() const { return static_cast<std::size_t>(center_y) - size / 2; }
  std::size_t left() const { return static_cast<std::size_t>(center_x) - size / 2; }
};

struct RoiConfig {
  FlowConfig flow;
  double magnitude_floor_per_pixel = 1e-3;
  bool fallback_to_center = true;
};

ROIWindow locate_roi(const VoxelVideo& video, std::size_t size, const RoiConfig& cfg = {});
VoxelVideo crop_roi(const VoxelVideo& video, const ROIWindow& window);

}  // namespace ctsl::flowroi
