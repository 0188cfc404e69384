#pragma once

// Depth-wise spatial aggregation and a small Uniformer-style video backbone.
//
// Aggregation runs one 3D convolution per depth slice (a grouped convolution
// with groups = D), concatenates the D maps along channels and projects them
// back to a fixed width with a 1x1x1 convolution. The backbone is a patch stem
// (stride 1x2x2) followed by local blocks (depthwise 3x3x3 mixing + MLP) and
// global blocks (multi-head self-attention + MLP).

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "ctsl/autograd.hpp"
#include "ctsl/synthcine.hpp"

namespace ctsl::encoder {

struct EncoderConfig {
  std::size_t depth = 8;  // D of the input volumes
  std::size_t agg_channels = 64;
  std::size_t embed_dim = 512;
  std::size_t heads = 8;
  std::size_t local_blocks = 2;
  std::size_t global_blocks = 2;
  std::size_t mlp_ratio = 2;
  std::size_t teacher_views = 3;
  double init_std = 0.02;

  void validate() const;
};

struct Block {
  bool global = false;
  Parameter norm1_gamma, norm1_beta;
  Parameter mix_w, mix_b;  // local: depthwise conv [E, 1, 3, 3, 3]; global: qkv [3E, E]
  Parameter proj_w, proj_b;  // global only: attention output projection [E, E]
  Parameter norm2_gamma, norm2_beta;
  Parameter fc1_w, fc1_b, fc2_w, fc2_b;
};

// All trainable tensors of one encoder. The view-fusion projection is used
// only on the teacher path but is kept in every weight set so that student and
// teacher have the same structure.
class EncoderWeights {
 public:
  static EncoderWeights init(const EncoderConfig& cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  ParameterList parameters();
  std::vector<const Parameter*> parameters() const;

  Parameter agg_w, agg_b;  // [C_a * D, 1, 3, 4, 4]
  Parameter agg_proj_w, agg_proj_b;  // [C_a, C_a * D, 1, 1, 1]
  Parameter fusion_w, fusion_b;  // [C_a, 3 * C_a, 1, 1, 1]
  Parameter stem_w, stem_b;  // [E, C_a, 1, 2, 2]
  std::vector<Block> blocks;
  Parameter norm_gamma, norm_beta;

 private:
  EncoderConfig cfg_;
};

// Query sets taken from the final token grid.
struct MotionQueries {
  Tensor z_tau;  // [T', E] mean over space per frame
  Tensor z_sigma;  // [H'' * W'', E] mean over frames per position
  Tensor pooled;  // [E] mean over all tokens
};

struct EncodedVars {
  Var z_tau, z_sigma, pooled;
  Var grid;  // aggregated [C_a, T', H', W'] grid the backbone consumed
};

// Throws std::invalid_argument for odd T, s not divisible by 4 (or H/4 odd,
// which the stride-2 stem cannot halve), or a depth
// that differs from the configuration.
void check_input(const EncoderConfig& cfg, std::size_t height, std::size_t width, std::size_t frames,
                 std::size_t depth);

// video [D, T, H, W] -> [C_a * D, T/2, H/4, W/4], the concatenated per-depth maps.
Var depthwise_feature_maps(const EncoderWeights& w, Var video);
// video [D, T, H, W] -> [C_a, T/2, H/4, W/4]
Var spatial_aggregate(const EncoderWeights& w, Var video);
// Long-axis grids concatenated along channels and fused back to C_a.
Var fuse_views(const EncoderWeights& w, const std::vector<Var>& grids);
// Backbone and query pooling on an aggregated grid.
EncodedVars encode(const EncoderWeights& w, Var grid);

// Student forward on one video.
EncodedVars encode_student(const EncoderWeights& w, Tape& tape, const VoxelVideo& video);
// Teacher forward on the long-axis videos.
EncodedVars encode_teacher(const EncoderWeights& w, Tape& tape, const std::vector<const VoxelVideo*>& views);

// Gradient-free conveniences.
MotionQueries queries_of(const EncodedVars& vars);
MotionQueries encode_video(const EncoderWeights& w, const VoxelVideo& video);
MotionQueries encode_long_axis(const EncoderWeights& w, const std::vector<const VoxelVideo*>& views);

}  // namespace ctsl::encoder
