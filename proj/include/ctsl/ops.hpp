#pragma once

// Differentiable operations recorded on a Tape.
//
// Layout conventions: video-like grids are [C, T, H, W]; token matrices are
// [N, C] with N = T * H * W enumerated in row-major (t, h, w) order.

#include <array>
#include <cstddef>
#include <vector>

#include "ctsl/autograd.hpp"

namespace ctsl::ops {

struct Conv3dSpec {
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> padding{0, 0, 0};
  std::size_t groups = 1;
};

Shape conv3d_output_shape(const Shape& input, const Shape& weight, const Conv3dSpec& spec);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var gelu(Var a);
Var reshape(Var a, Shape shape);
Var transpose(Var a);  // rank 2
Var concat_rows(const std::vector<Var>& parts);  // along axis 0

// x [N, Cin], w [Cout, Cin], b [Cout] (b may be invalid) -> [N, Cout]
Var linear(Var x, Var w, Var b);
Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
Var softmax_rows(Var x);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-6);

// x [Cin, T, H, W], w [Cout, Cin / groups, kt, kh, kw], b [Cout] or invalid.
Var conv3d(Var x, Var w, Var b, const Conv3dSpec& spec);
// Transposed convolution whose stride equals its kernel (non-overlapping
// patches). x [Cin, T, H, W], w [Cin, Cout, kt, kh, kw], b [Cout].
Var conv_transpose3d_patch(Var x, Var w, Var b);

// qkv [N, 3C] -> [N, C]; C must be divisible by heads.
Var self_attention(Var qkv, std::size_t heads);

Var mean_rows(Var x);  // [N, C] -> [C]
// tokens [T * S, C] -> [T, C], mean over the S spatial positions of each frame.
Var pool_over_space(Var tokens, std::size_t frames);
// tokens [T * S, C] -> [S, C], mean over frames.
Var pool_over_time(Var tokens, std::size_t frames);
// grid [C, T, H, W] + bias [T, C] broadcast over (H, W).
Var add_frame_bias(Var grid, Var bias);

// Forward value `quantized`, gradient passed to z unchanged.
Var straight_through(Var z, const Tensor& quantized);

// mean((x - target)^2) with target held constant.
Var mse(Var x, const Tensor& target);

}  // namespace ctsl::ops
