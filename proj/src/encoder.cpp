#include "ctsl/encoder.hpp"

#include <stdexcept>
#include <string>

#include "ctsl/ops.hpp"
#include "ctsl/rng.hpp"

namespace ctsl::encoder {
namespace {

Parameter make(std::string name, Shape shape) { return Parameter{std::move(name), Tensor(std::move(shape))}; }

void fill_normal(Parameter& p, Rng& rng, double sd) {
  for (double& v : p.value.values()) v = rng.truncated_normal(sd);
}

Parameter ones(std::string name, std::size_t n) { return Parameter{std::move(name), Tensor(Shape{n}, 1.0)}; }

ops::Conv3dSpec spec(std::array<std::size_t, 3> stride, std::array<std::size_t, 3> pad, std::size_t groups) {
  ops::Conv3dSpec s;
  s.stride = stride;
  s.padding = pad;
  s.groups = groups;
  return s;
}

// [C, T, H, W] grid -> [T*H*W, C] token matrix and back.
Var to_tokens(Var grid) {
  const std::size_t c = grid.dim(0);
  const std::size_t n = grid.value().size() / c;
  return ops::transpose(ops::reshape(grid, Shape{c, n}));
}

Var to_grid(Var tokens, const Shape& grid_shape) {
  return ops::reshape(ops::transpose(tokens), grid_shape);
}

Var mlp(Tape& tape, const Block& b, Var x) {
  Var h = ops::layer_norm_rows(x, tape.param(b.norm2_gamma), tape.param(b.norm2_beta));
  h = ops::gelu(ops::linear(h, tape.param(b.fc1_w), tape.param(b.fc1_b)));
  h = ops::linear(h, tape.param(b.fc2_w), tape.param(b.fc2_b));
  return ops::add(x, h);
}

Var run_block(Tape& tape, const Block& b, Var x, const Shape& grid_shape, std::size_t heads) {
  Var h = ops::layer_norm_rows(x, tape.param(b.norm1_gamma), tape.param(b.norm1_beta));
  if (b.global) {
    h = ops::linear(h, tape.param(b.mix_w), tape.param(b.mix_b));
    h = ops::self_attention(h, heads);
    h = ops::linear(h, tape.param(b.proj_w), tape.param(b.proj_b));
  } else {
    const std::size_t e = grid_shape[0];
    Var g = ops::conv3d(to_grid(h, grid_shape), tape.param(b.mix_w), tape.param(b.mix_b),
                        spec({1, 1, 1}, {1, 1, 1}, e));
    h = to_tokens(g);
  }
  return mlp(tape, b, ops::add(x, h));
}

}  // namespace

void EncoderConfig::validate() const {
  if (depth == 0 || agg_channels == 0 || embed_dim == 0 || heads == 0 || mlp_ratio == 0 || teacher_views == 0) {
    throw std::invalid_argument("encoder config: sizes must be positive");
  }
  if (embed_dim % heads != 0) throw std::invalid_argument("encoder config: embed_dim not divisible by heads");
  if (!(init_std > 0.0)) throw std::invalid_argument("encoder config: init_std must be positive");
}

EncoderWeights EncoderWeights::init(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t ca = cfg.agg_channels, e = cfg.embed_dim, d = cfg.depth, hid = cfg.mlp_ratio * cfg.embed_dim;
  EncoderWeights w;
  w.cfg_ = cfg;
  w.agg_w = make("agg.w", {ca * d, 1, 3, 4, 4});
  w.agg_b = make("agg.b", {ca * d});
  w.agg_proj_w = make("agg_proj.w", {ca, ca * d, 1, 1, 1});
  w.agg_proj_b = make("agg_proj.b", {ca});
  w.fusion_w = make("view_fusion.w", {ca, cfg.teacher_views * ca, 1, 1, 1});
  w.fusion_b = make("view_fusion.b", {ca});
  w.stem_w = make("stem.w", {e, ca, 1, 2, 2});
  w.stem_b = make("stem.b", {e});
  fill_normal(w.agg_w, rng, cfg.init_std);
  fill_normal(w.agg_proj_w, rng, cfg.init_std);
  fill_normal(w.stem_w, rng, cfg.init_std);
  // View fusion starts as the average of the views.
  for (std::size_t c = 0; c < ca; ++c)
    for (std::size_t v = 0; v < cfg.teacher_views; ++v)
      w.fusion_w.value[c * cfg.teacher_views * ca + v * ca + c] = 1.0 / double(cfg.teacher_views);

  const std::size_t nblocks = cfg.local_blocks + cfg.global_blocks;
  w.blocks.resize(nblocks);
  for (std::size_t i = 0; i < nblocks; ++i) {
    Block& b = w.blocks[i];
    const std::string pre = "block" + std::to_string(i) + ".";
    b.global = i >= cfg.local_blocks;
    b.norm1_gamma = ones(pre + "norm1.gamma", e);
    b.norm1_beta = make(pre + "norm1.beta", {e});
    if (b.global) {
      b.mix_w = make(pre + "qkv.w", {3 * e, e});
      b.mix_b = make(pre + "qkv.b", {3 * e});
      b.proj_w = make(pre + "attn_proj.w", {e, e});
      b.proj_b = make(pre + "attn_proj.b", {e});
      fill_normal(b.mix_w, rng, cfg.init_std);
      fill_normal(b.proj_w, rng, cfg.init_std);
    } else {
      b.mix_w = make(pre + "dwconv.w", {e, 1, 3, 3, 3});
      b.mix_b = make(pre + "dwconv.b", {e});
      fill_normal(b.mix_w, rng, cfg.init_std);
    }
    b.norm2_gamma = ones(pre + "norm2.gamma", e);
    b.norm2_beta = make(pre + "norm2.beta", {e});
    b.fc1_w = make(pre + "fc1.w", {hid, e});
    b.fc1_b = make(pre + "fc1.b", {hid});
    b.fc2_w = make(pre + "fc2.w", {e, hid});
    b.fc2_b = make(pre + "fc2.b", {e});
    fill_normal(b.fc1_w, rng, cfg.init_std);
    fill_normal(b.fc2_w, rng, cfg.init_std);
  }
  w.norm_gamma = ones("norm.gamma", e);
  w.norm_beta = make("norm.beta", {e});
  return w;
}

ParameterList EncoderWeights::parameters() {
  ParameterList out{&agg_w, &agg_b, &agg_proj_w, &agg_proj_b, &fusion_w, &fusion_b, &stem_w, &stem_b};
  for (Block& b : blocks) {
    out.insert(out.end(), {&b.norm1_gamma, &b.norm1_beta, &b.mix_w, &b.mix_b});
    if (b.global) out.insert(out.end(), {&b.proj_w, &b.proj_b});
    out.insert(out.end(), {&b.norm2_gamma, &b.norm2_beta, &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b});
  }
  out.insert(out.end(), {&norm_gamma, &norm_beta});
  return out;
}

std::vector<const Parameter*> EncoderWeights::parameters() const {
  ParameterList p = const_cast<EncoderWeights*>(this)->parameters();
  return {p.begin(), p.end()};
}

void check_input(const EncoderConfig& cfg, std::size_t height, std::size_t width, std::size_t frames,
                 std::size_t depth) {
  if (frames == 0 || frames % 2 != 0) throw std::invalid_argument("encoder: frame count T must be even");
  if (height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0) {
    throw std::invalid_argument("encoder: ROI size must be divisible by 4");
  }
  if ((height / 4) % 2 != 0 || (width / 4) % 2 != 0) {
    throw std::invalid_argument("encoder: aggregated grid must have even height and width for the stem");
  }
  if (depth != cfg.depth) {
    throw std::invalid_argument("encoder: input depth " + std::to_string(depth) + " does not match configured depth " +
                                std::to_string(cfg.depth));
  }
}

Var depthwise_feature_maps(const EncoderWeights& w, Var video) {
  if (video.value().rank() != 4) throw std::invalid_argument("encoder: video must be [D, T, H, W]");
  const Shape& s = video.shape();
  if (s[1] % 2 != 0) throw std::invalid_argument("encoder: frame count T must be even");
  if (s[2] % 4 != 0 || s[3] % 4 != 0) throw std::invalid_argument("encoder: ROI size must be divisible by 4");
  if (s[0] != w.config().depth) throw std::invalid_argument("encoder: input depth does not match configured depth");
  Tape& tape = video.tape();
  return ops::conv3d(video, tape.param(w.agg_w), tape.param(w.agg_b), spec({2, 4, 4}, {1, 0, 0}, s[0]));
}

Var spatial_aggregate(const EncoderWeights& w, Var video) {
  Var maps = depthwise_feature_maps(w, video);
  Tape& tape = video.tape();
  return ops::conv3d(maps, tape.param(w.agg_proj_w), tape.param(w.agg_proj_b), spec({1, 1, 1}, {0, 0, 0}, 1));
}

Var fuse_views(const EncoderWeights& w, const std::vector<Var>& grids) {
  if (grids.size() != w.config().teacher_views) throw std::invalid_argument("encoder: wrong number of teacher views");
  for (const Var& g : grids) {
    if (g.shape() != grids.front().shape()) throw std::invalid_argument("encoder: teacher view shapes differ");
  }
  Tape& tape = grids.front().tape();
  return ops::conv3d(ops::concat_rows(grids), tape.param(w.fusion_w), tape.param(w.fusion_b),
                     spec({1, 1, 1}, {0, 0, 0}, 1));
}

EncodedVars encode(const EncoderWeights& w, Var grid) {
  const EncoderConfig& cfg = w.config();
  if (grid.value().rank() != 4 || grid.dim(0) != cfg.agg_channels) {
    throw std::invalid_argument("encoder: grid must be [" + std::to_string(cfg.agg_channels) + ", T, H, W], got " +
                                shape_string(grid.shape()));
  }
  if (grid.dim(2) % 2 != 0 || grid.dim(3) % 2 != 0) {
    throw std::invalid_argument("encoder: grid height and width must be even for the stem");
  }
  Tape& tape = grid.tape();
  Var stem = ops::conv3d(grid, tape.param(w.stem_w), tape.param(w.stem_b), spec({1, 2, 2}, {0, 0, 0}, 1));
  const Shape grid_shape = stem.shape();
  const std::size_t frames = grid_shape[1];
  Var x = to_tokens(stem);
  for (const Block& b : w.blocks) x = run_block(tape, b, x, grid_shape, cfg.heads);
  x = ops::layer_norm_rows(x, tape.param(w.norm_gamma), tape.param(w.norm_beta));
  EncodedVars out;
  out.z_tau = ops::pool_over_space(x, frames);
  out.z_sigma = ops::pool_over_time(x, frames);
  out.pooled = ops::mean_rows(x);
  out.grid = grid;
  return out;
}

EncodedVars encode_student(const EncoderWeights& w, Tape& tape, const VoxelVideo& video) {
  check_input(w.config(), video.height, video.width, video.frames, video.depth);
  Var v = tape.constant(video.to_dthw());
  return encode(w, spatial_aggregate(w, v));
}

EncodedVars encode_teacher(const EncoderWeights& w, Tape& tape, const std::vector<const VoxelVideo*>& views) {
  std::vector<Var> grids;
  for (const VoxelVideo* v : views) {
    check_input(w.config(), v->height, v->width, v->frames, v->depth);
    grids.push_back(spatial_aggregate(w, tape.constant(v->to_dthw())));
  }
  return encode(w, fuse_views(w, grids));
}

MotionQueries queries_of(const EncodedVars& vars) {
  return MotionQueries{vars.z_tau.value(), vars.z_sigma.value(), vars.pooled.value()};
}

MotionQueries encode_video(const EncoderWeights& w, const VoxelVideo& video) {
  Tape tape(nullptr, false);
  return queries_of(encode_student(w, tape, video));
}

MotionQueries encode_long_axis(const EncoderWeights& w, const std::vector<const VoxelVideo*>& views) {
  Tape tape(nullptr, false);
  return queries_of(encode_teacher(w, tape, views));
}

}  // namespace ctsl::encoder
