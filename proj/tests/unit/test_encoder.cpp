#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "doctest.h"

#include "ctsl/encoder.hpp"
#include "ctsl/ops.hpp"
#include "test_util.hpp"

using namespace ctsl;
using namespace ctsl::encoder;

namespace {

EncoderConfig tiny_config(std::size_t depth) {
  EncoderConfig c;
  c.depth = depth;
  c.agg_channels = 4;
  c.embed_dim = 8;
  c.heads = 2;
  c.local_blocks = 1;
  c.global_blocks = 1;
  c.mlp_ratio = 2;
  return c;
}

VoxelVideo random_video(std::size_t s, std::size_t frames, std::size_t depth, Rng& rng) {
  VoxelVideo v = VoxelVideo::zeros(s, s, frames, depth);
  for (float& x : v.data) x = float(rng.uniform());
  return v;
}

// Every parameter, biases and norms included, drawn at unit-ish scale so the
// probe gradient is not buried under rounding.
void randomize(EncoderWeights& w, Rng& rng, double sd) {
  for (Parameter* p : w.parameters())
    for (double& v : p->value.values()) v = rng.normal(0.0, sd);
}

double probe(const EncoderWeights& w, const VoxelVideo& video) {
  const MotionQueries q = encode_video(w, video);
  double s = 0.0;
  for (double v : q.pooled.values()) s += v * v;
  return s;
}

}  // namespace

TEST_CASE("full-size per-depth maps are 64 x 12 x 24 x 24") {
  EncoderConfig cfg;
  cfg.depth = 24;
  const EncoderWeights w = EncoderWeights::init(cfg, 1);
  check_input(cfg, 96, 96, 24, 24);
  Tape tape(nullptr, false);
  const Var video = tape.constant(Tensor(Shape{24, 24, 96, 96}));
  const Var maps = depthwise_feature_maps(w, video);
  CHECK(maps.shape() == Shape{64 * 24, 12, 24, 24});
  // each depth contributes one 64-channel block
  const Var agg = spatial_aggregate(w, video);
  CHECK(agg.shape() == Shape{64, 12, 24, 24});
}

TEST_CASE("desk shape and query counts") {
  EncoderConfig cfg;
  cfg.depth = 8;
  const EncoderWeights w = EncoderWeights::init(cfg, 2);
  Rng rng(3);
  const VoxelVideo v = random_video(32, 16, 8, rng);
  Tape tape(nullptr, false);
  const EncodedVars out = encode_student(w, tape, v);
  CHECK(out.grid.shape() == Shape{64, 8, 8, 8});
  CHECK(out.z_tau.shape() == Shape{8, 512});
  CHECK(out.z_sigma.shape() == Shape{16, 512});
  CHECK(out.pooled.shape() == Shape{512});
}

TEST_CASE("shape contract holds across valid sizes") {
  for (auto [s, t, d] : std::vector<std::array<std::size_t, 3>>{{8, 2, 1}, {8, 4, 2}, {16, 6, 3}, {24, 2, 2}}) {
    CAPTURE(s);
    CAPTURE(t);
    const auto cfg = tiny_config(d);
    CHECK_NOTHROW(check_input(cfg, s, s, t, d));
    const EncoderWeights w = EncoderWeights::init(cfg, 4);
    Rng rng(5);
    Tape tape(nullptr, false);
    const EncodedVars out = encode_student(w, tape, random_video(s, t, d, rng));
    CHECK(out.grid.shape() == Shape{4, t / 2, s / 4, s / 4});
    CHECK(out.z_tau.shape() == Shape{t / 2, 8});
    CHECK(out.z_sigma.shape() == Shape{(s / 8) * (s / 8), 8});
  }
}

TEST_CASE("input validation") {
  const auto cfg = tiny_config(2);
  CHECK_THROWS_AS(check_input(cfg, 8, 8, 3, 2), std::invalid_argument);  // odd T
  CHECK_THROWS_AS(check_input(cfg, 10, 10, 4, 2), std::invalid_argument);  // s % 4
  CHECK_THROWS_AS(check_input(cfg, 12, 12, 4, 2), std::invalid_argument);  // H/4 odd
  CHECK_THROWS_AS(check_input(cfg, 8, 8, 4, 3), std::invalid_argument);  // depth mismatch
  const EncoderWeights w = EncoderWeights::init(cfg, 6);
  Rng rng(7);
  CHECK_THROWS_AS(encode_video(w, random_video(8, 3, 2, rng)), std::invalid_argument);
  const VoxelVideo a = random_video(8, 4, 2, rng), b = random_video(16, 4, 2, rng);
  CHECK_THROWS_AS(encode_long_axis(w, {&a, &a, &b}), std::invalid_argument);
}

TEST_CASE("zero input with zero biases aggregates to zero") {
  const auto cfg = tiny_config(2);
  const EncoderWeights w = EncoderWeights::init(cfg, 8);
  Tape tape(nullptr, false);
  const Var out = spatial_aggregate(w, tape.constant(Tensor(Shape{2, 4, 8, 8})));
  for (double v : out.value().values()) REQUIRE(v == 0.0);
}

TEST_CASE("pooled is the mean of both query sets") {
  const auto cfg = tiny_config(2);
  EncoderWeights w = EncoderWeights::init(cfg, 9);
  Rng rng(10);
  randomize(w, rng, 0.3);
  const MotionQueries q = encode_video(w, random_video(16, 4, 2, rng));
  for (std::size_t c = 0; c < 8; ++c) {
    double mt = 0.0, ms = 0.0;
    for (std::size_t i = 0; i < q.z_tau.dim(0); ++i) mt += q.z_tau.at({i, c});
    for (std::size_t i = 0; i < q.z_sigma.dim(0); ++i) ms += q.z_sigma.at({i, c});
    mt /= double(q.z_tau.dim(0));
    ms /= double(q.z_sigma.dim(0));
    CHECK(mt == doctest::Approx(q.pooled[c]).epsilon(1e-12));
    CHECK(ms == doctest::Approx(q.pooled[c]).epsilon(1e-12));
  }
}

TEST_CASE("temporal queries ignore the order of spatial positions") {
  // Pooling step alone, attention bypassed.
  const std::size_t frames = 3, space = 5, c = 4;
  Rng rng(11);
  const Tensor tokens = test::random_tensor({frames * space, c}, rng);
  std::vector<std::size_t> perm(space);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  Tensor permuted(tokens.shape());
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t s = 0; s < space; ++s)
      for (std::size_t k = 0; k < c; ++k) permuted.at({t * space + s, k}) = tokens.at({t * space + perm[s], k});
  Tape tape(nullptr, false);
  const Tensor a = ops::pool_over_space(tape.constant(tokens), frames).value();
  const Tensor b = ops::pool_over_space(tape.constant(permuted), frames).value();
  CHECK(test::relative_error(a, b) < 1e-14);
}

TEST_CASE("teacher on three identical views with averaging fusion equals the student") {
  const auto cfg = tiny_config(2);
  EncoderWeights w = EncoderWeights::init(cfg, 12);
  Rng rng(13);
  randomize(w, rng, 0.3);
  w.fusion_w.value.fill(0.0);
  w.fusion_b.value.fill(0.0);
  const std::size_t ca = cfg.agg_channels;
  for (std::size_t c = 0; c < ca; ++c)
    for (std::size_t v = 0; v < 3; ++v) w.fusion_w.value.at({c, v * ca + c, 0, 0, 0}) = 1.0 / 3.0;
  const VoxelVideo video = random_video(8, 4, 2, rng);
  const MotionQueries single = encode_video(w, video);
  const MotionQueries teacher = encode_long_axis(w, {&video, &video, &video});
  CHECK(test::relative_error(single.z_tau, teacher.z_tau) < 1e-12);
  CHECK(test::relative_error(single.z_sigma, teacher.z_sigma) < 1e-12);
  CHECK(test::relative_error(single.pooled, teacher.pooled) < 1e-12);
}

TEST_CASE("zero teacher grids propagate biases only") {
  const auto cfg = tiny_config(2);
  EncoderWeights w = EncoderWeights::init(cfg, 14);
  Rng rng(15);
  randomize(w, rng, 0.3);
  const VoxelVideo zero = VoxelVideo::zeros(8, 8, 4, 2);
  const MotionQueries a = encode_long_axis(w, {&zero, &zero, &zero});
  const MotionQueries b = encode_long_axis(w, {&zero, &zero, &zero});
  CHECK(a.pooled == b.pooled);
  CHECK(a.z_tau == b.z_tau);
  // only biases reach the output, so the aggregation kernels are irrelevant
  for (double& v : w.agg_w.value.values()) v = rng.normal();
  const MotionQueries c = encode_long_axis(w, {&zero, &zero, &zero});
  CHECK(test::relative_error(a.pooled, c.pooled) < 1e-14);
  CHECK(test::relative_error(a.z_sigma, c.z_sigma) < 1e-14);
}

TEST_CASE("inference is deterministic and init depends on the seed") {
  const auto cfg = tiny_config(2);
  const EncoderWeights w1 = EncoderWeights::init(cfg, 16), w2 = EncoderWeights::init(cfg, 16);
  const EncoderWeights w3 = EncoderWeights::init(cfg, 17);
  CHECK(w1.agg_w.value == w2.agg_w.value);
  CHECK_FALSE(w1.agg_w.value == w3.agg_w.value);
  for (double b : w1.agg_b.value.values()) CHECK(b == 0.0);
  Rng rng(18);
  const VoxelVideo v = random_video(8, 4, 2, rng);
  CHECK(encode_video(w1, v).pooled == encode_video(w2, v).pooled);
}

TEST_CASE("encoder gradients match finite differences on an 8x8x4x2 input") {
  const auto cfg = tiny_config(2);
  EncoderWeights w = EncoderWeights::init(cfg, 19);
  Rng rng(20);
  randomize(w, rng, 0.3);
  const VoxelVideo video = random_video(8, 4, 2, rng);

  GradientStore store;
  {
    Tape tape(&store, true);
    const EncodedVars out = encode_student(w, tape, video);
    const double n = double(out.pooled.value().size());
    const Var loss = ops::scale(ops::mse(out.pooled, Tensor(out.pooled.shape())), n);
    CHECK(loss.value().item() == doctest::Approx(probe(w, video)).epsilon(1e-12));
    tape.backward(loss);
  }
  for (Parameter* p : w.parameters()) {
    if (p == &w.fusion_w || p == &w.fusion_b) continue;  // teacher path only
    CAPTURE(p->name);
    const Tensor analytic = store.get(*p);
    const Tensor keep = p->value;
    const Tensor numeric = test::numeric_gradient(
        [&](const Tensor& x) {
          p->value = x;
          return probe(w, video);
        },
        keep);
    p->value = keep;
    CHECK(test::relative_error(analytic, numeric) < 1e-3);
  }
  CHECK(store.find(w.fusion_w) == nullptr);
}
