#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "doctest.h"

#include "ctsl/distill.hpp"
#include "ctsl/flowroi.hpp"
#include "test_util.hpp"

using namespace ctsl;
using namespace ctsl::distill;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

Tensor rows(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor(Shape{r, c}, std::move(v)); }

encoder::EncoderConfig tiny_encoder(std::size_t depth) {
  encoder::EncoderConfig c;
  c.depth = depth;
  c.agg_channels = 4;
  c.embed_dim = 8;
  c.heads = 2;
  c.local_blocks = 1;
  c.global_blocks = 1;
  return c;
}

std::vector<StudyRecord> tiny_studies(std::size_t n, std::size_t s, std::size_t frames, std::size_t depth,
                                      std::uint64_t seed) {
  PhantomParams p;
  p.height = s;
  p.width = s;
  p.frames = frames;
  p.depth = depth;
  p.radius = double(s) / 4.0;
  p.amplitude_max = std::min(p.amplitude_max, 0.5 * p.radius);
  p.amplitude_min = std::min(p.amplitude_min, 0.5 * p.amplitude_max);
  p.center_jitter = 0.0;
  return generate_cohort(p, n, seed);
}

// Studies cropped to the desk ROI, as the trainer expects.
std::vector<StudyRecord> desk_studies(std::size_t n, std::uint64_t seed) {
  PhantomParams p = PhantomParams();
  auto cohort = generate_cohort(p, n, seed);
  for (StudyRecord& r : cohort)
    for (View v : kAllViews) {
      const auto w = flowroi::locate_roi(r.view(v), 32);
      r.view(v) = flowroi::crop_roi(r.view(v), w);
    }
  return cohort;
}

}  // namespace

TEST_CASE("KL distillation examples") {
  CHECK(kl_distill_loss(vec({0.3, -1.0, 2.0}), vec({0.3, -1.0, 2.0}), 0.1) == 0.0);
  const double e = std::exp(1.0);
  const double p = e / (1.0 + e), q = 1.0 - p;
  const double expected = p * std::log(p / q) + q * std::log(q / p);
  CHECK(expected == doctest::Approx(0.4621).epsilon(1e-4));
  CHECK(kl_distill_loss(vec({1, 0}), vec({0, 1}), 1.0) == doctest::Approx(expected).epsilon(1e-12));
  // tau^2 scaling on a two-bin case: tau = 2 halves the logits
  const double p2 = 1.0 / (1.0 + std::exp(-0.5)), q2 = 1.0 - p2;
  CHECK(kl_distill_loss(vec({1, 0}), vec({0, 1}), 2.0) ==
        doctest::Approx(4.0 * (p2 * std::log(p2 / q2) + q2 * std::log(q2 / p2))).epsilon(1e-12));
}

TEST_CASE("KL flattens as the temperature grows") {
  const Tensor s = vec({0.5, -0.2, 1.4, 0.0}), t = vec({-0.3, 0.9, 0.1, 0.4});
  // The divergence itself vanishes; the tau^2 factor keeps the loss finite.
  auto divergence = [&](double tau) { return kl_distill_loss(s, t, tau) / (tau * tau); };
  CHECK(divergence(1.0) > divergence(10.0));
  CHECK(divergence(10.0) > divergence(100.0));
  CHECK(divergence(100.0) < 1e-4);
  // tau^2 KL tends to half the variance of (s - t) over the bins: 0.9025 / 2
  CHECK(kl_distill_loss(s, t, 1000.0) == doctest::Approx(0.45125).epsilon(1e-3));
}

TEST_CASE("KL is non-negative and zero only for equal distributions") {
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    const Tensor s = test::random_tensor({6}, rng), t = test::random_tensor({6}, rng);
    CHECK(kl_distill_loss(s, t, 0.5) > 0.0);
    // a constant shift leaves the softmax unchanged
    Tensor shifted = s;
    for (double& v : shifted.values()) v += 3.25;
    CHECK(kl_distill_loss(s, shifted, 0.5) == doctest::Approx(0.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(kl_distill_loss(vec({1, std::nan("")}), vec({0, 1}), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(kl_distill_loss(vec({1, 0}), vec({0, 1}), 0.0), std::invalid_argument);
}

TEST_CASE("KL gradient matches finite differences") {
  Rng rng(2);
  const Tensor s = test::random_tensor({7}, rng), t = test::random_tensor({7}, rng);
  Tensor g;
  kl_distill_loss(s, t, 0.3, &g);
  const Tensor num = test::numeric_gradient([&](const Tensor& x) { return kl_distill_loss(x, t, 0.3); }, s);
  CHECK(test::relative_error(g, num) < 1e-6);
}

TEST_CASE("InfoNCE examples") {
  // four mutually orthogonal unit vectors
  const Tensor a = rows(2, 4, {1, 0, 0, 0, 0, 1, 0, 0}), p = rows(2, 4, {0, 0, 1, 0, 0, 0, 0, 1});
  CHECK(motion_contrastive_loss(a, p, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // positives equal to anchors, anchors orthogonal to each other
  const Tensor a3 = rows(3, 3, {2, 0, 0, 0, 1, 0, 0, 0, 5});
  CHECK(motion_contrastive_loss(a3, a3, 0.05) < 0.01);
  // rows are normalised internally
  const Tensor scaled = rows(2, 4, {3, 0, 0, 0, 0, 0.5, 0, 0});
  CHECK(motion_contrastive_loss(scaled, p, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("InfoNCE errors") {
  CHECK_THROWS_AS(motion_contrastive_loss(rows(1, 2, {1, 0}), rows(1, 2, {0, 1}), 0.2), std::invalid_argument);
  CHECK_THROWS_AS(motion_contrastive_loss(rows(2, 2, {1, 0, 0, 0}), rows(2, 2, {0, 1, 1, 0}), 0.2),
                  std::invalid_argument);
  CHECK_THROWS_AS(motion_contrastive_loss(rows(2, 2, {1, 0, 0, 1}), rows(2, 2, {0, 1, 1, 0}), 0.0),
                  std::invalid_argument);
}

TEST_CASE("InfoNCE is invariant to patient order and to a common rotation") {
  Rng rng(3);
  const std::size_t b = 5, d = 6;
  const Tensor a = test::random_tensor({b, d}, rng), p = test::random_tensor({b, d}, rng);
  const double base = motion_contrastive_loss(a, p, 0.2);

  std::vector<std::size_t> perm(b);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  Tensor ap({b, d}), pp({b, d});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      ap.at({i, k}) = a.at({perm[i], k});
      pp.at({i, k}) = p.at({perm[i], k});
    }
  CHECK(motion_contrastive_loss(ap, pp, 0.2) == doctest::Approx(base).epsilon(1e-12));

  // random orthogonal matrix from Gram-Schmidt
  Tensor q = test::random_tensor({d, d}, rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += q.at({i, k}) * q.at({j, k});
      for (std::size_t k = 0; k < d; ++k) q.at({i, k}) -= dot * q.at({j, k});
    }
    double n = 0.0;
    for (std::size_t k = 0; k < d; ++k) n += q.at({i, k}) * q.at({i, k});
    for (std::size_t k = 0; k < d; ++k) q.at({i, k}) /= std::sqrt(n);
  }
  auto rotate = [&](const Tensor& x) {
    Tensor y({b, d});
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = 0; k < d; ++k) y.at({i, j}) += x.at({i, k}) * q.at({j, k});
    return y;
  };
  CHECK(std::abs(motion_contrastive_loss(rotate(a), rotate(p), 0.2) - base) < 1e-6);
}

TEST_CASE("InfoNCE gradients match finite differences") {
  Rng rng(4);
  const Tensor a = test::random_tensor({4, 5}, rng), p = test::random_tensor({4, 5}, rng);
  Tensor ga, gp;
  motion_contrastive_loss(a, p, 0.2, &ga, &gp);
  const Tensor na = test::numeric_gradient([&](const Tensor& x) { return motion_contrastive_loss(x, p, 0.2); }, a);
  const Tensor np = test::numeric_gradient([&](const Tensor& x) { return motion_contrastive_loss(a, x, 0.2); }, p);
  CHECK(test::relative_error(ga, na) < 1e-6);
  CHECK(test::relative_error(gp, np) < 1e-6);
}

TEST_CASE("EMA update arithmetic") {
  Parameter t{"w", vec({2.0, -1.0})}, s{"w", vec({4.0, 3.0})};
  ema_update({&t}, {&s}, 0.5);
  CHECK(t.value[0] == 3.0);
  CHECK(t.value[1] == 1.0);
  ema_update({&t}, {&s}, 1.0);
  CHECK(t.value[0] == 3.0);
  ema_update({&t}, {&s}, 0.0);
  CHECK(t.value == s.value);
  // idempotent once equal, for any momentum
  for (double m : {0.0, 0.3, 0.996, 1.0, 0.7}) {
    ema_update({&t}, {&s}, m);
    CHECK(t.value == s.value);
  }
  Parameter other{"w", vec({1.0, 2.0, 3.0})};
  CHECK_THROWS_AS(ema_update({&t}, {&other}, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(ema_update({&t}, {&s}, 1.5), std::invalid_argument);
}

TEST_CASE("EMA over whole encoders") {
  const auto cfg = tiny_encoder(2);
  encoder::EncoderWeights teacher = encoder::EncoderWeights::init(cfg, 1);
  const encoder::EncoderWeights student = encoder::EncoderWeights::init(cfg, 2);
  ema_update(teacher, student, 0.0);
  const auto tp = teacher.parameters();
  const auto sp = student.parameters();
  REQUIRE(tp.size() == sp.size());
  for (std::size_t i = 0; i < tp.size(); ++i) CHECK(tp[i]->value == sp[i]->value);
}

TEST_CASE("Stage I gradient matches finite differences, teacher gets none") {
  const auto cfg = tiny_encoder(2);
  encoder::EncoderWeights student = encoder::EncoderWeights::init(cfg, 3);
  Rng rng(4);
  for (Parameter* p : student.parameters())
    for (double& v : p->value.values()) v = rng.normal(0.0, 0.3);
  encoder::EncoderWeights teacher = student;
  for (Parameter* p : teacher.parameters())
    for (double& v : p->value.values()) v += rng.normal(0.0, 0.1);

  const auto studies = tiny_studies(3, 8, 8, 2, 5);
  std::vector<const StudyRecord*> batch;
  for (const auto& s : studies) batch.push_back(&s);
  const std::vector<CropPlan> crops{{0, 1}, {3, 2}, {6, 7}};
  StageIConfig sc;
  sc.tau = 0.5;

  GradientStore grads;
  stage1_batch_loss(student, teacher, batch, crops, sc, &grads);
  for (Parameter* p : teacher.parameters()) CHECK(grads.find(*p) == nullptr);

  for (Parameter* p : trainable_student_parameters(student)) {
    // the full check on every tensor is slow; the large ones get a slice
    CAPTURE(p->name);
    const Tensor analytic = grads.get(*p);
    const Tensor keep = p->value;
    const std::size_t n = std::min<std::size_t>(keep.size(), 40);
    Tensor a_slice({n}), n_slice({n});
    Tensor probe = keep;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = (i * 7919) % keep.size();
      const double h = 1e-5;
      probe[idx] = keep[idx] + h;
      p->value = probe;
      const double up = stage1_batch_loss(student, teacher, batch, crops, sc, nullptr).total;
      probe[idx] = keep[idx] - h;
      p->value = probe;
      const double down = stage1_batch_loss(student, teacher, batch, crops, sc, nullptr).total;
      probe[idx] = keep[idx];
      n_slice[i] = (up - down) / (2.0 * h);
      a_slice[i] = analytic[idx];
    }
    p->value = keep;
    CHECK(test::relative_error(a_slice, n_slice) < 1e-3);
  }
}

TEST_CASE("Stage I batch errors") {
  const auto cfg = tiny_encoder(2);
  const encoder::EncoderWeights w = encoder::EncoderWeights::init(cfg, 6);
  const auto studies = tiny_studies(2, 8, 8, 2, 7);
  StageIConfig sc;
  CHECK_THROWS_AS(stage1_batch_loss(w, w, {&studies[0]}, {{0, 0}}, sc, nullptr), std::invalid_argument);
  CHECK_THROWS_AS(stage1_batch_loss(w, w, {&studies[0], &studies[1]}, {{0, 0}}, sc, nullptr),
                  std::invalid_argument);
  CHECK_THROWS_AS(train_stage1({}, cfg, sc, 1), std::invalid_argument);
  CHECK_THROWS_AS(train_stage1({studies[0]}, cfg, sc, 1), std::invalid_argument);
  sc.tau = 0.0;
  CHECK_THROWS_AS(sc.validate(), std::invalid_argument);
  sc = StageIConfig();
  sc.ema_momentum = 1.5;
  CHECK_THROWS_AS(sc.validate(), std::invalid_argument);
}

TEST_CASE("Stage I is deterministic and lambda 0 leaves only KL") {
  const auto cfg = tiny_encoder(2);
  const auto studies = tiny_studies(6, 8, 8, 2, 8);
  StageIConfig sc;
  sc.epochs = 2;
  sc.batch_size = 3;
  const StageIResult a = train_stage1(studies, cfg, sc, 9), b = train_stage1(studies, cfg, sc, 9);
  REQUIRE(a.epoch_log.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(a.epoch_log[e].total == b.epoch_log[e].total);
    CHECK(a.epoch_log[e].kl == b.epoch_log[e].kl);
  }
  CHECK(a.student.agg_w.value == b.student.agg_w.value);

  sc.lambda = 0.0;
  const StageIResult k = train_stage1(studies, cfg, sc, 9);
  for (const LossParts& e : k.epoch_log) CHECK(e.total == e.kl);
  CHECK(k.epoch_log[0].kl > 0.0);
}

TEST_CASE("Stage I loss falls over five epochs on 16 desk studies") {
  const auto studies = desk_studies(16, 10);
  encoder::EncoderConfig cfg;
  cfg.depth = studies[0].view(View::SA).depth;
  StageIConfig sc;
  sc.epochs = 5;
  const StageIResult r = train_stage1(studies, cfg, sc, 11);
  REQUIRE(r.epoch_log.size() == 5);
  MESSAGE("epoch 1 " << r.epoch_log[0].total << ", epoch 5 " << r.epoch_log[4].total);
  CHECK(r.epoch_log[4].total < r.epoch_log[0].total);
}
