#include "ctsl/distill.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "ctsl/adam.hpp"
#include "ctsl/rng.hpp"

namespace ctsl::distill {
namespace {

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

std::vector<double> log_softmax(const double* z, std::size_t n, double inv_temp) {
  double mx = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, z[i] * inv_temp);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(z[i] * inv_temp - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = z[i] * inv_temp - lse;
  return out;
}

}  // namespace

void StageIConfig::validate() const {
  if (!(tau > 0.0) || !(tau_c > 0.0)) throw std::invalid_argument("stage I: temperatures must be positive");
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw std::invalid_argument("stage I: EMA momentum must be in [0, 1]");
  if (batch_size < 2) throw std::invalid_argument("stage I: batch size must be at least 2");
  if (lr_step == 0) throw std::invalid_argument("stage I: lr_step must be positive");
  if (!(lr >= 0.0) || !(weight_decay >= 0.0) || !(lambda >= 0.0)) {
    throw std::invalid_argument("stage I: lr, weight decay and lambda must be non-negative");
  }
}

double kl_distill_loss(const Tensor& student, const Tensor& teacher, double tau, Tensor* grad) {
  if (!(tau > 0.0)) throw std::invalid_argument("kl_distill_loss: tau must be positive");
  if (student.size() != teacher.size() || student.empty()) throw std::invalid_argument("kl_distill_loss: size mismatch");
  require_finite(student, "kl_distill_loss");
  require_finite(teacher, "kl_distill_loss");
  const std::size_t n = student.size();
  const auto lp = log_softmax(student.data(), n, 1.0 / tau);
  const auto lq = log_softmax(teacher.data(), n, 1.0 / tau);
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  kl = std::max(kl, 0.0);
  if (grad != nullptr) {
    *grad = Tensor(student.shape());
    // d KL / d logit_j = p_j (log p_j - log q_j - KL); logits = z / tau.
    for (std::size_t i = 0; i < n; ++i) (*grad)[i] = tau * std::exp(lp[i]) * (lp[i] - lq[i] - kl);
  }
  return tau * tau * kl;
}

double motion_contrastive_loss(const Tensor& anchors, const Tensor& positives, double tau_c, Tensor* grad_anchors,
                               Tensor* grad_positives) {
  if (!(tau_c > 0.0)) throw std::invalid_argument("motion_contrastive_loss: tau_c must be positive");
  if (anchors.rank() != 2 || anchors.shape() != positives.shape()) {
    throw std::invalid_argument("motion_contrastive_loss: anchors and positives must be equal [B, C] matrices");
  }
  const std::size_t b = anchors.dim(0), c = anchors.dim(1);
  if (b < 2) throw std::invalid_argument("motion_contrastive_loss: need at least two patients for negatives");
  require_finite(anchors, "motion_contrastive_loss");
  require_finite(positives, "motion_contrastive_loss");

  auto normalise = [&](const Tensor& m, std::vector<double>& norms) {
    Tensor out = m;
    norms.resize(b);
    for (std::size_t i = 0; i < b; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += m.row(i)[k] * m.row(i)[k];
      norms[i] = std::sqrt(s);
      if (norms[i] == 0.0) throw std::invalid_argument("motion_contrastive_loss: zero-norm row");
      for (std::size_t k = 0; k < c; ++k) out.row(i)[k] /= norms[i];
    }
    return out;
  };
  std::vector<double> na, np;
  const Tensor a = normalise(anchors, na);
  const Tensor p = normalise(positives, np);

  // probs[i][j] = softmax_j(<a_i, p_j> / tau_c)
  std::vector<double> probs(b * b);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> s(b);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < b; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < c; ++k) d += a.row(i)[k] * p.row(j)[k];
      s[j] = d / tau_c;
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < b; ++j) z += std::exp(s[j] - mx);
    loss += mx + std::log(z) - s[i];
    for (std::size_t j = 0; j < b; ++j) probs[i * b + j] = std::exp(s[j] - mx) / z;
  }
  loss /= double(b);

  if (grad_anchors != nullptr || grad_positives != nullptr) {
    Tensor ga(Shape{b, c}), gp(Shape{b, c});
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) {
        const double ds = (probs[i * b + j] - (i == j ? 1.0 : 0.0)) / (double(b) * tau_c);
        for (std::size_t k = 0; k < c; ++k) {
          ga.row(i)[k] += ds * p.row(j)[k];
          gp.row(j)[k] += ds * a.row(i)[k];
        }
      }
    // Back through the row normalisation: (I - u u^T) g / |x|.
    auto unnormalise = [&](Tensor& g, const Tensor& u, const std::vector<double>& norms) {
      for (std::size_t i = 0; i < b; ++i) {
        double d = 0.0;
        for (std::size_t k = 0; k < c; ++k) d += g.row(i)[k] * u.row(i)[k];
        for (std::size_t k = 0; k < c; ++k) g.row(i)[k] = (g.row(i)[k] - d * u.row(i)[k]) / norms[i];
      }
    };
    unnormalise(ga, a, na);
    unnormalise(gp, p, np);
    if (grad_anchors) *grad_anchors = std::move(ga);
    if (grad_positives) *grad_positives = std::move(gp);
  }
  return loss;
}

void ema_update(const ParameterList& teacher, const std::vector<const Parameter*>& student, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw std::invalid_argument("ema_update: momentum must be in [0, 1]");
  if (teacher.size() != student.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i]->name != student[i]->name || teacher[i]->value.shape() != student[i]->value.shape()) {
      throw std::invalid_argument("ema_update: structure mismatch at " + teacher[i]->name);
    }
  }
  const double rest = 1.0 - momentum;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    double* t = teacher[i]->value.data();
    const double* s = student[i]->value.data();
    const std::size_t n = teacher[i]->value.size();
    // Written as a step towards the student so that equal weights stay put
    // bit for bit; m = 0 copies outright.
    if (momentum == 0.0) {
      std::copy(s, s + n, t);
    } else {
      for (std::size_t k = 0; k < n; ++k) t[k] += rest * (s[k] - t[k]);
    }
  }
}

void ema_update(encoder::EncoderWeights& teacher, const encoder::EncoderWeights& student, double momentum) {
  ema_update(teacher.parameters(), student.parameters(), momentum);
}

ParameterList trainable_student_parameters(encoder::EncoderWeights& student) {
  ParameterList all = student.parameters();
  std::erase_if(all, [&](const Parameter* p) { return p == &student.fusion_w || p == &student.fusion_b; });
  return all;
}

LossParts stage1_batch_loss(const encoder::EncoderWeights& student, const encoder::EncoderWeights& teacher,
                            const std::vector<const StudyRecord*>& batch, const std::vector<CropPlan>& crops,
                            const StageIConfig& cfg, GradientStore* grads) {
  const std::size_t b = batch.size();
  if (b < 2) throw std::invalid_argument("stage I: batch needs at least two studies");
  if (crops.size() != b) throw std::invalid_argument("stage I: one crop plan per study required");
  const std::size_t e = student.config().embed_dim;

  const bool train = grads != nullptr;
  std::vector<std::unique_ptr<Tape>> tapes;
  std::vector<Var> pooled;
  Tensor anchors(Shape{b, e}), positives(Shape{b, e});
  std::vector<Tensor> teacher_pooled;
  for (std::size_t i = 0; i < b; ++i) {
    const StudyRecord& s = *batch[i];
    const VoxelVideo& sa = s.view(View::SA);
    const std::size_t len = sa.frames / 2;
    for (int which = 0; which < 2; ++which) {
      const std::size_t start = which == 0 ? crops[i].anchor_start : crops[i].positive_start;
      tapes.push_back(std::make_unique<Tape>(grads, train));
      const auto vars = encoder::encode_student(student, *tapes.back(), sa.temporal_crop(start, len));
      pooled.push_back(vars.pooled);
      Tensor& dst = which == 0 ? anchors : positives;
      std::copy(vars.pooled.value().data(), vars.pooled.value().data() + e, dst.row(i));
    }
    std::vector<const VoxelVideo*> views;
    for (View v : kLongAxisViews) views.push_back(&s.view(v));
    teacher_pooled.push_back(encoder::encode_long_axis(teacher, views).pooled);
  }

  LossParts parts;
  std::vector<Tensor> kl_grads(b);
  for (std::size_t i = 0; i < b; ++i) {
    Tensor row(Shape{e}, std::vector<double>(anchors.row(i), anchors.row(i) + e));
    parts.kl += kl_distill_loss(row, teacher_pooled[i], cfg.tau, train ? &kl_grads[i] : nullptr);
  }
  parts.kl /= double(b);
  Tensor ga, gp;
  parts.contrastive = motion_contrastive_loss(anchors, positives, cfg.tau_c, train ? &ga : nullptr, train ? &gp : nullptr);
  parts.total = parts.kl + cfg.lambda * parts.contrastive;

  if (train) {
    for (std::size_t i = 0; i < b; ++i) {
      Tensor seed_a(Shape{e}), seed_p(Shape{e});
      for (std::size_t k = 0; k < e; ++k) {
        seed_a[k] = kl_grads[i][k] / double(b) + cfg.lambda * ga.row(i)[k];
        seed_p[k] = cfg.lambda * gp.row(i)[k];
      }
      tapes[2 * i]->backward(pooled[2 * i], &seed_a);
      tapes[2 * i].reset();
      tapes[2 * i + 1]->backward(pooled[2 * i + 1], &seed_p);
      tapes[2 * i + 1].reset();
    }
  }
  return parts;
}

StageIResult train_stage1(const std::vector<StudyRecord>& studies, const encoder::EncoderConfig& enc_cfg,
                          const StageIConfig& cfg, std::uint64_t seed) {
  return train_stage1(studies, encoder::EncoderWeights::init(enc_cfg, Rng(seed).fork(11).seed()), cfg, seed);
}

StageIResult train_stage1(const std::vector<StudyRecord>& studies, encoder::EncoderWeights student,
                          const StageIConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (studies.empty()) throw std::invalid_argument("stage I: empty dataset");
  if (studies.size() < 2) throw std::invalid_argument("stage I: need at least two studies to form a batch");
  StageIResult result;
  result.teacher = student;
  result.student = std::move(student);
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.weight_decay = cfg.weight_decay;
  Adam opt(trainable_student_parameters(result.student), acfg);
  Rng rng = Rng(seed).fork(12);

  std::vector<std::size_t> order(studies.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(step_lr(cfg.lr, epoch, cfg.lr_step, cfg.lr_gamma));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    LossParts sum;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      if (end - begin < 2) break;
      std::vector<const StudyRecord*> batch;
      std::vector<CropPlan> crops;
      for (std::size_t k = begin; k < end; ++k) {
        const StudyRecord& s = studies[order[k]];
        const std::size_t t = s.view(View::SA).frames;
        const long jitter = long(rng.index(2 * cfg.crop_jitter + 1)) - long(cfg.crop_jitter);
        CropPlan plan;
        plan.anchor_start = rng.index(t);
        plan.positive_start = std::size_t(((long(plan.anchor_start) + jitter) % long(t) + long(t)) % long(t));
        batch.push_back(&s);
        crops.push_back(plan);
      }
      GradientStore grads;
      const LossParts parts = stage1_batch_loss(result.student, result.teacher, batch, crops, cfg, &grads);
      opt.step(grads);
      ema_update(result.teacher, result.student, cfg.ema_momentum);
      sum.total += parts.total;
      sum.kl += parts.kl;
      sum.contrastive += parts.contrastive;
      ++batches;
    }
    if (batches == 0) throw std::invalid_argument("stage I: no batch of at least two studies");
    sum.total /= double(batches);
    sum.kl /= double(batches);
    sum.contrastive /= double(batches);
    result.epoch_log.push_back(sum);
  }
  return result;
}

}  // namespace ctsl::distill
