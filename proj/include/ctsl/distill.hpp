#pragma once

// Stage I: the student encodes short-axis crops, an EMA teacher encodes the
// long-axis views, and the student is trained on a temperature-scaled KL term
// plus an InfoNCE term between two temporal crops of each patient.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ctsl/encoder.hpp"
#include "ctsl/synthcine.hpp"

namespace ctsl::distill {

struct StageIConfig {
  double tau = 0.1;
  double tau_c = 0.2;
  double lambda = 1.0;
  double ema_momentum = 0.996;
  double lr = 5e-5;
  double weight_decay = 1e-5;
  std::size_t batch_size = 16;
  std::size_t epochs = 50;
  std::size_t lr_step = 30;
  double lr_gamma = 0.1;
  std::size_t crop_jitter = 2;  // max frame offset between anchor and positive crops

  void validate() const;
};

// tau^2 * KL(softmax(student / tau) || softmax(teacher / tau)). The teacher
// side is a constant; when `grad` is given it receives d loss / d student.
double kl_distill_loss(const Tensor& student, const Tensor& teacher, double tau, Tensor* grad = nullptr);

// InfoNCE over L2-normalised rows: the positive of anchor i is positive row i,
// its negatives are the positive rows of the other patients.
double motion_contrastive_loss(const Tensor& anchors, const Tensor& positives, double tau_c,
                               Tensor* grad_anchors = nullptr, Tensor* grad_positives = nullptr);

// teacher <- m * teacher + (1 - m) * student, parameter by parameter.
void ema_update(const ParameterList& teacher, const std::vector<const Parameter*>& student, double momentum);
void ema_update(encoder::EncoderWeights& teacher, const encoder::EncoderWeights& student, double momentum);

// Parameters the Stage-I optimiser updates (everything but the teacher-only
// view fusion).
ParameterList trainable_student_parameters(encoder::EncoderWeights& student);

struct CropPlan {
  std::size_t anchor_start = 0;
  std::size_t positive_start = 0;
};

struct LossParts {
  double total = 0.0;
  double kl = 0.0;
  double contrastive = 0.0;
};

// Mean KL over the batch plus lambda * InfoNCE. Student gradients are added to
// `grads` when it is non-null.
LossParts stage1_batch_loss(const encoder::EncoderWeights& student, const encoder::EncoderWeights& teacher,
                            const std::vector<const StudyRecord*>& batch, const std::vector<CropPlan>& crops,
                            const StageIConfig& cfg, GradientStore* grads);

struct StageIResult {
  encoder::EncoderWeights student;
  encoder::EncoderWeights teacher;
  std::vector<LossParts> epoch_log;  // per-epoch mean over batches
};

// Studies must already be ROI-cropped. Throws on an empty dataset or when no
// batch of at least two studies can be formed.
StageIResult train_stage1(const std::vector<StudyRecord>& studies, const encoder::EncoderConfig& enc_cfg,
                          const StageIConfig& cfg, std::uint64_t seed);

// Same loop continuing from given weights.
StageIResult train_stage1(const std::vector<StudyRecord>& studies, encoder::EncoderWeights student,
                          const StageIConfig& cfg, std::uint64_t seed);

}  // namespace ctsl::distill
