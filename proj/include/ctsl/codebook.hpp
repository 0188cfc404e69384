#pragma once

// Stage II: temporal and spatial codebooks, cross-attention fusion of the two
// quantized query sets, and a small decoder that reconstructs the ROI video
// from the fused queries and the aggregated skip grid.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ctsl/autograd.hpp"
#include "ctsl/encoder.hpp"
#include "ctsl/synthcine.hpp"

namespace ctsl::codebook {

struct Codebook {
  Tensor entries;  // [n_e, d_c]
  std::vector<double> usage;  // assignments since the last reset
  Tensor ema_sums;  // running sum of assigned vectors, [n_e, d_c]
  std::vector<double> ema_counts;  // running assignment counts

  static Codebook zeros(std::size_t entries, std::size_t dim);
  std::size_t size() const { return entries.empty() ? 0 : entries.dim(0); }
  std::size_t dim() const { return entries.empty() ? 0 : entries.dim(1); }
  bool used() const;
  void reset_usage();
};

struct Quantized {
  Tensor values;  // [N, d_c], each row an entry of the codebook
  std::vector<std::size_t> indices;
};

// Nearest entry by squared L2 distance, ties to the lowest index.
Quantized vec_quant(const Tensor& queries, const Tensor& entries);
inline Quantized vec_quant(const Tensor& queries, const Codebook& book) { return vec_quant(queries, book.entries); }

// softmax(q_tau q_sigma^T / sqrt(d)) q_sigma
Tensor fuse(const Tensor& q_tau, const Tensor& q_sigma);
Var fuse(Var q_tau, Var q_sigma);

struct DecoderConfig {
  std::size_t query_dim = 512;
  std::size_t skip_channels = 64;
  std::size_t hidden_channels = 32;
  std::size_t out_depth = 8;
};

struct DecoderWeights {
  DecoderConfig cfg;
  Parameter skip_norm_g, skip_norm_b;  // [C_skip]: layer norm over channels at each grid position
  Parameter cond_w, cond_b;  // [C_skip, d_c]: per-frame conditioning from fused queries
  Parameter up1_w, up1_b;  // [C_skip, C_hidden, 1, 2, 2]
  Parameter up2_w, up2_b;  // [C_hidden, D, 2, 2, 2]

  static DecoderWeights init(const DecoderConfig& cfg, std::uint64_t seed);
  ParameterList parameters();
  std::vector<const Parameter*> parameters() const;
};

// fused [T', d_c], skip [C_skip, T', H', W'] -> [D, 2T', 4H', 4W']
Var decode(const DecoderWeights& w, Var fused, Var skip);

struct Stage2Parts {
  double total = 0.0;
  double reconstruction = 0.0;
  double commit_tau = 0.0;
  double commit_sigma = 0.0;
};

struct Stage2Forward {
  Var total;
  Stage2Parts parts;
  Quantized q_tau, q_sigma;
};

// Reconstruction MSE + alpha * (commitment_tau + commitment_sigma), each a
// mean over its elements. Codebook values enter as constants. With
// `straight_through` false the decoder sees the quantized rows without a path
// back to the queries.
Stage2Forward stage2_loss(Var z_tau, Var z_sigma, Var skip, const Tensor& video_dthw, const Codebook& book_tau,
                          const Codebook& book_sigma, const DecoderWeights& decoder, double alpha,
                          bool straight_through = true);

// Moves each entry toward the mean of the rows assigned to it:
// counts <- decay*counts + (1-decay)*n, sums likewise, then entries are
// sums / Laplace-smoothed counts. Also adds to `usage`.
void ema_update(Codebook& book, const Tensor& rows, const std::vector<std::size_t>& indices, double decay,
                double epsilon);

struct StageIIConfig {
  double alpha = 0.25;
  std::size_t epochs = 20;
  std::size_t codebook_size = 128;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t batch_size = 16;
  double ema_decay = 0.99;
  double ema_epsilon = 1e-5;
  std::size_t decoder_hidden = 32;
  bool finetune_encoder = false;
  bool reseed_dead_entries = true;

  void validate() const;
};

struct EpochRecord {
  Stage2Parts mean;  // over studies
  std::vector<double> usage_tau;
  std::vector<double> usage_sigma;
  std::size_t reseeded = 0;
  std::size_t steps = 0;  // studies quantized this epoch
};

struct StageIIResult {
  Codebook book_tau;
  Codebook book_sigma;
  DecoderWeights decoder;
  encoder::EncoderWeights encoder;  // changed only when finetuning
  std::vector<EpochRecord> epoch_log;
};

StageIIResult train_stage2(const std::vector<StudyRecord>& studies, const encoder::EncoderWeights& student,
                           const StageIIConfig& cfg, std::uint64_t seed);

struct Representation {
  Tensor q;  // [d_c]
  bool untrained_codebook = false;
};

// Token mean of the fused quantized queries.
Representation export_representation(const encoder::MotionQueries& queries, const Codebook& book_tau,
                                     const Codebook& book_sigma);
Representation export_representation(const StudyRecord& study, const encoder::EncoderWeights& student,
                                     const Codebook& book_tau, const Codebook& book_sigma);

}  // namespace ctsl::codebook
