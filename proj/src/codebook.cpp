#include "ctsl/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "ctsl/adam.hpp"
#include "ctsl/distill.hpp"
#include "ctsl/kernels.hpp"
#include "ctsl/ops.hpp"
#include "ctsl/rng.hpp"

namespace ctsl::codebook {
namespace {

Parameter make(std::string name, Shape shape) { return Parameter{std::move(name), Tensor(std::move(shape))}; }

struct Features {
  Tensor z_tau, z_sigma, skip, target;
};

void copy_row(const Tensor& src, std::size_t src_row, Tensor& dst, std::size_t dst_row) {
  const std::size_t c = src.dim(1);
  std::copy(src.row(src_row), src.row(src_row) + c, dst.row(dst_row));
}

// Fills every entry with a distinct data row where possible.
void init_from_rows(Codebook& book, const std::vector<const Tensor*>& pools, Rng& rng) {
  std::vector<std::pair<std::size_t, std::size_t>> refs;
  for (std::size_t p = 0; p < pools.size(); ++p)
    for (std::size_t r = 0; r < pools[p]->dim(0); ++r) refs.emplace_back(p, r);
  if (refs.empty()) throw std::invalid_argument("codebook: no rows to initialise from");
  std::shuffle(refs.begin(), refs.end(), rng.engine());
  for (std::size_t k = 0; k < book.size(); ++k) {
    const auto [p, r] = refs[k % refs.size()];
    copy_row(*pools[p], r, book.entries, k);
  }
  book.ema_sums = book.entries;
  std::fill(book.ema_counts.begin(), book.ema_counts.end(), 1.0);
}

std::size_t reseed_dead(Codebook& book, const std::vector<const Tensor*>& pools, Rng& rng) {
  std::size_t total = 0;
  for (const Tensor* t : pools) total += t->dim(0);
  std::size_t n = 0;
  for (std::size_t k = 0; k < book.size(); ++k) {
    if (book.usage[k] > 0.0) continue;
    std::size_t pick = rng.index(total);
    for (const Tensor* t : pools) {
      if (pick < t->dim(0)) {
        copy_row(*t, pick, book.entries, k);
        break;
      }
      pick -= t->dim(0);
    }
    copy_row(book.entries, k, book.ema_sums, k);
    book.ema_counts[k] = 1.0;
    ++n;
  }
  return n;
}

}  // namespace

Codebook Codebook::zeros(std::size_t entries, std::size_t dim) {
  if (entries == 0 || dim == 0) throw std::invalid_argument("codebook: sizes must be positive");
  Codebook b;
  b.entries = Tensor(Shape{entries, dim});
  b.usage.assign(entries, 0.0);
  b.ema_sums = Tensor(Shape{entries, dim});
  b.ema_counts.assign(entries, 0.0);
  return b;
}

bool Codebook::used() const {
  return std::any_of(usage.begin(), usage.end(), [](double u) { return u > 0.0; });
}

void Codebook::reset_usage() { std::fill(usage.begin(), usage.end(), 0.0); }

Quantized vec_quant(const Tensor& queries, const Tensor& entries) {
  if (entries.rank() != 2 || entries.dim(0) == 0) throw std::invalid_argument("vec_quant: empty codebook");
  if (queries.rank() != 2 || queries.dim(1) != entries.dim(1)) {
    throw std::invalid_argument("vec_quant: query width does not match codebook");
  }
  if (!queries.all_finite()) throw std::invalid_argument("vec_quant: non-finite query");
  const std::size_t n = queries.dim(0), ne = entries.dim(0), d = entries.dim(1);
  std::vector<double> dist(n * ne);
  kernels::sq_dist(queries.data(), n, entries.data(), ne, d, dist.data());
  Quantized out;
  out.values = Tensor(Shape{n, d});
  out.indices.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = dist.data() + i * ne;
    std::size_t best = 0;
    for (std::size_t k = 1; k < ne; ++k) {
      if (row[k] < row[best]) best = k;
    }
    out.indices[i] = best;
    copy_row(entries, best, out.values, i);
  }
  return out;
}

Tensor fuse(const Tensor& q_tau, const Tensor& q_sigma) {
  Tape tape(nullptr, false);
  return fuse(tape.constant(q_tau), tape.constant(q_sigma)).value();
}

Var fuse(Var q_tau, Var q_sigma) {
  if (q_tau.value().rank() != 2 || q_sigma.value().rank() != 2 || q_tau.dim(1) != q_sigma.dim(1)) {
    throw std::invalid_argument("fuse: query widths differ");
  }
  const double inv = 1.0 / std::sqrt(double(q_tau.dim(1)));
  Var scores = ops::scale(ops::matmul(q_tau, q_sigma, false, true), inv);
  return ops::matmul(ops::softmax_rows(scores), q_sigma);
}

DecoderWeights DecoderWeights::init(const DecoderConfig& cfg, std::uint64_t seed) {
  if (cfg.query_dim == 0 || cfg.skip_channels == 0 || cfg.hidden_channels == 0 || cfg.out_depth == 0) {
    throw std::invalid_argument("decoder: sizes must be positive");
  }
  Rng rng(seed);
  DecoderWeights w;
  w.cfg = cfg;
  w.skip_norm_g = make("decoder.skip_norm.g", {cfg.skip_channels});
  w.skip_norm_b = make("decoder.skip_norm.b", {cfg.skip_channels});
  w.skip_norm_g.value.fill(1.0);
  w.cond_w = make("decoder.cond.w", {cfg.skip_channels, cfg.query_dim});
  w.cond_b = make("decoder.cond.b", {cfg.skip_channels});
  w.up1_w = make("decoder.up1.w", {cfg.skip_channels, cfg.hidden_channels, 1, 2, 2});
  w.up1_b = make("decoder.up1.b", {cfg.hidden_channels});
  w.up2_w = make("decoder.up2.w", {cfg.hidden_channels, cfg.out_depth, 2, 2, 2});
  w.up2_b = make("decoder.up2.b", {cfg.out_depth});
  // Fan-in scaling. Each output voxel of a patch transposed conv sees exactly
  // one tap per input channel, so fan-in is the input channel count. A flat
  // 0.02 left the skip path too weak to move off the mean image.
  const std::pair<Parameter*, std::size_t> layers[] = {
      {&w.cond_w, cfg.query_dim}, {&w.up1_w, cfg.skip_channels}, {&w.up2_w, cfg.hidden_channels}};
  for (auto [p, fan_in] : layers) {
    const double sd = 1.0 / std::sqrt(double(fan_in));
    for (double& v : p->value.values()) v = rng.truncated_normal(sd);
  }
  return w;
}

ParameterList DecoderWeights::parameters() {
  return {&skip_norm_g, &skip_norm_b, &cond_w, &cond_b, &up1_w, &up1_b, &up2_w, &up2_b};
}

std::vector<const Parameter*> DecoderWeights::parameters() const {
  return {&skip_norm_g, &skip_norm_b, &cond_w, &cond_b, &up1_w, &up1_b, &up2_w, &up2_b};
}

Var decode(const DecoderWeights& w, Var fused, Var skip) {
  if (skip.value().rank() != 4 || skip.dim(0) != w.cfg.skip_channels) {
    throw std::invalid_argument("decoder: skip grid has the wrong channel count");
  }
  if (fused.value().rank() != 2 || fused.dim(0) != skip.dim(1) || fused.dim(1) != w.cfg.query_dim) {
    throw std::invalid_argument("decoder: fused queries must be [T', d_c] matching the skip grid");
  }
  Tape& tape = skip.tape();
  // The aggregated grid is small in scale (~1e-2 after init); normalise it per
  // position so the upsampling path sees unit-scale features.
  const Shape grid_shape = skip.shape();
  const std::size_t c = grid_shape[0], n = skip.value().size() / c;
  Var rows = ops::transpose(ops::reshape(skip, {c, n}));
  rows = ops::layer_norm_rows(rows, tape.param(w.skip_norm_g), tape.param(w.skip_norm_b));
  Var normed = ops::reshape(ops::transpose(rows), grid_shape);
  Var bias = ops::linear(fused, tape.param(w.cond_w), tape.param(w.cond_b));
  Var h = ops::gelu(ops::add_frame_bias(normed, bias));
  h = ops::gelu(ops::conv_transpose3d_patch(h, tape.param(w.up1_w), tape.param(w.up1_b)));
  return ops::conv_transpose3d_patch(h, tape.param(w.up2_w), tape.param(w.up2_b));
}

Stage2Forward stage2_loss(Var z_tau, Var z_sigma, Var skip, const Tensor& video_dthw, const Codebook& book_tau,
                          const Codebook& book_sigma, const DecoderWeights& decoder, double alpha,
                          bool straight_through) {
  Tape& tape = skip.tape();
  Stage2Forward out;
  out.q_tau = vec_quant(z_tau.value(), book_tau);
  out.q_sigma = vec_quant(z_sigma.value(), book_sigma);
  Var qt = straight_through ? ops::straight_through(z_tau, out.q_tau.values) : tape.constant(out.q_tau.values);
  Var qs = straight_through ? ops::straight_through(z_sigma, out.q_sigma.values) : tape.constant(out.q_sigma.values);
  Var recon = decode(decoder, fuse(qt, qs), skip);
  if (recon.shape() != video_dthw.shape()) {
    throw std::invalid_argument("stage2_loss: decoder output " + shape_string(recon.shape()) +
                                " does not match video " + shape_string(video_dthw.shape()));
  }
  Var rec = ops::mse(recon, video_dthw);
  Var ct = ops::mse(z_tau, out.q_tau.values);
  Var cs = ops::mse(z_sigma, out.q_sigma.values);
  out.total = ops::add(rec, ops::scale(ops::add(ct, cs), alpha));
  out.parts.reconstruction = rec.value().item();
  out.parts.commit_tau = ct.value().item();
  out.parts.commit_sigma = cs.value().item();
  out.parts.total = out.total.value().item();
  return out;
}

void ema_update(Codebook& book, const Tensor& rows, const std::vector<std::size_t>& indices, double decay,
                double epsilon) {
  const std::size_t ne = book.size(), d = book.dim();
  if (rows.rank() != 2 || rows.dim(1) != d || rows.dim(0) != indices.size()) {
    throw std::invalid_argument("codebook ema_update: rows do not match indices or codebook width");
  }
  std::vector<double> counts(ne, 0.0);
  Tensor sums(Shape{ne, d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ne) throw std::out_of_range("codebook ema_update: index out of range");
    counts[indices[i]] += 1.0;
    kernels::axpy(1.0, rows.row(i), sums.row(indices[i]), d);
  }
  double total = 0.0;
  for (std::size_t k = 0; k < ne; ++k) {
    book.ema_counts[k] = decay * book.ema_counts[k] + (1.0 - decay) * counts[k];
    total += book.ema_counts[k];
    book.usage[k] += counts[k];
  }
  for (std::size_t k = 0; k < ne; ++k) {
    double* s = book.ema_sums.row(k);
    for (std::size_t c = 0; c < d; ++c) s[c] = decay * s[c] + (1.0 - decay) * sums.row(k)[c];
    const double smoothed = (book.ema_counts[k] + epsilon) / (total + double(ne) * epsilon) * total;
    if (smoothed > 0.0) {
      for (std::size_t c = 0; c < d; ++c) book.entries.row(k)[c] = s[c] / smoothed;
    }
  }
}

void StageIIConfig::validate() const {
  if (codebook_size == 0) throw std::invalid_argument("stage II: codebook size must be positive");
  if (batch_size == 0) throw std::invalid_argument("stage II: batch size must be positive");
  if (!(alpha >= 0.0)) throw std::invalid_argument("stage II: alpha must be non-negative");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("stage II: EMA decay must be in [0, 1)");
  if (!(ema_epsilon > 0.0)) throw std::invalid_argument("stage II: EMA epsilon must be positive");
}

StageIIResult train_stage2(const std::vector<StudyRecord>& studies, const encoder::EncoderWeights& student,
                           const StageIIConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (studies.empty()) throw std::invalid_argument("stage II: empty dataset");
  const encoder::EncoderConfig& ecfg = student.config();
  Rng rng = Rng(seed).fork(21);

  StageIIResult result;
  result.encoder = student;
  DecoderConfig dcfg;
  dcfg.query_dim = ecfg.embed_dim;
  dcfg.skip_channels = ecfg.agg_channels;
  dcfg.hidden_channels = cfg.decoder_hidden;
  dcfg.out_depth = ecfg.depth;
  result.decoder = DecoderWeights::init(dcfg, rng.fork(1).seed());
  result.book_tau = Codebook::zeros(cfg.codebook_size, ecfg.embed_dim);
  result.book_sigma = Codebook::zeros(cfg.codebook_size, ecfg.embed_dim);

  // Encoder outputs for every study; with a frozen encoder they are reused as
  // constants for the whole stage.
  std::vector<Features> feats(studies.size());
  auto refresh = [&] {
    for (std::size_t i = 0; i < studies.size(); ++i) {
      Tape tape(nullptr, false);
      const auto vars = encoder::encode_student(result.encoder, tape, studies[i].view(View::SA));
      feats[i].z_tau = vars.z_tau.value();
      feats[i].z_sigma = vars.z_sigma.value();
      feats[i].skip = vars.grid.value();
      if (feats[i].target.empty()) feats[i].target = studies[i].view(View::SA).to_dthw();
    }
  };
  refresh();
  auto pools = [&](bool tau) {
    std::vector<const Tensor*> out;
    for (const Features& f : feats) out.push_back(tau ? &f.z_tau : &f.z_sigma);
    return out;
  };
  Rng init_rng = rng.fork(2);
  init_from_rows(result.book_tau, pools(true), init_rng);
  init_from_rows(result.book_sigma, pools(false), init_rng);

  ParameterList trainable = result.decoder.parameters();
  if (cfg.finetune_encoder) {
    ParameterList enc = distill::trainable_student_parameters(result.encoder);
    trainable.insert(trainable.end(), enc.begin(), enc.end());
  }
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.weight_decay = cfg.weight_decay;
  Adam opt(trainable, acfg);

  Rng order_rng = rng.fork(3);
  Rng reseed_rng = rng.fork(4);
  std::vector<std::size_t> order(studies.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    result.book_tau.reset_usage();
    result.book_sigma.reset_usage();
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng.engine());
    EpochRecord rec;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      GradientStore grads;
      std::vector<std::pair<Tensor, Quantized>> assigned_tau, assigned_sigma;
      for (std::size_t k = begin; k < end; ++k) {
        const std::size_t i = order[k];
        Tape tape(&grads, true);
        Var zt, zs, skip;
        if (cfg.finetune_encoder) {
          const auto vars = encoder::encode_student(result.encoder, tape, studies[i].view(View::SA));
          zt = vars.z_tau;
          zs = vars.z_sigma;
          skip = vars.grid;
        } else {
          zt = tape.constant(feats[i].z_tau);
          zs = tape.constant(feats[i].z_sigma);
          skip = tape.constant(feats[i].skip);
        }
        Stage2Forward fwd = stage2_loss(zt, zs, skip, feats[i].target, result.book_tau, result.book_sigma,
                                        result.decoder, cfg.alpha);
        const Tensor seed_grad = Tensor::scalar(1.0 / double(end - begin));
        tape.backward(fwd.total, &seed_grad);
        rec.mean.total += fwd.parts.total;
        rec.mean.reconstruction += fwd.parts.reconstruction;
        rec.mean.commit_tau += fwd.parts.commit_tau;
        rec.mean.commit_sigma += fwd.parts.commit_sigma;
        ++rec.steps;
        assigned_tau.emplace_back(zt.value(), std::move(fwd.q_tau));
        assigned_sigma.emplace_back(zs.value(), std::move(fwd.q_sigma));
      }
      opt.step(grads);
      for (auto& [rows, q] : assigned_tau) ema_update(result.book_tau, rows, q.indices, cfg.ema_decay, cfg.ema_epsilon);
      for (auto& [rows, q] : assigned_sigma) {
        ema_update(result.book_sigma, rows, q.indices, cfg.ema_decay, cfg.ema_epsilon);
      }
    }
    const double n = double(rec.steps);
    rec.mean.total /= n;
    rec.mean.reconstruction /= n;
    rec.mean.commit_tau /= n;
    rec.mean.commit_sigma /= n;
    rec.usage_tau = result.book_tau.usage;
    rec.usage_sigma = result.book_sigma.usage;
    if (cfg.finetune_encoder) refresh();
    if (cfg.reseed_dead_entries && epoch + 1 < cfg.epochs) {
      rec.reseeded = reseed_dead(result.book_tau, pools(true), reseed_rng);
      rec.reseeded += reseed_dead(result.book_sigma, pools(false), reseed_rng);
    }
    result.epoch_log.push_back(std::move(rec));
  }
  return result;
}

Representation export_representation(const encoder::MotionQueries& queries, const Codebook& book_tau,
                                     const Codebook& book_sigma) {
  Representation out;
  out.untrained_codebook = !book_tau.used() || !book_sigma.used();
  const Tensor fused = fuse(vec_quant(queries.z_tau, book_tau).values, vec_quant(queries.z_sigma, book_sigma).values);
  const std::size_t n = fused.dim(0), d = fused.dim(1);
  out.q = Tensor(Shape{d});
  for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, fused.row(i), out.q.data(), d);
  for (double& v : out.q.values()) v /= double(n);
  return out;
}

Representation export_representation(const StudyRecord& study, const encoder::EncoderWeights& student,
                                     const Codebook& book_tau, const Codebook& book_sigma) {
  return export_representation(encoder::encode_video(student, study.view(View::SA)), book_tau, book_sigma);
}

}  // namespace ctsl::codebook
