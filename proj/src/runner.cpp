#include "ctsl/runner.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "ctsl/checkpoint.hpp"
#include "ctsl/rng.hpp"

namespace ctsl::runner {
namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::uint64_t encoder_init_seed(std::uint64_t seed) { return Rng(seed).fork(11).seed(); }

template <typename T>
void read_into(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("missing file " + path.string());
  return json::parse(is);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

ParameterList codebook_params(std::vector<Parameter>& storage) {
  ParameterList out;
  for (Parameter& p : storage) out.push_back(&p);
  return out;
}

std::vector<Parameter> codebook_bundle(const codebook::Codebook& tau, const codebook::Codebook& sigma) {
  std::vector<Parameter> out;
  auto add = [&](const std::string& name, const codebook::Codebook& b) {
    const std::size_t n = b.size();
    out.push_back({name + ".entries", b.entries});
    out.push_back({name + ".ema_sums", b.ema_sums});
    out.push_back({name + ".ema_counts", Tensor(Shape{n}, b.ema_counts)});
    out.push_back({name + ".usage", Tensor(Shape{n}, b.usage)});
  };
  add("codebook_tau", tau);
  add("codebook_sigma", sigma);
  return out;
}

std::pair<codebook::Codebook, codebook::Codebook> load_codebooks(const fs::path& path, const ExperimentConfig& cfg) {
  codebook::Codebook tau = codebook::Codebook::zeros(cfg.stage2.codebook_size, cfg.encoder.embed_dim);
  codebook::Codebook sigma = tau;
  std::vector<Parameter> bundle = codebook_bundle(tau, sigma);
  load_parameters(path, codebook_params(bundle));
  auto unpack = [&](std::size_t off, codebook::Codebook& b) {
    b.entries = bundle[off].value;
    b.ema_sums = bundle[off + 1].value;
    b.ema_counts = bundle[off + 2].value.storage();
    b.usage = bundle[off + 3].value.storage();
  };
  unpack(0, tau);
  unpack(4, sigma);
  return {tau, sigma};
}

encoder::EncoderWeights load_encoder(const fs::path& path, const ExperimentConfig& cfg) {
  if (!fs::exists(path)) throw std::runtime_error("missing checkpoint " + path.string() + " (run train-stage1 first)");
  encoder::EncoderWeights w = encoder::EncoderWeights::init(cfg.encoder, encoder_init_seed(cfg.seed));
  load_parameters(path, w.parameters());
  return w;
}

PreparedData load_prepared(const fs::path& run_dir) {
  const fs::path roi = run_dir / "roi";
  if (!fs::exists(roi / "manifest.json")) throw std::runtime_error("missing ROI dataset in " + roi.string() + " (run preprocess first)");
  Dataset ds = load_dataset(roi);
  return PreparedData{std::move(ds.studies), std::move(ds.splits)};
}

ImageModel load_image_model(const ExperimentConfig& cfg, const fs::path& run_dir, Mode mode) {
  ImageModel m;
  switch (mode) {
    case Mode::ehr_only_cox:
      break;
    case Mode::random_encoder:
      m.student = encoder::EncoderWeights::init(cfg.encoder, encoder_init_seed(cfg.seed));
      break;
    case Mode::distilled_no_vq:
      m.student = load_encoder(run_dir / "student.ckpt", cfg);
      break;
    case Mode::full_ctsl:
      m.student = load_encoder(run_dir / "student.ckpt", cfg);
      if (cfg.stage2.epochs > 0) {
        if (!fs::exists(run_dir / "codebooks.ckpt")) {
          throw std::runtime_error("missing codebooks.ckpt in " + run_dir.string() + " (run train-stage2 first)");
        }
        auto [tau, sigma] = load_codebooks(run_dir / "codebooks.ckpt", cfg);
        m.book_tau = std::move(tau);
        m.book_sigma = std::move(sigma);
      }
      break;
  }
  return m;
}

json km_json(const metrics::KmCurve& curve) {
  json out = json::array();
  for (const auto& s : curve.steps) {
    out.push_back({{"time", s.time}, {"survival", s.survival}, {"at_risk", s.at_risk}, {"events", s.events},
                   {"censored", s.censored}});
  }
  return out;
}

std::string feature_name(std::size_t j, std::size_t ehr_dim) {
  return j < ehr_dim ? "ehr_f" + std::to_string(j) : "img_" + std::to_string(j - ehr_dim);
}

Split split_of_checked(const PreparedData& data, std::size_t i) { return data.splits.at(i); }

}  // namespace

std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::full_ctsl: return "full_ctsl";
    case Mode::distilled_no_vq: return "distilled_no_vq";
    case Mode::random_encoder: return "random_encoder";
    case Mode::ehr_only_cox: return "ehr_only_cox";
  }
  return "?";
}

Mode parse_mode(std::string_view name) {
  for (Mode m : {Mode::full_ctsl, Mode::distilled_no_vq, Mode::random_encoder, Mode::ehr_only_cox}) {
    if (mode_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown mode '" + std::string(name) +
                              "' (expected full_ctsl, distilled_no_vq, random_encoder or ehr_only_cox)");
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  read_into(j, "seed", c.seed);
  if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
  read_into(j, "device", c.device);
  if (j.contains("data")) {
    const json& d = j.at("data");
    if (d.contains("dir") && !d.at("dir").is_null()) c.data_dir = fs::path(d.at("dir").get<std::string>());
    read_into(d, "n_studies", c.n_studies);
    read_into(d, "train_fraction", c.train_fraction);
    read_into(d, "val_fraction", c.val_fraction);
    if (d.contains("phantom")) {
      const json& p = d.at("phantom");
      PhantomParams& ph = c.phantom;
      read_into(p, "height", ph.height);
      read_into(p, "width", ph.width);
      read_into(p, "frames", ph.frames);
      read_into(p, "depth", ph.depth);
      if (p.contains("center_y")) ph.center_y = p.at("center_y").get<double>();
      if (p.contains("center_x")) ph.center_x = p.at("center_x").get<double>();
      read_into(p, "center_jitter", ph.center_jitter);
      read_into(p, "radius", ph.radius);
      read_into(p, "radius_jitter", ph.radius_jitter);
      read_into(p, "ring_width", ph.ring_width);
      read_into(p, "ellipticity", ph.ellipticity);
      read_into(p, "amplitude_min", ph.amplitude_min);
      read_into(p, "amplitude_max", ph.amplitude_max);
      read_into(p, "noise_sd", ph.noise_sd);
      read_into(p, "view_tilt_deg", ph.view_tilt_deg);
      read_into(p, "ehr_dim", ph.ehr_dim);
      read_into(p, "ehr_informative", ph.ehr_informative);
      read_into(p, "ehr_signal", ph.ehr_signal);
      read_into(p, "baseline_hazard", ph.baseline_hazard);
      read_into(p, "beta_true", ph.beta_true);
      read_into(p, "censoring_fraction", ph.censoring_fraction);
    }
  }
  if (j.contains("roi")) {
    const json& r = j.at("roi");
    read_into(r, "size", c.roi_size);
    read_into(r, "levels", c.roi.flow.levels);
    read_into(r, "pyramid_scale", c.roi.flow.pyramid_scale);
    read_into(r, "window_size", c.roi.flow.window_size);
    read_into(r, "iterations", c.roi.flow.iterations);
    read_into(r, "poly_n", c.roi.flow.poly_n);
    read_into(r, "poly_sigma", c.roi.flow.poly_sigma);
    read_into(r, "magnitude_floor_per_pixel", c.roi.magnitude_floor_per_pixel);
    read_into(r, "fallback_to_center", c.roi.fallback_to_center);
  }
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    read_into(e, "agg_channels", c.encoder.agg_channels);
    read_into(e, "embed_dim", c.encoder.embed_dim);
    read_into(e, "heads", c.encoder.heads);
    read_into(e, "local_blocks", c.encoder.local_blocks);
    read_into(e, "global_blocks", c.encoder.global_blocks);
    read_into(e, "mlp_ratio", c.encoder.mlp_ratio);
    read_into(e, "init_std", c.encoder.init_std);
  }
  c.encoder.depth = c.phantom.depth;
  if (j.contains("stage1")) {
    const json& s = j.at("stage1");
    read_into(s, "tau", c.stage1.tau);
    read_into(s, "tau_c", c.stage1.tau_c);
    read_into(s, "lambda", c.stage1.lambda);
    read_into(s, "ema_momentum", c.stage1.ema_momentum);
    read_into(s, "lr", c.stage1.lr);
    read_into(s, "weight_decay", c.stage1.weight_decay);
    read_into(s, "batch_size", c.stage1.batch_size);
    read_into(s, "epochs", c.stage1.epochs);
    read_into(s, "lr_step", c.stage1.lr_step);
    read_into(s, "lr_gamma", c.stage1.lr_gamma);
    read_into(s, "crop_jitter", c.stage1.crop_jitter);
  }
  if (j.contains("stage2")) {
    const json& s = j.at("stage2");
    read_into(s, "alpha", c.stage2.alpha);
    read_into(s, "epochs", c.stage2.epochs);
    read_into(s, "codebook_size", c.stage2.codebook_size);
    read_into(s, "lr", c.stage2.lr);
    read_into(s, "weight_decay", c.stage2.weight_decay);
    read_into(s, "batch_size", c.stage2.batch_size);
    read_into(s, "ema_decay", c.stage2.ema_decay);
    read_into(s, "ema_epsilon", c.stage2.ema_epsilon);
    read_into(s, "decoder_hidden", c.stage2.decoder_hidden);
    read_into(s, "finetune_encoder", c.stage2.finetune_encoder);
    read_into(s, "reseed_dead_entries", c.stage2.reseed_dead_entries);
  }
  if (j.contains("survival")) {
    const json& s = j.at("survival");
    read_into(s, "penalizer", c.survival.penalizer);
    read_into(s, "correlation_threshold", c.survival.correlation_threshold);
    read_into(s, "filter", c.survival.filter);
    read_into(s, "max_iterations", c.survival.max_iterations);
    read_into(s, "tolerance", c.survival.tolerance);
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json ExperimentConfig::to_json() const {
  const PhantomParams& p = phantom;
  json ph{{"height", p.height}, {"width", p.width}, {"frames", p.frames}, {"depth", p.depth},
          {"center_jitter", p.center_jitter}, {"radius", p.radius}, {"radius_jitter", p.radius_jitter},
          {"ring_width", p.ring_width}, {"ellipticity", p.ellipticity}, {"amplitude_min", p.amplitude_min},
          {"amplitude_max", p.amplitude_max}, {"noise_sd", p.noise_sd}, {"view_tilt_deg", p.view_tilt_deg},
          {"ehr_dim", p.ehr_dim}, {"ehr_informative", p.ehr_informative}, {"ehr_signal", p.ehr_signal},
          {"baseline_hazard", p.baseline_hazard}, {"beta_true", p.beta_true},
          {"censoring_fraction", p.censoring_fraction}};
  if (p.center_y) ph["center_y"] = *p.center_y;
  if (p.center_x) ph["center_x"] = *p.center_x;
  json data{{"n_studies", n_studies}, {"train_fraction", train_fraction}, {"val_fraction", val_fraction}, {"phantom", ph}};
  data["dir"] = data_dir ? json(data_dir->string()) : json(nullptr);
  return json{
      {"schema_version", kSchemaVersion},
      {"seed", seed},
      {"mode", std::string(mode_name(mode))},
      {"device", device},
      {"data", data},
      {"roi",
       {{"size", roi_size}, {"levels", roi.flow.levels}, {"pyramid_scale", roi.flow.pyramid_scale},
        {"window_size", roi.flow.window_size}, {"iterations", roi.flow.iterations}, {"poly_n", roi.flow.poly_n},
        {"poly_sigma", roi.flow.poly_sigma}, {"magnitude_floor_per_pixel", roi.magnitude_floor_per_pixel},
        {"fallback_to_center", roi.fallback_to_center}}},
      {"encoder",
       {{"agg_channels", encoder.agg_channels}, {"embed_dim", encoder.embed_dim}, {"heads", encoder.heads},
        {"local_blocks", encoder.local_blocks}, {"global_blocks", encoder.global_blocks},
        {"mlp_ratio", encoder.mlp_ratio}, {"init_std", encoder.init_std}}},
      {"stage1",
       {{"tau", stage1.tau}, {"tau_c", stage1.tau_c}, {"lambda", stage1.lambda},
        {"ema_momentum", stage1.ema_momentum}, {"lr", stage1.lr}, {"weight_decay", stage1.weight_decay},
        {"batch_size", stage1.batch_size}, {"epochs", stage1.epochs}, {"lr_step", stage1.lr_step},
        {"lr_gamma", stage1.lr_gamma}, {"crop_jitter", stage1.crop_jitter}}},
      {"stage2",
       {{"alpha", stage2.alpha}, {"epochs", stage2.epochs}, {"codebook_size", stage2.codebook_size},
        {"lr", stage2.lr}, {"weight_decay", stage2.weight_decay}, {"batch_size", stage2.batch_size},
        {"ema_decay", stage2.ema_decay}, {"ema_epsilon", stage2.ema_epsilon},
        {"decoder_hidden", stage2.decoder_hidden}, {"finetune_encoder", stage2.finetune_encoder},
        {"reseed_dead_entries", stage2.reseed_dead_entries}}},
      {"survival",
       {{"penalizer", survival.penalizer}, {"correlation_threshold", survival.correlation_threshold},
        {"filter", survival.filter}, {"max_iterations", survival.max_iterations},
        {"tolerance", survival.tolerance}}},
  };
}

void ExperimentConfig::validate() const {
  phantom.validate();
  encoder.validate();
  stage1.validate();
  stage2.validate();
  if (n_studies < 2) throw std::invalid_argument("config: need at least two studies");
  if (device != "cpu" && device != "accelerator") throw std::invalid_argument("config: device must be cpu or accelerator");
  if (roi_size == 0 || roi_size > std::min(phantom.height, phantom.width)) {
    throw std::invalid_argument("config: ROI size must be positive and fit inside the frame");
  }
  encoder::check_input(encoder, roi_size, roi_size, phantom.frames, phantom.depth);
}

fs::path resolve_data_dir(const ExperimentConfig& cfg, const fs::path& run_dir) {
  if (cfg.data_dir) return *cfg.data_dir;
  if (const char* env = std::getenv("CTSL_DATA_DIR"); env != nullptr && *env != '\0') return fs::path(env);
  return run_dir / "data";
}

RunLock::RunLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (f == nullptr) {
    throw std::runtime_error("run directory " + dir.string() + " is locked by another run (remove " + path_.string() +
                             " if stale)");
  }
  std::fclose(f);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::vector<std::size_t> split_indices(const PreparedData& data, Split s) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < data.studies.size(); ++i) {
    if (split_of_checked(data, i) == s) out.push_back(i);
  }
  return out;
}

Dataset synthesize(const ExperimentConfig& cfg) {
  Dataset ds;
  ds.studies = generate_cohort(cfg.phantom, cfg.n_studies, cfg.seed);
  ds.splits = assign_splits(cfg.n_studies, cfg.train_fraction, cfg.val_fraction, Rng(cfg.seed).fork(3).seed());
  return ds;
}

PreparedData preprocess(const Dataset& raw, const ExperimentConfig& cfg,
                        std::vector<std::vector<flowroi::ROIWindow>>* windows) {
  PreparedData out;
  out.splits = raw.splits;
  for (const StudyRecord& s : raw.studies) {
    StudyRecord r;
    r.study_id = s.study_id;
    r.ehr = s.ehr;
    r.time = s.time;
    r.event = s.event;
    r.latent_risk = s.latent_risk;
    std::vector<flowroi::ROIWindow> wins;
    for (View v : kAllViews) {
      const flowroi::ROIWindow w = flowroi::locate_roi(s.view(v), cfg.roi_size, cfg.roi);
      r.view(v) = flowroi::crop_roi(s.view(v), w);
      wins.push_back(w);
    }
    if (windows) windows->push_back(std::move(wins));
    out.studies.push_back(std::move(r));
  }
  return out;
}

namespace {

// The EHR-only head never looks at pixels, so it skips ROI localisation.
PreparedData prepare(Dataset raw, const ExperimentConfig& cfg) {
  if (cfg.mode == Mode::ehr_only_cox) return PreparedData{std::move(raw.studies), std::move(raw.splits)};
  return preprocess(raw, cfg);
}

Dataset load_or_synthesize(const ExperimentConfig& cfg, const fs::path& run_dir) {
  const fs::path data_dir = resolve_data_dir(cfg, run_dir);
  if (cfg.data_dir || fs::exists(data_dir / "manifest.json")) return load_dataset(data_dir);
  return synthesize(cfg);
}

}  // namespace

std::vector<double> image_features(const StudyRecord& study, const ImageModel& model, bool* untrained_codebook) {
  if (!model.student) return {};
  if (model.book_tau && model.book_sigma) {
    const auto rep = codebook::export_representation(study, *model.student, *model.book_tau, *model.book_sigma);
    if (untrained_codebook && rep.untrained_codebook) *untrained_codebook = true;
    return rep.q.storage();
  }
  return encoder::encode_video(*model.student, study.view(View::SA)).pooled.storage();
}

std::vector<std::size_t> FeatureTable::rows(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == s) out.push_back(i);
  }
  return out;
}

FeatureTable build_features(const PreparedData& data, const ImageModel& model) {
  FeatureTable t;
  const std::size_t n = data.studies.size();
  if (n == 0) throw std::invalid_argument("features: empty dataset");
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < n; ++i) {
    const StudyRecord& s = data.studies[i];
    std::vector<double> row = s.ehr;
    const auto img = image_features(s, model, &t.untrained_codebook);
    row.insert(row.end(), img.begin(), img.end());
    rows.push_back(std::move(row));
    t.ids.push_back(s.study_id);
    t.splits.push_back(data.splits[i]);
    t.time.push_back(s.time);
    t.event.push_back(s.event);
  }
  t.ehr_dim = data.studies.front().ehr.size();
  t.x.resize(Eigen::Index(n), Eigen::Index(rows.front().size()));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) t.x(Eigen::Index(i), Eigen::Index(j)) = rows[i][j];
  return t;
}

void save_features(const fs::path& path, const FeatureTable& t) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "study_id,split,time,event,ehr_dim,untrained_codebook";
  for (Eigen::Index j = 0; j < t.x.cols(); ++j) os << ",x" << j;
  os << '\n';
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    os << t.ids[i] << ',' << split_name(t.splits[i]) << ',' << fmt(t.time[i]) << ',' << t.event[i] << ','
       << t.ehr_dim << ',' << (t.untrained_codebook ? 1 : 0);
    for (Eigen::Index j = 0; j < t.x.cols(); ++j) os << ',' << fmt(t.x(Eigen::Index(i), j));
    os << '\n';
  }
}

FeatureTable load_features(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("missing " + path.string() + " (run fit-surv first)");
  std::string line;
  std::getline(is, line);
  const std::size_t p = split_line(line).size() - 6;
  FeatureTable t;
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != p + 6) throw std::runtime_error("features: ragged row in " + path.string());
    t.ids.push_back(cells[0]);
    t.splits.push_back(parse_split(cells[1]));
    t.time.push_back(std::stod(cells[2]));
    t.event.push_back(std::stoi(cells[3]));
    t.ehr_dim = std::stoul(cells[4]);
    t.untrained_codebook = cells[5] == "1";
    std::vector<double> row;
    for (std::size_t j = 0; j < p; ++j) row.push_back(std::strtod(cells[6 + j].c_str(), nullptr));
    rows.push_back(std::move(row));
  }
  t.x.resize(Eigen::Index(rows.size()), Eigen::Index(p));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < p; ++j) t.x(Eigen::Index(i), Eigen::Index(j)) = rows[i][j];
  return t;
}

survival::CoxModel fit_head(const FeatureTable& table, const ExperimentConfig& cfg) {
  const auto train = table.rows(Split::train);
  if (train.empty()) throw std::invalid_argument("survival: empty train split");
  Eigen::MatrixXd x(Eigen::Index(train.size()), table.x.cols());
  Eigen::VectorXd time(Eigen::Index(train.size()));
  Eigen::VectorXi event(Eigen::Index(train.size()));
  for (std::size_t k = 0; k < train.size(); ++k) {
    x.row(Eigen::Index(k)) = table.x.row(Eigen::Index(train[k]));
    time[Eigen::Index(k)] = table.time[train[k]];
    event[Eigen::Index(k)] = table.event[train[k]];
  }
  return survival::fit_cox(x, time, event, cfg.survival);
}

json cox_to_json(const survival::CoxModel& m) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return json{{"schema_version", kSchemaVersion},
              {"n_features", m.n_features},
              {"kept", m.kept},
              {"means", vec(m.means)},
              {"scales", vec(m.scales)},
              {"theta", vec(m.theta)},
              {"penalizer", m.penalizer},
              {"baseline_times", m.baseline_times},
              {"baseline_increments", m.baseline_increments},
              {"baseline_cumulative", m.baseline_cumulative},
              {"iterations", m.iterations},
              {"converged", m.converged}};
}

survival::CoxModel cox_from_json(const json& j) {
  auto vec = [](const json& a) {
    const auto v = a.get<std::vector<double>>();
    Eigen::VectorXd out(Eigen::Index(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out[Eigen::Index(i)] = v[i];
    return out;
  };
  survival::CoxModel m;
  m.n_features = j.at("n_features").get<std::size_t>();
  m.kept = j.at("kept").get<std::vector<std::size_t>>();
  m.means = vec(j.at("means"));
  m.scales = vec(j.at("scales"));
  m.theta = vec(j.at("theta"));
  m.penalizer = j.at("penalizer").get<double>();
  m.baseline_times = j.at("baseline_times").get<std::vector<double>>();
  m.baseline_increments = j.at("baseline_increments").get<std::vector<double>>();
  m.baseline_cumulative = j.at("baseline_cumulative").get<std::vector<double>>();
  m.iterations = j.at("iterations").get<std::size_t>();
  m.converged = j.at("converged").get<bool>();
  return m;
}

Evaluation evaluate(const FeatureTable& table, const survival::CoxModel& cox, Mode mode) {
  Evaluation ev;
  ev.mode = mode;
  ev.cox = cox;
  ev.ehr_dim = table.ehr_dim;
  ev.untrained_codebook = table.untrained_codebook;
  const Eigen::VectorXd risk = survival::predict_risk(cox, table.x);
  auto cindex = [&](const std::vector<std::size_t>& rows) {
    std::vector<metrics::SurvivalOutcome> o;
    for (std::size_t i : rows) o.push_back({table.time[i], table.event[i], risk[Eigen::Index(i)]});
    return metrics::c_index(o);
  };
  ev.c_index_train = cindex(table.rows(Split::train));
  const auto val = table.rows(Split::val);
  if (!val.empty()) {
    try {
      ev.c_index_val = cindex(val);
    } catch (const std::invalid_argument&) {
      // no comparable pair in a tiny validation split
    }
  }
  const auto test = table.rows(Split::test);
  if (test.size() < 2) throw std::invalid_argument("evaluation: test split needs at least two studies");
  ev.c_index_test = cindex(test);

  std::vector<double> test_risk;
  Eigen::MatrixXd test_x(Eigen::Index(test.size()), table.x.cols());
  for (std::size_t k = 0; k < test.size(); ++k) {
    ev.test_ids.push_back(table.ids[test[k]]);
    test_risk.push_back(risk[Eigen::Index(test[k])]);
    test_x.row(Eigen::Index(k)) = table.x.row(Eigen::Index(test[k]));
  }
  ev.test_risk = test_risk;
  const metrics::Strata strata = metrics::stratify_median(test_risk);
  ev.n_high = strata.high.size();
  ev.n_low = strata.low.size();
  auto group = [&](const std::vector<std::size_t>& members, std::vector<double>& t, std::vector<int>& e) {
    for (std::size_t k : members) {
      t.push_back(table.time[test[k]]);
      e.push_back(table.event[test[k]]);
    }
  };
  std::vector<double> th, tl;
  std::vector<int> eh, el;
  group(strata.high, th, eh);
  group(strata.low, tl, el);
  ev.km_high = metrics::km_curve(th, eh);
  ev.km_low = metrics::km_curve(tl, el);
  if (!th.empty() && !tl.empty()) {
    try {
      ev.log_rank = metrics::log_rank(th, eh, tl, el);
    } catch (const std::invalid_argument&) {
      // degenerate split: no events or zero variance
    }
  }
  ev.attribution = survival::linear_attribution(cox, test_x, table.ehr_dim);
  return ev;
}

ImageModel train_image_model(const PreparedData& data, Mode mode, const ExperimentConfig& cfg, StageLogs* logs) {
  ImageModel m;
  if (mode == Mode::ehr_only_cox) return m;
  encoder::EncoderWeights init = encoder::EncoderWeights::init(cfg.encoder, encoder_init_seed(cfg.seed));
  if (mode == Mode::random_encoder) {
    m.student = std::move(init);
    return m;
  }
  std::vector<StudyRecord> train;
  for (std::size_t i : split_indices(data, Split::train)) train.push_back(data.studies[i]);
  auto s1 = distill::train_stage1(train, std::move(init), cfg.stage1, cfg.seed);
  if (logs) logs->stage1 = s1.epoch_log;
  if (mode == Mode::full_ctsl && cfg.stage2.epochs > 0) {
    auto s2 = codebook::train_stage2(train, s1.student, cfg.stage2, cfg.seed);
    if (logs) logs->stage2 = s2.epoch_log;
    m.student = std::move(s2.encoder);
    m.book_tau = std::move(s2.book_tau);
    m.book_sigma = std::move(s2.book_sigma);
  } else {
    m.student = std::move(s1.student);
  }
  return m;
}

json report_json(const Evaluation& ev, const ExperimentConfig& cfg, const FeatureTable& table, const StageLogs& logs) {
  json r;
  r["schema_version"] = kSchemaVersion;
  r["mode"] = std::string(mode_name(ev.mode));
  r["seed"] = cfg.seed;
  r["config"] = cfg.to_json();
  r["n_studies"] = table.ids.size();
  r["split_sizes"] = {{"train", table.rows(Split::train).size()},
                      {"val", table.rows(Split::val).size()},
                      {"test", table.rows(Split::test).size()}};
  r["c_index"] = {{"train", ev.c_index_train},
                  {"val", ev.c_index_val ? json(*ev.c_index_val) : json(nullptr)},
                  {"test", ev.c_index_test}};
  json lr = nullptr;
  if (ev.log_rank) {
    lr = {{"statistic", ev.log_rank->statistic},
          {"p_value", ev.log_rank->p_value},
          {"observed_minus_expected_high", ev.log_rank->observed_minus_expected},
          {"variance", ev.log_rank->variance}};
  }
  r["log_rank"] = lr;
  r["km"] = {{"high", {{"n", ev.n_high}, {"steps", km_json(ev.km_high)}}},
             {"low", {{"n", ev.n_low}, {"steps", km_json(ev.km_low)}}}};

  const auto& a = ev.attribution;
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / double(v.size());
  };
  json ranking = json::array();
  for (std::size_t k = 0; k < std::min<std::size_t>(20, a.ranking.size()); ++k) {
    ranking.push_back({{"feature", feature_name(a.ranking[k].feature, ev.ehr_dim)},
                       {"mean_abs_contribution", a.ranking[k].mean_abs}});
  }
  r["attribution"] = {{"aggregated_img_p_mean", mean(a.image_positive)},
                      {"aggregated_img_n_mean", mean(a.image_negative)},
                      {"top_features", ranking}};
  r["cox"] = {{"features_total", ev.cox.n_features},
              {"features_kept", ev.cox.kept.size()},
              {"penalizer", ev.cox.penalizer},
              {"iterations", ev.cox.iterations},
              {"converged", ev.cox.converged}};
  json s1 = json::array();
  for (std::size_t e = 0; e < logs.stage1.size(); ++e) {
    s1.push_back({{"epoch", e + 1}, {"total", logs.stage1[e].total}, {"kl", logs.stage1[e].kl},
                  {"contrastive", logs.stage1[e].contrastive}});
  }
  json s2 = json::array();
  for (std::size_t e = 0; e < logs.stage2.size(); ++e) {
    const auto& m = logs.stage2[e].mean;
    s2.push_back({{"epoch", e + 1}, {"total", m.total}, {"reconstruction", m.reconstruction},
                  {"commit_tau", m.commit_tau}, {"commit_sigma", m.commit_sigma},
                  {"reseeded", logs.stage2[e].reseeded}});
  }
  r["stage1_loss"] = s1;
  r["stage2_loss"] = s2;
  r["warnings"] = json::array();
  if (ev.untrained_codebook) r["warnings"].push_back("codebook has zero usage; representation comes from an untrained codebook");
  return r;
}

void write_evaluation(const fs::path& run_dir, const Evaluation& ev, const json& report) {
  fs::create_directories(run_dir);
  write_text(run_dir / "report.json", report.dump(2) + "\n");

  std::ostringstream km;
  km << "group,time,survival,at_risk,events,censored\n";
  for (const auto& [name, curve] : {std::pair{"high", &ev.km_high}, std::pair{"low", &ev.km_low}}) {
    for (const auto& s : curve->steps) {
      km << name << ',' << fmt(s.time) << ',' << fmt(s.survival) << ',' << s.at_risk << ',' << s.events << ','
         << s.censored << '\n';
    }
  }
  write_text(run_dir / "km_curve.csv", km.str());

  std::ostringstream att;
  att << "study_id,risk,aggregated_img_p,aggregated_img_n\n";
  for (std::size_t i = 0; i < ev.test_ids.size(); ++i) {
    att << ev.test_ids[i] << ',' << fmt(ev.attribution.risk[Eigen::Index(i)]) << ','
        << fmt(ev.attribution.image_positive[i]) << ',' << fmt(ev.attribution.image_negative[i]) << '\n';
  }
  write_text(run_dir / "attribution.csv", att.str());

  std::ostringstream rank;
  rank << "rank,feature,mean_abs_contribution\n";
  for (std::size_t k = 0; k < ev.attribution.ranking.size(); ++k) {
    rank << k + 1 << ',' << feature_name(ev.attribution.ranking[k].feature, ev.ehr_dim) << ','
         << fmt(ev.attribution.ranking[k].mean_abs) << '\n';
  }
  write_text(run_dir / "feature_ranking.csv", rank.str());

  std::ostringstream risk;
  risk << "study_id,risk\n";
  for (std::size_t i = 0; i < ev.test_ids.size(); ++i) risk << ev.test_ids[i] << ',' << fmt(ev.test_risk[i]) << '\n';
  write_text(run_dir / "risk_scores.csv", risk.str());
}

void write_stage_logs(const fs::path& run_dir, const StageLogs& logs) {
  fs::create_directories(run_dir);
  if (!logs.stage1.empty()) {
    std::ostringstream os;
    os << "epoch,total,kl,contrastive\n";
    for (std::size_t e = 0; e < logs.stage1.size(); ++e) {
      os << e + 1 << ',' << fmt(logs.stage1[e].total) << ',' << fmt(logs.stage1[e].kl) << ','
         << fmt(logs.stage1[e].contrastive) << '\n';
    }
    write_text(run_dir / "stage1_loss.csv", os.str());
  }
  if (!logs.stage2.empty()) {
    std::ostringstream os, usage;
    os << "epoch,total,reconstruction,commit_tau,commit_sigma,reseeded\n";
    usage << "epoch,codebook,entry,count\n";
    for (std::size_t e = 0; e < logs.stage2.size(); ++e) {
      const auto& r = logs.stage2[e];
      os << e + 1 << ',' << fmt(r.mean.total) << ',' << fmt(r.mean.reconstruction) << ',' << fmt(r.mean.commit_tau)
         << ',' << fmt(r.mean.commit_sigma) << ',' << r.reseeded << '\n';
      for (std::size_t k = 0; k < r.usage_tau.size(); ++k) usage << e + 1 << ",tau," << k << ',' << r.usage_tau[k] << '\n';
      for (std::size_t k = 0; k < r.usage_sigma.size(); ++k) {
        usage << e + 1 << ",sigma," << k << ',' << r.usage_sigma[k] << '\n';
      }
    }
    write_text(run_dir / "stage2_loss.csv", os.str());
    write_text(run_dir / "codebook_usage.csv", usage.str());
  }
}

void cmd_synth(const ExperimentConfig& cfg, const fs::path& run_dir) {
  RunLock lock(run_dir);
  save_dataset(synthesize(cfg), resolve_data_dir(cfg, run_dir));
}

void cmd_preprocess(const ExperimentConfig& cfg, const fs::path& run_dir) {
  RunLock lock(run_dir);
  const fs::path data = resolve_data_dir(cfg, run_dir);
  if (!fs::exists(data / "manifest.json")) throw std::runtime_error("missing dataset in " + data.string() + " (run synth first)");
  std::vector<std::vector<flowroi::ROIWindow>> windows;
  const Dataset raw = load_dataset(data);
  const PreparedData prepared = preprocess(raw, cfg, &windows);
  save_dataset(Dataset{prepared.studies, prepared.splits}, run_dir / "roi");
  std::ostringstream os;
  os << "study_id,view,center_y,center_x,size,motion_center_y,motion_center_x,fields_used,fallback\n";
  for (std::size_t i = 0; i < windows.size(); ++i)
    for (std::size_t v = 0; v < windows[i].size(); ++v) {
      const auto& w = windows[i][v];
      os << prepared.studies[i].study_id << ',' << view_name(kAllViews[v]) << ',' << fmt(w.center_y) << ','
         << fmt(w.center_x) << ',' << w.size << ',' << fmt(w.motion_center_y) << ',' << fmt(w.motion_center_x) << ','
         << w.fields_used << ',' << (w.fallback ? 1 : 0) << '\n';
    }
  write_text(run_dir / "roi_windows.csv", os.str());
}

void cmd_train_stage1(const ExperimentConfig& cfg, const fs::path& run_dir) {
  RunLock lock(run_dir);
  const PreparedData data = load_prepared(run_dir);
  std::vector<StudyRecord> train;
  for (std::size_t i : split_indices(data, Split::train)) train.push_back(data.studies[i]);
  auto result = distill::train_stage1(train, encoder::EncoderWeights::init(cfg.encoder, encoder_init_seed(cfg.seed)),
                                      cfg.stage1, cfg.seed);
  save_parameters(run_dir / "student.ckpt", result.student.parameters());
  save_parameters(run_dir / "teacher.ckpt", result.teacher.parameters());
  StageLogs logs;
  logs.stage1 = result.epoch_log;
  write_stage_logs(run_dir, logs);
}

void cmd_train_stage2(const ExperimentConfig& cfg, const fs::path& run_dir) {
  RunLock lock(run_dir);
  const PreparedData data = load_prepared(run_dir);
  const encoder::EncoderWeights student = load_encoder(run_dir / "student.ckpt", cfg);
  std::vector<StudyRecord> train;
  for (std::size_t i : split_indices(data, Split::train)) train.push_back(data.studies[i]);
  auto result = codebook::train_stage2(train, student, cfg.stage2, cfg.seed);
  save_parameters(run_dir / "decoder.ckpt", result.decoder.parameters());
  std::vector<Parameter> bundle = codebook_bundle(result.book_tau, result.book_sigma);
  save_parameters(run_dir / "codebooks.ckpt", codebook_params(bundle));
  if (cfg.stage2.finetune_encoder) save_parameters(run_dir / "student.ckpt", result.encoder.parameters());
  StageLogs logs;
  logs.stage2 = result.epoch_log;
  write_stage_logs(run_dir, logs);
}

void cmd_fit_surv(const ExperimentConfig& cfg, const fs::path& run_dir) {
  RunLock lock(run_dir);
  PreparedData data;
  if (cfg.mode == Mode::ehr_only_cox && !fs::exists(run_dir / "roi" / "manifest.json")) {
    Dataset raw = load_dataset(resolve_data_dir(cfg, run_dir));
    data = PreparedData{std::move(raw.studies), std::move(raw.splits)};
  } else {
    data = load_prepared(run_dir);
  }
  const FeatureTable table = build_features(data, load_image_model(cfg, run_dir, cfg.mode));
  save_features(run_dir / "features.csv", table);
  json model = cox_to_json(fit_head(table, cfg));
  model["mode"] = std::string(mode_name(cfg.mode));
  write_text(run_dir / "cox_model.json", model.dump(2) + "\n");
}

json cmd_eval(const ExperimentConfig& cfg, const fs::path& run_dir) {
  RunLock lock(run_dir);
  const FeatureTable table = load_features(run_dir / "features.csv");
  const json model = read_json(run_dir / "cox_model.json");
  if (model.value("mode", std::string()) != mode_name(cfg.mode)) {
    throw std::runtime_error("cox_model.json was fitted for mode " + model.value("mode", std::string("?")) +
                             ", not " + std::string(mode_name(cfg.mode)));
  }
  const Evaluation ev = evaluate(table, cox_from_json(model), cfg.mode);
  const json report = report_json(ev, cfg, table, StageLogs{});
  write_evaluation(run_dir, ev, report);
  return report;
}

json cmd_report(const ExperimentConfig& cfg, const fs::path& run_dir) {
  RunLock lock(run_dir);
  const PreparedData data = prepare(load_or_synthesize(cfg, run_dir), cfg);
  StageLogs logs;
  ImageModel model = train_image_model(data, cfg.mode, cfg, &logs);
  if (model.student) save_parameters(run_dir / "student.ckpt", model.student->parameters());
  if (model.book_tau && model.book_sigma) {
    std::vector<Parameter> bundle = codebook_bundle(*model.book_tau, *model.book_sigma);
    save_parameters(run_dir / "codebooks.ckpt", codebook_params(bundle));
  }
  const FeatureTable table = build_features(data, model);
  save_features(run_dir / "features.csv", table);
  const survival::CoxModel cox = fit_head(table, cfg);
  json model_json = cox_to_json(cox);
  model_json["mode"] = std::string(mode_name(cfg.mode));
  write_text(run_dir / "cox_model.json", model_json.dump(2) + "\n");
  const Evaluation ev = evaluate(table, cox, cfg.mode);
  const json report = report_json(ev, cfg, table, logs);
  write_stage_logs(run_dir, logs);
  write_evaluation(run_dir, ev, report);
  return report;
}

json cmd_ablate(const ExperimentConfig& cfg, const fs::path& run_dir) {
  RunLock lock(run_dir);
  const PreparedData data = preprocess(load_or_synthesize(cfg, run_dir), cfg);

  std::vector<std::pair<Mode, double>> rows;
  ImageModel random = train_image_model(data, Mode::random_encoder, cfg, nullptr);
  // Stage I once, shared by the two distilled modes.
  std::vector<StudyRecord> train;
  for (std::size_t i : split_indices(data, Split::train)) train.push_back(data.studies[i]);
  auto s1 = distill::train_stage1(train, encoder::EncoderWeights::init(cfg.encoder, encoder_init_seed(cfg.seed)),
                                  cfg.stage1, cfg.seed);
  ImageModel distilled;
  distilled.student = s1.student;
  ImageModel full;
  if (cfg.stage2.epochs > 0) {
    auto s2 = codebook::train_stage2(train, s1.student, cfg.stage2, cfg.seed);
    full.student = std::move(s2.encoder);
    full.book_tau = std::move(s2.book_tau);
    full.book_sigma = std::move(s2.book_sigma);
  } else {
    full.student = s1.student;
  }
  for (auto& [mode, model] : {std::pair{Mode::random_encoder, &random}, std::pair{Mode::distilled_no_vq, &distilled},
                              std::pair{Mode::full_ctsl, &full}}) {
    const FeatureTable table = build_features(data, *model);
    const Evaluation ev = evaluate(table, fit_head(table, cfg), mode);
    rows.emplace_back(mode, ev.c_index_test);
  }
  json table = json::array();
  std::ostringstream csv;
  csv << "mode,c_index_test\n";
  for (const auto& [mode, c] : rows) {
    table.push_back({{"mode", std::string(mode_name(mode))}, {"c_index_test", c}});
    csv << mode_name(mode) << ',' << fmt(c) << '\n';
  }
  json out{{"schema_version", kSchemaVersion}, {"seed", cfg.seed}, {"rows", table}};
  write_text(run_dir / "ablation.csv", csv.str());
  write_text(run_dir / "ablation.json", out.dump(2) + "\n");
  return out;
}

}  // namespace ctsl::runner
