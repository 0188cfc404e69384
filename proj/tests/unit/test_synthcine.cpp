#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "doctest.h"

#include "ctsl/dataset_io.hpp"
#include "ctsl/survival.hpp"
#include "ctsl/synthcine.hpp"

using namespace ctsl;
namespace fs = std::filesystem;

namespace {

PhantomParams small_params() {
  PhantomParams p;
  p.height = 24;
  p.width = 24;
  p.frames = 8;
  p.depth = 2;
  return p;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("ctsl_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  const auto p = small_params();
  const StudyRecord a = generate_study(p, 42), b = generate_study(p, 42), c = generate_study(p, 43);
  for (View v : kAllViews) CHECK(a.view(v) == b.view(v));
  CHECK(a.ehr == b.ehr);
  CHECK(a.time == b.time);
  CHECK(a.event == b.event);
  CHECK_FALSE(a.view(View::SA) == c.view(View::SA));

  const fs::path d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
  save_study(a, d1);
  save_study(b, d2);
  for (View v : kAllViews) {
    const std::string f = a.study_id + "_" + std::string(view_name(v)) + ".bin";
    CHECK(slurp(d1 / "views" / f) == slurp(d2 / "views" / f));
  }
  CHECK(slurp(d1 / "ehr.csv") == slurp(d2 / "ehr.csv"));
}

TEST_CASE("record invariants") {
  const auto p = small_params();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const StudyRecord r = generate_study(p, seed);
    CHECK_NOTHROW(r.validate());
    CHECK(r.time > 0.0);
    CHECK((r.event == 0 || r.event == 1));
    CHECK(r.ehr.size() == p.ehr_dim);
    for (View v : kAllViews) {
      const VoxelVideo& vid = r.view(v);
      CHECK(vid.frames == p.frames);
      const auto [lo, hi] = std::minmax_element(vid.data.begin(), vid.data.end());
      CHECK(*lo >= 0.0f);
      CHECK(*hi <= 1.0f);
    }
  }
}

TEST_CASE("zero amplitude gives static videos") {
  auto p = small_params();
  p.amplitude_min = 0.0;
  p.amplitude_max = 0.0;
  const StudyRecord r = generate_study(p, 5);
  for (View v : kAllViews) {
    const VoxelVideo& vid = r.view(v);
    for (std::size_t t = 1; t < vid.frames; ++t)
      for (std::size_t d = 0; d < vid.depth; ++d) REQUIRE(vid.frame(t, d) == vid.frame(0, d));
  }
}

TEST_CASE("moving phantom differs between frames") {
  const StudyRecord r = generate_study(small_params(), 6);
  CHECK(r.view(View::SA).frame(0, 0) != r.view(View::SA).frame(4, 0));
  CHECK(r.view(View::CH2).frame(0, 0) != r.view(View::CH2).frame(4, 0));
  CHECK(r.view(View::SA).frame(0, 0) != r.view(View::CH4).frame(0, 0));
}

TEST_CASE("contraction amplitude is strictly decreasing in latent risk") {
  const PhantomParams p;
  double prev = contraction_amplitude(p, -6.0);
  for (double l = -5.9; l <= 6.0; l += 0.1) {
    const double a = contraction_amplitude(p, l);
    CHECK(a < prev);
    CHECK(a >= p.amplitude_min);
    CHECK(a <= p.amplitude_max);
    prev = a;
  }
}

TEST_CASE("parameter validation") {
  auto p = small_params();
  p.amplitude_max = p.radius;
  CHECK_THROWS_AS(generate_study(p, 1), std::invalid_argument);
  p = small_params();
  p.frames = 0;
  CHECK_THROWS_AS(generate_study(p, 1), std::invalid_argument);
  p = small_params();
  p.ehr_informative = p.ehr_dim + 1;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  const auto ps = PhantomParams::full_size();
  CHECK(ps.height == 96);
  CHECK(ps.width == 96);
  CHECK(ps.frames == 24);
  CHECK(ps.depth == 24);
  CHECK_NOTHROW(ps.validate());
}

TEST_CASE("Cox on the hidden risk recovers the generator effect size") {
  // Tiny frames keep rendering cheap; only the outcomes matter here.
  PhantomParams p;
  p.height = 12;
  p.width = 12;
  p.frames = 2;
  p.depth = 1;
  p.beta_true = 2.0;
  p.censoring_fraction = 0.2;
  const auto cohort = generate_cohort(p, 200, 11);
  Eigen::MatrixXd x(200, 1);
  Eigen::VectorXd t(200);
  Eigen::VectorXi e(200);
  int events = 0;
  for (int i = 0; i < 200; ++i) {
    x(i, 0) = cohort[i].latent_risk;
    t[i] = cohort[i].time;
    e[i] = cohort[i].event;
    events += e[i];
  }
  survival::CoxConfig cfg;
  cfg.penalizer = 0.0;
  cfg.filter = false;
  const auto model = survival::fit_cox(x, t, e, cfg);
  CHECK(std::abs(model.raw_coefficients()[0] - 2.0) <= 0.3);
  CHECK(double(events) / 200.0 == doctest::Approx(0.8).epsilon(0.1));
}

TEST_CASE("censoring rate hits the requested fraction in expectation") {
  PhantomParams p;
  p.censoring_fraction = 0.2;
  const double c = censoring_rate(p);
  CHECK(c > 0.0);
  p.censoring_fraction = 0.0;
  CHECK(censoring_rate(p) == 0.0);
}

TEST_CASE("view files: exact size and round trip") {
  const fs::path d = fresh_dir("views");
  VoxelVideo z = VoxelVideo::zeros(2, 2, 1, 1);
  write_view(d / "z.bin", z);
  CHECK(fs::file_size(d / "z.bin") == 16 + 16 + 16);
  CHECK(read_view(d / "z.bin") == z);

  const StudyRecord r = generate_study(small_params(), 8);
  write_view(d / "sa.bin", r.view(View::SA));
  const VoxelVideo back = read_view(d / "sa.bin");
  CHECK(back == r.view(View::SA));
}

TEST_CASE("view file errors") {
  const fs::path d = fresh_dir("viewerr");
  write_view(d / "v.bin", VoxelVideo::zeros(3, 3, 2, 1));
  std::string bytes = slurp(d / "v.bin");
  {
    std::ofstream os(d / "trunc.bin", std::ios::binary);
    os << bytes.substr(0, bytes.size() - 4);
  }
  CHECK_THROWS_WITH_AS(read_view(d / "trunc.bin"), doctest::Contains("payload length"), std::runtime_error);
  bytes[0] = 'X';
  {
    std::ofstream os(d / "magic.bin", std::ios::binary);
    os << bytes;
  }
  CHECK_THROWS_WITH_AS(read_view(d / "magic.bin"), doctest::Contains("magic"), std::runtime_error);
  CHECK_THROWS_AS(read_view(d / "absent.bin"), std::runtime_error);
}

TEST_CASE("study round trip keeps the hidden risk out of the EHR table") {
  const fs::path d = fresh_dir("study");
  const StudyRecord r = generate_study(small_params(), 9);
  const ManifestEntry m = save_study(r, d, Split::val);
  CHECK(m.view_paths.size() == 4);
  const StudyRecord back = load_study(d, r.study_id);
  for (View v : kAllViews) CHECK(back.view(v) == r.view(v));
  CHECK(back.ehr == r.ehr);
  CHECK(back.time == r.time);
  CHECK(back.event == r.event);
  CHECK(back.latent_risk == r.latent_risk);

  std::ifstream ehr(d / "ehr.csv");
  std::string header;
  std::getline(ehr, header);
  CHECK(header.find("latent") == std::string::npos);
  CHECK(header.rfind("study_id,time,event,f0", 0) == 0);

  fs::remove(d / "truth.csv");
  CHECK(load_study(d, r.study_id).latent_risk == 0.0);
  fs::remove(d / "views" / (r.study_id + "_CH3.bin"));
  CHECK_THROWS_AS(load_study(d, r.study_id), std::runtime_error);
  CHECK(read_manifest(d).front().split == Split::val);
}

TEST_CASE("dataset save and load, splits") {
  const fs::path d = fresh_dir("dataset");
  Dataset ds;
  ds.studies = generate_cohort(small_params(), 6, 3);
  ds.splits = assign_splits(6, 0.5, 0.2, 1);
  save_dataset(ds, d);
  const Dataset back = load_dataset(d);
  REQUIRE(back.studies.size() == 6);
  CHECK(back.splits == ds.splits);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(back.studies[i].study_id == ds.studies[i].study_id);
    CHECK(back.studies[i].view(View::CH2) == ds.studies[i].view(View::CH2));
    CHECK(back.studies[i].time == ds.studies[i].time);
  }

  const auto s = assign_splits(100, 0.6, 0.1, 5);
  CHECK(std::count(s.begin(), s.end(), Split::train) == 60);
  CHECK(std::count(s.begin(), s.end(), Split::val) == 10);
  CHECK(std::count(s.begin(), s.end(), Split::test) == 30);
  CHECK(s == assign_splits(100, 0.6, 0.1, 5));
  CHECK_THROWS(assign_splits(10, 0.8, 0.3, 1));
}

TEST_CASE("video helpers") {
  VoxelVideo v = VoxelVideo::zeros(2, 3, 4, 2);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = float(i);
  const Tensor t = v.to_dthw();
  CHECK(t.shape() == Shape{2, 4, 2, 3});
  CHECK(t.at({1, 2, 1, 0}) == v.at(1, 0, 2, 1));
  const VoxelVideo c = v.temporal_crop(3, 2);
  CHECK(c.frames == 2);
  CHECK(c.at(1, 2, 0, 1) == v.at(1, 2, 3, 1));
  CHECK(c.at(1, 2, 1, 1) == v.at(1, 2, 0, 1));
  CHECK_THROWS(v.temporal_crop(0, 5));
  v.data[3] = std::nanf("");
  CHECK_THROWS(v.validate());
}
