// Drives the ctsl executable end to end through its subcommands.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "ctsl_pipeline";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Exit status of the CLI; stdout and stderr go to <root>/last.log.
int ctsl(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "\"" CTSL_CLI_PATH "\" " + args + " > \"" +
                          (kRoot / "last.log").string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string last_log() { return slurp(kRoot / "last.log"); }

fs::path write_config() {
  fs::create_directories(kRoot);
  const json cfg = json::parse(R"({
    "seed": 11,
    "data": {"n_studies": 24,
             "phantom": {"height": 20, "width": 20, "frames": 8, "depth": 2, "radius": 5.0}},
    "roi": {"size": 16},
    "encoder": {"agg_channels": 8, "embed_dim": 16, "heads": 2, "local_blocks": 1, "global_blocks": 1},
    "stage1": {"epochs": 1, "batch_size": 8},
    "stage2": {"epochs": 2, "batch_size": 8, "codebook_size": 8, "decoder_hidden": 8},
    "survival": {"penalizer": 1.0}
  })");
  const fs::path p = kRoot / "tiny.json";
  std::ofstream(p) << cfg.dump(2);
  return p;
}

}  // namespace

TEST_CASE("staged subcommands produce a report") {
  fs::remove_all(kRoot);
  const std::string cfg = write_config().string();
  const std::string run = (kRoot / "staged").string();
  const std::string common = " --config " + cfg + " --out " + run;

  REQUIRE(ctsl("synth" + common) == 0);
  REQUIRE(ctsl("preprocess" + common) == 0);
  REQUIRE(ctsl("train-stage1" + common) == 0);
  REQUIRE(ctsl("train-stage2" + common) == 0);
  REQUIRE(ctsl("fit-surv" + common) == 0);
  REQUIRE(ctsl("eval" + common) == 0);
  CHECK(last_log().find("c-index test") != std::string::npos);

  const json report = json::parse(slurp(fs::path(run) / "report.json"));
  CHECK(report.at("schema_version") == 1);
  CHECK(report.at("mode") == "full_ctsl");
  CHECK(report.at("seed") == 11);
  CHECK(report.at("n_studies") == 24);
  for (const char* f : {"roi_windows.csv", "student.ckpt", "teacher.ckpt", "decoder.ckpt", "codebooks.ckpt",
                        "stage1_loss.csv", "stage2_loss.csv", "codebook_usage.csv", "features.csv", "cox_model.json",
                        "km_curve.csv", "attribution.csv", "feature_ranking.csv", "risk_scores.csv"})
    CHECK_MESSAGE(fs::exists(fs::path(run) / f), f);
  CHECK_FALSE(fs::exists(fs::path(run) / ".lock"));

  // eval for a mode the Cox head was not fitted for
  CHECK(ctsl("eval" + common + " --mode random_encoder") == 1);
  CHECK(last_log().find("fitted for mode full_ctsl") != std::string::npos);
}

TEST_CASE("report honours the seed flag, data dir env var and device fallback") {
  const std::string cfg = write_config().string();
  const fs::path data = kRoot / "shared_data";
  const std::string env = "CTSL_DATA_DIR=\"" + data.string() + "\"";

  REQUIRE(ctsl("synth --config " + cfg + " --out " + (kRoot / "s").string(), env) == 0);
  CHECK(fs::exists(data / "manifest.json"));
  CHECK_FALSE(fs::exists(kRoot / "s" / "data"));

  const auto report = [&](const std::string& out, const std::string& extra) {
    REQUIRE(ctsl("report --config " + cfg + " --out " + (kRoot / out).string() + extra, env) == 0);
    return slurp(kRoot / out / "report.json");
  };
  const std::string a = report("a", " --mode ehr_only_cox");
  const std::string b = report("b", " --mode ehr_only_cox --device accelerator");
  CHECK(last_log().find("running on cpu") != std::string::npos);
  CHECK(a == b);
  CHECK(json::parse(a).at("config").at("device") == "cpu");

  const std::string c = report("c", " --mode ehr_only_cox --seed 12");
  CHECK(json::parse(c).at("seed") == 12);
}

TEST_CASE("ablate writes the comparison table") {
  const std::string cfg = write_config().string();
  const fs::path run = kRoot / "ablate";
  REQUIRE(ctsl("ablate --config " + cfg + " --out " + run.string()) == 0);
  const std::string csv = slurp(run / "ablation.csv");
  CHECK(csv.rfind("mode,c_index_test\n", 0) == 0);
  CHECK(csv.find("random_encoder,") != std::string::npos);
  CHECK(csv.find("distilled_no_vq,") != std::string::npos);
  CHECK(csv.find("full_ctsl,") != std::string::npos);
  CHECK(json::parse(slurp(run / "ablation.json")).at("rows").size() == 3);
}

TEST_CASE("usage and runtime errors exit non-zero") {
  const std::string cfg = write_config().string();
  CHECK(ctsl("") != 0);
  CHECK(ctsl("frobnicate") != 0);
  CHECK(ctsl("report --mode resnet --out " + (kRoot / "bad").string()) == 1);
  CHECK(last_log().find("unknown mode") != std::string::npos);
  CHECK(ctsl("report --device tpu") != 0);
  CHECK(ctsl("report --config " + (kRoot / "absent.json").string()) != 0);

  // out of order: preprocess before any data exists
  CHECK(ctsl("preprocess --config " + cfg + " --out " + (kRoot / "empty").string()) == 1);
  CHECK(last_log().find("run synth first") != std::string::npos);

  // a held lock blocks a second run
  const fs::path locked = kRoot / "locked";
  fs::create_directories(locked);
  std::ofstream(locked / ".lock") << "12345\n";
  CHECK(ctsl("synth --config " + cfg + " --out " + locked.string()) == 1);
  CHECK(last_log().find("locked") != std::string::npos);
}
