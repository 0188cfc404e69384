// Command-line front end for the staged pipeline.

#include <cstdio>
#include <exception>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "ctsl/kernels.hpp"
#include "ctsl/runner.hpp"

namespace fs = std::filesystem;
using namespace ctsl::runner;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::optional<std::string> mode;
  std::optional<std::string> device;
};

ExperimentConfig resolve(const Flags& f) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig::from_json(json::object()) : ExperimentConfig::load(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.mode) cfg.mode = parse_mode(*f.mode);
  if (f.device) cfg.device = *f.device;
  if (cfg.device == "accelerator") {
    std::fprintf(stderr, "ctsl: no accelerator backend in this build; running on cpu\n");
    cfg.device = "cpu";
  }
  cfg.validate();
  return cfg;
}

void print_summary(const json& report) {
  if (report.contains("c_index")) {
    std::printf("mode %s  c-index test %.4f\n", report.at("mode").get<std::string>().c_str(),
                report.at("c_index").at("test").get<double>());
  } else if (report.contains("rows")) {
    for (const auto& r : report.at("rows")) {
      std::printf("%-16s %.4f\n", r.at("mode").get<std::string>().c_str(), r.at("c_index_test").get<double>());
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctsl: cine motion representation and survival pipeline"};
  app.require_subcommand(1);
  Flags flags;

  using Action = std::function<void(const ExperimentConfig&, const fs::path&)>;
  const std::map<std::string, std::pair<std::string, Action>> commands{
      {"synth", {"generate a synthetic cohort into the data directory", cmd_synth}},
      {"preprocess", {"locate and crop motion ROIs", cmd_preprocess}},
      {"train-stage1", {"distillation pretraining of the video encoder", cmd_train_stage1}},
      {"train-stage2", {"codebook and decoder training", cmd_train_stage2}},
      {"fit-surv", {"extract features and fit the Cox head", cmd_fit_surv}},
      {"eval", {"evaluate on the test split and write the report",
                [](const ExperimentConfig& c, const fs::path& d) { print_summary(cmd_eval(c, d)); }}},
      {"report", {"run the whole pipeline for one mode",
                  [](const ExperimentConfig& c, const fs::path& d) { print_summary(cmd_report(c, d)); }}},
      {"ablate", {"compare random_encoder, distilled_no_vq and full_ctsl",
                  [](const ExperimentConfig& c, const fs::path& d) { print_summary(cmd_ablate(c, d)); }}},
  };

  std::string chosen;
  for (const auto& [name, entry] : commands) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    sub->add_option("--config", flags.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "override the config seed");
    sub->add_option("--out", flags.out, "run directory")->capture_default_str();
    sub->add_option("--mode", flags.mode, "full_ctsl | distilled_no_vq | random_encoder | ehr_only_cox");
    sub->add_option("--device", flags.device, "cpu | accelerator")->check(CLI::IsMember({"cpu", "accelerator"}));
    sub->callback([&chosen, n = name] { chosen = n; });
  }
  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig cfg = resolve(flags);
    std::fprintf(stderr, "ctsl: %s on %s kernels, run dir %s\n", chosen.c_str(),
                 std::string(ctsl::kernels::isa_name(ctsl::kernels::active().isa)).c_str(), flags.out.c_str());
    commands.at(chosen).second(cfg, flags.out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ctsl %s: %s\n", chosen.c_str(), e.what());
    return 1;
  }
  return 0;
}
