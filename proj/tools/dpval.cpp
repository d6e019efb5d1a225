#include "dpval/experiment.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

nlohmann::json error_record(const std::string& module, const std::string& field,
                            const std::string& message, const std::string& config) {
  nlohmann::json rec = {{"status", "error"}, {"module", module}, {"message", message}};
  rec["field"] = field.empty() ? nlohmann::json(nullptr) : nlohmann::json(field);
  if (!config.empty()) rec["config"] = config;
  return rec;
}

int report(const nlohmann::json& rec, const std::filesystem::path& dir) {
  std::cerr << rec.dump() << "\n";
  if (!dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    std::ofstream out(dir / "error.json");
    if (out) out << rec.dump(2) << "\n";
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semivalue data valuation under differentially private gradients"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run the experiment described by a JSON config");
  run->add_option("config", config_path, "Experiment config")->required();

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Parse and check a config without running it");
  validate->add_option("config", validate_path, "Experiment config")->required();

  std::string result_dir;
  std::string plot_kind;
  auto* plot = app.add_subcommand("plot", "Write plot-ready .dat files from a result directory");
  plot->add_option("result_dir", result_dir, "Directory holding result.json")->required();
  plot->add_option("kind", plot_kind, "variance | removal | auc_q | mav | similarity | federated")->required();

  CLI11_PARSE(app, argc, argv);

  std::filesystem::path out_dir;
  const std::string& cfg_arg = run->parsed() ? config_path : validate_path;
  try {
    if (plot->parsed()) {
      for (const auto& f : dpval::emit_plot_data(result_dir, plot_kind)) std::cout << f.string() << "\n";
      return 0;
    }
    const auto cfg = dpval::load_config(cfg_arg);
    if (validate->parsed()) {
      std::cout << "ok: " << dpval::to_string(cfg.kind) << " -> " << dpval::resolve_output_dir(cfg).string()
                << "\n";
      return 0;
    }
    out_dir = dpval::resolve_output_dir(cfg);
    const auto outcome = dpval::run_experiment(cfg);
    if (!outcome.message.empty()) std::cout << outcome.message << "\n";
    std::cout << "wrote " << outcome.directory.string() << "\n";
    return outcome.passed ? 0 : 3;
  } catch (const dpval::Error& e) {
    return report(error_record(e.module(), e.field(), e.what(), plot->parsed() ? "" : cfg_arg), out_dir);
  } catch (const std::exception& e) {
    return report(error_record("internal", "", e.what(), plot->parsed() ? "" : cfg_arg), out_dir);
  }
}
