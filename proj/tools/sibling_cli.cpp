// sibling_cli: gen-data | train | calibrate | attack | evaluate | report
//
// Errors go to stderr as a single "E_CODE: message" line with exit status 2.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "sibling/config.hpp"
#include "sibling/pipeline.hpp"

namespace {

int fail(const char* code, const std::string& msg) {
  std::string line = msg;
  for (char& ch : line) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  std::fprintf(stderr, "%s: %s\n", code, line.c_str());
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sibling-task adversarial attack experiments"};
  app.require_subcommand(1, 1);

  std::string config_path, out_dir, algorithm;
  std::size_t workers = 1;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory (overrides config)");
    sub->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  };
  for (const char* name : {"gen-data", "train", "calibrate", "evaluate", "report"}) {
    add_common(app.add_subcommand(name));
  }
  auto* attack = app.add_subcommand("attack", "run one attack arm");
  add_common(attack);
  attack->add_option("--algorithm", algorithm,
                     "pgd_single|pgd_ensemble|mifgsm|basic_joint|jtmo|sibling|all")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("E_ARGUMENT", e.what());
  }

  try {
    using namespace sibling;
    ExperimentConfig cfg = parse_config(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "gen-data") {
      cmd_gen_data(cfg);
    } else if (cmd == "train") {
      cmd_train(cfg, workers);
    } else if (cmd == "calibrate") {
      for (const auto& c : cmd_calibrate(cfg)) {
        std::printf("%s tau=%.6f realized_fpr=%.6f n=%zu\n", c.model_id.c_str(),
                    c.tau, c.realized_fpr, c.n_impostor_pairs);
      }
    } else if (cmd == "attack") {
      std::vector<std::string> arms{algorithm};
      if (algorithm == "all") arms = cfg.eval.algorithms;
      for (const auto& arm : arms) {
        if (!is_arm(arm)) {
          throw Error(ErrorCode::kArgument, "unknown algorithm '" + arm + "'");
        }
        const auto run = cmd_attack(cfg, arm, workers);
        std::printf("%s: %zu pairs in %.1fs\n", arm.c_str(),
                    run.archive.pairs.size(), run.runtime_s);
      }
    } else if (cmd == "evaluate") {
      cmd_evaluate(cfg);
      std::cout << read_file(paths_for(cfg).report_md());
    } else if (cmd == "report") {
      const auto s = cmd_report(cfg);
      std::printf("wrote %zu perturbation and %zu saliency images\n",
                  s.perturbation_images, s.saliency_images);
    }
  } catch (const sibling::Error& e) {
    return fail(sibling::error_code_name(e.code()), e.what());
  } catch (const std::exception& e) {
    return fail("E_INTERNAL", e.what());
  }
  return 0;
}
