// Pipeline driver: synth | train-base | gen-mdpm | train-icnn | refine | eval.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "icnn/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t rounds = 0;
  std::size_t threads = 0;
  bool quiet = false;
};

// Defaults, then the config file (flag or ICNN_CONFIG), then flags.
icnn::RunConfig build_config(const Options& o, const CLI::App& app) {
  icnn::RunConfig cfg;
  std::string path = o.config;
  if (path.empty())
    if (const char* env = std::getenv("ICNN_CONFIG")) path = env;
  if (!path.empty()) icnn::apply_config_file(cfg, path);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw icnn::ConfigError("--set expects key=value, got '" + s + "'");
    icnn::set_config_value(cfg, icnn::detail::trim(s.substr(0, eq)), icnn::detail::trim(s.substr(eq + 1)));
  }
  if (app.count("--out")) cfg.out = o.out;
  if (app.count("--seed")) cfg.seed = o.seed;
  if (app.count("--threads")) cfg.threads = o.threads;
  if (app.count("--rounds")) cfg.rounds = o.rounds;
  icnn::validate(cfg);
  (void)cfg.out_path();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterative membrane-map refinement pipeline"};
  app.require_subcommand(1);
  Options o;
  app.add_option("-c,--config", o.config, "config file (default: $ICNN_CONFIG)");
  app.add_option("--set", o.sets, "override a config key, key=value (repeatable)");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--seed", o.seed, "root seed");
  app.add_option("--threads", o.threads, "worker threads (0 = all cores)");
  app.add_option("--rounds", o.rounds, "refinement rounds");
  app.add_flag("-q,--quiet", o.quiet, "suppress warnings");

  app.add_subcommand("synth", "write synthetic image and label stacks");
  app.add_subcommand("train-base", "train one base classifier");
  app.add_subcommand("gen-mdpm", "out-of-fold training maps and ensemble test maps");
  app.add_subcommand("train-icnn", "train the map-refinement networks");
  app.add_subcommand("refine", "run refinement rounds (resumes)");
  app.add_subcommand("eval", "score every round and print a summary");
  app.add_subcommand("config", "print the effective configuration keys");
  app.fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    icnn::quiet_warnings() = o.quiet;
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "config") {
      for (const auto& k : icnn::config_keys()) std::cout << k << '\n';
      return 0;
    }
    const icnn::RunConfig cfg = build_config(o, app);
    if (cmd == "synth") {
      icnn::cmd_synth(cfg);
      std::cout << "wrote " << cfg.train_planes << " training and " << cfg.test_planes
                << " test planes to " << cfg.data_path().string() << '\n';
    } else if (cmd == "train-base") {
      const auto h = icnn::cmd_train_base(cfg);
      std::cout << "base model: best epoch " << h.best_epoch << ", val loss " << h.best_val_loss() << '\n';
    } else if (cmd == "gen-mdpm") {
      icnn::cmd_gen_mdpm(cfg);
      std::cout << "wrote " << (cfg.out_path() / "mdpm" / "train.mdpm").string() << '\n';
    } else if (cmd == "train-icnn") {
      icnn::cmd_train_icnn(cfg);
      std::cout << "trained " << cfg.icnn_models << " refinement models\n";
    } else if (cmd == "refine") {
      const auto s = icnn::cmd_refine(cfg);
      if (s.resumed_from > 0) std::cout << "resumed after round " << s.resumed_from << '\n';
      std::cout << "refined through round " << s.rounds << '\n';
    } else if (cmd == "eval") {
      const auto rep = icnn::cmd_eval(cfg);
      std::cout << icnn::summary_line(rep) << '\n';
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return icnn::exit_code_for(e);
  }
}
