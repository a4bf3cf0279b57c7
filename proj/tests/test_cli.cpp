#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "icnn/pipeline.hpp"

using namespace icnn;

namespace {

const char* kTinyConfig = R"(# small but complete
synth.train_planes = 6
synth.height = 40
synth.width = 40
synth.cell_count = 6
base.input_side = 9
base.layers = conv:4x4x4,relu,maxpool:2,conv:3x3x4,relu,fc:8,relu,softmax
icnn.input_side = 9
icnn.layers = conv:4x4x4,relu,maxpool:2,conv:3x3x4,relu,fc:8,relu,softmax
train.max_epochs = 2
train.patches_per_epoch = 200
train.val_patches = 100
train.calib_pixels = 500
base.val_planes = 1
mdpm.folds = 3
mdpm.fold_val_planes = 1
mdpm.tta = false
icnn.models = 2
refine.rounds = 3
)";

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("icnn_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig tiny_config(const fs::path& out) {
  RunConfig cfg;
  std::istringstream is(kTinyConfig);
  apply_config_text(cfg, is);
  cfg.out = out.string();
  return cfg;
}

void run_all(const RunConfig& cfg) {
  cmd_synth(cfg);
  cmd_train_base(cfg);
  cmd_gen_mdpm(cfg);
  cmd_train_icnn(cfg);
  cmd_refine(cfg);
  cmd_eval(cfg);
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file_bytes(e.path());
  return files;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ICNN_CLI_PATH) + " -q " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, UnknownKeyIsRejectedWithLineNumber) {
  RunConfig cfg;
  std::istringstream is("seed = 3\nsynth.colour = red\n");
  try {
    apply_config_text(cfg, is, "x.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("synth.colour"), std::string::npos);
  }
}

TEST(Config, EveryKeyHasADefaultExceptTheOutputPath) {
  RunConfig cfg;
  EXPECT_NO_THROW(validate(cfg));
  EXPECT_THROW((void)cfg.out_path(), ConfigError);
  cfg.out = "somewhere";
  EXPECT_EQ(cfg.data_path(), fs::path("somewhere") / "data");
}

TEST(Config, ParsesValuesAndRejectsMalformedOnes) {
  RunConfig cfg;
  set_config_value(cfg, "eval.thresholds", "0.2:0.4:0.1");
  ASSERT_EQ(cfg.thresholds.size(), 3u);
  EXPECT_NEAR(cfg.thresholds[2], 0.4, 1e-12);
  set_config_value(cfg, "eval.thresholds", "0.3, 0.7");
  EXPECT_EQ(cfg.thresholds, (std::vector<double>{0.3, 0.7}));
  set_config_value(cfg, "icnn.mask_mode", "uniform_noise");
  EXPECT_EQ(cfg.mask_mode, MaskMode::uniform_noise);
  set_config_value(cfg, "refine.tta", "yes");
  EXPECT_TRUE(cfg.refine_tta);
  EXPECT_THROW(set_config_value(cfg, "refine.rounds", "-1"), ConfigError);
  EXPECT_THROW(set_config_value(cfg, "refine.rounds", "3x"), ConfigError);
  EXPECT_THROW(set_config_value(cfg, "eval.thresholds", "0:1:0.5"), ConfigError);
  EXPECT_THROW(set_config_value(cfg, "base.layers", "conv:3"), ConfigError);
  EXPECT_THROW(set_config_value(cfg, "mdpm.inference", "fast"), ConfigError);
  std::istringstream bad("seed 3\n");
  EXPECT_THROW(apply_config_text(cfg, bad), ConfigError);
}

TEST(Config, CrossFieldValidation) {
  RunConfig cfg;
  cfg.folds = 7;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = {};
  cfg.icnn_models = 4;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = {};
  cfg.base.input_side = 16;
  EXPECT_THROW(validate(cfg), ConfigError);
}

TEST(Pipeline, TinyRunComposesAndMatchesMetrics) {
  const fs::path dir = scratch_dir("compose");
  const RunConfig cfg = tiny_config(dir);
  run_all(cfg);

  EXPECT_TRUE(verify_manifest(dir / "data").empty());
  std::istringstream man(read_file_bytes(dir / "data" / "manifest.txt"));
  std::size_t lines = 0;
  for (std::string l; std::getline(man, l);) ++lines;
  EXPECT_EQ(lines, 2 * cfg.train_planes);

  const Stack<double> maps = read_probstack((dir / "mdpm" / "train.mdpm").string());
  EXPECT_EQ(maps.size(), cfg.train_planes);
  const FoldPlan plan = kfold_plan(cfg.train_planes, cfg.folds, derive_seed(cfg.seed, "gen-mdpm/folds"));
  EXPECT_TRUE(provenance_is_leak_free(plan, read_provenance(dir / "mdpm" / "train.provenance"), cfg.train_planes));

  const Dataset d = load_training_set(cfg);
  std::vector<Stack<double>> trace;
  for (std::size_t r = 0; r <= cfg.rounds; ++r)
    trace.push_back(read_probstack((dir / "refine" / round_file(r)).string()));
  EXPECT_EQ(trace.front(), maps);
  std::ostringstream expect;
  write_round_report_csv(expect, round_report(trace, d.labels, cfg.thresholds));
  EXPECT_EQ(read_file_bytes(dir / "eval" / "round_report.csv"), expect.str());
  const std::string csv = expect.str();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(cfg.rounds + 2));
  EXPECT_EQ(read_file_bytes(dir / "eval" / "summary.txt").rfind("best round ", 0), 0u);
  fs::remove_all(dir);
}

TEST(Pipeline, RerunsAreByteIdenticalAcrossThreadCounts) {
  const fs::path a = scratch_dir("rerun_a"), b = scratch_dir("rerun_b");
  RunConfig ca = tiny_config(a), cb = tiny_config(b);
  cb.threads = 3;
  run_all(ca);
  run_all(cb);
  const auto sa = snapshot(a), sb = snapshot(b);
  ASSERT_EQ(sa.size(), sb.size());
  for (const auto& [name, bytes] : sa) {
    ASSERT_TRUE(sb.count(name)) << name;
    EXPECT_TRUE(sb.at(name) == bytes) << name;
  }
  // Same directory, second pass: artifacts are overwritten with identical bytes.
  run_all(ca);
  EXPECT_TRUE(snapshot(a) == sa);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Pipeline, SeedChangesTheData) {
  const fs::path a = scratch_dir("seed_a"), b = scratch_dir("seed_b");
  RunConfig ca = tiny_config(a), cb = tiny_config(b);
  cb.seed = 2;
  cmd_synth(ca);
  cmd_synth(cb);
  EXPECT_NE(read_file_bytes(a / "data" / "train_image_000.pgm"), read_file_bytes(b / "data" / "train_image_000.pgm"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Pipeline, RefineResumesAfterTheLastCompleteRound) {
  const fs::path dir = scratch_dir("resume");
  const RunConfig cfg = tiny_config(dir);
  run_all(cfg);
  const auto full = snapshot(dir / "refine");

  // Interrupted after round 1: later rounds missing, one half-written temporary.
  fs::remove(dir / "refine" / round_file(2));
  fs::remove(dir / "refine" / round_file(3));
  {
    std::ofstream partial(dir / "refine" / (round_file(2) + ".tmp"), std::ios::binary);
    partial << "MDPM1\n40 40 6\n";
  }
  const RefineSummary s = cmd_refine(cfg);
  EXPECT_EQ(s.resumed_from, 1u);
  EXPECT_FALSE(fs::exists(dir / "refine" / (round_file(2) + ".tmp")));
  EXPECT_TRUE(snapshot(dir / "refine") == full);

  // A truncated round file counts as missing.
  const std::string r3 = read_file_bytes(dir / "refine" / round_file(3));
  atomic_write(dir / "refine" / round_file(3), [&](std::ostream& os) { os << r3.substr(0, r3.size() / 2); });
  EXPECT_EQ(cmd_refine(cfg).resumed_from, 2u);
  EXPECT_TRUE(snapshot(dir / "refine") == full);

  // Extending the run continues from the existing rounds.
  RunConfig more = cfg;
  more.rounds = 4;
  EXPECT_EQ(cmd_refine(more).resumed_from, 3u);
  EXPECT_TRUE(fs::exists(dir / "refine" / round_file(4)));
  fs::remove_all(dir);
}

TEST(Pipeline, DetectsTamperedProvenance) {
  const fs::path dir = scratch_dir("prov");
  const RunConfig cfg = tiny_config(dir);
  cmd_synth(cfg);
  cmd_gen_mdpm(cfg);
  std::string prov = read_file_bytes(dir / "mdpm" / "train.provenance");
  const FoldPlan plan = kfold_plan(cfg.train_planes, cfg.folds, derive_seed(cfg.seed, "gen-mdpm/folds"));
  // Claim plane 0 came from a fold that trained on it.
  const std::size_t trained_on_0 = plan.folds[0].heldout[0] == 0 ? 1 : 0;
  const auto nl = prov.find('\n');
  prov = "plane=0 fold=" + std::to_string(trained_on_0) + " model=x" + prov.substr(nl);
  atomic_write(dir / "mdpm" / "train.provenance", [&](std::ostream& os) { os << prov; });
  EXPECT_THROW(cmd_train_icnn(cfg), FormatError);
  fs::remove_all(dir);
}

TEST(Pipeline, ManifestFlagsModifiedFiles) {
  const fs::path dir = scratch_dir("manifest");
  const RunConfig cfg = tiny_config(dir);
  cmd_synth(cfg);
  {
    std::ofstream os(dir / "data" / "train_image_002.pgm", std::ios::binary | std::ios::app);
    os << 'x';
  }
  EXPECT_EQ(verify_manifest(dir / "data"), std::vector<std::string>{"train_image_002.pgm"});
  fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch_dir("exit");
  const fs::path cfg_path = dir / "tiny.cfg";
  atomic_write(cfg_path, [&](std::ostream& os) { os << kTinyConfig; });
  const std::string base = "-c " + cfg_path.string() + " --out " + (dir / "run").string() + " ";

  EXPECT_EQ(run_cli(base + "--set no.such.key=1 synth"), 2);
  EXPECT_EQ(run_cli(base + "--set mdpm.folds=4 synth"), 2);
  EXPECT_EQ(run_cli("-c " + (dir / "missing.cfg").string() + " synth"), 2);
  EXPECT_EQ(run_cli(base + "frobnicate"), 2);
  EXPECT_EQ(run_cli(base + "train-base"), 3);  // no data yet
  EXPECT_EQ(run_cli(base + "synth"), 0);
  EXPECT_EQ(run_cli(base + "eval"), 3);  // no refinement rounds yet
  EXPECT_EQ(run_cli(base + "--set train.lr=1e300 train-base"), 4);
  EXPECT_EQ(run_cli(base + "train-base"), 0);
  EXPECT_TRUE(fs::exists(dir / "run" / "base" / "model.mrnn"));
  fs::remove_all(dir);
}

TEST(Cli, FlagsOverrideFileAndEnvironmentSuppliesConfig) {
  const fs::path dir = scratch_dir("precedence");
  const fs::path cfg_path = dir / "tiny.cfg";
  atomic_write(cfg_path, [&](std::ostream& os) { os << kTinyConfig << "out = " << (dir / "from_file").string() << "\n"; });
  ::setenv("ICNN_CONFIG", cfg_path.c_str(), 1);
  EXPECT_EQ(run_cli("synth"), 0);
  EXPECT_TRUE(fs::exists(dir / "from_file" / "data" / "manifest.txt"));
  EXPECT_EQ(run_cli("--out " + (dir / "from_flag").string() + " --seed 9 synth"), 0);
  ::unsetenv("ICNN_CONFIG");
  EXPECT_NE(read_file_bytes(dir / "from_file" / "data" / "train_image_000.pgm"),
            read_file_bytes(dir / "from_flag" / "data" / "train_image_000.pgm"));
  fs::remove_all(dir);
}
