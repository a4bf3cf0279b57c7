#ifndef ICNN_PIPELINE_HPP
#define ICNN_PIPELINE_HPP

// File-based pipeline stages shared by the command-line tool and the
// acceptance suite. Every stage reads its inputs from, and writes its outputs
// under, RunConfig::out (data may live elsewhere via data_dir).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "icnn/icnn.hpp"

namespace icnn {

namespace fs = std::filesystem;

/// Raised when training leaves no usable model.
struct DivergenceError : NumericError {
  using NumericError::NumericError;
};

struct RunConfig {
  std::string out;       // required
  std::string data_dir;  // defaults to <out>/data
  std::uint64_t seed = 1;
  std::size_t threads = 1;

  SynthConfig synth;
  std::size_t train_planes = 30;
  std::size_t test_planes = 0;

  NetworkSpec base = desk_spec();
  NetworkSpec icnn = desk_spec();
  TrainConfig train;

  std::size_t base_val_planes = 5;
  std::size_t folds = 10;
  std::size_t fold_val_planes = 3;
  bool mdpm_tta = true;
  InferenceMode mdpm_mode = InferenceMode::dense;

  std::size_t icnn_models = 6;
  MaskMode mask_mode = MaskMode::constant_zero;
  std::size_t rounds = 20;
  bool recalibrate = true;
  bool refine_tta = false;
  std::vector<double> thresholds = default_threshold_grid();

  fs::path out_path() const {
    if (out.empty()) throw ConfigError("no output directory: set 'out' in the config or pass --out");
    return fs::path(out);
  }
  fs::path data_path() const { return data_dir.empty() ? out_path() / "data" : fs::path(data_dir); }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  if constexpr (std::is_unsigned_v<T>) {
    if (!v.empty() && v[0] == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  if (!(is >> out) || !(is >> std::ws).eof()) throw ConfigError(key + ": cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

/// "lo:hi:step" or a comma-separated list.
inline std::vector<double> parse_grid(const std::string& key, const std::string& v) {
  std::vector<double> g;
  if (v.find(':') != std::string::npos) {
    std::istringstream is(v);
    double lo = 0, hi = 0, step = 0;
    char c1 = 0, c2 = 0;
    if (!(is >> lo >> c1 >> hi >> c2 >> step) || c1 != ':' || c2 != ':' || !(step > 0) || hi < lo)
      throw ConfigError(key + ": expected lo:hi:step, got '" + v + "'");
    const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
    for (std::size_t i = 0; i <= n; ++i) g.push_back(lo + static_cast<double>(i) * step);
  } else {
    std::istringstream is(v);
    std::string tok;
    while (std::getline(is, tok, ',')) g.push_back(parse_number<double>(key, trim(tok)));
  }
  if (g.empty()) throw ConfigError(key + ": empty threshold grid");
  for (double t : g)
    if (!(t > 0.0 && t < 1.0)) throw ConfigError(key + ": thresholds must lie in (0, 1)");
  return g;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto size = [](std::size_t RunConfig::*m) {
      return [m](RunConfig& c, const std::string& k, const std::string& v) {
        c.*m = parse_number<std::size_t>(k, v);
      };
    };
    auto flag = [](bool RunConfig::*m) {
      return [m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_bool(k, v); };
    };
    auto synth_size = [](std::size_t SynthConfig::*m) {
      return [m](RunConfig& c, const std::string& k, const std::string& v) {
        c.synth.*m = parse_number<std::size_t>(k, v);
      };
    };
    auto synth_real = [](double SynthConfig::*m) {
      return [m](RunConfig& c, const std::string& k, const std::string& v) {
        c.synth.*m = parse_number<double>(k, v);
      };
    };
    auto train_size = [](std::size_t TrainConfig::*m) {
      return [m](RunConfig& c, const std::string& k, const std::string& v) {
        c.train.*m = parse_number<std::size_t>(k, v);
      };
    };
    auto train_real = [](double TrainConfig::*m) {
      return [m](RunConfig& c, const std::string& k, const std::string& v) {
        c.train.*m = parse_number<double>(k, v);
      };
    };
    auto net = [](NetworkSpec RunConfig::*m, bool layers) {
      return [m, layers](RunConfig& c, const std::string& k, const std::string& v) {
        if (layers)
          (c.*m).layers = parse_layers(v);
        else
          (c.*m).input_side = parse_number<std::size_t>(k, v);
      };
    };

    t["out"] = [](RunConfig& c, const std::string&, const std::string& v) { c.out = v; };
    t["data_dir"] = [](RunConfig& c, const std::string&, const std::string& v) { c.data_dir = v; };
    t["seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.seed = parse_number<std::uint64_t>(k, v);
    };
    t["threads"] = size(&RunConfig::threads);

    t["synth.train_planes"] = size(&RunConfig::train_planes);
    t["synth.test_planes"] = size(&RunConfig::test_planes);
    t["synth.height"] = synth_size(&SynthConfig::height);
    t["synth.width"] = synth_size(&SynthConfig::width);
    t["synth.cell_count"] = synth_size(&SynthConfig::cell_count);
    t["synth.membrane_width"] = synth_real(&SynthConfig::membrane_width);
    t["synth.noise_sigma"] = synth_real(&SynthConfig::noise_sigma);
    t["synth.blur_sigma"] = synth_real(&SynthConfig::blur_sigma);
    t["synth.clutter_density"] = synth_real(&SynthConfig::clutter_density);
    t["synth.gap_density"] = synth_real(&SynthConfig::gap_density);
    t["synth.gap_radius"] = synth_real(&SynthConfig::gap_radius);

    t["base.input_side"] = net(&RunConfig::base, false);
    t["base.layers"] = net(&RunConfig::base, true);
    t["icnn.input_side"] = net(&RunConfig::icnn, false);
    t["icnn.layers"] = net(&RunConfig::icnn, true);

    t["train.lr"] = train_real(&TrainConfig::lr);
    t["train.momentum"] = train_real(&TrainConfig::momentum);
    t["train.batch_size"] = train_size(&TrainConfig::batch_size);
    t["train.max_epochs"] = train_size(&TrainConfig::max_epochs);
    t["train.patience"] = train_size(&TrainConfig::patience);
    t["train.patches_per_epoch"] = train_size(&TrainConfig::patches_per_epoch);
    t["train.val_patches"] = train_size(&TrainConfig::val_patches);
    t["train.calib_pixels"] = train_size(&TrainConfig::calib_pixels);
    t["train.calib_bins"] = train_size(&TrainConfig::calib_bins);
    t["train.augment"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.augment = parse_bool(k, v);
    };

    t["base.val_planes"] = size(&RunConfig::base_val_planes);
    t["mdpm.folds"] = size(&RunConfig::folds);
    t["mdpm.fold_val_planes"] = size(&RunConfig::fold_val_planes);
    t["mdpm.tta"] = flag(&RunConfig::mdpm_tta);
    t["mdpm.inference"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      if (v == "dense")
        c.mdpm_mode = InferenceMode::dense;
      else if (v == "patchwise")
        c.mdpm_mode = InferenceMode::patchwise;
      else
        throw ConfigError(k + ": expected dense or patchwise, got '" + v + "'");
    };

    t["icnn.models"] = size(&RunConfig::icnn_models);
    t["icnn.mask_mode"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.mask_mode = parse_mask_mode(v);
    };
    t["refine.rounds"] = size(&RunConfig::rounds);
    t["refine.recalibrate"] = flag(&RunConfig::recalibrate);
    t["refine.tta"] = flag(&RunConfig::refine_tta);
    t["eval.thresholds"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.thresholds = parse_grid(k, v);
    };
    return t;
  }();
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, s] : detail::setters()) keys.push_back(k);
  return keys;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& t = detail::setters();
  const auto it = t.find(key);
  if (it == t.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, key, value);
}

/// "key = value" lines; '#' starts a comment.
inline void apply_config_text(RunConfig& cfg, std::istream& is, const std::string& origin = "config") {
  std::string line;
  for (std::size_t no = 1; std::getline(is, line); ++no) {
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(no) + ": expected key = value");
    try {
      set_config_value(cfg, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(no) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  apply_config_text(cfg, is, path);
}

inline void validate(const RunConfig& c) {
  validate(c.synth);
  for (const auto& [name, spec] : {std::pair{"base", &c.base}, std::pair{"icnn", &c.icnn}}) {
    try {
      validate(*spec);
    } catch (const ShapeError& e) {
      throw ConfigError(std::string(name) + " network: " + e.what());
    }
  }
  validate(c.train);
  if (c.base.input_side % 2 == 0 || c.icnn.input_side % 2 == 0)
    throw ConfigError("network input sides must be odd");
  if (c.train_planes < 2) throw ConfigError("synth.train_planes must be >= 2");
  if (c.base_val_planes == 0 || c.base_val_planes >= c.train_planes)
    throw ConfigError("base.val_planes must be in [1, synth.train_planes)");
  if (c.folds < 2 || c.train_planes % c.folds != 0)
    throw ConfigError("mdpm.folds must be >= 2 and divide synth.train_planes");
  if (c.fold_val_planes == 0 || c.fold_val_planes >= c.train_planes - c.train_planes / c.folds)
    throw ConfigError("mdpm.fold_val_planes must leave at least one fitting plane per fold");
  if (c.icnn_models < 2 || c.train_planes % c.icnn_models != 0)
    throw ConfigError("icnn.models must be >= 2 and divide synth.train_planes");
  if (c.rounds == 0) throw ConfigError("refine.rounds must be >= 1");
  if (c.thresholds.empty()) throw ConfigError("eval.thresholds is empty");
}

/// Writes the NetworkSpec in the same key = value form the config uses.
inline std::string spec_text(const std::string& prefix, const NetworkSpec& s) {
  return prefix + ".input_side = " + std::to_string(s.input_side) + "\n" + prefix +
         ".layers = " + format_layers(s.layers) + "\n";
}

// ---------------------------------------------------------------------------
// Artifact helpers

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partial artifact.
inline void atomic_write(const fs::path& path, const std::function<void(std::ostream&)>& fn) {
  fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    fn(os);
    os.flush();
    if (!os) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::string checksum_hex(std::string_view bytes) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(bytes);
  return os.str();
}

/// One line per file: "<name> <bytes> <fnv1a-64 hex>", names relative to dir.
inline void write_manifest(const fs::path& dir, const std::vector<std::string>& names) {
  atomic_write(dir / "manifest.txt", [&](std::ostream& os) {
    for (const auto& n : names) {
      const std::string bytes = read_file_bytes(dir / n);
      os << n << ' ' << bytes.size() << ' ' << checksum_hex(bytes) << '\n';
    }
  });
}

/// Returns the names of files whose size or checksum disagree with the manifest.
inline std::vector<std::string> verify_manifest(const fs::path& dir) {
  std::istringstream is(read_file_bytes(dir / "manifest.txt"));
  std::vector<std::string> bad;
  std::string name, sum;
  std::size_t size = 0;
  while (is >> name >> size >> sum) {
    std::string bytes;
    try {
      bytes = read_file_bytes(dir / name);
    } catch (const FormatError&) {
      bad.push_back(name);
      continue;
    }
    if (bytes.size() != size || checksum_hex(bytes) != sum) bad.push_back(name);
  }
  return bad;
}

inline std::string indexed(const std::string& stem, std::size_t i, const std::string& ext) {
  std::ostringstream os;
  os << stem << std::setw(3) << std::setfill('0') << i << ext;
  return os.str();
}

inline std::string round_file(std::size_t r) { return "train_round" + std::to_string(r) + ".mdpm"; }

struct Dataset {
  Stack<double> images;
  Stack<std::uint32_t> labels;
};

/// Loads <split>_image_NNN.pgm / <split>_label_NNN.pgm pairs until the first
/// missing index.
inline Dataset load_dataset(const fs::path& dir, const std::string& split) {
  Dataset d;
  for (std::size_t i = 0;; ++i) {
    const fs::path img = dir / indexed(split + "_image_", i, ".pgm");
    if (!fs::exists(img)) break;
    d.images.push_back(read_gray_pgm(img.string()));
    d.labels.push_back(read_label_pgm((dir / indexed(split + "_label_", i, ".pgm")).string()));
    if (!d.images.back().same_dims(d.labels.back()))
      throw ShapeError(img.string() + ": image and label sizes differ");
    if (!d.images.back().same_dims(d.images.front())) throw ShapeError(img.string() + ": plane size differs");
  }
  return d;
}

inline Dataset load_training_set(const RunConfig& cfg) {
  Dataset d = load_dataset(cfg.data_path(), "train");
  if (d.images.empty()) throw FormatError("no training planes in " + cfg.data_path().string());
  if (d.images.size() != cfg.train_planes)
    throw FormatError("found " + std::to_string(d.images.size()) + " training planes, config says " +
                      std::to_string(cfg.train_planes));
  return d;
}

inline TrainConfig stage_train_config(const RunConfig& cfg, std::uint64_t seed) {
  TrainConfig t = cfg.train;
  t.seed = seed;
  t.threads = cfg.threads;
  return t;
}

inline void write_model(const fs::path& dir, const std::string& stem, const PixelModel& m) {
  atomic_write(dir / (stem + ".mrnn"), [&](std::ostream& os) { write_params(os, m.params); });
  atomic_write(dir / (stem + ".calib"), [&](std::ostream& os) { write_calibration(os, m.curve); });
}

inline void write_history(const fs::path& path, const TrainHistory& h) {
  atomic_write(path, [&](std::ostream& os) { write_history_csv(os, h); });
}

inline PixelModel read_model(const NetworkSpec& spec, const fs::path& dir, const std::string& stem) {
  PixelModel m;
  m.params = load_params((dir / (stem + ".mrnn")).string());
  try {
    check_params(spec, m.params);
  } catch (const ShapeError& e) {
    throw FormatError((dir / (stem + ".mrnn")).string() + " does not match the configured network: " +
                      e.what());
  }
  m.curve = load_calibration((dir / (stem + ".calib")).string());
  return m;
}

inline void require_converged(const TrainHistory& h, const std::string& what) {
  if (h.diverged) throw DivergenceError(what + " diverged: " + h.diagnostic);
}

/// Float32 round trip, so in-memory state equals what a resumed run reads.
inline Stack<double> as_stored(Stack<double> s) {
  for (auto& p : s)
    for (double& v : p.values) v = static_cast<double>(static_cast<float>(v));
  return s;
}

inline FoldPlan icnn_plan(const RunConfig& cfg) {
  return kfold_plan(cfg.train_planes, cfg.icnn_models, derive_seed(cfg.seed, "train-icnn/split"));
}

// ---------------------------------------------------------------------------
// Stages

/// data/{train,test}_{image,label}_NNN.pgm plus data/manifest.txt.
inline void cmd_synth(const RunConfig& cfg) {
  validate(cfg);
  const fs::path dir = cfg.data_path();
  std::vector<std::string> names;
  auto emit = [&](const std::string& split, std::size_t n, std::uint64_t seed) {
    for (std::size_t i = 0; i < n; ++i) {
      const SynthPlane p = synth_plane(cfg.synth, derive_seed(seed, i));
      const std::string img = indexed(split + "_image_", i, ".pgm");
      const std::string lab = indexed(split + "_label_", i, ".pgm");
      atomic_write(dir / img, [&](std::ostream& os) { write_pgm(os, p.image); });
      atomic_write(dir / lab, [&](std::ostream& os) { write_pgm(os, p.labels); });
      names.push_back(img);
      names.push_back(lab);
    }
  };
  emit("train", cfg.train_planes, derive_seed(cfg.seed, "synth/train"));
  emit("test", cfg.test_planes, derive_seed(cfg.seed, "synth/test"));
  write_manifest(dir, names);
}

/// base/model.{mrnn,calib}, base/history.csv, base/spec.txt.
inline TrainHistory cmd_train_base(const RunConfig& cfg) {
  validate(cfg);
  const Dataset d = load_training_set(cfg);
  std::vector<std::size_t> planes(d.images.size());
  std::iota(planes.begin(), planes.end(), std::size_t{0});
  const PixelModel m = train_base_model(cfg.base, d.images, d.labels, planes, cfg.base_val_planes,
                                        stage_train_config(cfg, derive_seed(cfg.seed, "train-base")));
  const fs::path dir = cfg.out_path() / "base";
  write_history(dir / "history.csv", m.history);
  require_converged(m.history, "base training");
  write_model(dir, "model", m);
  atomic_write(dir / "spec.txt", [&](std::ostream& os) { os << spec_text("base", cfg.base); });
  return m.history;
}

/// mdpm/train.mdpm (out-of-fold), mdpm/train.provenance, per-fold models and
/// histories, and mdpm/test.mdpm (fold-ensemble) when test planes exist.
inline void cmd_gen_mdpm(const RunConfig& cfg) {
  validate(cfg);
  const Dataset d = load_training_set(cfg);
  const fs::path dir = cfg.out_path() / "mdpm";
  const FoldPlan plan = kfold_plan(d.images.size(), cfg.folds, derive_seed(cfg.seed, "gen-mdpm/folds"));
  MdpmOptions mo;
  mo.train = stage_train_config(cfg, derive_seed(cfg.seed, "gen-mdpm/train"));
  mo.n_val = cfg.fold_val_planes;
  mo.tta = cfg.mdpm_tta;
  mo.mode = cfg.mdpm_mode;
  mo.threads = cfg.threads;
  const MdpmGeneration gen = gen_training_mdpms(d.images, d.labels, plan, cfg.base, mo, [&](const FoldModel& fm) {
    const std::string stem = indexed("fold_", fm.fold, "");
    write_history(dir / (stem + "_history.csv"), fm.model.history);
    write_model(dir, stem, fm.model);
  });
  if (!gen.failed_folds.empty())
    throw DivergenceError("fold " + std::to_string(gen.failed_folds.front()) + " diverged: " +
                          gen.models[gen.failed_folds.front()].model.history.diagnostic);
  if (!provenance_is_leak_free(plan, gen.provenance, d.images.size()))
    throw Error("internal error: out-of-fold provenance check failed");

  atomic_write(dir / "train.mdpm", [&](std::ostream& os) { write_probstack(os, gen.maps); });
  std::vector<ProvenanceRecord> prov = gen.provenance;
  std::sort(prov.begin(), prov.end(), [](auto& a, auto& b) { return a.plane < b.plane; });
  atomic_write(dir / "train.provenance", [&](std::ostream& os) {
    for (const auto& r : prov)
      os << "plane=" << r.plane << " fold=" << r.fold << " model=mdpm/" << indexed("fold_", r.fold, ".mrnn")
         << '\n';
  });

  const Dataset test = load_dataset(cfg.data_path(), "test");
  if (!test.images.empty()) {
    Stack<double> maps;
    for (const auto& img : test.images)
      maps.push_back(ensemble_map(cfg.base, gen.models, img, cfg.mdpm_tta, cfg.mdpm_mode, cfg.threads));
    atomic_write(dir / "test.mdpm", [&](std::ostream& os) { write_probstack(os, maps); });
  }
}

/// Parses a provenance sidecar written by cmd_gen_mdpm.
inline std::vector<ProvenanceRecord> read_provenance(const fs::path& path) {
  std::istringstream is(read_file_bytes(path));
  std::vector<ProvenanceRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    ProvenanceRecord r;
    char model[256] = {0};
    if (std::sscanf(line.c_str(), "plane=%zu fold=%zu model=%255s", &r.plane, &r.fold, model) != 3)
      throw FormatError(path.string() + ": bad provenance line '" + line + "'");
    out.push_back(r);
  }
  return out;
}

inline Stack<double> load_training_mdpms(const RunConfig& cfg) {
  const fs::path dir = cfg.out_path() / "mdpm";
  Stack<double> maps = read_probstack((dir / "train.mdpm").string());
  if (maps.size() != cfg.train_planes) throw FormatError("train.mdpm plane count differs from the config");
  const FoldPlan plan = kfold_plan(cfg.train_planes, cfg.folds, derive_seed(cfg.seed, "gen-mdpm/folds"));
  if (!provenance_is_leak_free(plan, read_provenance(dir / "train.provenance"), cfg.train_planes))
    throw FormatError("train.provenance does not certify out-of-fold maps for this config");
  return maps;
}

/// icnn/model_K.{mrnn,calib}, icnn/history_K.csv, icnn/split.txt. Model K is
/// validated on (and later refines) the K-th held-out group.
inline void cmd_train_icnn(const RunConfig& cfg) {
  validate(cfg);
  const Dataset d = load_training_set(cfg);
  const Stack<double> maps = load_training_mdpms(cfg);
  const FoldPlan plan = icnn_plan(cfg);
  const fs::path dir = cfg.out_path() / "icnn";
  const std::uint64_t root = derive_seed(cfg.seed, "train-icnn/model");
  for (std::size_t k = 0; k < plan.folds.size(); ++k) {
    TrainConfig tc = stage_train_config(cfg, derive_seed(root, k));
    tc.mask_mode = cfg.mask_mode;
    const PixelModel m = train_icnn(maps, d.labels, plan.folds[k].train, plan.folds[k].heldout, cfg.icnn, tc);
    write_history(dir / indexed("history_", k, ".csv"), m.history);
    require_converged(m.history, "I-CNN " + std::to_string(k));
    write_model(dir, indexed("model_", k, ""), m);
  }
  atomic_write(dir / "split.txt", [&](std::ostream& os) {
    for (std::size_t k = 0; k < plan.folds.size(); ++k) {
      os << "model=" << k << " planes=";
      for (std::size_t i = 0; i < plan.folds[k].heldout.size(); ++i)
        os << (i ? "," : "") << plan.folds[k].heldout[i];
      os << '\n';
    }
  });
}

struct RefineSummary {
  std::size_t resumed_from = 0;  // last round found on disk
  std::size_t rounds = 0;
};

/// refine/train_round<r>.mdpm for r = 0..rounds; every plane is refined by
/// the I-CNN that never saw it. Restarts after the last complete round file.
inline RefineSummary cmd_refine(const RunConfig& cfg) {
  validate(cfg);
  const fs::path dir = cfg.out_path() / "refine";
  const FoldPlan plan = icnn_plan(cfg);
  std::vector<PixelModel> models;
  for (std::size_t k = 0; k < plan.folds.size(); ++k)
    models.push_back(read_model(cfg.icnn, cfg.out_path() / "icnn", indexed("model_", k, "")));
  std::vector<std::size_t> owner(cfg.train_planes);
  for (std::size_t k = 0; k < plan.folds.size(); ++k)
    for (std::size_t p : plan.folds[k].heldout) owner[p] = k;

  RefineSummary sum;
  sum.rounds = cfg.rounds;
  Stack<double> cur;
  std::size_t start = 0;
  for (std::size_t r = 0; r <= cfg.rounds; ++r) {
    const fs::path f = dir / round_file(r);
    if (!fs::exists(f)) break;
    try {
      Stack<double> s = read_probstack(f.string());
      if (s.size() != cfg.train_planes) break;
      cur = std::move(s);
      start = r;
    } catch (const FormatError&) {
      break;
    }
  }
  if (cur.empty()) {
    cur = as_stored(load_training_mdpms(cfg));
    atomic_write(dir / round_file(0), [&](std::ostream& os) { write_probstack(os, cur); });
  }
  sum.resumed_from = start;

  const std::uint64_t noise_root = derive_seed(cfg.seed, "refine/noise");
  for (std::size_t r = start + 1; r <= cfg.rounds; ++r) {
    Stack<double> next(cur.size());
    for (std::size_t p = 0; p < cur.size(); ++p) {
      RefineOptions ro;
      ro.mask_mode = cfg.mask_mode;
      ro.recalibrate = cfg.recalibrate;
      ro.tta = cfg.refine_tta;
      ro.threads = cfg.threads;
      ro.noise_seed = derive_seed(derive_seed(noise_root, r), p);
      const PixelModel& m = models[owner[p]];
      next[p] = refine_once(cfg.icnn, m.params, cur[p], m.curve, ro);
    }
    cur = as_stored(std::move(next));
    atomic_write(dir / round_file(r), [&](std::ostream& os) { write_probstack(os, cur); });
  }
  return sum;
}

inline std::string summary_line(const RoundReport& rep) {
  std::size_t best = 0;
  for (std::size_t r = 1; r < rep.size(); ++r)
    if (rep[r].rand_error < rep[best].rand_error) best = r;
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << "best round " << rep[best].round << ", rand_error "
     << rep[best].rand_error << ", vs round 0 " << rep.front().rand_error;
  return os.str();
}

/// eval/round_report.csv and eval/summary.txt; returns the report.
inline RoundReport cmd_eval(const RunConfig& cfg) {
  validate(cfg);
  const Dataset d = load_training_set(cfg);
  const fs::path dir = cfg.out_path() / "refine";
  std::vector<Stack<double>> trace;
  for (std::size_t r = 0; r <= cfg.rounds; ++r) {
    const fs::path f = dir / round_file(r);
    if (!fs::exists(f)) throw FormatError("missing " + f.string() + "; run refine first");
    trace.push_back(read_probstack(f.string()));
  }
  const RoundReport rep = round_report(trace, d.labels, cfg.thresholds, cfg.threads);
  const fs::path out = cfg.out_path() / "eval";
  atomic_write(out / "round_report.csv", [&](std::ostream& os) { write_round_report_csv(os, rep); });
  atomic_write(out / "summary.txt", [&](std::ostream& os) { os << summary_line(rep) << '\n'; });
  return rep;
}

/// Exit status for an exception escaping a stage.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return 3;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 3;
  return 1;
}

}  // namespace icnn

#endif  // ICNN_PIPELINE_HPP
