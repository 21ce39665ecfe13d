#include "posefield/cli.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

namespace posefield {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr const char* kVersion = "0.1.0";

std::string format_name(const char* fmt, int i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, i);
  return buf;
}

std::string hex16(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_u64(const std::string& s, const char* what) {
  errno = 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size() || errno != 0 || s.front() == '-')
    throw std::invalid_argument(std::string(what) + ": expected unsigned integer, got '" + s + "'");
  return v;
}

// "lo:hi" or a single value (lo == hi); lo <= hi enforced.
std::pair<double, double> parse_range(const std::string& s) {
  const auto one = [&s](const std::string& part) {
    size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(part, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    if (pos != part.size())
      throw std::invalid_argument("expected LO:HI numeric range, got '" + s + "'");
    return v;
  };
  const size_t colon = s.find(':');
  const double lo = one(colon == std::string::npos ? s : s.substr(0, colon));
  const double hi = colon == std::string::npos ? lo : one(s.substr(colon + 1));
  if (!(lo <= hi)) throw std::invalid_argument("range '" + s + "': lo exceeds hi");
  return {lo, hi};
}

CLI::Validator range_validator() {
  return CLI::Validator(
      [](std::string& s) -> std::string {
        try {
          parse_range(s);
        } catch (const std::exception& e) {
          return e.what();
        }
        return {};
      },
      "LO:HI");
}

CLI::Validator views_validator() {
  return CLI::Validator(
      [](std::string& s) -> std::string {
        if (s == "test" || s == "all") return {};
        try {
          parse_range(s);
        } catch (const std::exception&) {
          return "expected 'test', 'all', or LO:HI";
        }
        return {};
      },
      "test|all|LO:HI");
}

std::string eigen_version() {
  return std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
         std::to_string(EIGEN_MINOR_VERSION);
}

std::vector<std::vector<std::string>> read_csv_file(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream ss(read_text_file(path));
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    size_t start = 0;
    while (true) {
      const size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::vector<SyntheticGraph> load_graph_dataset(const std::string& path, bool need_gt) {
  const std::vector<SerializedGraph> ser = read_graphs_jsonl(path);
  std::vector<SyntheticGraph> ds(ser.size());
  for (size_t i = 0; i < ser.size(); ++i) {
    ds[i].graph = graph_from_serialized(ser[i], &ds[i].gt);
    if (need_gt && ds[i].gt.empty())
      throw std::runtime_error("graph " + std::to_string(i) + " in " + path +
                               " carries no ground truth");
  }
  return ds;
}

ordered_json stats_json(const MraEvalStats& s) {
  return ordered_json{{"mean_deg", s.mean_deg}, {"median_deg", s.median_deg}, {"rms_deg", s.rms_deg}};
}

// One subcommand: common flags, config-file fallback for every tunable (flag
// beats config beats built-in default), run-metadata emission, then run().
class Command {
 public:
  virtual ~Command() = default;

  CommandSpec spec;

  void attach(CLI::App* app, const char* name) {
    app_ = app;
    name_ = name;
    app->add_option("--config", spec.config_path,
                    "key-value config (sections: scene, schedule, field, mra, depth)");
    seed_opt_ = app->add_option("--seed", spec.seed, "master RNG seed");
    app->add_option("--out", spec.out_dir, "output directory")->required();
    app->add_option("--threads", spec.threads, "cap on parallel sections (0 = all cores)");
    app->add_flag("--deterministic", spec.deterministic, "byte-stable single-thread outputs");
  }

  bool parsed() const { return app_ != nullptr && app_->parsed(); }

  void finalize() {
    spec.subcommand = name_;
    if (!spec.config_path.empty()) {
      config_text_ = read_text_file(spec.config_path);
      kv_ = KeyValueConfig::parse(config_text_);
    }
    if (const char* env = std::getenv("POSEFIELD_SEED")) {
      spec.seed = parse_u64(env, "POSEFIELD_SEED");
    } else if (seed_opt_->count() == 0) {
      for (const char* sect : {seed_section(), ""}) {
        if (kv_.has(sect, "seed")) {
          spec.seed = parse_u64(kv_.get(sect, "seed", "0"), "config seed");
          break;
        }
      }
    }
    for (const auto& fill : fills_) fill();
  }

  void write_meta() const {
    ensure_directory(spec.out_dir);
    ordered_json meta;
    meta["schema"] = 1;
    meta["subcommand"] = spec.subcommand;
    meta["seed"] = spec.seed;
    meta["config_hash"] = hex16(fnv1a64(config_text_));
    meta["deterministic"] = spec.deterministic;
    meta["threads"] = spec.threads;
    meta["versions"] =
        ordered_json{{"posefield", kVersion}, {"eigen", eigen_version()}, {"compiler", __VERSION__}};
    write_text_file(spec.out_dir + "/run_meta.json", meta.dump(2) + "\n");
  }

  virtual void add_options(CLI::App& cmd) = 0;
  virtual int run() = 0;

 protected:
  virtual const char* seed_section() const { return "scene"; }

  template <typename T>
  CLI::Option* opt_cfg(CLI::App& cmd, const std::string& flag, T& var, const char* sect,
                       const char* key, const std::string& help) {
    CLI::Option* o = cmd.add_option(flag, var, help);
    fills_.push_back([this, o, &var, sect, key] {
      if (o->count() == 0) var = cfg_value(sect, key, var);
    });
    return o;
  }

  int cfg_value(const char* s, const char* k, int v) const { return kv_.get_int(s, k, v); }
  double cfg_value(const char* s, const char* k, double v) const { return kv_.get_double(s, k, v); }
  bool cfg_value(const char* s, const char* k, bool v) const { return kv_.get_bool(s, k, v); }
  std::string cfg_value(const char* s, const char* k, const std::string& v) const {
    return kv_.get(s, k, v);
  }

  CLI::App* app_ = nullptr;
  const char* name_ = "";
  CLI::Option* seed_opt_ = nullptr;
  KeyValueConfig kv_;
  std::string config_text_;
  std::vector<std::function<void()>> fills_;
};

class SynthGraphsCmd : public Command {
 public:
  void add_options(CLI::App& c) override {
    opt_cfg(c, "--count", count_, "mra", "count", "number of graphs");
    opt_cfg(c, "--nodes", nodes_, "mra", "nodes", "node-count range")->check(range_validator());
    opt_cfg(c, "--density", density_, "mra", "density", "edge density beyond the spanning tree");
    opt_cfg(c, "--sigma-deg", sigma_, "mra", "sigma_deg", "per-graph noise std range, degrees")
        ->check(range_validator());
    opt_cfg(c, "--outliers", outliers_, "mra", "outliers", "outlier edge fraction");
  }

  int run() override {
    const auto [nlo, nhi] = parse_range(nodes_);
    const auto [slo, shi] = parse_range(sigma_);
    SyntheticGraphSpec base;
    base.node_count_min = static_cast<int>(std::llround(nlo));
    base.node_count_max = static_cast<int>(std::llround(nhi));
    base.edge_density = density_;
    base.noise_sigma_min_deg = slo;
    base.noise_sigma_max_deg = shi;
    base.outlier_fraction = outliers_;
    base.seed = spec.seed;
    const std::vector<SyntheticGraph> data = generate_dataset(base, count_, spec.seed);

    std::vector<SerializedGraph> ser;
    ser.reserve(data.size());
    CsvWriter csv({"graph_id", "nodes", "edges", "sigma_deg", "outlier_edges"});
    for (size_t i = 0; i < data.size(); ++i) {
      ser.push_back(to_serialized(data[i].graph, data[i].gt));
      int bad = 0;
      for (char f : data[i].outlier_mask) bad += f != 0;
      csv.add_row_mixed({std::to_string(i), std::to_string(data[i].graph.n),
                         std::to_string(data[i].graph.edges.size()),
                         format_double(data[i].sigma_deg), std::to_string(bad)});
    }
    write_graphs_jsonl(spec.out_dir + "/graphs.jsonl", ser);
    csv.save(spec.out_dir + "/graphs.csv");
    std::cout << "wrote " << data.size() << " graphs to " << spec.out_dir << "/graphs.jsonl\n";
    return 0;
  }

 private:
  const char* seed_section() const override { return "mra"; }
  int count_ = 200;
  std::string nodes_ = "20:50", sigma_ = "5:30";
  double density_ = 0.25, outliers_ = 0.0;
};

class TrainMraCmd : public Command {
 public:
  void add_options(CLI::App& c) override {
    c.add_option("--graphs", graphs_, "training corpus (graphs.jsonl)")->required();
    opt_cfg(c, "--epochs", epochs_, "mra", "epochs", "training epochs");
    opt_cfg(c, "--lr", lr_, "mra", "lr", "learning rate");
    opt_cfg(c, "--weight-decay", weight_decay_, "mra", "weight_decay", "decoupled weight decay");
    opt_cfg(c, "--edge-dropout", edge_dropout_, "mra", "edge_dropout", "edge dropout fraction");
    opt_cfg(c, "--rounds", rounds_, "mra", "rounds", "message-passing rounds");
    opt_cfg(c, "--state-dim", state_dim_, "mra", "state_dim", "node state width");
    opt_cfg(c, "--beta", beta_, "mra", "beta", "node-term weight in the loss");
  }

  int run() override {
    const std::vector<SyntheticGraph> ds = load_graph_dataset(graphs_, true);
    PretrainConfig pc;
    pc.net.rounds = rounds_;
    pc.net.state_dim = state_dim_;
    pc.epochs = epochs_;
    pc.lr = lr_;
    pc.weight_decay = weight_decay_;
    pc.edge_dropout = edge_dropout_;
    pc.loss.beta = beta_;
    pc.seed = spec.seed;
    pc.checkpoint_path = spec.out_dir + "/mra.ckpt";
    pc.metrics_csv_path = spec.out_dir + "/train_metrics.csv";
    diff::ParamStore store;
    const PretrainResult res = pretrain(ds, pc, store);

    ordered_json j;
    j["test_before"] = stats_json(res.test_before);
    j["test_after"] = stats_json(res.test_after);
    j["frac_improved"] = res.frac_improved;
    j["steps_run"] = res.steps_run;
    j["aborted"] = res.aborted_nan;
    write_text_file(spec.out_dir + "/result.json", j.dump(2) + "\n");
    std::cout << "test mean error " << res.test_before.mean_deg << " -> " << res.test_after.mean_deg
              << " deg (improved on " << res.frac_improved * 100.0 << "% of test graphs)\n";
    return 0;
  }

 private:
  const char* seed_section() const override { return "mra"; }
  std::string graphs_;
  int epochs_ = 25, rounds_ = 4, state_dim_ = 32;
  double lr_ = 5e-5, weight_decay_ = 1e-4, edge_dropout_ = 0.25, beta_ = 0.1;
};

class EvalMraCmd : public Command {
 public:
  void add_options(CLI::App& c) override {
    c.add_option("--graphs", graphs_, "evaluation graphs (graphs.jsonl, with ground truth)")
        ->required();
    c.add_option("--checkpoint", checkpoint_, "trained network checkpoint")->required();
    opt_cfg(c, "--rounds", rounds_, "mra", "rounds", "message-passing rounds");
    opt_cfg(c, "--state-dim", state_dim_, "mra", "state_dim", "node state width");
  }

  int run() override {
    const std::vector<SyntheticGraph> ds = load_graph_dataset(graphs_, true);
    diff::ParamStore store;
    store.load(checkpoint_);
    MpnnConfig net;
    net.rounds = rounds_;
    net.state_dim = state_dim_;
    std::vector<GraphEval> per;
    MraEvalStats boot;
    const MraEvalStats refined = evaluate(store, net, "mra", ds, &per, &boot);

    CsvWriter pg({"graph_id", "mean_deg_before", "mean_deg_after", "rms_before", "rms_after"});
    int improved = 0;
    for (const GraphEval& g : per) {
      pg.add_row_mixed({std::to_string(g.graph_id), format_double(g.mean_deg_before),
                        format_double(g.mean_deg_after), format_double(g.rms_before),
                        format_double(g.rms_after)});
      improved += g.mean_deg_after < g.mean_deg_before;
    }
    pg.save(spec.out_dir + "/graphs_eval.csv");

    CsvWriter st({"set", "mean_deg", "median_deg", "rms_deg"});
    st.add_row_mixed({"bootstrap", format_double(boot.mean_deg), format_double(boot.median_deg),
                      format_double(boot.rms_deg)});
    st.add_row_mixed({"refined", format_double(refined.mean_deg), format_double(refined.median_deg),
                      format_double(refined.rms_deg)});
    st.save(spec.out_dir + "/stats.csv");

    const double frac = per.empty() ? 0.0 : static_cast<double>(improved) / per.size();
    ordered_json j;
    j["graphs"] = per.size();
    j["bootstrap"] = stats_json(boot);
    j["refined"] = stats_json(refined);
    j["frac_improved"] = frac;
    write_text_file(spec.out_dir + "/eval.json", j.dump(2) + "\n");
    std::cout << "mean error " << boot.mean_deg << " -> " << refined.mean_deg << " deg over "
              << per.size() << " graphs\n";
    return 0;
  }

 private:
  const char* seed_section() const override { return "mra"; }
  std::string graphs_, checkpoint_;
  int rounds_ = 4, state_dim_ = 32;
};

class PerturbCmd : public Command {
 public:
  void add_options(CLI::App& c) override {
    c.add_option("--poses", poses_path_, "input pose array (JSON)")->required();
    opt_cfg(c, "--cov", cov_, "scene", "perturb_cov", "per-axis axis-angle variance");
    opt_cfg(c, "--trans-std", trans_std_, "scene", "perturb_trans_std", "translation noise std");
    c.add_flag("--rotations-only", rotations_only_, "leave translations untouched");
  }

  int run() override {
    const std::vector<RigidTransform> in = read_pose_array(poses_path_);
    const std::vector<RigidTransform> out =
        perturb_poses(in, cov_, rotations_only_ ? 0.0 : trans_std_, spec.seed);
    write_pose_array(spec.out_dir + "/poses.json", out);
    double mean = 0.0;
    for (size_t i = 0; i < in.size(); ++i)
      mean += rad2deg((in[i].rotation.conjugate() * out[i].rotation).angle());
    if (!in.empty()) mean /= static_cast<double>(in.size());
    std::cout << "perturbed " << in.size() << " poses, mean rotation offset " << mean << " deg\n";
    return 0;
  }

 private:
  std::string poses_path_;
  double cov_ = 0.0, trans_std_ = 0.0;
  bool rotations_only_ = false;
};

class SolvePosesCmd : public Command {
 public:
  void add_options(CLI::App& c) override {
    c.add_option("--graphs", graphs_, "view graphs to solve (graphs.jsonl)")->required();
    opt_cfg(c, "--threshold-deg", threshold_, "mra", "clean_threshold_deg",
            "cycle-consistency filter threshold");
    opt_cfg(c, "--loss", loss_, "mra", "loss", "robust loss: l2, huber, or l1")
        ->check(CLI::IsMember({"l2", "huber", "l1"}));
    opt_cfg(c, "--scale", scale_, "mra", "scale", "robust loss scale (d_Q units)");
    opt_cfg(c, "--max-iters", max_iters_, "mra", "max_iters", "IRLS iteration cap");
  }

  int run() override {
    const std::vector<SyntheticGraph> ds = load_graph_dataset(graphs_, false);
    RobustLossConfig rl;
    if (loss_ == "l2")
      rl.kind = RobustLossConfig::Kind::L2;
    else if (loss_ == "huber")
      rl.kind = RobustLossConfig::Kind::Huber;
    else if (loss_ == "l1")
      rl.kind = RobustLossConfig::Kind::L1Approx;
    else
      throw std::runtime_error("unknown loss '" + loss_ + "' (expected l2, huber, or l1)");
    rl.scale = scale_;

    CsvWriter csv({"graph_id", "nodes", "edges_kept", "edges_removed", "iterations", "converged",
                   "objective", "mean_before_deg", "mean_after_deg"});
    for (size_t i = 0; i < ds.size(); ++i) {
      CleanReport rep;
      const ViewGraph cleaned = clean_cycles(ds[i].graph, threshold_, &rep);
      const std::vector<UnitQuaternion> init = mst_bootstrap(cleaned);
      const IrlsResult ir = irls_rotation_averaging(cleaned, init, rl, max_iters_);

      std::vector<RigidTransform> out(ir.estimates.size());
      for (size_t k = 0; k < ir.estimates.size(); ++k) out[k].rotation = ir.estimates[k];
      write_pose_array(spec.out_dir + "/" + format_name("poses_%03d.json", static_cast<int>(i)),
                       out);

      std::string before, after;
      if (!ds[i].gt.empty()) {
        const auto err = [&gt = ds[i].gt](const std::vector<UnitQuaternion>& est) {
          return rad2deg(rotation_set_errors(est, gt, align_rotation_sets(est, gt)).mean_rad);
        };
        before = format_double(err(init));
        after = format_double(err(ir.estimates));
      }
      csv.add_row_mixed({std::to_string(i), std::to_string(cleaned.n),
                         std::to_string(cleaned.edges.size()),
                         std::to_string(rep.removed_edges.size()), std::to_string(ir.iterations),
                         ir.converged ? "1" : "0", format_double(ir.objective_history.back()),
                         before, after});
    }
    csv.save(spec.out_dir + "/solve.csv");
    std::cout << "solved " << ds.size() << " graphs -> " << spec.out_dir << "/solve.csv\n";
    return 0;
  }

 private:
  const char* seed_section() const override { return "mra"; }
  std::string graphs_, loss_ = "huber";
  double threshold_ = 25.0, scale_ = 0.05;
  int max_iters_ = 100;
};

class ToySceneCmd : public Command {
 public:
  void add_options(CLI::App& c) override {
    opt_cfg(c, "--views", views_, "scene", "views", "number of camera views");
    opt_cfg(c, "--test", test_, "scene", "test", "held-out view count");
    opt_cfg(c, "--width", width_, "scene", "width", "image width");
    opt_cfg(c, "--height", height_, "scene", "height", "image height");
    opt_cfg(c, "--focal", focal_, "scene", "focal", "focal length in pixels");
    opt_cfg(c, "--spheres", spheres_, "scene", "spheres", "number of spheres (3-5)");
    opt_cfg(c, "--pose-noise-deg", pose_noise_, "scene", "pose_noise_deg",
            "per-axis std of the initial-estimate rotation noise");
    opt_cfg(c, "--trans-noise", trans_noise_, "scene", "trans_noise",
            "translation noise std on the estimates");
    opt_cfg(c, "--edge-noise-deg", edge_noise_, "scene", "edge_noise_deg",
            "per-axis std on measured edge rotations");
    CLI::Option* o = c.add_flag("--no-depth", no_depth_, "omit depth maps");
    fills_.push_back([this, o] {
      if (o->count() == 0) no_depth_ = !kv_.get_bool("scene", "depth", true);
    });
  }

  int run() override {
    ToySceneConfig tc;
    tc.n_views = views_;
    tc.n_test = test_;
    tc.width = width_;
    tc.height = height_;
    tc.focal = focal_;
    tc.n_spheres = spheres_;
    tc.pose_noise_deg = pose_noise_;
    tc.pose_noise_trans = trans_noise_;
    tc.edge_noise_deg = edge_noise_;
    tc.with_depth = !no_depth_;
    tc.seed = spec.seed;
    const ScenePackage scene = make_toy_scene(tc);
    save_scene(spec.out_dir, scene);
    std::cout << "scene with " << scene.images.size() << " frames ("
              << test_views(scene).size() << " test) -> " << spec.out_dir << "\n";
    return 0;
  }

 private:
  int views_ = 12, test_ = 0, width_ = 32, height_ = 32, spheres_ = 4;
  double focal_ = 48.0, pose_noise_ = 5.0, trans_noise_ = 0.0, edge_noise_ = 2.0;
  bool no_depth_ = false;
};

enum class TrainMode { Frozen, Joint, NoPose, E2E };

class TrainCmd : public Command {
 public:
  explicit TrainCmd(TrainMode mode) : mode_(mode) {}

  void add_options(CLI::App& c) override {
    c.add_option("--data", data_, "scene directory (manifest.json)")->required();
    opt_cfg(c, "--iters", iters_, "schedule", "total_iters", "total training steps");
    opt_cfg(c, "--warmup", warmup_, "schedule", "warmup_steps",
            "phase-1 steps (-1 = 10% of total)");
    opt_cfg(c, "--block", block_, "schedule", "block", "alternation block K");
    opt_cfg(c, "--batch", batch_, "schedule", "batch", "rays per step");
    opt_cfg(c, "--lr", lr_, "schedule", "lr", "network learning rate");
    opt_cfg(c, "--lr-end", lr_end_, "schedule", "lr_end", "final learning rate");
    opt_cfg(c, "--weight-decay", weight_decay_, "schedule", "weight_decay", "field weight decay");
    opt_cfg(c, "--lambda0", lambda0_, "schedule", "lambda0", "initial rotation-loss weight");
    opt_cfg(c, "--k-decay", k_decay_, "schedule", "k_decay",
            "weight decay rate (0 = reach the floor at 30% of total)");
    opt_cfg(c, "--lambda-floor", lambda_floor_, "schedule", "lambda_floor", "weight floor");
    opt_cfg(c, "--layers", layers_, "field", "layers", "field trunk depth");
    opt_cfg(c, "--hidden", hidden_, "field", "hidden", "field trunk width");
    opt_cfg(c, "--octaves", octaves_, "field", "octaves", "encoding octaves");
    opt_cfg(c, "--samples", samples_, "field", "samples", "quadrature samples per level");
    opt_cfg(c, "--coarse-weight", coarse_weight_, "field", "coarse_weight",
            "coarse-pass loss weight");
    CLI::Option* oa = c.add_flag("--no-anneal", no_anneal_, "disable coarse-to-fine encoding");
    fills_.push_back([this, oa] {
      if (oa->count() == 0) no_anneal_ = !kv_.get_bool("field", "anneal", true);
    });
    opt_cfg(c, "--depth-pixels", depth_pixels_, "depth", "pixels",
            "depth-residual samples per step");
    opt_cfg(c, "--cloud-cap", cloud_cap_, "depth", "cloud_cap", "max points per unprojected cloud");
    opt_cfg(c, "--long-range", long_range_, "depth", "long_range", "extra cloud pairs per frame");
    opt_cfg(c, "--chamfer-step", chamfer_step_, "depth", "chamfer_step",
            "initial pose-update step size");
    CLI::Option* ow = c.add_flag("--warmup-alpha-beta", warmup_alpha_beta_,
                                 "also fit depth alignment in phase 1");
    fills_.push_back([this, ow] {
      if (ow->count() == 0) warmup_alpha_beta_ = kv_.get_bool("depth", "warmup_alpha_beta", false);
    });
    opt_cfg(c, "--clean-threshold-deg", clean_deg_, "mra", "clean_threshold_deg",
            "cycle filter on the measured graph");
    opt_cfg(c, "--rounds", rounds_, "mra", "rounds", "message-passing rounds");
    opt_cfg(c, "--state-dim", state_dim_, "mra", "state_dim", "node state width");
    opt_cfg(c, "--beta", beta_, "mra", "beta", "node-term weight in the rotation loss");
    if (mode_ == TrainMode::E2E)
      opt_cfg(c, "--focal-jitter", focal_jitter_, "scene", "focal_jitter",
              "initial focal offset: f0 = width * (1 + jitter * u)");
    if (mode_ == TrainMode::NoPose)
      c.add_flag("--keep-poses", keep_poses_,
                 "start from the manifest estimates instead of random rotations");
  }

  int run() override {
    ScenePackage scene = load_scene(data_);
    if (mode_ == TrainMode::NoPose && !keep_poses_)
      scene.poses = random_poses(static_cast<int>(scene.images.size()),
                                 hash_combine(spec.seed, 0x626f6f74ull));

    JointConfig jc;
    jc.schedule.lambda0 = lambda0_;
    jc.schedule.k_decay = k_decay_;
    jc.schedule.lambda_floor = lambda_floor_;
    jc.schedule.warmup_steps = warmup_;
    jc.schedule.alternation_block = block_;
    jc.schedule.total_iters = iters_;
    jc.schedule.batch_rays = batch_;
    jc.field.layers = layers_;
    jc.field.hidden = hidden_;
    jc.field.enc.octaves = octaves_;
    jc.render.samples_per_level = samples_;
    jc.mpnn.rounds = rounds_;
    jc.mpnn.state_dim = state_dim_;
    jc.mra_loss.beta = beta_;
    jc.lr = lr_;
    jc.lr_end = lr_end_;
    jc.weight_decay = weight_decay_;
    jc.coarse_weight = coarse_weight_;
    jc.clean_threshold_deg = clean_deg_;
    jc.chamfer_step = chamfer_step_;
    jc.chamfer_long_range = long_range_;
    jc.cloud_cap = cloud_cap_;
    jc.depth_pixels = depth_pixels_;
    jc.warmup_alpha_beta = warmup_alpha_beta_;
    jc.anneal_encoding = !no_anneal_;
    jc.focal_jitter = focal_jitter_;
    jc.seed = spec.seed;
    jc.out_dir = spec.out_dir;

    diff::ParamStore store;
    JointResult r;
    switch (mode_) {
      case TrainMode::Frozen: r = train_field_frozen(scene, jc, store); break;
      case TrainMode::Joint: r = train_joint(scene, jc, store); break;
      case TrainMode::NoPose: r = train_joint_nopose(scene, jc, store); break;
      case TrainMode::E2E: r = train_joint_e2e(scene, jc, store); break;
    }

    ordered_json j;
    j["mode"] = spec.subcommand;
    j["steps_run"] = r.steps_run;
    j["initial_rot_err_deg"] = r.initial_rot_err_deg;
    j["warmup_rot_err_deg"] = r.warmup_rot_err_deg;
    j["final_rot_err_deg"] = r.final_rot_err_deg;
    j["train_psnr_db"] = r.train_psnr;
    j["focal_fx"] = r.focal_fx;
    j["focal_fy"] = r.focal_fy;
    j["aborted"] = r.aborted;
    j["abort_reason"] = r.abort_reason;
    write_text_file(spec.out_dir + "/result.json", j.dump(2) + "\n");
    if (r.aborted) {
      std::cerr << "error: training aborted: " << r.abort_reason << "\n";
      return 1;
    }
    std::cout << "rotation error " << r.initial_rot_err_deg << " -> " << r.final_rot_err_deg
              << " deg, train psnr " << r.train_psnr << " dB (" << r.steps_run << " steps)\n";
    return 0;
  }

 private:
  const char* seed_section() const override { return "schedule"; }
  TrainMode mode_;
  std::string data_;
  int iters_ = 1500, warmup_ = -1, block_ = 50, batch_ = 96, layers_ = 4, hidden_ = 128,
      octaves_ = 6, samples_ = 32, depth_pixels_ = 64, cloud_cap_ = 2048, long_range_ = 2,
      rounds_ = 4, state_dim_ = 32;
  double lr_ = 5e-4, lr_end_ = 5e-5, weight_decay_ = 0.0, lambda0_ = 1.0, k_decay_ = 0.0,
         lambda_floor_ = 0.5, coarse_weight_ = 0.1, clean_deg_ = 25.0, chamfer_step_ = 0.5,
         beta_ = 0.1, focal_jitter_ = 0.2;
  bool no_anneal_ = false, warmup_alpha_beta_ = false, keep_poses_ = false;
};

class EvalCmd : public Command {
 public:
  void add_options(CLI::App& c) override {
    c.add_option("--data", data_, "scene directory");
    c.add_option("--checkpoint", checkpoint_, "trained parameter checkpoint");
    c.add_option("--poses", poses_path_, "pose array overriding the manifest estimates");
    c.add_option("--views", views_arg_, "'test', 'all', or an inclusive LO:HI view range")
        ->check(views_validator());
    opt_cfg(c, "--layers", layers_, "field", "layers", "trunk depth (must match the checkpoint)");
    opt_cfg(c, "--hidden", hidden_, "field", "hidden", "trunk width");
    opt_cfg(c, "--octaves", octaves_, "field", "octaves", "encoding octaves");
    opt_cfg(c, "--samples", samples_, "field", "samples", "quadrature samples per level");
    c.add_option("--report-only", report_dir_,
                 "aggregate an existing eval-mra run directory instead of rendering");
    c.callback([this] {
      if (report_dir_.empty() && (data_.empty() || checkpoint_.empty()))
        throw CLI::RequiredError("--data and --checkpoint (or --report-only)");
    });
  }

  int run() override {
    if (!report_dir_.empty()) {
      emit_report(report_dir_, spec.out_dir);
      std::cout << "report -> " << spec.out_dir << "/report.csv\n";
      return 0;
    }
    const ScenePackage scene = load_scene(data_);
    diff::ParamStore store;
    store.load(checkpoint_);
    const std::vector<RigidTransform> poses =
        poses_path_.empty() ? scene.poses : read_pose_array(poses_path_);
    if (poses.size() != scene.images.size())
      throw std::runtime_error("pose count does not match the scene");

    const int n = static_cast<int>(scene.images.size());
    std::vector<int> views;
    if (views_arg_ == "all") {
      for (int v = 0; v < n; ++v) views.push_back(v);
    } else if (views_arg_ == "test") {
      views = test_views(scene);
      if (views.empty())
        for (int v = 0; v < n; ++v) views.push_back(v);
    } else {
      const auto [lo, hi] = parse_range(views_arg_);
      const int a = static_cast<int>(std::llround(lo)), b = static_cast<int>(std::llround(hi));
      if (a < 0 || b >= n)
        throw std::runtime_error("--views range out of bounds for " + std::to_string(n) +
                                 " frames");
      for (int v = a; v <= b; ++v) views.push_back(v);
    }

    JointConfig jc;
    jc.field.layers = layers_;
    jc.field.hidden = hidden_;
    jc.field.enc.octaves = octaves_;
    jc.render.samples_per_level = samples_;
    const EvalReport rep = run_eval(scene, store, jc, poses, views, spec.seed);
    write_text_file(spec.out_dir + "/eval.csv", rep.csv);

    ordered_json j;
    j["views"] = views.size();
    j["mean_psnr_db"] = rep.mean_psnr;
    j["mean_ssim"] = rep.mean_ssim;
    j["rot_err_mean_deg"] = rep.rot_err_mean_deg;
    j["rot_err_rms_deg"] = rep.rot_err_rms_deg;
    j["center_err_mean"] = rep.center_err_mean;
    write_text_file(spec.out_dir + "/eval.json", j.dump(2) + "\n");
    std::cout << "psnr " << rep.mean_psnr << " dB, ssim " << rep.mean_ssim << " over "
              << views.size() << " views\n";
    return 0;
  }

 private:
  std::string data_, checkpoint_, poses_path_, report_dir_, views_arg_ = "test";
  int layers_ = 4, hidden_ = 128, octaves_ = 6, samples_ = 32;
};

class RenderCmd : public Command {
 public:
  void add_options(CLI::App& c) override {
    c.add_option("--data", data_, "scene directory")->required();
    c.add_option("--checkpoint", checkpoint_, "trained parameter checkpoint")->required();
    c.add_option("--view", view_, "frame index to render");
    c.add_option("--poses", poses_path_, "pose array overriding the manifest estimates");
    c.add_option("--width", width_, "output width (0 = scene width)");
    c.add_option("--height", height_, "output height (0 = scene height)");
    c.add_flag("--depth", with_depth_, "also write the rendered z-depth (PFM)");
    opt_cfg(c, "--layers", layers_, "field", "layers", "trunk depth (must match the checkpoint)");
    opt_cfg(c, "--hidden", hidden_, "field", "hidden", "trunk width");
    opt_cfg(c, "--octaves", octaves_, "field", "octaves", "encoding octaves");
    opt_cfg(c, "--samples", samples_, "field", "samples", "quadrature samples per level");
  }

  int run() override {
    const ScenePackage scene = load_scene(data_);
    diff::ParamStore store;
    store.load(checkpoint_);
    const std::vector<RigidTransform> poses =
        poses_path_.empty() ? scene.poses : read_pose_array(poses_path_);
    if (view_ < 0 || view_ >= static_cast<int>(poses.size()))
      throw std::runtime_error("--view " + std::to_string(view_) + " out of range (have " +
                               std::to_string(poses.size()) + " poses)");
    const int w = width_ > 0 ? width_ : scene.images[0].width;
    const int h = height_ > 0 ? height_ : scene.images[0].height;

    CameraIntrinsics k = scene.intrinsics;
    if (store.has("cam.f")) {
      const diff::Tensor& f = store.value("cam.f");
      k = CameraIntrinsics(f.at(0, 0), f.at(0, 1), w / 2.0, h / 2.0);
    } else if (w != scene.images[0].width || h != scene.images[0].height) {
      k.cx = w / 2.0;
      k.cy = h / 2.0;
    }

    FieldConfig fc;
    fc.layers = layers_;
    fc.hidden = hidden_;
    fc.enc.octaves = octaves_;
    RenderConfig rc;
    rc.samples_per_level = samples_;
    rc.near = scene.near;
    rc.far = scene.far;
    Rng rng(hash_combine(spec.seed, 0x72656e64ull));
    Image depth;
    const Image img = render_frame(store, fc, "nerf", poses[view_], k, w, h, rc, rng,
                                   with_depth_ ? &depth : nullptr);
    const std::string img_path = spec.out_dir + "/" + format_name("render_%03d.ppm", view_);
    write_ppm(img_path, img);
    if (with_depth_)
      write_pfm(spec.out_dir + "/" + format_name("depth_%03d.pfm", view_), depth);
    std::cout << "rendered view " << view_ << " -> " << img_path << "\n";
    return 0;
  }

 private:
  std::string data_, checkpoint_, poses_path_;
  int view_ = 0, width_ = 0, height_ = 0, layers_ = 4, hidden_ = 128, octaves_ = 6, samples_ = 32;
  bool with_depth_ = false;
};

}  // namespace

void save_scene(const std::string& dir, const ScenePackage& scene) {
  if (scene.images.empty()) throw std::invalid_argument("save_scene: no frames");
  ensure_directory(dir);
  DatasetManifest m;
  m.near = scene.near;
  m.far = scene.far;
  m.pose_graph = scene.pose_graph;
  for (size_t i = 0; i < scene.images.size(); ++i) {
    FrameRecord fr;
    fr.image = format_name("frame_%03d.ppm", static_cast<int>(i));
    write_ppm(dir + "/" + fr.image, scene.images[i]);
    if (!scene.depths.empty()) {
      const DepthMap& dm = scene.depths[i];
      Image d(dm.width, dm.height, 1);  // invalid pixels stored as 0
      for (int y = 0; y < dm.height; ++y)
        for (int x = 0; x < dm.width; ++x) d.at(x, y, 0) = dm.is_valid(x, y) ? dm.at(x, y) : 0.0;
      fr.depth = format_name("depth_%03d.pfm", static_cast<int>(i));
      write_pfm(dir + "/" + fr.depth, d);
    }
    if (!scene.poses.empty()) fr.pose = scene.poses[i];
    if (!scene.gt_poses.empty()) fr.gt_pose = scene.gt_poses[i];
    fr.intrinsics = scene.intrinsics;
    fr.split = (!scene.is_test.empty() && scene.is_test[i]) ? "test" : "train";
    m.frames.push_back(std::move(fr));
  }
  write_manifest(dir + "/manifest.json", m);
}

ScenePackage load_scene(const std::string& dir) {
  const DatasetManifest m = read_manifest(dir + "/manifest.json");
  if (m.frames.empty()) throw std::runtime_error("manifest in " + dir + " has no frames");
  const int n = static_cast<int>(m.frames.size());
  int posed = 0, with_gt = 0, with_depth = 0;
  for (const FrameRecord& fr : m.frames) {
    posed += fr.pose.has_value();
    with_gt += fr.gt_pose.has_value();
    with_depth += !fr.depth.empty();
  }
  if (posed != 0 && posed != n)
    throw std::runtime_error("manifest mixes posed and unposed frames");
  if (with_gt != 0 && with_gt != n)
    throw std::runtime_error("manifest mixes frames with and without ground truth");
  if (with_depth != 0 && with_depth != n)
    throw std::runtime_error("manifest mixes frames with and without depth");

  const auto full = [&dir](const std::string& rel) {
    return (!rel.empty() && rel.front() == '/') ? rel : dir + "/" + rel;
  };
  ScenePackage scene;
  scene.near = m.near;
  scene.far = m.far;
  scene.pose_graph = m.pose_graph;
  bool has_k = false;
  for (const FrameRecord& fr : m.frames) {
    scene.images.push_back(read_ppm(full(fr.image)));
    if (!fr.depth.empty()) {
      const Image d = read_pfm(full(fr.depth));
      DepthMap dm;
      dm.width = d.width;
      dm.height = d.height;
      dm.values = d.data;
      dm.valid.resize(d.data.size());
      for (size_t k = 0; k < d.data.size(); ++k) dm.valid[k] = d.data[k] > 0.0 ? 1 : 0;
      scene.depths.push_back(std::move(dm));
    }
    if (fr.pose) scene.poses.push_back(*fr.pose);
    if (fr.gt_pose) scene.gt_poses.push_back(*fr.gt_pose);
    if (fr.intrinsics && !has_k) {
      scene.intrinsics = *fr.intrinsics;
      has_k = true;
    }
    scene.is_test.push_back(fr.split == "test" ? 1 : 0);
  }
  if (!has_k) throw std::runtime_error("manifest in " + dir + " carries no intrinsics");
  return scene;
}

void emit_report(const std::string& run_dir, const std::string& out_dir) {
  const std::string stats_path = run_dir + "/stats.csv";
  const std::string per_path = run_dir + "/graphs_eval.csv";
  if (!file_exists(stats_path) || !file_exists(per_path))
    throw std::runtime_error("no metrics under '" + run_dir +
                             "': expected stats.csv and graphs_eval.csv (eval-mra output)");
  const auto stats = read_csv_file(stats_path);
  const auto per = read_csv_file(per_path);
  std::vector<std::string> boot, refined;
  for (size_t i = 1; i < stats.size(); ++i) {
    if (stats[i].size() != 4) continue;
    if (stats[i][0] == "bootstrap") boot = stats[i];
    if (stats[i][0] == "refined") refined = stats[i];
  }
  if (boot.empty() || refined.empty())
    throw std::runtime_error("stats.csv in '" + run_dir + "' lacks bootstrap/refined rows");
  int graphs = 0, improved = 0;
  for (size_t i = 1; i < per.size(); ++i) {
    if (per[i].size() < 3) continue;
    ++graphs;
    improved += std::stod(per[i][2]) < std::stod(per[i][1]);
  }
  const double frac = graphs > 0 ? static_cast<double>(improved) / graphs : 0.0;

  std::string name = run_dir;
  while (!name.empty() && name.back() == '/') name.pop_back();
  const size_t slash = name.find_last_of('/');
  if (slash != std::string::npos) name = name.substr(slash + 1);
  if (name.empty()) name = "run";

  ensure_directory(out_dir);
  CsvWriter csv({"run", "graphs", "mean_before_deg", "median_before_deg", "rms_before_deg",
                 "mean_after_deg", "median_after_deg", "rms_after_deg", "frac_improved"});
  csv.add_row_mixed({name, std::to_string(graphs), boot[1], boot[2], boot[3], refined[1],
                     refined[2], refined[3], format_double(frac)});
  csv.save(out_dir + "/report.csv");

  std::ostringstream md;
  md << "# Rotation-averaging report\n\n";
  md << "| run | graphs | mean before (deg) | median before (deg) | rms before (deg) "
        "| mean after (deg) | median after (deg) | rms after (deg) | improved |\n";
  md << "| --- | --- | --- | --- | --- | --- | --- | --- | --- |\n";
  md << "| " << name << " | " << graphs << " | " << boot[1] << " | " << boot[2] << " | " << boot[3]
     << " | " << refined[1] << " | " << refined[2] << " | " << refined[3] << " | "
     << format_double(frac * 100.0) << "% |\n";
  write_text_file(out_dir + "/report.md", md.str());
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"posefield: rotation averaging, radiance fields, and joint pose refinement"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("posefield ") + kVersion);

  std::vector<std::unique_ptr<Command>> cmds;
  const auto reg = [&](std::unique_ptr<Command> cmd, const char* name, const char* help) {
    CLI::App* sub = app.add_subcommand(name, help);
    cmd->attach(sub, name);
    cmd->add_options(*sub);
    cmds.push_back(std::move(cmd));
  };
  reg(std::make_unique<SynthGraphsCmd>(), "synth-graphs",
      "generate a synthetic view-graph corpus (graphs.jsonl)");
  reg(std::make_unique<TrainMraCmd>(), "train-mra",
      "pretrain the rotation-refinement network on a graph corpus");
  reg(std::make_unique<EvalMraCmd>(), "eval-mra",
      "evaluate a trained refinement network on held-out graphs");
  reg(std::make_unique<PerturbCmd>(), "perturb",
      "apply axis-angle / translation noise to a pose array");
  reg(std::make_unique<SolvePosesCmd>(), "solve-poses",
      "cycle-clean, bootstrap, and IRLS-average view graphs");
  reg(std::make_unique<ToySceneCmd>(), "toy-scene",
      "render the procedural sphere scene to a dataset directory");
  reg(std::make_unique<TrainCmd>(TrainMode::Frozen), "train-nerf",
      "train the field with poses frozen at the manifest estimates");
  reg(std::make_unique<TrainCmd>(TrainMode::Joint), "joint",
      "jointly refine poses and train the field");
  reg(std::make_unique<TrainCmd>(TrainMode::NoPose), "joint-nopose",
      "bootstrap poses from depth priors, then train jointly");
  reg(std::make_unique<TrainCmd>(TrainMode::E2E), "joint-e2e",
      "joint training with a learned focal length");
  reg(std::make_unique<EvalCmd>(), "eval",
      "render views and tabulate metrics, or aggregate a run directory");
  reg(std::make_unique<RenderCmd>(), "render", "render one view from a trained checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    std::cerr << "error: " << e.what() << "\n\n";
    const std::vector<CLI::App*> started = app.get_subcommands();
    std::cerr << (started.empty() ? app.help() : started.front()->help());
    return 2;
  }

  Command* active = nullptr;
  for (const auto& c : cmds)
    if (c->parsed()) active = c.get();
  if (active == nullptr) {
    std::cerr << app.help();
    return 2;
  }
  try {
    active->finalize();
    active->write_meta();
    return active->run();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace posefield
