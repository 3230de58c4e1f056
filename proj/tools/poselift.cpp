// poselift: synthetic data, prior pretraining, training, evaluation and
// figure tooling. Run `poselift <command> --help` for the flags of a command.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include "poselift/camera.hpp"
#include "poselift/errors.hpp"
#include "poselift/evaluation.hpp"
#include "poselift/flow.hpp"
#include "poselift/image_io.hpp"
#include "poselift/pose_io.hpp"
#include "poselift/renderer.hpp"
#include "poselift/synth.hpp"
#include "poselift/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace poselift;

namespace {

struct Global {
  uint64_t seed = 0;
  std::string out;
  int threads = 1;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

fs::path prepare_out(const Global& g, const std::string& command, json resolved) {
  if (g.out.empty()) throw ConfigError("--out is required");
  const fs::path out(g.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  resolved["command"] = command;
  resolved["seed"] = g.seed;
  write_json(out / ("resolved-" + command + ".json"), resolved);
  return out;
}

// ---------------------------------------------------------------- synth-gen

struct SynthOpts {
  int train = 2000, prior = 2000, test = 500;
  int image_size = 64;
  double frame_scale = kDefaultFrameScale;
  int ellipses = ClutterConfig{}.ellipse_count;
  double noise = ClutterConfig{}.noise_amplitude;
  double azimuth = humanoid9_model().azimuth_max;
};

void cmd_synth_gen(const Global& g, const SynthOpts& o) {
  SynthConfig cfg;
  cfg.seed = g.seed;
  cfg.counts = {o.train, o.prior, o.test};
  cfg.renderer.height = cfg.renderer.width = o.image_size;
  cfg.frame_scale = o.frame_scale;
  cfg.clutter.ellipse_count = o.ellipses;
  cfg.clutter.noise_amplitude = o.noise;
  if (!(o.azimuth >= 0.0)) throw ConfigError("--azimuth must be non-negative");
  cfg.model.azimuth_min = -o.azimuth;
  cfg.model.azimuth_max = o.azimuth;
  const auto out = prepare_out(g, "synth-gen", cfg.to_json());
  const auto ds = generate_dataset(cfg);
  write_dataset(ds, out);
  std::cout << "wrote " << o.train << " train / " << o.prior << " prior / " << o.test << " test samples to " << out
            << "\n";
}

// ------------------------------------------------------------ pretrain-flow

struct FlowOpts {
  std::string data, poses, topology = "humanoid-9";
  int pca = 10, layers = 8, hidden = 64, epochs = 30, batch = 256;
  double lr = 1e-3, holdout = 0.1;
};

void cmd_pretrain_flow(const Global& g, const FlowOpts& o) {
  if (o.data.empty() == o.poses.empty()) throw ConfigError("give exactly one of --data or --poses");
  if (!(o.holdout >= 0.0 && o.holdout < 1.0)) throw ConfigError("--holdout must lie in [0, 1)");
  const auto topology = resolve_topology(o.topology);
  const auto out = prepare_out(g, "pretrain-flow",
                               {{"data", o.data}, {"poses", o.poses}, {"topology", topology.name()}, {"pca", o.pca},
                                {"layers", o.layers}, {"hidden", o.hidden}, {"epochs", o.epochs},
                                {"batch", o.batch}, {"lr", o.lr}, {"holdout", o.holdout}});
  std::vector<Pose2D> poses;
  if (!o.data.empty()) {
    poses = load_prior_split(o.data, topology).poses;
  } else {
    for (auto& r : read_pose_file(o.poses, topology)) poses.push_back(std::move(r.p2d));
  }
  const auto held = static_cast<size_t>(std::floor(o.holdout * static_cast<double>(poses.size())));
  std::vector<Pose2D> fit_set(poses.begin(), poses.end() - static_cast<std::ptrdiff_t>(held));
  std::vector<Pose2D> held_set(poses.end() - static_cast<std::ptrdiff_t>(held), poses.end());
  if (static_cast<int>(fit_set.size()) < o.pca)
    throw RankError("prior set has " + std::to_string(fit_set.size()) + " poses, fewer than N_pca = " +
                    std::to_string(o.pca));

  std::vector<Pose2D> normalized;
  for (const auto& p : fit_set) normalized.push_back(normalize_pose2d(p, topology));
  PosePrior prior;
  prior.topology = topology.name();
  prior.pca = pca_fit(normalized, o.pca);
  torch::manual_seed(g.seed);
  prior.flow = FlowPrior(FlowConfig{o.pca, o.layers, o.hidden, 2.0});
  auto gen = at::detail::createCPUGenerator(g.seed);
  const auto history = pretrain_flow(prior.flow, prior.pca, to_tensor(fit_set, torch::kFloat32), topology.root(),
                                     FlowTrainConfig{o.epochs, o.batch, o.lr}, gen);
  prior.freeze();
  save_pose_prior(out / "prior.json", prior);

  std::ofstream log(out / "nll.jsonl");
  for (size_t e = 0; e < history.size(); ++e) log << json{{"epoch", e + 1}, {"train_nll", history[e]}}.dump() << '\n';
  if (!held_set.empty()) {
    torch::NoGradGuard guard;
    const double nll = nll_loss(prior.flow, prior.pca, to_tensor(held_set, torch::kFloat32), topology.root()).item<double>();
    log << json{{"held_out_nll", nll}}.dump() << '\n';
    std::cout << "held-out NLL " << nll << " over " << held_set.size() << " poses\n";
  }
  std::cout << "prior checksum " << parameter_checksum(*prior.flow) << ", written to " << (out / "prior.json") << "\n";
}

// -------------------------------------------------------------------- train

struct TrainOpts {
  std::string data, prior, config, resume, val;
  std::optional<int> steps, batch;
  bool no_val = false;
};

void cmd_train(const Global& g, const TrainOpts& o) {
  if (o.data.empty()) throw ConfigError("--data is required");
  std::optional<TrainState> state;
  if (!o.resume.empty()) {
    state.emplace(load_checkpoint(o.resume));
    if (o.steps) state->config.steps = *o.steps;
  } else {
    if (o.prior.empty()) throw ConfigError("--prior is required unless resuming");
    json cj = o.config.empty() ? json::object() : read_json(o.config);
    cj["seed"] = g.seed;
    if (o.steps) cj["steps"] = *o.steps;
    if (o.batch) cj["batch_size"] = *o.batch;
    auto cfg = TrainConfig::from_json(cj);
    auto prior = load_pose_prior(o.prior);
    const auto manifest = read_manifest(o.data);
    RendererConfig renderer;
    renderer.height = manifest.at("config").at("renderer").at("height").get<int>();
    renderer.width = manifest.at("config").at("renderer").at("width").get<int>();
    renderer.gamma = manifest.at("config").at("renderer").at("gamma").get<double>();
    cfg.frame_scale = manifest.at("config").at("frame_scale").get<double>();
    cfg.network.image_size = renderer.height;
    const auto topology = topology_by_name(prior.topology);
    state.emplace(make_train_state(cfg, topology, std::move(prior), renderer));
  }
  auto& st = *state;
  const auto out = prepare_out(g, "train",
                               {{"data", o.data}, {"prior", o.prior}, {"resume", o.resume},
                                {"training", st.config.to_json()}});
  const auto train = load_train_split(o.data);
  const auto prior_split = load_prior_split(o.data, st.topology);
  std::optional<LabeledSamples> val;
  if (!o.no_val) val.emplace(load_test_split(o.val.empty() ? o.data : o.val, st.topology));
  FitData data{&train, &prior_split, val ? &*val : nullptr};
  const auto result = fit(st, data, out);
  save_checkpoint(out / "final.pt", st);
  std::cout << "trained to step " << st.step;
  if (result.best_step >= 0)
    std::cout << ", best validation P-MPJPE " << result.best_val_p_mpjpe << " at step " << result.best_step;
  std::cout << "\n";
}

// --------------------------------------------------------------------- eval

struct EvalOpts {
  std::string checkpoint, data;
  int limit = 0;
  double threshold = kPckThreshold, unit_scale = 1000.0;
};

void cmd_eval(const Global& g, const EvalOpts& o) {
  auto st = load_checkpoint(o.checkpoint);
  const auto out = prepare_out(g, "eval",
                               {{"checkpoint", o.checkpoint}, {"data", o.data}, {"limit", o.limit},
                                {"threshold", o.threshold}, {"unit_scale", o.unit_scale}});
  const auto test = load_test_split(o.data, st.topology);
  const auto report = evaluate_state(st, test, o.limit, EvalOptions{o.threshold, o.unit_scale});
  auto j = report.to_json();
  j["step"] = st.step;
  write_json(out / "eval.json", j);
  std::cout.precision(17);
  std::cout << "step " << st.step << "  P-MPJPE " << report.p_mpjpe << "  PCK " << report.pck << "  AUC "
            << report.auc << "\n";
}

// --------------------------------------------------------------------- lift

struct LiftOpts {
  std::string checkpoint, image;
  std::vector<double> views;
  bool figure = false;
};

void cmd_lift(const Global& g, const LiftOpts& o) {
  auto st = load_checkpoint(o.checkpoint);
  const auto out = prepare_out(g, "lift", {{"checkpoint", o.checkpoint}, {"image", o.image}, {"views", o.views}});
  auto image = read_png(o.image);
  const auto pred = predict(st, image.unsqueeze(0));
  const auto p2d = poses2d_from_tensor(pred.poses2d.to(torch::kFloat64)).front();
  const auto p3d = poses3d_from_tensor(pred.poses3d.to(torch::kFloat64)).front();
  json j2 = json::array(), j3 = json::array();
  for (const auto& p : p2d.joints) j2.push_back({p.x(), p.y()});
  for (const auto& p : p3d.joints) j3.push_back({p.x(), p.y(), p.z()});
  write_json(out / "pose.json", {{"topology", st.topology.name()}, {"p2d", j2}, {"p3d", j3}});
  write_png(out / "skeleton.png", pred.skeletons[0]);
  if (o.figure) {
    std::vector<double> views = o.views.empty() ? std::vector<double>{0.0, M_PI / 2} : o.views;
    emit_pose_figure(image, p3d, std::nullopt, st.topology, views, out / "figure.png");
  }
  std::cout << "wrote " << (out / "pose.json") << "\n";
}

// ------------------------------------------------------------------- render

struct RenderOpts {
  std::string poses, topology = "humanoid-9";
  int size = 64;
  double frame_scale = kDefaultFrameScale;
  bool raw = false;
};

void cmd_render(const Global& g, const RenderOpts& o) {
  const auto topology = resolve_topology(o.topology);
  const auto out = prepare_out(g, "render",
                               {{"poses", o.poses}, {"topology", topology.name()}, {"size", o.size},
                                {"frame_scale", o.frame_scale}, {"raw", o.raw}});
  RendererConfig rc;
  rc.height = rc.width = o.size;
  rc.validate();
  const auto records = read_pose_file(o.poses, topology);
  for (size_t i = 0; i < records.size(); ++i) {
    const Pose2D& p = records[i].p2d;
    auto t = to_tensor(std::span<const Pose2D>(&p, 1));
    if (!o.raw) t = to_image_frame(t, topology.root(), o.frame_scale);
    const std::string name = records[i].id.empty() ? std::to_string(i) : records[i].id;
    write_png(out / (name + ".png"), render(t, topology, rc)[0]);
  }
  std::cout << "rendered " << records.size() << " poses\n";
}

// --------------------------------------------------------------------- plot

void cmd_plot(const Global& g, const std::string& metrics_path) {
  const auto out = prepare_out(g, "plot", {{"metrics", metrics_path}});
  std::ifstream in(metrics_path);
  if (!in) throw IoError("cannot read " + metrics_path);
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> series;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(metrics_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const double step = rec.at("step").get<double>();
    for (const auto& name : loss_term_names()) {
      const auto& v = rec.at("losses").at(name);
      if (v.is_number()) {
        series[name].first.push_back(step);
        series[name].second.push_back(v.get<double>());
      }
    }
    if (rec.at("val_p_mpjpe").is_number()) {
      series["val_p_mpjpe"].first.push_back(step);
      series["val_p_mpjpe"].second.push_back(rec["val_p_mpjpe"].get<double>());
    }
  }
  std::vector<std::string> names = loss_term_names();
  names.push_back("val_p_mpjpe");
  for (const auto& name : names) {
    const auto& [xs, ys] = series[name];
    emit_curve_plot(out / (name + ".png"), name, xs, ys);
  }
  std::cout << "wrote " << names.size() << " plots to " << out << "\n";
}

// ------------------------------------------------------------- import-poses

// External format: a JSON array (or {"poses": [...]}) of objects with
// "keypoints" given either as [[x, y], ...] or flat [x, y, ...] /
// [x, y, c, ...] (confidence dropped), plus an optional "id".
void cmd_import_poses(const Global& g, const std::string& input, const std::string& topology_name,
                      bool flip_y) {
  const auto topology = resolve_topology(topology_name);
  const auto out = prepare_out(g, "import-poses", {{"input", input}, {"topology", topology.name()}, {"flip_y", flip_y}});
  json src = read_json(input);
  const json& items = src.is_object() && src.contains("poses") ? src["poses"] : src;
  if (!items.is_array()) throw FormatError(input + ": expected an array of poses");
  const int J = topology.joint_count();
  std::vector<PoseRecord> records;
  for (size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    const std::string where = input + "[" + std::to_string(i) + "]";
    if (!item.contains("keypoints")) throw FormatError(where + ": missing keypoints");
    const auto& kp = item["keypoints"];
    PoseRecord r;
    r.id = item.value("id", "pose-" + std::to_string(i));
    r.topology = topology.name();
    try {
      if (!kp.empty() && kp[0].is_array()) {
        if (static_cast<int>(kp.size()) != J) throw TopologyMismatchError(where + ": joint count differs from topology");
        for (const auto& p : kp) r.p2d.joints.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
      } else {
        const int stride = static_cast<int>(kp.size()) == 2 * J ? 2 : static_cast<int>(kp.size()) == 3 * J ? 3 : 0;
        if (stride == 0) throw TopologyMismatchError(where + ": keypoint count does not fit the topology");
        for (int j = 0; j < J; ++j) r.p2d.joints.emplace_back(kp[stride * j].get<double>(), kp[stride * j + 1].get<double>());
      }
    } catch (const json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (flip_y)
      for (auto& p : r.p2d.joints) p.y() = -p.y();
    records.push_back(std::move(r));
  }
  write_pose_file(out / "poses.jsonl", records);
  std::cout << "imported " << records.size() << " poses\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised 3D pose lifting toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Intra-op threads")->capture_default_str();

  auto add_out = [&](CLI::App* c) { c->add_option("--out", g.out, "Output directory")->required(); };

  SynthOpts so;
  auto* synth = app.add_subcommand("synth-gen", "Generate a synthetic dataset");
  add_out(synth);
  synth->add_option("--train", so.train)->capture_default_str();
  synth->add_option("--prior", so.prior)->capture_default_str();
  synth->add_option("--test", so.test)->capture_default_str();
  synth->add_option("--image-size", so.image_size)->capture_default_str();
  synth->add_option("--frame-scale", so.frame_scale)->capture_default_str();
  synth->add_option("--ellipses", so.ellipses)->capture_default_str();
  synth->add_option("--noise", so.noise)->capture_default_str();
  synth->add_option("--azimuth", so.azimuth, "Figures face the camera within +-this many radians")->capture_default_str();

  FlowOpts fo;
  auto* flow = app.add_subcommand("pretrain-flow", "Fit PCA and the normalizing flow on prior 2D poses");
  add_out(flow);
  flow->add_option("--data", fo.data, "Dataset directory (prior split)");
  flow->add_option("--poses", fo.poses, "Pose file instead of a dataset");
  flow->add_option("--topology", fo.topology)->capture_default_str();
  flow->add_option("--pca", fo.pca)->capture_default_str();
  flow->add_option("--layers", fo.layers)->capture_default_str();
  flow->add_option("--hidden", fo.hidden)->capture_default_str();
  flow->add_option("--epochs", fo.epochs)->capture_default_str();
  flow->add_option("--batch", fo.batch)->capture_default_str();
  flow->add_option("--lr", fo.lr)->capture_default_str();
  flow->add_option("--holdout", fo.holdout, "Fraction of poses held out for the final NLL")->capture_default_str();

  TrainOpts to;
  auto* train = app.add_subcommand("train", "Train the pipeline");
  add_out(train);
  train->add_option("--data", to.data, "Dataset directory")->required();
  train->add_option("--prior", to.prior, "Pretrained prior (prior.json)");
  train->add_option("--config", to.config, "Training config JSON");
  train->add_option("--resume", to.resume, "Checkpoint to resume from");
  train->add_option("--val", to.val, "Dataset whose test split is used for validation (default: --data)");
  train->add_flag("--no-val", to.no_val, "Skip validation");
  train->add_option("--steps", to.steps);
  train->add_option("--batch", to.batch);

  EvalOpts eo;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a test split");
  add_out(eval);
  eval->add_option("--checkpoint", eo.checkpoint)->required();
  eval->add_option("--data", eo.data)->required();
  eval->add_option("--limit", eo.limit, "Evaluate only the first N samples")->capture_default_str();
  eval->add_option("--threshold", eo.threshold)->capture_default_str();
  eval->add_option("--unit-scale", eo.unit_scale)->capture_default_str();

  LiftOpts lo;
  auto* lift = app.add_subcommand("lift", "Predict 2D and 3D pose for one image");
  add_out(lift);
  lift->add_option("--checkpoint", lo.checkpoint)->required();
  lift->add_option("--image", lo.image)->required();
  lift->add_option("--views", lo.views, "Figure view azimuths (radians)");
  lift->add_flag("--figure", lo.figure, "Also write figure.png");

  RenderOpts ro;
  auto* rend = app.add_subcommand("render", "Render poses from a pose file to PNG");
  add_out(rend);
  rend->add_option("--poses", ro.poses)->required();
  rend->add_option("--topology", ro.topology)->capture_default_str();
  rend->add_option("--size", ro.size)->capture_default_str();
  rend->add_option("--frame-scale", ro.frame_scale)->capture_default_str();
  rend->add_flag("--raw", ro.raw, "Coordinates are already in the [-1, 1] frame");

  std::string metrics;
  auto* plot = app.add_subcommand("plot", "Plot loss terms and validation error from a metrics log");
  add_out(plot);
  plot->add_option("--metrics", metrics)->required();

  std::string import_input, import_topology = "humanoid-17";
  bool flip_y = false;
  auto* import = app.add_subcommand("import-poses", "Convert external 2D keypoint JSON to a pose file");
  add_out(import);
  import->add_option("--input", import_input)->required();
  import->add_option("--topology", import_topology)->capture_default_str();
  import->add_flag("--flip-y", flip_y, "Input y axis points down (image rows)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    if (rc == 0) return 0;
    std::cerr << app.help();
    return static_cast<int>(ErrorCategory::Config);
  }

  try {
    torch::set_num_threads(g.threads);
    if (*synth) cmd_synth_gen(g, so);
    else if (*flow) cmd_pretrain_flow(g, fo);
    else if (*train) cmd_train(g, to);
    else if (*eval) cmd_eval(g, eo);
    else if (*lift) cmd_lift(g, lo);
    else if (*rend) cmd_render(g, ro);
    else if (*plot) cmd_plot(g, metrics);
    else if (*import) cmd_import_poses(g, import_input, import_topology, flip_y);
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.category());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorCategory::Data);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
