#include "poselift/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>
#include <zlib.h>

#include "poselift/camera.hpp"
#include "poselift/errors.hpp"
#include "poselift/image_io.hpp"
#include "poselift/pose_io.hpp"

namespace poselift {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
std::function<void(const json&)> setter(T& field) {
  return [&field](const json& v) { field = v.get<T>(); };
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  auto& w = c.weights;
  auto& n = c.network;
  const std::map<std::string, std::function<void(const json&)>> fields{
      {"seed", setter(c.seed)},
      {"steps", setter(c.steps)},
      {"batch_size", setter(c.batch_size)},
      {"lr_generator", setter(c.lr_generator)},
      {"lr_discriminator", setter(c.lr_discriminator)},
      {"adam_beta1", setter(c.adam_beta1)},
      {"w_adv", setter(w.adversarial)},
      {"w_omega", setter(w.omega)},
      {"w_base", setter(w.base)},
      {"w_nf", setter(w.flow)},
      {"w_bl", setter(w.bone)},
      {"lambda", setter(w.lambda)},
      {"sigma_b", setter(w.bone_sigma)},
      {"reference_bone_lengths", setter(w.reference_bone_lengths)},
      {"logit_adversarial", setter(c.logit_adversarial)},
      {"d_noise", setter(c.d_noise)},
      {"cycle_grad_scale", setter(c.cycle_grad_scale)},
      {"view_azimuth", setter(c.view_azimuth)},
      {"elevation_from_prior_only", setter(c.elevation_from_prior_only)},
      {"frame_scale", setter(c.frame_scale)},
      {"lift_scale", setter(c.lift_scale)},
      {"image_size", setter(n.image_size)},
      {"base_channels", setter(n.base_channels)},
      {"lifter_width", setter(n.lifter_width)},
      {"lifter_blocks", setter(n.lifter_blocks)},
      {"log_every", setter(c.log_every)},
      {"eval_every", setter(c.eval_every)},
      {"eval_samples", setter(c.eval_samples)},
      {"checkpoint_every", setter(c.checkpoint_every)},
      {"select_best", setter(c.select_best)},
  };
  for (const auto& [key, value] : j.items()) {
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown training config key '" + key + "'");
    try {
      it->second(value);
    } catch (const json::exception& e) {
      throw ConfigError("training config key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

json TrainConfig::to_json() const {
  return {{"seed", seed},
          {"steps", steps},
          {"batch_size", batch_size},
          {"lr_generator", lr_generator},
          {"lr_discriminator", lr_discriminator},
          {"adam_beta1", adam_beta1},
          {"w_adv", weights.adversarial},
          {"w_omega", weights.omega},
          {"w_base", weights.base},
          {"w_nf", weights.flow},
          {"w_bl", weights.bone},
          {"lambda", weights.lambda},
          {"sigma_b", weights.bone_sigma},
          {"reference_bone_lengths", weights.reference_bone_lengths},
          {"logit_adversarial", logit_adversarial},
          {"d_noise", d_noise},
          {"cycle_grad_scale", cycle_grad_scale},
          {"view_azimuth", view_azimuth},
          {"elevation_from_prior_only", elevation_from_prior_only},
          {"frame_scale", frame_scale},
          {"lift_scale", lift_scale},
          {"image_size", network.image_size},
          {"base_channels", network.base_channels},
          {"lifter_width", network.lifter_width},
          {"lifter_blocks", network.lifter_blocks},
          {"log_every", log_every},
          {"eval_every", eval_every},
          {"eval_samples", eval_samples},
          {"checkpoint_every", checkpoint_every},
          {"select_best", select_best}};
}

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (!(lr_generator > 0.0) || !(lr_discriminator > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must lie in [0, 1)");
  if (!(d_noise >= 0.0)) throw ConfigError("d_noise must be non-negative");
  if (!(cycle_grad_scale >= 0.0 && cycle_grad_scale <= 1.0)) throw ConfigError("cycle_grad_scale must lie in [0, 1]");
  if (!(view_azimuth >= 0.0 && view_azimuth <= std::numbers::pi)) throw ConfigError("view_azimuth must lie in [0, pi]");
  if (!(frame_scale > 0.0) || !(lift_scale > 0.0)) throw ConfigError("frame and lift scales must be positive");
  if (log_every < 1 || eval_every < 1 || checkpoint_every < 1 || eval_samples < 0)
    throw ConfigError("logging intervals must be positive");
}

std::vector<torch::Tensor> TrainState::generator_parameters() const {
  std::vector<torch::Tensor> params;
  for (const auto* m : std::initializer_list<const torch::nn::Module*>{phi.get(), omega.get(), lambda.get()})
    for (const auto& p : m->parameters()) params.push_back(p);
  return params;
}

namespace {

void build_networks(TrainState& st) {
  auto spec = st.config.network;
  spec.joints = st.topology.joint_count();
  if (st.renderer.height != st.renderer.width || st.renderer.height != spec.image_size)
    throw ConfigError("networks need square " + std::to_string(spec.image_size) + " px renders, renderer is " +
                      std::to_string(st.renderer.height) + "x" + std::to_string(st.renderer.width));
  torch::manual_seed(st.config.seed);
  st.phi = Phi(spec);
  st.omega = Omega(spec);
  st.lambda = Lambda(spec, st.topology.root());
  st.disc = Discriminator(spec);
  const auto betas = std::make_tuple(st.config.adam_beta1, 0.999);
  st.generator_optimizer = std::make_unique<torch::optim::Adam>(
      st.generator_parameters(), torch::optim::AdamOptions(st.config.lr_generator).betas(betas));
  st.discriminator_optimizer = std::make_unique<torch::optim::Adam>(
      st.disc->parameters(), torch::optim::AdamOptions(st.config.lr_discriminator).betas(betas));
  st.generator = at::detail::createCPUGenerator(st.config.seed ^ 0x9e3779b97f4a7c15ULL);
}

void set_requires_grad(torch::nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

torch::Tensor as_float_images(const torch::Tensor& images) {
  return images.scalar_type() == torch::kUInt8 ? dequantize_image(images) : images.to(torch::kFloat32);
}

}  // namespace

TrainState make_train_state(const TrainConfig& config, const SkeletonTopology& topology, PosePrior prior,
                            const RendererConfig& renderer) {
  config.validate();
  renderer.validate();
  if (!prior.flow) throw ConfigError("training needs a pretrained flow prior");
  if (prior.topology != topology.name())
    throw TopologyMismatchError("prior was trained on " + prior.topology + ", training topology is " +
                                topology.name());
  if (prior.pca.input_dims() != 2 * topology.joint_count())
    throw TopologyMismatchError("prior PCA dimension does not match the topology");
  TrainState st;
  st.config = config;
  st.topology = topology;
  st.renderer = renderer;
  st.prior = std::move(prior);
  st.prior.flow->to(torch::kFloat32);
  st.prior.freeze();
  build_networks(st);
  return st;
}

LossBreakdown train_step(TrainState& st, const torch::Tensor& images, const torch::Tensor& prior_poses) {
  const auto& cfg = st.config;
  const auto& topo = st.topology;
  const int root = topo.root();
  const int64_t batch = images.size(0);
  if (batch < 2) throw PairingError("a training batch needs at least two images");
  if (prior_poses.dim() != 3 || prior_poses.size(0) < 1 || prior_poses.size(1) != topo.joint_count())
    throw ShapeMismatchError("prior batch must be [B, J, 2] with B >= 1");
  cfg.weights.validate(topo.bone_count());
  st.phi->train();
  st.omega->train();
  st.lambda->train();
  st.disc->train();

  auto x = as_float_images(images);
  torch::Tensor u, w;
  {
    torch::NoGradGuard guard;
    u = to_image_frame(prior_poses.to(torch::kFloat32), root, cfg.frame_scale);
    w = render(u, topo, st.renderer).to(torch::kFloat32);
  }
  auto s = st.phi(x);

  // Instance noise keeps D from separating the two image sets perfectly early on.
  const double sigma =
      cfg.steps > 0 ? cfg.d_noise * std::max(0.0, 1.0 - static_cast<double>(st.step) / cfg.steps) : 0.0;
  auto noisy = [&](const torch::Tensor& t) {
    if (sigma == 0.0) return t;
    return t + sigma * torch::randn(t.sizes(), st.generator, t.options());
  };

  // Discriminator ascends E log D(w) + E log(1 - D(s)).
  set_requires_grad(*st.disc, true);
  st.discriminator_optimizer->zero_grad();
  auto d_objective = loss_discriminator_logits(st.disc(noisy(w)), st.disc(noisy(s.detach())));
  (-d_objective).backward();
  st.discriminator_optimizer->step();
  set_requires_grad(*st.disc, false);

  const double ls = cfg.lift_scale;
  auto omega = st.omega(s);
  auto y = normalize_pose2d(omega, root) * ls;
  if (cfg.cycle_grad_scale < 1.0) {
    auto held = y.detach();
    y = cfg.cycle_grad_scale > 0.0 ? held + cfg.cycle_grad_scale * (y - held) : held;
  }
  Lifter lifter = [&](const torch::Tensor& p) { return st.lambda(p); };
  auto cycle = consistency_cycle(y, lifter, random_view_sampler(st.generator, cfg.view_azimuth),
                                 cfg.network.depth_anchor, cfg.elevation_from_prior_only);

  LossComponents c;
  c.discriminator = d_objective.detach();
  auto s_seen = noisy(s);
  c.adversarial = cfg.logit_adversarial ? loss_generator_adv_logits(st.disc(s_seen))
                                        : loss_generator_adv(st.disc->probability(s_seen));
  c.omega = loss_omega(st.omega(w), u, render(omega, topo, st.renderer), s, cfg.weights.lambda);
  c.l2d = loss_2d(cycle.y_prime / ls, y / ls);
  c.l3d = loss_3d(cycle.v_hat_prime, cycle.v_hat);
  c.def = loss_def(cycle.v, cycle.v_prime, random_derangement(batch, st.generator));
  c.flow = -log_density(st.prior.flow, st.prior.pca, cycle.y_hat_prior, root).mean();
  c.bone = loss_bl(cycle.v, topo, cfg.weights);

  LossBreakdown breakdown;
  auto total = loss_total(c, cfg.weights, &breakdown);
  st.generator_optimizer->zero_grad();
  total.backward();
  st.generator_optimizer->step();
  set_requires_grad(*st.disc, true);
  ++st.step;
  return breakdown;
}

Prediction predict(TrainState& st, const torch::Tensor& images) {
  const auto& cfg = st.config;
  auto x = as_float_images(images);
  if (x.dim() == 2) x = x.unsqueeze(0);
  torch::NoGradGuard guard;
  st.phi->eval();
  st.omega->eval();
  st.lambda->eval();
  constexpr int64_t kChunk = 256;
  std::vector<torch::Tensor> skel, p2d, lifted;
  for (int64_t start = 0; start < x.size(0); start += kChunk) {
    auto chunk = x.narrow(0, start, std::min(kChunk, x.size(0) - start));
    auto s = st.phi(chunk);
    auto omega = st.omega(s);
    auto y = normalize_pose2d(omega, st.topology.root()) * cfg.lift_scale;
    auto lift = st.lambda(y);
    skel.push_back(s);
    p2d.push_back(omega);
    lifted.push_back(lift_to_3d(y, lift.depth_offsets, cfg.network.depth_anchor));
  }
  return {torch::cat(skel), torch::cat(p2d), torch::cat(lifted)};
}

EvalReport evaluate_state(TrainState& st, const LabeledSamples& samples, int limit, const EvalOptions& options) {
  int64_t n = static_cast<int64_t>(samples.size());
  if (limit > 0) n = std::min<int64_t>(n, limit);
  if (n == 0) throw DatasetEmptyError("no samples to evaluate");
  auto pred = poses3d_from_tensor(predict(st, samples.images().narrow(0, 0, n)).poses3d.to(torch::kFloat64));
  const auto& targets = samples.targets();
  return evaluate(pred, std::span<const Pose3D>(targets.data(), static_cast<size_t>(n)), options);
}

namespace {

std::vector<std::pair<const char*, torch::nn::Module*>> networks_of(TrainState& st) {
  return {{"phi", st.phi.get()}, {"omega", st.omega.get()}, {"lambda", st.lambda.get()}, {"disc", st.disc.get()}};
}

void write_networks(torch::serialize::OutputArchive& archive, TrainState& st) {
  for (const auto& [name, m] : networks_of(st)) {
    torch::serialize::OutputArchive sub;
    m->save(sub);
    archive.write(name, sub);
  }
}

void read_networks(torch::serialize::InputArchive& archive, TrainState& st) {
  for (const auto& [name, m] : networks_of(st)) {
    torch::serialize::InputArchive sub;
    archive.read(name, sub);
    m->load(sub);
  }
}

}  // namespace

std::string serialize_networks(TrainState& st) {
  torch::serialize::OutputArchive archive;
  write_networks(archive, st);
  std::ostringstream out;
  archive.save_to(out);
  return out.str();
}

void deserialize_networks(TrainState& st, const std::string& bytes) {
  torch::serialize::InputArchive archive;
  std::istringstream in(bytes);
  archive.load_from(in);
  read_networks(archive, st);
}

namespace {

json metrics_record(int64_t step, const LossBreakdown* b, std::optional<double> val) {
  json losses = json::object();
  for (const auto& name : loss_term_names()) losses[name] = b ? json(b->terms.at(name)) : json(nullptr);
  return {{"step", step},
          {"losses", losses},
          {"L_adv", b ? json(b->generator_adversarial) : json(nullptr)},
          {"total", b ? json(b->total) : json(nullptr)},
          {"val_p_mpjpe", val ? json(*val) : json(nullptr)}};
}

std::string step_name(const char* prefix, int64_t step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s-%07lld.pt", prefix, static_cast<long long>(step));
  return buf;
}

}  // namespace

FitResult fit(TrainState& st, const FitData& data, const std::optional<fs::path>& out_dir) {
  auto& cfg = st.config;
  if (!data.train || data.train->ids.empty()) throw DatasetEmptyError("training split has no images");
  if (!data.prior || data.prior->poses.empty()) throw DatasetEmptyError("prior split has no poses");
  auto prior = to_tensor(data.prior->poses, torch::kFloat32);
  if (cfg.weights.reference_bone_lengths.empty())
    cfg.weights.reference_bone_lengths = reference_bone_lengths(prior, st.topology);
  cfg.weights.validate(st.topology.bone_count());

  const uint32_t flow_checksum = parameter_checksum(*st.prior.flow);
  std::ofstream log;
  if (out_dir) {
    fs::create_directories(*out_dir);
    log.open(*out_dir / "metrics.jsonl", std::ios::app);
    if (!log) throw IoError("cannot open metrics log in " + out_dir->string());
  }

  FitResult result;
  std::string best;
  auto record = [&](json rec) {
    if (log) log << rec.dump() << '\n' << std::flush;
    result.metrics.push_back(std::move(rec));
  };
  auto validate = [&]() -> std::optional<double> {
    if (!data.validation) return std::nullopt;
    const double v = evaluate_state(st, *data.validation, cfg.eval_samples).p_mpjpe;
    if (result.best_step < 0 || v < result.best_val_p_mpjpe) {
      result.best_step = st.step;
      result.best_val_p_mpjpe = v;
      if (cfg.select_best) best = serialize_networks(st);
    }
    return v;
  };

  if (st.step == 0) record(metrics_record(0, nullptr, validate()));

  const auto n_train = static_cast<int64_t>(data.train->ids.size());
  const auto n_prior = prior.size(0);
  const auto idx_opts = torch::TensorOptions().dtype(torch::kInt64);
  while (st.step < cfg.steps) {
    auto img_idx = torch::randint(n_train, {cfg.batch_size}, st.generator, idx_opts);
    auto pri_idx = torch::randint(n_prior, {cfg.batch_size}, st.generator, idx_opts);
    const auto b = train_step(st, data.train->images.index_select(0, img_idx), prior.index_select(0, pri_idx));
    const bool last = st.step == cfg.steps;
    const bool eval_now = data.validation && (st.step % cfg.eval_every == 0 || last);
    if (st.step % cfg.log_every == 0 || eval_now || last)
      record(metrics_record(st.step, &b, eval_now ? validate() : std::nullopt));
    if (out_dir && (st.step % cfg.checkpoint_every == 0 || last)) save_checkpoint(*out_dir / step_name("checkpoint", st.step), st);
  }

  if (parameter_checksum(*st.prior.flow) != flow_checksum)
    throw std::logic_error("frozen flow parameters changed during training");
  if (cfg.select_best && !best.empty()) {
    deserialize_networks(st, best);
    if (out_dir) save_checkpoint(*out_dir / "best.pt", st);
  }
  return result;
}

namespace {

constexpr const char* kCheckpointFormat = "poselift-checkpoint";

uint32_t crc_of(const std::string& s) {
  return static_cast<uint32_t>(crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(s.data()),
                                     static_cast<uInt>(s.size())));
}

}  // namespace

void save_checkpoint(const fs::path& path, TrainState& st) {
  torch::serialize::OutputArchive archive;
  write_networks(archive, st);
  {
    torch::serialize::OutputArchive g, d;
    st.generator_optimizer->save(g);
    st.discriminator_optimizer->save(d);
    archive.write("opt_g", g);
    archive.write("opt_d", d);
  }
  archive.write("rng", st.generator.get_state());
  std::ostringstream payload_stream;
  archive.save_to(payload_stream);
  const std::string payload = payload_stream.str();

  char crc[16];
  std::snprintf(crc, sizeof crc, "%08x", crc_of(payload));
  json header{{"format", kCheckpointFormat},
              {"version", kCheckpointVersion},
              {"topology", st.topology.name()},
              {"topology_descriptor", topology_to_json(st.topology)},
              {"step", st.step},
              {"config", st.config.to_json()},
              {"renderer", {{"height", st.renderer.height}, {"width", st.renderer.width}, {"gamma", st.renderer.gamma}}},
              {"prior", pose_prior_to_json(st.prior)},
              {"prior_checksum", parameter_checksum(*st.prior.flow)},
              {"payload_bytes", payload.size()},
              {"payload_crc32", crc}};

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << header.dump() << '\n';
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

TrainState load_checkpoint(const fs::path& path, const std::optional<std::string>& expected_topology) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string header_line;
  if (!std::getline(in, header_line)) throw CorruptCheckpointError(path.string() + ": empty checkpoint");
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw CorruptCheckpointError(path.string() + ": unreadable header: " + e.what());
  }
  if (header.value("format", "") != kCheckpointFormat) throw FormatError(path.string() + " is not a checkpoint");
  const int version = header.value("version", 0);
  if (version != kCheckpointVersion)
    throw VersionError(path.string() + ": checkpoint version " + std::to_string(version) + ", this build reads " +
                       std::to_string(kCheckpointVersion));
  const std::string stored = header.value("topology", "");
  if (expected_topology && *expected_topology != stored)
    throw VersionError("checkpoint topology '" + stored + "' does not match requested topology '" +
                       *expected_topology + "'");

  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  char crc[16];
  std::snprintf(crc, sizeof crc, "%08x", crc_of(payload));
  if (payload.size() != header.value("payload_bytes", size_t{0}) || header.value("payload_crc32", "") != crc)
    throw CorruptCheckpointError(path.string() + ": payload size or checksum mismatch (truncated or modified file)");

  try {
    auto topology = topology_from_json(header.at("topology_descriptor"), stored);
    RendererConfig renderer;
    renderer.height = header.at("renderer").at("height").get<int>();
    renderer.width = header.at("renderer").at("width").get<int>();
    renderer.gamma = header.at("renderer").at("gamma").get<double>();
    auto st = make_train_state(TrainConfig::from_json(header.at("config")), topology,
                               pose_prior_from_json(header.at("prior")), renderer);

    torch::serialize::InputArchive archive;
    std::istringstream payload_stream(payload);
    archive.load_from(payload_stream);
    read_networks(archive, st);
    torch::serialize::InputArchive g, d;
    archive.read("opt_g", g);
    archive.read("opt_d", d);
    st.generator_optimizer->load(g);
    st.discriminator_optimizer->load(d);
    torch::Tensor rng;
    archive.read("rng", rng);
    st.generator.set_state(rng);
    st.step = header.at("step").get<int64_t>();
    return st;
  } catch (const json::exception& e) {
    throw CorruptCheckpointError(path.string() + ": " + e.what());
  } catch (const c10::Error& e) {
    throw CorruptCheckpointError(path.string() + ": " + e.what_without_backtrace());
  }
}

}  // namespace poselift
