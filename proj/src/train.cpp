#include "graspnet/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace graspnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  T v{};
  is >> v;
  if (is.fail() || !is.eof()) throw std::invalid_argument("bad value for '" + key + "': '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw std::invalid_argument("bad boolean for '" + key + "': '" + value + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define INT_FIELD(name, member)                                                                    \
  {                                                                                                \
    name, {[](TrainConfig& c, const std::string& k, const std::string& v) {                       \
             c.member = parse_number<long long>(k, v);                                             \
           },                                                                                      \
           [](const TrainConfig& c) { return std::to_string(c.member); } }                         \
  }
#define REAL_FIELD(name, member)                                                                              \
  {                                                                                                           \
    name, {[](TrainConfig& c, const std::string& k, const std::string& v) { c.member = parse_number<double>(k, v); }, \
           [](const TrainConfig& c) { return fmt(c.member); } }                                              \
  }
#define BOOL_FIELD(name, member)                                                                             \
  {                                                                                                          \
    name, {[](TrainConfig& c, const std::string& k, const std::string& v) { c.member = parse_bool(k, v); }, \
           [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); } }                 \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f{
      INT_FIELD("epochs", epochs),
      INT_FIELD("batch_size", batch_size),
      REAL_FIELD("learning_rate", learning_rate),
      REAL_FIELD("momentum", momentum),
      REAL_FIELD("weight_decay", weight_decay),
      REAL_FIELD("grad_clip", grad_clip),
      INT_FIELD("warmup_steps", warmup_steps),
      {"seed", {[](TrainConfig& c, const std::string& k, const std::string& v) {
                  c.seed = parse_number<std::uint64_t>(k, v);
                },
                [](const TrainConfig& c) { return std::to_string(c.seed); }}},
      {"preset", {[](TrainConfig& c, const std::string&, const std::string& v) { c.preset = v; },
                  [](const TrainConfig& c) { return c.preset; }}},
      BOOL_FIELD("dihedral_augment", dihedral_augment),
      BOOL_FIELD("noise_augment", noise_augment),
      REAL_FIELD("noise_prob", noise_prob),
      REAL_FIELD("gaussian_sigma", noise.gaussian_sigma),
      REAL_FIELD("sp_density", noise.sp_density),
      REAL_FIELD("blur_sigma", noise.blur_sigma),
      INT_FIELD("checkpoint_interval", checkpoint_interval),
      REAL_FIELD("lambda_grasp", weights.grasp),
      REAL_FIELD("lambda_seg", weights.seg),
      REAL_FIELD("lambda_refine", weights.refine),
      INT_FIELD("head_samples", head_samples),
      REAL_FIELD("score_threshold", score_threshold),
      INT_FIELD("frozen_stages", frozen_stages),
  };
  return f;
}

#undef INT_FIELD
#undef REAL_FIELD
#undef BOOL_FIELD

}  // namespace

TrainConfig TrainConfig::full_scale_defaults() {
  TrainConfig c;
  c.epochs = 800;
  c.batch_size = 10;
  c.preset = "resnet101";
  c.head_samples = 128;
  return c;
}

std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> k;
  for (const auto& [name, _] : fields()) k.push_back(name);
  return k;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  auto it = fields().find(key);
  if (it == fields().end()) throw std::invalid_argument("unknown config key '" + key + "'");
  it->second.set(*this, key, value);
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  std::istringstream is(text);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    try {
      if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + line + "'");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(n) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  for (const auto& [name, f] : fields()) os << name << " = " << f.get(*this) << "\n";
  return os.str();
}

ModelConfig TrainConfig::model_config() const {
  auto m = ModelConfig::from_preset(preset);
  m.head.samples_per_image = head_samples;
  m.head.score_threshold = score_threshold;
  if (frozen_stages >= 0) m.backbone.frozen_stage_count = frozen_stages;
  return m;
}

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("epochs and batch_size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0, 1)");
  if (weight_decay < 0.0 || warmup_steps < 0 || checkpoint_interval < 0) {
    throw std::invalid_argument("weight_decay, warmup_steps and checkpoint_interval must be >= 0");
  }
  if (noise_prob < 0.0 || noise_prob > 1.0) throw std::invalid_argument("noise_prob must be in [0, 1]");
  if (head_samples < 1) throw std::invalid_argument("head_samples must be positive");
  if (frozen_stages > 4) throw std::invalid_argument("frozen_stages must be <= 4");
  noise.validate();
  weights.validate();
  model_config().validate();
}

SceneSample augment_sample(const SceneSample& sample, const TrainConfig& config, int epoch, std::size_t index) {
  const auto seed = augmentation_seed(config.seed, std::uint64_t(epoch), index);
  SceneSample out = config.dihedral_augment ? dihedral_transform(sample, int(splitmix64(seed) % 8)) : sample;
  if (config.noise_augment) out.image = random_corruption(out.image, config.noise, config.noise_prob, seed);
  return out;
}

TrainResult train(const TrainConfig& config, const std::vector<SceneSample>& data, const std::filesystem::path& out_dir,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("training set is empty");
  torch::manual_seed(config.seed);
  TrainResult result;
  result.model = GraspNet(config.model_config());
  auto& model = result.model;
  model->train();

  std::vector<torch::Tensor> params;
  for (auto& p : model->parameters()) {
    if (p.requires_grad()) params.push_back(p);
  }
  torch::optim::SGD opt(params, torch::optim::SGDOptions(config.learning_rate)
                                    .momentum(config.momentum)
                                    .weight_decay(config.weight_decay));
  const int steps_per_epoch = int((data.size() + std::size_t(config.batch_size) - 1) / std::size_t(config.batch_size));
  const int total_steps = steps_per_epoch * config.epochs;
  auto lr_at = [&](int step) {
    if (step < config.warmup_steps) return config.learning_rate * (step + 1) / double(config.warmup_steps + 1);
    const double t = double(step - config.warmup_steps) / std::max(1, total_steps - config.warmup_steps);
    return config.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  };

  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  std::ofstream curve;
  if (!out_dir.empty()) {
    curve.open(out_dir / "loss_curve.csv");
    curve << "epoch,total,rpn,box,rot,seg,refine,lr\n";
  }

  std::mt19937_64 rng(splitmix64(config.seed));
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats stats;
    stats.epoch = epoch + 1;
    for (int b = 0; b < steps_per_epoch; ++b) {
      std::vector<SceneSample> samples;
      for (std::size_t j = std::size_t(b) * config.batch_size; j < std::min(data.size(), std::size_t(b + 1) * config.batch_size); ++j) {
        samples.push_back(augment_sample(data[order[j]], config, epoch, order[j]));
      }
      const double lr = lr_at(step);
      for (auto& g : opt.param_groups()) static_cast<torch::optim::SGDOptions&>(g.options()).lr(lr);
      TrainPlan plan;
      auto parts = model->compute_losses(make_batch(samples), plan, rng);
      auto loss = total_loss(parts, config.weights);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << epoch + 1 << ", batch " << b << " (rpn " << parts.rpn.item<double>()
           << ", box " << parts.box.item<double>() << ", rot " << parts.rot.item<double>() << ", seg "
           << parts.seg.item<double>() << ", refine " << parts.refine.item<double>() << ")";
        throw std::runtime_error(os.str());
      }
      opt.zero_grad();
      loss.backward();
      if (config.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(params, config.grad_clip);
      opt.step();
      ++step;
      stats.total += value;
      stats.rpn += parts.rpn.item<double>();
      stats.box += parts.box.item<double>();
      stats.rot += parts.rot.item<double>();
      stats.seg += parts.seg.item<double>();
      stats.refine += parts.refine.item<double>();
      stats.learning_rate = lr;
    }
    for (double* v : {&stats.total, &stats.rpn, &stats.box, &stats.rot, &stats.seg, &stats.refine}) {
      *v /= steps_per_epoch;
    }
    result.history.push_back(stats);
    if (curve.is_open()) {
      curve << stats.epoch << "," << stats.total << "," << stats.rpn << "," << stats.box << "," << stats.rot << ","
            << stats.seg << "," << stats.refine << "," << stats.learning_rate << "\n";
      curve.flush();
    }
    if (on_epoch) on_epoch(stats);
    if (!out_dir.empty() && config.checkpoint_interval > 0 && (epoch + 1) % config.checkpoint_interval == 0 &&
        epoch + 1 < config.epochs) {
      std::ostringstream name;
      name << "model_epoch" << std::setw(4) << std::setfill('0') << epoch + 1 << ".ckpt";
      save_checkpoint(out_dir / name.str(), model, config);
    }
  }
  model->eval();
  if (!out_dir.empty()) save_checkpoint(out_dir / "model.ckpt", model, config);
  return result;
}

namespace {

constexpr char kMagic[8] = {'G', 'R', 'S', 'P', 'C', 'K', 'P', 'T'};

enum DType : std::uint8_t { kF32 = 0, kF64 = 1, kI64 = 2 };

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint truncated while reading " + what);
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), std::streamsize(s.size()));
}

std::string get_string(std::istream& is, const std::string& what) {
  const auto n = get<std::uint64_t>(is, what);
  if (n > (1u << 26)) throw std::runtime_error("checkpoint corrupt: oversized " + what);
  std::string s(n, '\0');
  is.read(s.data(), std::streamsize(n));
  if (!is) throw std::runtime_error("checkpoint truncated while reading " + what);
  return s;
}

std::map<std::string, torch::Tensor> state_of(GraspNet& model) {
  std::map<std::string, torch::Tensor> s;
  for (const auto& p : model->named_parameters(true)) s[p.key()] = p.value();
  for (const auto& b : model->named_buffers(true)) s[b.key()] = b.value();
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, GraspNet& model, const TrainConfig& config) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kCheckpointVersion);
    put_string(os, config.to_text());
    const auto state = state_of(model);
    put<std::uint64_t>(os, state.size());
    for (const auto& [name, value] : state) {
      auto t = value.detach().to(torch::kCPU).contiguous();
      DType dt;
      if (t.scalar_type() == torch::kFloat) {
        dt = kF32;
      } else if (t.scalar_type() == torch::kDouble) {
        dt = kF64;
      } else if (t.scalar_type() == torch::kLong) {
        dt = kI64;
      } else {
        throw std::runtime_error("unsupported tensor type for " + name);
      }
      put_string(os, name);
      put<std::uint8_t>(os, dt);
      put<std::uint32_t>(os, std::uint32_t(t.dim()));
      for (auto d : t.sizes()) put<std::int64_t>(os, d);
      os.write(static_cast<const char*>(t.data_ptr()), std::streamsize(t.nbytes()));
    }
    if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw std::runtime_error(path.string() + " is not a grasp network checkpoint");
  }
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " in " + path.string() +
                             " does not match supported version " + std::to_string(kCheckpointVersion));
  }
  LoadedCheckpoint out;
  out.config = TrainConfig::parse(get_string(is, "config"));
  out.model = GraspNet(out.config.model_config());
  const auto count = get<std::uint64_t>(is, "tensor count");
  std::map<std::string, torch::Tensor> weights;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name = get_string(is, "tensor name");
    const auto dt = get<std::uint8_t>(is, name);
    const auto ndim = get<std::uint32_t>(is, name);
    if (ndim > 8) throw std::runtime_error("checkpoint corrupt at tensor " + name);
    std::vector<std::int64_t> sizes;
    for (std::uint32_t d = 0; d < ndim; ++d) sizes.push_back(get<std::int64_t>(is, name));
    torch::ScalarType st = dt == kF32 ? torch::kFloat : dt == kF64 ? torch::kDouble : torch::kLong;
    if (dt > kI64) throw std::runtime_error("checkpoint corrupt: unknown dtype for " + name);
    auto t = torch::empty(sizes, torch::TensorOptions().dtype(st));
    is.read(static_cast<char*>(t.data_ptr()), std::streamsize(t.nbytes()));
    if (!is) throw std::runtime_error("checkpoint truncated in tensor " + name);
    weights[name] = t;
  }
  load_named_weights(*out.model, weights, /*require_all=*/true);
  out.model->eval();
  return out;
}

}  // namespace graspnet
