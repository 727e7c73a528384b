#include "graspnet/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace graspnet {

namespace fs = std::filesystem;

void SceneSample::validate(int num_classes) const {
  auto fail = [&](const std::string& what) { throw std::runtime_error("sample '" + name + "': " + what); };
  if (image.empty() || image.channels != 3) fail("image must be non-empty RGB");
  if (semantic_mask.height != image.height || semantic_mask.width != image.width || semantic_mask.channels != 1) {
    fail("semantic mask shape does not match image");
  }
  for (auto v : semantic_mask.data) {
    if (v >= num_classes) fail("mask id " + std::to_string(v) + " >= number of classes");
  }
  std::set<int> ids;
  if (!instance_mask.empty()) {
    if (instance_mask.height != image.height || instance_mask.width != image.width) {
      fail("instance mask shape does not match image");
    }
    for (auto v : instance_mask.data) ids.insert(v);
  } else {
    for (const auto& inst : instances) ids.insert(inst.id);
  }
  for (const auto& lg : grasps) {
    const auto& g = lg.grasp;
    if (g.x() < 0.0 || g.y() < 0.0 || g.x() > image.width || g.y() > image.height) {
      fail("grasp center outside image bounds");
    }
    if ((!instance_mask.empty() || !instances.empty()) && !ids.count(lg.instance_id)) {
      fail("grasp instance id " + std::to_string(lg.instance_id) + " not present in the mask");
    }
  }
}

std::vector<GraspCandidate> SceneSample::grasp_list() const {
  std::vector<GraspCandidate> out;
  out.reserve(grasps.size());
  for (const auto& lg : grasps) out.push_back(lg.grasp);
  return out;
}

const InstanceInfo* SceneSample::find_instance(int id) const {
  for (const auto& inst : instances) {
    if (inst.id == id) return &inst;
  }
  return nullptr;
}

SceneSample relabel_feasibility(const SceneSample& sample, const FeasibilityRules& rules) {
  SceneSample out = sample;
  std::set<int> infeasible;
  for (auto& inst : out.instances) {
    const bool occluded = inst.occlusion() > rules.max_occlusion;
    const bool supporting = rules.supporting_is_infeasible && !inst.supports.empty();
    inst.feasible = !(occluded || supporting);
    if (!inst.feasible) infeasible.insert(inst.id);
  }
  if (infeasible.empty()) return out;
  std::erase_if(out.grasps, [&](const LabeledGrasp& lg) { return infeasible.count(lg.instance_id) > 0; });
  if (!out.instance_mask.empty()) {
    for (std::size_t i = 0; i < out.instance_mask.data.size(); ++i) {
      if (infeasible.count(out.instance_mask.data[i])) out.semantic_mask.data[i] = semantic::kInfeasible;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

Image8 read_png(const fs::path& path, int channels) {
  cv::Mat m = cv::imread(path.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (m.empty()) throw std::runtime_error("cannot read image: " + path.string());
  if (channels == 3) cv::cvtColor(m, m, cv::COLOR_BGR2RGB);
  Image8 out(m.rows, m.cols, channels);
  for (int y = 0; y < m.rows; ++y) {
    std::copy_n(m.ptr<std::uint8_t>(y), std::size_t(m.cols) * channels, &out.at(y, 0, 0));
  }
  return out;
}

void write_png(const Image8& image, const fs::path& path) {
  const int type = image.channels == 1 ? CV_8UC1 : CV_8UC3;
  cv::Mat m(image.height, image.width, type);
  for (int y = 0; y < image.height; ++y) {
    std::copy_n(&image.at(y, 0, 0), std::size_t(image.width) * image.channels, m.ptr<std::uint8_t>(y));
  }
  if (image.channels == 3) cv::cvtColor(m, m, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw std::runtime_error("cannot write image: " + path.string());
}

namespace {

std::string strip_comment(const std::string& line) {
  const auto hash = line.find('#');
  std::string s = hash == std::string::npos ? line : line.substr(0, hash);
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string where(const fs::path& path, int line_no) { return path.string() + ":" + std::to_string(line_no); }

}  // namespace

std::vector<LabeledGrasp> parse_grasp_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open grasp file: " + path.string());
  std::vector<LabeledGrasp> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string s = strip_comment(line);
    if (s.empty()) continue;
    std::istringstream is(s);
    double cx, cy, w, h, theta, inst;
    std::string extra;
    if (!(is >> cx >> cy >> w >> h >> theta >> inst) || (is >> extra)) {
      throw std::runtime_error(where(path, line_no) + ": malformed grasp line (expected 'cx cy w h theta_deg instance_id')");
    }
    try {
      out.push_back({GraspCandidate(cx, cy, w, h, theta), static_cast<int>(inst)});
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(where(path, line_no) + ": " + e.what());
    }
  }
  return out;
}

GraspCandidate grasp_from_corners(const std::array<Point2, 4>& p) {
  const Point2 e0 = p[1] - p[0];
  const Point2 e1 = p[2] - p[1];
  const Point2 c = (p[0] + p[1] + p[2] + p[3]) * 0.25;
  return GraspCandidate(c.x, c.y, std::hypot(e0.x, e0.y), std::hypot(e1.x, e1.y), rad_to_deg(std::atan2(e0.y, e0.x)));
}

std::vector<GraspCandidate> parse_corner_rects(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corner file: " + path.string());
  std::vector<Point2> pts;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string s = strip_comment(line);
    if (s.empty()) continue;
    std::istringstream is(s);
    Point2 p;
    std::string extra;
    if (!(is >> p.x >> p.y) || (is >> extra)) throw std::runtime_error(where(path, line_no) + ": malformed corner line");
    pts.push_back(p);
  }
  if (pts.size() % 4 != 0) {
    throw std::runtime_error(path.string() + ": corner count " + std::to_string(pts.size()) + " is not a multiple of 4");
  }
  std::vector<GraspCandidate> out;
  for (std::size_t i = 0; i < pts.size(); i += 4) {
    out.push_back(grasp_from_corners({pts[i], pts[i + 1], pts[i + 2], pts[i + 3]}));
  }
  return out;
}

namespace {

std::vector<InstanceInfo> read_meta(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open meta file: " + path.string());
  std::vector<InstanceInfo> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string s = strip_comment(line);
    if (s.empty()) continue;
    std::istringstream is(s);
    InstanceInfo inst;
    std::string supports;
    if (!(is >> inst.id >> inst.class_id >> inst.full_area >> inst.visible_area >> supports)) {
      throw std::runtime_error(where(path, line_no) + ": malformed meta line");
    }
    if (supports != "-") {
      std::istringstream ss(supports);
      std::string tok;
      while (std::getline(ss, tok, ',')) inst.supports.push_back(std::stoi(tok));
    }
    out.push_back(std::move(inst));
  }
  return out;
}

void write_meta(const std::vector<InstanceInfo>& instances, const fs::path& path) {
  std::ofstream out(path);
  out << "# id class full_area visible_area supports\n";
  for (const auto& inst : instances) {
    out << inst.id << ' ' << inst.class_id << ' ' << inst.full_area << ' ' << inst.visible_area << ' ';
    if (inst.supports.empty()) {
      out << '-';
    } else {
      for (std::size_t i = 0; i < inst.supports.size(); ++i) out << (i ? "," : "") << inst.supports[i];
    }
    out << '\n';
  }
}

int mask_value_at(const Image8& mask, const GraspCandidate& g) {
  const int x = std::clamp(static_cast<int>(g.x()), 0, mask.width - 1);
  const int y = std::clamp(static_cast<int>(g.y()), 0, mask.height - 1);
  return mask.at(y, x);
}

}  // namespace

std::vector<SceneSample> load_dataset(const fs::path& root, const std::string& split, int num_classes) {
  const fs::path dir = root / split;
  if (!fs::is_directory(dir)) throw std::runtime_error("split directory not found: " + dir.string());
  std::vector<std::string> names;
  if (fs::is_directory(dir / "rgb")) {
    for (const auto& e : fs::directory_iterator(dir / "rgb")) {
      if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().stem().string());
    }
  }
  std::sort(names.begin(), names.end());
  std::vector<SceneSample> out;
  out.reserve(names.size());
  for (const auto& name : names) {
    SceneSample s;
    s.name = name;
    const fs::path mask = dir / "mask" / (name + ".png");
    const fs::path grasps = dir / "grasps" / (name + ".txt");
    const fs::path corners = dir / "grasps" / (name + "_cpos.txt");
    if (!fs::exists(mask)) throw std::runtime_error("missing mask for image '" + name + "': " + mask.string());
    if (!fs::exists(grasps) && !fs::exists(corners)) {
      throw std::runtime_error("missing grasp annotation for image '" + name + "': " + grasps.string());
    }
    s.image = read_png(dir / "rgb" / (name + ".png"), 3);
    s.semantic_mask = read_png(mask, 1);
    if (fs::exists(dir / "inst" / (name + ".png"))) s.instance_mask = read_png(dir / "inst" / (name + ".png"), 1);
    if (fs::exists(dir / "meta" / (name + ".txt"))) s.instances = read_meta(dir / "meta" / (name + ".txt"));
    if (fs::exists(grasps)) {
      s.grasps = parse_grasp_lines(grasps);
    } else {
      const Image8& ids = s.instance_mask.empty() ? s.semantic_mask : s.instance_mask;
      for (const auto& g : parse_corner_rects(corners)) s.grasps.push_back({g, mask_value_at(ids, g)});
    }
    s.validate(num_classes);
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const std::vector<SceneSample>& samples, const fs::path& root, const std::string& split) {
  const fs::path dir = root / split;
  for (const char* sub : {"rgb", "mask", "grasps", "inst", "meta"}) fs::create_directories(dir / sub);
  for (const auto& s : samples) {
    write_png(s.image, dir / "rgb" / (s.name + ".png"));
    write_png(s.semantic_mask, dir / "mask" / (s.name + ".png"));
    if (!s.instance_mask.empty()) write_png(s.instance_mask, dir / "inst" / (s.name + ".png"));
    if (!s.instances.empty()) write_meta(s.instances, dir / "meta" / (s.name + ".txt"));
    std::ofstream g(dir / "grasps" / (s.name + ".txt"));
    g << "# cx cy w h theta_deg instance_id\n";
    g.precision(9);
    for (const auto& lg : s.grasps) {
      g << lg.grasp.x() << ' ' << lg.grasp.y() << ' ' << lg.grasp.width() << ' ' << lg.grasp.height() << ' '
        << lg.grasp.theta() << ' ' << lg.instance_id << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Augmentation

SceneSample dihedral_transform(const SceneSample& sample, int k) {
  const bool fx = k & 1, fy = k & 2, tr = k & 4;
  if (!fx && !fy && !tr) return sample;
  const int h = sample.image.height, w = sample.image.width;
  auto map_image = [&](const Image8& src) {
    if (src.empty()) return src;
    Image8 out(tr ? w : h, tr ? h : w, src.channels);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        int xx = fx ? w - 1 - x : x;
        int yy = fy ? h - 1 - y : y;
        if (tr) std::swap(xx, yy);
        for (int c = 0; c < src.channels; ++c) out.at(yy, xx, c) = src.at(y, x, c);
      }
    }
    return out;
  };
  SceneSample out = sample;
  out.image = map_image(sample.image);
  out.semantic_mask = map_image(sample.semantic_mask);
  out.instance_mask = map_image(sample.instance_mask);
  for (auto& lg : out.grasps) {
    const auto& g = lg.grasp;
    double x = fx ? w - g.x() : g.x();
    double y = fy ? h - g.y() : g.y();
    double t = g.theta();
    if (fx != fy) t = 180.0 - t;
    if (tr) {
      std::swap(x, y);
      t = 90.0 - t;
    }
    lg.grasp = GraspCandidate(x, y, g.width(), g.height(), t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

enum class Shape { kBar, kEllipse, kBox };

struct ShapeSpec {
  Shape shape = Shape::kBar;
  double cx = 0, cy = 0;
  double major = 1, minor = 1;  // full extents along / across the long axis
  double phi = 0;               // long-axis direction, degrees
  std::array<std::uint8_t, 3> color{};
  int support_of = -1;  // index of the box this object rests on
  int occludes = -1;    // index of the object this one was placed over

  bool contains(double px, double py) const {
    const double c = std::cos(deg_to_rad(phi)), s = std::sin(deg_to_rad(phi));
    const double dx = px - cx, dy = py - cy;
    const double u = c * dx + s * dy, v = -s * dx + c * dy;
    if (shape == Shape::kEllipse) {
      const double a = 0.5 * major, b = 0.5 * minor;
      return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
    return std::abs(u) <= 0.5 * major && std::abs(v) <= 0.5 * minor;
  }

  int class_id() const {
    switch (shape) {
      case Shape::kBar:
        return semantic::kBar;
      case Shape::kEllipse:
        return semantic::kEllipse;
      case Shape::kBox:
        return semantic::kBox;
    }
    return semantic::kBackground;
  }

  GraspCandidate grasp() const {
    return GraspCandidate(cx, cy, minor + 8.0, std::clamp(0.45 * major, 8.0, 16.0), phi + 90.0);
  }
};

std::vector<int> raster(const ShapeSpec& s, int h, int w) {
  std::vector<int> px;
  const int r = static_cast<int>(std::ceil(0.5 * s.major)) + 1;
  for (int y = std::max(0, int(s.cy) - r); y <= std::min(h - 1, int(s.cy) + r); ++y) {
    for (int x = std::max(0, int(s.cx) - r); x <= std::min(w - 1, int(s.cx) + r); ++x) {
      if (s.contains(x + 0.5, y + 0.5)) px.push_back(y * w + x);
    }
  }
  return px;
}

class SceneBuilder {
 public:
  SceneBuilder(const SyntheticSceneConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {}

  double uni(double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng_); }
  int uni_int(int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng_); }
  bool coin(double p) { return uni(0.0, 1.0) < p; }

  template <typename T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<std::size_t>(uni_int(0, int(v.size()) - 1))];
  }

  ShapeSpec random_object(Shape shape, bool small) {
    ShapeSpec s;
    s.shape = shape;
    s.phi = uni(0.0, 180.0);
    if (shape == Shape::kBox) {
      s.major = uni(30.0, 38.0);
      s.minor = uni(22.0, 28.0);
      s.color = pick(cfg_.box_palette);
    } else if (small) {
      s.major = uni(14.0, 19.0);
      s.minor = uni(6.0, 8.0);
      s.color = pick(cfg_.palette);
    } else if (shape == Shape::kBar) {
      s.major = uni(26.0, 36.0);
      s.minor = uni(7.0, 11.0);
      s.color = pick(cfg_.palette);
    } else {
      s.major = uni(20.0, 28.0);
      s.minor = uni(11.0, 15.0);
      s.color = pick(cfg_.palette);
    }
    return s;
  }

  bool inside_image(const ShapeSpec& s) const {
    const double r = 0.5 * std::hypot(s.major, s.minor) + 1.0;
    return s.cx - r >= 0 && s.cy - r >= 0 && s.cx + r <= cfg_.width && s.cy + r <= cfg_.height;
  }

  bool clear_of(const ShapeSpec& s, const std::vector<ShapeSpec>& others, int except = -1) const {
    ShapeSpec grown = s;
    grown.major += 4.0;
    grown.minor += 4.0;
    for (std::size_t i = 0; i < others.size(); ++i) {
      if (int(i) == except) continue;
      for (int p : raster(grown, cfg_.height, cfg_.width)) {
        if (others[i].contains(p % cfg_.width + 0.5, p / cfg_.width + 0.5)) return false;
      }
    }
    return true;
  }

  std::vector<ShapeSpec> layout() {
    std::vector<Shape> kinds;
    if (cfg_.bars) kinds.push_back(Shape::kBar);
    if (cfg_.ellipses) kinds.push_back(Shape::kEllipse);
    if (cfg_.boxes) kinds.push_back(Shape::kBox);
    std::vector<ShapeSpec> shapes;
    if (kinds.empty()) return shapes;
    const int n = uni_int(cfg_.min_objects, std::max(cfg_.min_objects, cfg_.max_objects));
    for (int k = 0; k < n; ++k) {
      ShapeSpec s = random_object(pick(kinds), false);
      bool placed = false;
      for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
        s.cx = uni(0.0, cfg_.width);
        s.cy = uni(0.0, cfg_.height);
        placed = inside_image(s) && clear_of(s, shapes);
      }
      if (!placed) continue;
      shapes.push_back(s);
      if (s.shape == Shape::kBox && coin(cfg_.support_prob)) {
        const int box = int(shapes.size()) - 1;
        ShapeSpec top = random_object(coin(0.5) ? Shape::kBar : Shape::kEllipse, true);
        top.cx = s.cx + uni(-3.0, 3.0);
        top.cy = s.cy + uni(-3.0, 3.0);
        top.support_of = box;
        shapes.push_back(top);
      }
    }
    if (coin(cfg_.occlusion_prob)) add_occluder(shapes);
    return shapes;
  }

  void add_occluder(std::vector<ShapeSpec>& shapes) {
    std::vector<int> targets;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      if (shapes[i].shape != Shape::kBox && shapes[i].support_of < 0) targets.push_back(int(i));
    }
    if (targets.empty()) return;
    const int t = pick(targets);
    const ShapeSpec& target = shapes[t];
    const auto target_px = raster(target, cfg_.height, cfg_.width);
    for (int attempt = 0; attempt < 80; ++attempt) {
      ShapeSpec occ = random_object(Shape::kBar, false);
      const double a = deg_to_rad(uni(0.0, 360.0));
      const double d = 0.5 * target.major * uni(0.35, 0.8);
      occ.cx = target.cx + d * std::cos(a);
      occ.cy = target.cy + d * std::sin(a);
      occ.occludes = t;
      if (!inside_image(occ) || !clear_of(occ, shapes, t)) continue;
      if (occ.contains(target.cx, target.cy)) continue;
      int covered = 0;
      for (int p : target_px) covered += occ.contains(p % cfg_.width + 0.5, p / cfg_.width + 0.5) ? 1 : 0;
      if (covered < 0.3 * target_px.size()) continue;
      shapes.push_back(occ);
      return;
    }
  }

  SceneSample render(const std::vector<ShapeSpec>& shapes) {
    const int h = cfg_.height, w = cfg_.width;
    SceneSample out;
    out.image = Image8(h, w, 3);
    out.semantic_mask = Image8(h, w, 1, semantic::kBackground);
    out.instance_mask = Image8(h, w, 1, 0);
    const double base = uni(165.0, 215.0);
    std::array<std::uint8_t, 3> bg{};
    for (auto& c : bg) c = static_cast<std::uint8_t>(std::clamp(base + uni(-12.0, 12.0), 0.0, 255.0));
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = bg[c];
      }
    }
    std::vector<int> full_area(shapes.size(), 0);
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      const auto px = raster(shapes[i], h, w);
      full_area[i] = int(px.size());
      for (int p : px) {
        const int y = p / w, x = p % w;
        for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = shapes[i].color[c];
        out.instance_mask.at(y, x) = static_cast<std::uint8_t>(i + 1);
        out.semantic_mask.at(y, x) = static_cast<std::uint8_t>(shapes[i].class_id());
      }
    }
    std::vector<int> visible(shapes.size(), 0);
    for (auto v : out.instance_mask.data) {
      if (v > 0) ++visible[v - 1];
    }
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      InstanceInfo inst;
      inst.id = int(i) + 1;
      inst.class_id = shapes[i].class_id();
      inst.full_area = full_area[i];
      inst.visible_area = visible[i];
      for (std::size_t j = 0; j < shapes.size(); ++j) {
        if (shapes[j].support_of == int(i)) inst.supports.push_back(int(j) + 1);
      }
      out.instances.push_back(inst);
      out.grasps.push_back({shapes[i].grasp(), inst.id});
    }
    return out;
  }

 private:
  const SyntheticSceneConfig& cfg_;
  std::mt19937_64 rng_;
};

}  // namespace

SceneSample generate_raw_scene(const SyntheticSceneConfig& config, std::uint64_t seed) {
  if (config.height <= 0 || config.width <= 0) throw std::invalid_argument("synthetic image size must be positive");
  if (config.min_objects < 0 || config.max_objects < config.min_objects) {
    throw std::invalid_argument("invalid synthetic object count range");
  }
  SceneBuilder builder(config, seed);
  const auto shapes = builder.layout();
  SceneSample s = builder.render(shapes);
  s.name = "scene";
  return s;
}

SceneSample generate_synthetic_scene(const SyntheticSceneConfig& config, std::uint64_t seed) {
  return relabel_feasibility(generate_raw_scene(config, seed), config.rules);
}

std::vector<SceneSample> generate_synthetic_split(const SyntheticSceneConfig& config, int count) {
  std::vector<SceneSample> out;
  out.reserve(std::max(count, 0));
  for (int i = 0; i < count; ++i) {
    SceneSample s = generate_synthetic_scene(config, augmentation_seed(config.seed, 0x5ce9e, std::uint64_t(i)));
    std::ostringstream name;
    name << "scene_" << std::setw(5) << std::setfill('0') << i;
    s.name = name.str();
    out.push_back(std::move(s));
  }
  return out;
}

std::uint64_t sample_hash(const SceneSample& s) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ULL;
    }
  };
  for (auto v : s.image.data) mix(v);
  for (auto v : s.semantic_mask.data) mix(v);
  for (auto v : s.instance_mask.data) mix(v);
  for (const auto& lg : s.grasps) {
    for (double d : {lg.grasp.x(), lg.grasp.y(), lg.grasp.width(), lg.grasp.height(), lg.grasp.theta()}) {
      mix(static_cast<std::uint64_t>(std::llround(d * 1e6)));
    }
    mix(static_cast<std::uint64_t>(lg.instance_id));
  }
  return h;
}

}  // namespace graspnet
