#pragma once

// Rotated grasp rectangles, axis-aligned proposals and the box parameterization
// shared by the RPN, the grasp head and the refinement head.
//
// Coordinates are image pixels, x to the right and y down. Pixel (r, c)
// covers [c, c+1) x [r, r+1), so its center is (c + 0.5, r + 0.5).

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace graspnet {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
inline Point2 operator*(Point2 a, double s) { return {a.x * s, a.y * s}; }
inline double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }

inline constexpr double deg_to_rad(double d) { return d * std::numbers::pi / 180.0; }
inline constexpr double rad_to_deg(double r) { return r * 180.0 / std::numbers::pi; }

/// Maps any angle in degrees onto [0, 180).
inline double normalize_angle(double theta_deg) {
  double t = std::fmod(theta_deg, 180.0);
  if (t < 0.0) t += 180.0;
  // fmod of -1e-17 lands on 180 after the shift
  if (t >= 180.0) t -= 180.0;
  return t;
}

/// Five-parameter grasp rectangle. `width` runs along the gripper opening
/// axis, which points along `theta` degrees; `height` is the finger extent.
class GraspCandidate {
 public:
  GraspCandidate() = default;
  GraspCandidate(double x, double y, double width, double height, double theta_deg)
      : x_(x), y_(y), width_(width), height_(height), theta_(normalize_angle(theta_deg)) {
    if (!(width > 0.0) || !(height > 0.0) || !std::isfinite(width) || !std::isfinite(height)) {
      std::ostringstream os;
      os << "grasp extents must be positive, got w=" << width << " h=" << height;
      throw std::invalid_argument(os.str());
    }
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(theta_deg)) {
      throw std::invalid_argument("grasp parameters must be finite");
    }
  }

  double x() const { return x_; }
  double y() const { return y_; }
  double width() const { return width_; }
  double height() const { return height_; }
  double theta() const { return theta_; }
  double area() const { return width_ * height_; }

  friend bool operator==(const GraspCandidate&, const GraspCandidate&) = default;

 private:
  double x_ = 0.0;
  double y_ = 0.0;
  double width_ = 1.0;
  double height_ = 1.0;
  double theta_ = 0.0;
};

/// Axis-aligned box in center form, as produced by the RPN.
class RegionProposal {
 public:
  RegionProposal() = default;
  RegionProposal(double x, double y, double width, double height, double score = 0.0)
      : x_(x), y_(y), width_(width), height_(height), score_(score) {
    if (!(width > 0.0) || !(height > 0.0)) {
      std::ostringstream os;
      os << "proposal extents must be positive, got w=" << width << " h=" << height;
      throw std::invalid_argument(os.str());
    }
  }

  static RegionProposal from_corners(double x1, double y1, double x2, double y2, double score = 0.0) {
    return RegionProposal(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1, score);
  }

  double x() const { return x_; }
  double y() const { return y_; }
  double width() const { return width_; }
  double height() const { return height_; }
  double score() const { return score_; }
  double x1() const { return x_ - 0.5 * width_; }
  double y1() const { return y_ - 0.5 * height_; }
  double x2() const { return x_ + 0.5 * width_; }
  double y2() const { return y_ + 0.5 * height_; }
  double area() const { return width_ * height_; }

  void set_score(double s) { score_ = s; }

 private:
  double x_ = 0.0;
  double y_ = 0.0;
  double width_ = 1.0;
  double height_ = 1.0;
  double score_ = 0.0;
};

/// Equal-width partition of [0, 180) into orientation classes. Class
/// `null_class()` marks an invalid proposal.
class OrientationBinning {
 public:
  explicit OrientationBinning(int n_classes = 18) : n_classes_(n_classes) {
    if (n_classes <= 0) throw std::invalid_argument("orientation binning needs at least one class");
  }

  int n_classes() const { return n_classes_; }
  int null_class() const { return n_classes_; }
  double bin_width() const { return 180.0 / n_classes_; }

  int bin_of(double theta_deg) const {
    const double t = normalize_angle(theta_deg);
    const int c = static_cast<int>(std::floor(t / bin_width()));
    return std::clamp(c, 0, n_classes_ - 1);
  }

  double representative(int c) const {
    check_class(c);
    return (c + 0.5) * bin_width();
  }

  void check_class(int c) const {
    if (c < 0 || c >= n_classes_) {
      std::ostringstream os;
      os << "orientation class " << c << " outside [0, " << n_classes_ << ")";
      throw std::out_of_range(os.str());
    }
  }

 private:
  int n_classes_;
};

/// Shift-and-log-scale offsets relative to a reference box. `t_theta` is in
/// bin-width units and only used by the refinement head.
struct CorrectionFactors {
  double t_x = 0.0;
  double t_y = 0.0;
  double t_w = 0.0;
  double t_h = 0.0;
  std::optional<double> t_theta;
};

struct ScoredGrasp {
  GraspCandidate grasp;
  double score = 0.0;
};

/// Corners in order (-w/2,-h/2), (w/2,-h/2), (w/2,h/2), (-w/2,h/2) of the
/// local frame, rotated by theta. The polygon has positive shoelace area.
inline std::array<Point2, 4> corners(const GraspCandidate& g) {
  const double c = std::cos(deg_to_rad(g.theta()));
  const double s = std::sin(deg_to_rad(g.theta()));
  const double hw = 0.5 * g.width();
  const double hh = 0.5 * g.height();
  const std::array<Point2, 4> local{{{-hw, -hh}, {hw, -hh}, {hw, hh}, {-hw, hh}}};
  std::array<Point2, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {g.x() + c * local[i].x - s * local[i].y, g.y() + s * local[i].x + c * local[i].y};
  }
  return out;
}

inline double polygon_area(const std::vector<Point2>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    a += cross(poly[i], poly[(i + 1) % poly.size()]);
  }
  return 0.5 * a;
}

namespace detail {

// Sutherland-Hodgman: keep the part of `subject` on the left of a->b.
inline std::vector<Point2> clip_half_plane(const std::vector<Point2>& subject, Point2 a, Point2 b) {
  std::vector<Point2> out;
  if (subject.empty()) return out;
  out.reserve(subject.size() + 1);
  const Point2 edge = b - a;
  auto side = [&](Point2 p) { return cross(edge, p - a); };
  for (std::size_t i = 0; i < subject.size(); ++i) {
    const Point2 cur = subject[i];
    const Point2 nxt = subject[(i + 1) % subject.size()];
    const double sc = side(cur);
    const double sn = side(nxt);
    if (sc >= 0.0) out.push_back(cur);
    if ((sc >= 0.0) != (sn >= 0.0)) {
      const double t = sc / (sc - sn);
      out.push_back(cur + (nxt - cur) * t);
    }
  }
  return out;
}

}  // namespace detail

inline double intersection_area(const GraspCandidate& a, const GraspCandidate& b) {
  const auto ca = corners(a);
  const auto cb = corners(b);
  std::vector<Point2> poly(ca.begin(), ca.end());
  for (std::size_t i = 0; i < 4 && !poly.empty(); ++i) {
    poly = detail::clip_half_plane(poly, cb[i], cb[(i + 1) % 4]);
  }
  if (poly.size() < 3) return 0.0;
  return std::max(0.0, polygon_area(poly));
}

inline double rotated_iou(const GraspCandidate& a, const GraspCandidate& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0 || inter <= 1e-12 * uni) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// Smallest rotation between two grasp orientations, 180-degree symmetric.
inline double angle_delta(double theta_a, double theta_b) {
  const double d = normalize_angle(theta_a - theta_b);
  return std::min(d, 180.0 - d);
}

/// Signed difference target - source wrapped into [-90, 90).
inline double signed_angle_delta(double target, double source) {
  double d = normalize_angle(target - source);
  if (d >= 90.0) d -= 180.0;
  return d;
}

inline double aabb_iou(const RegionProposal& a, const RegionProposal& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

inline CorrectionFactors encode_box(double x, double y, double w, double h, const RegionProposal& ref) {
  if (!(w > 0.0) || !(h > 0.0)) throw std::invalid_argument("target extents must be positive");
  return {(x - ref.x()) / ref.width(), (y - ref.y()) / ref.height(), std::log(w / ref.width()),
          std::log(h / ref.height()), std::nullopt};
}

/// Regression targets of a ground-truth grasp relative to a proposal.
inline CorrectionFactors encode_targets(const GraspCandidate& g_star, const RegionProposal& r_hat) {
  return encode_box(g_star.x(), g_star.y(), g_star.width(), g_star.height(), r_hat);
}

inline CorrectionFactors encode_targets(const RegionProposal& target, const RegionProposal& r_hat) {
  return encode_box(target.x(), target.y(), target.width(), target.height(), r_hat);
}

/// Axis-aligned inverse of encode_box.
inline RegionProposal decode_box(const RegionProposal& ref, const CorrectionFactors& f) {
  return RegionProposal(ref.x() + f.t_x * ref.width(), ref.y() + f.t_y * ref.height(),
                        ref.width() * std::exp(f.t_w), ref.height() * std::exp(f.t_h), ref.score());
}

inline GraspCandidate decode_candidate(const RegionProposal& r_hat, const CorrectionFactors& f, int orientation_class,
                                       const OrientationBinning& binning = OrientationBinning{}) {
  if (orientation_class == binning.null_class()) {
    throw std::invalid_argument("cannot decode a grasp for the null orientation class");
  }
  double theta = binning.representative(orientation_class);
  if (f.t_theta) theta += *f.t_theta * binning.bin_width();
  return GraspCandidate(r_hat.x() + f.t_x * r_hat.width(), r_hat.y() + f.t_y * r_hat.height(),
                        r_hat.width() * std::exp(f.t_w), r_hat.height() * std::exp(f.t_h), theta);
}

template <typename T>
inline T smooth_l1(T x) {
  const T ax = x < T(0) ? -x : x;
  return ax < T(1) ? T(0.5) * x * x : ax - T(0.5);
}

inline RegionProposal enclosing_aabb(const GraspCandidate& g) {
  const auto cs = corners(g);
  double x1 = cs[0].x, x2 = cs[0].x, y1 = cs[0].y, y2 = cs[0].y;
  for (const auto& p : cs) {
    x1 = std::min(x1, p.x);
    x2 = std::max(x2, p.x);
    y1 = std::min(y1, p.y);
    y2 = std::max(y2, p.y);
  }
  return RegionProposal::from_corners(x1, y1, x2, y2);
}

/// Greedy suppression by descending score; equal scores keep the lower
/// index first. Returns indices into `candidates` in keep order.
inline std::vector<std::size_t> nms_rotated_indices(const std::vector<ScoredGrasp>& candidates, double iou_threshold) {
  std::vector<std::size_t> order(candidates.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return candidates[a].score > candidates[b].score; });
  std::vector<std::size_t> keep;
  std::vector<bool> removed(candidates.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (removed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!removed[j] && rotated_iou(candidates[i].grasp, candidates[j].grasp) > iou_threshold) removed[j] = true;
    }
  }
  return keep;
}

inline std::vector<ScoredGrasp> nms_rotated(const std::vector<ScoredGrasp>& candidates, double iou_threshold) {
  std::vector<ScoredGrasp> out;
  for (auto i : nms_rotated_indices(candidates, iou_threshold)) out.push_back(candidates[i]);
  return out;
}

/// Same contract as nms_rotated for axis-aligned proposals (by their score).
inline std::vector<std::size_t> nms_aabb_indices(const std::vector<RegionProposal>& boxes, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].score() > boxes[b].score(); });
  std::vector<std::size_t> keep;
  std::vector<bool> removed(boxes.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (removed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!removed[j] && aabb_iou(boxes[i], boxes[j]) > iou_threshold) removed[j] = true;
    }
  }
  return keep;
}

/// True if the pixel-space point lies inside the rectangle (boundary inclusive).
inline bool contains(const GraspCandidate& g, Point2 p) {
  const double c = std::cos(deg_to_rad(g.theta()));
  const double s = std::sin(deg_to_rad(g.theta()));
  const double dx = p.x - g.x();
  const double dy = p.y - g.y();
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  return std::abs(u) <= 0.5 * g.width() && std::abs(v) <= 0.5 * g.height();
}

}  // namespace graspnet
