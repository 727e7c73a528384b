#include "graspnet/eval.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>
#include <opencv2/imgproc.hpp>

namespace graspnet {

bool jaccard_correct(const GraspCandidate& pred, const std::vector<GraspCandidate>& gts) {
  for (const auto& g : gts) {
    if (angle_delta(pred.theta(), g.theta()) < kJaccardMaxAngle && rotated_iou(pred, g) > kJaccardMinIou) return true;
  }
  return false;
}

void accumulate_class_iou(const Image8& pred, const Image8& gt, std::vector<long long>& inter,
                          std::vector<long long>& uni) {
  if (pred.height != gt.height || pred.width != gt.width) throw std::invalid_argument("label maps differ in size");
  const int n = int(inter.size());
  for (std::size_t i = 0; i < pred.pixel_count(); ++i) {
    const int p = pred.data[i * std::size_t(pred.channels)], g = gt.data[i * std::size_t(gt.channels)];
    if (p == g) {
      if (p < n) {
        ++inter[std::size_t(p)];
        ++uni[std::size_t(p)];
      }
    } else {
      if (p < n) ++uni[std::size_t(p)];
      if (g < n) ++uni[std::size_t(g)];
    }
  }
}

EvalReport evaluate(Predictor& predictor, const std::vector<SceneSample>& samples, const EvalOptions& options) {
  EvalReport report;
  std::vector<long long> inter(std::size_t(options.num_classes), 0), uni(std::size_t(options.num_classes), 0);
  for (int i = 0; i < options.warmup && !samples.empty(); ++i) predictor.predict(samples.front().image);
  double total_seconds = 0.0;
  std::size_t n_candidates = 0, n_correct = 0, n_top1 = 0;
  for (const auto& s : samples) {
    const auto t0 = std::chrono::steady_clock::now();
    auto pred = predictor.predict(s.image);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    total_seconds += dt;
    ImageRecord rec;
    rec.name = s.name;
    rec.seconds = dt;
    rec.candidates = pred.grasps;
    const auto gts = s.grasp_list();
    for (const auto& c : pred.grasps) {
      const bool ok = jaccard_correct(c.grasp, gts);
      rec.correct.push_back(ok);
      n_correct += ok;
    }
    n_candidates += pred.grasps.size();
    rec.top1_correct = !rec.correct.empty() && rec.correct.front();
    n_top1 += rec.top1_correct;
    if (!pred.semantic.empty()) accumulate_class_iou(pred.semantic, s.semantic_mask, inter, uni);
    report.per_image.push_back(std::move(rec));
  }
  if (!samples.empty()) report.grasp_accuracy = double(n_top1) / double(samples.size());
  if (n_candidates > 0) report.candidate_precision = double(n_correct) / double(n_candidates);
  double sum = 0.0;
  int present = 0;
  for (std::size_t c = 0; c < inter.size(); ++c) {
    if (uni[c] == 0) {
      report.class_iou.push_back(-1.0);
      continue;
    }
    const double v = double(inter[c]) / double(uni[c]);
    report.class_iou.push_back(v);
    sum += v;
    ++present;
  }
  report.seg_iou = present > 0 ? sum / present : 0.0;
  // a clock that reports zero elapsed time still saw the images go through
  report.images_per_sec = samples.empty() ? 0.0 : double(samples.size()) / std::max(total_seconds, 1e-9);
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["grasp_accuracy"] = grasp_accuracy;
  j["candidate_precision"] = candidate_precision;
  j["seg_iou"] = seg_iou;
  j["class_iou"] = class_iou;
  j["images_per_sec"] = images_per_sec;
  auto& arr = j["per_image"] = nlohmann::json::array();
  for (const auto& r : per_image) {
    nlohmann::json e;
    e["image_id"] = r.name;
    e["top1_correct"] = r.top1_correct;
    e["seconds"] = r.seconds;
    auto& cands = e["candidates"] = nlohmann::json::array();
    for (std::size_t i = 0; i < r.candidates.size(); ++i) {
      const auto& g = r.candidates[i].grasp;
      cands.push_back({{"cx", g.x()},
                       {"cy", g.y()},
                       {"w", g.width()},
                       {"h", g.height()},
                       {"theta_deg", g.theta()},
                       {"score", r.candidates[i].score},
                       {"correct", bool(r.correct[i])}});
    }
    arr.push_back(std::move(e));
  }
  return j.dump(2);
}

std::string prediction_dump_lines(const std::string& image_id, const std::vector<ScoredGrasp>& candidates) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  for (const auto& c : candidates) {
    os << image_id << ' ' << c.grasp.x() << ' ' << c.grasp.y() << ' ' << c.grasp.width() << ' ' << c.grasp.height()
       << ' ' << c.grasp.theta() << ' ' << c.score << '\n';
  }
  return os.str();
}

void write_prediction_dump(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : report.per_image) os << prediction_dump_lines(r.name, r.candidates);
}

Image8 render_overlay(const Image8& image, const std::vector<GraspCandidate>& candidates,
                      const std::vector<bool>& correct) {
  if (image.channels != 3) throw std::invalid_argument("overlay needs an RGB image");
  if (!correct.empty() && correct.size() != candidates.size()) {
    throw std::invalid_argument("one correctness flag per candidate expected");
  }
  Image8 out = image;
  cv::Mat canvas(out.height, out.width, CV_8UC3, out.data.data());
  const cv::Scalar plate(255, 0, 0), opening(0, 0, 255), failure(0, 200, 0);  // RGB order
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto cs = corners(candidates[i]);
    std::array<cv::Point, 4> p;
    for (std::size_t k = 0; k < 4; ++k) p[k] = cv::Point(int(std::lround(cs[k].x - 0.5)), int(std::lround(cs[k].y - 0.5)));
    const bool ok = correct.empty() || correct[i];
    // corners 0-1 and 2-3 run along the opening axis; 1-2 and 3-0 are the plates
    cv::line(canvas, p[0], p[1], ok ? opening : failure, 1, cv::LINE_8);
    cv::line(canvas, p[2], p[3], ok ? opening : failure, 1, cv::LINE_8);
    cv::line(canvas, p[1], p[2], plate, 2, cv::LINE_8);
    cv::line(canvas, p[3], p[0], plate, 2, cv::LINE_8);
  }
  return out;
}

void save_overlay(const Image8& image, const std::vector<GraspCandidate>& candidates, const std::vector<bool>& correct,
                  const std::filesystem::path& path) {
  write_png(render_overlay(image, candidates, correct), path);
}

}  // namespace graspnet
