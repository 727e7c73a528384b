// Command line front end: train, eval, predict, corrupt, synth.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "graspnet/dataset.hpp"
#include "graspnet/eval.hpp"
#include "graspnet/model.hpp"
#include "graspnet/train.hpp"

namespace fs = std::filesystem;
using namespace graspnet;

namespace {

int run_train(const std::string& config_path, const fs::path& data, const fs::path& out, const std::string& split) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : TrainConfig::load(config_path);
  auto samples = load_dataset(data, split);
  std::cout << "training on " << samples.size() << " images from " << (data / split).string() << "\n";
  fs::create_directories(out);
  std::ofstream(out / "config.txt") << cfg.to_text();
  train(cfg, samples, out, [&](const EpochStats& s) {
    std::cout << "epoch " << s.epoch << "/" << cfg.epochs << " loss " << s.total << " (rpn " << s.rpn << " box "
              << s.box << " rot " << s.rot << " seg " << s.seg << " refine " << s.refine << ") lr "
              << s.learning_rate << std::endl;
  });
  std::cout << "wrote " << (out / "model.ckpt").string() << "\n";
  return 0;
}

int run_eval(const fs::path& ckpt, const fs::path& data, const std::string& split, const fs::path& report_path,
             const std::string& dump) {
  auto loaded = load_checkpoint(ckpt);
  auto samples = load_dataset(data, split, loaded.config.model_config().seg.num_classes);
  ModelPredictor predictor(loaded.model);
  auto report = evaluate(predictor, samples);
  if (report_path.has_parent_path()) fs::create_directories(report_path.parent_path());
  std::ofstream(report_path) << report.to_json() << "\n";
  if (!dump.empty()) write_prediction_dump(report, dump);
  std::cout << "grasp_accuracy " << report.grasp_accuracy << "\nseg_iou " << report.seg_iou << "\nimages_per_sec "
            << report.images_per_sec << "\n";
  return 0;
}

int run_predict(const fs::path& ckpt, const fs::path& image_path, const fs::path& overlay, const std::string& dump) {
  auto loaded = load_checkpoint(ckpt);
  auto image = read_png(image_path, 3);
  ModelPredictor predictor(loaded.model);
  auto pred = predictor.predict(image);
  std::vector<GraspCandidate> rects;
  for (const auto& g : pred.grasps) rects.push_back(g.grasp);
  save_overlay(image, rects, {}, overlay);
  const auto lines = prediction_dump_lines(image_path.stem().string(), pred.grasps);
  if (dump.empty()) {
    std::cout << lines;
  } else {
    std::ofstream(dump) << lines;
  }
  return 0;
}

int run_corrupt(const fs::path& in, const fs::path& out, const std::string& mode_name, double level,
                std::uint64_t seed) {
  const auto mode = parse_corruption_mode(mode_name);
  if (!fs::is_directory(in)) throw std::runtime_error("input directory not found: " + in.string());
  std::size_t n_images = 0, index = 0;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(in)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    const auto rel = fs::relative(p, in);
    const auto dst = out / rel;
    fs::create_directories(dst.parent_path());
    bool is_label = false;
    for (const auto& part : rel) is_label = is_label || part == "mask" || part == "inst";
    if (p.extension() == ".png" && !is_label) {
      // each file gets its own stream so results do not depend on directory size
      write_png(corrupt(read_png(p, 3), mode, level, augmentation_seed(seed, 0, index++)), dst);
      ++n_images;
    } else {
      fs::copy_file(p, dst, fs::copy_options::overwrite_existing);
    }
  }
  std::cout << "corrupted " << n_images << " images into " << out.string() << "\n";
  return 0;
}

int run_synth(const fs::path& out, const std::string& split, int count, std::uint64_t seed) {
  SyntheticSceneConfig cfg;
  cfg.seed = seed;
  write_dataset(generate_synthetic_split(cfg, count), out, split);
  std::cout << "wrote " << count << " scenes to " << (out / split).string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grasp detection network: training, evaluation and data tools"};
  app.require_subcommand(1);

  std::string config_path, split = "train", eval_split = "test", dump, mode;
  fs::path data, out, ckpt, report, image, overlay, in;
  double level = 0.0;
  std::uint64_t seed = 0;
  int count = 20;

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config_path, "key=value config file (defaults when omitted)");
  tr->add_option("--data", data, "dataset root")->required();
  tr->add_option("--out", out, "output directory")->required();
  tr->add_option("--split", split, "split directory under the root");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--report", report, "JSON report path")->required();
  ev->add_option("--split", eval_split, "split directory under the root");
  ev->add_option("--dump", dump, "prediction dump path");

  auto* pr = app.add_subcommand("predict", "run one image");
  pr->add_option("--ckpt", ckpt)->required();
  pr->add_option("--image", image)->required();
  pr->add_option("--overlay", overlay, "output PNG")->required();
  pr->add_option("--dump", dump, "prediction dump path (stdout when omitted)");

  auto* co = app.add_subcommand("corrupt", "corrupt every RGB image under a directory");
  co->add_option("--in", in)->required();
  co->add_option("--out", out)->required();
  co->add_option("--mode", mode)->required()->check(CLI::IsMember({"gaussian", "sp", "blur"}));
  co->add_option("--level", level, "sigma, density or blur sigma")->required()->check(CLI::NonNegativeNumber);
  co->add_option("--seed", seed)->required();

  auto* sy = app.add_subcommand("synth", "generate a synthetic split");
  sy->add_option("--out", out)->required();
  sy->add_option("--count", count)->check(CLI::PositiveNumber);
  sy->add_option("--seed", seed);
  sy->add_option("--split", split);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*tr) return run_train(config_path, data, out, split);
    if (*ev) return run_eval(ckpt, data, eval_split, report, dump);
    if (*pr) return run_predict(ckpt, image, overlay, dump);
    if (*co) return run_corrupt(in, out, mode, level, seed);
    if (*sy) return run_synth(out, split, count, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
