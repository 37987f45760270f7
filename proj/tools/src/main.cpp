// Command-line front end: anchor clustering, synthetic data generation,
// training, inference, evaluation, and plot emission. Exit codes: 0 success,
// 1 usage or bad input, 2 file I/O failure, 3 numeric failure.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "anchorpose/anchors.hpp"
#include "anchorpose/decode.hpp"
#include "anchorpose/errors.hpp"
#include "anchorpose/losses.hpp"
#include "anchorpose/metrics.hpp"
#include "anchorpose/skeleton.hpp"
#include "anchorpose/synthdata.hpp"
#include "anchorpose/train.hpp"

namespace {

using namespace anchorpose;

// Shortest text that parses back to exactly the same double.
std::string fmt_double(double v) {
  char buf[64];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

// ---------------------------------------------------------------------------
// gen-anchors

int run_gen_anchors(const std::string& dataset_path, int n_anchors, uint64_t seed,
                    const std::string& out_path) {
  const std::vector<SceneSample> samples = load_dataset(dataset_path);
  std::vector<Box2D> boxes;
  for (const auto& sample : samples)
    boxes.insert(boxes.end(), sample.scene.boxes.begin(), sample.scene.boxes.end());
  if (boxes.empty()) throw std::invalid_argument("dataset contains no people");

  std::set<std::pair<double, double>> distinct;
  for (const auto& b : boxes) distinct.emplace(b.width(), b.height());
  const int k = std::min<int>(n_anchors, static_cast<int>(distinct.size()));
  if (k < n_anchors)
    std::cerr << "note: only " << k << " distinct box sizes; fitting " << k
              << " priors instead of " << n_anchors << "\n";

  const AnchorSet set = cluster_anchors(boxes, k, 100, seed);
  save_anchor_set(set, out_path);
  std::cout << "n_anchors=" << set.priors.size()
            << " mean_best_iou=" << fmt_double(mean_best_iou(boxes, set)) << " out=" << out_path
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// synth-data

int run_synth_data(uint64_t seed, int n_images, const GenerateOptions& opts,
                   const std::string& out_path) {
  const std::vector<SceneSample> samples =
      generate_dataset(seed, n_images, opts, default_skeleton());
  save_dataset(samples, out_path);
  int64_t people = 0;
  for (const auto& sample : samples) people += sample.scene.n_people();
  std::cout << "images=" << samples.size() << " people=" << people << " out=" << out_path
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

int run_train(const TrainConfig& config, const std::string& resume_path) {
  Checkpoint resume;
  const bool resuming = !resume_path.empty();
  if (resuming) resume = load_checkpoint(resume_path);
  const TrainResult result = train(config, resuming ? &resume : nullptr);
  const double final_total = result.history.empty() ? 0.0 : result.history.back().total;
  std::cout << "steps=" << result.checkpoint.optimizer.step
            << " final_total=" << fmt_double(final_total);
  if (!config.checkpoint_path.empty()) std::cout << " checkpoint=" << config.checkpoint_path;
  if (!config.history_path.empty()) std::cout << " history=" << config.history_path;
  std::cout << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// infer

int run_infer(const std::string& checkpoint_path, const std::string& dataset_path,
              const std::string& out_path, double score_threshold, double nms_threshold) {
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const std::unique_ptr<Predictor> predictor = make_predictor(ck);
  const std::vector<SceneSample> samples = load_dataset(dataset_path);

  std::vector<DetectionRecord> records;
  for (const auto& sample : samples) {
    const PredictionTensors pred = predictor->forward(sample);
    const std::vector<Detection> kept =
        nms(decode(pred, ck.grid, score_threshold, ck.skeleton.root_index), nms_threshold);
    for (const auto& det : kept) records.push_back({sample.image_id, det});
  }
  save_detections(records, out_path);
  std::cout << "images=" << samples.size() << " detections=" << records.size()
            << " out=" << out_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

int run_eval(const std::string& detections_path, const std::string& dataset_path,
             const std::string& out_path, const EvalOptions& opts) {
  const std::vector<DetectionRecord> records = load_detections(detections_path);
  const std::vector<SceneSample> samples = load_dataset(dataset_path);

  std::map<int64_t, size_t> index;
  for (size_t i = 0; i < samples.size(); ++i)
    if (!index.emplace(samples[i].image_id, i).second)
      throw std::invalid_argument("dataset repeats image_id " +
                                  std::to_string(samples[i].image_id));

  std::vector<std::vector<Detection>> dets_per_image(samples.size());
  for (const auto& rec : records) {
    const auto it = index.find(rec.image_id);
    if (it == index.end())
      throw std::invalid_argument("detections reference image_id " +
                                  std::to_string(rec.image_id) + " not present in the dataset");
    dets_per_image[it->second].push_back(rec.detection);
  }

  std::vector<GroundTruthScene> scenes;
  scenes.reserve(samples.size());
  for (const auto& sample : samples) scenes.push_back(sample.scene);

  const Skeleton& skeleton = default_skeleton();
  const EvalReport report = evaluate(dets_per_image, scenes, skeleton, opts);
  if (!out_path.empty()) save_report(report, out_path);
  std::cout << report_to_text(report, skeleton);
  return 0;
}

// ---------------------------------------------------------------------------
// plot

struct SvgCanvas {
  double width = 0.0;
  double height = 0.0;
  std::string body;

  std::string finish() const {
    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt_double(width) +
                      "\" height=\"" + fmt_double(height) + "\" viewBox=\"0 0 " +
                      fmt_double(width) + " " + fmt_double(height) + "\">\n";
    svg += "<rect x=\"0\" y=\"0\" width=\"" + fmt_double(width) + "\" height=\"" +
           fmt_double(height) + "\" fill=\"white\"/>\n";
    svg += body;
    svg += "</svg>\n";
    return svg;
  }
};

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << content;
  if (!out) throw IoError("write failed: " + path);
}

std::string svg_text(double x, double y, const std::string& text, const std::string& anchor,
                     double size = 11.0) {
  return "<text x=\"" + fmt_double(x) + "\" y=\"" + fmt_double(y) + "\" font-family=\"sans-serif\"" +
         " font-size=\"" + fmt_double(size) + "\" text-anchor=\"" + anchor + "\">" + text +
         "</text>\n";
}

// Loss curves: one polyline per history series. Every polyline carries the
// raw numbers in data-values so the figure stays machine-checkable.
int run_plot_history(const std::string& history_path, const std::string& out_path) {
  const std::vector<StepRecord> history = load_history(history_path);
  if (history.empty()) throw std::invalid_argument("history is empty: " + history_path);

  struct Series {
    const char* name;
    const char* color;
    double StepRecord::* field;
  };
  const Series series[] = {{"total", "#222222", &StepRecord::total},
                           {"cls", "#d62728", &StepRecord::cls},
                           {"loc", "#1f77b4", &StepRecord::loc},
                           {"pose2d", "#2ca02c", &StepRecord::pose2d},
                           {"pose3d", "#9467bd", &StepRecord::pose3d}};

  double lo = history[0].total, hi = history[0].total;
  for (const auto& s : series)
    for (const auto& r : history) {
      lo = std::min(lo, r.*(s.field));
      hi = std::max(hi, r.*(s.field));
    }
  if (hi <= lo) hi = lo + 1.0;
  const double step_lo = static_cast<double>(history.front().step);
  const double step_hi = static_cast<double>(history.back().step);
  const double step_span = step_hi > step_lo ? step_hi - step_lo : 1.0;

  SvgCanvas canvas{720.0, 440.0, ""};
  const double x0 = 70.0, x1 = 690.0, y0 = 390.0, y1 = 40.0;
  const auto map_x = [&](double step) { return x0 + (step - step_lo) / step_span * (x1 - x0); };
  const auto map_y = [&](double v) { return y0 + (v - lo) / (hi - lo) * (y1 - y0); };

  canvas.body += "<line x1=\"" + fmt_double(x0) + "\" y1=\"" + fmt_double(y0) + "\" x2=\"" +
                 fmt_double(x1) + "\" y2=\"" + fmt_double(y0) + "\" stroke=\"black\"/>\n";
  canvas.body += "<line x1=\"" + fmt_double(x0) + "\" y1=\"" + fmt_double(y0) + "\" x2=\"" +
                 fmt_double(x0) + "\" y2=\"" + fmt_double(y1) + "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = lo + (hi - lo) * tick / 4.0;
    const double y = map_y(v);
    canvas.body += "<line x1=\"" + fmt_double(x0 - 4) + "\" y1=\"" + fmt_double(y) + "\" x2=\"" +
                   fmt_double(x0) + "\" y2=\"" + fmt_double(y) + "\" stroke=\"black\"/>\n";
    canvas.body += svg_text(x0 - 8, y + 4, fmt_double(v), "end", 10.0);
    const double step = step_lo + step_span * tick / 4.0;
    const double x = map_x(step);
    canvas.body += "<line x1=\"" + fmt_double(x) + "\" y1=\"" + fmt_double(y0) + "\" x2=\"" +
                   fmt_double(x) + "\" y2=\"" + fmt_double(y0 + 4) + "\" stroke=\"black\"/>\n";
    canvas.body += svg_text(x, y0 + 18, fmt_double(step), "middle", 10.0);
  }
  canvas.body += svg_text((x0 + x1) / 2, 425.0, "step", "middle");
  canvas.body += svg_text((x0 + x1) / 2, 20.0, "training loss", "middle", 13.0);

  double legend_x = x0 + 10.0;
  for (const auto& s : series) {
    std::string points, values;
    for (const auto& r : history) {
      const double v = r.*(s.field);
      points += fmt_double(map_x(static_cast<double>(r.step))) + "," + fmt_double(map_y(v)) + " ";
      if (!values.empty()) values += ",";
      values += fmt_double(v);
    }
    canvas.body += "<polyline fill=\"none\" stroke=\"" + std::string(s.color) +
                   "\" stroke-width=\"1.5\" data-series=\"" + s.name + "\" data-values=\"" +
                   values + "\" points=\"" + points + "\"/>\n";
    canvas.body += "<rect x=\"" + fmt_double(legend_x) + "\" y=\"48\" width=\"12\" height=\"4\"" +
                   " fill=\"" + s.color + "\"/>\n";
    canvas.body += svg_text(legend_x + 16, 54, s.name, "start", 10.0);
    legend_x += 90.0;
  }

  write_text_file(out_path, canvas.finish());
  std::cout << "series=" << std::size(series) << " steps=" << history.size()
            << " out=" << out_path << "\n";
  return 0;
}

// Distance-band bar chart: one bar per depth band plus the overall score.
int run_plot_report(const std::string& report_path, const std::string& out_path) {
  const EvalReport report = load_report(report_path);

  struct Bar {
    std::string label;
    double value = 0.0;
    int64_t gts = 0;
  };
  std::vector<Bar> bars;
  for (const auto& bin : report.pck3d_per_distance_bin) {
    std::string label;
    if (bin.min_depth_m <= 0.0)
      label = "&lt;" + fmt_double(bin.max_depth_m) + "m";
    else if (std::isinf(bin.max_depth_m))
      label = "&gt;" + fmt_double(bin.min_depth_m) + "m";
    else
      label = fmt_double(bin.min_depth_m) + "-" + fmt_double(bin.max_depth_m) + "m";
    bars.push_back({label, bin.pck3d, bin.n_gts});
  }
  bars.push_back({"all", report.pck3d, report.counts.ground_truths});

  SvgCanvas canvas{640.0, 400.0, ""};
  const double x0 = 60.0, x1 = 620.0, y0 = 340.0, y1 = 50.0;
  const auto map_y = [&](double pct) { return y0 + pct / 100.0 * (y1 - y0); };

  canvas.body += "<line x1=\"" + fmt_double(x0) + "\" y1=\"" + fmt_double(y0) + "\" x2=\"" +
                 fmt_double(x1) + "\" y2=\"" + fmt_double(y0) + "\" stroke=\"black\"/>\n";
  canvas.body += "<line x1=\"" + fmt_double(x0) + "\" y1=\"" + fmt_double(y0) + "\" x2=\"" +
                 fmt_double(x0) + "\" y2=\"" + fmt_double(y1) + "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 5; ++tick) {
    const double pct = 20.0 * tick;
    const double y = map_y(pct);
    canvas.body += "<line x1=\"" + fmt_double(x0 - 4) + "\" y1=\"" + fmt_double(y) + "\" x2=\"" +
                   fmt_double(x0) + "\" y2=\"" + fmt_double(y) + "\" stroke=\"black\"/>\n";
    canvas.body += svg_text(x0 - 8, y + 4, fmt_double(pct), "end", 10.0);
  }
  canvas.body += svg_text((x0 + x1) / 2, 24.0, "3D joint accuracy by camera distance", "middle", 13.0);
  canvas.body += svg_text((x0 + x1) / 2, 380.0, "ground-truth root depth", "middle");

  const double slot = (x1 - x0) / static_cast<double>(bars.size());
  for (size_t i = 0; i < bars.size(); ++i) {
    const double bx = x0 + slot * (static_cast<double>(i) + 0.2);
    const double bw = slot * 0.6;
    const double top = map_y(bars[i].value);
    canvas.body += "<rect x=\"" + fmt_double(bx) + "\" y=\"" + fmt_double(top) + "\" width=\"" +
                   fmt_double(bw) + "\" height=\"" + fmt_double(y0 - top) +
                   "\" fill=\"#4c72b0\" data-bin=\"" + bars[i].label + "\" data-value=\"" +
                   fmt_double(bars[i].value) + "\" data-gts=\"" + std::to_string(bars[i].gts) +
                   "\"/>\n";
    canvas.body += svg_text(bx + bw / 2, top - 6, fmt_double(bars[i].value), "middle", 10.0);
    canvas.body += svg_text(bx + bw / 2, y0 + 16, bars[i].label, "middle", 10.0);
  }

  write_text_file(out_path, canvas.finish());
  std::cout << "bars=" << bars.size() << " out=" << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Anchor-based single-shot multi-person 2D/3D pose estimation toolkit"};
  app.require_subcommand(1);
  int rc = 0;

  // gen-anchors ------------------------------------------------------------
  std::string ga_dataset, ga_out;
  int ga_n = 10;
  uint64_t ga_seed = 0;
  auto* ga = app.add_subcommand("gen-anchors",
                                "Cluster dataset box sizes into anchor priors (k-means on 1-IoU)");
  ga->add_option("--dataset", ga_dataset, "Scene dataset (JSONL)")->required();
  ga->add_option("--n-anchors", ga_n, "Number of priors to fit")->capture_default_str();
  ga->add_option("--seed", ga_seed, "Clustering seed")->capture_default_str();
  ga->add_option("--out", ga_out, "Output anchor-set JSON")->required();
  ga->callback([&] { rc = run_gen_anchors(ga_dataset, ga_n, ga_seed, ga_out); });

  // synth-data ---------------------------------------------------------------
  uint64_t sd_seed = 0;
  int sd_n_images = 0;
  std::string sd_out;
  GenerateOptions sd_opts;
  int sd_cam_width = sd_opts.camera.width, sd_cam_height = sd_opts.camera.height;
  double sd_focal = sd_opts.camera.fx;
  auto* sd = app.add_subcommand("synth-data", "Generate a deterministic synthetic scene dataset");
  sd->add_option("--seed", sd_seed, "Master seed")->capture_default_str();
  sd->add_option("--images", sd_n_images, "Number of scenes")->required()
      ->check(CLI::PositiveNumber);
  sd->add_option("--out", sd_out, "Output dataset JSONL")->required();
  sd->add_option("--people-min", sd_opts.n_people_min, "Minimum people per scene")
      ->capture_default_str();
  sd->add_option("--people-max", sd_opts.n_people_max, "Maximum people per scene")
      ->capture_default_str();
  sd->add_option("--depth-min", sd_opts.depth_min_m, "Nearest root depth (m)")
      ->capture_default_str();
  sd->add_option("--depth-max", sd_opts.depth_max_m, "Farthest root depth (m)")
      ->capture_default_str();
  sd->add_option("--occlusion", sd_opts.occlusion_rate, "Joint occlusion rate in [0,1)")
      ->capture_default_str();
  sd->add_option("--camera-width", sd_cam_width, "Frame width (px)")->capture_default_str();
  sd->add_option("--camera-height", sd_cam_height, "Frame height (px)")->capture_default_str();
  sd->add_option("--focal", sd_focal, "Focal length (px)")->capture_default_str();
  sd->callback([&] {
    sd_opts.camera.width = sd_cam_width;
    sd_opts.camera.height = sd_cam_height;
    sd_opts.camera.fx = sd_opts.camera.fy = sd_focal;
    sd_opts.camera.cx = sd_cam_width / 2.0;
    sd_opts.camera.cy = sd_cam_height / 2.0;
    rc = run_synth_data(sd_seed, sd_n_images, sd_opts, sd_out);
  });

  // train --------------------------------------------------------------------
  std::string tr_config_path, tr_resume;
  // Every config key doubles as a flag; flags the user passes override the
  // config file.
  const std::vector<std::pair<std::string, std::string>> tr_keys = {
      {"--dataset", "dataset"},
      {"--anchors", "anchors"},
      {"--n-anchors", "n_anchors"},
      {"--stride", "stride"},
      {"--grid-height", "grid_height"},
      {"--grid-width", "grid_width"},
      {"--total-steps", "total_steps"},
      {"--lr0", "lr0"},
      {"--momentum", "momentum"},
      {"--poly-power", "poly_power"},
      {"--batch-size", "batch_size"},
      {"--seed", "seed"},
      {"--checkpoint-every", "checkpoint_every"},
      {"--checkpoint", "checkpoint"},
      {"--history", "history"},
      {"--augment", "augment"},
      {"--augment-scale-min", "augment_scale_min"},
      {"--augment-scale-max", "augment_scale_max"},
  };
  std::vector<std::string> tr_values(tr_keys.size());
  auto* tr = app.add_subcommand("train", "Fit a predictor and the loss weights with momentum SGD");
  tr->add_option("--config", tr_config_path, "key = value config file");
  tr->add_option("--resume", tr_resume, "Checkpoint to continue from");
  std::vector<CLI::Option*> tr_options(tr_keys.size());
  for (size_t i = 0; i < tr_keys.size(); ++i)
    tr_options[i] = tr->add_option(tr_keys[i].first, tr_values[i],
                                   "Overrides config key '" + tr_keys[i].second + "'");
  tr->callback([&] {
    TrainConfig config;
    if (!tr_config_path.empty()) config = parse_train_config(tr_config_path);
    for (size_t i = 0; i < tr_keys.size(); ++i)
      if (tr_options[i]->count() > 0) set_config_key(config, tr_keys[i].second, tr_values[i]);
    if (config.dataset_path.empty())
      throw std::invalid_argument("train needs a dataset (--dataset or config file)");
    rc = run_train(config, tr_resume);
  });

  // infer ----------------------------------------------------------------------
  std::string in_checkpoint, in_dataset, in_out;
  double in_score = 0.3, in_nms = 0.5;
  auto* in = app.add_subcommand("infer", "Decode detections from a trained checkpoint");
  in->add_option("--checkpoint", in_checkpoint, "Checkpoint JSON")->required();
  in->add_option("--dataset", in_dataset, "Scene dataset (JSONL)")->required();
  in->add_option("--out", in_out, "Output detections JSONL")->required();
  in->add_option("--score-threshold", in_score, "Keep anchors with sigmoid score above this")
      ->capture_default_str();
  in->add_option("--nms-threshold", in_nms, "Suppress overlaps above this IoU")
      ->capture_default_str();
  in->callback([&] { rc = run_infer(in_checkpoint, in_dataset, in_out, in_score, in_nms); });

  // eval -------------------------------------------------------------------------
  std::string ev_detections, ev_dataset, ev_out;
  EvalOptions ev_opts;
  auto* ev = app.add_subcommand("eval", "Score detections against ground truth");
  ev->add_option("--detections", ev_detections, "Detections JSONL")->required();
  ev->add_option("--dataset", ev_dataset, "Scene dataset (JSONL)")->required();
  ev->add_option("--out", ev_out, "Output report JSON");
  ev->add_option("--ap-iou", ev_opts.ap_iou_threshold, "Box IoU for a detection to count")
      ->capture_default_str();
  ev->add_option("--pairing-iou", ev_opts.pairing_min_iou, "Minimum IoU to pair for pose scoring")
      ->capture_default_str();
  ev->add_option("--pck-mm", ev_opts.pck_threshold_mm, "Joint-correctness threshold (mm)")
      ->capture_default_str();
  ev->callback([&] { rc = run_eval(ev_detections, ev_dataset, ev_out, ev_opts); });

  // plot ---------------------------------------------------------------------------
  std::string pl_history, pl_report, pl_out;
  auto* pl = app.add_subcommand("plot", "Emit an SVG figure from a history or a report");
  pl->add_option("--history", pl_history, "Training history JSONL (loss curves)");
  pl->add_option("--report", pl_report, "Evaluation report JSON (accuracy-by-distance bars)");
  pl->add_option("--out", pl_out, "Output SVG")->required();
  pl->callback([&] {
    if (pl_history.empty() == pl_report.empty())
      throw std::invalid_argument("plot needs exactly one of --history or --report");
    rc = pl_history.empty() ? run_plot_report(pl_report, pl_out)
                            : run_plot_history(pl_history, pl_out);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
