#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "anchorpose/errors.hpp"
#include "anchorpose/synthdata.hpp"
#include "anchorpose/train.hpp"
#include "../support.hpp"

using namespace anchorpose;

namespace {

/// A small training setup on a low-resolution camera: writes a dataset file
/// and returns a config pointed at it.
TrainConfig small_config(testsupport::TempDir& tmp, uint64_t seed, int n_images) {
  GenerateOptions opts;
  opts.camera = {60.0, 60.0, 32.0, 24.0, 64, 48};
  opts.n_people_min = 1;
  opts.n_people_max = 2;
  opts.depth_min_m = 3.0;
  opts.depth_max_m = 8.0;
  opts.occlusion_rate = 0.0;
  const auto data = generate_dataset(seed, n_images, opts, default_skeleton());
  const std::string path = tmp.file("data_" + std::to_string(seed) + ".jsonl");
  save_dataset(data, path);

  TrainConfig cfg;
  cfg.dataset_path = path;
  cfg.n_anchors = 2;
  cfg.stride = 8.0;
  cfg.total_steps = 10;
  cfg.lr0 = 0.005;
  cfg.batch_size = 1;
  cfg.seed = 42;
  return cfg;
}

}  // namespace

TEST_CASE("the polynomial schedule hits its closed-form values") {
  OptimizerState st;
  st.lr0 = 0.005;
  st.total_steps = 100;
  st.power = 0.9;
  CHECK(lr_at(st, 0) == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(lr_at(st, 100) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(lr_at(st, 50) == doctest::Approx(0.005 * std::pow(0.5, 0.9)).epsilon(1e-12));
  CHECK(lr_at(st, 25) == doctest::Approx(0.005 * std::pow(0.75, 0.9)).epsilon(1e-12));
  CHECK_THROWS_AS(lr_at(st, -1), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(st, 101), std::invalid_argument);
}

TEST_CASE("one momentum step follows the hand-unrolled update") {
  std::vector<double> p{1.0, 2.0};
  std::vector<double> g{0.5, -1.0};
  std::vector<double> v{0.0, 0.0};

  // Zero gradient and zero velocity change nothing.
  std::vector<double> zero{0.0, 0.0};
  sgd_step(p, zero, v, 0.1, 0.9);
  CHECK(p == std::vector<double>{1.0, 2.0});

  // Momentum 0 is plain gradient descent.
  sgd_step(p, g, v, 0.1, 0.0);
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(2.0 + 0.1 * 1.0).epsilon(1e-12));

  // Two steps with momentum: v accumulates, p follows.
  p = {0.0};
  v = {0.0};
  const std::vector<double> g1{1.0}, g2{2.0};
  sgd_step(p, g1, v, 0.1, 0.9);
  // v = 0.9*0 + 1 = 1, p = -0.1
  CHECK(v[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-12));
  sgd_step(p, g2, v, 0.2, 0.9);
  // v = 0.9*1 + 2 = 2.9, p = -0.1 - 0.2*2.9 = -0.68
  CHECK(v[0] == doctest::Approx(2.9).epsilon(1e-12));
  CHECK(p[0] == doctest::Approx(-0.68).epsilon(1e-12));

  std::vector<double> short_v{0.0};
  std::vector<double> p2{1.0, 2.0};
  CHECK_THROWS_AS(sgd_step(p2, g, short_v, 0.1, 0.9), std::invalid_argument);
}

TEST_CASE("the stateful step allocates velocity, applies the schedule, and counts") {
  OptimizerState st;
  st.lr0 = 0.5;
  st.total_steps = 2;
  st.power = 1.0;
  st.momentum = 0.0;
  std::vector<double> p{0.0};
  const std::vector<double> g{1.0};

  sgd_step(p, g, st);  // lr at step 0 = 0.5
  CHECK(st.velocity.size() == 1);
  CHECK(st.step == 1);
  CHECK(p[0] == doctest::Approx(-0.5).epsilon(1e-12));

  sgd_step(p, g, st);  // lr at step 1 = 0.25
  CHECK(st.step == 2);
  CHECK(p[0] == doctest::Approx(-0.75).epsilon(1e-12));

  // lr0 = 0 never moves the parameters.
  OptimizerState frozen;
  frozen.lr0 = 0.0;
  frozen.total_steps = 5;
  std::vector<double> q{3.0};
  for (int i = 0; i < 5; ++i) sgd_step(q, g, frozen);
  CHECK(q[0] == 3.0);
}

TEST_CASE("the direct predictor is a pure parameter lookup per scene") {
  const AnchorGrid grid = testsupport::small_grid(2, 2, 8.0, {{10.0, 12.0}});
  DirectPredictor pred(grid, 3, {3, 7});
  const int64_t cells = grid.cell_count();
  const size_t per_scene = static_cast<size_t>(cells) * (1 + 4 + 2 * 3 + 3 * 3);
  REQUIRE(pred.params().size() == 2 * per_scene);

  auto params = pred.params();
  for (size_t i = 0; i < params.size(); ++i) params[i] = static_cast<double>(i);

  SceneSample s7;
  s7.image_id = 7;
  const PredictionTensors out = pred.forward(s7);
  // Scene 7 is the second block: [cls | box | pose2d | pose3d].
  CHECK(out.cls_logits[0] == static_cast<double>(per_scene));
  CHECK(out.cls_logits[cells - 1] == static_cast<double>(per_scene + cells - 1));
  CHECK(out.box_offsets[0] == static_cast<double>(per_scene + cells));
  CHECK(out.pose2d[0] == static_cast<double>(per_scene + 5 * cells));
  CHECK(out.pose3d[0] == static_cast<double>(per_scene + 5 * cells + 2 * 3 * cells));

  // Backward accumulates the loss derivatives one-to-one into the block.
  LossGradients lg;
  lg.d_cls_logits.assign(cells, 1.0);
  lg.d_box_offsets.assign(cells * 4, 2.0);
  lg.d_pose2d.assign(cells * 2 * 3, 3.0);
  lg.d_pose3d.assign(cells * 3 * 3, 4.0);
  pred.zero_grads();
  pred.backward(s7, lg);
  pred.backward(s7, lg);  // accumulation, not overwrite
  auto grads = pred.grads();
  for (size_t i = 0; i < per_scene; ++i) CHECK(grads[i] == 0.0);
  CHECK(grads[per_scene] == 2.0);
  CHECK(grads[per_scene + cells] == 4.0);
  CHECK(grads[per_scene + 5 * cells] == 6.0);
  CHECK(grads[2 * per_scene - 1] == 8.0);

  SceneSample unknown;
  unknown.image_id = 99;
  CHECK_THROWS_AS(pred.forward(unknown), std::invalid_argument);
  CHECK_THROWS_AS(DirectPredictor(grid, 3, {3, 3}), std::invalid_argument);
}

TEST_CASE("config files parse every key and report bad lines") {
  testsupport::TempDir tmp;
  const std::string path = tmp.file("train.cfg");
  {
    std::ofstream out(path);
    out << "# a comment line\n"
        << "dataset = /tmp/data.jsonl\n"
        << "anchors= priors.json\n"
        << "n_anchors =3\n"
        << "stride = 4\n"
        << "grid_height = 12\n"
        << "grid_width = 16\n"
        << "total_steps = 250\n"
        << "lr0 = 0.01\n"
        << "momentum = 0.8\n"
        << "poly_power = 1.0\n"
        << "batch_size = 2\n"
        << "seed = 7\n"
        << "checkpoint_every = 50\n"
        << "checkpoint = ck.json\n"
        << "history = hist.jsonl\n"
        << "augment = true\n"
        << "augment_scale_min = 0.9\n"
        << "augment_scale_max = 1.1\n";
  }
  const TrainConfig cfg = parse_train_config(path);
  CHECK(cfg.dataset_path == "/tmp/data.jsonl");
  CHECK(cfg.anchors_path == "priors.json");
  CHECK(cfg.n_anchors == 3);
  CHECK(cfg.stride == 4.0);
  CHECK(cfg.grid_height == 12);
  CHECK(cfg.grid_width == 16);
  CHECK(cfg.total_steps == 250);
  CHECK(cfg.lr0 == 0.01);
  CHECK(cfg.momentum == 0.8);
  CHECK(cfg.poly_power == 1.0);
  CHECK(cfg.batch_size == 2);
  CHECK(cfg.seed == 7);
  CHECK(cfg.checkpoint_every == 50);
  CHECK(cfg.checkpoint_path == "ck.json");
  CHECK(cfg.history_path == "hist.jsonl");
  CHECK(cfg.augment_enabled);
  CHECK(cfg.augment_scale_min == 0.9);
  CHECK(cfg.augment_scale_max == 1.1);

  {
    std::ofstream out(tmp.file("bad.cfg"));
    out << "dataset = x\n"
        << "mystery_key = 1\n";
  }
  CHECK_THROWS_WITH_AS(parse_train_config(tmp.file("bad.cfg")),
                       doctest::Contains(":2"), std::invalid_argument);
  {
    std::ofstream out(tmp.file("bad2.cfg"));
    out << "lr0 = fast\n";
  }
  CHECK_THROWS_AS(parse_train_config(tmp.file("bad2.cfg")), std::invalid_argument);
  {
    std::ofstream out(tmp.file("bad3.cfg"));
    out << "no equals sign here\n";
  }
  CHECK_THROWS_AS(parse_train_config(tmp.file("bad3.cfg")), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config(tmp.file("nope.cfg")), IoError);

  TrainConfig c;
  CHECK_THROWS_AS(set_config_key(c, "augment", "maybe"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_key(c, "seed", "-1"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_key(c, "total_steps", "1e4"), std::invalid_argument);
}

TEST_CASE("history files round-trip and report malformed lines") {
  testsupport::TempDir tmp;
  std::vector<StepRecord> hist;
  for (int i = 0; i < 5; ++i) {
    StepRecord r;
    r.step = i + 1;
    r.lr = 0.005 * (5 - i);
    r.total = 10.0 / (i + 1);
    r.cls = 0.5 * i;
    r.loc = 0.25 * i;
    r.pose2d = 0.125 * i;
    r.pose3d = 0.0625 * i;
    r.raw_cls = r.cls + 1;
    r.raw_loc = r.loc + 1;
    r.raw_pose2d = r.pose2d + 1;
    r.raw_pose3d = r.pose3d + 1;
    r.n_positive = 3.5;
    r.s_min = -0.25 * i;
    hist.push_back(r);
  }
  const std::string path = tmp.file("hist.jsonl");
  save_history(hist, path);
  const std::vector<StepRecord> back = load_history(path);
  REQUIRE(back.size() == hist.size());
  for (size_t i = 0; i < hist.size(); ++i) {
    CHECK(back[i].step == hist[i].step);
    CHECK(back[i].lr == hist[i].lr);
    CHECK(back[i].total == hist[i].total);
    CHECK(back[i].cls == hist[i].cls);
    CHECK(back[i].loc == hist[i].loc);
    CHECK(back[i].pose2d == hist[i].pose2d);
    CHECK(back[i].pose3d == hist[i].pose3d);
    CHECK(back[i].raw_cls == hist[i].raw_cls);
    CHECK(back[i].raw_loc == hist[i].raw_loc);
    CHECK(back[i].raw_pose2d == hist[i].raw_pose2d);
    CHECK(back[i].raw_pose3d == hist[i].raw_pose3d);
    CHECK(back[i].n_positive == hist[i].n_positive);
    CHECK(back[i].s_min == hist[i].s_min);
  }

  {
    std::ofstream out(path, std::ios::app);
    out << "{oops\n";
  }
  CHECK_THROWS_WITH_AS(static_cast<void>(load_history(path)), doctest::Contains(":6"),
                       IoError);
  CHECK_THROWS_AS(static_cast<void>(load_history(tmp.file("gone.jsonl"))), IoError);
}

TEST_CASE("training is deterministic: same config, same bytes") {
  testsupport::TempDir tmp;
  TrainConfig cfg = small_config(tmp, 1, 4);
  cfg.total_steps = 6;
  cfg.batch_size = 2;
  cfg.checkpoint_path = tmp.file("ck.json");
  cfg.history_path = tmp.file("hist.jsonl");

  const TrainResult a = train(cfg);
  const std::string ck_a = testsupport::read_file(cfg.checkpoint_path);
  const std::string h_a = testsupport::read_file(cfg.history_path);

  const TrainResult b = train(cfg);
  CHECK(testsupport::read_file(cfg.checkpoint_path) == ck_a);
  CHECK(testsupport::read_file(cfg.history_path) == h_a);
  CHECK(checkpoint_to_json(a.checkpoint) == checkpoint_to_json(b.checkpoint));
  REQUIRE(a.history.size() == 6);

  // Augmentation stays deterministic too (per-step derived streams).
  cfg.augment_enabled = true;
  const TrainResult c = train(cfg);
  const TrainResult d = train(cfg);
  CHECK(checkpoint_to_json(c.checkpoint) == checkpoint_to_json(d.checkpoint));
  CHECK(!(checkpoint_to_json(c.checkpoint) == checkpoint_to_json(a.checkpoint)));
}

TEST_CASE("an interrupted run resumed from its checkpoint matches the straight run byte for byte") {
  testsupport::TempDir tmp;
  TrainConfig cfg = small_config(tmp, 2, 3);
  cfg.total_steps = 10;
  cfg.checkpoint_path = tmp.file("ck.json");
  cfg.history_path = tmp.file("hist.jsonl");

  train(cfg);
  const std::string full_ck = testsupport::read_file(cfg.checkpoint_path);
  const std::string full_hist = testsupport::read_file(cfg.history_path);

  // Stop after 5 of the 10 steps, then resume from the file.
  train(cfg, nullptr, 5);
  const std::string half_hist = testsupport::read_file(cfg.history_path);
  const Checkpoint half = load_checkpoint(cfg.checkpoint_path);
  CHECK(half.optimizer.step == 5);

  train(cfg, &half);
  CHECK(testsupport::read_file(cfg.checkpoint_path) == full_ck);
  CHECK(half_hist + testsupport::read_file(cfg.history_path) == full_hist);
}

TEST_CASE("a non-finite parameter aborts training with a numeric error") {
  testsupport::TempDir tmp;
  TrainConfig cfg = small_config(tmp, 3, 2);
  cfg.total_steps = 4;

  TrainResult r = train(cfg, nullptr, 1);
  r.checkpoint.predictor_params[0] = std::nan("");
  CHECK_THROWS_AS(train(cfg, &r.checkpoint), NumericError);
}

TEST_CASE("checkpoints round-trip through JSON and validate their contents") {
  testsupport::TempDir tmp;
  TrainConfig cfg = small_config(tmp, 4, 2);
  cfg.total_steps = 3;
  const TrainResult r = train(cfg);

  const std::string json = checkpoint_to_json(r.checkpoint);
  const Checkpoint back = checkpoint_from_json(json);
  CHECK(checkpoint_to_json(back) == json);
  CHECK(back.config == r.checkpoint.config);
  CHECK(back.grid.priors == r.checkpoint.grid.priors);
  CHECK(back.skeleton == r.checkpoint.skeleton);
  CHECK(back.image_ids == r.checkpoint.image_ids);
  CHECK(back.predictor_params == r.checkpoint.predictor_params);
  CHECK(back.weights == r.checkpoint.weights);
  CHECK(back.optimizer.velocity == r.checkpoint.optimizer.velocity);
  CHECK(back.optimizer.step == r.checkpoint.optimizer.step);

  const std::string path = tmp.file("ck.json");
  save_checkpoint(r.checkpoint, path);
  const Checkpoint loaded = load_checkpoint(path);
  CHECK(checkpoint_to_json(loaded) == json);
  CHECK_THROWS_AS(load_checkpoint(tmp.file("gone.json")), IoError);

  Checkpoint wrong_version = r.checkpoint;
  wrong_version.version = 2;
  CHECK_THROWS_AS(checkpoint_from_json(checkpoint_to_json(wrong_version)), IoError);

  // Rebuild the predictor and confirm the parameters made it across.
  const auto pred = make_predictor(loaded);
  CHECK(pred->type() == "direct");
  REQUIRE(pred->params().size() == loaded.predictor_params.size());
  CHECK(pred->params()[0] == loaded.predictor_params[0]);

  Checkpoint unknown_type = r.checkpoint;
  unknown_type.predictor_type = "transformer";
  CHECK_THROWS_AS(make_predictor(unknown_type), std::invalid_argument);
  Checkpoint wrong_count = r.checkpoint;
  wrong_count.predictor_params.pop_back();
  CHECK_THROWS_AS(make_predictor(wrong_count), std::invalid_argument);
}

TEST_CASE("training respects explicit grid settings and anchor files") {
  testsupport::TempDir tmp;
  TrainConfig cfg = small_config(tmp, 5, 2);
  cfg.total_steps = 2;
  cfg.grid_height = 5;
  cfg.grid_width = 7;
  AnchorSet priors;
  priors.priors = {{9.0, 17.0}, {20.0, 30.0}};
  save_anchor_set(priors, tmp.file("priors.json"));
  cfg.anchors_path = tmp.file("priors.json");

  const TrainResult r = train(cfg);
  CHECK(r.checkpoint.grid.height == 5);
  CHECK(r.checkpoint.grid.width == 7);
  CHECK(r.checkpoint.grid.priors == priors);

  // Default grid: ceil(frame / stride) of the first sample's camera.
  TrainConfig auto_cfg = small_config(tmp, 6, 2);
  auto_cfg.total_steps = 2;
  const TrainResult r2 = train(auto_cfg);
  CHECK(r2.checkpoint.grid.height == 6);  // ceil(48 / 8)
  CHECK(r2.checkpoint.grid.width == 8);   // ceil(64 / 8)

  TrainConfig bad = small_config(tmp, 7, 2);
  bad.total_steps = 0;
  CHECK_THROWS_AS(train(bad), std::invalid_argument);
  bad = small_config(tmp, 7, 2);
  bad.batch_size = 0;
  CHECK_THROWS_AS(train(bad), std::invalid_argument);
  bad = small_config(tmp, 7, 2);
  bad.dataset_path = tmp.file("missing.jsonl");
  CHECK_THROWS_AS(train(bad), IoError);
}

TEST_CASE("the loop overfits a tiny scene: losses fall, weights adapt") {
  testsupport::TempDir tmp;
  TrainConfig cfg = small_config(tmp, 8, 1);
  cfg.total_steps = 600;

  const TrainResult r = train(cfg);
  REQUIRE(r.history.size() == 600);
  const StepRecord& first = r.history.front();
  const StepRecord& last = r.history.back();

  CHECK(first.n_positive > 0.0);
  CHECK(last.total < first.total);
  CHECK(last.raw_loc < first.raw_loc);
  CHECK(last.raw_pose2d < first.raw_pose2d);
  CHECK(last.raw_pose3d < first.raw_pose3d);
  CHECK(last.raw_cls < first.raw_cls);
  CHECK(std::isfinite(last.s_min));
  // The automatic weights moved away from their neutral initialization.
  CHECK(last.s_min != 0.0);

  // Projected weights: every log-weight stays inside the documented bound,
  // and this strongly-overfit run actually reaches it (the 3D branch's loss
  // collapses, so its weight climbs until the projection holds it).
  const auto& s = r.checkpoint.weights.raw();
  const double s_lo = *std::min_element(s.begin(), s.end());
  const double s_hi = *std::max_element(s.begin(), s.end());
  CHECK(s_lo >= -kWeightLogClamp);
  CHECK(s_hi <= kWeightLogClamp);
  CHECK(s_hi == kWeightLogClamp);

  // The recorded learning rate follows the schedule.
  CHECK(first.lr == doctest::Approx(cfg.lr0).epsilon(1e-12));
  CHECK(r.history[299].lr ==
        doctest::Approx(cfg.lr0 * std::pow(1.0 - 299.0 / 600.0, 0.9)).epsilon(1e-12));
}
