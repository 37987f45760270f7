#include "anchorpose/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "anchorpose/errors.hpp"
#include "anchorpose/rng.hpp"

namespace anchorpose {

// ---------------------------------------------------------------------------
// DirectPredictor

DirectPredictor::DirectPredictor(AnchorGrid grid, int n_joints, std::vector<int64_t> image_ids)
    : grid_(std::move(grid)), n_joints_(n_joints), ids_(std::move(image_ids)) {
  if (grid_.height <= 0 || grid_.width <= 0 || grid_.n_anchors() <= 0 || n_joints_ <= 0)
    throw std::invalid_argument("DirectPredictor: empty grid or joint set");
  const size_t cells = static_cast<size_t>(grid_.cell_count());
  per_scene_ = cells * (1 + 4 + 2 * static_cast<size_t>(n_joints_) + 3 * n_joints_);
  for (size_t i = 0; i < ids_.size(); ++i)
    if (!index_.emplace(ids_[i], i).second)
      throw std::invalid_argument("DirectPredictor: duplicate image_id");
  params_.assign(per_scene_ * ids_.size(), 0.0);
  grads_.assign(params_.size(), 0.0);
}

size_t DirectPredictor::scene_offset(int64_t image_id) const {
  const auto it = index_.find(image_id);
  if (it == index_.end())
    throw std::invalid_argument("DirectPredictor: no parameters for image_id " +
                                std::to_string(image_id));
  return it->second * per_scene_;
}

PredictionTensors DirectPredictor::forward(const SceneSample& sample) {
  PredictionTensors out = PredictionTensors::zeros(grid_, n_joints_);
  const double* base = params_.data() + scene_offset(sample.image_id);
  const size_t cells = static_cast<size_t>(grid_.cell_count());
  std::copy_n(base, cells, out.cls_logits.data());
  std::copy_n(base + cells, cells * 4, out.box_offsets.data());
  std::copy_n(base + cells * 5, cells * 2 * n_joints_, out.pose2d.data());
  std::copy_n(base + cells * (5 + 2 * static_cast<size_t>(n_joints_)), cells * 3 * n_joints_,
              out.pose3d.data());
  return out;
}

void DirectPredictor::backward(const SceneSample& sample, const LossGradients& loss_grads) {
  double* base = grads_.data() + scene_offset(sample.image_id);
  const size_t cells = static_cast<size_t>(grid_.cell_count());
  if (loss_grads.d_cls_logits.size() != cells || loss_grads.d_box_offsets.size() != cells * 4 ||
      loss_grads.d_pose2d.size() != cells * 2 * static_cast<size_t>(n_joints_) ||
      loss_grads.d_pose3d.size() != cells * 3 * static_cast<size_t>(n_joints_))
    throw std::invalid_argument("DirectPredictor: gradient shapes disagree");
  double* p = base;
  for (double g : loss_grads.d_cls_logits) *p++ += g;
  for (double g : loss_grads.d_box_offsets) *p++ += g;
  for (double g : loss_grads.d_pose2d) *p++ += g;
  for (double g : loss_grads.d_pose3d) *p++ += g;
}

void DirectPredictor::zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

// ---------------------------------------------------------------------------
// Optimizer

double lr_at(const OptimizerState& state, int64_t t) {
  if (state.total_steps <= 0) throw std::invalid_argument("lr_at: total_steps must be positive");
  if (t < 0 || t > state.total_steps)
    throw std::invalid_argument("lr_at: step outside [0, total_steps]");
  const double frac = 1.0 - static_cast<double>(t) / static_cast<double>(state.total_steps);
  return state.lr0 * std::pow(frac, state.power);
}

void sgd_step(std::span<double> params, std::span<const double> grads,
              std::span<double> velocity, double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size())
    throw std::invalid_argument("sgd_step: parameter/gradient/velocity sizes disagree");
  for (size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

void sgd_step(std::span<double> params, std::span<const double> grads, OptimizerState& state) {
  if (state.velocity.empty()) state.velocity.assign(params.size(), 0.0);
  const double lr = lr_at(state, state.step);
  sgd_step(params, grads, std::span<double>(state.velocity), lr, state.momentum);
  ++state.step;
}

// ---------------------------------------------------------------------------
// Config

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad integer for " + key + ": '" + value + "'");
  }
}

uint64_t parse_uint(const std::string& key, const std::string& value) {
  try {
    // stoull would silently negate a leading minus; reject it instead.
    if (value.find('-') != std::string::npos) throw std::invalid_argument("");
    size_t pos = 0;
    const uint64_t v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad unsigned integer for " + key + ": '" + value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad number for " + key + ": '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": '" + value + "'");
}

}  // namespace

void set_config_key(TrainConfig& config, const std::string& key, const std::string& value) {
  if (key == "dataset") config.dataset_path = value;
  else if (key == "anchors") config.anchors_path = value;
  else if (key == "n_anchors") config.n_anchors = static_cast<int>(parse_int(key, value));
  else if (key == "stride") config.stride = parse_double(key, value);
  else if (key == "grid_height") config.grid_height = static_cast<int>(parse_int(key, value));
  else if (key == "grid_width") config.grid_width = static_cast<int>(parse_int(key, value));
  else if (key == "total_steps") config.total_steps = parse_int(key, value);
  else if (key == "lr0") config.lr0 = parse_double(key, value);
  else if (key == "momentum") config.momentum = parse_double(key, value);
  else if (key == "poly_power") config.poly_power = parse_double(key, value);
  else if (key == "batch_size") config.batch_size = static_cast<int>(parse_int(key, value));
  else if (key == "seed") config.seed = parse_uint(key, value);
  else if (key == "checkpoint_every") config.checkpoint_every = parse_int(key, value);
  else if (key == "checkpoint") config.checkpoint_path = value;
  else if (key == "history") config.history_path = value;
  else if (key == "augment") config.augment_enabled = parse_bool(key, value);
  else if (key == "augment_scale_min") config.augment_scale_min = parse_double(key, value);
  else if (key == "augment_scale_max") config.augment_scale_max = parse_double(key, value);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

TrainConfig parse_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  TrainConfig config;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: " + path + ":" + std::to_string(line_no) +
                                  ": expected key = value");
    try {
      set_config_key(config, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

// ---------------------------------------------------------------------------
// History

void save_history(const std::vector<StepRecord>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& r : history) {
    nlohmann::json j;
    j["step"] = r.step;
    j["lr"] = r.lr;
    j["total"] = r.total;
    j["cls"] = r.cls;
    j["loc"] = r.loc;
    j["pose2d"] = r.pose2d;
    j["pose3d"] = r.pose3d;
    j["raw_cls"] = r.raw_cls;
    j["raw_loc"] = r.raw_loc;
    j["raw_pose2d"] = r.raw_pose2d;
    j["raw_pose3d"] = r.raw_pose3d;
    j["n_positive"] = r.n_positive;
    j["s_min"] = r.s_min;
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<StepRecord> load_history(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<StepRecord> history;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      StepRecord r;
      r.step = j.at("step").get<int64_t>();
      r.lr = j.at("lr").get<double>();
      r.total = j.at("total").get<double>();
      r.cls = j.at("cls").get<double>();
      r.loc = j.at("loc").get<double>();
      r.pose2d = j.at("pose2d").get<double>();
      r.pose3d = j.at("pose3d").get<double>();
      r.raw_cls = j.at("raw_cls").get<double>();
      r.raw_loc = j.at("raw_loc").get<double>();
      r.raw_pose2d = j.at("raw_pose2d").get<double>();
      r.raw_pose3d = j.at("raw_pose3d").get<double>();
      r.n_positive = j.at("n_positive").get<double>();
      r.s_min = j.at("s_min").get<double>();
      history.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return history;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["dataset"] = c.dataset_path;
  j["anchors"] = c.anchors_path;
  j["n_anchors"] = c.n_anchors;
  j["stride"] = c.stride;
  j["grid_height"] = c.grid_height;
  j["grid_width"] = c.grid_width;
  j["total_steps"] = c.total_steps;
  j["lr0"] = c.lr0;
  j["momentum"] = c.momentum;
  j["poly_power"] = c.poly_power;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["checkpoint"] = c.checkpoint_path;
  j["history"] = c.history_path;
  j["augment"] = c.augment_enabled;
  j["augment_scale_min"] = c.augment_scale_min;
  j["augment_scale_max"] = c.augment_scale_max;
  return j;
}

TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.dataset_path = j.at("dataset").get<std::string>();
  c.anchors_path = j.at("anchors").get<std::string>();
  c.n_anchors = j.at("n_anchors").get<int>();
  c.stride = j.at("stride").get<double>();
  c.grid_height = j.at("grid_height").get<int>();
  c.grid_width = j.at("grid_width").get<int>();
  c.total_steps = j.at("total_steps").get<int64_t>();
  c.lr0 = j.at("lr0").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.poly_power = j.at("poly_power").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
  c.checkpoint_path = j.at("checkpoint").get<std::string>();
  c.history_path = j.at("history").get<std::string>();
  c.augment_enabled = j.at("augment").get<bool>();
  c.augment_scale_min = j.at("augment_scale_min").get<double>();
  c.augment_scale_max = j.at("augment_scale_max").get<double>();
  return c;
}

}  // namespace

std::string checkpoint_to_json(const Checkpoint& ck) {
  nlohmann::json j;
  j["version"] = ck.version;
  j["config"] = config_to_json(ck.config);
  j["grid"] = {{"height", ck.grid.height},
               {"width", ck.grid.width},
               {"stride", ck.grid.stride}};
  j["grid"]["priors"] = nlohmann::json::array();
  for (const auto& [w, h] : ck.grid.priors.priors) j["grid"]["priors"].push_back({w, h});
  j["skeleton"] = {{"n_joints", ck.skeleton.n_joints},
                   {"root_index", ck.skeleton.root_index},
                   {"joint_names", ck.skeleton.joint_names}};
  j["skeleton"]["edges"] = nlohmann::json::array();
  for (const auto& [p, c] : ck.skeleton.edges) j["skeleton"]["edges"].push_back({p, c});
  j["predictor"] = {{"type", ck.predictor_type},
                    {"image_ids", ck.image_ids},
                    {"params", ck.predictor_params}};
  j["loss_weights"] = {{"n_anchors", ck.weights.n_anchors()},
                       {"n_joints", ck.weights.n_joints()},
                       {"s", ck.weights.raw()}};
  j["optimizer"] = {{"lr0", ck.optimizer.lr0},
                    {"total_steps", ck.optimizer.total_steps},
                    {"power", ck.optimizer.power},
                    {"momentum", ck.optimizer.momentum},
                    {"step", ck.optimizer.step},
                    {"velocity", ck.optimizer.velocity}};
  return j.dump();
}

Checkpoint checkpoint_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: invalid JSON: ") + e.what());
  }
  try {
    Checkpoint ck;
    ck.version = j.at("version").get<int>();
    if (ck.version != 1)
      throw IoError("checkpoint: unsupported version " + std::to_string(ck.version));
    ck.config = config_from_json(j.at("config"));
    ck.grid.height = j.at("grid").at("height").get<int>();
    ck.grid.width = j.at("grid").at("width").get<int>();
    ck.grid.stride = j.at("grid").at("stride").get<double>();
    for (const auto& p : j.at("grid").at("priors"))
      ck.grid.priors.priors.emplace_back(p[0].get<double>(), p[1].get<double>());
    ck.skeleton.n_joints = j.at("skeleton").at("n_joints").get<int>();
    ck.skeleton.root_index = j.at("skeleton").at("root_index").get<int>();
    ck.skeleton.joint_names =
        j.at("skeleton").at("joint_names").get<std::vector<std::string>>();
    for (const auto& e : j.at("skeleton").at("edges"))
      ck.skeleton.edges.emplace_back(e[0].get<int>(), e[1].get<int>());
    ck.skeleton.validate();
    ck.predictor_type = j.at("predictor").at("type").get<std::string>();
    ck.image_ids = j.at("predictor").at("image_ids").get<std::vector<int64_t>>();
    ck.predictor_params = j.at("predictor").at("params").get<std::vector<double>>();
    const int na = j.at("loss_weights").at("n_anchors").get<int>();
    const int nk = j.at("loss_weights").at("n_joints").get<int>();
    ck.weights = LossWeights(na, nk);
    const auto s = j.at("loss_weights").at("s").get<std::vector<double>>();
    if (s.size() != ck.weights.raw().size())
      throw IoError("checkpoint: loss-weight vector has the wrong length");
    ck.weights.raw() = s;
    ck.optimizer.lr0 = j.at("optimizer").at("lr0").get<double>();
    ck.optimizer.total_steps = j.at("optimizer").at("total_steps").get<int64_t>();
    ck.optimizer.power = j.at("optimizer").at("power").get<double>();
    ck.optimizer.momentum = j.at("optimizer").at("momentum").get<double>();
    ck.optimizer.step = j.at("optimizer").at("step").get<int64_t>();
    ck.optimizer.velocity = j.at("optimizer").at("velocity").get<std::vector<double>>();
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << checkpoint_to_json(checkpoint) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_json(buf.str());
}

std::unique_ptr<Predictor> make_predictor(const Checkpoint& checkpoint) {
  if (checkpoint.predictor_type != "direct")
    throw std::invalid_argument("unknown predictor type: " + checkpoint.predictor_type);
  auto predictor = std::make_unique<DirectPredictor>(checkpoint.grid,
                                                     checkpoint.skeleton.n_joints,
                                                     checkpoint.image_ids);
  if (predictor->params().size() != checkpoint.predictor_params.size())
    throw std::invalid_argument("checkpoint: predictor parameter count disagrees with its shape");
  std::copy(checkpoint.predictor_params.begin(), checkpoint.predictor_params.end(),
            predictor->params().begin());
  return predictor;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

const char* first_nonfinite_term(const LossBreakdown& b) {
  if (!std::isfinite(b.cls)) return "cls";
  if (!std::isfinite(b.loc)) return "loc";
  if (!std::isfinite(b.pose2d)) return "pose2d";
  if (!std::isfinite(b.pose3d)) return "pose3d";
  if (!std::isfinite(b.total)) return "total";
  return nullptr;
}

std::string breakdown_dump(const LossBreakdown& b) {
  std::ostringstream s;
  s << "cls=" << b.cls << " loc=" << b.loc << " pose2d=" << b.pose2d << " pose3d=" << b.pose3d
    << " total=" << b.total << " raw_cls=" << b.raw_cls << " raw_loc=" << b.raw_loc
    << " raw_pose2d=" << b.raw_pose2d << " raw_pose3d=" << b.raw_pose3d
    << " n_positive=" << b.n_positive;
  return s.str();
}

}  // namespace

TrainResult train(const TrainConfig& config, const Checkpoint* resume,
                  int64_t stop_after_steps) {
  if (config.total_steps <= 0) throw std::invalid_argument("train: total_steps must be positive");
  if (config.batch_size <= 0) throw std::invalid_argument("train: batch_size must be positive");
  if (config.stride <= 0.0) throw std::invalid_argument("train: stride must be positive");

  const std::vector<SceneSample> samples = load_dataset(config.dataset_path);
  if (samples.empty()) throw std::invalid_argument("train: empty dataset");
  const Skeleton& skeleton = resume ? resume->skeleton : default_skeleton();
  for (const auto& sample : samples)
    for (const auto& pose : sample.scene.poses3d)
      if (static_cast<int>(pose.size()) != skeleton.n_joints)
        throw std::invalid_argument("train: dataset joint count disagrees with the skeleton");

  // Grid and anchor priors.
  AnchorGrid grid;
  if (resume) {
    grid = resume->grid;
  } else {
    if (config.anchors_path.empty()) {
      std::vector<Box2D> boxes;
      for (const auto& sample : samples)
        boxes.insert(boxes.end(), sample.scene.boxes.begin(), sample.scene.boxes.end());
      if (boxes.empty()) throw std::invalid_argument("train: dataset contains no people");
      std::set<std::pair<double, double>> distinct;
      for (const auto& b : boxes) distinct.emplace(b.width(), b.height());
      const int k = std::min<int>(config.n_anchors, static_cast<int>(distinct.size()));
      grid.priors = cluster_anchors(boxes, k, 100, config.seed);
    } else {
      grid.priors = load_anchor_set(config.anchors_path);
    }
    grid.stride = config.stride;
    grid.height = config.grid_height > 0
                      ? config.grid_height
                      : static_cast<int>(std::ceil(samples[0].camera.height / config.stride));
    grid.width = config.grid_width > 0
                     ? config.grid_width
                     : static_cast<int>(std::ceil(samples[0].camera.width / config.stride));
  }

  std::vector<int64_t> ids;
  ids.reserve(samples.size());
  for (const auto& sample : samples) ids.push_back(sample.image_id);

  DirectPredictor predictor(grid, skeleton.n_joints, ids);
  LossWeights weights(grid.n_anchors(), skeleton.n_joints);
  OptimizerState state;
  state.lr0 = config.lr0;
  state.total_steps = config.total_steps;
  state.power = config.poly_power;
  state.momentum = config.momentum;
  const size_t n_pred = predictor.params().size();
  const size_t n_weights = weights.raw().size();
  state.velocity.assign(n_pred + n_weights, 0.0);

  if (resume) {
    if (resume->image_ids != ids)
      throw std::invalid_argument("train: checkpoint image ids disagree with the dataset");
    if (resume->predictor_params.size() != n_pred)
      throw std::invalid_argument("train: checkpoint parameter count disagrees");
    if (resume->weights.raw().size() != n_weights)
      throw std::invalid_argument("train: checkpoint loss-weight count disagrees");
    if (resume->optimizer.velocity.size() != state.velocity.size())
      throw std::invalid_argument("train: checkpoint velocity size disagrees");
    std::copy(resume->predictor_params.begin(), resume->predictor_params.end(),
              predictor.params().begin());
    weights = resume->weights;
    state.velocity = resume->optimizer.velocity;
    state.step = resume->optimizer.step;
  }

  // Per-scene match results never change unless augmentation perturbs the
  // scene, so cache them for the common case.
  std::vector<MatchResult> match_cache;
  if (!config.augment_enabled) {
    match_cache.reserve(samples.size());
    for (const auto& sample : samples) match_cache.push_back(match(grid, sample.scene));
  }

  const auto make_checkpoint = [&]() {
    Checkpoint ck;
    ck.config = config;
    ck.grid = grid;
    ck.skeleton = skeleton;
    ck.predictor_type = predictor.type();
    ck.image_ids = ids;
    ck.predictor_params.assign(predictor.params().begin(), predictor.params().end());
    ck.weights = weights;
    ck.optimizer = state;
    return ck;
  };

  const int64_t end_step = stop_after_steps < 0
                               ? config.total_steps
                               : std::min(config.total_steps, stop_after_steps);

  TrainResult result;
  if (end_step > state.step) result.history.reserve(static_cast<size_t>(end_step - state.step));
  std::vector<double> weight_grads(n_weights);

  for (int64_t t = state.step; t < end_step; ++t) {
    const double lr = lr_at(state, t);
    predictor.zero_grads();
    std::fill(weight_grads.begin(), weight_grads.end(), 0.0);

    StepRecord rec;
    rec.step = t;
    rec.lr = lr;
    const double inv_batch = 1.0 / config.batch_size;

    for (int b = 0; b < config.batch_size; ++b) {
      const size_t idx = static_cast<size_t>(
          (t * config.batch_size + b) % static_cast<int64_t>(samples.size()));
      SceneSample augmented;
      const SceneSample* scene_ptr = &samples[idx];
      MatchResult local_match;
      const MatchResult* match_ptr;
      if (config.augment_enabled) {
        const uint64_t step_seed = splitmix64(
            config.seed ^ (0x9e3779b97f4a7c15ULL *
                           static_cast<uint64_t>(t * config.batch_size + b + 1)));
        augmented = augment(samples[idx], step_seed,
                            {config.augment_scale_min, config.augment_scale_max}, true);
        scene_ptr = &augmented;
        local_match = match(grid, augmented.scene);
        match_ptr = &local_match;
      } else {
        match_ptr = &match_cache[idx];
      }

      const PredictionTensors pred = predictor.forward(*scene_ptr);
      const LossGradients g = gradients(pred, *match_ptr, grid, skeleton, weights);
      if (const char* term = first_nonfinite_term(g.breakdown))
        throw NumericError("train: non-finite " + std::string(term) + " at step " +
                           std::to_string(t) + " (image " +
                           std::to_string(scene_ptr->image_id) + "): " +
                           breakdown_dump(g.breakdown));

      predictor.backward(*scene_ptr, g);
      for (size_t i = 0; i < n_weights; ++i) weight_grads[i] += g.d_weights[i];

      rec.total += g.breakdown.total * inv_batch;
      rec.cls += g.breakdown.cls * inv_batch;
      rec.loc += g.breakdown.loc * inv_batch;
      rec.pose2d += g.breakdown.pose2d * inv_batch;
      rec.pose3d += g.breakdown.pose3d * inv_batch;
      rec.raw_cls += g.breakdown.raw_cls * inv_batch;
      rec.raw_loc += g.breakdown.raw_loc * inv_batch;
      rec.raw_pose2d += g.breakdown.raw_pose2d * inv_batch;
      rec.raw_pose3d += g.breakdown.raw_pose3d * inv_batch;
      rec.n_positive += g.breakdown.n_positive * inv_batch;
    }

    if (config.batch_size > 1) {
      for (double& g : predictor.grads()) g *= inv_batch;
      for (double& g : weight_grads) g *= inv_batch;
    }

    sgd_step(predictor.params(), predictor.grads(),
             std::span<double>(state.velocity.data(), n_pred), lr, state.momentum);
    sgd_step(std::span<double>(weights.raw()),
             std::span<const double>(weight_grads),
             std::span<double>(state.velocity.data() + n_pred, n_weights), lr, state.momentum);
    // Projected step for the log-weights: without the bound, a branch whose
    // loss fits exactly (possible with a direct parameterization) drives its
    // weight toward the runaway stationary point s = -ln(loss) -> inf, and
    // the amplified gradients blow the branch up. Inside the bound the
    // dynamics are the plain SGD update.
    for (double& s : weights.raw()) s = std::clamp(s, -kWeightLogClamp, kWeightLogClamp);
    state.step = t + 1;

    rec.s_min = *std::min_element(weights.raw().begin(), weights.raw().end());
    result.history.push_back(rec);

    if (!config.checkpoint_path.empty() && config.checkpoint_every > 0 &&
        (t + 1) % config.checkpoint_every == 0 && t + 1 < end_step)
      save_checkpoint(make_checkpoint(), config.checkpoint_path);
  }

  result.checkpoint = make_checkpoint();
  if (!config.checkpoint_path.empty())
    save_checkpoint(result.checkpoint, config.checkpoint_path);
  if (!config.history_path.empty()) save_history(result.history, config.history_path);
  return result;
}

}  // namespace anchorpose
