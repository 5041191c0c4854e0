// Command-line front end: simulate -> fusion checks -> track -> train ->
// predict -> eval, plus per-stage benchmarks. All outputs are deterministic
// for a fixed seed and config; no command mutates its inputs.
//
// Exit codes: 0 ok, 1 validation error (bad config/flags/inputs),
// 2 runtime error (I/O failures, internal check failures).

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmp/dataset.hpp"
#include "mmp/fusion.hpp"
#include "mmp/mda.hpp"
#include "mmp/metrics.hpp"
#include "mmp/serialization.hpp"
#include "mmp/simulator.hpp"
#include "mmp/ssm.hpp"
#include "mmp/tracker.hpp"
#include "mmp/trajpred.hpp"
#include "mmp/trajpred_train.hpp"

namespace {

using namespace mmp;

// ---------------------------------------------------------------------------
// Deterministic formatting

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Flat key-value config

struct AppConfig {
  std::uint64_t seed = 42;

  // scenario
  int agents = 5;
  int frames = 300;
  double rate_hz = 10.0;
  bool ego_moving = false;

  // detection noise
  double sigma_pos = 0.1;
  double sigma_yaw = 0.0;
  double sigma_size = 0.0;
  double fp_rate = 0.02;
  double fn_rate = 0.02;

  // lidar
  double range_sigma = 0.01;

  // tracker
  TrackerConfig tracker;

  // predictor
  TrajConfig traj;

  // training
  OptimizerSettings opt = [] {
    OptimizerSettings o;
    o.steps = 300;  // keeps the end-to-end reference run under the 2-minute budget
    o.learning_rate = 1e-3;
    return o;
  }();
  int train_anchor_stride = 5;

  // prediction
  int predict_anchor_stride = 10;

  // eval
  double match_distance = 2.0;

  // fusion diagnostics
  int fusion_frames = 3;
  int group_size = 256;
  int window_x = 4, window_y = 4, window_z = 4;
  double grid_cell = 0.4;
  double grid_half_extent = 25.6;
  int feature_dim = 32;

  // bench
  int bench_warmup = 3;
  int bench_reps = 30;
};

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

double parse_double(const std::string& path, const std::string& key, const std::string& v) {
  size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (...) {
    throw std::invalid_argument("config " + path + ": field '" + key + "' is not a number: " + v);
  }
  if (pos != v.size())
    throw std::invalid_argument("config " + path + ": field '" + key + "' is not a number: " + v);
  return out;
}

long long parse_int(const std::string& path, const std::string& key, const std::string& v) {
  size_t pos = 0;
  long long out;
  try {
    out = std::stoll(v, &pos);
  } catch (...) {
    throw std::invalid_argument("config " + path + ": field '" + key + "' is not an integer: " + v);
  }
  if (pos != v.size())
    throw std::invalid_argument("config " + path + ": field '" + key + "' is not an integer: " + v);
  return out;
}

bool parse_bool(const std::string& path, const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config " + path + ": field '" + key + "' must be true or false: " + v);
}

/// Loads a flat "key = value" document; '#' starts a comment. Unknown keys
/// are rejected with the offending path and field named.
void load_config(const std::string& path, AppConfig& c) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config " + path + ": cannot open file");
  const std::map<std::string, std::function<void(const std::string&)>> setters = {
      {"seed", [&](const std::string& v) { c.seed = static_cast<std::uint64_t>(parse_int(path, "seed", v)); }},
      {"scenario.agents", [&](const std::string& v) { c.agents = static_cast<int>(parse_int(path, "scenario.agents", v)); }},
      {"scenario.frames", [&](const std::string& v) { c.frames = static_cast<int>(parse_int(path, "scenario.frames", v)); }},
      {"scenario.rate_hz", [&](const std::string& v) { c.rate_hz = parse_double(path, "scenario.rate_hz", v); }},
      {"scenario.ego_moving", [&](const std::string& v) { c.ego_moving = parse_bool(path, "scenario.ego_moving", v); }},
      {"noise.sigma_pos", [&](const std::string& v) { c.sigma_pos = parse_double(path, "noise.sigma_pos", v); }},
      {"noise.sigma_yaw", [&](const std::string& v) { c.sigma_yaw = parse_double(path, "noise.sigma_yaw", v); }},
      {"noise.sigma_size", [&](const std::string& v) { c.sigma_size = parse_double(path, "noise.sigma_size", v); }},
      {"noise.fp_rate", [&](const std::string& v) { c.fp_rate = parse_double(path, "noise.fp_rate", v); }},
      {"noise.fn_rate", [&](const std::string& v) { c.fn_rate = parse_double(path, "noise.fn_rate", v); }},
      {"lidar.range_sigma", [&](const std::string& v) { c.range_sigma = parse_double(path, "lidar.range_sigma", v); }},
      {"tracker.birth_hits", [&](const std::string& v) { c.tracker.birth_hits = static_cast<int>(parse_int(path, "tracker.birth_hits", v)); }},
      {"tracker.death_misses", [&](const std::string& v) { c.tracker.death_misses = static_cast<int>(parse_int(path, "tracker.death_misses", v)); }},
      {"tracker.gate_stage1", [&](const std::string& v) { c.tracker.gate_stage1 = parse_double(path, "tracker.gate_stage1", v); }},
      {"tracker.gate_stage2", [&](const std::string& v) { c.tracker.gate_stage2 = parse_double(path, "tracker.gate_stage2", v); }},
      {"tracker.greedy", [&](const std::string& v) { c.tracker.greedy = parse_bool(path, "tracker.greedy", v); }},
      {"tracker.parallel", [&](const std::string& v) { c.tracker.parallel = parse_bool(path, "tracker.parallel", v); }},
      {"predictor.t_obs", [&](const std::string& v) { c.traj.t_obs = static_cast<int>(parse_int(path, "predictor.t_obs", v)); }},
      {"predictor.t_pred", [&](const std::string& v) { c.traj.t_pred = static_cast<int>(parse_int(path, "predictor.t_pred", v)); }},
      {"predictor.modes", [&](const std::string& v) { c.traj.modes = static_cast<int>(parse_int(path, "predictor.modes", v)); }},
      {"predictor.embed_dim", [&](const std::string& v) { c.traj.embed_dim = static_cast<int>(parse_int(path, "predictor.embed_dim", v)); }},
      {"predictor.layers", [&](const std::string& v) { c.traj.decoder_layers = static_cast<int>(parse_int(path, "predictor.layers", v)); }},
      {"predictor.heads", [&](const std::string& v) { c.traj.attn_heads = static_cast<int>(parse_int(path, "predictor.heads", v)); }},
      {"predictor.ffn_hidden", [&](const std::string& v) { c.traj.ffn_hidden = static_cast<int>(parse_int(path, "predictor.ffn_hidden", v)); }},
      {"predictor.k_max", [&](const std::string& v) { c.traj.k_max = static_cast<int>(parse_int(path, "predictor.k_max", v)); }},
      {"predictor.lambda_score", [&](const std::string& v) { c.traj.lambda_score = parse_double(path, "predictor.lambda_score", v); }},
      {"train.learning_rate", [&](const std::string& v) { c.opt.learning_rate = parse_double(path, "train.learning_rate", v); }},
      {"train.batch_size", [&](const std::string& v) { c.opt.batch_size = static_cast<int>(parse_int(path, "train.batch_size", v)); }},
      {"train.steps", [&](const std::string& v) { c.opt.steps = static_cast<int>(parse_int(path, "train.steps", v)); }},
      {"train.class_balanced", [&](const std::string& v) { c.opt.class_balanced = parse_bool(path, "train.class_balanced", v); }},
      {"train.parallel", [&](const std::string& v) { c.opt.parallel = parse_bool(path, "train.parallel", v); }},
      {"train.anchor_stride", [&](const std::string& v) { c.train_anchor_stride = static_cast<int>(parse_int(path, "train.anchor_stride", v)); }},
      {"predict.anchor_stride", [&](const std::string& v) { c.predict_anchor_stride = static_cast<int>(parse_int(path, "predict.anchor_stride", v)); }},
      {"eval.match_distance", [&](const std::string& v) { c.match_distance = parse_double(path, "eval.match_distance", v); }},
      {"fusion.frames", [&](const std::string& v) { c.fusion_frames = static_cast<int>(parse_int(path, "fusion.frames", v)); }},
      {"fusion.group_size", [&](const std::string& v) { c.group_size = static_cast<int>(parse_int(path, "fusion.group_size", v)); }},
      {"fusion.window_x", [&](const std::string& v) { c.window_x = static_cast<int>(parse_int(path, "fusion.window_x", v)); }},
      {"fusion.window_y", [&](const std::string& v) { c.window_y = static_cast<int>(parse_int(path, "fusion.window_y", v)); }},
      {"fusion.window_z", [&](const std::string& v) { c.window_z = static_cast<int>(parse_int(path, "fusion.window_z", v)); }},
      {"fusion.grid_cell", [&](const std::string& v) { c.grid_cell = parse_double(path, "fusion.grid_cell", v); }},
      {"fusion.grid_half_extent", [&](const std::string& v) { c.grid_half_extent = parse_double(path, "fusion.grid_half_extent", v); }},
      {"fusion.feature_dim", [&](const std::string& v) { c.feature_dim = static_cast<int>(parse_int(path, "fusion.feature_dim", v)); }},
      {"bench.warmup", [&](const std::string& v) { c.bench_warmup = static_cast<int>(parse_int(path, "bench.warmup", v)); }},
      {"bench.reps", [&](const std::string& v) { c.bench_reps = static_cast<int>(parse_int(path, "bench.reps", v)); }},
  };
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config " + path + ": line " + std::to_string(lineno) +
                                  " is not 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end())
      throw std::invalid_argument("config " + path + ": unknown field '" + key + "'");
    it->second(value);
  }
  if (c.frames < 1) throw std::invalid_argument("config " + path + ": field 'scenario.frames' must be >= 1");
  if (c.agents < 1) throw std::invalid_argument("config " + path + ": field 'scenario.agents' must be >= 1");
}

// ---------------------------------------------------------------------------
// Reference scenario

ScenarioConfig reference_scenario(const AppConfig& c) {
  ScenarioConfig sc;
  sc.rate_hz = c.rate_hz;
  // Five base agents: two looping cars, two pedestrians, one cyclist, all
  // staying within ~+-25 m of the origin. Larger counts cycle with offsets.
  std::vector<AgentSpec> base(5);
  base[0].cls = AgentClass::Car;
  base[0].position = Vec2(-14, -6);
  base[0].yaw = 0.0;
  base[0].behavior = BehaviorKind::Unicycle;
  base[0].schedule = {{3.0, 0.0, 4.0}, {3.0, 0.35, 4.5}};
  base[0].size = Vec3(4.0, 1.8, 1.5);

  base[1].cls = AgentClass::Car;
  base[1].position = Vec2(13, 8);
  base[1].yaw = M_PI;
  base[1].behavior = BehaviorKind::Unicycle;
  base[1].schedule = {{2.5, 0.0, 4.0}, {2.5, 0.35, 4.5}};
  base[1].size = Vec3(4.2, 1.9, 1.6);

  base[2].cls = AgentClass::Pedestrian;
  base[2].behavior = BehaviorKind::Waypoints;
  base[2].position = Vec2(-5, -5);
  base[2].waypoints = {{-5, -5}, {5, -5}, {5, 5}, {-5, 5}};
  base[2].waypoint_speed = 1.2;

  base[3].cls = AgentClass::Pedestrian;
  base[3].position = Vec2(8, -10);
  base[3].behavior = BehaviorKind::Unicycle;
  base[3].schedule = {{1.0, 0.2, 5.0}, {1.0, -0.2, 5.0}};

  base[4].cls = AgentClass::Cyclist;
  base[4].position = Vec2(-10, 10);
  base[4].behavior = BehaviorKind::Unicycle;
  base[4].schedule = {{2.0, 0.3, 5.3}, {2.0, 0.0, 3.0}};
  base[4].size = Vec3(1.8, 0.6, 1.6);

  for (int i = 0; i < c.agents; ++i) {
    AgentSpec a = base[i % 5];
    const double shift = 2.5 * (i / 5);
    a.position += Vec2(shift, -shift);
    for (Vec2& w : a.waypoints) w += Vec2(shift, -shift);
    sc.agents.push_back(std::move(a));
  }
  if (c.ego_moving) sc.ego_schedule = {{0.5, 0.05, 1.0}};
  return sc;
}

std::uint64_t frame_seed(std::uint64_t seed, int frame) {
  return seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(frame + 1));
}

// ---------------------------------------------------------------------------
// SVG plotting

struct Series {
  std::string color;
  std::vector<std::pair<double, double>> points;
};

/// Minimal line chart: fixed 640x420 canvas, axes with min/max labels.
void write_svg_chart(const std::string& path, const std::string& title,
                     const std::vector<Series>& series) {
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const Series& s : series)
    for (const auto& [x, y] : s.points) {
      if (first) { xmin = xmax = x; ymin = ymax = y; first = false; }
      xmin = std::min(xmin, x); xmax = std::max(xmax, x);
      ymin = std::min(ymin, y); ymax = std::max(ymax, y);
    }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double W = 640, H = 420, L = 60, R = 20, T = 40, B = 40;
  const auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" "
         "viewBox=\"0 0 640 420\">\n";
  out << "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n";
  out << "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << title
      << "</text>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\" font-size=\"11\">" << fmt6(xmin)
      << "</text>\n";
  out << "<text x=\"" << W - R << "\" y=\"" << H - B + 16
      << "\" text-anchor=\"end\" font-size=\"11\">" << fmt6(xmax) << "</text>\n";
  out << "<text x=\"" << L - 4 << "\" y=\"" << H - B << "\" text-anchor=\"end\" font-size=\"11\">"
      << fmt6(ymin) << "</text>\n";
  out << "<text x=\"" << L - 4 << "\" y=\"" << T + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
      << fmt6(ymax) << "</text>\n";
  for (const Series& s : series) {
    out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : s.points) out << fmt6(px(x)) << "," << fmt6(py(y)) << " ";
    out << "\"/>\n";
  }
  out << "</svg>\n";
}

// ---------------------------------------------------------------------------
// CSV helpers

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("missing input file " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell);
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Validation-level existence check so missing inputs exit 1, not 2.
void require_input(const std::string& path, const std::string& field) {
  if (!std::filesystem::exists(path))
    throw std::invalid_argument("missing input " + path + " (field '" + field + "')");
}

// ---------------------------------------------------------------------------
// Ground-truth trajectory table from a dataset

struct GtTable {
  // agent id -> frame -> (position, class)
  std::map<int, std::map<int, std::pair<Vec2, int>>> agents;
  std::vector<Vec2> ego;  // per frame
  int frames = 0;
};

GtTable load_gt(const DatasetReader& reader) {
  GtTable gt;
  gt.frames = reader.frames();
  for (int f = 0; f < reader.frames(); ++f) {
    const FrameRecord fr = reader.frame(f);
    gt.ego.push_back(Vec2(fr.ego_pose.translation.x(), fr.ego_pose.translation.y()));
    for (const GroundTruthBox& b : fr.boxes)
      gt.agents[b.agent_id][f] = {Vec2(b.box.center.x(), b.box.center.y()), b.box.class_id};
  }
  return gt;
}

// ---------------------------------------------------------------------------
// Shared artifact I/O

struct TrackRow {
  int frame, id, class_id;
  double x, y, z, yaw, l, w, h, vx, vy;
};

void write_tracks(const std::string& path, const std::vector<TrackRecord>& stream) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "frame,id,class_id,x,y,z,yaw,l,w,h,vx,vy\n";
  for (const TrackRecord& r : stream)
    out << r.frame << "," << r.id << "," << r.class_id << "," << fmt(r.box.center.x()) << ","
        << fmt(r.box.center.y()) << "," << fmt(r.box.center.z()) << "," << fmt(r.box.yaw) << ","
        << fmt(r.box.size.x()) << "," << fmt(r.box.size.y()) << "," << fmt(r.box.size.z()) << ","
        << fmt(r.velocity.x()) << "," << fmt(r.velocity.y()) << "\n";
}

std::vector<TrackRow> read_tracks(const std::string& path) {
  const auto rows = read_csv(path);
  if (rows.empty() || rows[0].empty() || rows[0][0] != "frame")
    throw std::invalid_argument("input " + path + ": field 'frame' header missing");
  std::vector<TrackRow> out;
  for (size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != 12)
      throw std::invalid_argument("input " + path + ": row " + std::to_string(i) +
                                  " has wrong column count");
    TrackRow t;
    t.frame = std::stoi(r[0]); t.id = std::stoi(r[1]); t.class_id = std::stoi(r[2]);
    t.x = std::stod(r[3]); t.y = std::stod(r[4]); t.z = std::stod(r[5]); t.yaw = std::stod(r[6]);
    t.l = std::stod(r[7]); t.w = std::stod(r[8]); t.h = std::stod(r[9]);
    t.vx = std::stod(r[10]); t.vy = std::stod(r[11]);
    out.push_back(t);
  }
  return out;
}

struct DetRow {
  int frame;
  Box3D box;
};

void write_detections(const std::string& path, const std::vector<DetRow>& dets) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "frame,class_id,confidence,x,y,z,yaw,l,w,h\n";
  for (const DetRow& d : dets)
    out << d.frame << "," << d.box.class_id << "," << fmt(d.box.confidence) << ","
        << fmt(d.box.center.x()) << "," << fmt(d.box.center.y()) << "," << fmt(d.box.center.z())
        << "," << fmt(d.box.yaw) << "," << fmt(d.box.size.x()) << "," << fmt(d.box.size.y()) << ","
        << fmt(d.box.size.z()) << "\n";
}

std::vector<DetRow> read_detections(const std::string& path) {
  const auto rows = read_csv(path);
  if (rows.empty() || rows[0].empty() || rows[0][0] != "frame")
    throw std::invalid_argument("input " + path + ": field 'frame' header missing");
  std::vector<DetRow> out;
  for (size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != 10)
      throw std::invalid_argument("input " + path + ": row " + std::to_string(i) +
                                  " has wrong column count");
    DetRow d;
    d.frame = std::stoi(r[0]);
    d.box.class_id = std::stoi(r[1]);
    d.box.confidence = std::stod(r[2]);
    d.box.center = Vec3(std::stod(r[3]), std::stod(r[4]), std::stod(r[5]));
    d.box.yaw = std::stod(r[6]);
    d.box.size = Vec3(std::stod(r[7]), std::stod(r[8]), std::stod(r[9]));
    out.push_back(d);
  }
  return out;
}

struct PredictionRow {
  int anchor = 0, track_id = 0, class_id = 0, rank = 0;
  double score = 0.0;
  std::vector<Vec2> path;  // world frame, t_pred points
};

void write_predictions(const std::string& path, const std::vector<PredictionRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "anchor,track_id,class_id,rank,score,xy...\n";
  for (const PredictionRow& r : rows) {
    out << r.anchor << "," << r.track_id << "," << r.class_id << "," << r.rank << ","
        << fmt(r.score);
    for (const Vec2& p : r.path) out << "," << fmt(p.x()) << "," << fmt(p.y());
    out << "\n";
  }
}

std::vector<PredictionRow> read_predictions(const std::string& path) {
  const auto rows = read_csv(path);
  if (rows.empty() || rows[0].empty() || rows[0][0] != "anchor")
    throw std::invalid_argument("input " + path + ": field 'anchor' header missing");
  std::vector<PredictionRow> out;
  for (size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() < 7 || (r.size() - 5) % 2 != 0)
      throw std::invalid_argument("input " + path + ": row " + std::to_string(i) +
                                  " has wrong column count");
    PredictionRow p;
    p.anchor = std::stoi(r[0]); p.track_id = std::stoi(r[1]); p.class_id = std::stoi(r[2]);
    p.rank = std::stoi(r[3]); p.score = std::stod(r[4]);
    for (size_t j = 5; j + 1 < r.size(); j += 2)
      p.path.emplace_back(std::stod(r[j]), std::stod(r[j + 1]));
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// simulate

int cmd_simulate(const AppConfig& c, const std::string& out_dir) {
  if (out_dir.empty()) throw std::invalid_argument("simulate: --output directory is required");
  const ScenarioConfig scenario = reference_scenario(c);
  std::vector<FrameRecord> frames = simulate(scenario, c.seed, c.frames);

  LidarConfig lidar;
  lidar.range_sigma = c.range_sigma;
  for (size_t f = 0; f < frames.size(); ++f)
    frames[f].points = render_pointcloud(frames[f], lidar, frame_seed(c.seed, static_cast<int>(f)));

  std::filesystem::create_directories(out_dir);
  nlohmann::json meta;
  meta["rate_hz"] = c.rate_hz;
  meta["agents"] = c.agents;
  write_dataset(frames, out_dir + "/dataset", meta);

  DetectionNoise noise;
  noise.sigma_pos = c.sigma_pos;
  noise.sigma_yaw = c.sigma_yaw;
  noise.sigma_size = c.sigma_size;
  noise.fp_rate = c.fp_rate;
  noise.fn_rate = c.fn_rate;
  std::vector<DetRow> dets;
  for (size_t f = 0; f < frames.size(); ++f)
    for (const Box3D& b : pseudo_detect(frames[f], noise, frame_seed(c.seed + 1, static_cast<int>(f))))
      dets.push_back({static_cast<int>(f), b});
  write_detections(out_dir + "/detections.csv", dets);

  std::printf("wrote %d frames and %zu detections to %s\n", c.frames, dets.size(), out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// fuse-check

GridSpec make_grid(const AppConfig& c) {
  GridSpec grid;
  grid.origin = Vec3(-c.grid_half_extent, -c.grid_half_extent, -0.5);
  grid.cell_size = Vec3(c.grid_cell, c.grid_cell, c.grid_cell);
  const int n = std::max(1, static_cast<int>(std::lround(2 * c.grid_half_extent / c.grid_cell)));
  grid.extent = Vec3i(n, n, std::max(1, static_cast<int>(std::lround(3.0 / c.grid_cell))));
  return grid;
}

int cmd_fuse_check(const AppConfig& c, const std::string& in_dir, const std::string& out_dir) {
  if (in_dir.empty()) throw std::invalid_argument("fuse-check: --input dataset directory is required");
  require_input(in_dir + "/dataset/meta.json", "--input");
  const DatasetReader reader(in_dir + "/dataset");
  const GridSpec grid = make_grid(c);
  const std::vector<CameraModel> cams = default_cameras();
  std::ostringstream rep;
  bool all_ok = true;
  const int nframes = std::min(c.fusion_frames, reader.frames());

  for (int f = 0; f < nframes; ++f) {
    const FrameRecord fr = reader.frame(f);
    const SparseFeatureMap voxels = voxelize(fr.points, grid, c.feature_dim);
    rep << "frame " << f << ": points=" << fr.points.size() << " voxels=" << voxels.size() << "\n";

    // Serialization audit: the emitted order must equal an independent
    // lexicographic (window index, in-window index, input index) sort.
    for (const PartitionAxis axis : {PartitionAxis::X, PartitionAxis::Y}) {
      WindowSpec spec;
      spec.wx = c.window_x; spec.wy = c.window_y; spec.wz = c.window_z;
      spec.axis = axis;
      const SerializedMap ser = serialize(voxels, spec);
      const Vec3i counts = window_counts(voxels.coords, spec);
      std::vector<std::array<std::int64_t, 3>> keys(voxels.size());
      for (int i = 0; i < voxels.size(); ++i) {
        const SerializationKey k = serialization_key(voxels.coords[i], spec, counts);
        keys[i] = {k.window_index, k.in_window_index, i};
      }
      std::vector<int> order(voxels.size());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](int a, int b) { return keys[a] < keys[b]; });
      const bool ok = order == ser.permutation;
      all_ok &= ok;
      rep << "  serialization axis=" << (axis == PartitionAxis::X ? "X" : "Y")
          << " oracle=" << (ok ? "PASS" : "FAIL") << "\n";
    }

    // Association audit: every fused image feature must be assigned, the
    // candidate-vs-assignment counts are reported per camera.
    for (size_t j = 0; j < cams.size(); ++j) {
      const auto pyramid = render_image_features(fr, cams[j], c.feature_dim);
      const FusedFeatureSet fused =
          image_to_lidar_associate(voxels, grid, cams[j], pyramid[0], {}, static_cast<int>(j));
      int assigned = 0;
      for (const Modality m : fused.modality) assigned += m == Modality::Image;
      rep << "  camera " << j << ": image cells=" << pyramid[0].height * pyramid[0].width
          << " associated=" << assigned << "\n";
    }
  }

  // Deformable-attention spot checks on a seeded instance: weight groups
  // normalize to 1 and the forward pass is a pure function of its inputs.
  {
    MdaConfig mcfg;  // M=8, J=2, L=3, K=8 defaults
    const MdaParams params = MdaParams::seeded(mcfg, c.seed);
    Rng rng(c.seed + 7);
    const Vec q = random_vector(mcfg.dim, rng, 1.0);
    const AttentionWeights w = attention_weights(q, cams, params, mcfg);
    double max_dev = 0.0;
    for (int m = 0; m < mcfg.heads; ++m) max_dev = std::max(max_dev, std::abs(w.bev.row(m).sum() - 1.0));
    for (const Mat& wi : w.image)
      for (int m = 0; m < mcfg.heads; ++m) max_dev = std::max(max_dev, std::abs(wi.row(m).sum() - 1.0));
    const bool norm_ok = max_dev < 1e-9;
    all_ok &= norm_ok;
    rep << "mda weight normalization: max |sum-1| = " << fmt(max_dev) << " "
        << (norm_ok ? "PASS" : "FAIL") << "\n";

    QuerySet qs;
    qs.features = random_matrix(4, mcfg.dim, rng, 1.0);
    qs.reference_points = (random_matrix(4, 3, rng, 0.25).array() + 0.5).matrix();
    FeatureMap2D bev = FeatureMap2D::zeros(32, 32, mcfg.dim, 1.0);
    bev.values = random_matrix(32 * 32, mcfg.dim, rng, 1.0);
    std::vector<std::vector<FeatureMap2D>> pyramids;
    for (size_t j = 0; j < cams.size(); ++j) {
      std::vector<FeatureMap2D> pyr;
      for (int s = 0; s < mcfg.scales; ++s) {
        FeatureMap2D m = FeatureMap2D::zeros(18 >> s, 32 >> s, mcfg.dim, 16.0 * (1 << s));
        m.values = random_matrix(m.height * m.width, mcfg.dim, rng, 1.0);
        pyr.push_back(std::move(m));
      }
      pyramids.push_back(std::move(pyr));
    }
    const Mat o1 = mda_forward(qs, bev, pyramids, cams, grid, params, mcfg);
    const Mat o2 = mda_forward(qs, bev, pyramids, cams, grid, params, mcfg);
    const bool pure = o1 == o2;
    all_ok &= pure;
    rep << "mda forward purity: " << (pure ? "PASS" : "FAIL") << "\n";
  }

  rep << "overall: " << (all_ok ? "PASS" : "FAIL") << "\n";
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/fusion_report.txt");
    if (!out) throw std::runtime_error("cannot write " + out_dir + "/fusion_report.txt");
    out << rep.str();
  }
  std::fputs(rep.str().c_str(), stdout);
  if (!all_ok) throw std::runtime_error("fuse-check: diagnostics failed");
  return 0;
}

// ---------------------------------------------------------------------------
// track

int cmd_track(const AppConfig& c, const std::string& in_dir, const std::string& out_dir) {
  if (in_dir.empty()) throw std::invalid_argument("track: --input run directory is required");
  require_input(in_dir + "/dataset/meta.json", "--input");
  require_input(in_dir + "/detections.csv", "--input");
  const std::string dst = out_dir.empty() ? in_dir : out_dir;
  std::filesystem::create_directories(dst);
  const DatasetReader reader(in_dir + "/dataset");
  const std::vector<DetRow> dets = read_detections(in_dir + "/detections.csv");

  std::map<int, std::vector<Box3D>> by_frame;
  for (const DetRow& d : dets) by_frame[d.frame].push_back(d.box);

  TrackerState state;
  std::vector<TrackRecord> stream;
  std::vector<GtTrackPoint> gt;
  for (int f = 0; f < reader.frames(); ++f) {
    const FrameRecord fr = reader.frame(f);
    const auto it = by_frame.find(f);
    const std::vector<Box3D> frame_dets = it == by_frame.end() ? std::vector<Box3D>{} : it->second;
    const auto recs = track_frame(state, frame_dets, fr.timestamp, fr.ego_pose, c.tracker);
    stream.insert(stream.end(), recs.begin(), recs.end());
    for (const GroundTruthBox& b : fr.boxes)
      gt.push_back({f, b.agent_id, b.box.class_id, Vec2(b.box.center.x(), b.box.center.y())});
  }
  write_tracks(dst + "/tracks.csv", stream);

  const TrackingReport rep = tracking_report(stream, gt, c.match_distance);
  std::ofstream out(dst + "/tracking_report.txt");
  if (!out) throw std::runtime_error("cannot write " + dst + "/tracking_report.txt");
  out << "id_switches: " << rep.id_switches << "\n";
  out << "misses: " << rep.misses << "\n";
  out << "false_tracks: " << rep.false_tracks << "\n";
  out << "gt_total: " << rep.gt_total << "\n";
  for (const auto& [agent, visible] : rep.visible_frames_per_agent) {
    const auto m = rep.matched_frames_per_agent.find(agent);
    const int matched = m == rep.matched_frames_per_agent.end() ? 0 : m->second;
    out << "agent " << agent << ": matched " << matched << "/" << visible << " ("
        << fmt6(static_cast<double>(matched) / visible) << ")\n";
  }
  std::printf("tracked %zu records, %d id switches\n", stream.size(), rep.id_switches);
  return 0;
}

// ---------------------------------------------------------------------------
// train-predictor

std::vector<TrajElement> dataset_elements(const GtTable& gt, const TrajConfig& cfg, int stride) {
  std::vector<TrajElement> out;
  for (int anchor = cfg.t_obs - 1; anchor + cfg.t_pred < gt.frames; anchor += stride) {
    std::vector<ObjectHistory> histories;
    for (const auto& [agent, track] : gt.agents) {
      ObjectHistory h;
      h.id = agent;
      bool complete = true;
      for (int t = anchor - cfg.t_obs + 1; t <= anchor; ++t) {
        const auto it = track.find(t);
        if (it == track.end()) { complete = false; break; }
        h.positions.push_back(it->second.first);
        h.class_id = it->second.second;
      }
      if (!complete) continue;
      for (int t = anchor + 1; t <= anchor + cfg.t_pred; ++t) {
        const auto it = track.find(t);
        if (it == track.end()) { complete = false; break; }
        h.future.push_back(it->second.first);
      }
      if (complete) histories.push_back(std::move(h));
    }
    // The robot joins as a neighbor-only class.
    ObjectHistory ego;
    ego.id = -1;
    ego.class_id = cfg.num_classes;
    for (int t = anchor - cfg.t_obs + 1; t <= anchor; ++t)
      ego.positions.push_back(gt.ego[std::max(0, t)]);
    histories.push_back(std::move(ego));

    const TrajBatch batch = preprocess(histories, cfg);
    for (const TrajElement& el : batch.elements)
      if (el.future.rows() == cfg.t_pred) out.push_back(el);
  }
  return out;
}

int cmd_train_predictor(const AppConfig& c, const std::string& in_dir, const std::string& out_dir,
                        const std::string& format) {
  if (in_dir.empty()) throw std::invalid_argument("train-predictor: --input run directory is required");
  require_input(in_dir + "/dataset/meta.json", "--input");
  const std::string dst = out_dir.empty() ? in_dir : out_dir;
  std::filesystem::create_directories(dst);
  const DatasetReader reader(in_dir + "/dataset");
  const GtTable gt = load_gt(reader);
  const std::vector<TrajElement> elements = dataset_elements(gt, c.traj, c.train_anchor_stride);
  if (elements.empty())
    throw std::invalid_argument("train-predictor: input " + in_dir +
                                " yields no complete training windows (check scenario.frames)");

  OptimizerSettings opt = c.opt;
  opt.seed = c.seed;
  const TrainResult result = train(elements, c.traj, opt, TrajParams::seeded(c.traj, c.seed),
                                   generate_references(c.traj));

  TrainResult res = result;
  save_checkpoint(dst + "/checkpoint.json", c.traj, res.params, res.references);

  std::ofstream csv(dst + "/loss_curve.csv");
  if (!csv) throw std::runtime_error("cannot write " + dst + "/loss_curve.csv");
  csv << "step,loss\n";
  for (size_t i = 0; i < result.loss_curve.size(); ++i)
    csv << i << "," << fmt(result.loss_curve[i]) << "\n";
  if (format == "svg") {
    Series s{"steelblue", {}};
    for (size_t i = 0; i < result.loss_curve.size(); ++i)
      s.points.emplace_back(static_cast<double>(i), result.loss_curve[i]);
    write_svg_chart(dst + "/loss_curve.svg", "training loss", {s});
  }
  std::printf("trained on %zu elements; final loss %s\n", elements.size(),
              result.loss_curve.empty() ? "n/a" : fmt(result.loss_curve.back()).c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// predict

int cmd_predict(const AppConfig& c, const std::string& in_dir, const std::string& out_dir,
                const std::string& format) {
  if (in_dir.empty()) throw std::invalid_argument("predict: --input run directory is required");
  require_input(in_dir + "/checkpoint.json", "--input");
  require_input(in_dir + "/tracks.csv", "--input");
  const std::string dst = out_dir.empty() ? in_dir : out_dir;
  std::filesystem::create_directories(dst);
  const Checkpoint ckpt = load_checkpoint(in_dir + "/checkpoint.json");
  const std::vector<TrackRow> tracks = read_tracks(in_dir + "/tracks.csv");

  std::map<int, std::map<int, TrackRow>> by_id;  // id -> frame -> row
  int last_frame = 0;
  for (const TrackRow& t : tracks) {
    by_id[t.id][t.frame] = t;
    last_frame = std::max(last_frame, t.frame);
  }

  std::vector<PredictionRow> rows;
  for (int anchor = ckpt.config.t_obs - 1; anchor <= last_frame; anchor += c.predict_anchor_stride) {
    std::vector<ObjectHistory> histories;
    for (const auto& [id, frames] : by_id) {
      if (!frames.count(anchor)) continue;
      ObjectHistory h;
      h.id = id;
      h.class_id = frames.at(anchor).class_id;
      // Consecutive world positions ending at the anchor frame.
      std::vector<Vec2> rev;
      for (int t = anchor; t >= 0 && frames.count(t); --t)
        rev.emplace_back(frames.at(t).x, frames.at(t).y);
      for (auto it = rev.rbegin(); it != rev.rend(); ++it) h.positions.push_back(*it);
      if (static_cast<int>(h.positions.size()) > ckpt.config.t_obs)
        h.positions.erase(h.positions.begin(),
                          h.positions.end() - ckpt.config.t_obs);
      histories.push_back(std::move(h));
    }
    if (histories.empty()) continue;
    const auto preds = predict(histories, ckpt.params, ckpt.references, ckpt.config);
    for (const ObjectPrediction& p : preds)
      for (int r = 0; r < static_cast<int>(p.trajectories.size()); ++r) {
        PredictionRow row;
        row.anchor = anchor;
        row.track_id = p.source_id;
        row.class_id = p.class_id;
        row.rank = r;
        row.score = p.scores(r);
        for (int t = 0; t < p.trajectories[r].rows(); ++t)
          row.path.emplace_back(p.trajectories[r](t, 0), p.trajectories[r](t, 1));
        rows.push_back(std::move(row));
      }
  }
  write_predictions(dst + "/predictions.csv", rows);

  if (format == "svg") {
    // BEV overlay at the last anchor: track histories plus top-3 modes.
    std::vector<Series> series;
    int last_anchor = -1;
    for (const PredictionRow& r : rows) last_anchor = std::max(last_anchor, r.anchor);
    for (const auto& [id, frames] : by_id) {
      Series hist{"gray", {}};
      for (const auto& [f, t] : frames)
        if (f <= last_anchor) hist.points.emplace_back(t.x, t.y);
      if (!hist.points.empty()) series.push_back(std::move(hist));
    }
    const char* colors[3] = {"crimson", "darkorange", "steelblue"};
    for (const PredictionRow& r : rows) {
      if (r.anchor != last_anchor || r.rank >= 3) continue;
      Series s{colors[r.rank], {}};
      for (const Vec2& p : r.path) s.points.emplace_back(p.x(), p.y());
      series.push_back(std::move(s));
    }
    write_svg_chart(dst + "/bev_overlay.svg", "BEV trajectories", series);
  }
  std::printf("wrote %zu prediction rows\n", rows.size());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const AppConfig& c, const std::string& in_dir, const std::string& out_dir,
             const std::string& format) {
  if (in_dir.empty()) throw std::invalid_argument("eval: --input run directory is required");
  require_input(in_dir + "/dataset/meta.json", "--input");
  require_input(in_dir + "/detections.csv", "--input");
  const std::string dst = out_dir.empty() ? in_dir : out_dir;
  std::filesystem::create_directories(dst);
  const DatasetReader reader(in_dir + "/dataset");
  const GtTable gt = load_gt(reader);
  EvalConfig ecfg;
  std::ostringstream rep;

  // Detection AP: sensor-frame detections lifted to world frame per frame.
  std::vector<Box3D> all_dets, all_gt;
  {
    const std::vector<DetRow> dets = read_detections(in_dir + "/detections.csv");
    std::map<int, RigidTransform> poses;
    for (int f = 0; f < reader.frames(); ++f) {
      const FrameRecord fr = reader.frame(f);
      poses[f] = fr.ego_pose;
      for (const GroundTruthBox& b : fr.boxes) all_gt.push_back(b.box);
    }
    for (const DetRow& d : dets) {
      Box3D w = d.box;
      const RigidTransform& pose = poses.at(d.frame);
      w.center = pose.apply(w.center);
      const double ego_yaw = std::atan2(pose.rotation(1, 0), pose.rotation(0, 0));
      w.yaw = wrap_angle(w.yaw + ego_yaw);
      all_dets.push_back(w);
    }
  }
  const char* class_names[3] = {"pedestrian", "car", "cyclist"};
  rep << "detection AP (BEV IoU thresholds 0.5/0.7/0.5)\n";
  double ap_sum = 0.0;
  int ap_count = 0;
  std::vector<PrCurve> curves(3);
  for (int cls = 0; cls < 3; ++cls) {
    const auto ap = average_precision(all_dets, all_gt, cls, ecfg, &curves[cls]);
    rep << "  class " << cls << " (" << class_names[cls] << "): "
        << (ap ? fmt(*ap) : std::string("n/a")) << "\n";
    if (ap) { ap_sum += *ap; ++ap_count; }
  }
  rep << "  mAP: " << (ap_count ? fmt(ap_sum / ap_count) : std::string("n/a")) << "\n";

  // Tracking metrics when a tracklet stream exists.
  if (std::filesystem::exists(in_dir + "/tracks.csv")) {
    const std::vector<TrackRow> tracks = read_tracks(in_dir + "/tracks.csv");
    std::vector<TrackRecord> stream;
    for (const TrackRow& t : tracks) {
      TrackRecord r;
      r.frame = t.frame; r.id = t.id; r.class_id = t.class_id;
      r.box.center = Vec3(t.x, t.y, t.z);
      r.box.size = Vec3(t.l, t.w, t.h);
      r.box.yaw = t.yaw;
      r.velocity = Vec2(t.vx, t.vy);
      stream.push_back(r);
    }
    std::vector<GtTrackPoint> gtp;
    for (const auto& [agent, track] : gt.agents)
      for (const auto& [f, pc] : track) gtp.push_back({f, agent, pc.second, pc.first});
    std::sort(gtp.begin(), gtp.end(), [](const GtTrackPoint& a, const GtTrackPoint& b) {
      return std::tie(a.frame, a.agent_id) < std::tie(b.frame, b.agent_id);
    });
    const TrackingReport tr = tracking_report(stream, gtp, c.match_distance);
    rep << "tracking\n";
    rep << "  id_switches: " << tr.id_switches << "\n";
    rep << "  misses: " << tr.misses << "\n";
    rep << "  false_tracks: " << tr.false_tracks << "\n";
    rep << "  gt_total: " << tr.gt_total << "\n";
  }

  // Prediction metrics when prediction records exist: each (anchor, track)
  // group is matched to the nearest same-class agent at the anchor frame.
  if (std::filesystem::exists(in_dir + "/predictions.csv")) {
    const std::vector<PredictionRow> preds = read_predictions(in_dir + "/predictions.csv");
    std::map<std::pair<int, int>, std::vector<const PredictionRow*>> groups;
    for (const PredictionRow& p : preds) groups[{p.anchor, p.track_id}].push_back(&p);
    std::map<int, std::pair<double, double>> sums;  // k -> (ade sum, fde sum)
    int matched = 0;
    for (const auto& [key, rows] : groups) {
      const auto [anchor, track_id] = key;
      if (rows.empty() || rows[0]->path.empty()) continue;
      const int t_pred = static_cast<int>(rows[0]->path.size());
      // The anchor position is where every mode starts from; match by the
      // first predicted point's proximity to GT agents at the anchor.
      int best_agent = -1;
      double best_d = c.match_distance;
      for (const auto& [agent, track] : gt.agents) {
        const auto it = track.find(anchor);
        if (it == track.end() || it->second.second != rows[0]->class_id) continue;
        const double d = (it->second.first - rows[0]->path.front()).norm();
        if (d < best_d) { best_d = d; best_agent = agent; }
      }
      if (best_agent < 0) continue;
      Mat truth(t_pred, 2);
      bool complete = true;
      for (int t = 1; t <= t_pred; ++t) {
        const auto it = gt.agents.at(best_agent).find(anchor + t);
        if (it == gt.agents.at(best_agent).end()) { complete = false; break; }
        truth.row(t - 1) = it->second.first.transpose();
      }
      if (!complete) continue;
      std::vector<Mat> trajs;
      Vec scores(rows.size());
      for (size_t r = 0; r < rows.size(); ++r) {
        Mat m(t_pred, 2);
        for (int t = 0; t < t_pred; ++t) m.row(t) = rows[r]->path[t].transpose();
        trajs.push_back(std::move(m));
        scores(r) = rows[r]->score;
      }
      ++matched;
      for (const int k : ecfg.top_k) {
        const int kk = std::min<int>(k, static_cast<int>(trajs.size()));
        sums[k].first += min_ade(trajs, scores, truth, kk);
        sums[k].second += min_fde(trajs, scores, truth, kk);
      }
    }
    rep << "prediction (" << matched << " matched anchor/track groups)\n";
    for (const int k : ecfg.top_k) {
      if (matched == 0) {
        rep << "  minADE@" << k << ": n/a  minFDE@" << k << ": n/a\n";
      } else {
        rep << "  minADE@" << k << ": " << fmt(sums[k].first / matched) << "  minFDE@" << k << ": "
            << fmt(sums[k].second / matched) << "\n";
      }
    }
  }

  std::ofstream out(dst + "/metrics_report.txt");
  if (!out) throw std::runtime_error("cannot write " + dst + "/metrics_report.txt");
  out << rep.str();
  std::fputs(rep.str().c_str(), stdout);

  if (format == "svg") {
    const char* colors[3] = {"crimson", "seagreen", "steelblue"};
    std::vector<Series> series;
    for (int cls = 0; cls < 3; ++cls) {
      Series s{colors[cls], {}};
      for (size_t i = 0; i < curves[cls].recall.size(); ++i)
        s.points.emplace_back(curves[cls].recall[i], curves[cls].precision[i]);
      if (!s.points.empty()) series.push_back(std::move(s));
    }
    write_svg_chart(dst + "/pr_curves.svg", "precision-recall", series);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// bench

int cmd_bench(const AppConfig& c, const std::string& out_path) {
  using clock = std::chrono::steady_clock;
  struct Stage {
    std::string name;
    std::function<void()> fn;
  };

  // Shared workload: one reference frame plus seeded module instances.
  AppConfig ref = c;
  ref.frames = 1;
  const ScenarioConfig scenario = reference_scenario(ref);
  std::vector<FrameRecord> frames = simulate(scenario, c.seed, 1);
  LidarConfig lidar;
  frames[0].points = render_pointcloud(frames[0], lidar, c.seed);
  const GridSpec grid = make_grid(c);
  const SparseFeatureMap voxels = voxelize(frames[0].points, grid, c.feature_dim);
  WindowSpec spec;
  spec.wx = c.window_x; spec.wy = c.window_y; spec.wz = c.window_z;
  const SerializedMap ser = serialize(voxels, spec);
  const BimambaParams bp = BimambaParams::seeded(c.feature_dim, c.seed);
  const GroupedSequence grouped =
      group(ser.features, ser.permutation, c.group_size, Vec::Zero(c.feature_dim));

  MdaConfig mcfg;
  const MdaParams mparams = MdaParams::seeded(mcfg, c.seed);
  const std::vector<CameraModel> cams = default_cameras();
  Rng rng(c.seed + 3);
  QuerySet qs;
  qs.features = random_matrix(32, mcfg.dim, rng, 1.0);
  qs.reference_points = (random_matrix(32, 3, rng, 0.25).array() + 0.5).matrix();
  FeatureMap2D bev = FeatureMap2D::zeros(64, 64, mcfg.dim, 1.0);
  bev.values = random_matrix(64 * 64, mcfg.dim, rng, 1.0);
  std::vector<std::vector<FeatureMap2D>> pyramids;
  for (size_t j = 0; j < cams.size(); ++j) {
    std::vector<FeatureMap2D> pyr;
    for (int s = 0; s < mcfg.scales; ++s) {
      FeatureMap2D m = FeatureMap2D::zeros(36 >> s, 64 >> s, mcfg.dim, 8.0 * (1 << s));
      m.values = random_matrix(m.height * m.width, mcfg.dim, rng, 1.0);
      pyr.push_back(std::move(m));
    }
    pyramids.push_back(std::move(pyr));
  }

  DetectionNoise noise;
  noise.sigma_pos = c.sigma_pos;
  const std::vector<Box3D> dets = pseudo_detect(frames[0], noise, c.seed);

  const TrajConfig tcfg = c.traj;
  const TrajParams tparams = TrajParams::seeded(tcfg, c.seed);
  const ReferenceTrajectorySet refs = generate_references(tcfg);
  std::vector<ObjectHistory> histories;
  for (int i = 0; i < 5; ++i) {
    ObjectHistory h;
    h.id = i;
    h.class_id = i % 3;
    for (int t = 0; t < tcfg.t_obs; ++t) h.positions.emplace_back(0.5 * i + 0.1 * t, 0.2 * i);
    histories.push_back(std::move(h));
  }

  std::vector<Stage> stages = {
      {"lidar render", [&] { (void)render_pointcloud(frames[0], lidar, c.seed); }},
      {"voxelize", [&] { (void)voxelize(frames[0].points, grid, c.feature_dim); }},
      {"serialize", [&] { (void)serialize(voxels, spec); }},
      {"sequence encoder", [&] { (void)bimamba_forward(grouped, bp); }},
      {"deformable attention", [&] { (void)mda_forward(qs, bev, pyramids, cams, grid, mparams, mcfg); }},
      {"tracker frame", [&] {
         TrackerState state;
         (void)track_frame(state, dets, 0.1, frames[0].ego_pose, c.tracker);
       }},
      {"predictor forward", [&] { (void)predict(histories, tparams, refs, tcfg); }},
  };

  std::ostringstream rep;
  rep << "stage                  mean_ms      p50_ms      p99_ms\n";
  std::map<std::string, double> means;
  for (const Stage& st : stages) {
    for (int i = 0; i < c.bench_warmup; ++i) st.fn();
    std::vector<double> ms;
    for (int i = 0; i < c.bench_reps; ++i) {
      const auto t0 = clock::now();
      st.fn();
      const auto t1 = clock::now();
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    const double mean = std::accumulate(ms.begin(), ms.end(), 0.0) / ms.size();
    const double p50 = ms[ms.size() / 2];
    const double p99 = ms[std::min(ms.size() - 1, static_cast<size_t>(ms.size() * 99 / 100))];
    means[st.name] = mean;
    char line[160];
    std::snprintf(line, sizeof line, "%-20s %10.3f  %10.3f  %10.3f\n", st.name.c_str(), mean, p50,
                  p99);
    rep << line;
  }
  std::fputs(rep.str().c_str(), stdout);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << rep.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-modal perception pipeline: simulate, fuse-check, track, "
               "train-predictor, predict, eval, bench"};
  app.require_subcommand(1);

  std::string config_path, input_path, output_path, format = "text";
  std::optional<std::uint64_t> seed_flag;
  app.add_option("--config", config_path, "flat key-value config file");
  app.add_option("--seed", seed_flag, "RNG seed (overrides the config seed)");
  app.add_option("--input", input_path, "input path (dataset / run directory)");
  app.add_option("--output", output_path, "output path");
  app.add_option("--format", format, "output format")
      ->check(CLI::IsMember({"text", "csv", "svg"}));

  auto* sub_sim = app.add_subcommand("simulate", "generate a synthetic dataset + detections");
  auto* sub_fuse = app.add_subcommand("fuse-check", "fusion diagnostics on a dataset");
  auto* sub_track = app.add_subcommand("track", "run the tracker over stored detections");
  auto* sub_train = app.add_subcommand("train-predictor", "train the trajectory predictor");
  auto* sub_pred = app.add_subcommand("predict", "predict futures for tracked objects");
  auto* sub_eval = app.add_subcommand("eval", "detection/tracking/prediction metrics");
  auto* sub_bench = app.add_subcommand("bench", "per-stage latency table");
  for (CLI::App* s : {sub_sim, sub_fuse, sub_track, sub_train, sub_pred, sub_eval, sub_bench})
    s->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    AppConfig cfg;
    if (!config_path.empty()) load_config(config_path, cfg);
    if (seed_flag) cfg.seed = *seed_flag;

    if (sub_sim->parsed()) return cmd_simulate(cfg, output_path);
    if (sub_fuse->parsed()) return cmd_fuse_check(cfg, input_path, output_path);
    if (sub_track->parsed()) return cmd_track(cfg, input_path, output_path);
    if (sub_train->parsed()) return cmd_train_predictor(cfg, input_path, output_path, format);
    if (sub_pred->parsed()) return cmd_predict(cfg, input_path, output_path, format);
    if (sub_eval->parsed()) return cmd_eval(cfg, input_path, output_path, format);
    if (sub_bench->parsed()) return cmd_bench(cfg, output_path);
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::out_of_range& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
