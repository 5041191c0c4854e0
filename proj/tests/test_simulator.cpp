#include <filesystem>
#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "mmp/dataset.hpp"
#include "mmp/simulator.hpp"

using namespace mmp;
using Catch::Approx;

namespace {

AgentSpec straight_walker(double speed, double duration = 1e6) {
  AgentSpec a;
  a.cls = AgentClass::Pedestrian;
  a.behavior = BehaviorKind::Unicycle;
  a.schedule = {{speed, 0.0, duration}};
  return a;
}

}  // namespace

TEST_CASE("simulate kinematics", "[simulator]") {
  SECTION("straight line covers speed times time") {
    ScenarioConfig sc;
    sc.agents = {straight_walker(1.0)};
    const auto frames = simulate(sc, 1, 101);
    REQUIRE(frames.size() == 101);
    REQUIRE(frames[0].boxes[0].box.center.x() == Approx(0.0));
    REQUIRE(frames[100].boxes[0].box.center.x() == Approx(10.0));
    REQUIRE(frames[100].boxes[0].box.center.y() == Approx(0.0));
    REQUIRE(frames[50].boxes[0].velocity.x() == Approx(1.0));
  }
  SECTION("schedule advances after its duration") {
    ScenarioConfig sc;
    AgentSpec a;
    a.behavior = BehaviorKind::Unicycle;
    a.schedule = {{1.0, 0.0, 1.0}, {0.0, 0.0, 1.0}};
    sc.agents = {a};
    const auto frames = simulate(sc, 1, 31);
    // Walks 1 m in the first second, stands in the second, repeats.
    REQUIRE(frames[10].boxes[0].box.center.x() == Approx(1.0));
    REQUIRE(frames[20].boxes[0].box.center.x() == Approx(1.0));
    REQUIRE(frames[30].boxes[0].box.center.x() == Approx(2.0));
  }
  SECTION("turning closes a loop approximately") {
    ScenarioConfig sc;
    AgentSpec a;
    a.behavior = BehaviorKind::Unicycle;
    a.schedule = {{1.0, 1.0, 1e6}};
    sc.agents = {a};
    const int frames_per_loop = static_cast<int>(std::round(2 * M_PI * 10));
    const auto frames = simulate(sc, 1, frames_per_loop + 1);
    const Vec3 end = frames.back().boxes[0].box.center;
    REQUIRE((end.head<2>() - Vec2::Zero()).norm() < 0.5);  // explicit Euler drift
  }
  SECTION("waypoints are visited in order and cycled") {
    ScenarioConfig sc;
    AgentSpec a;
    a.behavior = BehaviorKind::Waypoints;
    a.waypoints = {Vec2(2, 0), Vec2(2, 2)};
    a.waypoint_speed = 1.0;
    sc.agents = {a};
    const auto frames = simulate(sc, 1, 60);
    REQUIRE((frames[21].boxes[0].box.center.head<2>() - Vec2(2, 0)).norm() < 0.15);
    REQUIRE((frames[41].boxes[0].box.center.head<2>() - Vec2(2, 2)).norm() < 0.15);
  }
  SECTION("moving ego changes the pose, not the world-frame truth") {
    ScenarioConfig fixed, moving;
    fixed.agents = moving.agents = {straight_walker(0.5)};
    moving.ego_schedule = {{1.0, 0.2, 1e6}};
    const auto a = simulate(fixed, 1, 20);
    const auto b = simulate(moving, 1, 20);
    REQUIRE((a[0].ego_pose.rotation - b[0].ego_pose.rotation).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(b[19].ego_pose.translation.head<2>().norm() > 0.5);
    for (int f = 0; f < 20; ++f)
      REQUIRE(a[f].boxes[0].box.center == b[f].boxes[0].box.center);
  }
  SECTION("empty scenario rejected") { REQUIRE_THROWS(simulate(ScenarioConfig{}, 1, 1)); }
  SECTION("deterministic in the inputs") {
    ScenarioConfig sc;
    sc.agents = {straight_walker(0.7)};
    sc.ego_schedule = {{0.5, 0.1, 2.0}};
    const auto a = simulate(sc, 1, 30);
    const auto b = simulate(sc, 1, 30);
    for (int f = 0; f < 30; ++f) {
      REQUIRE(a[f].ego_pose.translation == b[f].ego_pose.translation);
      REQUIRE(a[f].boxes[0].box.center == b[f].boxes[0].box.center);
    }
  }
}

TEST_CASE("lidar points lie on scene surfaces", "[simulator]") {
  ScenarioConfig sc;
  AgentSpec a;
  a.cls = AgentClass::Car;
  a.behavior = BehaviorKind::Stationary;
  a.position = Vec2(5, 0);
  a.size = Vec3(4, 2, 1.5);
  sc.agents = {a};
  const auto frames = simulate(sc, 1, 1);
  LidarConfig cfg;
  cfg.range_sigma = 0.0;  // exact surface audit
  const auto points = render_pointcloud(frames[0], cfg, 3);
  REQUIRE_FALSE(points.empty());
  const Box3D& box = frames[0].boxes[0].box;
  int on_box = 0;
  for (const LidarPoint& p : points) {
    const Vec3 w = frames[0].ego_pose.apply(p.position);
    if (p.intensity > 0.4) {
      // Box return: inside the box and on one of its faces.
      const Vec3 d = w - box.center;
      const double c = std::cos(-box.yaw), s = std::sin(-box.yaw);
      const Vec3 local(c * d.x() - s * d.y(), s * d.x() + c * d.y(), d.z());
      const Vec3 slack = (box.size / 2 - local.cwiseAbs().matrix()).cwiseMax(0.0);
      REQUIRE((local.cwiseAbs() - box.size / 2).maxCoeff() < 1e-9);
      REQUIRE(slack.minCoeff() < 1e-9);
      ++on_box;
    } else {
      REQUIRE(std::abs(w.z()) < 1e-9);  // ground plane
    }
    REQUIRE(w.head<2>().norm() < cfg.max_range + 1e-6);
  }
  REQUIRE(on_box > 10);

  SECTION("same seed reproduces, different seed perturbs") {
    LidarConfig noisy;
    const auto p1 = render_pointcloud(frames[0], noisy, 3);
    const auto p2 = render_pointcloud(frames[0], noisy, 3);
    const auto p3 = render_pointcloud(frames[0], noisy, 4);
    REQUIRE(p1.size() == p2.size());
    bool same = true, differs = false;
    for (size_t i = 0; i < p1.size(); ++i) {
      same = same && p1[i].position == p2[i].position;
      if (i < p3.size() && p1[i].position != p3[i].position) differs = true;
    }
    REQUIRE(same);
    REQUIRE(differs);
  }
}

TEST_CASE("occlusion removes hidden surfaces", "[simulator]") {
  ScenarioConfig sc;
  AgentSpec front, back;
  front.cls = AgentClass::Car;           // intensity 0.6
  front.behavior = BehaviorKind::Stationary;
  front.position = Vec2(5, 0);
  front.size = Vec3(3, 3, 2);
  back.cls = AgentClass::Cyclist;        // intensity 0.7
  back.behavior = BehaviorKind::Stationary;
  back.position = Vec2(8, 0);
  back.size = Vec3(1, 1, 1);             // strictly inside the front box shadow
  sc.agents = {front, back};
  const auto frames = simulate(sc, 1, 1);
  LidarConfig cfg;
  cfg.range_sigma = 0.0;
  for (const LidarPoint& p : render_pointcloud(frames[0], cfg, 3))
    REQUIRE(p.intensity != Approx(0.7).margin(1e-6));
}

TEST_CASE("camera rig geometry", "[simulator]") {
  const auto cams = default_cameras(512, 288);
  REQUIRE(cams.size() == 2);
  SECTION("points on each optical axis project to the principal point") {
    // Camera 0 looks 30 degrees left of forward from (0,0,1).
    const double yaw = M_PI / 6;
    const Vec3 p(std::cos(yaw) * 8, std::sin(yaw) * 8, 1.0);
    const PixelProjection pp = project_point(p, cams[0]);
    REQUIRE(pp.valid);
    REQUIRE(pp.u == Approx(256.0).margin(1e-6));
    REQUIRE(pp.v == Approx(144.0).margin(1e-6));
    REQUIRE(pp.depth == Approx(8.0).margin(1e-9));
  }
  SECTION("adjacent fields of view split left and right") {
    const Vec3 left(std::cos(0.9) * 5, std::sin(0.9) * 5, 1.0);
    REQUIRE(project_point(left, cams[0]).valid);
    const auto in_image = [&](const CameraModel& cam, const Vec3& p) {
      const PixelProjection pp = project_point(p, cam);
      return pp.valid && pp.u >= 0 && pp.u < cam.width && pp.v >= 0 && pp.v < cam.height;
    };
    REQUIRE(in_image(cams[0], left));
    REQUIRE_FALSE(in_image(cams[1], left));
    const Vec3 right(std::cos(-0.9) * 5, std::sin(-0.9) * 5, 1.0);
    REQUIRE(in_image(cams[1], right));
    REQUIRE_FALSE(in_image(cams[0], right));
  }
}

TEST_CASE("image feature rendering", "[simulator]") {
  ScenarioConfig sc;
  AgentSpec a;
  a.cls = AgentClass::Car;
  a.behavior = BehaviorKind::Stationary;
  a.position = Vec2(8, 4);               // well inside the left camera FOV
  a.size = Vec3(4, 2, 2);
  sc.agents = {a};
  const auto frames = simulate(sc, 1, 1);
  const auto cams = default_cameras(256, 192);
  const auto pyramid = render_image_features(frames[0], cams[0], 5);
  REQUIRE(pyramid.size() == 3);
  REQUIRE(pyramid[0].height == 24);
  REQUIRE(pyramid[0].width == 32);
  REQUIRE(pyramid[1].height == 12);
  REQUIRE(pyramid[2].width == 8);

  // Locate the box pixel by projecting its center.
  const PixelProjection pp = project_point(frames[0].ego_pose.inverse().apply(
                                               frames[0].boxes[0].box.center),
                                           cams[0]);
  REQUIRE(pp.valid);
  const FeatureMap2D& m = pyramid[0];
  const Eigen::RowVectorXd row =
      m.at(static_cast<int>(pp.v / m.scale), static_cast<int>(pp.u / m.scale));
  REQUIRE(row(static_cast<int>(AgentClass::Car)) == 1.0);
  REQUIRE(row(0) == 0.0);
  REQUIRE(row(3) > 0.0);        // inverse depth of a finite hit
  REQUIRE(row(3) < 1.0);
  REQUIRE(row(4) == 1.0);       // bias plane

  // A sky pixel keeps only the bias channel.
  const Eigen::RowVectorXd sky = m.at(0, 0);
  REQUIRE(sky.head(4).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(sky(4) == 1.0);

  REQUIRE_THROWS(render_image_features(frames[0], cams[0], 3));
}

TEST_CASE("pseudo detections", "[simulator]") {
  ScenarioConfig sc;
  sc.agents = {straight_walker(1.0)};
  const auto frames = simulate(sc, 1, 1);
  SECTION("zero noise reproduces the truth in the sensor frame") {
    const auto dets = pseudo_detect(frames[0], DetectionNoise{}, 5);
    REQUIRE(dets.size() == 1);
    REQUIRE((dets[0].center - frames[0].boxes[0].box.center).norm() == 0.0);
    REQUIRE(dets[0].yaw == frames[0].boxes[0].box.yaw);
    REQUIRE(dets[0].size == frames[0].boxes[0].box.size);
    REQUIRE(dets[0].confidence >= 0.7);
    REQUIRE(dets[0].confidence <= 1.0);
  }
  SECTION("false negative rate holds in aggregate") {
    DetectionNoise noise;
    noise.fn_rate = 0.3;
    int dropped = 0;
    const int trials = 2000;
    for (int s = 0; s < trials; ++s)
      dropped += pseudo_detect(frames[0], noise, 1000 + s).empty();
    REQUIRE(std::abs(dropped / static_cast<double>(trials) - 0.3) < 0.05);
  }
  SECTION("clutter rate and confidence band") {
    FrameRecord empty;
    DetectionNoise noise;
    noise.fp_rate = 0.5;
    int clutter = 0;
    const int trials = 2000;
    for (int s = 0; s < trials; ++s) {
      const auto dets = pseudo_detect(empty, noise, 5000 + s);
      clutter += static_cast<int>(dets.size());
      for (const Box3D& d : dets) {
        REQUIRE(d.confidence >= 0.3);
        REQUIRE(d.confidence < 0.6 + 1e-12);
        REQUIRE(d.center.head<2>().cwiseAbs().maxCoeff() <= noise.range);
      }
    }
    REQUIRE(std::abs(clutter / static_cast<double>(trials) - 0.5) < 0.05);
  }
  SECTION("invalid rates rejected") {
    DetectionNoise bad;
    bad.fn_rate = 1.0;
    REQUIRE_THROWS(pseudo_detect(frames[0], bad, 1));
    bad.fn_rate = 0.0;
    bad.fp_rate = -0.1;
    REQUIRE_THROWS(pseudo_detect(frames[0], bad, 1));
  }
  SECTION("position noise perturbs at the configured scale") {
    DetectionNoise noise;
    noise.sigma_pos = 0.1;
    double sq = 0.0;
    const int trials = 2000;
    for (int s = 0; s < trials; ++s) {
      const auto dets = pseudo_detect(frames[0], noise, 9000 + s);
      REQUIRE(dets.size() == 1);
      sq += std::pow(dets[0].center.x() - frames[0].boxes[0].box.center.x(), 2);
    }
    REQUIRE(std::sqrt(sq / trials) == Approx(0.1).margin(0.02));
  }
}

TEST_CASE("dataset round trip", "[simulator][dataset]") {
  namespace fs = std::filesystem;
  ScenarioConfig sc;
  sc.agents = {straight_walker(1.0)};
  sc.ego_schedule = {{0.5, 0.1, 2.0}};
  auto frames = simulate(sc, 1, 3);
  const auto cams = default_cameras(64, 32);
  for (auto& f : frames) {
    f.points = render_pointcloud(f, LidarConfig{}, 7);
    for (const auto& cam : cams) f.image_feats.push_back(render_image_features(f, cam, 4));
  }
  const fs::path dir = fs::temp_directory_path() / "mmp_dataset_test";
  fs::remove_all(dir);
  write_dataset(frames, dir.string(), {{"note", "fixture"}});

  SECTION("reader streams frames that re-serialize byte-identically") {
    DatasetReader reader(dir.string());
    REQUIRE(reader.frames() == 3);
    REQUIRE(reader.meta()["note"] == "fixture");
    const auto round = read_dataset(dir.string());
    const fs::path dir2 = fs::temp_directory_path() / "mmp_dataset_test2";
    fs::remove_all(dir2);
    write_dataset(round, dir2.string(), {{"note", "fixture"}});
    for (int i = 0; i < 3; ++i) {
      const auto name = "frame_00000" + std::to_string(i) + ".bin";
      std::ifstream a(dir / name, std::ios::binary);
      std::ifstream b(dir2 / name, std::ios::binary);
      const std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
      const std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
      REQUIRE(sa.size() > 0);
      REQUIRE(sa == sb);
    }
    // Structured contents survive the float quantization contract.
    REQUIRE(round[1].timestamp == frames[1].timestamp);
    REQUIRE(round[1].ego_pose.rotation == frames[1].ego_pose.rotation);
    REQUIRE(round[1].points.size() == frames[1].points.size());
    REQUIRE(round[1].image_feats.size() == frames[1].image_feats.size());
    REQUIRE(round[1].boxes.size() == frames[1].boxes.size());
    REQUIRE(round[1].boxes[0].agent_id == frames[1].boxes[0].agent_id);
    for (size_t p = 0; p < round[1].points.size(); ++p)
      REQUIRE((round[1].points[p].position - frames[1].points[p].position).norm() < 1e-5);
  }
  SECTION("out of range frame index") {
    DatasetReader reader(dir.string());
    REQUIRE_THROWS(reader.frame(3));
    REQUIRE_THROWS(reader.frame(-1));
  }
  SECTION("missing directory") { REQUIRE_THROWS(DatasetReader("/nonexistent/mmp")); }
  SECTION("corruption produces descriptive errors") {
    const fs::path victim = fs::temp_directory_path() / "mmp_corrupt.bin";
    {
      std::ifstream in(dir / "frame_000000.bin", std::ios::binary);
      std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      std::ofstream out(victim, std::ios::binary);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    REQUIRE_THROWS_WITH(read_frame(victim.string()),
                        Catch::Matchers::ContainsSubstring("truncated"));
    {
      std::ofstream out(victim, std::ios::binary);
      out << "XXXXGARBAGE";
    }
    REQUIRE_THROWS_WITH(read_frame(victim.string()),
                        Catch::Matchers::ContainsSubstring("magic"));
    {
      std::ofstream out(victim, std::ios::binary);
      out.write(kFrameMagic, 4);
      const char v = 9;
      out.write(&v, 1);
      const double zeros[16] = {};
      out.write(reinterpret_cast<const char*>(zeros), sizeof(zeros));
    }
    REQUIRE_THROWS_WITH(read_frame(victim.string()),
                        Catch::Matchers::ContainsSubstring("version"));
  }
}
