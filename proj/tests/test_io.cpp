#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "posefield/geom.hpp"
#include "posefield/io.hpp"

using namespace posefield;

namespace {

std::string tmp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "posefield_io_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("pfm single pixel roundtrips bit-exactly") {
  Image img(1, 1, 1);
  img.at(0, 0, 0) = 3.25;  // exactly representable in float32
  auto path = tmp_path("one.pfm");
  write_pfm(path, img);
  Image back = read_pfm(path);
  CHECK(back.width == 1);
  CHECK(back.height == 1);
  CHECK(back.at(0, 0, 0) == 3.25);
}

TEST_CASE("pfm header declares little-endian scale and bottom-up rows") {
  Image img(2, 2, 1);
  img.at(0, 0, 0) = 1.0;  // top-left
  img.at(1, 0, 0) = 2.0;
  img.at(0, 1, 0) = 3.0;  // bottom-left
  img.at(1, 1, 0) = 4.0;
  auto path = tmp_path("quad.pfm");
  write_pfm(path, img);
  std::string raw = read_text_file(path);
  CHECK(raw.rfind("Pf\n2 2\n-1.0\n", 0) == 0);
  // First stored float is the bottom row's left pixel.
  float first;
  std::memcpy(&first, raw.data() + std::strlen("Pf\n2 2\n-1.0\n"), 4);
  CHECK(first == 3.0f);
  Image back = read_pfm(path);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      CHECK(back.at(x, y, 0) == img.at(x, y, 0));
}

TEST_CASE("pfm rejects wrong magic and truncation") {
  auto path = tmp_path("bad.pfm");
  write_text_file(path, "PF\n1 1\n-1.0\nxxxx");
  CHECK_THROWS(read_pfm(path));  // color pfm unsupported
  write_text_file(path, "Pf\n2 2\n-1.0\nxxxx");
  CHECK_THROWS(read_pfm(path));  // 16 bytes needed, 4 given
  write_text_file(path, "Pf\n1 1\n1.0\nxxxx");
  CHECK_THROWS(read_pfm(path));  // big-endian unsupported
}

TEST_CASE("ppm roundtrips quantized values exactly") {
  Rng rng(7);
  Image img(32, 32, 3);
  for (auto& v : img.data) v = static_cast<int>(rng.uniform_int(256)) / 255.0;
  auto path = tmp_path("color.ppm");
  write_ppm(path, img);
  Image back = read_ppm(path);
  REQUIRE(back.width == 32);
  REQUIRE(back.height == 32);
  REQUIRE(back.channels == 3);
  for (size_t i = 0; i < img.data.size(); ++i) CHECK(back.data[i] == img.data[i]);
}

TEST_CASE("ppm clamps out-of-range values when writing") {
  Image img(1, 1, 3);
  img.at(0, 0, 0) = -0.5;
  img.at(0, 0, 1) = 2.0;
  img.at(0, 0, 2) = 0.5;
  auto path = tmp_path("clamp.ppm");
  write_ppm(path, img);
  Image back = read_ppm(path);
  CHECK(back.at(0, 0, 0) == 0.0);
  CHECK(back.at(0, 0, 1) == 1.0);
  CHECK(back.at(0, 0, 2) == doctest::Approx(0.5).epsilon(1e-2));
}

TEST_CASE("pgm roundtrips quantized values exactly") {
  Rng rng(11);
  Image img(16, 9, 1);
  for (auto& v : img.data) v = static_cast<int>(rng.uniform_int(256)) / 255.0;
  auto path = tmp_path("mask.pgm");
  write_pgm(path, img);
  Image back = read_pgm(path);
  REQUIRE(back.width == 16);
  REQUIRE(back.height == 9);
  for (size_t i = 0; i < img.data.size(); ++i) CHECK(back.data[i] == img.data[i]);
}

TEST_CASE("pose json canonicalizes the quaternion sign") {
  RigidTransform p;
  p.rotation = UnitQuaternion::exp_map(Vec3(0.3, -0.2, 0.9));
  p.translation = Vec3(1.0, -2.0, 0.25);
  std::string j = pose_to_json(p);
  RigidTransform q = pose_from_json(j);
  CHECK(dq_distance(p.rotation, q.rotation) < 1e-12);
  CHECK((p.translation - q.translation).norm() == 0.0);
  CHECK(q.rotation.w >= 0.0);

  // A negated quaternion on disk parses to the same canonical rotation.
  std::string flipped = "{\"q\":[-0.5,0.5,0.5,-0.5],\"t\":[0,0,0]}";
  RigidTransform r = pose_from_json(flipped);
  CHECK(r.rotation.w == doctest::Approx(0.5));
  CHECK(r.rotation.x == doctest::Approx(-0.5));
}

TEST_CASE("pose array roundtrip preserves every pose") {
  Rng rng(3);
  std::vector<RigidTransform> poses;
  for (int i = 0; i < 12; ++i) {
    RigidTransform p;
    p.rotation = random_rotation(rng);
    p.translation = Vec3(rng.normal(), rng.normal(), rng.normal());
    poses.push_back(p);
  }
  auto path = tmp_path("poses.json");
  write_pose_array(path, poses);
  auto back = read_pose_array(path);
  REQUIRE(back.size() == poses.size());
  for (size_t i = 0; i < poses.size(); ++i) {
    CHECK(dq_distance(poses[i].rotation, back[i].rotation) < 1e-14);
    CHECK((poses[i].translation - back[i].translation).norm() < 1e-14);
  }
}

TEST_CASE("manifest roundtrip is byte-identical on rewrite") {
  DatasetManifest m;
  m.near = 1.0;
  m.far = 3.5;
  for (int i = 0; i < 3; ++i) {
    FrameRecord fr;
    fr.image = "rgb_" + std::to_string(i) + ".ppm";
    fr.depth = "depth_" + std::to_string(i) + ".pfm";
    fr.mask = "mask_" + std::to_string(i) + ".pgm";
    RigidTransform p;
    p.rotation = UnitQuaternion::exp_map(Vec3(0.1 * i, 0.2, -0.05 * i));
    p.translation = Vec3(i, 0.5, -1);
    fr.pose = p;
    fr.gt_pose = p;
    fr.intrinsics = CameraIntrinsics(48, 48, 16, 16);
    fr.split = (i == 2) ? "test" : "train";
    m.frames.push_back(fr);
  }
  PoseGraphEdgeRecord e;
  e.i = 0;
  e.j = 1;
  e.q_rel = UnitQuaternion::exp_map(Vec3(0, 0.3, 0));
  e.t_rel = Vec3(0.1, 0.2, 0.3);
  m.pose_graph.push_back(e);

  auto path1 = tmp_path("scene1.json");
  auto path2 = tmp_path("scene2.json");
  write_manifest(path1, m);
  DatasetManifest back = read_manifest(path1);
  write_manifest(path2, back);
  CHECK(read_text_file(path1) == read_text_file(path2));

  REQUIRE(back.frames.size() == 3);
  CHECK(back.near == 1.0);
  CHECK(back.far == 3.5);
  CHECK(back.frames[2].split == "test");
  CHECK(back.frames[1].intrinsics->fx == 48.0);
  REQUIRE(back.pose_graph.size() == 1);
  CHECK(back.pose_graph[0].j == 1);
  CHECK(back.pose_graph[0].t_rel.has_value());
}

TEST_CASE("manifest validation names the offending frame") {
  DatasetManifest empty;
  empty.near = 1;
  empty.far = 2;
  CHECK_THROWS_WITH_AS(write_manifest(tmp_path("e.json"), empty),
                       "manifest must contain at least one frame", std::runtime_error);

  auto path = tmp_path("bad_manifest.json");
  write_text_file(path,
      "{\"schema\":1,\"near\":1.0,\"far\":2.0,\"frames\":[{\"image\":\"a.ppm\"},{\"split\":\"train\"}]}");
  CHECK_THROWS_WITH_AS(read_manifest(path), "frame 1 missing image path", std::runtime_error);

  write_text_file(path, "{\"schema\":2,\"near\":1.0,\"far\":2.0,\"frames\":[{\"image\":\"a\"}]}");
  CHECK_THROWS(read_manifest(path));

  write_text_file(path, "{\"schema\":1,\"near\":2.0,\"far\":1.0,\"frames\":[{\"image\":\"a\"}]}");
  CHECK_THROWS(read_manifest(path));
}

TEST_CASE("graph jsonl roundtrips edges and ground truth") {
  Rng rng(5);
  std::vector<SerializedGraph> graphs;
  for (int g = 0; g < 4; ++g) {
    SerializedGraph sg;
    sg.n = 5 + g;
    for (int i = 0; i + 1 < sg.n; ++i)
      sg.edges.emplace_back(i, i + 1, random_rotation(rng));
    if (g % 2 == 0)
      for (int i = 0; i < sg.n; ++i) sg.gt.push_back(random_rotation(rng));
    graphs.push_back(std::move(sg));
  }
  auto path = tmp_path("graphs.jsonl");
  write_graphs_jsonl(path, graphs);
  auto back = read_graphs_jsonl(path);
  REQUIRE(back.size() == 4);
  for (size_t g = 0; g < 4; ++g) {
    CHECK(back[g].n == graphs[g].n);
    REQUIRE(back[g].edges.size() == graphs[g].edges.size());
    for (size_t e = 0; e < back[g].edges.size(); ++e) {
      CHECK(std::get<0>(back[g].edges[e]) == std::get<0>(graphs[g].edges[e]));
      CHECK(dq_distance(std::get<2>(back[g].edges[e]), std::get<2>(graphs[g].edges[e])) < 1e-14);
    }
    CHECK(back[g].gt.size() == graphs[g].gt.size());
  }

  write_text_file(path, "{\"n\":2,\"edges\":[[0,5,[1,0,0,0]]]}\n");
  CHECK_THROWS(read_graphs_jsonl(path));
}

TEST_CASE("config parses sections, comments, and typed values") {
  std::string text =
      "# trailing comment lines are ignored\n"
      "[scene]\n"
      "width = 32   # inline\n"
      "noise_deg = 5.0\n"
      "name = spheres\n"
      "[schedule]\n"
      "steps = 1500\n"
      "use_depth = true\n";
  KeyValueConfig cfg = KeyValueConfig::parse(text);
  CHECK(cfg.get_int("scene", "width", -1) == 32);
  CHECK(cfg.get_double("scene", "noise_deg", 0.0) == 5.0);
  CHECK(cfg.get("scene", "name", "") == "spheres");
  CHECK(cfg.get_int("schedule", "steps", 0) == 1500);
  CHECK(cfg.get_bool("schedule", "use_depth", false) == true);
  CHECK(cfg.get_bool("schedule", "missing", false) == false);
  CHECK(cfg.has("scene", "width"));
  CHECK(!cfg.has("scene", "steps"));
  CHECK_THROWS(KeyValueConfig::parse("[open\n"));
  CHECK_THROWS(KeyValueConfig::parse("novalue\n"));
  CHECK_THROWS(cfg.get_int("scene", "name", 0));
}

TEST_CASE("csv writer formats deterministically") {
  CsvWriter csv({"step", "loss"});
  csv.add_row({0, 0.125});
  csv.add_row({1, 1.0 / 3.0});
  CHECK(csv.str() == "step,loss\n0,0.125\n1,0.3333333333\n");
  CHECK_THROWS(csv.add_row({1.0}));
}

TEST_CASE("fnv1a64 matches reference vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}

}  // TEST_SUITE
