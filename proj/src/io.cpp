#include "posefield/io.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace posefield {

using nlohmann::json;

namespace {

std::string binary_read_all(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void binary_write_all(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("short write: " + path);
}

// Reads one whitespace-delimited token, skipping '#' comment lines.
std::string next_token(const std::string& buf, size_t& pos, const std::string& path) {
  while (pos < buf.size()) {
    char c = buf[pos];
    if (c == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++pos;
    } else {
      break;
    }
  }
  size_t start = pos;
  while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
  if (start == pos) throw std::runtime_error("truncated header: " + path);
  return buf.substr(start, pos - start);
}

uint8_t to_byte(double v) {
  double s = std::clamp(v, 0.0, 1.0) * 255.0;
  return static_cast<uint8_t>(std::lround(s));
}

json pose_to_json_obj(const RigidTransform& pose) {
  UnitQuaternion q = pose.rotation;  // constructor already canonicalizes w >= 0
  return json{{"q", {q.w, q.x, q.y, q.z}},
              {"t", {pose.translation.x(), pose.translation.y(), pose.translation.z()}}};
}

RigidTransform pose_from_json_obj(const json& j) {
  if (!j.contains("q") || !j.contains("t"))
    throw std::runtime_error("pose object must contain q and t");
  auto q = j.at("q");
  auto t = j.at("t");
  if (q.size() != 4 || t.size() != 3)
    throw std::runtime_error("pose q must have 4 entries and t 3");
  RigidTransform p;
  p.rotation = UnitQuaternion(q[0].get<double>(), q[1].get<double>(),
                              q[2].get<double>(), q[3].get<double>());
  p.translation = Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
  return p;
}

json quat_to_array(const UnitQuaternion& q) { return json{q.w, q.x, q.y, q.z}; }

UnitQuaternion quat_from_array(const json& a) {
  if (a.size() != 4) throw std::runtime_error("quaternion array must have 4 entries");
  return UnitQuaternion(a[0].get<double>(), a[1].get<double>(),
                        a[2].get<double>(), a[3].get<double>());
}

}  // namespace

void write_ppm(const std::string& path, const Image& img) {
  if (img.channels != 3) throw std::runtime_error("write_ppm requires 3 channels");
  std::string out = "P6\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + static_cast<size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.push_back(static_cast<char>(to_byte(img.at(x, y, c))));
  binary_write_all(path, out);
}

Image read_ppm(const std::string& path) {
  std::string buf = binary_read_all(path);
  size_t pos = 0;
  if (next_token(buf, pos, path) != "P6") throw std::runtime_error("not a P6 ppm: " + path);
  int w = std::stoi(next_token(buf, pos, path));
  int h = std::stoi(next_token(buf, pos, path));
  int maxval = std::stoi(next_token(buf, pos, path));
  if (maxval != 255) throw std::runtime_error("unsupported ppm maxval: " + path);
  ++pos;  // single whitespace byte after maxval
  size_t need = static_cast<size_t>(w) * h * 3;
  if (buf.size() - pos < need) throw std::runtime_error("truncated ppm payload: " + path);
  Image img(w, h, 3);
  for (size_t i = 0; i < need; ++i)
    img.data[i] = static_cast<uint8_t>(buf[pos + i]) / 255.0;
  return img;
}

void write_pgm(const std::string& path, const Image& img) {
  if (img.channels != 1) throw std::runtime_error("write_pgm requires 1 channel");
  std::string out = "P5\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.push_back(static_cast<char>(to_byte(img.at(x, y, 0))));
  binary_write_all(path, out);
}

Image read_pgm(const std::string& path) {
  std::string buf = binary_read_all(path);
  size_t pos = 0;
  if (next_token(buf, pos, path) != "P5") throw std::runtime_error("not a P5 pgm: " + path);
  int w = std::stoi(next_token(buf, pos, path));
  int h = std::stoi(next_token(buf, pos, path));
  int maxval = std::stoi(next_token(buf, pos, path));
  if (maxval != 255) throw std::runtime_error("unsupported pgm maxval: " + path);
  ++pos;
  size_t need = static_cast<size_t>(w) * h;
  if (buf.size() - pos < need) throw std::runtime_error("truncated pgm payload: " + path);
  Image img(w, h, 1);
  for (size_t i = 0; i < need; ++i)
    img.data[i] = static_cast<uint8_t>(buf[pos + i]) / 255.0;
  return img;
}

void write_pfm(const std::string& path, const Image& img) {
  if (img.channels != 1) throw std::runtime_error("write_pfm requires 1 channel");
  // Scale -1.0 declares little-endian floats; rows are stored bottom-up.
  std::string out = "Pf\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n-1.0\n";
  static_assert(sizeof(float) == 4);
  for (int y = img.height - 1; y >= 0; --y) {
    for (int x = 0; x < img.width; ++x) {
      float v = static_cast<float>(img.at(x, y, 0));
      char bytes[4];
      std::memcpy(bytes, &v, 4);
      out.append(bytes, 4);
    }
  }
  binary_write_all(path, out);
}

Image read_pfm(const std::string& path) {
  std::string buf = binary_read_all(path);
  size_t pos = 0;
  std::string magic = next_token(buf, pos, path);
  if (magic != "Pf") throw std::runtime_error("not a grayscale pfm: " + path);
  int w = std::stoi(next_token(buf, pos, path));
  int h = std::stoi(next_token(buf, pos, path));
  double scale = std::stod(next_token(buf, pos, path));
  if (scale >= 0.0) throw std::runtime_error("big-endian pfm unsupported: " + path);
  ++pos;
  size_t need = static_cast<size_t>(w) * h * 4;
  if (buf.size() - pos < need) throw std::runtime_error("truncated pfm payload: " + path);
  Image img(w, h, 1);
  for (int y = h - 1; y >= 0; --y) {
    for (int x = 0; x < w; ++x) {
      float v;
      std::memcpy(&v, buf.data() + pos, 4);
      pos += 4;
      img.at(x, y, 0) = static_cast<double>(v);
    }
  }
  return img;
}

std::string pose_to_json(const RigidTransform& pose) { return pose_to_json_obj(pose).dump(); }

RigidTransform pose_from_json(const std::string& json_text) {
  return pose_from_json_obj(json::parse(json_text));
}

void write_pose_array(const std::string& path, const std::vector<RigidTransform>& poses) {
  json arr = json::array();
  for (const auto& p : poses) arr.push_back(pose_to_json_obj(p));
  binary_write_all(path, arr.dump(2) + "\n");
}

std::vector<RigidTransform> read_pose_array(const std::string& path) {
  json arr = json::parse(binary_read_all(path));
  if (!arr.is_array()) throw std::runtime_error("pose file must hold a JSON array: " + path);
  std::vector<RigidTransform> poses;
  poses.reserve(arr.size());
  for (const auto& j : arr) poses.push_back(pose_from_json_obj(j));
  return poses;
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
  if (m.frames.empty()) throw std::runtime_error("manifest must contain at least one frame");
  json root;
  root["schema"] = 1;
  root["near"] = m.near;
  root["far"] = m.far;
  json frames = json::array();
  for (const auto& fr : m.frames) {
    if (fr.image.empty()) throw std::runtime_error("frame missing image path");
    json f;
    f["image"] = fr.image;
    if (!fr.depth.empty()) f["depth"] = fr.depth;
    if (!fr.mask.empty()) f["mask"] = fr.mask;
    if (fr.pose) f["pose"] = pose_to_json_obj(*fr.pose);
    if (fr.gt_pose) f["gt_pose"] = pose_to_json_obj(*fr.gt_pose);
    if (fr.intrinsics)
      f["intrinsics"] = json{{"fx", fr.intrinsics->fx}, {"fy", fr.intrinsics->fy},
                             {"cx", fr.intrinsics->cx}, {"cy", fr.intrinsics->cy}};
    f["split"] = fr.split;
    frames.push_back(std::move(f));
  }
  root["frames"] = std::move(frames);
  if (!m.pose_graph.empty()) {
    json edges = json::array();
    for (const auto& e : m.pose_graph) {
      json je;
      je["i"] = e.i;
      je["j"] = e.j;
      je["q"] = quat_to_array(e.q_rel);
      if (e.t_rel) je["t"] = {e.t_rel->x(), e.t_rel->y(), e.t_rel->z()};
      edges.push_back(std::move(je));
    }
    root["pose_graph"] = std::move(edges);
  }
  binary_write_all(path, root.dump(2) + "\n");
}

DatasetManifest read_manifest(const std::string& path) {
  json root = json::parse(binary_read_all(path));
  if (root.value("schema", 0) != 1)
    throw std::runtime_error("unsupported manifest schema in " + path);
  DatasetManifest m;
  m.near = root.at("near").get<double>();
  m.far = root.at("far").get<double>();
  if (!(m.near > 0.0) || !(m.far > m.near))
    throw std::runtime_error("manifest requires 0 < near < far: " + path);
  if (!root.contains("frames") || root.at("frames").empty())
    throw std::runtime_error("manifest must contain at least one frame: " + path);
  int idx = 0;
  for (const auto& f : root.at("frames")) {
    FrameRecord fr;
    if (!f.contains("image"))
      throw std::runtime_error("frame " + std::to_string(idx) + " missing image path");
    fr.image = f.at("image").get<std::string>();
    fr.depth = f.value("depth", "");
    fr.mask = f.value("mask", "");
    if (f.contains("pose")) fr.pose = pose_from_json_obj(f.at("pose"));
    if (f.contains("gt_pose")) fr.gt_pose = pose_from_json_obj(f.at("gt_pose"));
    if (f.contains("intrinsics")) {
      const auto& in = f.at("intrinsics");
      fr.intrinsics = CameraIntrinsics(in.at("fx").get<double>(), in.at("fy").get<double>(),
                                       in.at("cx").get<double>(), in.at("cy").get<double>());
    }
    fr.split = f.value("split", "train");
    if (fr.split != "train" && fr.split != "test")
      throw std::runtime_error("frame " + std::to_string(idx) + " has unknown split " + fr.split);
    m.frames.push_back(std::move(fr));
    ++idx;
  }
  if (root.contains("pose_graph")) {
    int n = static_cast<int>(m.frames.size());
    for (const auto& je : root.at("pose_graph")) {
      PoseGraphEdgeRecord e;
      e.i = je.at("i").get<int>();
      e.j = je.at("j").get<int>();
      if (e.i < 0 || e.j < 0 || e.i >= n || e.j >= n || e.i == e.j)
        throw std::runtime_error("pose_graph edge references invalid frame ids");
      e.q_rel = quat_from_array(je.at("q"));
      if (je.contains("t")) {
        const auto& t = je.at("t");
        e.t_rel = Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
      }
      m.pose_graph.push_back(std::move(e));
    }
  }
  return m;
}

void write_graphs_jsonl(const std::string& path, const std::vector<SerializedGraph>& graphs) {
  std::string out;
  for (const auto& g : graphs) {
    json j;
    j["n"] = g.n;
    json edges = json::array();
    for (const auto& [i, k, q] : g.edges) edges.push_back(json{i, k, quat_to_array(q)});
    j["edges"] = std::move(edges);
    if (!g.gt.empty()) {
      json gt = json::array();
      for (const auto& q : g.gt) gt.push_back(quat_to_array(q));
      j["gt"] = std::move(gt);
    }
    out += j.dump();
    out += "\n";
  }
  binary_write_all(path, out);
}

std::vector<SerializedGraph> read_graphs_jsonl(const std::string& path) {
  std::string buf = binary_read_all(path);
  std::vector<SerializedGraph> graphs;
  std::istringstream ss(buf);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& ex) {
      throw std::runtime_error("bad graph on line " + std::to_string(lineno) + ": " + ex.what());
    }
    SerializedGraph g;
    g.n = j.at("n").get<int>();
    if (g.n <= 0) throw std::runtime_error("graph line " + std::to_string(lineno) + ": n <= 0");
    for (const auto& e : j.at("edges")) {
      if (e.size() != 3) throw std::runtime_error("edge must be [i,j,quat]");
      int a = e[0].get<int>(), b = e[1].get<int>();
      if (a < 0 || b < 0 || a >= g.n || b >= g.n || a == b)
        throw std::runtime_error("graph line " + std::to_string(lineno) + ": bad edge ids");
      g.edges.emplace_back(a, b, quat_from_array(e[2]));
    }
    if (j.contains("gt")) {
      for (const auto& q : j.at("gt")) g.gt.push_back(quat_from_array(q));
      if (static_cast<int>(g.gt.size()) != g.n)
        throw std::runtime_error("graph line " + std::to_string(lineno) + ": gt size != n");
    }
    graphs.push_back(std::move(g));
  }
  return graphs;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

CsvWriter::CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}

void CsvWriter::add_row(const std::vector<double>& values) {
  if (values.size() != header_.size())
    throw std::runtime_error("csv row width mismatch");
  std::string row;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) row += ",";
    row += format_double(values[i]);
  }
  rows_.push_back(std::move(row));
}

void CsvWriter::add_row_mixed(const std::vector<std::string>& values) {
  if (values.size() != header_.size())
    throw std::runtime_error("csv row width mismatch");
  std::string row;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) row += ",";
    row += values[i];
  }
  rows_.push_back(std::move(row));
}

std::string CsvWriter::str() const {
  std::string out;
  for (size_t i = 0; i < header_.size(); ++i) {
    if (i) out += ",";
    out += header_[i];
  }
  out += "\n";
  for (const auto& r : rows_) {
    out += r;
    out += "\n";
  }
  return out;
}

void CsvWriter::save(const std::string& path) const { binary_write_all(path, str()); }

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
  KeyValueConfig cfg;
  cfg.text_ = text;
  std::istringstream ss(text);
  std::string line, section;
  int lineno = 0;
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(ss, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::runtime_error("config line " + std::to_string(lineno) + ": unclosed section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
    cfg.values_[section + "." + key] = value;
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::string& path) {
  return parse(binary_read_all(path));
}

bool KeyValueConfig::has(const std::string& section, const std::string& key) const {
  return values_.count(section + "." + key) > 0;
}

std::string KeyValueConfig::get(const std::string& section, const std::string& key,
                                const std::string& fallback) const {
  auto it = values_.find(section + "." + key);
  return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& section, const std::string& key,
                                  double fallback) const {
  auto it = values_.find(section + "." + key);
  if (it == values_.end()) return fallback;
  size_t used = 0;
  double v = std::stod(it->second, &used);
  if (used != it->second.size())
    throw std::runtime_error("config value " + section + "." + key + " is not a number");
  return v;
}

int KeyValueConfig::get_int(const std::string& section, const std::string& key,
                            int fallback) const {
  auto it = values_.find(section + "." + key);
  if (it == values_.end()) return fallback;
  size_t used = 0;
  int v = std::stoi(it->second, &used);
  if (used != it->second.size())
    throw std::runtime_error("config value " + section + "." + key + " is not an integer");
  return v;
}

bool KeyValueConfig::get_bool(const std::string& section, const std::string& key,
                              bool fallback) const {
  auto it = values_.find(section + "." + key);
  if (it == values_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw std::runtime_error("config value " + section + "." + key + " is not a bool");
}

uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string read_text_file(const std::string& path) { return binary_read_all(path); }

void write_text_file(const std::string& path, const std::string& content) {
  binary_write_all(path, content);
}

void ensure_directory(const std::string& path) {
  std::filesystem::create_directories(path);
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

}  // namespace posefield
