#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "posefield/geom.hpp"

namespace posefield {

// Row-major interleaved image, values in [0,1] for color, raw units for depth.
struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c) : width(w), height(h), channels(c),
                               data(static_cast<size_t>(w) * h * c, 0.0) {}
  double& at(int x, int y, int c_) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c_];
  }
  double at(int x, int y, int c_) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c_];
  }
};

// 8-bit binary PPM (P6), 3 channels.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

// Grayscale PFM (Pf), float32, bottom-up rows, scale -1.0 (little-endian).
void write_pfm(const std::string& path, const Image& img);
Image read_pfm(const std::string& path);

// 8-bit binary PGM (P5), 1 channel.
void write_pgm(const std::string& path, const Image& img);
Image read_pgm(const std::string& path);

// Pose JSON: {"q": [w,x,y,z], "t": [tx,ty,tz]}, quaternion canonical w >= 0.
std::string pose_to_json(const RigidTransform& pose);
RigidTransform pose_from_json(const std::string& json_text);
void write_pose_array(const std::string& path, const std::vector<RigidTransform>& poses);
std::vector<RigidTransform> read_pose_array(const std::string& path);

struct FrameRecord {
  std::string image;                    // relative path
  std::string depth;                    // optional, "" if absent
  std::string mask;                     // optional
  std::optional<RigidTransform> pose;   // initial estimate
  std::optional<RigidTransform> gt_pose;
  std::optional<CameraIntrinsics> intrinsics;
  std::string split = "train";
};

struct PoseGraphEdgeRecord {
  int i = 0, j = 0;
  UnitQuaternion q_rel;
  std::optional<Vec3> t_rel;
};

// On-disk dataset description, schema 1. Paths are relative to the manifest.
struct DatasetManifest {
  double near = 0.0, far = 0.0;
  std::vector<FrameRecord> frames;
  std::vector<PoseGraphEdgeRecord> pose_graph;  // measured relatives, optional
};

void write_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& path);

// One graph per line: {"n":int,"edges":[[i,j,[w,x,y,z]],...],"gt":[[w,x,y,z],...]}.
struct SerializedGraph {
  int n = 0;
  std::vector<std::tuple<int, int, UnitQuaternion>> edges;
  std::vector<UnitQuaternion> gt;  // empty when absent
};

void write_graphs_jsonl(const std::string& path, const std::vector<SerializedGraph>& graphs);
std::vector<SerializedGraph> read_graphs_jsonl(const std::string& path);

// Deterministic CSV writer: fixed "%.10g" formatting, "\n" rows.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  void add_row(const std::vector<double>& values);
  void add_row_mixed(const std::vector<std::string>& values);
  void save(const std::string& path) const;
  std::string str() const;

 private:
  std::vector<std::string> header_;
  std::vector<std::string> rows_;
};

std::string format_double(double v);  // %.10g

// Sectioned key-value config: [section] lines, key = value, '#' comments.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  int get_int(const std::string& section, const std::string& key, int fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  const std::string& text() const { return text_; }

 private:
  std::string text_;
  std::map<std::string, std::string> values_;  // "section.key" -> value
};

uint64_t fnv1a64(const std::string& bytes);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
void ensure_directory(const std::string& path);
bool file_exists(const std::string& path);

}  // namespace posefield
