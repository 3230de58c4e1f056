#include "poselift/pose_io.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "poselift/errors.hpp"

namespace poselift {

using nlohmann::json;

namespace {

json encode_record(const PoseRecord& r) {
  json p2d = json::array();
  for (const auto& p : r.p2d.joints) p2d.push_back({p.x(), p.y()});
  json p3d = nullptr;
  if (r.p3d) {
    p3d = json::array();
    for (const auto& p : r.p3d->joints) p3d.push_back({p.x(), p.y(), p.z()});
  }
  return json{{"id", r.id}, {"topology", r.topology}, {"p2d", std::move(p2d)}, {"p3d", std::move(p3d)}};
}

template <int D>
std::vector<Eigen::Matrix<double, D, 1>> decode_points(const json& arr, size_t line, const char* field) {
  if (!arr.is_array()) throw FormatError("line " + std::to_string(line) + ": field '" + field + "' is not an array");
  std::vector<Eigen::Matrix<double, D, 1>> out;
  out.reserve(arr.size());
  for (const auto& pt : arr) {
    if (!pt.is_array() || pt.size() != D)
      throw FormatError("line " + std::to_string(line) + ": field '" + field + "' needs " + std::to_string(D) +
                        " coordinates per joint");
    Eigen::Matrix<double, D, 1> v;
    for (int d = 0; d < D; ++d) {
      if (!pt[d].is_number())
        throw FormatError("line " + std::to_string(line) + ": non-numeric coordinate in '" + field + "'");
      v[d] = pt[d].get<double>();
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace

void write_pose_records(std::ostream& out, std::span<const PoseRecord> records) {
  for (const auto& r : records) out << encode_record(r).dump() << '\n';
}

void write_pose_file(const std::filesystem::path& path, std::span<const PoseRecord> records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_pose_records(out, records);
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<PoseRecord> read_pose_records(std::istream& in, const SkeletonTopology& expected) {
  std::vector<PoseRecord> records;
  std::string text;
  size_t line = 0;
  const size_t J = static_cast<size_t>(expected.joint_count());
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw FormatError("line " + std::to_string(line) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("p2d") || !j.contains("topology"))
      throw FormatError("line " + std::to_string(line) + ": record needs 'topology' and 'p2d'");
    PoseRecord r;
    if (!j["topology"].is_string()) throw FormatError("line " + std::to_string(line) + ": 'topology' must be a string");
    r.topology = j["topology"].get<std::string>();
    if (j.contains("id")) {
      if (!j["id"].is_string()) throw FormatError("line " + std::to_string(line) + ": 'id' must be a string");
      r.id = j["id"].get<std::string>();
    }
    r.p2d.joints = decode_points<2>(j["p2d"], line, "p2d");
    if (j.contains("p3d") && !j["p3d"].is_null()) r.p3d = Pose3D{decode_points<3>(j["p3d"], line, "p3d")};

    if (r.topology != expected.name())
      throw TopologyMismatchError("line " + std::to_string(line) + ": record topology '" + r.topology +
                                  "' but expected '" + expected.name() + "'");
    if (r.p2d.joints.size() != J || (r.p3d && r.p3d->joints.size() != J))
      throw TopologyMismatchError("line " + std::to_string(line) + ": record has " +
                                  std::to_string(r.p2d.joints.size()) + " joints, " + expected.name() +
                                  " has " + std::to_string(J));
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<PoseRecord> read_pose_file(const std::filesystem::path& path, const SkeletonTopology& expected) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return read_pose_records(in, expected);
}

nlohmann::json topology_to_json(const SkeletonTopology& topology) {
  json edges = json::array();
  for (const auto& b : topology.bones()) edges.push_back({b.parent, b.child});
  return {{"name", topology.name()},
          {"joints", topology.joint_names()},
          {"parent", topology.parent()},
          {"edges", edges},
          {"root", topology.root()}};
}

SkeletonTopology topology_from_json(const nlohmann::json& j, const std::string& fallback_name) {
  try {
    auto joints = j.at("joints").get<std::vector<std::string>>();
    auto parent = j.at("parent").get<std::vector<int>>();
    std::vector<Bone> bones;
    for (const auto& e : j.at("edges")) bones.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
    const std::string name = j.value("name", fallback_name);
    const int root = j.value("root", 0);
    return validate_topology(SkeletonTopology(name, std::move(joints), std::move(parent), std::move(bones), root));
  } catch (const json::exception& e) {
    throw FormatError(std::string("topology descriptor: ") + e.what());
  }
}

SkeletonTopology read_topology_descriptor(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return topology_from_json(j, path.stem().string());
}

void write_topology_descriptor(const std::filesystem::path& path, const SkeletonTopology& topology) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << topology_to_json(topology).dump(2) << '\n';
}

SkeletonTopology resolve_topology(const std::string& name_or_path) {
  for (const auto& preset : preset_topology_names())
    if (preset == name_or_path) return topology_by_name(preset);
  if (std::filesystem::exists(name_or_path)) return read_topology_descriptor(name_or_path);
  throw ConfigError("'" + name_or_path + "' is neither a topology preset nor a descriptor file");
}

}  // namespace poselift
