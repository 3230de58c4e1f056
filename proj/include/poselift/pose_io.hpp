#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "poselift/skeleton.hpp"

namespace poselift {

// One line of a pose file:
//   {"topology": name, "p2d": [[x,y]...], "p3d": [[X,Y,Z]...] | null, "id": string}
struct PoseRecord {
  std::string id;
  std::string topology;
  Pose2D p2d;
  std::optional<Pose3D> p3d;
};

void write_pose_records(std::ostream& out, std::span<const PoseRecord> records);
void write_pose_file(const std::filesystem::path& path, std::span<const PoseRecord> records);

// Every record must name `expected` and carry its joint count; otherwise
// TopologyMismatchError. Malformed lines raise FormatError naming the line.
std::vector<PoseRecord> read_pose_records(std::istream& in, const SkeletonTopology& expected);
std::vector<PoseRecord> read_pose_file(const std::filesystem::path& path, const SkeletonTopology& expected);

// Topology descriptor: {"name": ..., "joints": [...], "parent": [...], "edges": [[i,j],...], "root": 0}
nlohmann::json topology_to_json(const SkeletonTopology& topology);
SkeletonTopology topology_from_json(const nlohmann::json& j, const std::string& fallback_name = "custom");
SkeletonTopology read_topology_descriptor(const std::filesystem::path& path);
void write_topology_descriptor(const std::filesystem::path& path, const SkeletonTopology& topology);

// Preset name or path to a descriptor file.
SkeletonTopology resolve_topology(const std::string& name_or_path);

}  // namespace poselift
