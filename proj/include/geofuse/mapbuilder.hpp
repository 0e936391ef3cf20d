#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "geofuse/geometry.hpp"
#include "geofuse/worldsim.hpp"

namespace geofuse {

// Per-landmark visibility region from the mapping views; stored at f32
// precision to match the shard layout bit-exactly. theta and L are rounded
// up when quantizing so every observing camera still passes the constraint
// checks with zero margin.
struct ObservationCone {
    Eigen::Vector3f n = Eigen::Vector3f::UnitZ();  // mean visible direction
    float theta = 0.0f;                            // max visible angle, rad
    float L = 1.0f;                                // max visible distance, m
};

// 2 * acos(n . unit(viewpoint - p3d)); shared by cone construction and the
// constraint check so the boundary camera compares equal, not merely close.
double cone_view_angle(const Eigen::Vector3f& n, const Eigen::Vector3d& p3d,
                       const Eigen::Vector3d& viewpoint);

bool cone_admits(const ObservationCone& cone, const Eigen::Vector3d& p3d,
                 const Eigen::Vector3d& viewpoint, double delta_L, double delta_theta);

struct MapLandmark {
    uint64_t id = 0;
    Eigen::Vector3d p3d = Eigen::Vector3d::Zero();
    ObservationCone cone;
    Eigen::Vector2f obs2d = Eigen::Vector2f::Zero();  // this image's observation
    Eigen::VectorXf descriptor;                       // this image's descriptor
};

struct MapIndexEntry {
    uint64_t image_id = 0;
    Pose pose;
    Eigen::VectorXf global_descriptor;
    std::string shard_path;
};

struct MapIndex {
    int global_dim = 0;
    std::vector<MapIndexEntry> entries;

    const MapIndexEntry* find(uint64_t image_id) const;
};

struct MapShard {
    uint64_t image_id = 0;
    int descriptor_dim = 0;
    std::vector<MapLandmark> landmarks;
};

struct BuildParams {
    double min_baseline = 1e-3;   // m
    int gn_iterations = 10;
    double max_reproj_px = 2.0;   // observation pruning gate
};

// Multi-view DLT followed by Gauss-Newton reprojection refinement.
// observations: (camera pose body->world, pixel).
Eigen::Vector3d triangulate_landmark(
    const std::vector<std::pair<Pose, Eigen::Vector2d>>& observations,
    const CameraModel& cam, const BuildParams& params = {});

ObservationCone compute_cone(const Eigen::Vector3d& p3d,
                             const std::vector<Eigen::Vector3d>& camera_centers);

std::pair<MapIndex, std::vector<MapShard>> build_map(
    const std::vector<FrameObservation>& frames, const CameraModel& cam,
    const BuildParams& params = {});

// --- binary serialization -------------------------------------------------
// map.idx: "GFMI", version u16=1, G u16, N u32, then per entry:
//   image_id u64, pose 7xf64 (tx ty tz qw qx qy qz), global desc Gxf32,
//   shard filename u16 length + UTF-8 bytes.
// shard_<image_id>.bin: "GFMS", version u16=1, D u16, M u32, then per landmark:
//   id u64, p3d 3xf64, n 3xf32, theta f32, L f32, obs2d 2xf32, desc Dxf32.
// All little-endian.

void write_map(const MapIndex& index, const std::vector<MapShard>& shards,
               const std::string& dir);

MapShard read_shard_file(const std::string& path);

// Loads only the index; shards load on demand through load().
class ShardReader {
public:
    ShardReader() = default;
    ShardReader(std::string dir, const MapIndex& index);

    std::shared_ptr<const MapShard> load(uint64_t image_id) const;
    const std::string& dir() const { return dir_; }

private:
    std::string dir_;
    std::unordered_map<uint64_t, std::string> paths_;
};

std::pair<MapIndex, ShardReader> read_map(const std::string& dir);

}  // namespace geofuse
