#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

#include "geofuse/geometry.hpp"

namespace geofuse {

struct World {
    struct Landmark {
        uint64_t id;
        Eigen::Vector3d position;
    };
    std::vector<Landmark> landmarks;
    int descriptor_dim = 64;
    int global_dim = 256;
    uint64_t rng_seed = 0;
};

struct CameraModel {
    double fx = 400.0, fy = 400.0;
    double cx = 320.0, cy = 240.0;
    int width = 640, height = 480;
    double max_range = 35.0;

    bool valid() const {
        return fx > 0 && fy > 0 && cx > 0 && cx < width && cy > 0 && cy < height;
    }
};

struct NoiseSpec {
    double vio_trans_sigma = 0.0;   // m per step
    double vio_rot_sigma = 0.0;     // rad per step
    double vio_bias_walk = 0.0;     // m per step, slow translation bias walk
    double pixel_sigma = 0.0;       // px
    double descriptor_sigma = 0.0;
    double vls_outlier_rate = 0.0;  // [0, 1]
};

struct FrameObservation {
    double timestamp = 0.0;
    Pose true_pose;
    bool is_keyframe = false;
    struct Keypoint {
        uint64_t landmark_id;
        double u, v;  // full precision; wire and shard layouts quantize to f32
    };
    std::vector<Keypoint> keypoints;
    Eigen::MatrixXf local_descriptors;  // K x D, rows unit-norm
    Eigen::VectorXf global_descriptor;  // G, unit-norm
};

struct TimedPose {
    double timestamp;
    Pose pose;
    bool is_keyframe;
};

enum class TrajectoryShape { circle, figure_eight, waypoints };
TrajectoryShape trajectory_shape_from_string(const std::string& s);

struct TrajectoryOptions {
    double speed = 1.0;         // m/s
    double height = 1.5;        // camera z, meters
    double phase = 0.0;         // start offset along the path, radians of parameter
    double radial_offset = 0.0; // grow/shrink the path, meters
};

World generate_world(int n_landmarks, const Eigen::Vector3d& extent, uint64_t seed,
                     int descriptor_dim = 64, int global_dim = 256);

std::vector<TimedPose> generate_trajectory(TrajectoryShape shape, double length_m,
                                           double frame_hz, int keyframe_every, uint64_t seed,
                                           const TrajectoryOptions& opt = {});

// Seeded per-landmark descriptor model. Same landmark always yields the same
// base vectors for a given world seed, which is what makes nearest-descriptor
// matching meaningful without a learned extractor.
Eigen::VectorXf landmark_descriptor(uint64_t world_seed, uint64_t landmark_id, int dim);
Eigen::VectorXf landmark_global_vec(uint64_t world_seed, uint64_t landmark_id, int dim);

// Projects p3d into the camera at `pose` (body -> world). Returns false when
// the point is behind the camera.
bool project_point(const CameraModel& cam, const Pose& pose, const Eigen::Vector3d& p3d,
                   Eigen::Vector2d* pixel);

FrameObservation render_observations(const World& world, const CameraModel& cam,
                                     const Pose& pose, const NoiseSpec& noise, uint64_t seed,
                                     double timestamp = 0.0, bool is_keyframe = false);

// Drifting VIO stand-in: first output pose is identity (odometry frame anchored
// at frame 0), each step composes the true relative motion corrupted by white
// noise plus a translation bias random walk.
std::vector<TimedPose> simulate_vio(const std::vector<TimedPose>& true_traj,
                                    const NoiseSpec& noise, uint64_t seed);

}  // namespace geofuse
