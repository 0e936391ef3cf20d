#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "geofuse/geometry.hpp"
#include "geofuse/mapbuilder.hpp"
#include "geofuse/worldsim.hpp"

namespace geofuse {

struct RetrievalParams {
    int k = 5;
    int overfetch_factor = 10;   // retrieve top overfetch_factor * k before filtering
    double prior_radius = 10.0;  // m
    double nms_radius = 1.0;     // m
};

struct RetrievalResult {
    std::vector<uint64_t> image_ids;  // score order after NMS
    bool shortfall = false;           // fewer than k returned
};

RetrievalResult retrieve_references(const MapIndex& index, const Eigen::VectorXf& query_global,
                                    const std::optional<Pose>& prior,
                                    const RetrievalParams& params);

struct Match2D3D {
    int query_kp_index = 0;
    uint64_t landmark_id = 0;
    Eigen::Vector3d p3d = Eigen::Vector3d::Zero();
    Eigen::Vector2d pixel = Eigen::Vector2d::Zero();  // query keypoint
    float descriptor_distance = 0.0f;
};

struct QueryFeatures {
    std::vector<Eigen::Vector2f> keypoints;
    Eigen::MatrixXf descriptors;  // K x D
    Eigen::VectorXf global_descriptor;

    static QueryFeatures from_observation(const FrameObservation& obs);
};

// Lowe ratio test per query keypoint against the landmarks' descriptors;
// a missing second neighbor counts as passing.
std::vector<Match2D3D> knn_match(const QueryFeatures& query,
                                 const std::vector<MapLandmark>& landmarks, float ratio);

struct PnpParams {
    int iterations = 200;
    double reproj_threshold_px = 3.0;
};

struct PnpResult {
    Pose pose;
    std::vector<int> inlier_indices;
};

// RANSAC over 6-point DLT hypotheses, Gauss-Newton polish on the consensus
// set. Throws TooFewMatches (< 6 input) / NoConsensus (< 6 inliers).
PnpResult pnp_ransac(const std::vector<Match2D3D>& matches, const CameraModel& cam,
                     const PnpParams& params, uint64_t seed);

// DBSCAN labels under d(a,b) = ||t_a - t_b|| + lambda * angle(q_a, q_b);
// -1 marks noise. dbscan_poses returns the largest cluster's member indices
// (ties toward the lower cluster id).
std::vector<int> dbscan_labels(const std::vector<Pose>& poses, double eps, int min_pts,
                               double lambda);
std::vector<int> dbscan_poses(const std::vector<Pose>& poses, double eps, int min_pts,
                              double lambda = 1.0);

// Levenberg-Marquardt over the 6-DoF pose, Huber-robust reprojection cost.
// Matches are deduplicated by landmark id (smallest descriptor distance wins).
Pose refine_pose(const Pose& coarse, const std::vector<Match2D3D>& matches,
                 const CameraModel& cam, double huber_px = 3.0, int max_iterations = 15);

std::vector<Match2D3D> dedup_matches(const std::vector<Match2D3D>& matches);

struct ConstraintParams {
    double delta_L = 1.0;                 // m
    double delta_theta = 0.1;             // rad
    double camera_radius = 15.0;          // m, reference-camera prefilter
    double camera_normal_max_angle = 1.2; // rad, optical-axis prefilter
};

using ShardAccess = std::function<std::shared_ptr<const MapShard>(uint64_t image_id)>;

// Cameras near the coarse pose with similar optical axes are selected, their
// shards' landmarks unioned (dedup by id, first wins), then filtered by the
// cone conditions with the delta margins.
std::vector<MapLandmark> observation_constraint_landmarks(const MapIndex& index,
                                                          const ShardAccess& shards,
                                                          const Pose& coarse,
                                                          const ConstraintParams& params);

enum class LocalizeStage : uint8_t {
    none = 0,
    bad_request = 1,
    retrieval = 2,
    match_first = 3,
    pnp = 4,
    cluster = 5,
    refine_first = 6,
    constraint = 7,
    match_second = 8,
    refine_second = 9,
};

const char* localize_stage_name(LocalizeStage stage);

struct LocalizeParams {
    RetrievalParams retrieval;
    float ratio = 0.85f;
    PnpParams pnp;
    double dbscan_eps = 0.5;
    int dbscan_min_pts = 2;
    double pose_lambda = 1.0;  // m per rad, DBSCAN metric mix
    ConstraintParams constraint;
    double huber_px = 3.0;
    int workers = 1;
};

struct LocalizeResult {
    bool ok = false;
    Pose pose;
    int inlier_count = 0;
    int first_pass_inliers = 0;
    LocalizeStage failure_stage = LocalizeStage::none;
    std::string reason;

    static LocalizeResult failed(LocalizeStage stage, std::string why) {
        LocalizeResult r;
        r.failure_stage = stage;
        r.reason = std::move(why);
        return r;
    }
};

LocalizeResult localize(const MapIndex& index, const CameraModel& cam,
                        const ShardAccess& shards, const QueryFeatures& query,
                        const std::optional<Pose>& prior, const LocalizeParams& params,
                        uint64_t seed);

}  // namespace geofuse
