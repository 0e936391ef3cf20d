#include "geofuse/mapbuilder.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <map>

#include "geofuse/error.hpp"

namespace geofuse {

const MapIndexEntry* MapIndex::find(uint64_t image_id) const {
    for (const auto& e : entries) {
        if (e.image_id == image_id) return &e;
    }
    return nullptr;
}

double cone_view_angle(const Eigen::Vector3f& n, const Eigen::Vector3d& p3d,
                       const Eigen::Vector3d& viewpoint) {
    const Eigen::Vector3d dir = (viewpoint - p3d).normalized();
    const double dot = n.cast<double>().dot(dir);
    return 2.0 * std::acos(std::clamp(dot, -1.0, 1.0));
}

bool cone_admits(const ObservationCone& cone, const Eigen::Vector3d& p3d,
                 const Eigen::Vector3d& viewpoint, double delta_L, double delta_theta) {
    const double dist = (viewpoint - p3d).norm();
    if (dist > static_cast<double>(cone.L) + delta_L) return false;
    return cone_view_angle(cone.n, p3d, viewpoint) <=
           static_cast<double>(cone.theta) + delta_theta;
}

namespace {

// smallest f32 x with (double)x >= v
float round_up_f32(double v) {
    float f = static_cast<float>(v);
    if (static_cast<double>(f) < v) f = std::nextafterf(f, std::numeric_limits<float>::max());
    return f;
}

Eigen::Vector3d normalized_coords(const CameraModel& cam, const Eigen::Vector2d& px) {
    return {(px.x() - cam.cx) / cam.fx, (px.y() - cam.cy) / cam.fy, 1.0};
}

}  // namespace

Eigen::Vector3d triangulate_landmark(
    const std::vector<std::pair<Pose, Eigen::Vector2d>>& observations,
    const CameraModel& cam, const BuildParams& params) {
    const size_t n = observations.size();
    if (n < 2) throw Error(ErrorCode::InsufficientParallax, "need >= 2 observations");

    double max_baseline = 0.0;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            max_baseline = std::max(
                max_baseline, (observations[i].first.t - observations[j].first.t).norm());
        }
    }
    if (max_baseline <= params.min_baseline) {
        throw Error(ErrorCode::InsufficientParallax, "baseline below minimum");
    }

    // DLT over all views in normalized image coordinates
    Eigen::MatrixXd A(2 * n, 4);
    for (size_t i = 0; i < n; ++i) {
        const Pose& pose = observations[i].first;
        const Eigen::Matrix3d r_wc = pose.q.conjugate().toRotationMatrix();
        Eigen::Matrix<double, 3, 4> proj;
        proj.leftCols<3>() = r_wc;
        proj.col(3) = -r_wc * pose.t;
        const Eigen::Vector3d xn = normalized_coords(cam, observations[i].second);
        A.row(2 * i) = xn.x() * proj.row(2) - proj.row(0);
        A.row(2 * i + 1) = xn.y() * proj.row(2) - proj.row(1);
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
    const Eigen::Vector4d sol = svd.matrixV().col(3);
    const Eigen::Vector4d sv = svd.singularValues();
    if (std::abs(sol(3)) < 1e-12 || sv(2) < 1e-12 * sv(0)) {
        throw Error(ErrorCode::InsufficientParallax, "DLT system rank-deficient");
    }
    Eigen::Vector3d point = sol.head<3>() / sol(3);

    // Gauss-Newton on reprojection error, camera poses fixed
    for (int it = 0; it < params.gn_iterations; ++it) {
        Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
        Eigen::Vector3d g = Eigen::Vector3d::Zero();
        for (const auto& [pose, px] : observations) {
            const Eigen::Matrix3d r_wc = pose.q.conjugate().toRotationMatrix();
            const Eigen::Vector3d pc = r_wc * (point - pose.t);
            if (pc.z() <= 1e-9) continue;
            const double inv_z = 1.0 / pc.z();
            const Eigen::Vector2d res(cam.fx * pc.x() * inv_z + cam.cx - px.x(),
                                      cam.fy * pc.y() * inv_z + cam.cy - px.y());
            Eigen::Matrix<double, 2, 3> jp;
            jp << cam.fx * inv_z, 0.0, -cam.fx * pc.x() * inv_z * inv_z,
                  0.0, cam.fy * inv_z, -cam.fy * pc.y() * inv_z * inv_z;
            const Eigen::Matrix<double, 2, 3> j = jp * r_wc;
            h += j.transpose() * j;
            g -= j.transpose() * res;
        }
        const Eigen::Vector3d step = h.ldlt().solve(g);
        if (!step.allFinite()) break;
        point += step;
        if (step.norm() < 1e-12) break;
    }

    for (const auto& [pose, px] : observations) {
        (void)px;
        const Eigen::Vector3d pc = pose.q.conjugate() * (point - pose.t);
        if (pc.z() <= 0.0) {
            throw Error(ErrorCode::BehindCamera, "refined point behind a camera");
        }
    }
    return point;
}

ObservationCone compute_cone(const Eigen::Vector3d& p3d,
                             const std::vector<Eigen::Vector3d>& camera_centers) {
    if (camera_centers.empty()) {
        throw Error(ErrorCode::InvalidArgument, "compute_cone needs >= 1 camera");
    }
    double max_dist = 0.0;
    Eigen::Vector3d mean_dir = Eigen::Vector3d::Zero();
    for (const auto& c : camera_centers) {
        const Eigen::Vector3d d = c - p3d;
        const double dist = d.norm();
        if (dist < 1e-12) {
            throw Error(ErrorCode::InvalidArgument, "camera coincides with landmark");
        }
        max_dist = std::max(max_dist, dist);
        mean_dir += d / dist;
    }
    mean_dir /= static_cast<double>(camera_centers.size());
    const double norm = mean_dir.norm();
    if (norm < 1e-9) {
        throw Error(ErrorCode::DegenerateDirection, "mean view direction cancels out");
    }
    mean_dir /= norm;

    ObservationCone cone;
    cone.n = mean_dir.cast<float>();
    double max_angle = 0.0;
    for (const auto& c : camera_centers) {
        max_angle = std::max(max_angle, cone_view_angle(cone.n, p3d, c));
    }
    cone.theta = round_up_f32(max_angle);
    cone.L = round_up_f32(max_dist);
    return cone;
}

std::pair<MapIndex, std::vector<MapShard>> build_map(
    const std::vector<FrameObservation>& frames, const CameraModel& cam,
    const BuildParams& params) {
    struct Obs {
        size_t frame;
        int kp;
        Eigen::Vector2d px;
    };
    std::map<uint64_t, std::vector<Obs>> tracks;
    for (size_t f = 0; f < frames.size(); ++f) {
        const auto& fr = frames[f];
        for (size_t k = 0; k < fr.keypoints.size(); ++k) {
            const auto& kp = fr.keypoints[k];
            tracks[kp.landmark_id].push_back(
                {f, static_cast<int>(k), Eigen::Vector2d(kp.u, kp.v)});
        }
    }

    struct Built {
        Eigen::Vector3d p3d;
        ObservationCone cone;
        std::vector<Obs> views;
    };
    std::map<uint64_t, Built> built;

    for (auto& [id, views] : tracks) {
        if (views.size() < 2) continue;
        auto poses_of = [&](const std::vector<Obs>& v) {
            std::vector<std::pair<Pose, Eigen::Vector2d>> obs;
            obs.reserve(v.size());
            for (const auto& o : v) obs.emplace_back(frames[o.frame].true_pose, o.px);
            return obs;
        };
        Eigen::Vector3d point;
        try {
            point = triangulate_landmark(poses_of(views), cam, params);
        } catch (const Error&) {
            continue;
        }

        auto reproj_err = [&](const Obs& o, const Eigen::Vector3d& p) {
            Eigen::Vector2d px;
            if (!project_point(cam, frames[o.frame].true_pose, p, &px)) return 1e30;
            return (px - o.px).norm();
        };
        std::vector<Obs> kept;
        for (const auto& o : views) {
            if (reproj_err(o, point) < params.max_reproj_px) kept.push_back(o);
        }
        if (kept.size() < 2) continue;
        if (kept.size() != views.size()) {
            try {
                point = triangulate_landmark(poses_of(kept), cam, params);
            } catch (const Error&) {
                continue;
            }
            bool all_good = true;
            for (const auto& o : kept) {
                if (reproj_err(o, point) >= params.max_reproj_px) {
                    all_good = false;
                    break;
                }
            }
            if (!all_good) continue;
        }

        std::vector<Eigen::Vector3d> centers;
        centers.reserve(kept.size());
        for (const auto& o : kept) centers.push_back(frames[o.frame].true_pose.t);
        Built b;
        b.p3d = point;
        try {
            b.cone = compute_cone(point, centers);
        } catch (const Error&) {
            continue;
        }
        b.views = std::move(kept);
        built.emplace(id, std::move(b));
    }

    if (built.empty()) throw Error(ErrorCode::EmptyMap, "no landmark triangulated");

    // group retained views by image
    std::map<size_t, std::vector<std::pair<uint64_t, const Obs*>>> per_frame;
    for (const auto& [id, b] : built) {
        for (const auto& o : b.views) per_frame[o.frame].emplace_back(id, &o);
    }

    MapIndex index;
    index.global_dim = frames.empty() ? 0 : static_cast<int>(frames[0].global_descriptor.size());
    std::vector<MapShard> shards;
    for (const auto& [f, items] : per_frame) {
        const auto& fr = frames[f];
        const uint64_t image_id = static_cast<uint64_t>(f);
        MapShard shard;
        shard.image_id = image_id;
        shard.descriptor_dim = static_cast<int>(fr.local_descriptors.cols());
        for (const auto& [id, obs] : items) {
            const Built& b = built.at(id);
            MapLandmark lm;
            lm.id = id;
            lm.p3d = b.p3d;
            lm.cone = b.cone;
            lm.obs2d = Eigen::Vector2f(static_cast<float>(obs->px.x()),
                                       static_cast<float>(obs->px.y()));
            lm.descriptor = fr.local_descriptors.row(obs->kp).transpose();
            shard.landmarks.push_back(std::move(lm));
        }
        MapIndexEntry entry;
        entry.image_id = image_id;
        entry.pose = fr.true_pose;
        entry.global_descriptor = fr.global_descriptor;
        entry.shard_path = "shard_" + std::to_string(image_id) + ".bin";
        index.entries.push_back(std::move(entry));
        shards.push_back(std::move(shard));
    }
    return {std::move(index), std::move(shards)};
}

}  // namespace geofuse
