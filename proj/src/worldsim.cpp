#include "geofuse/worldsim.hpp"

#include <algorithm>
#include <cmath>

#include "geofuse/error.hpp"
#include "geofuse/rng.hpp"

namespace geofuse {

namespace {

constexpr uint64_t kLocalDescStream = 0x6c6f63616cULL;
constexpr uint64_t kGlobalDescStream = 0x676c6f62ULL;
constexpr uint64_t kGlobalNoiseStream = 0x676e6f697aULL;

Eigen::Vector3d gaussian3(Rng& rng, double sigma) {
    return {rng.gaussian(sigma), rng.gaussian(sigma), rng.gaussian(sigma)};
}

// Camera points +z along the tangent; needs tangent not parallel to world up.
Pose look_along(const Eigen::Vector3d& position, const Eigen::Vector3d& tangent) {
    const Eigen::Vector3d z = tangent.normalized();
    const Eigen::Vector3d up(0.0, 0.0, 1.0);
    Eigen::Vector3d x = up.cross(z);
    const double n = x.norm();
    if (n < 1e-9) {
        x = Eigen::Vector3d::UnitX();
    } else {
        x /= n;
    }
    const Eigen::Vector3d y = z.cross(x);
    Eigen::Matrix3d rot;
    rot.col(0) = x;
    rot.col(1) = y;
    rot.col(2) = z;
    return Pose(Eigen::Quaterniond(rot), position);
}

struct PathPoint {
    Eigen::Vector3d p;
    Eigen::Vector3d dp;  // derivative w.r.t. parameter
};

// Closed Catmull-Rom through control points, u in [0, n)
PathPoint catmull_rom(const std::vector<Eigen::Vector3d>& pts, double u) {
    const int n = static_cast<int>(pts.size());
    const int i1 = static_cast<int>(std::floor(u)) % n;
    const double s = u - std::floor(u);
    const auto& p0 = pts[(i1 + n - 1) % n];
    const auto& p1 = pts[i1];
    const auto& p2 = pts[(i1 + 1) % n];
    const auto& p3 = pts[(i1 + 2) % n];
    const double s2 = s * s, s3 = s2 * s;
    PathPoint out;
    out.p = 0.5 * ((2.0 * p1) + (-p0 + p2) * s + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s2 +
                   (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * s3);
    out.dp = 0.5 * ((-p0 + p2) + 2.0 * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s +
                    3.0 * (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * s2);
    return out;
}

template <typename PathFn>
std::vector<TimedPose> sample_by_arclength(PathFn path, double u_max, double length_m,
                                           double frame_hz, int keyframe_every,
                                           const TrajectoryOptions& opt) {
    // dense arc-length table over one period
    const int kTable = 8192;
    std::vector<double> cum(kTable + 1, 0.0);
    std::vector<double> us(kTable + 1);
    Eigen::Vector3d prev = path(0.0).p;
    us[0] = 0.0;
    for (int i = 1; i <= kTable; ++i) {
        const double u = u_max * static_cast<double>(i) / kTable;
        us[i] = u;
        const Eigen::Vector3d p = path(u).p;
        cum[i] = cum[i - 1] + (p - prev).norm();
        prev = p;
    }
    const double period_len = cum[kTable];

    const double duration = length_m / opt.speed;
    const int n_frames = static_cast<int>(std::llround(duration * frame_hz));
    std::vector<TimedPose> out;
    out.reserve(n_frames);
    for (int i = 0; i < n_frames; ++i) {
        const double t = static_cast<double>(i) / frame_hz;
        double s = std::fmod(opt.speed * t, period_len);
        const auto it = std::upper_bound(cum.begin(), cum.end(), s);
        const size_t hi = std::min<size_t>(cum.size() - 1, it - cum.begin());
        const size_t lo = hi - 1;
        const double f = (cum[hi] > cum[lo]) ? (s - cum[lo]) / (cum[hi] - cum[lo]) : 0.0;
        const double u = us[lo] + f * (us[hi] - us[lo]);
        const PathPoint pp = path(u);
        out.push_back({t, look_along(pp.p, pp.dp), i % keyframe_every == 0});
    }
    return out;
}

}  // namespace

TrajectoryShape trajectory_shape_from_string(const std::string& s) {
    if (s == "circle") return TrajectoryShape::circle;
    if (s == "figure_eight") return TrajectoryShape::figure_eight;
    if (s == "waypoints") return TrajectoryShape::waypoints;
    throw Error(ErrorCode::InvalidArgument, "unknown trajectory shape: " + s);
}

World generate_world(int n_landmarks, const Eigen::Vector3d& extent, uint64_t seed,
                     int descriptor_dim, int global_dim) {
    if (n_landmarks < 1) throw Error(ErrorCode::InvalidArgument, "n_landmarks must be >= 1");
    World world;
    world.descriptor_dim = descriptor_dim;
    world.global_dim = global_dim;
    world.rng_seed = seed;
    world.landmarks.reserve(n_landmarks);
    Rng rng(mix_seed(seed, 0x776f726cULL));
    for (int i = 0; i < n_landmarks; ++i) {
        Eigen::Vector3d p;
        for (int a = 0; a < 3; ++a) p[a] = rng.uniform(-extent[a], extent[a]);
        world.landmarks.push_back({static_cast<uint64_t>(i), p});
    }
    return world;
}

std::vector<TimedPose> generate_trajectory(TrajectoryShape shape, double length_m,
                                           double frame_hz, int keyframe_every, uint64_t seed,
                                           const TrajectoryOptions& opt) {
    if (frame_hz <= 0 || keyframe_every < 1 || length_m <= 0 || opt.speed <= 0) {
        throw Error(ErrorCode::InvalidArgument, "bad trajectory parameters");
    }

    if (shape == TrajectoryShape::circle) {
        const double r = length_m / (2.0 * M_PI) + opt.radial_offset;
        const double duration = length_m / opt.speed;
        const int n_frames = static_cast<int>(std::llround(duration * frame_hz));
        std::vector<TimedPose> out;
        out.reserve(n_frames);
        for (int i = 0; i < n_frames; ++i) {
            const double t = static_cast<double>(i) / frame_hz;
            const double phi = opt.speed * t / r + opt.phase;
            const Eigen::Vector3d p(r * std::cos(phi), r * std::sin(phi), opt.height);
            const Eigen::Vector3d dp(-std::sin(phi), std::cos(phi), 0.0);
            out.push_back({t, look_along(p, dp), i % keyframe_every == 0});
        }
        return out;
    }

    if (shape == TrajectoryShape::figure_eight) {
        // lemniscate of Gerono; unit-scale period length ~ 6.097
        const double a = length_m / 6.097 + opt.radial_offset;
        auto path = [&](double u) {
            PathPoint pp;
            const double v = u + opt.phase;
            pp.p = Eigen::Vector3d(a * std::sin(v), a * std::sin(v) * std::cos(v), opt.height);
            pp.dp = Eigen::Vector3d(a * std::cos(v), a * std::cos(2.0 * v), 0.0);
            return pp;
        };
        return sample_by_arclength(path, 2.0 * M_PI, length_m, frame_hz, keyframe_every, opt);
    }

    // waypoints: closed loop through a seeded octagon-ish ring
    Rng rng(mix_seed(seed, 0x77617970ULL));
    const double base_r = length_m / (2.0 * M_PI) + opt.radial_offset;
    std::vector<Eigen::Vector3d> pts;
    const int n_pts = 8;
    for (int i = 0; i < n_pts; ++i) {
        const double ang = 2.0 * M_PI * i / n_pts + opt.phase;
        const double r = base_r * (0.85 + 0.3 * rng.uniform());
        pts.emplace_back(r * std::cos(ang), r * std::sin(ang), opt.height);
    }
    auto path = [&](double u) { return catmull_rom(pts, u); };
    return sample_by_arclength(path, static_cast<double>(n_pts), length_m, frame_hz,
                               keyframe_every, opt);
}

Eigen::VectorXf landmark_descriptor(uint64_t world_seed, uint64_t landmark_id, int dim) {
    Rng rng(mix_seed(mix_seed(world_seed, kLocalDescStream), landmark_id));
    Eigen::VectorXf v(dim);
    for (int i = 0; i < dim; ++i) v[i] = static_cast<float>(rng.gaussian());
    v.normalize();
    return v;
}

Eigen::VectorXf landmark_global_vec(uint64_t world_seed, uint64_t landmark_id, int dim) {
    Rng rng(mix_seed(mix_seed(world_seed, kGlobalDescStream), landmark_id));
    Eigen::VectorXf v(dim);
    for (int i = 0; i < dim; ++i) v[i] = static_cast<float>(rng.gaussian());
    v.normalize();
    return v;
}

bool project_point(const CameraModel& cam, const Pose& pose, const Eigen::Vector3d& p3d,
                   Eigen::Vector2d* pixel) {
    const Eigen::Vector3d pc = pose.q.conjugate() * (p3d - pose.t);
    if (pc.z() <= 0.0) return false;
    pixel->x() = cam.fx * pc.x() / pc.z() + cam.cx;
    pixel->y() = cam.fy * pc.y() / pc.z() + cam.cy;
    return true;
}

FrameObservation render_observations(const World& world, const CameraModel& cam,
                                     const Pose& pose, const NoiseSpec& noise, uint64_t seed,
                                     double timestamp, bool is_keyframe) {
    FrameObservation obs;
    obs.timestamp = timestamp;
    obs.true_pose = pose;
    obs.is_keyframe = is_keyframe;

    const int dim = world.descriptor_dim;
    std::vector<Eigen::VectorXf> descs;
    for (const auto& lm : world.landmarks) {
        if ((lm.position - pose.t).norm() > cam.max_range) continue;
        Eigen::Vector2d px;
        if (!project_point(cam, pose, lm.position, &px)) continue;
        if (px.x() < 0.0 || px.x() >= cam.width || px.y() < 0.0 || px.y() >= cam.height) continue;

        Rng lm_rng(mix_seed(mix_seed(seed, lm.id), 0x6f627332ULL));
        if (noise.pixel_sigma > 0.0) {
            px.x() += lm_rng.gaussian(noise.pixel_sigma);
            px.y() += lm_rng.gaussian(noise.pixel_sigma);
            if (px.x() < 0.0 || px.x() >= cam.width || px.y() < 0.0 || px.y() >= cam.height) {
                continue;
            }
        }
        Eigen::VectorXf d = landmark_descriptor(world.rng_seed, lm.id, dim);
        if (noise.descriptor_sigma > 0.0) {
            for (int i = 0; i < dim; ++i) {
                d[i] += static_cast<float>(lm_rng.gaussian(noise.descriptor_sigma));
            }
            d.normalize();
        }
        obs.keypoints.push_back({lm.id, px.x(), px.y()});
        descs.push_back(std::move(d));
    }

    obs.local_descriptors.resize(static_cast<int>(descs.size()), dim);
    for (size_t i = 0; i < descs.size(); ++i) {
        obs.local_descriptors.row(static_cast<int>(i)) = descs[i].transpose();
    }

    Eigen::VectorXf g = Eigen::VectorXf::Zero(world.global_dim);
    for (const auto& kp : obs.keypoints) {
        g += landmark_global_vec(world.rng_seed, kp.landmark_id, world.global_dim);
    }
    if (noise.descriptor_sigma > 0.0) {
        Rng g_rng(mix_seed(seed, kGlobalNoiseStream));
        for (int i = 0; i < world.global_dim; ++i) {
            g[i] += static_cast<float>(g_rng.gaussian(noise.descriptor_sigma));
        }
    }
    const float gn = g.norm();
    if (gn > 1e-12f) {
        g /= gn;
    } else {
        g.setZero();
        g[0] = 1.0f;
    }
    obs.global_descriptor = g;
    return obs;
}

std::vector<TimedPose> simulate_vio(const std::vector<TimedPose>& true_traj,
                                    const NoiseSpec& noise, uint64_t seed) {
    if (true_traj.size() < 2) throw Error(ErrorCode::InvalidArgument, "need >= 2 frames");
    Rng rng(mix_seed(seed, 0x76696f00ULL));
    std::vector<TimedPose> out;
    out.reserve(true_traj.size());
    out.push_back({true_traj[0].timestamp, Pose::identity(), true_traj[0].is_keyframe});

    Eigen::Vector3d bias = Eigen::Vector3d::Zero();
    for (size_t i = 1; i < true_traj.size(); ++i) {
        Pose rel = compose(inverse(true_traj[i - 1].pose), true_traj[i].pose);
        rel.t += gaussian3(rng, noise.vio_trans_sigma);
        const Eigen::Vector3d rot_noise = gaussian3(rng, noise.vio_rot_sigma);
        bias += gaussian3(rng, noise.vio_bias_walk);
        rel.t += bias;
        rel.q = rel.q * quat_exp(rot_noise);
        rel.normalize();
        out.push_back({true_traj[i].timestamp, compose(out.back().pose, rel),
                       true_traj[i].is_keyframe});
    }
    return out;
}

}  // namespace geofuse
