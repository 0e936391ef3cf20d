#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <string>
#include <utility>
#include <vector>

namespace geofuse {

// Rigid transform body -> reference. Quaternion is Hamilton convention,
// stored (w, x, y, z), kept unit-norm and sign-canonical (w >= 0).
struct Pose {
    Eigen::Quaterniond q{1.0, 0.0, 0.0, 0.0};
    Eigen::Vector3d t{0.0, 0.0, 0.0};

    Pose() = default;
    Pose(const Eigen::Quaterniond& q_in, const Eigen::Vector3d& t_in) : q(q_in), t(t_in) {
        normalize();
    }

    static Pose identity() { return Pose{}; }

    void normalize() {
        q.normalize();
        if (q.w() < 0.0) q.coeffs() = -q.coeffs();
    }

    Eigen::Matrix4d matrix() const {
        Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
        m.topLeftCorner<3, 3>() = q.toRotationMatrix();
        m.topRightCorner<3, 1>() = t;
        return m;
    }
};

Pose compose(const Pose& a, const Pose& b);
Pose inverse(const Pose& p);
Eigen::Vector3d apply(const Pose& p, const Eigen::Vector3d& x);

double rotation_angle_rad(const Eigen::Quaterniond& q);
double rotation_angle_deg(const Eigen::Quaterniond& q);

// (x, y, z) of the sign-canonicalized quaternion; ~0.5 * rotation vector for
// small angles.
Eigen::Vector3d quat_vec(const Eigen::Quaterniond& q);

// log / exp maps (rotation vector = angle * unit axis)
Eigen::Vector3d rotation_vector(const Eigen::Quaterniond& q);
Eigen::Quaterniond quat_exp(const Eigen::Vector3d& rotvec);

// angle between two rotations, radians
double quat_angle_between(const Eigen::Quaterniond& a, const Eigen::Quaterniond& b);

// ||t_a - t_b|| + lambda * angle(q_a, q_b), lambda in meters per radian
double pose_distance(const Pose& a, const Pose& b, double lambda);

// Rigid (scale = 1) alignment minimizing sum ||T * src_i - dst_i||^2.
// Throws Error{DegenerateConfiguration} on collinear/coincident inputs.
Pose umeyama_align(const std::vector<Eigen::Vector3d>& src,
                   const std::vector<Eigen::Vector3d>& dst);

struct TrajectoryFrame {
    double timestamp = 0.0;
    Pose pose;
};

// Timestamped pose sequence with strictly increasing timestamps.
class Trajectory {
public:
    Trajectory() = default;

    void push_back(double timestamp, const Pose& pose);
    size_t size() const { return frames_.size(); }
    bool empty() const { return frames_.empty(); }
    const TrajectoryFrame& operator[](size_t i) const { return frames_[i]; }
    const std::vector<TrajectoryFrame>& frames() const { return frames_; }
    std::vector<TrajectoryFrame>::const_iterator begin() const { return frames_.begin(); }
    std::vector<TrajectoryFrame>::const_iterator end() const { return frames_.end(); }

private:
    std::vector<TrajectoryFrame> frames_;
};

enum class AlignMode { none, rigid6dof };

// Nearest-neighbor timestamp association within a 10 ms window.
std::vector<std::pair<size_t, size_t>> associate_frames(const Trajectory& est,
                                                        const Trajectory& ref,
                                                        double max_dt = 0.010);

double ate_rmse(const Trajectory& est, const Trajectory& ref, AlignMode align);

// thresholds: (meters, degrees); returns percentages in [0, 100]
std::vector<double> pose_accuracy_buckets(
    const Trajectory& est, const Trajectory& ref,
    const std::vector<std::pair<double, double>>& thresholds);

// TUM text format: "timestamp tx ty tz qx qy qz qw" per line.
void write_tum(const Trajectory& traj, const std::string& path);
Trajectory read_tum(const std::string& path);

}  // namespace geofuse
