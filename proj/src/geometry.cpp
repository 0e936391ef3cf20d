#include "geofuse/geometry.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "geofuse/error.hpp"

namespace geofuse {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
        case ErrorCode::DegenerateDirection: return "DegenerateDirection";
        case ErrorCode::NoAssociations: return "NoAssociations";
        case ErrorCode::InsufficientParallax: return "InsufficientParallax";
        case ErrorCode::BehindCamera: return "BehindCamera";
        case ErrorCode::EmptyMap: return "EmptyMap";
        case ErrorCode::FormatError: return "FormatError";
        case ErrorCode::TooFewMatches: return "TooFewMatches";
        case ErrorCode::NoConsensus: return "NoConsensus";
        case ErrorCode::MissingVls: return "MissingVls";
        case ErrorCode::TooFewSamples: return "TooFewSamples";
        case ErrorCode::TooFewKeyframes: return "TooFewKeyframes";
        case ErrorCode::NotInitialized: return "NotInitialized";
        case ErrorCode::EmptyWindow: return "EmptyWindow";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
    }
    return "UnknownError";
}

Pose compose(const Pose& a, const Pose& b) {
    Pose out;
    out.q = a.q * b.q;
    out.t = a.q * b.t + a.t;
    out.normalize();
    return out;
}

Pose inverse(const Pose& p) {
    Pose out;
    out.q = p.q.conjugate();
    out.t = -(out.q * p.t);
    out.normalize();
    return out;
}

Eigen::Vector3d apply(const Pose& p, const Eigen::Vector3d& x) { return p.q * x + p.t; }

double rotation_angle_rad(const Eigen::Quaterniond& q) {
    const double w = std::min(1.0, std::abs(q.w()) / q.norm());
    return 2.0 * std::acos(w);
}

double rotation_angle_deg(const Eigen::Quaterniond& q) {
    return rotation_angle_rad(q) * 180.0 / M_PI;
}

Eigen::Vector3d quat_vec(const Eigen::Quaterniond& q) {
    const double s = q.w() < 0.0 ? -1.0 : 1.0;
    return s * q.vec();
}

Eigen::Vector3d rotation_vector(const Eigen::Quaterniond& q) {
    Eigen::Quaterniond qc = q.normalized();
    if (qc.w() < 0.0) qc.coeffs() = -qc.coeffs();
    const double vn = qc.vec().norm();
    if (vn < 1e-12) return 2.0 * qc.vec();  // small-angle limit
    const double angle = 2.0 * std::atan2(vn, qc.w());
    return (angle / vn) * qc.vec();
}

Eigen::Quaterniond quat_exp(const Eigen::Vector3d& rotvec) {
    const double angle = rotvec.norm();
    if (angle < 1e-12) {
        Eigen::Quaterniond q(1.0, 0.5 * rotvec.x(), 0.5 * rotvec.y(), 0.5 * rotvec.z());
        q.normalize();
        return q;
    }
    const Eigen::Vector3d axis = rotvec / angle;
    const double half = 0.5 * angle;
    const double s = std::sin(half);
    return Eigen::Quaterniond(std::cos(half), s * axis.x(), s * axis.y(), s * axis.z());
}

double quat_angle_between(const Eigen::Quaterniond& a, const Eigen::Quaterniond& b) {
    return rotation_angle_rad(a.conjugate() * b);
}

double pose_distance(const Pose& a, const Pose& b, double lambda) {
    return (a.t - b.t).norm() + lambda * quat_angle_between(a.q, b.q);
}

Pose umeyama_align(const std::vector<Eigen::Vector3d>& src,
                   const std::vector<Eigen::Vector3d>& dst) {
    if (src.size() != dst.size() || src.size() < 3) {
        throw Error(ErrorCode::InvalidArgument,
                    "umeyama_align needs >= 3 point pairs of equal length");
    }
    const size_t n = src.size();
    Eigen::Vector3d mu_s = Eigen::Vector3d::Zero();
    Eigen::Vector3d mu_d = Eigen::Vector3d::Zero();
    for (size_t i = 0; i < n; ++i) {
        mu_s += src[i];
        mu_d += dst[i];
    }
    mu_s /= static_cast<double>(n);
    mu_d /= static_cast<double>(n);

    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (size_t i = 0; i < n; ++i) {
        cov += (dst[i] - mu_d) * (src[i] - mu_s).transpose();
    }
    cov /= static_cast<double>(n);

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d sv = svd.singularValues();
    if (sv(1) <= 1e-12 + 1e-9 * sv(0)) {
        throw Error(ErrorCode::DegenerateConfiguration,
                    "point sets are collinear or coincident (covariance rank < 2)");
    }

    Eigen::Matrix3d s = Eigen::Matrix3d::Identity();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s(2, 2) = -1.0;
    const Eigen::Matrix3d rot = svd.matrixU() * s * svd.matrixV().transpose();

    Pose out;
    out.q = Eigen::Quaterniond(rot);
    out.t = mu_d - rot * mu_s;
    out.normalize();
    return out;
}

void Trajectory::push_back(double timestamp, const Pose& pose) {
    if (!frames_.empty() && timestamp <= frames_.back().timestamp) {
        throw Error(ErrorCode::InvalidArgument, "trajectory timestamps must strictly increase");
    }
    frames_.push_back({timestamp, pose});
}

std::vector<std::pair<size_t, size_t>> associate_frames(const Trajectory& est,
                                                        const Trajectory& ref,
                                                        double max_dt) {
    std::vector<std::pair<size_t, size_t>> pairs;
    if (est.empty() || ref.empty()) return pairs;
    size_t j = 0;
    for (size_t i = 0; i < est.size(); ++i) {
        const double t = est[i].timestamp;
        while (j + 1 < ref.size() && ref[j + 1].timestamp <= t) ++j;
        size_t best = j;
        if (j + 1 < ref.size() &&
            std::abs(ref[j + 1].timestamp - t) < std::abs(ref[j].timestamp - t)) {
            best = j + 1;
        }
        if (std::abs(ref[best].timestamp - t) <= max_dt) pairs.emplace_back(i, best);
    }
    return pairs;
}

double ate_rmse(const Trajectory& est, const Trajectory& ref, AlignMode align) {
    const auto pairs = associate_frames(est, ref);
    if (pairs.size() < 2) {
        throw Error(ErrorCode::NoAssociations, "fewer than 2 associated timestamp pairs");
    }
    Pose T = Pose::identity();
    if (align == AlignMode::rigid6dof) {
        std::vector<Eigen::Vector3d> src, dst;
        src.reserve(pairs.size());
        dst.reserve(pairs.size());
        for (const auto& [i, j] : pairs) {
            src.push_back(est[i].pose.t);
            dst.push_back(ref[j].pose.t);
        }
        T = umeyama_align(src, dst);
    }
    double sq_sum = 0.0;
    for (const auto& [i, j] : pairs) {
        sq_sum += (apply(T, est[i].pose.t) - ref[j].pose.t).squaredNorm();
    }
    return std::sqrt(sq_sum / static_cast<double>(pairs.size()));
}

std::vector<double> pose_accuracy_buckets(
    const Trajectory& est, const Trajectory& ref,
    const std::vector<std::pair<double, double>>& thresholds) {
    const auto pairs = associate_frames(est, ref);
    if (pairs.size() < 2) {
        throw Error(ErrorCode::NoAssociations, "fewer than 2 associated timestamp pairs");
    }
    std::vector<double> out(thresholds.size(), 0.0);
    for (size_t k = 0; k < thresholds.size(); ++k) {
        const auto [d_max, r_max_deg] = thresholds[k];
        size_t hit = 0;
        for (const auto& [i, j] : pairs) {
            const double d = (est[i].pose.t - ref[j].pose.t).norm();
            const double r = rotation_angle_deg(est[i].pose.q.conjugate() * ref[j].pose.q);
            if (d < d_max && r < r_max_deg) ++hit;
        }
        out[k] = 100.0 * static_cast<double>(hit) / static_cast<double>(pairs.size());
    }
    return out;
}

void write_tum(const Trajectory& traj, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
    char line[256];
    for (const auto& fr : traj) {
        const auto& q = fr.pose.q;
        const auto& t = fr.pose.t;
        std::snprintf(line, sizeof(line), "%.9g %.9g %.9g %.9g %.9g %.9g %.9g %.9g\n",
                      fr.timestamp, t.x(), t.y(), t.z(), q.x(), q.y(), q.z(), q.w());
        f << line;
    }
    if (!f) throw Error(ErrorCode::IoError, "write failed for " + path);
}

Trajectory read_tum(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorCode::IoError, "cannot open " + path);
    Trajectory traj;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        double ts, tx, ty, tz, qx, qy, qz, qw;
        if (!(ss >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) {
            throw Error(ErrorCode::FormatError,
                        path + ":" + std::to_string(line_no) + ": bad trajectory line");
        }
        traj.push_back(ts, Pose(Eigen::Quaterniond(qw, qx, qy, qz), {tx, ty, tz}));
    }
    return traj;
}

}  // namespace geofuse
