#include "geofuse/pgo.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>

#include "geofuse/error.hpp"

namespace geofuse {

namespace {

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
    Eigen::Matrix3d m;
    m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), 0.0, v.x();
    return m;
}

// 4x4 left-multiplication matrix: quat_left(a) * coeffs(b) = coeffs(a*b)
Eigen::Matrix4d quat_left(const Eigen::Quaterniond& q) {
    Eigen::Matrix4d m;
    m << q.w(), -q.x(), -q.y(), -q.z(),
         q.x(),  q.w(), -q.z(),  q.y(),
         q.y(),  q.z(),  q.w(), -q.x(),
         q.z(), -q.y(),  q.x(),  q.w();
    return m;
}

// 4x4 right-multiplication matrix: quat_right(b) * coeffs(a) = coeffs(a*b)
Eigen::Matrix4d quat_right(const Eigen::Quaterniond& q) {
    Eigen::Matrix4d m;
    m << q.w(), -q.x(), -q.y(), -q.z(),
         q.x(),  q.w(),  q.z(), -q.y(),
         q.y(), -q.z(),  q.w(),  q.x(),
         q.z(),  q.y(), -q.x(),  q.w();
    return m;
}

// d coeffs(exp(s * dtheta)) / d dtheta at dtheta = 0, s = +/-1
Eigen::Matrix<double, 4, 3> dexp_dtheta(double s) {
    Eigen::Matrix<double, 4, 3> m = Eigen::Matrix<double, 4, 3>::Zero();
    m.block<3, 3>(1, 0) = 0.5 * s * Eigen::Matrix3d::Identity();
    return m;
}

const Eigen::Matrix<double, 3, 4> kTakeXyz = [] {
    Eigen::Matrix<double, 3, 4> p = Eigen::Matrix<double, 3, 4>::Zero();
    p.block<3, 3>(0, 1) = Eigen::Matrix3d::Identity();
    return p;
}();

}  // namespace

int PoseGraph::add_node(const Pose& initial, bool fixed) {
    nodes_.push_back(initial);
    fixed_.push_back(fixed);
    return static_cast<int>(nodes_.size()) - 1;
}

void PoseGraph::add_vio_edge(int i, int j, const Pose& measured_rel) {
    vio_edges_.push_back({i, j, measured_rel});
}

void PoseGraph::add_vls_edge(int node, const Pose& measured_abs, double beta) {
    vls_edges_.push_back({node, measured_abs, beta});
}

bool PoseGraph::effectively_unanchored() const {
    if (!vls_edges_.empty()) return false;
    for (bool f : fixed_) {
        if (f) return false;
    }
    return true;
}

std::vector<PoseGraph::Block> PoseGraph::eval_blocks(const PgoConfig& cfg, PgoMode mode,
                                                     bool with_jacobians) const {
    const bool full = mode == PgoMode::full;
    const int pdim = full ? 6 : 3;
    const int rdim = full ? 6 : 3;
    const int rot_row = full ? 3 : 0;  // rotation residual row offset
    const int rot_col = full ? 3 : 0;  // dtheta column offset

    std::vector<Block> blocks;
    blocks.reserve(vio_edges_.size() + vls_edges_.size());

    const double sqrt_alpha = std::sqrt(cfg.alpha);
    for (const auto& e : vio_edges_) {
        const Pose& a = nodes_[e.i];
        const Pose& b = nodes_[e.j];
        Block blk;
        blk.r.setZero(rdim);
        blk.nodes = {e.i, e.j};

        // rotation residual: w_q * vec(q_i^-1 q_j dq^-1), canonical sign
        const Eigen::Quaterniond rel = a.q.conjugate() * b.q;
        const Eigen::Quaterniond meas =
            cfg.literal_vio_rotation ? e.rel.q : e.rel.q.conjugate();
        Eigen::Quaterniond err = rel * meas;
        const double sign = err.w() < 0.0 ? -1.0 : 1.0;
        const double kq = sqrt_alpha * cfg.w_q * sign;
        blk.r.segment<3>(rot_row) = sqrt_alpha * cfg.w_q * (sign * err.vec());

        Eigen::Matrix3d r_a_t;
        Eigen::Vector3d v;
        if (full) {
            r_a_t = a.q.conjugate().toRotationMatrix();
            v = r_a_t * (b.t - a.t);
            blk.r.head<3>() = sqrt_alpha * cfg.w_t * (v - e.rel.t);
        }

        if (with_jacobians) {
            blk.jac[0].setZero(rdim, pdim);
            blk.jac[1].setZero(rdim, pdim);
            // d err / d dtheta_i: err = exp(-dtheta_i) * (q_i^-1 q_j meas)
            blk.jac[0].block<3, 3>(rot_row, rot_col) =
                kq * kTakeXyz * quat_right(err) * dexp_dtheta(-1.0);
            // d err / d dtheta_j: err = (q_i^-1 q_j) exp(dtheta_j) meas
            blk.jac[1].block<3, 3>(rot_row, rot_col) =
                kq * kTakeXyz * quat_left(rel) * quat_right(meas) * dexp_dtheta(1.0);
            if (full) {
                const double kt = sqrt_alpha * cfg.w_t;
                blk.jac[0].block<3, 3>(0, 0) = -kt * r_a_t;
                blk.jac[1].block<3, 3>(0, 0) = kt * r_a_t;
                blk.jac[0].block<3, 3>(0, 3) = kt * skew(v);
            }
        }
        blocks.push_back(std::move(blk));
    }

    for (const auto& e : vls_edges_) {
        const double sqrt_beta = std::sqrt(e.beta);
        const int rot_node =
            cfg.literal_vls_next_rotation && e.node + 1 < static_cast<int>(nodes_.size())
                ? e.node + 1
                : e.node;
        Block blk;
        blk.r.setZero(rdim);
        blk.nodes = {e.node, rot_node == e.node ? -1 : rot_node};

        const Eigen::Quaterniond err = nodes_[rot_node].q.conjugate() * e.abs.q;
        const double sign = err.w() < 0.0 ? -1.0 : 1.0;
        blk.r.segment<3>(rot_row) = sqrt_beta * cfg.w_q * (sign * err.vec());
        if (full) {
            blk.r.head<3>() = sqrt_beta * cfg.w_t * (nodes_[e.node].t - e.abs.t);
        }

        if (with_jacobians) {
            blk.jac[0].setZero(rdim, pdim);
            const Eigen::Matrix<double, 3, 3> j_rot = sqrt_beta * cfg.w_q * sign * kTakeXyz *
                                                      quat_right(err) * dexp_dtheta(-1.0);
            if (rot_node == e.node) {
                blk.jac[0].block<3, 3>(rot_row, rot_col) = j_rot;
            } else {
                blk.jac[1].setZero(rdim, pdim);
                blk.jac[1].block<3, 3>(rot_row, rot_col) = j_rot;
            }
            if (full) {
                blk.jac[0].block<3, 3>(0, 0) =
                    sqrt_beta * cfg.w_t * Eigen::Matrix3d::Identity();
            }
        }
        blocks.push_back(std::move(blk));
    }
    return blocks;
}

double PoseGraph::cost(const PgoConfig& cfg, PgoMode mode) const {
    double total = 0.0;
    for (const auto& blk : eval_blocks(cfg, mode, false)) total += blk.r.squaredNorm();
    return total;
}

std::vector<int> PoseGraph::param_offsets(PgoMode mode, int* total) const {
    const int pdim = mode == PgoMode::full ? 6 : 3;
    const bool auto_fix_first = effectively_unanchored();
    std::vector<int> offsets(nodes_.size(), -1);
    int off = 0;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (fixed_[i] || (auto_fix_first && i == 0)) continue;
        offsets[i] = off;
        off += pdim;
    }
    *total = off;
    return offsets;
}

void PoseGraph::apply_increment(const Eigen::VectorXd& delta, PgoMode mode,
                                const std::vector<int>& offsets) {
    const bool full = mode == PgoMode::full;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (offsets[i] < 0) continue;
        Pose& p = nodes_[i];
        if (full) {
            p.t += delta.segment<3>(offsets[i]);
            p.q = p.q * quat_exp(delta.segment<3>(offsets[i] + 3));
        } else {
            p.q = p.q * quat_exp(delta.segment<3>(offsets[i]));
        }
        p.normalize();
    }
}

Eigen::VectorXd PoseGraph::residual_vector(const PgoConfig& cfg, PgoMode mode) const {
    const auto blocks = eval_blocks(cfg, mode, false);
    int rows = 0;
    for (const auto& b : blocks) rows += static_cast<int>(b.r.size());
    Eigen::VectorXd r(rows);
    int at = 0;
    for (const auto& b : blocks) {
        r.segment(at, b.r.size()) = b.r;
        at += static_cast<int>(b.r.size());
    }
    return r;
}

Eigen::MatrixXd PoseGraph::dense_jacobian(const PgoConfig& cfg, PgoMode mode) const {
    int total = 0;
    const auto offsets = param_offsets(mode, &total);
    const auto blocks = eval_blocks(cfg, mode, true);
    int rows = 0;
    for (const auto& b : blocks) rows += static_cast<int>(b.r.size());
    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(rows, total);
    int at = 0;
    for (const auto& b : blocks) {
        for (int s = 0; s < 2; ++s) {
            if (b.nodes[s] < 0 || offsets[b.nodes[s]] < 0 || b.jac[s].size() == 0) continue;
            j.block(at, offsets[b.nodes[s]], b.r.size(), b.jac[s].cols()) += b.jac[s];
        }
        at += static_cast<int>(b.r.size());
    }
    return j;
}

OptResult PoseGraph::optimize(const PgoConfig& cfg, PgoMode mode) {
    if (nodes_.size() < 2) throw Error(ErrorCode::NotInitialized, "pose graph needs >= 2 nodes");
    const int pdim = mode == PgoMode::full ? 6 : 3;
    int total = 0;
    const auto offsets = param_offsets(mode, &total);

    OptResult result;
    result.initial_cost = cost(cfg, mode);
    result.final_cost = result.initial_cost;
    if (total == 0) return result;

    double current_cost = result.initial_cost;
    double lambda = cfg.lm_lambda0;
    int attempts = 0;
    bool need_eval = true;

    Eigen::SparseMatrix<double> h(total, total);
    Eigen::VectorXd g(total);
    std::vector<Eigen::Triplet<double>> triplets;

    while (attempts < cfg.max_iterations) {
        if (need_eval) {
            const auto blocks = eval_blocks(cfg, mode, true);
            triplets.clear();
            g.setZero();
            for (const auto& blk : blocks) {
                for (int s = 0; s < 2; ++s) {
                    const int ns = blk.nodes[s];
                    if (ns < 0 || offsets[ns] < 0 || blk.jac[s].size() == 0) continue;
                    g.segment(offsets[ns], pdim) -= blk.jac[s].transpose() * blk.r;
                    for (int t = 0; t < 2; ++t) {
                        const int nt = blk.nodes[t];
                        if (nt < 0 || offsets[nt] < 0 || blk.jac[t].size() == 0) continue;
                        const Eigen::MatrixXd ht = blk.jac[s].transpose() * blk.jac[t];
                        for (int rr = 0; rr < pdim; ++rr) {
                            for (int cc = 0; cc < pdim; ++cc) {
                                triplets.emplace_back(offsets[ns] + rr, offsets[nt] + cc,
                                                      ht(rr, cc));
                            }
                        }
                    }
                }
            }
            h.setFromTriplets(triplets.begin(), triplets.end());
            need_eval = false;
        }

        Eigen::SparseMatrix<double> damped = h;
        for (int d = 0; d < total; ++d) {
            damped.coeffRef(d, d) = h.coeff(d, d) + lambda * std::max(h.coeff(d, d), 1e-12);
        }
        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(damped);
        ++attempts;
        if (solver.info() != Eigen::Success) {
            result.trace.push_back({current_cost, current_cost, lambda, false});
            ++result.rejected;
            lambda *= 4.0;
            continue;
        }
        const Eigen::VectorXd delta = solver.solve(g);
        if (!delta.allFinite()) {
            result.trace.push_back({current_cost, current_cost, lambda, false});
            ++result.rejected;
            lambda *= 4.0;
            continue;
        }

        const std::vector<Pose> backup = nodes_;
        apply_increment(delta, mode, offsets);
        const double trial_cost = cost(cfg, mode);
        if (trial_cost < current_cost) {
            result.trace.push_back({current_cost, trial_cost, lambda, true});
            ++result.accepted;
            const double rel = (current_cost - trial_cost) / std::max(current_cost, 1e-300);
            current_cost = trial_cost;
            lambda = std::max(lambda * 0.5, 1e-12);
            need_eval = true;
            if (rel < cfg.convergence_tol) {
                result.converged = true;
                break;
            }
        } else {
            nodes_ = backup;
            result.trace.push_back({current_cost, trial_cost, lambda, false});
            ++result.rejected;
            lambda *= 4.0;
        }
    }
    result.final_cost = current_cost;
    return result;
}

}  // namespace geofuse
