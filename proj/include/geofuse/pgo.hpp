#pragma once

#include <Eigen/Core>

#include <array>
#include <vector>

#include "geofuse/geometry.hpp"

namespace geofuse {

struct PgoConfig {
    double alpha = 1.0;  // VIO edge weight
    double w_t = 1.0;
    double w_q = 10.0;  // 10 * w_t
    int kf_window = 20;
    int max_iterations = 15;
    double lm_lambda0 = 1e-4;
    double convergence_tol = 1e-8;

    // paper-literal alternates for the two flagged residual ambiguities;
    // defaults are the readings with an exact noiseless fixed point
    bool literal_vio_rotation = false;      // error quat q_i^-1 q_{i+1} dq instead of dq^-1
    bool literal_vls_next_rotation = false; // VLS rotation residual reads the next node
};

enum class PgoMode { full, rotation_only };

struct LmIterationRecord {
    double cost_before = 0.0;
    double cost_after = 0.0;
    double lambda = 0.0;
    bool accepted = false;
};

struct OptResult {
    double initial_cost = 0.0;
    double final_cost = 0.0;
    int accepted = 0;
    int rejected = 0;
    bool converged = false;
    std::vector<LmIterationRecord> trace;
};

// Sliding-window pose graph: VIO edges between adjacent frames, absolute VLS
// edges on validated keyframes. Step 1 optimizes translation and rotation,
// step 2 rotation only. With no VLS edge the first node is held fixed to pin
// the gauge.
class PoseGraph {
public:
    int add_node(const Pose& initial, bool fixed = false);
    void add_vio_edge(int i, int j, const Pose& measured_rel);
    void add_vls_edge(int node, const Pose& measured_abs, double beta);

    size_t node_count() const { return nodes_.size(); }
    const Pose& node(int i) const { return nodes_[i]; }
    void set_node(int i, const Pose& p) { nodes_[i] = p; }
    void set_fixed(int i, bool fixed) { fixed_[i] = fixed; }

    double cost(const PgoConfig& cfg, PgoMode mode) const;

    OptResult optimize(const PgoConfig& cfg, PgoMode mode);
    OptResult optimize_step1(const PgoConfig& cfg) { return optimize(cfg, PgoMode::full); }
    OptResult optimize_step2(const PgoConfig& cfg) { return optimize(cfg, PgoMode::rotation_only); }

    // stacked residuals / dense Jacobian over the free local parameters,
    // for finite-difference verification
    Eigen::VectorXd residual_vector(const PgoConfig& cfg, PgoMode mode) const;
    Eigen::MatrixXd dense_jacobian(const PgoConfig& cfg, PgoMode mode) const;

    // applies a local increment (per free node: [dt, dtheta] or [dtheta])
    void apply_increment(const Eigen::VectorXd& delta, PgoMode mode,
                         const std::vector<int>& offsets);
    std::vector<int> param_offsets(PgoMode mode, int* total) const;

private:
    struct VioEdge {
        int i, j;
        Pose rel;
    };
    struct VlsEdge {
        int node;
        Pose abs;
        double beta;
    };
    struct Block {
        Eigen::VectorXd r;
        std::array<int, 2> nodes{-1, -1};
        std::array<Eigen::MatrixXd, 2> jac;
    };

    std::vector<Block> eval_blocks(const PgoConfig& cfg, PgoMode mode, bool with_jacobians) const;
    bool effectively_unanchored() const;

    std::vector<Pose> nodes_;
    std::vector<bool> fixed_;
    std::vector<VioEdge> vio_edges_;
    std::vector<VlsEdge> vls_edges_;
};

}  // namespace geofuse
