#pragma once

#include <cmath>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "geofuse/geometry.hpp"
#include "geofuse/localizer.hpp"
#include "geofuse/pgo.hpp"
#include "geofuse/wire.hpp"

namespace geofuse {

struct FrameState {
    double timestamp = 0.0;
    Pose vio_pose;  // frame -> VIO coordinate
    Pose fused;     // frame -> fusion coordinate
    bool is_keyframe = false;
    bool pending = false;  // newer than the newest keyframe: Eq.-9 state only
};

struct KeyFrameRecord {
    double timestamp = 0.0;
    Pose vio_pose;
    std::optional<std::pair<Pose, int>> vls;  // pose + inlier count
    bool valid = false;
    std::optional<Pose> drift_sample;  // T_d,i = vls * vio^-1
    uint64_t request_id = 0;
};

struct DriftDistribution {
    Pose mean;
    double sigma_t = 0.0;  // m
    double sigma_r = 0.0;  // rad
    int n_samples = 0;
};

struct FusionParams {
    PgoConfig pgo;
    double valid_dist = 1.0;                      // D_v, m (Eq. 5 gate)
    double valid_rot_deg = 5.0;                   // R_v, deg (Eq. 6 gate)
    int min_cluster = 5;                          // init cluster size
    int kmeans_k = 2;
    int kmeans_iterations = 20;
    int reinit_threshold = 20;                    // re-init when failures exceed this
    double mix_lambda = 1.0;                      // m per rad feature mix
    int drift_sets = 100;
    int drift_set_size = 4;
    double sigma_t_floor = 0.05;                  // m
    double sigma_r_floor = 0.5 * M_PI / 180.0;    // rad
};

Pose compute_drift_sample(const KeyFrameRecord& kf);

// chordal quaternion mean + arithmetic translation mean
Pose mean_pose(const std::vector<Pose>& poses);

struct DriftInit {
    bool ready = false;
    Pose drift;
    std::vector<int> members;
};

// Seeded K-Means over [t; lambda * rotvec] features; ready when the largest
// cluster reaches min_cluster.
DriftInit initialize_drift(const std::vector<Pose>& samples, int min_cluster, int k,
                           int kmeans_iterations, double lambda, uint64_t seed);

bool check_reinit(int consecutive_failures, int threshold = 20);

DriftDistribution update_drift_distribution(const std::vector<Pose>& samples,
                                            double sigma_t_floor, double sigma_r_floor);

// Eq. 5 / Eq. 6 relative-motion agreement plus the 3-sigma drift gate.
bool validate_keyframe(const KeyFrameRecord& prev, const KeyFrameRecord& cur,
                       const DriftDistribution& dist, double valid_dist_m,
                       double valid_rot_deg);

struct DriftRansacResult {
    Pose alignment;             // best T_o^l over the sampled sets
    std::vector<double> beta;   // per keyframe, in (0, 1]
};

DriftRansacResult drift_ransac(const std::vector<Pose>& vio_poses,
                               const std::vector<Pose>& vls_poses, int n_sets, int set_size,
                               uint64_t seed);

struct SyncResult {
    std::vector<int> optimize_indices;  // common-window frames entering the graph
    std::vector<int> pending_indices;   // newer than the newest keyframe (Eq. 9 only)
};

// Trims the keyframe window to capacity, drops common frames older than the
// window start, and splits the rest into optimizable vs pending.
SyncResult sync_windows(std::deque<KeyFrameRecord>& kf_window,
                        std::deque<FrameState>& cf_window, int kf_capacity);

// frame nearest the common-window temporal midpoint (ties toward the newer)
int middle_frame_index(const std::deque<FrameState>& cf_window);

// --- VLS channel ------------------------------------------------------------

// Depth-1 request pipeline: the engine consumes a keyframe's response right
// before issuing the next keyframe's request, which keeps wire-mode and
// in-process runs bit-identical.
class VlsChannel {
public:
    virtual ~VlsChannel() = default;
    virtual void submit(const WireRequest& req) = 0;
    virtual WireResponse wait_response() = 0;
    virtual bool has_outstanding() const = 0;
    virtual const std::vector<double>& latencies_ms() const = 0;
};

class VlsService;

class InProcessVlsChannel : public VlsChannel {
public:
    explicit InProcessVlsChannel(VlsService& service) : service_(service) {}
    void submit(const WireRequest& req) override;
    WireResponse wait_response() override;
    bool has_outstanding() const override { return !ready_.empty(); }
    const std::vector<double>& latencies_ms() const override { return latencies_; }

private:
    VlsService& service_;
    std::deque<WireResponse> ready_;
    std::vector<double> latencies_;
};

class TcpVlsChannel : public VlsChannel {
public:
    TcpVlsChannel(const std::string& host, uint16_t port);
    ~TcpVlsChannel() override;
    void submit(const WireRequest& req) override;
    WireResponse wait_response() override;
    bool has_outstanding() const override;
    const std::vector<double>& latencies_ms() const override { return latencies_; }

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::vector<double> latencies_;
};

// Client-side outlier injection on OK responses (the "zigzag" model).
class CorruptingVlsChannel : public VlsChannel {
public:
    CorruptingVlsChannel(VlsChannel& inner, double outlier_rate, uint64_t seed);
    void submit(const WireRequest& req) override { inner_.submit(req); }
    WireResponse wait_response() override;
    bool has_outstanding() const override { return inner_.has_outstanding(); }
    const std::vector<double>& latencies_ms() const override { return inner_.latencies_ms(); }
    int outliers_injected() const { return outliers_; }

private:
    VlsChannel& inner_;
    double rate_;
    uint64_t state_;
    int outliers_ = 0;
};

// --- engine -----------------------------------------------------------------

struct TickDiagnostics {
    double timestamp = 0.0;
    bool initialized = false;
    bool optimized = false;
    double cost_before = 0.0;
    double cost_after = 0.0;
    int kf_window_size = 0;
    int cf_window_size = 0;
    bool vls_response = false;
    bool vls_ok = false;
    bool vls_valid = false;
    int reinit_count = 0;
    double tick_ms = 0.0;
    std::vector<double> betas;
};

class FusionEngine {
public:
    FusionEngine(FusionParams params, VlsChannel* channel, uint64_t seed);

    // One tick: consume any outstanding VLS response (blocking, keyframes
    // only), issue this keyframe's request, ingest the frame, sync windows,
    // optimize, emit.
    void process_frame(const TimedPose& vio_frame, const QueryFeatures* features);

    void finish();  // drain the last response, final round, flush outputs

    bool initialized() const { return initialized_; }
    int reinit_count() const { return reinit_count_; }
    std::optional<Pose> prior_for_next_vls() const;
    const DriftDistribution& drift() const { return drift_; }

    Trajectory fused_trajectory() const;
    Trajectory vls_trajectory() const;
    const std::vector<TickDiagnostics>& diagnostics() const { return diagnostics_; }
    std::vector<double> optimize_tick_ms() const;

private:
    void consume_outstanding();
    void handle_response(const WireResponse& resp);
    void register_failure();
    void do_reinit();
    void try_initialize();
    void run_tick(double timestamp);
    std::vector<double> compute_betas(const std::vector<const KeyFrameRecord*>& kfs) const;

    FusionParams params_;
    VlsChannel* channel_;
    uint64_t seed_;

    bool initialized_ = false;
    bool graph_dirty_ = false;
    int failures_ = 0;
    int reinit_count_ = 0;
    uint64_t next_request_id_ = 1;
    uint64_t round_counter_ = 0;
    uint64_t init_attempts_ = 0;

    std::deque<KeyFrameRecord> kf_window_;
    std::deque<FrameState> cf_window_;
    std::deque<FrameState> backlog_;  // pre-init frames awaiting the window
    std::map<uint64_t, KeyFrameRecord> pending_requests_;
    std::vector<KeyFrameRecord> init_samples_;
    DriftDistribution drift_;

    std::map<double, Pose> outputs_;
    std::vector<std::pair<double, Pose>> vls_track_;
    std::vector<TickDiagnostics> diagnostics_;
};

}  // namespace geofuse
