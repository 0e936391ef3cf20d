#pragma once

#include <optional>
#include <string>
#include <vector>

#include "geofuse/config.hpp"
#include "geofuse/fusion.hpp"
#include "geofuse/geometry.hpp"
#include "geofuse/localizer.hpp"
#include "geofuse/service.hpp"
#include "geofuse/worldsim.hpp"

namespace geofuse {

struct TrajectorySpec {
    TrajectoryShape shape = TrajectoryShape::circle;
    double length_m = 500.0;
    double frame_hz = 10.0;
    int keyframe_every = 10;
    TrajectoryOptions options;
    uint64_t seed = 1;
};

struct Scenario {
    // world
    int n_landmarks = 5000;
    Eigen::Vector3d extent{95.0, 95.0, 6.0};
    uint64_t world_seed = 7;
    int descriptor_dim = 64;
    int global_dim = 256;

    CameraModel camera;
    TrajectorySpec mapping;  // mapping images are this pass's keyframes
    TrajectorySpec query;
    NoiseSpec mapping_noise;
    NoiseSpec noise;  // query pass: vio + pixel/descriptor + vls outliers

    FusionParams fusion;
    LocalizeParams vls;
    size_t cache_capacity = 256;

    uint64_t vio_seed = 11;
    uint64_t render_seed = 12;
    uint64_t outlier_seed = 13;
    uint64_t fusion_seed = 14;
};

Scenario load_scenario(const Config& cfg);
Scenario load_scenario_file(const std::string& path);
// Re-derives every stochastic seed from one root; the world is untouched.
void apply_seed_override(Scenario& scenario, uint64_t seed);

struct BuildMapStats {
    std::string map_dir;
    size_t mapping_images = 0;
    size_t map_images = 0;
    size_t landmarks = 0;
    size_t covisible_landmarks = 0;  // seen by >= 2 mapping images before building
};

BuildMapStats cmd_build_map(const Scenario& scenario, const std::string& out_dir);

struct ClientRunResult {
    Trajectory fused;
    Trajectory vio_anchored;  // gt start pose composed with the raw VIO track
    Trajectory vls;
    Trajectory ground_truth;
    bool initialized = false;
    int reinit_count = 0;
    size_t requests = 0;
    size_t responses_ok = 0;
    std::vector<double> vls_latency_ms;
    std::vector<double> optimize_tick_ms;
    std::vector<TickDiagnostics> diagnostics;
};

ClientRunResult run_client(const Scenario& scenario, VlsChannel& channel);
ClientRunResult run_client_in_process(const Scenario& scenario, VlsService& service);
ClientRunResult run_client_wire(const Scenario& scenario, const std::string& host,
                                uint16_t port);

struct Report {
    double ate_rmse_fused = 0.0;
    double ate_rmse_vio_raw = 0.0;
    double ate_rmse_vio_aligned = 0.0;
    std::vector<std::pair<double, double>> thresholds;  // (m, deg)
    std::vector<double> bucket_pct;                     // fused vs ground truth
    double vls_success_rate = 0.0;
    double vls_latency_ms_mean = 0.0;
    double vls_latency_ms_p50 = 0.0;
    double vls_latency_ms_p90 = 0.0;
    double tick_ms_mean = 0.0;
    double tick_ms_p50 = 0.0;
    double tick_ms_p90 = 0.0;
    int reinit_count = 0;
};

extern const std::vector<std::pair<double, double>> kDefaultThresholds;

Report evaluate_run(const ClientRunResult& run,
                    const std::vector<std::pair<double, double>>& thresholds);
Report cmd_evaluate(const std::string& est_path, const std::string& ref_path,
                    const std::vector<std::pair<double, double>>& thresholds);

std::string report_text(const Report& report);
void write_report(const Report& report, const std::string& dir);
void write_run_outputs(const ClientRunResult& run, const std::string& dir);

// build -> serve (in-process or wire) -> client -> evaluate
Report cmd_end_to_end(const Scenario& scenario, const std::string& work_dir, bool wire_mode);

double percentile(std::vector<double> values, double pct);

}  // namespace geofuse
