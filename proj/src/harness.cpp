#include "geofuse/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unordered_set>
#include <sstream>

#include <json.hpp>

#include "geofuse/error.hpp"
#include "geofuse/mapbuilder.hpp"
#include "geofuse/rng.hpp"

namespace geofuse {

namespace {

using nlohmann::json;

TrajectorySpec load_pass(const Config& cfg, const std::string& section,
                         const TrajectorySpec& defaults) {
    TrajectorySpec spec = defaults;
    spec.shape = trajectory_shape_from_string(
        cfg.get_string(section, "shape", "circle"));
    spec.length_m = cfg.get_double(section, "length", defaults.length_m);
    spec.frame_hz = cfg.get_double(section, "frame_hz", defaults.frame_hz);
    spec.keyframe_every =
        static_cast<int>(cfg.get_int(section, "keyframe_every", defaults.keyframe_every));
    spec.options.speed = cfg.get_double(section, "speed", defaults.options.speed);
    spec.options.height = cfg.get_double(section, "height", defaults.options.height);
    spec.options.phase = cfg.get_double(section, "phase", defaults.options.phase);
    spec.options.radial_offset =
        cfg.get_double(section, "radial_offset", defaults.options.radial_offset);
    spec.seed = cfg.get_u64(section, "seed", defaults.seed);
    return spec;
}

}  // namespace

const std::vector<std::pair<double, double>> kDefaultThresholds = {
    {0.25, 2.0}, {0.5, 5.0}, {5.0, 10.0}};

Scenario load_scenario(const Config& cfg) {
    Scenario s;
    s.n_landmarks = static_cast<int>(cfg.get_int("world", "n_landmarks", s.n_landmarks));
    s.extent = cfg.get_vec3("world", "extent", s.extent);
    s.world_seed = cfg.get_u64("world", "seed", s.world_seed);
    s.descriptor_dim =
        static_cast<int>(cfg.get_int("world", "descriptor_dim", s.descriptor_dim));
    s.global_dim = static_cast<int>(cfg.get_int("world", "global_dim", s.global_dim));

    s.camera.fx = cfg.get_double("camera", "fx", s.camera.fx);
    s.camera.fy = cfg.get_double("camera", "fy", s.camera.fy);
    s.camera.cx = cfg.get_double("camera", "cx", s.camera.cx);
    s.camera.cy = cfg.get_double("camera", "cy", s.camera.cy);
    s.camera.width = static_cast<int>(cfg.get_int("camera", "width", s.camera.width));
    s.camera.height = static_cast<int>(cfg.get_int("camera", "height", s.camera.height));
    s.camera.max_range = cfg.get_double("camera", "max_range", s.camera.max_range);

    TrajectorySpec defaults;
    s.mapping = load_pass(cfg, "mapping", defaults);
    defaults.options.radial_offset = 1.0;
    defaults.options.phase = 0.05;
    s.query = load_pass(cfg, "query", defaults);

    s.mapping_noise.pixel_sigma = cfg.get_double("mapping_noise", "pixel_sigma", 0.0);
    s.mapping_noise.descriptor_sigma =
        cfg.get_double("mapping_noise", "descriptor_sigma", 0.0);

    s.noise.vio_trans_sigma = cfg.get_double("noise", "vio_trans_sigma", 0.0);
    s.noise.vio_rot_sigma = cfg.get_double("noise", "vio_rot_sigma", 0.0);
    s.noise.vio_bias_walk = cfg.get_double("noise", "vio_bias_walk", 0.0);
    s.noise.pixel_sigma = cfg.get_double("noise", "pixel_sigma", 0.0);
    s.noise.descriptor_sigma = cfg.get_double("noise", "descriptor_sigma", 0.0);
    s.noise.vls_outlier_rate = cfg.get_double("noise", "vls_outlier_rate", 0.0);

    auto& f = s.fusion;
    f.pgo.alpha = cfg.get_double("fusion", "alpha", f.pgo.alpha);
    f.pgo.w_t = cfg.get_double("fusion", "w_t", f.pgo.w_t);
    f.pgo.w_q = cfg.get_double("fusion", "w_q", 10.0 * f.pgo.w_t);
    f.pgo.kf_window = static_cast<int>(cfg.get_int("fusion", "kf_window", f.pgo.kf_window));
    f.pgo.max_iterations =
        static_cast<int>(cfg.get_int("fusion", "max_iterations", f.pgo.max_iterations));
    f.pgo.convergence_tol = cfg.get_double("fusion", "convergence_tol", f.pgo.convergence_tol);
    f.pgo.literal_vio_rotation = cfg.get_bool("fusion", "literal_vio_rotation", false);
    f.pgo.literal_vls_next_rotation =
        cfg.get_bool("fusion", "literal_vls_next_rotation", false);
    f.valid_dist = cfg.get_double("fusion", "valid_dist", f.valid_dist);
    f.valid_rot_deg = cfg.get_double("fusion", "valid_rot_deg", f.valid_rot_deg);
    f.min_cluster = static_cast<int>(cfg.get_int("fusion", "min_cluster", f.min_cluster));
    f.kmeans_k = static_cast<int>(cfg.get_int("fusion", "kmeans_k", f.kmeans_k));
    f.reinit_threshold =
        static_cast<int>(cfg.get_int("fusion", "reinit_threshold", f.reinit_threshold));
    f.drift_sets = static_cast<int>(cfg.get_int("fusion", "drift_sets", f.drift_sets));
    f.drift_set_size =
        static_cast<int>(cfg.get_int("fusion", "drift_set_size", f.drift_set_size));

    auto& v = s.vls;
    v.retrieval.k = static_cast<int>(cfg.get_int("vls", "k", v.retrieval.k));
    v.retrieval.overfetch_factor =
        static_cast<int>(cfg.get_int("vls", "overfetch_factor", v.retrieval.overfetch_factor));
    v.retrieval.prior_radius = cfg.get_double("vls", "prior_radius", v.retrieval.prior_radius);
    v.retrieval.nms_radius = cfg.get_double("vls", "nms_radius", v.retrieval.nms_radius);
    v.ratio = static_cast<float>(cfg.get_double("vls", "ratio", v.ratio));
    v.pnp.iterations = static_cast<int>(cfg.get_int("vls", "pnp_iterations", v.pnp.iterations));
    v.pnp.reproj_threshold_px =
        cfg.get_double("vls", "reproj_threshold_px", v.pnp.reproj_threshold_px);
    v.dbscan_eps = cfg.get_double("vls", "dbscan_eps", v.dbscan_eps);
    v.dbscan_min_pts = static_cast<int>(cfg.get_int("vls", "dbscan_min_pts", v.dbscan_min_pts));
    v.constraint.delta_L = cfg.get_double("vls", "delta_L", v.constraint.delta_L);
    v.constraint.delta_theta = cfg.get_double("vls", "delta_theta", v.constraint.delta_theta);
    v.constraint.camera_radius =
        cfg.get_double("vls", "camera_radius", v.constraint.camera_radius);
    v.constraint.camera_normal_max_angle =
        cfg.get_double("vls", "camera_normal_max_angle", v.constraint.camera_normal_max_angle);
    v.workers = static_cast<int>(cfg.get_int("vls", "workers", v.workers));
    s.cache_capacity = static_cast<size_t>(cfg.get_int("vls", "cache_capacity", 256));

    s.vio_seed = cfg.get_u64("seeds", "vio", s.vio_seed);
    s.render_seed = cfg.get_u64("seeds", "render", s.render_seed);
    s.outlier_seed = cfg.get_u64("seeds", "outlier", s.outlier_seed);
    s.fusion_seed = cfg.get_u64("seeds", "fusion", s.fusion_seed);
    return s;
}

Scenario load_scenario_file(const std::string& path) {
    return load_scenario(Config::parse_file(path));
}

void apply_seed_override(Scenario& s, uint64_t seed) {
    s.vio_seed = mix_seed(seed, 1);
    s.render_seed = mix_seed(seed, 2);
    s.outlier_seed = mix_seed(seed, 3);
    s.fusion_seed = mix_seed(seed, 4);
}

BuildMapStats cmd_build_map(const Scenario& scenario, const std::string& out_dir) {
    const World world = generate_world(scenario.n_landmarks, scenario.extent,
                                       scenario.world_seed, scenario.descriptor_dim,
                                       scenario.global_dim);
    const auto traj = generate_trajectory(scenario.mapping.shape, scenario.mapping.length_m,
                                          scenario.mapping.frame_hz,
                                          scenario.mapping.keyframe_every,
                                          scenario.mapping.seed, scenario.mapping.options);

    std::vector<FrameObservation> frames;
    for (size_t i = 0; i < traj.size(); ++i) {
        if (!traj[i].is_keyframe) continue;
        frames.push_back(render_observations(world, scenario.camera, traj[i].pose,
                                             scenario.mapping_noise,
                                             mix_seed(scenario.mapping.seed, i),
                                             traj[i].timestamp, true));
    }

    std::map<uint64_t, int> seen;
    for (const auto& f : frames) {
        for (const auto& kp : f.keypoints) ++seen[kp.landmark_id];
    }
    size_t covisible = 0;
    for (const auto& [id, count] : seen) {
        if (count >= 2) ++covisible;
    }

    auto [index, shards] = build_map(frames, scenario.camera);
    write_map(index, shards, out_dir);
    write_service_config(out_dir, scenario.camera, scenario.descriptor_dim, scenario.vls);

    BuildMapStats stats;
    stats.map_dir = out_dir;
    stats.mapping_images = frames.size();
    stats.map_images = index.entries.size();
    stats.landmarks = 0;
    for (const auto& sh : shards) stats.landmarks += sh.landmarks.size();
    std::unordered_set<uint64_t> unique_ids;
    for (const auto& sh : shards) {
        for (const auto& lm : sh.landmarks) unique_ids.insert(lm.id);
    }
    stats.landmarks = unique_ids.size();
    stats.covisible_landmarks = covisible;
    return stats;
}

ClientRunResult run_client(const Scenario& scenario, VlsChannel& channel) {
    const World world = generate_world(scenario.n_landmarks, scenario.extent,
                                       scenario.world_seed, scenario.descriptor_dim,
                                       scenario.global_dim);
    const auto gt = generate_trajectory(scenario.query.shape, scenario.query.length_m,
                                        scenario.query.frame_hz,
                                        scenario.query.keyframe_every, scenario.query.seed,
                                        scenario.query.options);
    const auto vio = simulate_vio(gt, scenario.noise, scenario.vio_seed);

    CorruptingVlsChannel corrupting(channel, scenario.noise.vls_outlier_rate,
                                    scenario.outlier_seed);
    FusionEngine engine(scenario.fusion, &corrupting, scenario.fusion_seed);

    NoiseSpec feature_noise;
    feature_noise.pixel_sigma = scenario.noise.pixel_sigma;
    feature_noise.descriptor_sigma = scenario.noise.descriptor_sigma;

    size_t requests = 0;
    for (size_t i = 0; i < gt.size(); ++i) {
        std::optional<QueryFeatures> features;
        if (gt[i].is_keyframe) {
            const FrameObservation obs = render_observations(
                world, scenario.camera, gt[i].pose, feature_noise,
                mix_seed(scenario.render_seed, i), gt[i].timestamp, true);
            features = QueryFeatures::from_observation(obs);
            ++requests;
        }
        engine.process_frame(vio[i], features ? &*features : nullptr);
    }
    engine.finish();

    ClientRunResult run;
    run.fused = engine.fused_trajectory();
    run.vls = engine.vls_trajectory();
    for (size_t i = 0; i < gt.size(); ++i) {
        run.ground_truth.push_back(gt[i].timestamp, gt[i].pose);
        run.vio_anchored.push_back(vio[i].timestamp, compose(gt[0].pose, vio[i].pose));
    }
    run.initialized = engine.initialized();
    run.reinit_count = engine.reinit_count();
    run.requests = requests;
    run.responses_ok = run.vls.size();
    run.vls_latency_ms = channel.latencies_ms();
    run.optimize_tick_ms = engine.optimize_tick_ms();
    run.diagnostics = engine.diagnostics();
    if (run.fused.size() < 2) {
        throw Error(ErrorCode::NotInitialized,
                    "fusion never initialized; no fused trajectory produced");
    }
    return run;
}

ClientRunResult run_client_in_process(const Scenario& scenario, VlsService& service) {
    InProcessVlsChannel channel(service);
    return run_client(scenario, channel);
}

ClientRunResult run_client_wire(const Scenario& scenario, const std::string& host,
                                uint16_t port) {
    TcpVlsChannel channel(host, port);
    return run_client(scenario, channel);
}

double percentile(std::vector<double> values, double pct) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const double rank = pct / 100.0 * static_cast<double>(values.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(rank));
    const size_t hi = std::min(values.size() - 1, lo + 1);
    const double f = rank - std::floor(rank);
    return values[lo] * (1.0 - f) + values[hi] * f;
}

Report evaluate_run(const ClientRunResult& run,
                    const std::vector<std::pair<double, double>>& thresholds) {
    Report r;
    r.thresholds = thresholds;
    r.ate_rmse_fused = ate_rmse(run.fused, run.ground_truth, AlignMode::none);
    r.ate_rmse_vio_raw = ate_rmse(run.vio_anchored, run.ground_truth, AlignMode::none);
    r.ate_rmse_vio_aligned = ate_rmse(run.vio_anchored, run.ground_truth, AlignMode::rigid6dof);
    r.bucket_pct = pose_accuracy_buckets(run.fused, run.ground_truth, thresholds);
    r.vls_success_rate =
        run.requests == 0
            ? 0.0
            : static_cast<double>(run.responses_ok) / static_cast<double>(run.requests);
    if (!run.vls_latency_ms.empty()) {
        double sum = 0.0;
        for (double v : run.vls_latency_ms) sum += v;
        r.vls_latency_ms_mean = sum / static_cast<double>(run.vls_latency_ms.size());
        r.vls_latency_ms_p50 = percentile(run.vls_latency_ms, 50.0);
        r.vls_latency_ms_p90 = percentile(run.vls_latency_ms, 90.0);
    }
    if (!run.optimize_tick_ms.empty()) {
        double sum = 0.0;
        for (double v : run.optimize_tick_ms) sum += v;
        r.tick_ms_mean = sum / static_cast<double>(run.optimize_tick_ms.size());
        r.tick_ms_p50 = percentile(run.optimize_tick_ms, 50.0);
        r.tick_ms_p90 = percentile(run.optimize_tick_ms, 90.0);
    }
    r.reinit_count = run.reinit_count;
    return r;
}

Report cmd_evaluate(const std::string& est_path, const std::string& ref_path,
                    const std::vector<std::pair<double, double>>& thresholds) {
    ClientRunResult run;
    run.fused = read_tum(est_path);
    run.ground_truth = read_tum(ref_path);
    Report r;
    r.thresholds = thresholds;
    r.ate_rmse_fused = ate_rmse(run.fused, run.ground_truth, AlignMode::none);
    r.bucket_pct = pose_accuracy_buckets(run.fused, run.ground_truth, thresholds);
    return r;
}

std::string report_text(const Report& r) {
    std::ostringstream out;
    out << "ATE RMSE (m)\n";
    out << "  fused (unaligned):      " << r.ate_rmse_fused << "\n";
    out << "  raw VIO (unaligned):    " << r.ate_rmse_vio_raw << "\n";
    out << "  VIO (6DoF aligned):     " << r.ate_rmse_vio_aligned << "\n";
    out << "Pose accuracy (all fused frames vs ground truth)\n";
    for (size_t i = 0; i < r.thresholds.size(); ++i) {
        out << "  (" << r.thresholds[i].first << " m, " << r.thresholds[i].second
            << " deg): " << r.bucket_pct[i] << "%\n";
    }
    out << "VLS success rate:         " << 100.0 * r.vls_success_rate << "%\n";
    out << "VLS latency ms mean/p50/p90: " << r.vls_latency_ms_mean << " / "
        << r.vls_latency_ms_p50 << " / " << r.vls_latency_ms_p90 << "\n";
    out << "Fusion tick ms mean/p50/p90: " << r.tick_ms_mean << " / " << r.tick_ms_p50
        << " / " << r.tick_ms_p90 << "\n";
    out << "Re-initializations:       " << r.reinit_count << "\n";
    return out.str();
}

void write_report(const Report& r, const std::string& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(dir + "/report.txt");
        f << report_text(r);
    }
    std::ofstream f(dir + "/report.jsonl");
    auto line = [&](const std::string& key, const json& value) {
        f << json{{"metric", key}, {"value", value}}.dump() << "\n";
    };
    line("ate_rmse_fused_m", r.ate_rmse_fused);
    line("ate_rmse_vio_raw_m", r.ate_rmse_vio_raw);
    line("ate_rmse_vio_aligned_m", r.ate_rmse_vio_aligned);
    for (size_t i = 0; i < r.thresholds.size(); ++i) {
        line("bucket_pct", json{{"threshold_m", r.thresholds[i].first},
                                {"threshold_deg", r.thresholds[i].second},
                                {"pct", r.bucket_pct[i]}});
    }
    line("vls_success_rate", r.vls_success_rate);
    line("vls_latency_ms", json{{"mean", r.vls_latency_ms_mean},
                                {"p50", r.vls_latency_ms_p50},
                                {"p90", r.vls_latency_ms_p90}});
    line("fusion_tick_ms", json{{"mean", r.tick_ms_mean},
                                {"p50", r.tick_ms_p50},
                                {"p90", r.tick_ms_p90}});
    line("reinit_count", r.reinit_count);
}

void write_run_outputs(const ClientRunResult& run, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_tum(run.fused, dir + "/fused.tum");
    write_tum(run.vio_anchored, dir + "/vio.tum");
    write_tum(run.ground_truth, dir + "/gt.tum");
    if (!run.vls.empty()) write_tum(run.vls, dir + "/vls.tum");

    std::ofstream f(dir + "/diagnostics.jsonl");
    for (const auto& d : run.diagnostics) {
        json j{{"t", d.timestamp},
               {"initialized", d.initialized},
               {"optimized", d.optimized},
               {"cost_before", d.cost_before},
               {"cost_after", d.cost_after},
               {"kf_window", d.kf_window_size},
               {"cf_window", d.cf_window_size},
               {"vls_response", d.vls_response},
               {"vls_ok", d.vls_ok},
               {"vls_valid", d.vls_valid},
               {"reinits", d.reinit_count},
               {"tick_ms", d.tick_ms}};
        if (!d.betas.empty()) j["betas"] = d.betas;
        f << j.dump() << "\n";
    }
}

Report cmd_end_to_end(const Scenario& scenario, const std::string& work_dir, bool wire_mode) {
    std::filesystem::create_directories(work_dir);
    const std::string map_dir = work_dir + "/map";
    cmd_build_map(scenario, map_dir);

    VlsService service(map_dir, scenario.cache_capacity);
    ClientRunResult run;
    if (wire_mode) {
        TcpServer server(service, "127.0.0.1:0");
        server.start();
        run = run_client_wire(scenario, "127.0.0.1", server.port());
        server.shutdown();
    } else {
        run = run_client_in_process(scenario, service);
    }

    write_run_outputs(run, work_dir);
    const Report report = evaluate_run(run, kDefaultThresholds);
    write_report(report, work_dir);
    return report;
}

}  // namespace geofuse
