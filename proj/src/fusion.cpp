#include "geofuse/fusion.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <mutex>
#include <thread>

#include "geofuse/error.hpp"
#include "geofuse/rng.hpp"
#include "geofuse/service.hpp"

namespace geofuse {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

Eigen::Matrix<double, 6, 1> drift_feature(const Pose& p, double lambda) {
    Eigen::Matrix<double, 6, 1> f;
    f.head<3>() = p.t;
    f.tail<3>() = lambda * rotation_vector(p.q);
    return f;
}

}  // namespace

Pose compute_drift_sample(const KeyFrameRecord& kf) {
    if (!kf.vls) throw Error(ErrorCode::MissingVls, "keyframe has no VLS result");
    return compose(kf.vls->first, inverse(kf.vio_pose));
}

Pose mean_pose(const std::vector<Pose>& poses) {
    if (poses.empty()) throw Error(ErrorCode::TooFewSamples, "mean over zero poses");
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
    Eigen::Vector4d q_sum = Eigen::Vector4d::Zero();
    const Eigen::Vector4d ref = poses[0].q.coeffs();
    for (const auto& p : poses) {
        t += p.t;
        const Eigen::Vector4d c = p.q.coeffs();
        q_sum += (c.dot(ref) < 0.0) ? Eigen::Vector4d(-c) : c;
    }
    t /= static_cast<double>(poses.size());
    Eigen::Quaterniond q(q_sum(3), q_sum(0), q_sum(1), q_sum(2));
    return Pose(q, t);
}

DriftInit initialize_drift(const std::vector<Pose>& samples, int min_cluster, int k,
                           int kmeans_iterations, double lambda, uint64_t seed) {
    DriftInit out;
    const int n = static_cast<int>(samples.size());
    if (n == 0 || n < min_cluster) return out;

    std::vector<Eigen::Matrix<double, 6, 1>> features;
    features.reserve(n);
    for (const auto& s : samples) features.push_back(drift_feature(s, lambda));

    const int kk = std::min(k, n);
    Rng rng(mix_seed(seed, 0x6b6d65616eULL));
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    for (int j = 0; j < kk; ++j) {
        const int pick = j + static_cast<int>(rng.uniform_index(n - j));
        std::swap(order[j], order[pick]);
    }
    std::vector<Eigen::Matrix<double, 6, 1>> centroids;
    for (int j = 0; j < kk; ++j) centroids.push_back(features[order[j]]);

    std::vector<int> assign(n, 0);
    for (int it = 0; it < kmeans_iterations; ++it) {
        for (int i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (int j = 0; j < kk; ++j) {
                const double d = (features[i] - centroids[j]).squaredNorm();
                if (d < best) {
                    best = d;
                    assign[i] = j;
                }
            }
        }
        for (int j = 0; j < kk; ++j) {
            Eigen::Matrix<double, 6, 1> sum = Eigen::Matrix<double, 6, 1>::Zero();
            int count = 0;
            for (int i = 0; i < n; ++i) {
                if (assign[i] == j) {
                    sum += features[i];
                    ++count;
                }
            }
            if (count > 0) centroids[j] = sum / count;  // empty keeps its centroid
        }
    }

    std::vector<int> sizes(kk, 0);
    for (int i = 0; i < n; ++i) ++sizes[assign[i]];
    const int best_cluster =
        static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    if (sizes[best_cluster] < min_cluster) return out;

    std::vector<Pose> members;
    for (int i = 0; i < n; ++i) {
        if (assign[i] == best_cluster) {
            out.members.push_back(i);
            members.push_back(samples[i]);
        }
    }
    out.ready = true;
    out.drift = mean_pose(members);
    return out;
}

bool check_reinit(int consecutive_failures, int threshold) {
    return consecutive_failures > threshold;
}

DriftDistribution update_drift_distribution(const std::vector<Pose>& samples,
                                            double sigma_t_floor, double sigma_r_floor) {
    if (samples.size() < 2) {
        throw Error(ErrorCode::TooFewSamples, "drift distribution needs >= 2 samples");
    }
    DriftDistribution dist;
    dist.mean = mean_pose(samples);
    double sq_t = 0.0, sq_r = 0.0;
    for (const auto& s : samples) {
        sq_t += (s.t - dist.mean.t).squaredNorm();
        const double a = quat_angle_between(dist.mean.q, s.q);
        sq_r += a * a;
    }
    const double inv_n = 1.0 / static_cast<double>(samples.size());
    dist.sigma_t = std::max(std::sqrt(sq_t * inv_n), sigma_t_floor);
    dist.sigma_r = std::max(std::sqrt(sq_r * inv_n), sigma_r_floor);
    dist.n_samples = static_cast<int>(samples.size());
    return dist;
}

bool validate_keyframe(const KeyFrameRecord& prev, const KeyFrameRecord& cur,
                       const DriftDistribution& dist, double valid_dist_m,
                       double valid_rot_deg) {
    if (!prev.vls || !cur.vls || !cur.drift_sample) {
        throw Error(ErrorCode::MissingVls, "validation needs VLS on both keyframes");
    }
    if (dist.n_samples < 2) {
        throw Error(ErrorCode::TooFewSamples, "drift distribution not established");
    }

    // Eq. 5: the previous frame expressed in the current one, VIO vs VLS
    const Pose rel_vio = compose(inverse(cur.vio_pose), prev.vio_pose);
    const Pose rel_vls = compose(inverse(cur.vls->first), prev.vls->first);
    if ((rel_vio.t - rel_vls.t).norm() >= valid_dist_m) return false;

    // Eq. 6: relative-rotation discrepancy
    if (rotation_angle_deg(rel_vio.q * rel_vls.q.conjugate()) >= valid_rot_deg) return false;

    // Eq. 8: 3-sigma gate on the drift sample
    const Pose err = compose(*cur.drift_sample, inverse(dist.mean));
    if (err.t.norm() >= 3.0 * dist.sigma_t) return false;
    if (rotation_angle_rad(err.q) >= 3.0 * dist.sigma_r) return false;
    return true;
}

DriftRansacResult drift_ransac(const std::vector<Pose>& vio_poses,
                               const std::vector<Pose>& vls_poses, int n_sets, int set_size,
                               uint64_t seed) {
    const int n = static_cast<int>(vio_poses.size());
    if (n != static_cast<int>(vls_poses.size()) || n < set_size) {
        throw Error(ErrorCode::TooFewKeyframes, "drift RANSAC needs >= set_size keyframes");
    }
    std::vector<Eigen::Vector3d> src(n), dst(n);
    for (int i = 0; i < n; ++i) {
        src[i] = vio_poses[i].t;
        dst[i] = vls_poses[i].t;
    }
    auto total_error = [&](const Pose& t) {
        double e = 0.0;
        for (int i = 0; i < n; ++i) e += (apply(t, src[i]) - dst[i]).norm();
        return e;
    };

    Rng rng(mix_seed(seed, 0x64726674ULL));
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;

    std::optional<Pose> best;
    double best_err = std::numeric_limits<double>::infinity();
    for (int s = 0; s < n_sets; ++s) {
        for (int j = 0; j < set_size; ++j) {
            const int pick = j + static_cast<int>(rng.uniform_index(n - j));
            std::swap(order[j], order[pick]);
        }
        std::vector<Eigen::Vector3d> src_s, dst_s;
        src_s.reserve(set_size);
        dst_s.reserve(set_size);
        for (int j = 0; j < set_size; ++j) {
            src_s.push_back(src[order[j]]);
            dst_s.push_back(dst[order[j]]);
        }
        Pose candidate;
        try {
            candidate = umeyama_align(src_s, dst_s);
        } catch (const Error&) {
            continue;  // degenerate set
        }
        const double err = total_error(candidate);
        if (err < best_err) {
            best_err = err;
            best = candidate;
        }
    }
    if (!best) best = umeyama_align(src, dst);  // every set degenerate

    DriftRansacResult result;
    result.alignment = *best;
    result.beta.resize(n);
    for (int i = 0; i < n; ++i) {
        result.beta[i] = 1.0 / ((apply(*best, src[i]) - dst[i]).norm() + 1.0);
    }
    return result;
}

SyncResult sync_windows(std::deque<KeyFrameRecord>& kf_window,
                        std::deque<FrameState>& cf_window, int kf_capacity) {
    SyncResult out;
    while (static_cast<int>(kf_window.size()) > kf_capacity) kf_window.pop_front();
    if (kf_window.empty()) {
        for (size_t i = 0; i < cf_window.size(); ++i) {
            cf_window[i].pending = true;
            out.pending_indices.push_back(static_cast<int>(i));
        }
        return out;
    }
    const double t_start = kf_window.front().timestamp;
    const double t_end = kf_window.back().timestamp;
    while (!cf_window.empty() && cf_window.front().timestamp < t_start) cf_window.pop_front();
    for (size_t i = 0; i < cf_window.size(); ++i) {
        if (cf_window[i].timestamp <= t_end) {
            cf_window[i].pending = false;
            out.optimize_indices.push_back(static_cast<int>(i));
        } else {
            cf_window[i].pending = true;
            out.pending_indices.push_back(static_cast<int>(i));
        }
    }
    return out;
}

int middle_frame_index(const std::deque<FrameState>& cf_window) {
    if (cf_window.empty()) throw Error(ErrorCode::EmptyWindow, "empty common-frame window");
    const double mid = 0.5 * (cf_window.front().timestamp + cf_window.back().timestamp);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < cf_window.size(); ++i) {
        const double d = std::abs(cf_window[i].timestamp - mid);
        if (d <= best_d) {  // ties toward the newer frame
            best_d = d;
            best = static_cast<int>(i);
        }
    }
    return best;
}

// --- channels ---------------------------------------------------------------

void InProcessVlsChannel::submit(const WireRequest& req) {
    const auto t0 = Clock::now();
    ready_.push_back(service_.handle(req));
    latencies_.push_back(ms_since(t0));
}

WireResponse InProcessVlsChannel::wait_response() {
    if (ready_.empty()) throw Error(ErrorCode::InvalidArgument, "no outstanding request");
    WireResponse r = ready_.front();
    ready_.pop_front();
    return r;
}

struct TcpVlsChannel::Impl {
    VlsClient client;
    std::mutex mu;
    std::condition_variable cv;
    std::deque<WireRequest> requests;
    std::deque<std::pair<WireResponse, double>> responses;
    std::exception_ptr error;
    int outstanding = 0;
    bool stop = false;
    std::thread worker;

    Impl(const std::string& host, uint16_t port) : client(host, port) {
        worker = std::thread([this] { run(); });
    }

    ~Impl() {
        {
            std::lock_guard lk(mu);
            stop = true;
        }
        cv.notify_all();
        if (worker.joinable()) worker.join();
    }

    void run() {
        for (;;) {
            WireRequest req;
            {
                std::unique_lock lk(mu);
                cv.wait(lk, [&] { return stop || !requests.empty(); });
                if (stop && requests.empty()) return;
                req = std::move(requests.front());
                requests.pop_front();
            }
            const auto t0 = Clock::now();
            try {
                WireResponse resp = client.call(req);
                std::lock_guard lk(mu);
                responses.emplace_back(std::move(resp), ms_since(t0));
            } catch (...) {
                std::lock_guard lk(mu);
                error = std::current_exception();
            }
            cv.notify_all();
        }
    }
};

TcpVlsChannel::TcpVlsChannel(const std::string& host, uint16_t port)
    : impl_(std::make_unique<Impl>(host, port)) {}

TcpVlsChannel::~TcpVlsChannel() = default;

void TcpVlsChannel::submit(const WireRequest& req) {
    {
        std::lock_guard lk(impl_->mu);
        impl_->requests.push_back(req);
        ++impl_->outstanding;
    }
    impl_->cv.notify_all();
}

bool TcpVlsChannel::has_outstanding() const {
    std::lock_guard lk(impl_->mu);
    return impl_->outstanding > 0;
}

WireResponse TcpVlsChannel::wait_response() {
    std::unique_lock lk(impl_->mu);
    impl_->cv.wait(lk, [&] { return impl_->error || !impl_->responses.empty(); });
    if (impl_->error) std::rethrow_exception(impl_->error);
    auto [resp, ms] = impl_->responses.front();
    impl_->responses.pop_front();
    --impl_->outstanding;
    latencies_.push_back(ms);
    return resp;
}

CorruptingVlsChannel::CorruptingVlsChannel(VlsChannel& inner, double outlier_rate,
                                           uint64_t seed)
    : inner_(inner), rate_(outlier_rate), state_(mix_seed(seed, 0x6f75746cULL)) {}

WireResponse CorruptingVlsChannel::wait_response() {
    WireResponse resp = inner_.wait_response();
    if (resp.status != ResponseStatus::ok || rate_ <= 0.0) return resp;
    Rng rng(mix_seed(state_, resp.request_id));
    if (rng.uniform() >= rate_) return resp;
    // teleport: the zigzag failure mode the validation gates must reject
    Eigen::Vector3d dir(rng.gaussian(), rng.gaussian(), rng.gaussian());
    if (dir.norm() < 1e-9) dir = Eigen::Vector3d::UnitX();
    dir.normalize();
    resp.pose.t += dir * rng.uniform(5.0, 15.0);
    Eigen::Vector3d axis(rng.gaussian(), rng.gaussian(), rng.gaussian());
    if (axis.norm() < 1e-9) axis = Eigen::Vector3d::UnitZ();
    axis.normalize();
    resp.pose.q = resp.pose.q * quat_exp(axis * rng.uniform(0.1, 0.5));
    resp.pose.normalize();
    ++outliers_;
    return resp;
}

// --- engine -----------------------------------------------------------------

FusionEngine::FusionEngine(FusionParams params, VlsChannel* channel, uint64_t seed)
    : params_(std::move(params)), channel_(channel), seed_(seed) {}

std::optional<Pose> FusionEngine::prior_for_next_vls() const {
    if (!initialized_ || cf_window_.empty()) return std::nullopt;
    return cf_window_.back().fused;
}

void FusionEngine::consume_outstanding() {
    if (!channel_ || !channel_->has_outstanding()) return;
    handle_response(channel_->wait_response());
}

void FusionEngine::handle_response(const WireResponse& resp) {
    auto it = pending_requests_.find(resp.request_id);
    if (it == pending_requests_.end()) return;
    KeyFrameRecord rec = it->second;
    pending_requests_.erase(it);

    TickDiagnostics& diag = diagnostics_.empty() ? diagnostics_.emplace_back()
                                                 : diagnostics_.back();
    diag.vls_response = true;
    diag.vls_ok = resp.status == ResponseStatus::ok;

    if (resp.status != ResponseStatus::ok) {
        if (initialized_) register_failure();
        return;
    }

    rec.vls = std::make_pair(resp.pose, static_cast<int>(resp.inlier_count));
    rec.drift_sample = compute_drift_sample(rec);
    vls_track_.emplace_back(rec.timestamp, resp.pose);

    if (!initialized_) {
        init_samples_.push_back(rec);
        if (init_samples_.size() > 200) init_samples_.erase(init_samples_.begin());
        try_initialize();
        return;
    }

    const bool valid = validate_keyframe(kf_window_.back(), rec, drift_,
                                         params_.valid_dist, params_.valid_rot_deg);
    diag.vls_valid = valid;
    if (!valid) {
        register_failure();
        return;
    }

    rec.valid = true;
    kf_window_.push_back(rec);
    while (static_cast<int>(kf_window_.size()) > params_.pgo.kf_window) kf_window_.pop_front();
    std::vector<Pose> samples;
    for (const auto& kf : kf_window_) samples.push_back(*kf.drift_sample);
    if (samples.size() >= 2) {
        drift_ = update_drift_distribution(samples, params_.sigma_t_floor,
                                           params_.sigma_r_floor);
    }
    failures_ = 0;
    graph_dirty_ = true;
}

void FusionEngine::register_failure() {
    ++failures_;
    if (check_reinit(failures_, params_.reinit_threshold)) do_reinit();
}

void FusionEngine::do_reinit() {
    initialized_ = false;
    kf_window_.clear();
    cf_window_.clear();
    init_samples_.clear();
    drift_ = DriftDistribution{};
    failures_ = 0;
    ++reinit_count_;
    graph_dirty_ = false;
}

void FusionEngine::try_initialize() {
    std::vector<Pose> samples;
    samples.reserve(init_samples_.size());
    for (const auto& rec : init_samples_) samples.push_back(*rec.drift_sample);
    const DriftInit init =
        initialize_drift(samples, params_.min_cluster, params_.kmeans_k,
                         params_.kmeans_iterations, params_.mix_lambda,
                         mix_seed(seed_, init_attempts_++));
    if (!init.ready) return;

    kf_window_.clear();
    std::vector<Pose> member_samples;
    for (int idx : init.members) {
        KeyFrameRecord rec = init_samples_[idx];
        rec.valid = true;
        kf_window_.push_back(rec);
        while (static_cast<int>(kf_window_.size()) > params_.pgo.kf_window) {
            kf_window_.pop_front();
        }
    }
    for (const auto& kf : kf_window_) member_samples.push_back(*kf.drift_sample);
    if (member_samples.size() >= 2) {
        drift_ = update_drift_distribution(member_samples, params_.sigma_t_floor,
                                           params_.sigma_r_floor);
    } else {
        drift_.mean = init.drift;
        drift_.sigma_t = params_.sigma_t_floor;
        drift_.sigma_r = params_.sigma_r_floor;
        drift_.n_samples = static_cast<int>(member_samples.size());
    }
    initialized_ = true;
    failures_ = 0;
    init_samples_.clear();

    // pull the recent past into the common window, Eq. 9 states
    const double t_start = kf_window_.front().timestamp;
    cf_window_.clear();
    for (const auto& f : backlog_) {
        if (f.timestamp >= t_start) {
            FrameState st = f;
            st.fused = compose(drift_.mean, st.vio_pose);
            cf_window_.push_back(st);
        }
    }
    graph_dirty_ = true;
}

std::vector<double> FusionEngine::compute_betas(
    const std::vector<const KeyFrameRecord*>& kfs) const {
    std::vector<Pose> vio, vls;
    vio.reserve(kfs.size());
    vls.reserve(kfs.size());
    for (const auto* kf : kfs) {
        vio.push_back(kf->vio_pose);
        vls.push_back(kf->vls->first);
    }
    if (static_cast<int>(kfs.size()) >= params_.drift_set_size) {
        try {
            return drift_ransac(vio, vls, params_.drift_sets, params_.drift_set_size,
                                mix_seed(seed_, round_counter_))
                .beta;
        } catch (const Error&) {
            // fall through to the distribution-mean weighting
        }
    }
    std::vector<double> betas(kfs.size());
    for (size_t i = 0; i < kfs.size(); ++i) {
        betas[i] = 1.0 / ((apply(drift_.mean, vio[i].t) - vls[i].t).norm() + 1.0);
    }
    return betas;
}

void FusionEngine::process_frame(const TimedPose& vio_frame, const QueryFeatures* features) {
    const auto t0 = Clock::now();
    diagnostics_.emplace_back();
    TickDiagnostics& diag = diagnostics_.back();
    diag.timestamp = vio_frame.timestamp;
    diag.reinit_count = reinit_count_;

    if (vio_frame.is_keyframe) {
        consume_outstanding();
        if (features && channel_) {
            WireRequest req;
            req.request_id = next_request_id_++;
            req.timestamp = vio_frame.timestamp;
            req.prior = prior_for_next_vls();
            req.keypoints = features->keypoints;
            req.descriptors = features->descriptors;
            req.global_descriptor = features->global_descriptor;

            KeyFrameRecord rec;
            rec.timestamp = vio_frame.timestamp;
            rec.vio_pose = vio_frame.pose;
            rec.request_id = req.request_id;
            pending_requests_.emplace(req.request_id, rec);
            channel_->submit(req);
        }
    }

    FrameState st;
    st.timestamp = vio_frame.timestamp;
    st.vio_pose = vio_frame.pose;
    st.is_keyframe = vio_frame.is_keyframe;
    st.pending = true;

    backlog_.push_back(st);
    if (backlog_.size() > 8192) backlog_.pop_front();

    if (initialized_) {
        st.fused = compose(drift_.mean, st.vio_pose);  // Eq. 9 initial state
        cf_window_.push_back(st);
        run_tick(vio_frame.timestamp);
    }

    diag.initialized = initialized_;
    diag.kf_window_size = static_cast<int>(kf_window_.size());
    diag.cf_window_size = static_cast<int>(cf_window_.size());
    diag.tick_ms = ms_since(t0);
}

void FusionEngine::run_tick(double /*timestamp*/) {
    TickDiagnostics& diag = diagnostics_.back();
    const SyncResult sync = sync_windows(kf_window_, cf_window_, params_.pgo.kf_window);
    for (int idx : sync.pending_indices) {
        cf_window_[idx].fused = compose(drift_.mean, cf_window_[idx].vio_pose);
    }

    if (graph_dirty_ && sync.optimize_indices.size() >= 2) {
        std::vector<const KeyFrameRecord*> kfs;
        for (const auto& kf : kf_window_) kfs.push_back(&kf);
        const std::vector<double> betas = compute_betas(kfs);
        ++round_counter_;

        PoseGraph graph;
        std::map<double, int> node_by_ts;
        for (int idx : sync.optimize_indices) {
            const int node = graph.add_node(cf_window_[idx].fused);
            node_by_ts.emplace(cf_window_[idx].timestamp, node);
        }
        for (size_t a = 0; a + 1 < sync.optimize_indices.size(); ++a) {
            const auto& fa = cf_window_[sync.optimize_indices[a]];
            const auto& fb = cf_window_[sync.optimize_indices[a + 1]];
            graph.add_vio_edge(static_cast<int>(a), static_cast<int>(a + 1),
                               compose(inverse(fa.vio_pose), fb.vio_pose));
        }
        for (size_t i = 0; i < kfs.size(); ++i) {
            const auto it = node_by_ts.find(kfs[i]->timestamp);
            if (it != node_by_ts.end()) {
                graph.add_vls_edge(it->second, kfs[i]->vls->first, betas[i]);
            }
        }

        const OptResult step1 = graph.optimize_step1(params_.pgo);
        const OptResult step2 = graph.optimize_step2(params_.pgo);
        for (size_t a = 0; a < sync.optimize_indices.size(); ++a) {
            cf_window_[sync.optimize_indices[a]].fused = graph.node(static_cast<int>(a));
        }
        graph_dirty_ = false;
        diag.optimized = true;
        diag.cost_before = step1.initial_cost;
        diag.cost_after = step2.final_cost;
        diag.betas = betas;
    }

    if (!cf_window_.empty()) {
        const int mid = middle_frame_index(cf_window_);
        outputs_[cf_window_[mid].timestamp] = cf_window_[mid].fused;
    }
}

void FusionEngine::finish() {
    if (channel_ && channel_->has_outstanding()) {
        diagnostics_.emplace_back();
        diagnostics_.back().timestamp =
            cf_window_.empty() ? 0.0 : cf_window_.back().timestamp;
        consume_outstanding();
        if (initialized_) {
            run_tick(diagnostics_.back().timestamp);
            diagnostics_.back().initialized = true;
        }
    }
    for (const auto& f : cf_window_) outputs_[f.timestamp] = f.fused;
}

Trajectory FusionEngine::fused_trajectory() const {
    Trajectory traj;
    for (const auto& [ts, pose] : outputs_) traj.push_back(ts, pose);
    return traj;
}

Trajectory FusionEngine::vls_trajectory() const {
    Trajectory traj;
    for (const auto& [ts, pose] : vls_track_) traj.push_back(ts, pose);
    return traj;
}

std::vector<double> FusionEngine::optimize_tick_ms() const {
    std::vector<double> out;
    for (const auto& d : diagnostics_) {
        if (d.optimized) out.push_back(d.tick_ms);
    }
    return out;
}

}  // namespace geofuse
