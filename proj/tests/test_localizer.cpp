#include <doctest.h>

#include <algorithm>
#include <map>
#include <queue>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "geofuse/error.hpp"
#include "geofuse/localizer.hpp"
#include "geofuse/mapbuilder.hpp"
#include "geofuse/rng.hpp"
#include "geofuse/worldsim.hpp"
#include "test_util.hpp"

using namespace geofuse;
using namespace geofuse::testutil;

namespace {

struct Fixture {
    World world;
    CameraModel cam;
    std::vector<TimedPose> mapping_poses;
    MapIndex index;
    std::vector<MapShard> shards;
    std::unordered_map<uint64_t, std::shared_ptr<const MapShard>> shard_map;

    ShardAccess access() const {
        return [this](uint64_t id) { return shard_map.at(id); };
    }
};

const Fixture& fixture() {
    static Fixture f = [] {
        Fixture fx;
        fx.world = generate_world(900, {12.0, 12.0, 4.0}, 3001, 32, 64);
        fx.cam.max_range = 16.0;
        fx.mapping_poses = generate_trajectory(TrajectoryShape::circle, 50.0, 4.0, 1, 1,
                                               TrajectoryOptions{1.0, 1.0, 0.0, 0.0});
        std::vector<FrameObservation> frames;
        for (size_t i = 0; i < fx.mapping_poses.size(); ++i) {
            frames.push_back(render_observations(fx.world, fx.cam, fx.mapping_poses[i].pose,
                                                 NoiseSpec{}, mix_seed(900, i),
                                                 fx.mapping_poses[i].timestamp, true));
        }
        auto [index, shards] = build_map(frames, fx.cam);
        fx.index = std::move(index);
        fx.shards = std::move(shards);
        for (const auto& s : fx.shards) {
            fx.shard_map.emplace(s.image_id, std::make_shared<MapShard>(s));
        }
        return fx;
    }();
    return f;
}

QueryFeatures render_query(const Pose& pose, double pixel_sigma, double desc_sigma,
                           uint64_t seed) {
    NoiseSpec noise;
    noise.pixel_sigma = pixel_sigma;
    noise.descriptor_sigma = desc_sigma;
    return QueryFeatures::from_observation(
        render_observations(fixture().world, fixture().cam, pose, noise, seed));
}

// the 6-step retrieval post-condition, executed naively and independently
std::vector<uint64_t> retrieval_oracle(const MapIndex& index, const Eigen::VectorXf& query,
                                       const std::optional<Pose>& prior,
                                       const RetrievalParams& p) {
    struct Row {
        float score;
        size_t idx;
        bool kept;
    };
    std::vector<Row> rows;
    for (size_t i = 0; i < index.entries.size(); ++i) {
        rows.push_back({index.entries[i].global_descriptor.dot(query), i, true});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.idx < b.idx;
    });
    if (rows.size() > static_cast<size_t>(p.overfetch_factor * p.k)) {
        rows.resize(static_cast<size_t>(p.overfetch_factor * p.k));
    }
    if (prior) {
        size_t kept = 0;
        for (auto& r : rows) {
            r.kept = (index.entries[r.idx].pose.t - prior->t).norm() < p.prior_radius;
            kept += r.kept ? 1 : 0;
        }
        for (auto& r : rows) {
            if (kept >= static_cast<size_t>(p.k)) break;
            if (!r.kept) {
                r.kept = true;
                ++kept;
            }
        }
    }
    std::vector<uint64_t> out;
    std::vector<Eigen::Vector3d> kept_pos;
    auto scan = [&](bool want_kept) {
        for (const auto& r : rows) {
            if (out.size() == static_cast<size_t>(p.k)) return;
            if (r.kept != want_kept) continue;
            bool suppressed = false;
            for (const auto& pos : kept_pos) {
                if ((index.entries[r.idx].pose.t - pos).norm() < p.nms_radius) {
                    suppressed = true;
                }
            }
            if (suppressed) continue;
            kept_pos.push_back(index.entries[r.idx].pose.t);
            out.push_back(index.entries[r.idx].image_id);
        }
    };
    scan(true);
    scan(false);
    return out;
}

// textbook DBSCAN (FIFO seed expansion), written independently as the oracle
std::vector<int> dbscan_oracle(const std::vector<Pose>& poses, double eps, int min_pts,
                               double lambda) {
    const int n = static_cast<int>(poses.size());
    constexpr int kUnclassified = -2, kNoise = -1;
    std::vector<int> label(n, kUnclassified);
    auto region_query = [&](int p) {
        std::vector<int> nb;
        for (int q = 0; q < n; ++q) {
            if (pose_distance(poses[p], poses[q], lambda) <= eps) nb.push_back(q);
        }
        return nb;
    };
    int cluster = 0;
    for (int p = 0; p < n; ++p) {
        if (label[p] != kUnclassified) continue;
        auto seeds = region_query(p);
        if (static_cast<int>(seeds.size()) < min_pts) {
            label[p] = kNoise;
            continue;
        }
        label[p] = cluster;
        std::queue<int> queue;
        for (int s : seeds) {
            if (s != p) queue.push(s);
        }
        while (!queue.empty()) {
            const int q = queue.front();
            queue.pop();
            if (label[q] == kNoise) label[q] = cluster;
            if (label[q] != kUnclassified) continue;
            label[q] = cluster;
            auto nb = region_query(q);
            if (static_cast<int>(nb.size()) >= min_pts) {
                for (int s : nb) queue.push(s);
            }
        }
        ++cluster;
    }
    for (auto& l : label) {
        if (l == kUnclassified) l = kNoise;
    }
    return label;
}

std::vector<Match2D3D> exact_matches(const Pose& pose, const CameraModel& cam,
                                     const std::vector<Eigen::Vector3d>& points) {
    std::vector<Match2D3D> out;
    for (size_t i = 0; i < points.size(); ++i) {
        Eigen::Vector2d px;
        REQUIRE(project_point(cam, pose, points[i], &px));
        Match2D3D m;
        m.query_kp_index = static_cast<int>(i);
        m.landmark_id = i;
        m.p3d = points[i];
        m.pixel = px;
        m.descriptor_distance = 0.1f;
        out.push_back(m);
    }
    return out;
}

std::vector<Eigen::Vector3d> frustum_points(int n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(-3.0, 3.0), uz(4.0, 14.0);
    std::vector<Eigen::Vector3d> out;
    for (int i = 0; i < n; ++i) out.emplace_back(ux(rng), 0.6 * ux(rng), uz(rng));
    return out;
}

}  // namespace

TEST_CASE("retrieval with an exact prior returns the nearest mapping image") {
    const auto& fx = fixture();
    RetrievalParams params;
    params.k = 1;
    params.prior_radius = 3.0;
    params.nms_radius = 0.5;
    for (size_t i = 0; i < fx.index.entries.size(); i += 5) {
        const Pose prior = fx.index.entries[i].pose;
        const auto query = render_query(prior, 0.0, 0.0, 1);
        const auto got =
            retrieve_references(fx.index, query.global_descriptor, prior, params);
        REQUIRE(got.image_ids.size() == 1);
        CHECK(got.image_ids ==
              retrieval_oracle(fx.index, query.global_descriptor, prior, params));
        // positionally nearest mapping image wins on its own descriptor
        CHECK(got.image_ids[0] == fx.index.entries[i].image_id);
    }
}

TEST_CASE("retrieval equals the brute-force six-step oracle") {
    const auto& fx = fixture();
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 40; ++trial) {
        RetrievalParams params;
        params.k = 1 + static_cast<int>(rng() % 6);
        params.overfetch_factor = 2 + static_cast<int>(rng() % 9);
        params.prior_radius = 1.0 + 10.0 * std::uniform_real_distribution<double>()(rng);
        params.nms_radius = 2.0 * std::uniform_real_distribution<double>()(rng);
        std::optional<Pose> prior;
        if (trial % 3 != 0) prior = random_pose(rng, 9.0);
        const auto query = render_query(random_pose(rng, 8.0), 0.0, 0.0, trial);
        const auto got =
            retrieve_references(fx.index, query.global_descriptor, prior, params);
        CHECK(got.image_ids ==
              retrieval_oracle(fx.index, query.global_descriptor, prior, params));
        CHECK(got.shortfall == (got.image_ids.size() < static_cast<size_t>(params.k)));
    }
}

TEST_CASE("retrieval falls back to score rank when the prior excludes everything") {
    const auto& fx = fixture();
    RetrievalParams params;
    params.k = 4;
    params.prior_radius = 0.001;  // nothing within range
    const Pose prior(Eigen::Quaterniond::Identity(), {500.0, 500.0, 0.0});
    const auto query = render_query(fx.index.entries[0].pose, 0.0, 0.0, 5);
    const auto got = retrieve_references(fx.index, query.global_descriptor, prior, params);
    CHECK(got.image_ids.size() == 4);
    CHECK(!got.shortfall);
    CHECK(got.image_ids == retrieval_oracle(fx.index, query.global_descriptor, prior, params));
}

TEST_CASE("knn_match identifies landmarks perfectly without noise") {
    const auto& fx = fixture();
    const auto& entry = fx.index.entries[2];
    const auto query = render_query(entry.pose, 0.0, 0.0, 9);
    const auto shard = fx.shard_map.at(entry.image_id);
    const auto matches = knn_match(query, shard->landmarks, 0.85f);
    REQUIRE(matches.size() >= 10);
    std::unordered_map<uint64_t, size_t> shard_ids;
    for (size_t i = 0; i < shard->landmarks.size(); ++i) {
        shard_ids[shard->landmarks[i].id] = i;
    }
    // every match points at the query keypoint's own landmark
    const auto obs = render_observations(fx.world, fx.cam, entry.pose, NoiseSpec{}, 9);
    for (const auto& m : matches) {
        CHECK(obs.keypoints[m.query_kp_index].landmark_id == m.landmark_id);
        CHECK(m.descriptor_distance < 1e-4f);
    }
}

TEST_CASE("knn_match single-landmark shard passes the ratio test vacuously") {
    const auto& fx = fixture();
    const auto& entry = fx.index.entries[0];
    const auto shard = fx.shard_map.at(entry.image_id);
    std::vector<MapLandmark> single = {shard->landmarks[0]};
    QueryFeatures query;
    query.keypoints = {{100.0f, 100.0f}};
    query.descriptors = single[0].descriptor.transpose();
    query.global_descriptor = Eigen::VectorXf::Zero(fx.index.global_dim);
    const auto matches = knn_match(query, single, 0.85f);
    REQUIRE(matches.size() == 1);
    CHECK(matches[0].landmark_id == single[0].id);
}

TEST_CASE("knn_match precision degrades monotonically with descriptor noise") {
    const auto& fx = fixture();
    const auto& entry = fx.index.entries[4];
    const auto shard = fx.shard_map.at(entry.image_id);
    const auto obs_clean = render_observations(fx.world, fx.cam, entry.pose, NoiseSpec{}, 21);
    auto precision_at = [&](double sigma) {
        int correct = 0, total = 0;
        for (uint64_t seed = 0; seed < 10; ++seed) {
            const auto query = render_query(entry.pose, 0.0, sigma, 100 + seed);
            const auto matches = knn_match(query, shard->landmarks, 0.9f);
            for (const auto& m : matches) {
                ++total;
                if (obs_clean.keypoints[m.query_kp_index].landmark_id == m.landmark_id) {
                    ++correct;
                }
            }
        }
        return total == 0 ? 0.0 : static_cast<double>(correct) / total;
    };
    const double p_low = precision_at(0.05);
    const double p_mid = precision_at(0.5);
    const double p_high = precision_at(1.2);
    CHECK(p_low >= p_mid);
    CHECK(p_mid >= p_high);
    CHECK(p_low > 0.99);
}

TEST_CASE("pnp_ransac recovers the exact pose from noiseless matches") {
    CameraModel cam;
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        Pose truth = random_pose(rng, 2.0);
        const auto points_local = frustum_points(20, 100 + trial);
        std::vector<Eigen::Vector3d> world_pts;
        for (const auto& p : points_local) world_pts.push_back(apply(truth, p));
        const auto matches = exact_matches(truth, cam, world_pts);
        const auto result = pnp_ransac(matches, cam, PnpParams{}, trial);
        CHECK((result.pose.t - truth.t).norm() < 1e-6);
        CHECK(quat_angle_between(result.pose.q, truth.q) < 1e-6);
        CHECK(result.inlier_indices.size() == 20);
    }
}

TEST_CASE("pnp_ransac excludes gross outliers") {
    CameraModel cam;
    std::mt19937_64 rng(32);
    const Pose truth = random_pose(rng, 2.0);
    const auto points_local = frustum_points(12, 55);
    std::vector<Eigen::Vector3d> world_pts;
    for (const auto& p : points_local) world_pts.push_back(apply(truth, p));
    auto matches = exact_matches(truth, cam, world_pts);
    // 8 matches pointing at wrong, far-away landmarks
    for (int i = 0; i < 8; ++i) {
        Match2D3D m;
        m.query_kp_index = 12 + i;
        m.landmark_id = 100 + i;
        m.p3d = apply(truth, Eigen::Vector3d(0.0, 0.0, 8.0)) + random_vec3(rng, 30.0);
        m.pixel = Eigen::Vector2d(50.0 + 40.0 * i, 300.0);
        m.descriptor_distance = 0.5f;
        matches.push_back(m);
    }
    const auto result = pnp_ransac(matches, cam, PnpParams{}, 7);
    CHECK((result.pose.t - truth.t).norm() < 1e-6);
    REQUIRE(result.inlier_indices.size() == 12);
    for (int idx : result.inlier_indices) CHECK(idx < 12);
}

TEST_CASE("pnp_ransac inliers reproject within threshold under the returned pose") {
    CameraModel cam;
    std::mt19937_64 rng(33);
    const Pose truth = random_pose(rng, 2.0);
    const auto points_local = frustum_points(30, 77);
    std::vector<Eigen::Vector3d> world_pts;
    for (const auto& p : points_local) world_pts.push_back(apply(truth, p));
    auto matches = exact_matches(truth, cam, world_pts);
    std::normal_distribution<double> px_noise(0.0, 1.0);
    for (auto& m : matches) {
        m.pixel.x() += px_noise(rng);
        m.pixel.y() += px_noise(rng);
    }
    PnpParams params;
    const auto result = pnp_ransac(matches, cam, params, 3);
    for (int idx : result.inlier_indices) {
        const Eigen::Vector3d pc =
            result.pose.q.conjugate() * (matches[idx].p3d - result.pose.t);
        REQUIRE(pc.z() > 0.0);
        const Eigen::Vector2d px(cam.fx * pc.x() / pc.z() + cam.cx,
                                 cam.fy * pc.y() / pc.z() + cam.cy);
        CHECK((px - matches[idx].pixel).norm() < params.reproj_threshold_px);
    }
}

TEST_CASE("pnp_ransac error paths and determinism") {
    CameraModel cam;
    std::mt19937_64 rng(34);
    const Pose truth = random_pose(rng, 1.0);
    const auto points_local = frustum_points(5, 91);
    std::vector<Eigen::Vector3d> world_pts;
    for (const auto& p : points_local) world_pts.push_back(apply(truth, p));
    const auto five = exact_matches(truth, cam, world_pts);
    CHECK_THROWS_AS((void)pnp_ransac(five, cam, PnpParams{}, 1), Error);

    const auto pts20 = frustum_points(20, 92);
    std::vector<Eigen::Vector3d> wp;
    for (const auto& p : pts20) wp.push_back(apply(truth, p));
    auto matches = exact_matches(truth, cam, wp);
    const auto a = pnp_ransac(matches, cam, PnpParams{}, 42);
    const auto b = pnp_ransac(matches, cam, PnpParams{}, 42);
    CHECK(a.pose.t == b.pose.t);
    CHECK(a.pose.q.coeffs() == b.pose.q.coeffs());
    CHECK(a.inlier_indices == b.inlier_indices);
}

TEST_CASE("dbscan_poses basic cases") {
    const Pose base = Pose::identity();
    std::vector<Pose> same(5, base);
    CHECK(dbscan_poses(same, 0.1, 2).size() == 5);

    std::vector<Pose> mixed;
    std::mt19937_64 rng(41);
    for (int i = 0; i < 4; ++i) {
        Pose p = base;
        p.t += random_vec3(rng, 0.02);
        mixed.push_back(p);
    }
    mixed.push_back(Pose(Eigen::Quaterniond::Identity(), {10.0, 0.0, 0.0}));
    const auto members = dbscan_poses(mixed, 0.5, 2);
    CHECK(members == std::vector<int>{0, 1, 2, 3});

    std::vector<Pose> distant;
    for (int i = 0; i < 5; ++i) {
        distant.push_back(Pose(Eigen::Quaterniond::Identity(), {10.0 * i, 0.0, 0.0}));
    }
    CHECK(dbscan_poses(distant, 0.5, 2).empty());
}

TEST_CASE("dbscan equals the textbook oracle on random instances") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 60; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 49);
        std::vector<Pose> poses;
        for (int i = 0; i < n; ++i) {
            Pose p;
            p.t = random_vec3(rng, 2.0);
            p.q = random_quat(rng);
            poses.push_back(p);
        }
        const double eps = 0.3 + 2.0 * std::uniform_real_distribution<double>()(rng);
        const int min_pts = 1 + static_cast<int>(rng() % 4);
        CHECK(dbscan_labels(poses, eps, min_pts, 1.0) ==
              dbscan_oracle(poses, eps, min_pts, 1.0));
    }
}

TEST_CASE("refine_pose is a fixed point at the optimum and recovers from perturbation") {
    CameraModel cam;
    std::mt19937_64 rng(51);
    const Pose truth = random_pose(rng, 2.0);
    const auto pts = frustum_points(25, 61);
    std::vector<Eigen::Vector3d> wp;
    for (const auto& p : pts) wp.push_back(apply(truth, p));
    const auto matches = exact_matches(truth, cam, wp);

    const Pose unchanged = refine_pose(truth, matches, cam);
    CHECK((unchanged.t - truth.t).norm() < 1e-9);
    CHECK(quat_angle_between(unchanged.q, truth.q) < 1e-9);

    Pose coarse = truth;
    coarse.t += Eigen::Vector3d(0.12, -0.1, 0.1);
    coarse.q = coarse.q * quat_exp(Eigen::Vector3d(0.02, 0.02, 0.015));
    const Pose refined = refine_pose(coarse, matches, cam);
    CHECK((refined.t - truth.t).norm() < 1e-6);
    CHECK(quat_angle_between(refined.q, truth.q) < 1e-6);
}

TEST_CASE("refine_pose deduplicates landmark ids keeping the best distance") {
    CameraModel cam;
    std::mt19937_64 rng(52);
    const Pose truth = random_pose(rng, 1.0);
    const auto pts = frustum_points(10, 62);
    std::vector<Eigen::Vector3d> wp;
    for (const auto& p : pts) wp.push_back(apply(truth, p));
    auto matches = exact_matches(truth, cam, wp);
    // duplicate of landmark 0 with a better distance but a corrupted pixel
    Match2D3D dup = matches[0];
    dup.descriptor_distance = 0.01f;
    dup.pixel += Eigen::Vector2d(50.0, 50.0);
    matches.push_back(dup);
    const auto unique = dedup_matches(matches);
    CHECK(unique.size() == 10);
    for (const auto& m : unique) {
        if (m.landmark_id == 0) CHECK(m.descriptor_distance == 0.01f);
    }

    std::vector<Match2D3D> too_few(matches.begin(), matches.begin() + 5);
    CHECK_THROWS_AS((void)refine_pose(truth, too_few, cam), Error);
}

TEST_CASE("observation constraints keep everything a mapping camera observed") {
    const auto& fx = fixture();
    ConstraintParams params;
    params.delta_L = 0.0;
    params.delta_theta = 0.0;
    params.camera_radius = 5.0;
    params.camera_normal_max_angle = 0.8;
    for (size_t i = 0; i < fx.index.entries.size(); i += 7) {
        const auto& entry = fx.index.entries[i];
        const auto got =
            observation_constraint_landmarks(fx.index, fx.access(), entry.pose, params);
        std::unordered_set<uint64_t> got_ids;
        for (const auto& lm : got) got_ids.insert(lm.id);
        for (const auto& lm : fx.shard_map.at(entry.image_id)->landmarks) {
            CHECK(got_ids.count(lm.id) == 1);
        }
    }
}

TEST_CASE("observation constraints equal the brute-force filter with infinite radius") {
    const auto& fx = fixture();
    ConstraintParams params;
    params.delta_L = 0.5;
    params.delta_theta = 0.2;
    params.camera_radius = std::numeric_limits<double>::infinity();
    params.camera_normal_max_angle = 10.0;  // wide open
    std::mt19937_64 rng(61);
    for (int trial = 0; trial < 50; ++trial) {
        const Pose coarse = random_pose(rng, 10.0);
        const auto got =
            observation_constraint_landmarks(fx.index, fx.access(), coarse, params);
        std::set<uint64_t> got_ids;
        for (const auto& lm : got) got_ids.insert(lm.id);
        CHECK(got_ids.size() == got.size());  // dedup by id

        std::set<uint64_t> brute;
        std::unordered_set<uint64_t> seen;
        for (const auto& entry : fx.index.entries) {
            for (const auto& lm : fx.shard_map.at(entry.image_id)->landmarks) {
                if (!seen.insert(lm.id).second) continue;
                if (cone_admits(lm.cone, lm.p3d, coarse.t, params.delta_L,
                                params.delta_theta)) {
                    brute.insert(lm.id);
                }
            }
        }
        CHECK(got_ids == brute);
    }
}

TEST_CASE("a landmark whose cone points away from the query is filtered out") {
    const auto& fx = fixture();
    // take any landmark and stand on the opposite side of its cone
    const auto shard = fx.shard_map.at(fx.index.entries[0].image_id);
    const auto& lm = shard->landmarks[0];
    const Eigen::Vector3d opposite =
        lm.p3d - 0.5 * static_cast<double>(lm.cone.L) * lm.cone.n.cast<double>();
    CHECK_FALSE(cone_admits(lm.cone, lm.p3d, opposite, 0.0, 0.0));
    const Eigen::Vector3d inside =
        lm.p3d + 0.5 * static_cast<double>(lm.cone.L) * lm.cone.n.cast<double>();
    CHECK(cone_admits(lm.cone, lm.p3d, inside, 0.1, 0.1));
}

TEST_CASE("localize at a mapping pose with zero noise is exact") {
    const auto& fx = fixture();
    LocalizeParams params;
    params.constraint.camera_radius = 8.0;
    int checked = 0;
    for (size_t i = 0; i < fx.index.entries.size(); i += 5) {
        const auto& entry = fx.index.entries[i];
        const auto query = render_query(entry.pose, 0.0, 0.0, 500 + i);
        const auto result =
            localize(fx.index, fx.cam, fx.access(), query, entry.pose, params, i);
        REQUIRE(result.ok);
        CHECK((result.pose.t - entry.pose.t).norm() < 1e-4);
        CHECK(quat_angle_between(result.pose.q, entry.pose.q) < 1e-4);
        CHECK(result.inlier_count >= 6);
        // second-pass monotonicity on noiseless queries
        CHECK(result.inlier_count >= result.first_pass_inliers);
        ++checked;
    }
    CHECK(checked >= 4);
}

TEST_CASE("localize between mapping poses with pixel noise stays centimetric") {
    const auto& fx = fixture();
    LocalizeParams params;
    params.constraint.camera_radius = 8.0;
    const Pose a = fx.index.entries[3].pose;
    const Pose b = fx.index.entries[4].pose;
    Pose mid;
    mid.t = 0.5 * (a.t + b.t);
    mid.q = a.q.slerp(0.5, b.q);
    mid.normalize();
    std::vector<double> errors;
    for (uint64_t seed = 0; seed < 8; ++seed) {
        const auto query = render_query(mid, 0.5, 0.05, 700 + seed);
        const auto result = localize(fx.index, fx.cam, fx.access(), query, mid, params, seed);
        REQUIRE(result.ok);
        errors.push_back((result.pose.t - mid.t).norm());
    }
    std::sort(errors.begin(), errors.end());
    CHECK(errors[errors.size() / 2] < 0.05);
}

TEST_CASE("localize fails cleanly when nothing is covisible") {
    const auto& fx = fixture();
    LocalizeParams params;
    // far outside the world, staring into the void
    const Pose nowhere(Eigen::Quaterniond::Identity(), {400.0, 400.0, 50.0});
    const auto query = render_query(nowhere, 0.0, 0.0, 9001);
    const auto result = localize(fx.index, fx.cam, fx.access(), query, nowhere, params, 1);
    CHECK_FALSE(result.ok);
    CHECK((result.failure_stage == LocalizeStage::match_first ||
           result.failure_stage == LocalizeStage::retrieval ||
           result.failure_stage == LocalizeStage::pnp));
}

TEST_CASE("localize is deterministic and worker-count independent") {
    const auto& fx = fixture();
    LocalizeParams params;
    params.constraint.camera_radius = 8.0;
    const auto& entry = fx.index.entries[6];
    const auto query = render_query(entry.pose, 0.5, 0.05, 321);

    params.workers = 1;
    const auto a = localize(fx.index, fx.cam, fx.access(), query, entry.pose, params, 99);
    const auto b = localize(fx.index, fx.cam, fx.access(), query, entry.pose, params, 99);
    params.workers = 4;
    const auto c = localize(fx.index, fx.cam, fx.access(), query, entry.pose, params, 99);
    REQUIRE(a.ok);
    CHECK(a.pose.t == b.pose.t);
    CHECK(a.pose.q.coeffs() == b.pose.q.coeffs());
    CHECK(a.inlier_count == b.inlier_count);
    CHECK(a.pose.t == c.pose.t);
    CHECK(a.pose.q.coeffs() == c.pose.q.coeffs());
    CHECK(a.inlier_count == c.inlier_count);
}
