#include <doctest.h>

#include <cmath>
#include <random>

#include "geofuse/error.hpp"
#include "geofuse/rng.hpp"
#include "geofuse/worldsim.hpp"
#include "test_util.hpp"

using namespace geofuse;
using namespace geofuse::testutil;

TEST_CASE("generate_world bounds and determinism") {
    const Eigen::Vector3d extent(50.0, 50.0, 5.0);
    const World w1 = generate_world(1000, extent, 42);
    const World w2 = generate_world(1000, extent, 42);
    REQUIRE(w1.landmarks.size() == 1000);
    for (size_t i = 0; i < w1.landmarks.size(); ++i) {
        CHECK(w1.landmarks[i].id == w2.landmarks[i].id);
        CHECK(w1.landmarks[i].position == w2.landmarks[i].position);
        for (int a = 0; a < 3; ++a) {
            CHECK(std::abs(w1.landmarks[i].position[a]) <= extent[a]);
        }
    }
    const World single = generate_world(1, extent, 7);
    CHECK(single.landmarks.size() == 1);
    const World other_seed = generate_world(1000, extent, 43);
    CHECK(other_seed.landmarks[0].position != w1.landmarks[0].position);
}

TEST_CASE("generate_trajectory circle geometry") {
    const double length = 100.0;
    const auto traj = generate_trajectory(TrajectoryShape::circle, length, 10.0, 5, 1,
                                          TrajectoryOptions{1.0, 1.5, 0.0, 0.0});
    const double radius = length / (2.0 * M_PI);
    CHECK(traj.size() == 1000);  // length/speed * hz
    for (const auto& f : traj) {
        CHECK(std::abs(f.pose.t.head<2>().norm() - radius) < 1e-9);
        CHECK(f.pose.t.z() == doctest::Approx(1.5));
    }
    // keyframe flags at 0, k, 2k, ...
    for (size_t i = 0; i < traj.size(); ++i) {
        CHECK(traj[i].is_keyframe == (i % 5 == 0));
    }
    // heading tangent: optical axis orthogonal to the radial direction
    for (size_t i = 0; i < traj.size(); i += 97) {
        const Eigen::Vector3d axis = traj[i].pose.q * Eigen::Vector3d::UnitZ();
        Eigen::Vector3d radial = traj[i].pose.t;
        radial.z() = 0.0;
        CHECK(std::abs(axis.dot(radial.normalized())) < 1e-9);
    }
}

TEST_CASE("generate_trajectory frame count and shapes") {
    for (auto shape :
         {TrajectoryShape::circle, TrajectoryShape::figure_eight, TrajectoryShape::waypoints}) {
        const auto traj = generate_trajectory(shape, 60.0, 20.0, 4, 3,
                                              TrajectoryOptions{2.0, 1.0, 0.0, 0.0});
        const long expected = std::lround(60.0 / 2.0 * 20.0);
        CHECK(std::abs(static_cast<long>(traj.size()) - expected) <= 1);
        // timestamps uniform, C0 positions: adjacent steps close to speed/hz
        for (size_t i = 1; i < traj.size(); ++i) {
            const double step = (traj[i].pose.t - traj[i - 1].pose.t).norm();
            CHECK(step < 3.0 * 2.0 / 20.0 + 1e-6);
            CHECK(traj[i].timestamp > traj[i - 1].timestamp);
        }
    }
}

TEST_CASE("render_observations projects on the optical axis to the principal point") {
    World world;
    world.descriptor_dim = 16;
    world.global_dim = 32;
    world.rng_seed = 5;
    world.landmarks.push_back({0, {0.0, 0.0, 5.0}});  // 5 m straight ahead of identity pose
    CameraModel cam;
    cam.max_range = 50.0;
    const auto obs = render_observations(world, cam, Pose::identity(), NoiseSpec{}, 1);
    REQUIRE(obs.keypoints.size() == 1);
    CHECK(obs.keypoints[0].u == doctest::Approx(cam.cx));
    CHECK(obs.keypoints[0].v == doctest::Approx(cam.cy));
    CHECK(obs.global_descriptor.norm() == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(obs.local_descriptors.row(0).norm() == doctest::Approx(1.0).epsilon(1e-5));

    // behind the camera: absent
    world.landmarks[0].position = {0.0, 0.0, -5.0};
    const auto obs2 = render_observations(world, cam, Pose::identity(), NoiseSpec{}, 1);
    CHECK(obs2.keypoints.empty());
}

TEST_CASE("render_observations equals the brute-force visibility set at zero noise") {
    const World world = generate_world(2000, {20.0, 20.0, 5.0}, 9, 16, 32);
    CameraModel cam;
    cam.max_range = 15.0;
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 5; ++trial) {
        const Pose pose = random_pose(rng, 8.0);
        const auto obs = render_observations(world, cam, pose, NoiseSpec{}, 3);
        std::vector<uint64_t> brute;
        for (const auto& lm : world.landmarks) {
            if ((lm.position - pose.t).norm() > cam.max_range) continue;
            const Eigen::Vector3d pc = pose.q.conjugate() * (lm.position - pose.t);
            if (pc.z() <= 0.0) continue;
            const double u = cam.fx * pc.x() / pc.z() + cam.cx;
            const double v = cam.fy * pc.y() / pc.z() + cam.cy;
            if (u < 0.0 || u >= cam.width || v < 0.0 || v >= cam.height) continue;
            brute.push_back(lm.id);
        }
        REQUIRE(obs.keypoints.size() == brute.size());
        for (size_t i = 0; i < brute.size(); ++i) CHECK(obs.keypoints[i].landmark_id == brute[i]);
    }
}

TEST_CASE("render_observations descriptors are deterministic without noise") {
    const World world = generate_world(500, {20.0, 20.0, 5.0}, 11, 24, 48);
    CameraModel cam;
    const Pose pose(Eigen::Quaterniond::Identity(), {0.0, 0.0, -10.0});
    const auto a = render_observations(world, cam, pose, NoiseSpec{}, 1);
    const auto b = render_observations(world, cam, pose, NoiseSpec{}, 2);  // different seed
    REQUIRE(a.keypoints.size() == b.keypoints.size());
    REQUIRE(a.keypoints.size() > 0);
    CHECK(a.local_descriptors == b.local_descriptors);
    CHECK(a.global_descriptor == b.global_descriptor);

    NoiseSpec noisy;
    noisy.descriptor_sigma = 0.1;
    const auto c = render_observations(world, cam, pose, noisy, 1);
    CHECK(a.local_descriptors != c.local_descriptors);
}

TEST_CASE("pixel noise is applied and bounded") {
    const World world = generate_world(800, {20.0, 20.0, 5.0}, 13, 16, 32);
    CameraModel cam;
    NoiseSpec noise;
    noise.pixel_sigma = 1.0;
    const Pose pose(Eigen::Quaterniond::Identity(), {0.0, 0.0, -10.0});
    const auto clean = render_observations(world, cam, pose, NoiseSpec{}, 4);
    const auto noisy = render_observations(world, cam, pose, noise, 4);
    REQUIRE(clean.keypoints.size() > 10);
    for (const auto& kp : noisy.keypoints) {
        CHECK(kp.u >= 0.0f);
        CHECK(kp.u < static_cast<float>(cam.width));
        CHECK(kp.v >= 0.0f);
        CHECK(kp.v < static_cast<float>(cam.height));
    }
}

TEST_CASE("simulate_vio with zero noise reproduces the frame-0-relative truth") {
    const auto traj = generate_trajectory(TrajectoryShape::circle, 50.0, 10.0, 5, 1);
    const auto vio = simulate_vio(traj, NoiseSpec{}, 7);
    REQUIRE(vio.size() == traj.size());
    CHECK(vio[0].pose.t.norm() < 1e-15);
    const Pose anchor = inverse(traj[0].pose);
    for (size_t i = 0; i < traj.size(); ++i) {
        const Pose expected = compose(anchor, traj[i].pose);
        CHECK((vio[i].pose.t - expected.t).norm() < 1e-9);
        CHECK(quat_angle_between(vio[i].pose.q, expected.q) < 1e-9);
        CHECK(vio[i].is_keyframe == traj[i].is_keyframe);
    }
}

TEST_CASE("translation-only vio noise leaves rotations exact") {
    const auto traj = generate_trajectory(TrajectoryShape::circle, 50.0, 10.0, 5, 1);
    NoiseSpec noise;
    noise.vio_trans_sigma = 0.05;
    const auto vio = simulate_vio(traj, noise, 3);
    const Pose anchor = inverse(traj[0].pose);
    double drift = 0.0;
    for (size_t i = 0; i < traj.size(); ++i) {
        const Pose expected = compose(anchor, traj[i].pose);
        CHECK(quat_angle_between(vio[i].pose.q, expected.q) < 1e-9);
        drift = std::max(drift, (vio[i].pose.t - expected.t).norm());
    }
    CHECK(drift > 0.0);
}

TEST_CASE("vio drift follows random-walk scaling over seeds") {
    const auto traj = generate_trajectory(TrajectoryShape::circle, 100.0, 10.0, 5, 1);
    REQUIRE(traj.size() == 1000);
    NoiseSpec noise;
    noise.vio_trans_sigma = 0.01;
    const Pose anchor = inverse(traj[0].pose);
    std::vector<double> final_drifts;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const auto vio = simulate_vio(traj, noise, seed);
        const Pose expected = compose(anchor, traj.back().pose);
        final_drifts.push_back((vio.back().pose.t - expected.t).norm());
    }
    double mean = 0.0;
    for (double d : final_drifts) mean += d;
    mean /= static_cast<double>(final_drifts.size());
    // 3D random walk over 999 steps at sigma 0.01: mean norm ~ 0.5 m
    CHECK(mean > 0.1);
    CHECK(mean < 2.0);
    MESSAGE("empirical mean final drift over 20 seeds: ", mean, " m");
}

TEST_CASE("vio relative-pose composition reproduces the absolute track") {
    const auto traj = generate_trajectory(TrajectoryShape::figure_eight, 60.0, 10.0, 4, 2);
    NoiseSpec noise;
    noise.vio_trans_sigma = 0.02;
    noise.vio_rot_sigma = 0.002;
    noise.vio_bias_walk = 0.001;
    const auto vio = simulate_vio(traj, noise, 5);
    Pose acc = vio[0].pose;
    for (size_t i = 1; i < vio.size(); ++i) {
        acc = compose(acc, compose(inverse(vio[i - 1].pose), vio[i].pose));
        CHECK((acc.t - vio[i].pose.t).norm() < 1e-9);
    }
}

TEST_CASE("invalid parameters are rejected") {
    CHECK_THROWS_AS((void)generate_world(0, {1, 1, 1}, 1), Error);
    CHECK_THROWS_AS((void)generate_trajectory(TrajectoryShape::circle, 10.0, 0.0, 5, 1), Error);
    CHECK_THROWS_AS((void)generate_trajectory(TrajectoryShape::circle, 10.0, 10.0, 0, 1), Error);
    const auto traj = generate_trajectory(TrajectoryShape::circle, 10.0, 10.0, 5, 1);
    std::vector<TimedPose> single(traj.begin(), traj.begin() + 1);
    CHECK_THROWS_AS((void)simulate_vio(single, NoiseSpec{}, 1), Error);
}
