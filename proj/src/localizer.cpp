#include "geofuse/localizer.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "geofuse/error.hpp"
#include "geofuse/rng.hpp"

namespace geofuse {

namespace {

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
    Eigen::Matrix3d m;
    m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), 0.0, v.x();
    return m;
}

double huber_cost(double s, double delta) {
    if (delta <= 0.0 || s <= delta) return 0.5 * s * s;
    return delta * (s - 0.5 * delta);
}

// Reprojection LM over a 6-DoF pose. Parameterized as world->camera
// (W, c) with left-multiplicative rotation increments; huber_px <= 0 gives a
// plain squared cost.
Pose optimize_pose_reproj(const Pose& init, const std::vector<Match2D3D>& matches,
                          const CameraModel& cam, double huber_px, int max_iterations) {
    Eigen::Matrix3d w_rot = init.q.conjugate().toRotationMatrix();
    Eigen::Vector3d c_vec = -(w_rot * init.t);

    auto cost_of = [&](const Eigen::Matrix3d& w, const Eigen::Vector3d& c) {
        double total = 0.0;
        for (const auto& m : matches) {
            const Eigen::Vector3d pc = w * m.p3d + c;
            if (pc.z() <= 1e-9) {
                total += 1e8;  // behind camera: large fixed penalty
                continue;
            }
            const double inv_z = 1.0 / pc.z();
            const Eigen::Vector2d res(cam.fx * pc.x() * inv_z + cam.cx - m.pixel.x(),
                                      cam.fy * pc.y() * inv_z + cam.cy - m.pixel.y());
            total += huber_cost(res.norm(), huber_px);
        }
        return total;
    };

    double cost = cost_of(w_rot, c_vec);
    double lambda = 1e-4;
    for (int it = 0; it < max_iterations; ++it) {
        Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
        Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
        for (const auto& m : matches) {
            const Eigen::Vector3d pc = w_rot * m.p3d + c_vec;
            if (pc.z() <= 1e-9) continue;
            const double inv_z = 1.0 / pc.z();
            const Eigen::Vector2d res(cam.fx * pc.x() * inv_z + cam.cx - m.pixel.x(),
                                      cam.fy * pc.y() * inv_z + cam.cy - m.pixel.y());
            Eigen::Matrix<double, 2, 3> jp;
            jp << cam.fx * inv_z, 0.0, -cam.fx * pc.x() * inv_z * inv_z,
                  0.0, cam.fy * inv_z, -cam.fy * pc.y() * inv_z * inv_z;
            Eigen::Matrix<double, 2, 6> j;
            j.leftCols<3>() = -jp * skew(pc);
            j.rightCols<3>() = jp;
            const double s = res.norm();
            const double w = (huber_px > 0.0 && s > huber_px) ? huber_px / s : 1.0;
            h += w * j.transpose() * j;
            g -= w * j.transpose() * res;
        }
        bool improved = false;
        for (int attempt = 0; attempt < 6; ++attempt) {
            Eigen::Matrix<double, 6, 6> damped = h;
            for (int d = 0; d < 6; ++d) {
                damped(d, d) += lambda * std::max(h(d, d), 1e-12);
            }
            const Eigen::Matrix<double, 6, 1> delta = damped.ldlt().solve(g);
            if (!delta.allFinite()) {
                lambda *= 4.0;
                continue;
            }
            const Eigen::Matrix3d rot_inc =
                quat_exp(delta.head<3>()).toRotationMatrix();
            const Eigen::Matrix3d w_try = rot_inc * w_rot;
            const Eigen::Vector3d c_try = rot_inc * c_vec + delta.tail<3>();
            const double cost_try = cost_of(w_try, c_try);
            if (cost_try < cost) {
                const double rel = (cost - cost_try) / std::max(cost, 1e-300);
                w_rot = w_try;
                c_vec = c_try;
                cost = cost_try;
                lambda = std::max(lambda * 0.5, 1e-12);
                improved = true;
                if (rel < 1e-12) it = max_iterations;  // converged
                break;
            }
            lambda *= 4.0;
        }
        if (!improved) break;
    }

    Eigen::Quaterniond q(w_rot.transpose());
    return Pose(q, -(w_rot.transpose() * c_vec));
}

std::optional<Pose> pnp_dlt(const std::vector<Match2D3D>& matches,
                            const std::vector<int>& sample, const CameraModel& cam) {
    const size_t n = sample.size();
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (int idx : sample) centroid += matches[idx].p3d;
    centroid /= static_cast<double>(n);
    double scale = 0.0;
    for (int idx : sample) scale += (matches[idx].p3d - centroid).norm();
    scale /= static_cast<double>(n) * std::sqrt(3.0);
    if (scale < 1e-9) return std::nullopt;

    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * n, 12);
    for (size_t i = 0; i < n; ++i) {
        const auto& m = matches[sample[i]];
        const Eigen::Vector3d xt = (m.p3d - centroid) / scale;
        const double xn = (m.pixel.x() - cam.cx) / cam.fx;
        const double yn = (m.pixel.y() - cam.cy) / cam.fy;
        const Eigen::Vector4d xh(xt.x(), xt.y(), xt.z(), 1.0);
        a.block<1, 4>(2 * i, 0) = xh.transpose();
        a.block<1, 4>(2 * i, 8) = -xn * xh.transpose();
        a.block<1, 4>(2 * i + 1, 4) = xh.transpose();
        a.block<1, 4>(2 * i + 1, 8) = -yn * xh.transpose();
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    const Eigen::VectorXd v = svd.matrixV().col(11);
    Eigen::Matrix3d b_norm;
    b_norm << v(0), v(1), v(2), v(4), v(5), v(6), v(8), v(9), v(10);
    Eigen::Vector3d b_t(v(3), v(7), v(11));

    // undo the 3D normalization: X_tilde = (X - centroid) / scale
    Eigen::Matrix3d b_mat = b_norm / scale;
    Eigen::Vector3d b_vec = b_t - b_norm * centroid / scale;

    int positive = 0;
    for (int idx : sample) {
        if ((b_mat * matches[idx].p3d + b_vec).z() > 0.0) ++positive;
    }
    if (2 * positive < static_cast<int>(n)) {
        b_mat = -b_mat;
        b_vec = -b_vec;
    }

    Eigen::JacobiSVD<Eigen::Matrix3d> bsvd(b_mat, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const double d = (bsvd.matrixU() * bsvd.matrixV().transpose()).determinant();
    Eigen::Matrix3d s_fix = Eigen::Matrix3d::Identity();
    s_fix(2, 2) = d;
    const Eigen::Matrix3d r_wc = bsvd.matrixU() * s_fix * bsvd.matrixV().transpose();
    const Eigen::Vector3d sv = bsvd.singularValues();
    const double s = (sv(0) + sv(1) + d * sv(2)) / 3.0;
    if (s <= 1e-12 || !r_wc.allFinite()) return std::nullopt;

    const Eigen::Matrix3d r = r_wc.transpose();
    const Eigen::Vector3d t = -(r * (b_vec / s));
    if (!t.allFinite()) return std::nullopt;
    return Pose(Eigen::Quaterniond(r), t);
}

double reproj_error(const Match2D3D& m, const Pose& pose, const CameraModel& cam) {
    const Eigen::Vector3d pc = pose.q.conjugate() * (m.p3d - pose.t);
    if (pc.z() <= 0.0) return std::numeric_limits<double>::infinity();
    const double inv_z = 1.0 / pc.z();
    const Eigen::Vector2d px(cam.fx * pc.x() * inv_z + cam.cx,
                             cam.fy * pc.y() * inv_z + cam.cy);
    return (px - m.pixel).norm();
}

int count_inliers(const std::vector<Match2D3D>& matches, const Pose& pose,
                  const CameraModel& cam, double threshold) {
    int n = 0;
    for (const auto& m : matches) {
        if (reproj_error(m, pose, cam) < threshold) ++n;
    }
    return n;
}

void parallel_for_n(int n, int workers, const std::function<void(int)>& fn) {
    const int w = std::min(workers, n);
    if (w <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(w);
    for (int t = 0; t < w; ++t) {
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace

const char* localize_stage_name(LocalizeStage stage) {
    switch (stage) {
        case LocalizeStage::none: return "none";
        case LocalizeStage::bad_request: return "bad_request";
        case LocalizeStage::retrieval: return "retrieval";
        case LocalizeStage::match_first: return "match_first";
        case LocalizeStage::pnp: return "pnp";
        case LocalizeStage::cluster: return "cluster";
        case LocalizeStage::refine_first: return "refine_first";
        case LocalizeStage::constraint: return "constraint";
        case LocalizeStage::match_second: return "match_second";
        case LocalizeStage::refine_second: return "refine_second";
    }
    return "unknown";
}

QueryFeatures QueryFeatures::from_observation(const FrameObservation& obs) {
    QueryFeatures q;
    q.keypoints.reserve(obs.keypoints.size());
    for (const auto& kp : obs.keypoints) {
        q.keypoints.emplace_back(static_cast<float>(kp.u), static_cast<float>(kp.v));
    }
    q.descriptors = obs.local_descriptors;
    q.global_descriptor = obs.global_descriptor;
    return q;
}

RetrievalResult retrieve_references(const MapIndex& index, const Eigen::VectorXf& query_global,
                                    const std::optional<Pose>& prior,
                                    const RetrievalParams& params) {
    if (index.entries.empty()) throw Error(ErrorCode::EmptyMap, "empty map index");
    if (query_global.size() != static_cast<int>(index.global_dim)) {
        throw Error(ErrorCode::InvalidArgument, "global descriptor dimension mismatch");
    }

    struct Scored {
        float score;
        int idx;
    };
    std::vector<Scored> ranked;
    ranked.reserve(index.entries.size());
    for (size_t i = 0; i < index.entries.size(); ++i) {
        ranked.push_back({index.entries[i].global_descriptor.dot(query_global),
                          static_cast<int>(i)});
    }
    std::sort(ranked.begin(), ranked.end(), [](const Scored& a, const Scored& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.idx < b.idx;
    });

    const size_t overfetch = std::min<size_t>(
        ranked.size(), static_cast<size_t>(params.overfetch_factor) * params.k);
    ranked.resize(overfetch);

    std::vector<char> keep(overfetch, 1);
    if (prior) {
        size_t kept = 0;
        for (size_t i = 0; i < overfetch; ++i) {
            const bool near =
                (index.entries[ranked[i].idx].pose.t - prior->t).norm() < params.prior_radius;
            keep[i] = near ? 1 : 0;
            kept += keep[i];
        }
        if (kept < static_cast<size_t>(params.k)) {
            for (size_t i = 0; i < overfetch && kept < static_cast<size_t>(params.k); ++i) {
                if (!keep[i]) {
                    keep[i] = 1;
                    ++kept;
                }
            }
        }
    }

    RetrievalResult out;
    std::vector<const Eigen::Vector3d*> positions;
    auto nms_scan = [&](bool flagged_only) {
        for (size_t i = 0; i < overfetch; ++i) {
            if (out.image_ids.size() == static_cast<size_t>(params.k)) return;
            if (keep[i] != (flagged_only ? 1 : 0)) continue;
            const auto& entry = index.entries[ranked[i].idx];
            bool suppressed = false;
            for (const auto* p : positions) {
                if ((entry.pose.t - *p).norm() < params.nms_radius) {
                    suppressed = true;
                    break;
                }
            }
            if (suppressed) continue;
            positions.push_back(&entry.pose.t);
            out.image_ids.push_back(entry.image_id);
        }
    };
    nms_scan(true);
    // NMS may have suppressed below k: keep scanning the rest of the
    // overfetched pool in score order
    nms_scan(false);
    out.shortfall = out.image_ids.size() < static_cast<size_t>(params.k);
    return out;
}

std::vector<Match2D3D> knn_match(const QueryFeatures& query,
                                 const std::vector<MapLandmark>& landmarks, float ratio) {
    if (ratio <= 0.0f || ratio > 1.0f) {
        throw Error(ErrorCode::InvalidArgument, "ratio must be in (0, 1]");
    }
    std::vector<Match2D3D> matches;
    if (landmarks.empty()) return matches;
    const int k_count = static_cast<int>(query.keypoints.size());
    for (int k = 0; k < k_count; ++k) {
        float best1 = std::numeric_limits<float>::infinity();
        float best2 = std::numeric_limits<float>::infinity();
        int best_idx = -1;
        for (size_t j = 0; j < landmarks.size(); ++j) {
            const float d2 =
                (query.descriptors.row(k).transpose() - landmarks[j].descriptor).squaredNorm();
            if (d2 < best1) {
                best2 = best1;
                best1 = d2;
                best_idx = static_cast<int>(j);
            } else if (d2 < best2) {
                best2 = d2;
            }
        }
        if (best_idx < 0) continue;
        // ratio test on L2 distances; missing second neighbor passes
        if (std::isfinite(best2) && best1 >= ratio * ratio * best2) continue;
        const auto& lm = landmarks[best_idx];
        Match2D3D m;
        m.query_kp_index = k;
        m.landmark_id = lm.id;
        m.p3d = lm.p3d;
        m.pixel = query.keypoints[k].cast<double>();
        m.descriptor_distance = std::sqrt(best1);
        matches.push_back(m);
    }
    return matches;
}

PnpResult pnp_ransac(const std::vector<Match2D3D>& matches, const CameraModel& cam,
                     const PnpParams& params, uint64_t seed) {
    constexpr int kMinimal = 6;
    if (matches.size() < kMinimal) {
        throw Error(ErrorCode::TooFewMatches, "pnp needs >= 6 matches");
    }
    Rng rng(mix_seed(seed, 0x706e7000ULL));
    const int n = static_cast<int>(matches.size());
    std::vector<int> indices(n);
    for (int i = 0; i < n; ++i) indices[i] = i;

    int best_count = 0;
    double best_err = std::numeric_limits<double>::infinity();
    std::optional<Pose> best_pose;
    for (int it = 0; it < params.iterations; ++it) {
        // partial Fisher-Yates for 6 distinct indices
        for (int j = 0; j < kMinimal; ++j) {
            const int pick = j + static_cast<int>(rng.uniform_index(n - j));
            std::swap(indices[j], indices[pick]);
        }
        const std::vector<int> sample(indices.begin(), indices.begin() + kMinimal);
        const auto hyp = pnp_dlt(matches, sample, cam);
        if (!hyp) continue;
        int count = 0;
        double err_sum = 0.0;
        for (const auto& m : matches) {
            const double e = reproj_error(m, *hyp, cam);
            if (e < params.reproj_threshold_px) {
                ++count;
                err_sum += e * e;
            }
        }
        if (count > best_count || (count == best_count && err_sum < best_err)) {
            best_count = count;
            best_err = err_sum;
            best_pose = hyp;
        }
    }
    if (!best_pose || best_count < kMinimal) {
        throw Error(ErrorCode::NoConsensus, "best model has fewer than 6 inliers");
    }

    std::vector<Match2D3D> inlier_matches;
    for (const auto& m : matches) {
        if (reproj_error(m, *best_pose, cam) < params.reproj_threshold_px) {
            inlier_matches.push_back(m);
        }
    }
    const Pose refined = optimize_pose_reproj(*best_pose, inlier_matches, cam, 0.0, 15);

    PnpResult result;
    result.pose = refined;
    for (int i = 0; i < n; ++i) {
        if (reproj_error(matches[i], refined, cam) < params.reproj_threshold_px) {
            result.inlier_indices.push_back(i);
        }
    }
    if (result.inlier_indices.size() < kMinimal) {
        throw Error(ErrorCode::NoConsensus, "refined model lost consensus");
    }
    return result;
}

std::vector<int> dbscan_labels(const std::vector<Pose>& poses, double eps, int min_pts,
                               double lambda) {
    const int n = static_cast<int>(poses.size());
    std::vector<int> labels(n, -1);
    std::vector<char> visited(n, 0);

    auto neighbors = [&](int i) {
        std::vector<int> out;
        for (int j = 0; j < n; ++j) {
            if (pose_distance(poses[i], poses[j], lambda) <= eps) out.push_back(j);
        }
        return out;
    };

    int cluster = 0;
    for (int i = 0; i < n; ++i) {
        if (visited[i]) continue;
        visited[i] = 1;
        auto nb = neighbors(i);
        if (static_cast<int>(nb.size()) < min_pts) continue;
        labels[i] = cluster;
        std::vector<int> seeds(nb.begin(), nb.end());
        for (size_t s = 0; s < seeds.size(); ++s) {
            const int j = seeds[s];
            if (!visited[j]) {
                visited[j] = 1;
                auto nbj = neighbors(j);
                if (static_cast<int>(nbj.size()) >= min_pts) {
                    seeds.insert(seeds.end(), nbj.begin(), nbj.end());
                }
            }
            if (labels[j] < 0) labels[j] = cluster;
        }
        ++cluster;
    }
    return labels;
}

std::vector<int> dbscan_poses(const std::vector<Pose>& poses, double eps, int min_pts,
                              double lambda) {
    if (poses.empty()) throw Error(ErrorCode::InvalidArgument, "dbscan needs >= 1 pose");
    const auto labels = dbscan_labels(poses, eps, min_pts, lambda);
    const int n_clusters = 1 + *std::max_element(labels.begin(), labels.end());
    if (n_clusters <= 0) return {};
    std::vector<int> sizes(n_clusters, 0);
    for (int l : labels) {
        if (l >= 0) ++sizes[l];
    }
    const int best =
        static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    std::vector<int> members;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == best) members.push_back(static_cast<int>(i));
    }
    return members;
}

std::vector<Match2D3D> dedup_matches(const std::vector<Match2D3D>& matches) {
    std::unordered_map<uint64_t, size_t> best;
    std::vector<Match2D3D> out;
    for (const auto& m : matches) {
        auto it = best.find(m.landmark_id);
        if (it == best.end()) {
            best.emplace(m.landmark_id, out.size());
            out.push_back(m);
        } else if (m.descriptor_distance < out[it->second].descriptor_distance) {
            out[it->second] = m;
        }
    }
    return out;
}

Pose refine_pose(const Pose& coarse, const std::vector<Match2D3D>& matches,
                 const CameraModel& cam, double huber_px, int max_iterations) {
    const auto unique = dedup_matches(matches);
    if (unique.size() < 6) {
        throw Error(ErrorCode::TooFewMatches, "refine needs >= 6 unique landmarks");
    }
    return optimize_pose_reproj(coarse, unique, cam, huber_px, max_iterations);
}

std::vector<MapLandmark> observation_constraint_landmarks(const MapIndex& index,
                                                          const ShardAccess& shards,
                                                          const Pose& coarse,
                                                          const ConstraintParams& params) {
    const Eigen::Vector3d coarse_axis = coarse.q * Eigen::Vector3d::UnitZ();
    std::vector<MapLandmark> out;
    std::unordered_set<uint64_t> seen;
    for (const auto& entry : index.entries) {
        if ((entry.pose.t - coarse.t).norm() >= params.camera_radius) continue;
        const Eigen::Vector3d axis = entry.pose.q * Eigen::Vector3d::UnitZ();
        const double cos_angle = std::clamp(axis.dot(coarse_axis), -1.0, 1.0);
        if (std::acos(cos_angle) >= params.camera_normal_max_angle) continue;

        const auto shard = shards(entry.image_id);
        for (const auto& lm : shard->landmarks) {
            if (!seen.insert(lm.id).second) continue;
            if (cone_admits(lm.cone, lm.p3d, coarse.t, params.delta_L, params.delta_theta)) {
                out.push_back(lm);
            }
        }
    }
    return out;
}

LocalizeResult localize(const MapIndex& index, const CameraModel& cam,
                        const ShardAccess& shards, const QueryFeatures& query,
                        const std::optional<Pose>& prior, const LocalizeParams& params,
                        uint64_t seed) {
    if (query.global_descriptor.size() != static_cast<int>(index.global_dim) ||
        query.descriptors.rows() != static_cast<int>(query.keypoints.size())) {
        return LocalizeResult::failed(LocalizeStage::bad_request, "feature shape mismatch");
    }

    RetrievalResult refs;
    try {
        refs = retrieve_references(index, query.global_descriptor, prior, params.retrieval);
    } catch (const Error& e) {
        return LocalizeResult::failed(LocalizeStage::retrieval, e.what());
    }
    if (refs.image_ids.empty()) {
        return LocalizeResult::failed(LocalizeStage::retrieval, "no reference images");
    }

    struct Candidate {
        std::vector<Match2D3D> matches;
        std::optional<PnpResult> pnp;
    };
    const int n_refs = static_cast<int>(refs.image_ids.size());
    std::vector<Candidate> candidates(n_refs);
    parallel_for_n(n_refs, params.workers, [&](int i) {
        auto& cand = candidates[i];
        const auto shard = shards(refs.image_ids[i]);
        cand.matches = knn_match(query, shard->landmarks, params.ratio);
        if (cand.matches.size() >= 6) {
            try {
                cand.pnp = pnp_ransac(cand.matches, cam, params.pnp,
                                      mix_seed(seed, static_cast<uint64_t>(i)));
            } catch (const Error&) {
                cand.pnp.reset();
            }
        }
    });

    std::vector<Pose> cand_poses;
    std::vector<int> cand_index;  // candidate slot per pose
    bool any_enough_matches = false;
    for (int i = 0; i < n_refs; ++i) {
        if (candidates[i].matches.size() >= 6) any_enough_matches = true;
        if (candidates[i].pnp) {
            cand_poses.push_back(candidates[i].pnp->pose);
            cand_index.push_back(i);
        }
    }
    if (cand_poses.empty()) {
        return any_enough_matches
                   ? LocalizeResult::failed(LocalizeStage::pnp, "no PnP consensus")
                   : LocalizeResult::failed(LocalizeStage::match_first, "too few matches");
    }

    const auto labels =
        dbscan_labels(cand_poses, params.dbscan_eps, params.dbscan_min_pts, params.pose_lambda);
    const int n_clusters = 1 + *std::max_element(labels.begin(), labels.end());
    if (n_clusters <= 0) {
        return LocalizeResult::failed(LocalizeStage::cluster, "all candidate poses are noise");
    }
    // largest cluster; ties by summed inlier count, then lower cluster id
    std::vector<int> sizes(n_clusters, 0), inlier_sums(n_clusters, 0);
    for (size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] < 0) continue;
        ++sizes[labels[p]];
        inlier_sums[labels[p]] +=
            static_cast<int>(candidates[cand_index[p]].pnp->inlier_indices.size());
    }
    int best_cluster = 0;
    for (int cl = 1; cl < n_clusters; ++cl) {
        if (sizes[cl] > sizes[best_cluster] ||
            (sizes[cl] == sizes[best_cluster] && inlier_sums[cl] > inlier_sums[best_cluster])) {
            best_cluster = cl;
        }
    }

    std::vector<Match2D3D> pooled;
    int init_member = -1;
    size_t init_inliers = 0;
    for (size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] != best_cluster) continue;
        const int ci = cand_index[p];
        const auto& cand = candidates[ci];
        pooled.insert(pooled.end(), cand.matches.begin(), cand.matches.end());
        if (cand.pnp->inlier_indices.size() > init_inliers) {
            init_inliers = cand.pnp->inlier_indices.size();
            init_member = ci;
        }
    }
    const auto pooled_unique = dedup_matches(pooled);
    if (pooled_unique.size() < 6) {
        return LocalizeResult::failed(LocalizeStage::refine_first, "pooled matches below 6");
    }

    const Pose coarse = optimize_pose_reproj(candidates[init_member].pnp->pose, pooled_unique,
                                             cam, params.huber_px, 15);
    const int first_pass_inliers =
        count_inliers(pooled_unique, coarse, cam, params.pnp.reproj_threshold_px);

    const auto constrained =
        observation_constraint_landmarks(index, shards, coarse, params.constraint);
    if (constrained.empty()) {
        return LocalizeResult::failed(LocalizeStage::constraint, "no landmarks pass the cones");
    }

    const auto second = knn_match(query, constrained, params.ratio);
    const auto second_unique = dedup_matches(second);
    if (second_unique.size() < 6) {
        return LocalizeResult::failed(LocalizeStage::match_second,
                                      "second-pass matches below 6");
    }

    const Pose final_pose = optimize_pose_reproj(coarse, second_unique, cam, params.huber_px, 15);
    const int inliers =
        count_inliers(second_unique, final_pose, cam, params.pnp.reproj_threshold_px);
    if (inliers < 6) {
        return LocalizeResult::failed(LocalizeStage::refine_second, "final inliers below 6");
    }

    LocalizeResult result;
    result.ok = true;
    result.pose = final_pose;
    result.inlier_count = inliers;
    result.first_pass_inliers = first_pass_inliers;
    return result;
}

}  // namespace geofuse
