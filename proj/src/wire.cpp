#include "geofuse/wire.hpp"

#include <cmath>
#include <cstring>

#include "geofuse/binio.hpp"

namespace geofuse {

namespace {

void put_pose(ByteWriter& w, const Pose& p) {
    w.f64(p.t.x());
    w.f64(p.t.y());
    w.f64(p.t.z());
    w.f64(p.q.w());
    w.f64(p.q.x());
    w.f64(p.q.y());
    w.f64(p.q.z());
}

Pose get_pose(ByteReader& r) {
    // validated but not re-normalized: encode/decode must be the identity
    Pose p;
    p.t.x() = r.f64();
    p.t.y() = r.f64();
    p.t.z() = r.f64();
    const double qw = r.f64(), qx = r.f64(), qy = r.f64(), qz = r.f64();
    p.q = Eigen::Quaterniond(qw, qx, qy, qz);
    if (!p.t.allFinite() || !p.q.coeffs().allFinite() ||
        std::abs(p.q.norm() - 1.0) > 1e-6) {
        r.fail("pose quaternion is not unit");
    }
    return p;
}

std::vector<uint8_t> frame_with_header(MsgType type, ByteWriter&& payload) {
    ByteWriter w;
    w.bytes(kWireMagic, 4);
    w.u8(static_cast<uint8_t>(type));
    w.u32(static_cast<uint32_t>(payload.size()));
    const auto body = payload.take();
    w.bytes(body.data(), body.size());
    return w.take();
}

}  // namespace

std::vector<uint8_t> encode_request_frame(const WireRequest& req) {
    ByteWriter w;
    w.u64(req.request_id);
    w.f64(req.timestamp);
    w.u8(req.prior ? 1 : 0);
    if (req.prior) put_pose(w, *req.prior);
    const uint32_t k = static_cast<uint32_t>(req.keypoints.size());
    w.u32(k);
    for (const auto& kp : req.keypoints) {
        w.f32(kp.x());
        w.f32(kp.y());
    }
    for (uint32_t i = 0; i < k; ++i) {
        for (int d = 0; d < req.descriptors.cols(); ++d) w.f32(req.descriptors(i, d));
    }
    for (int g = 0; g < req.global_descriptor.size(); ++g) w.f32(req.global_descriptor[g]);
    return frame_with_header(MsgType::request, std::move(w));
}

std::vector<uint8_t> encode_response_frame(const WireResponse& resp) {
    ByteWriter w;
    w.u64(resp.request_id);
    w.u8(static_cast<uint8_t>(resp.status));
    w.u8(static_cast<uint8_t>(resp.failure_stage));
    w.u32(resp.inlier_count);
    put_pose(w, resp.pose);
    return frame_with_header(MsgType::response, std::move(w));
}

FrameHeader decode_frame_header(const uint8_t* data) {
    if (std::memcmp(data, kWireMagic, 4) != 0) throw FormatError("bad frame magic", 0);
    const uint8_t type = data[4];
    if (type != static_cast<uint8_t>(MsgType::request) &&
        type != static_cast<uint8_t>(MsgType::response)) {
        throw FormatError("unknown message type " + std::to_string(type), 4);
    }
    uint32_t len;
    std::memcpy(&len, data + 5, 4);
    if (len > kMaxPayload) throw FormatError("payload exceeds 16 MiB", 5);
    return {static_cast<MsgType>(type), len};
}

WireRequest decode_request_payload(const uint8_t* data, size_t size, int descriptor_dim,
                                   int global_dim) {
    ByteReader r(data, size, kFrameHeaderSize);
    WireRequest req;
    req.request_id = r.u64();
    req.timestamp = r.f64();
    const uint8_t has_prior = r.u8();
    if (has_prior > 1) r.fail("has_prior must be 0 or 1");
    if (has_prior) req.prior = get_pose(r);
    const uint32_t k = r.u32();

    // fixed-size remainder: K*(2 + D) + G floats
    const uint64_t expect =
        4ull * (static_cast<uint64_t>(k) * (2 + descriptor_dim) + global_dim);
    if (r.remaining() != expect) r.fail("request payload size mismatch");

    req.keypoints.reserve(k);
    for (uint32_t i = 0; i < k; ++i) {
        const float u = r.f32();
        const float v = r.f32();
        req.keypoints.emplace_back(u, v);
    }
    req.descriptors.resize(k, descriptor_dim);
    for (uint32_t i = 0; i < k; ++i) {
        for (int d = 0; d < descriptor_dim; ++d) req.descriptors(i, d) = r.f32();
    }
    req.global_descriptor.resize(global_dim);
    for (int g = 0; g < global_dim; ++g) req.global_descriptor[g] = r.f32();
    if (!req.descriptors.allFinite() || !req.global_descriptor.allFinite()) {
        r.fail("non-finite descriptor data");
    }
    return req;
}

WireResponse decode_response_payload(const uint8_t* data, size_t size) {
    ByteReader r(data, size, kFrameHeaderSize);
    WireResponse resp;
    resp.request_id = r.u64();
    const uint8_t status = r.u8();
    if (status > 1) r.fail("bad status byte");
    resp.status = static_cast<ResponseStatus>(status);
    const uint8_t stage = r.u8();
    if (stage > static_cast<uint8_t>(LocalizeStage::refine_second)) r.fail("bad failure stage");
    resp.failure_stage = static_cast<LocalizeStage>(stage);
    resp.inlier_count = r.u32();
    resp.pose = get_pose(r);
    if (r.remaining() != 0) r.fail("trailing bytes after response payload");
    return resp;
}

}  // namespace geofuse
