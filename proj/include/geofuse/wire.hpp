#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <vector>

#include "geofuse/geometry.hpp"
#include "geofuse/localizer.hpp"

namespace geofuse {

// TCP framing, little-endian:
//   magic "GFW1" (4 bytes), msg_type u8 (1=request, 2=response),
//   payload_len u32, payload. Payloads over 16 MiB are a protocol error.
constexpr uint8_t kWireMagic[4] = {'G', 'F', 'W', '1'};
constexpr size_t kFrameHeaderSize = 9;
constexpr uint32_t kMaxPayload = 16u * 1024u * 1024u;

enum class MsgType : uint8_t { request = 1, response = 2 };

struct WireRequest {
    uint64_t request_id = 0;
    double timestamp = 0.0;
    std::optional<Pose> prior;
    std::vector<Eigen::Vector2f> keypoints;
    Eigen::MatrixXf descriptors;  // K x D
    Eigen::VectorXf global_descriptor;
};

enum class ResponseStatus : uint8_t { ok = 0, failed = 1 };

struct WireResponse {
    uint64_t request_id = 0;
    ResponseStatus status = ResponseStatus::failed;
    LocalizeStage failure_stage = LocalizeStage::none;
    uint32_t inlier_count = 0;
    Pose pose;
};

// full frames (header + payload)
std::vector<uint8_t> encode_request_frame(const WireRequest& req);
std::vector<uint8_t> encode_response_frame(const WireResponse& resp);

struct FrameHeader {
    MsgType type;
    uint32_t payload_len;
};

// Throws FormatError on bad magic/type/oversize.
FrameHeader decode_frame_header(const uint8_t* data);

// Payload decoders; descriptor/global dims come from the service's map.
WireRequest decode_request_payload(const uint8_t* data, size_t size, int descriptor_dim,
                                   int global_dim);
WireResponse decode_response_payload(const uint8_t* data, size_t size);

}  // namespace geofuse
