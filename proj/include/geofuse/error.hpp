#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace geofuse {

enum class ErrorCode {
    DegenerateConfiguration,
    DegenerateDirection,
    NoAssociations,
    InsufficientParallax,
    BehindCamera,
    EmptyMap,
    FormatError,
    TooFewMatches,
    NoConsensus,
    MissingVls,
    TooFewSamples,
    TooFewKeyframes,
    NotInitialized,
    EmptyWindow,
    IoError,
    InvalidArgument,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& msg)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + msg), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

// Parse/decode failure carrying the byte offset where it was detected.
class FormatError : public Error {
public:
    FormatError(const std::string& msg, uint64_t byte_offset)
        : Error(ErrorCode::FormatError, msg + " (at byte " + std::to_string(byte_offset) + ")"),
          byte_offset_(byte_offset) {}

    uint64_t byte_offset() const { return byte_offset_; }

private:
    uint64_t byte_offset_;
};

}  // namespace geofuse
