#pragma once

#include <stdexcept>
#include <string>

namespace vql {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dimension/shape mismatch between operands.
struct shape_error : error {
    using error::error;
};

// Invalid argument value (non-finite input, bad bound, empty codebook, ...).
struct param_error : error {
    using error::error;
};

// Inconsistent configuration (group count not dividing dim, missing
// timestamps for a temporal build, ...).
struct config_error : error {
    using error::error;
};

// Structurally corrupt data (assignment index out of range, broken CSC).
struct corruption_error : error {
    using error::error;
};

// Attention over a zero-length event sequence.
struct empty_sequence_error : error {
    using error::error;
};

// Cache with no event mass (all-zero ones cache).
struct degenerate_cache_error : error {
    using error::error;
};

// Query time earlier than cached history.
struct causality_error : error {
    using error::error;
};

// Non-finite training loss; message carries the state dump.
struct divergence_error : error {
    using error::error;
};

enum class io_code {
    bad_magic = 1,
    bad_version = 2,
    bad_record_type = 3,
    checksum_mismatch = 4,
    truncated = 5,
    malformed = 6,
};

inline const char* io_code_name(io_code c) {
    switch (c) {
        case io_code::bad_magic: return "bad_magic";
        case io_code::bad_version: return "bad_version";
        case io_code::bad_record_type: return "bad_record_type";
        case io_code::checksum_mismatch: return "checksum_mismatch";
        case io_code::truncated: return "truncated";
        case io_code::malformed: return "malformed";
    }
    return "unknown";
}

struct io_error : error {
    io_code code;
    io_error(io_code c, const std::string& msg)
        : error(std::string(io_code_name(c)) + ": " + msg), code(c) {}
};

}  // namespace vql
