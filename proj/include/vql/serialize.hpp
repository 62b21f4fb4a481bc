#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "vql/cache.hpp"
#include "vql/codebook.hpp"
#include "vql/error.hpp"

namespace vql {

enum class record_kind : std::uint32_t {
    heavy_bundle = 1,
    csc = 2,
    light = 3,
    model = 4,
};

namespace io {

inline constexpr char kMagic[4] = {'V', 'Q', 'L', 'C'};
inline constexpr std::uint32_t kFormatVersion = 1;

inline std::uint64_t fnv1a64(std::span<const std::byte> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::byte b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct ByteWriter {
    std::vector<std::byte> buf;

    void put_u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(std::byte((v >> (8 * i)) & 0xff));
    }
    void put_u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(std::byte((v >> (8 * i)) & 0xff));
    }
    void put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }
    void put_f64_span(std::span<const double> v) {
        for (double x : v) put_f64(x);
    }
};

struct ByteReader {
    std::span<const std::byte> buf;
    std::size_t pos = 0;

    bool at_end() const { return pos == buf.size(); }

    void need(std::size_t n) {
        if (pos + n > buf.size()) throw io_error(io_code::truncated, "unexpected end of file");
    }
    std::uint32_t get_u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t get_u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double get_f64() { return std::bit_cast<double>(get_u64()); }
};

/// Every record starts with this fixed header: type tag, owner ids, dims
/// (N, d_g, L, M) and the checksum of the codebook the record was built
/// against. Payload length is fully determined by the header.
struct RecordHeader {
    record_kind kind;
    std::uint64_t user_id = 0;
    std::uint64_t group_id = 0;
    std::uint64_t n = 0;
    std::uint64_t dg = 0;
    std::uint64_t l = 0;
    std::uint64_t m = 0;
    std::uint64_t codebook_checksum = 0;
};

inline void write_record_header(ByteWriter& w, const RecordHeader& h) {
    w.put_u32(static_cast<std::uint32_t>(h.kind));
    w.put_u64(h.user_id);
    w.put_u64(h.group_id);
    w.put_u64(h.n);
    w.put_u64(h.dg);
    w.put_u64(h.l);
    w.put_u64(h.m);
    w.put_u64(h.codebook_checksum);
}

inline RecordHeader read_record_header(ByteReader& r) {
    RecordHeader h;
    const std::uint32_t kind = r.get_u32();
    if (kind < 1 || kind > 4) throw io_error(io_code::bad_record_type, "unknown record type tag");
    h.kind = static_cast<record_kind>(kind);
    h.user_id = r.get_u64();
    h.group_id = r.get_u64();
    h.n = r.get_u64();
    h.dg = r.get_u64();
    h.l = r.get_u64();
    h.m = r.get_u64();
    h.codebook_checksum = r.get_u64();
    return h;
}

inline void write_file_header(ByteWriter& w) {
    for (char c : kMagic) w.buf.push_back(std::byte(c));
    w.put_u32(kFormatVersion);
}

inline void read_file_header(ByteReader& r) {
    r.need(4);
    for (int i = 0; i < 4; ++i) {
        if (static_cast<char>(r.buf[r.pos + i]) != kMagic[i]) {
            throw io_error(io_code::bad_magic, "not a vql cache file");
        }
    }
    r.pos += 4;
    const std::uint32_t v = r.get_u32();
    if (v != kFormatVersion) {
        throw io_error(io_code::bad_version, "unsupported format version " + std::to_string(v));
    }
}

inline void write_file(const std::string& path, std::span<const std::byte> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error(io_code::malformed, "cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error(io_code::malformed, "short write: " + path);
}

inline std::vector<std::byte> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error(io_code::malformed, "cannot open for reading: " + path);
    std::vector<std::byte> bytes;
    f.seekg(0, std::ios::end);
    bytes.resize(static_cast<std::size_t>(f.tellg()));
    f.seekg(0);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error(io_code::truncated, "short read: " + path);
    return bytes;
}

}  // namespace io

inline std::uint64_t codebook_checksum(const Codebook& cb) {
    io::ByteWriter w;
    w.put_u64(cb.size());
    w.put_u64(cb.dim());
    w.put_f64_span({cb.codewords().data(), cb.codewords().size()});
    return io::fnv1a64(w.buf);
}

/// One deserialized record of a cache file.
struct CacheRecord {
    record_kind kind = record_kind::heavy_bundle;
    std::uint64_t user_id = 0;
    std::uint64_t group_id = 0;
    std::uint64_t stored_checksum = 0;
    CacheBundle bundle;   // kind == heavy_bundle
    AssignmentCsc csc;    // kind == csc
    LightCache light;     // kind == light
};

namespace io {

inline void append_record(ByteWriter& w, const CacheBundle& b, std::uint64_t user_id) {
    RecordHeader h;
    h.kind = record_kind::heavy_bundle;
    h.user_id = user_id;
    h.group_id = b.group_id;
    h.n = b.v_cache.rows();
    h.dg = b.v_cache.cols();
    h.l = b.event_count;
    h.m = b.lambdas.size();
    h.codebook_checksum = b.codebook_checksum;
    write_record_header(w, h);
    w.put_f64_span(b.lambdas);
    w.put_f64_span({b.v_cache.data(), b.v_cache.size()});
    w.put_f64_span({b.ones_cache.data(), b.ones_cache.size()});
    for (const ScaleCache& sc : b.scales) {
        w.put_f64_span({sc.v_cache.data(), sc.v_cache.size()});
        w.put_f64_span({sc.ones_cache.data(), sc.ones_cache.size()});
    }
}

inline void append_record(ByteWriter& w, const AssignmentCsc& csc, std::uint64_t user_id,
                          std::uint64_t group_id, std::uint64_t checksum) {
    RecordHeader h;
    h.kind = record_kind::csc;
    h.user_id = user_id;
    h.group_id = group_id;
    h.n = csc.num_codes;
    h.l = csc.num_events;
    h.codebook_checksum = checksum;
    write_record_header(w, h);
    for (std::uint64_t v : csc.col_ptr) w.put_u64(v);
    for (std::uint64_t v : csc.row_idx) w.put_u64(v);
}

inline void append_record(ByteWriter& w, const LightCache& lc, std::uint64_t group_id,
                          std::uint64_t checksum) {
    RecordHeader h;
    h.kind = record_kind::light;
    h.group_id = group_id;
    h.l = lc.item_to_code.size();
    h.codebook_checksum = checksum;
    write_record_header(w, h);
    for (const auto& [item, code] : lc.item_to_code) {
        w.put_u64(item);
        w.put_u64(code);
    }
}

inline Matrix read_matrix(ByteReader& r, std::size_t rows, std::size_t cols) {
    std::vector<double> data(rows * cols);
    for (double& v : data) v = r.get_f64();
    return Matrix(rows, cols, std::move(data));
}

inline CacheRecord read_record(ByteReader& r) {
    const RecordHeader h = read_record_header(r);
    CacheRecord rec;
    rec.kind = h.kind;
    rec.user_id = h.user_id;
    rec.group_id = h.group_id;
    rec.stored_checksum = h.codebook_checksum;
    switch (h.kind) {
        case record_kind::heavy_bundle: {
            CacheBundle& b = rec.bundle;
            b.group_id = static_cast<std::uint32_t>(h.group_id);
            b.event_count = h.l;
            b.codebook_checksum = h.codebook_checksum;
            b.lambdas.resize(h.m);
            for (double& l : b.lambdas) l = r.get_f64();
            b.v_cache = read_matrix(r, h.n, h.dg);
            b.ones_cache = read_matrix(r, h.n, 1);
            b.scales.resize(h.m);
            for (ScaleCache& sc : b.scales) {
                sc.v_cache = read_matrix(r, h.n, h.dg);
                sc.ones_cache = read_matrix(r, h.n, 1);
            }
            break;
        }
        case record_kind::csc: {
            AssignmentCsc& csc = rec.csc;
            csc.num_codes = h.n;
            csc.num_events = h.l;
            csc.col_ptr.resize(h.n + 1);
            for (std::uint64_t& v : csc.col_ptr) v = r.get_u64();
            csc.row_idx.resize(h.l);
            for (std::uint64_t& v : csc.row_idx) v = r.get_u64();
            csc.validate();
            break;
        }
        case record_kind::light: {
            for (std::uint64_t i = 0; i < h.l; ++i) {
                const std::uint64_t item = r.get_u64();
                const std::uint64_t code = r.get_u64();
                rec.light.item_to_code[item] = static_cast<std::uint32_t>(code);
            }
            break;
        }
        case record_kind::model:
            throw io_error(io_code::bad_record_type, "model record in cache file");
    }
    return rec;
}

}  // namespace io

inline void serialize_cache(const CacheBundle& bundle, const std::string& path,
                            std::uint64_t user_id = 0) {
    io::ByteWriter w;
    io::write_file_header(w);
    io::append_record(w, bundle, user_id);
    io::write_file(path, w.buf);
}

inline void serialize_cache(const AssignmentCsc& csc, const std::string& path,
                            std::uint64_t user_id = 0, std::uint64_t group_id = 0,
                            std::uint64_t checksum = 0) {
    io::ByteWriter w;
    io::write_file_header(w);
    io::append_record(w, csc, user_id, group_id, checksum);
    io::write_file(path, w.buf);
}

inline void serialize_cache(const LightCache& light, const std::string& path,
                            std::uint64_t group_id = 0, std::uint64_t checksum = 0) {
    io::ByteWriter w;
    io::write_file_header(w);
    io::append_record(w, light, group_id, checksum);
    io::write_file(path, w.buf);
}

/// Reads every record; when `expected` is given, any record whose stored
/// checksum differs from the codebook's is rejected as stale.
inline std::vector<CacheRecord> read_cache_records(const std::string& path,
                                                   const Codebook* expected = nullptr) {
    const std::vector<std::byte> bytes = io::read_file(path);
    io::ByteReader r{bytes};
    io::read_file_header(r);
    std::vector<CacheRecord> out;
    const std::uint64_t want = expected ? codebook_checksum(*expected) : 0;
    while (!r.at_end()) {
        CacheRecord rec = io::read_record(r);
        if (expected && rec.stored_checksum != want) {
            throw io_error(io_code::checksum_mismatch,
                           "cache was built against a different codebook");
        }
        out.push_back(std::move(rec));
    }
    if (out.empty()) throw io_error(io_code::truncated, "file holds no records");
    return out;
}

inline CacheRecord deserialize_cache(const std::string& path, const Codebook* expected = nullptr) {
    return read_cache_records(path, expected).front();
}

}  // namespace vql
