#pragma once

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vql/dataset.hpp"
#include "vql/error.hpp"
#include "vql/serialize.hpp"

// Event-log formats: newline-delimited text files for inspectability plus a
// binary events variant for large histories. A dataset directory holds
// meta.json, items.tsv, samples.tsv and events.tsv or events.bin.
namespace vql {

namespace io {

inline constexpr char kEventsMagic[4] = {'V', 'Q', 'L', 'D'};

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& tok, const char* what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw io_error(io_code::malformed, std::string("bad ") + what + " field: " + tok);
    }
}

inline std::uint64_t parse_u64(const std::string& tok, const char* what) {
    try {
        std::size_t used = 0;
        const std::uint64_t v = std::stoull(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw io_error(io_code::malformed, std::string("bad ") + what + " field: " + tok);
    }
}

inline std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

}  // namespace io

inline void write_events_text(const SyntheticDataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error(io_code::malformed, "cannot open " + path);
    f << "# vql-events v1\n";
    f << "# n_users=" << ds.sequences.size() << " d_in=" << ds.feat_dim << "\n";
    f << "# fields: user_id item_id timestamp key[d_in] value[d_in]\n";
    for (std::size_t u = 0; u < ds.sequences.size(); ++u) {
        const EventSequence& seq = ds.sequences[u];
        for (std::size_t i = 0; i < seq.length(); ++i) {
            f << u << ' ' << seq.item_ids[i] << ' ' << seq.timestamps[i];
            for (double v : seq.key_feats.row(i)) f << ' ' << io::fmt_double(v);
            for (double v : seq.value_feats.row(i)) f << ' ' << io::fmt_double(v);
            f << '\n';
        }
    }
}

inline void write_events_binary(const SyntheticDataset& ds, const std::string& path) {
    io::ByteWriter w;
    for (char c : io::kEventsMagic) w.buf.push_back(std::byte(c));
    w.put_u32(io::kFormatVersion);
    w.put_u64(ds.sequences.size());
    w.put_u64(ds.feat_dim);
    for (const EventSequence& seq : ds.sequences) {
        w.put_u64(seq.length());
        for (std::uint64_t id : seq.item_ids) w.put_u64(id);
        for (std::int64_t t : seq.timestamps) w.put_u64(static_cast<std::uint64_t>(t));
        w.put_f64_span({seq.key_feats.data(), seq.key_feats.size()});
        w.put_f64_span({seq.value_feats.data(), seq.value_feats.size()});
    }
    io::write_file(path, w.buf);
}

inline std::vector<EventSequence> load_events_binary(const std::string& path, std::size_t* d_in) {
    const auto bytes = io::read_file(path);
    io::ByteReader r{bytes};
    r.need(4);
    for (int i = 0; i < 4; ++i) {
        if (static_cast<char>(r.buf[i]) != io::kEventsMagic[i]) {
            throw io_error(io_code::bad_magic, "not a vql event log: " + path);
        }
    }
    r.pos = 4;
    const std::uint32_t ver = r.get_u32();
    if (ver != io::kFormatVersion) throw io_error(io_code::bad_version, "event log version");
    const std::uint64_t n_users = r.get_u64();
    const std::uint64_t dim = r.get_u64();
    if (d_in) *d_in = dim;
    std::vector<EventSequence> out(n_users);
    for (EventSequence& seq : out) {
        const std::uint64_t l = r.get_u64();
        seq.item_ids.resize(l);
        for (auto& id : seq.item_ids) id = r.get_u64();
        seq.timestamps.resize(l);
        for (auto& t : seq.timestamps) t = static_cast<std::int64_t>(r.get_u64());
        seq.key_feats = io::read_matrix(r, l, dim);
        seq.value_feats = io::read_matrix(r, l, dim);
        seq.validate();
    }
    return out;
}

inline std::vector<EventSequence> load_events_text(const std::string& path, std::size_t* d_in_out) {
    std::ifstream f(path);
    if (!f) throw io_error(io_code::malformed, "cannot open " + path);
    std::string line;
    std::size_t d_in = 0;
    std::map<std::uint64_t, EventSequence> by_user;
    std::map<std::uint64_t, std::vector<std::vector<double>>> keys, vals;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto fields = io::split_fields(line);
        if (fields.size() < 5 || (fields.size() - 3) % 2 != 0) {
            throw io_error(io_code::malformed,
                           "events line " + std::to_string(line_no) + ": bad field count");
        }
        const std::size_t dim = (fields.size() - 3) / 2;
        if (d_in == 0) d_in = dim;
        if (dim != d_in) {
            throw io_error(io_code::malformed,
                           "events line " + std::to_string(line_no) + ": inconsistent dim");
        }
        const std::uint64_t user = io::parse_u64(fields[0], "user_id");
        EventSequence& seq = by_user[user];
        seq.item_ids.push_back(io::parse_u64(fields[1], "item_id"));
        seq.timestamps.push_back(static_cast<std::int64_t>(io::parse_u64(fields[2], "timestamp")));
        std::vector<double> k(dim), v(dim);
        for (std::size_t i = 0; i < dim; ++i) k[i] = io::parse_double(fields[3 + i], "key");
        for (std::size_t i = 0; i < dim; ++i) v[i] = io::parse_double(fields[3 + dim + i], "value");
        keys[user].push_back(std::move(k));
        vals[user].push_back(std::move(v));
    }
    std::vector<EventSequence> out;
    for (auto& [user, seq] : by_user) {
        if (user != out.size()) {
            throw io_error(io_code::malformed, "user ids must be dense and zero-based");
        }
        const std::size_t l = seq.item_ids.size();
        std::vector<double> kd, vd;
        kd.reserve(l * d_in);
        vd.reserve(l * d_in);
        for (const auto& row : keys[user]) kd.insert(kd.end(), row.begin(), row.end());
        for (const auto& row : vals[user]) vd.insert(vd.end(), row.begin(), row.end());
        seq.key_feats = Matrix(l, d_in, std::move(kd));
        seq.value_feats = Matrix(l, d_in, std::move(vd));
        seq.validate();
        out.push_back(std::move(seq));
    }
    if (d_in_out) *d_in_out = d_in;
    return out;
}

inline void write_dataset(const SyntheticDataset& ds, const std::string& dir, bool binary_events) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const fs::path base(dir);

    nlohmann::json meta;
    meta["format"] = "vql-dataset";
    meta["version"] = 1;
    meta["seed"] = ds.seed;
    meta["n_users"] = ds.sequences.size();
    meta["n_items"] = ds.items.ids.size();
    meta["n_clusters"] = ds.n_clusters;
    meta["d_in"] = ds.feat_dim;
    meta["events_file"] = binary_events ? "events.bin" : "events.tsv";
    std::ofstream((base / "meta.json").string(), std::ios::trunc) << meta.dump(2) << "\n";

    if (binary_events) {
        write_events_binary(ds, (base / "events.bin").string());
    } else {
        write_events_text(ds, (base / "events.tsv").string());
    }

    {
        std::ofstream f((base / "items.tsv").string(), std::ios::trunc);
        f << "# vql-items v1\n# fields: item_id cluster key[d_in] value[d_in]\n";
        for (std::size_t i = 0; i < ds.items.ids.size(); ++i) {
            f << ds.items.ids[i] << ' ' << ds.items.cluster[i];
            for (double v : ds.items.key_feats.row(i)) f << ' ' << io::fmt_double(v);
            for (double v : ds.items.value_feats.row(i)) f << ' ' << io::fmt_double(v);
            f << '\n';
        }
    }
    {
        std::ofstream f((base / "samples.tsv").string(), std::ios::trunc);
        f << "# vql-samples v1\n# fields: user_id item_id query_time label\n";
        for (const DatasetSample& s : ds.samples) {
            f << s.user << ' ' << s.item_id << ' ' << s.query_time << ' ' << s.label << '\n';
        }
    }
}

inline SyntheticDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path base(dir);
    std::ifstream mf((base / "meta.json").string());
    if (!mf) throw io_error(io_code::malformed, "missing meta.json in " + dir);
    nlohmann::json meta;
    try {
        mf >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw io_error(io_code::malformed, std::string("meta.json: ") + e.what());
    }

    SyntheticDataset ds;
    ds.seed = meta.value("seed", 0ULL);
    ds.feat_dim = meta.at("d_in").get<std::size_t>();
    ds.n_clusters = meta.value("n_clusters", 0ULL);

    const std::string events_file = meta.at("events_file").get<std::string>();
    std::size_t d_in = 0;
    if (events_file.ends_with(".bin")) {
        ds.sequences = load_events_binary((base / events_file).string(), &d_in);
    } else {
        ds.sequences = load_events_text((base / events_file).string(), &d_in);
    }
    if (d_in != ds.feat_dim) throw io_error(io_code::malformed, "event dim != meta d_in");

    {
        std::ifstream f((base / "items.tsv").string());
        if (!f) throw io_error(io_code::malformed, "missing items.tsv");
        std::string line;
        std::vector<double> kd, vd;
        std::size_t line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            if (line.empty() || line[0] == '#') continue;
            const auto fields = io::split_fields(line);
            if (fields.size() != 2 + 2 * ds.feat_dim) {
                throw io_error(io_code::malformed,
                               "items line " + std::to_string(line_no) + ": bad field count");
            }
            ds.items.ids.push_back(io::parse_u64(fields[0], "item_id"));
            ds.items.cluster.push_back(
                static_cast<std::uint32_t>(io::parse_u64(fields[1], "cluster")));
            for (std::size_t i = 0; i < ds.feat_dim; ++i) {
                kd.push_back(io::parse_double(fields[2 + i], "key"));
            }
            for (std::size_t i = 0; i < ds.feat_dim; ++i) {
                vd.push_back(io::parse_double(fields[2 + ds.feat_dim + i], "value"));
            }
        }
        ds.items.key_feats = Matrix(ds.items.ids.size(), ds.feat_dim, std::move(kd));
        ds.items.value_feats = Matrix(ds.items.ids.size(), ds.feat_dim, std::move(vd));
        ds.items.rebuild_index();
    }
    {
        std::ifstream f((base / "samples.tsv").string());
        if (!f) throw io_error(io_code::malformed, "missing samples.tsv");
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            if (line.empty() || line[0] == '#') continue;
            const auto fields = io::split_fields(line);
            if (fields.size() != 4) {
                throw io_error(io_code::malformed,
                               "samples line " + std::to_string(line_no) + ": bad field count");
            }
            DatasetSample s;
            s.user = io::parse_u64(fields[0], "user_id");
            s.item_id = io::parse_u64(fields[1], "item_id");
            s.query_time = static_cast<std::int64_t>(io::parse_u64(fields[2], "query_time"));
            const std::uint64_t label = io::parse_u64(fields[3], "label");
            if (label > 1) throw io_error(io_code::malformed, "label must be 0 or 1");
            s.label = static_cast<int>(label);
            if (s.user >= ds.sequences.size()) {
                throw io_error(io_code::malformed, "sample references unknown user");
            }
            ds.samples.push_back(s);
        }
    }
    return ds;
}

}  // namespace vql
