#pragma once

#include <cstdint>
#include <string>

#include "vql/serialize.hpp"
#include "vql/trainer.hpp"

namespace vql {

struct LoadedModel {
    ModelParams params;
    double value_norm_bound = 4.0;
};

/// Model files use the same container framing as cache files with record
/// type `model`; the checksum field covers all group codebooks combined.
inline std::uint64_t model_codebook_checksum(const ModelParams& m) {
    io::ByteWriter w;
    for (const Codebook& cb : m.codebooks) w.put_u64(codebook_checksum(cb));
    return io::fnv1a64(w.buf);
}

inline void save_model(const ModelParams& m, double value_norm_bound, const std::string& path) {
    if (!m.codebooks_ready) throw config_error("save_model: codebooks not initialized");
    io::ByteWriter w;
    io::write_file_header(w);
    io::RecordHeader h;
    h.kind = record_kind::model;
    h.n = m.codebooks.front().size();
    h.dg = m.gvq.group_dim();
    h.m = m.lambdas.size();
    h.codebook_checksum = model_codebook_checksum(m);
    io::write_record_header(w, h);

    w.put_u64(m.d_in);
    w.put_u64(m.gvq.model_dim);
    w.put_u64(m.gvq.num_heads);
    w.put_u64(m.gvq.num_groups);
    for (std::size_t hh = 0; hh < m.gvq.num_heads; ++hh) w.put_u64(m.gvq.group_of(hh));
    w.put_f64(value_norm_bound);
    w.put_f64_span(m.lambdas);
    w.put_f64_span({m.w_q.data(), m.w_q.size()});
    w.put_f64_span({m.w_k.data(), m.w_k.size()});
    w.put_f64_span({m.w_v.data(), m.w_v.size()});
    for (const Codebook& cb : m.codebooks) {
        w.put_f64_span({cb.codewords().data(), cb.codewords().size()});
    }
    for (std::size_t g = 0; g < m.gvq.num_groups; ++g) {
        w.put_f64_span({m.gate_w[g].data(), m.gate_w[g].size()});
        w.put_f64_span(m.gate_b[g]);
    }
    w.put_f64_span(m.head_w);
    w.put_f64(m.head_b);
    io::write_file(path, w.buf);
}

inline LoadedModel load_model(const std::string& path) {
    const auto bytes = io::read_file(path);
    io::ByteReader r{bytes};
    io::read_file_header(r);
    const io::RecordHeader h = io::read_record_header(r);
    if (h.kind != record_kind::model) {
        throw io_error(io_code::bad_record_type, "not a model file: " + path);
    }
    LoadedModel lm;
    ModelParams& m = lm.params;
    m.d_in = r.get_u64();
    m.gvq.model_dim = r.get_u64();
    m.gvq.num_heads = r.get_u64();
    m.gvq.num_groups = r.get_u64();
    m.gvq.head_to_group.resize(m.gvq.num_heads);
    for (auto& g : m.gvq.head_to_group) g = r.get_u64();
    m.gvq.validate();
    lm.value_norm_bound = r.get_f64();
    m.lambdas.resize(h.m);
    for (double& l : m.lambdas) l = r.get_f64();

    const std::size_t dg = m.gvq.group_dim();
    m.w_q = io::read_matrix(r, m.d_in, m.gvq.num_heads * dg);
    m.w_k = io::read_matrix(r, m.d_in, m.gvq.model_dim);
    m.w_v = io::read_matrix(r, m.d_in, m.gvq.model_dim);
    for (std::size_t g = 0; g < m.gvq.num_groups; ++g) {
        m.codebooks.push_back(Codebook::from_matrix(io::read_matrix(r, h.n, dg)));
    }
    for (std::size_t g = 0; g < m.gvq.num_groups; ++g) {
        m.gate_w.push_back(io::read_matrix(r, h.m, dg));
        std::vector<double> gb(h.m);
        for (double& v : gb) v = r.get_f64();
        m.gate_b.push_back(std::move(gb));
    }
    m.head_w.resize(m.gvq.num_heads * dg + m.d_in);
    for (double& v : m.head_w) v = r.get_f64();
    m.head_b = r.get_f64();
    m.codebooks_ready = true;

    if (model_codebook_checksum(m) != h.codebook_checksum) {
        throw io_error(io_code::checksum_mismatch, "model codebook checksum mismatch");
    }
    return lm;
}

}  // namespace vql
