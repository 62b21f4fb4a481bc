#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <filesystem>
#include <random>

#include "vql/model_io.hpp"
#include "vql/serialize.hpp"

using namespace vql;

namespace {

namespace fs = std::filesystem;

struct TmpDir {
    fs::path path;
    TmpDir() {
        path = fs::temp_directory_path() / ("vql_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TmpDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
}

CacheBundle random_bundle(std::mt19937_64& rng, std::size_t l, std::size_t n, std::size_t d,
                          bool temporal, std::uint64_t checksum) {
    Assignment a;
    std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(n - 1));
    for (std::size_t i = 0; i < l; ++i) a.indices.push_back(pick(rng));
    const Matrix values = random_matrix(rng, l, d);
    if (!temporal) {
        return build_heavy_cache(build_assignment_csc(a, n), values, {}, nullptr, checksum);
    }
    TemporalConfig tc = TemporalConfig::uniform(2, d);
    std::vector<double> ts(l);
    std::uniform_real_distribution<double> gap(-86400.0, 0.0);
    for (double& t : ts) t = gap(rng);
    return build_heavy_cache(build_assignment_csc(a, n), values, ts, &tc, checksum);
}

}  // namespace

TEST_CASE("bundle round trip is byte-identical, plain and temporal") {
    TmpDir tmp;
    std::mt19937_64 rng(197);
    for (bool temporal : {false, true}) {
        const Codebook cb = Codebook::from_matrix(random_matrix(rng, 6, 5));
        const CacheBundle b = random_bundle(rng, 37, 6, 5, temporal, codebook_checksum(cb));
        const std::string path = tmp.file(temporal ? "t.vqlc" : "p.vqlc");
        serialize_cache(b, path, 42);
        const auto bytes1 = io::read_file(path);

        const CacheRecord rec = deserialize_cache(path, &cb);
        REQUIRE(rec.kind == record_kind::heavy_bundle);
        CHECK(rec.user_id == 42);
        CHECK(rec.bundle.v_cache == b.v_cache);
        CHECK(rec.bundle.ones_cache == b.ones_cache);
        CHECK(rec.bundle.event_count == b.event_count);
        CHECK(rec.bundle.lambdas == b.lambdas);
        REQUIRE(rec.bundle.scales.size() == b.scales.size());
        for (std::size_t m = 0; m < b.scales.size(); ++m) {
            CHECK(rec.bundle.scales[m].v_cache == b.scales[m].v_cache);
            CHECK(rec.bundle.scales[m].ones_cache == b.scales[m].ones_cache);
        }

        serialize_cache(rec.bundle, path, rec.user_id);
        CHECK(io::read_file(path) == bytes1);
    }
}

TEST_CASE("csc and light records round trip") {
    TmpDir tmp;
    std::mt19937_64 rng(199);
    Assignment a;
    std::uniform_int_distribution<std::uint32_t> pick(0, 4);
    for (int i = 0; i < 64; ++i) a.indices.push_back(pick(rng));
    const AssignmentCsc csc = build_assignment_csc(a, 5);
    serialize_cache(csc, tmp.file("c.vqlc"), 7, 2, 12345);
    const CacheRecord rc = deserialize_cache(tmp.file("c.vqlc"));
    REQUIRE(rc.kind == record_kind::csc);
    CHECK(rc.user_id == 7);
    CHECK(rc.group_id == 2);
    CHECK(rc.csc.col_ptr == csc.col_ptr);
    CHECK(rc.csc.row_idx == csc.row_idx);

    LightCache lc;
    lc.item_to_code = {{5, 1}, {9, 0}, {400, 3}};
    serialize_cache(lc, tmp.file("l.vqlc"), 1, 999);
    const CacheRecord rl = deserialize_cache(tmp.file("l.vqlc"));
    REQUIRE(rl.kind == record_kind::light);
    CHECK(rl.light.item_to_code == lc.item_to_code);
}

TEST_CASE("multi-record archives read back in order") {
    TmpDir tmp;
    std::mt19937_64 rng(211);
    const Codebook cb = Codebook::from_matrix(random_matrix(rng, 4, 3));
    io::ByteWriter w;
    io::write_file_header(w);
    for (std::uint64_t user = 0; user < 5; ++user) {
        io::append_record(w, random_bundle(rng, 10, 4, 3, false, codebook_checksum(cb)), user);
    }
    io::write_file(tmp.file("a.vqlc"), w.buf);
    const auto records = read_cache_records(tmp.file("a.vqlc"), &cb);
    REQUIRE(records.size() == 5);
    for (std::uint64_t user = 0; user < 5; ++user) CHECK(records[user].user_id == user);
}

TEST_CASE("corrupted and stale files are rejected with distinct codes") {
    TmpDir tmp;
    std::mt19937_64 rng(223);
    const Codebook cb = Codebook::from_matrix(random_matrix(rng, 4, 3));
    const Codebook other = Codebook::from_matrix(random_matrix(rng, 4, 3));
    const CacheBundle b = random_bundle(rng, 20, 4, 3, false, codebook_checksum(cb));
    const std::string path = tmp.file("x.vqlc");
    serialize_cache(b, path);
    const auto good = io::read_file(path);

    auto code_of = [&](std::vector<std::byte> bytes, const Codebook* expected) {
        io::write_file(path, bytes);
        try {
            (void)deserialize_cache(path, expected);
        } catch (const io_error& e) {
            return e.code;
        }
        return io_code::malformed;  // "no error" sentinel the checks below reject
    };

    auto bad_magic = good;
    bad_magic[1] = std::byte('z');
    CHECK(code_of(bad_magic, nullptr) == io_code::bad_magic);

    auto bad_version = good;
    bad_version[4] = std::byte(9);
    CHECK(code_of(bad_version, nullptr) == io_code::bad_version);

    auto bad_type = good;
    bad_type[8] = std::byte(200);
    CHECK(code_of(bad_type, nullptr) == io_code::bad_record_type);

    auto truncated = good;
    truncated.resize(truncated.size() / 2);
    CHECK(code_of(truncated, nullptr) == io_code::truncated);
    // No partial object escapes: deserialize throws before returning.

    CHECK(code_of(good, &other) == io_code::checksum_mismatch);
    io::write_file(path, good);
    CHECK_NOTHROW(deserialize_cache(path, &cb));
}

TEST_CASE("fnv1a64 checksum changes with any codebook perturbation") {
    std::mt19937_64 rng(227);
    const Matrix cw = random_matrix(rng, 5, 4);
    const std::uint64_t base = codebook_checksum(Codebook::from_matrix(cw));
    Matrix bumped = cw;
    bumped(2, 1) = std::nextafter(bumped(2, 1), 1e300);
    CHECK(codebook_checksum(Codebook::from_matrix(bumped)) != base);
    CHECK(codebook_checksum(Codebook::from_matrix(cw)) == base);
}

TEST_CASE("model files round trip and validate their codebook checksum") {
    TmpDir tmp;
    TrainConfig cfg;
    cfg.gvq = GvqConfig::make(4, 2, 8);
    cfg.codebook_size = 5;
    cfg.temporal_scales = 2;
    ModelParams m = ModelParams::init(6, cfg);
    std::mt19937_64 rng(229);
    for (auto& cb : m.codebooks) cb = Codebook::from_matrix(random_matrix(rng, 5, 4));
    m.codebooks_ready = true;
    for (std::size_t i = 0; i < m.head_w.size(); ++i) m.head_w[i] = 0.01 * double(i);
    m.head_b = -0.5;

    const std::string path = tmp.file("m.vqlm");
    save_model(m, 3.5, path);
    const LoadedModel lm = load_model(path);
    CHECK(lm.value_norm_bound == 3.5);
    CHECK(lm.params.d_in == m.d_in);
    CHECK(lm.params.w_q == m.w_q);
    CHECK(lm.params.w_k == m.w_k);
    CHECK(lm.params.w_v == m.w_v);
    CHECK(lm.params.head_w == m.head_w);
    CHECK(lm.params.head_b == m.head_b);
    CHECK(lm.params.lambdas == m.lambdas);
    for (std::size_t g = 0; g < 2; ++g) {
        CHECK(lm.params.codebooks[g].codewords() == m.codebooks[g].codewords());
        CHECK(lm.params.gate_w[g] == m.gate_w[g]);
        CHECK(lm.params.gate_b[g] == m.gate_b[g]);
    }
    CHECK(lm.params.gvq.group_of(3) == m.gvq.group_of(3));
}
