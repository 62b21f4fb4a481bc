#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "vql/cache.hpp"

using namespace vql;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
}

Assignment random_assignment(std::mt19937_64& rng, std::size_t l, std::size_t n) {
    Assignment a;
    std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(n - 1));
    for (std::size_t i = 0; i < l; ++i) a.indices.push_back(pick(rng));
    return a;
}

// Dense Δ^T V computed through plain matrix algebra.
Matrix dense_delta_t_v(const Assignment& a, std::size_t n, const Matrix& values) {
    Matrix delta_t(n, a.size());
    for (std::size_t i = 0; i < a.size(); ++i) delta_t(a.indices[i], i) = 1.0;
    return matmul(delta_t, values);
}

}  // namespace

TEST_CASE("csc construction from hand-built assignments") {
    Assignment a;
    a.indices = {0, 1, 0};
    const AssignmentCsc csc = build_assignment_csc(a, 2);
    CHECK(csc.col_ptr == std::vector<std::uint64_t>{0, 2, 3});
    CHECK(csc.row_idx == std::vector<std::uint64_t>{0, 2, 1});

    Assignment single;
    single.indices.assign(7, 0);
    const AssignmentCsc one = build_assignment_csc(single, 3);
    CHECK(one.col_ptr == std::vector<std::uint64_t>{0, 7, 7, 7});

    Assignment bad;
    bad.indices = {5};
    CHECK_THROWS_AS(build_assignment_csc(bad, 2), corruption_error);
}

TEST_CASE("csc round-trips through the dense one-hot matrix") {
    std::mt19937_64 rng(157);
    const std::size_t l = 40, n = 6;
    const Assignment a = random_assignment(rng, l, n);
    const AssignmentCsc csc = build_assignment_csc(a, n);
    csc.validate();

    // Rebuild the assignment from CSC columns; must be identical.
    std::vector<std::uint32_t> back(l, 0);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::uint64_t p = csc.col_ptr[j]; p < csc.col_ptr[j + 1]; ++p) {
            back[csc.row_idx[p]] = static_cast<std::uint32_t>(j);
        }
        // Ascending event order within the bucket.
        for (std::uint64_t p = csc.col_ptr[j] + 1; p < csc.col_ptr[j + 1]; ++p) {
            CHECK(csc.row_idx[p - 1] < csc.row_idx[p]);
        }
    }
    CHECK(back == a.indices);
}

TEST_CASE("light cache maps items to their nearest codes") {
    std::mt19937_64 rng(163);
    const Matrix cw = random_matrix(rng, 5, 4);
    const Codebook cb = Codebook::from_matrix(cw);

    Matrix keys(3, 4);
    std::copy(cw.row(3).begin(), cw.row(3).end(), keys.row(0).begin());  // exact codeword
    std::copy(cw.row(1).begin(), cw.row(1).end(), keys.row(1).begin());
    std::copy(cw.row(1).begin(), cw.row(1).end(), keys.row(2).begin());  // duplicate key
    const std::vector<std::uint64_t> ids = {10, 20, 30};
    const LightCache lc = build_light_cache(ids, keys, cb);
    CHECK(lc.item_to_code.at(10) == 3);
    CHECK(lc.item_to_code.at(20) == lc.item_to_code.at(30));

    // Itemwise brute force over a large table.
    const std::size_t n_items = 1000;
    std::vector<std::uint64_t> big_ids(n_items);
    for (std::size_t i = 0; i < n_items; ++i) big_ids[i] = i;
    const Matrix big_keys = random_matrix(rng, n_items, 4);
    const LightCache big = build_light_cache(big_ids, big_keys, cb);
    CHECK(big.item_to_code.size() == n_items);  // O(I) entries
    for (std::size_t i = 0; i < n_items; ++i) {
        Matrix row(1, 4);
        std::copy(big_keys.row(i).begin(), big_keys.row(i).end(), row.row(0).begin());
        CHECK(big.item_to_code.at(i) == assign_nearest(row, cb).indices[0]);
    }
}

TEST_CASE("heavy cache bucket sums") {
    Assignment a;
    a.indices = {0, 0};
    const Matrix values = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    const CacheBundle b = build_heavy_cache(build_assignment_csc(a, 2), values);
    CHECK(b.v_cache(0, 0) == 1.0);
    CHECK(b.v_cache(0, 1) == 1.0);
    CHECK(b.ones_cache(0, 0) == 2.0);
    // Empty bucket stays zero.
    CHECK(b.v_cache(1, 0) == 0.0);
    CHECK(b.ones_cache(1, 0) == 0.0);
    CHECK(b.event_count == 2);
}

TEST_CASE("heavy cache equals the dense one-hot aggregation") {
    std::mt19937_64 rng(167);
    const std::size_t l = 300, n = 10, d = 7;
    const Assignment a = random_assignment(rng, l, n);
    const Matrix values = random_matrix(rng, l, d);
    const CacheBundle b = build_heavy_cache(build_assignment_csc(a, n), values);
    const Matrix dense = dense_delta_t_v(a, n, values);
    for (std::size_t i = 0; i < dense.size(); ++i) {
        CHECK(b.v_cache.data()[i] == Catch::Approx(dense.data()[i]).margin(1e-12));
    }

    double ones = 0.0;
    for (std::size_t j = 0; j < n; ++j) ones += b.ones_cache(j, 0);
    CHECK(ones == static_cast<double>(l));  // conservation, exact
}

TEST_CASE("bundle linearity over concatenated event sets") {
    std::mt19937_64 rng(173);
    const std::size_t n = 5, d = 4, l1 = 64, l2 = 100;
    const Assignment a1 = random_assignment(rng, l1, n), a2 = random_assignment(rng, l2, n);
    const Matrix v1 = random_matrix(rng, l1, d), v2 = random_matrix(rng, l2, d);

    Assignment joint;
    joint.indices = a1.indices;
    joint.indices.insert(joint.indices.end(), a2.indices.begin(), a2.indices.end());
    Matrix vj(l1 + l2, d);
    std::copy(v1.data(), v1.data() + v1.size(), vj.data());
    std::copy(v2.data(), v2.data() + v2.size(), vj.data() + v1.size());

    const CacheBundle b1 = build_heavy_cache(build_assignment_csc(a1, n), v1);
    const CacheBundle b2 = build_heavy_cache(build_assignment_csc(a2, n), v2);
    const CacheBundle bj = build_heavy_cache(build_assignment_csc(joint, n), vj);
    for (std::size_t i = 0; i < bj.v_cache.size(); ++i) {
        CHECK(bj.v_cache.data()[i] ==
              Catch::Approx(b1.v_cache.data()[i] + b2.v_cache.data()[i]).margin(1e-12));
    }
}

TEST_CASE("permuted event order leaves bucket sums within 1e-12") {
    std::mt19937_64 rng(179);
    const std::size_t l = 2500, n = 3, d = 4;  // large buckets exercise pairwise summation
    const Assignment a = random_assignment(rng, l, n);
    const Matrix values = random_matrix(rng, l, d);

    std::vector<std::size_t> perm(l);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Assignment pa;
    Matrix pv(l, d);
    for (std::size_t i = 0; i < l; ++i) {
        pa.indices.push_back(a.indices[perm[i]]);
        std::copy(values.row(perm[i]).begin(), values.row(perm[i]).end(), pv.row(i).begin());
    }
    const CacheBundle b = build_heavy_cache(build_assignment_csc(a, n), values);
    const CacheBundle pb = build_heavy_cache(build_assignment_csc(pa, n), pv);
    for (std::size_t i = 0; i < b.v_cache.size(); ++i) {
        CHECK(b.v_cache.data()[i] == Catch::Approx(pb.v_cache.data()[i]).margin(1e-12));
    }
    CHECK(b.ones_cache == pb.ones_cache);
}

TEST_CASE("incremental updates match batch rebuilds") {
    std::mt19937_64 rng(181);
    const std::size_t n = 4, d = 3;

    // Base case: one append equals a single-event build.
    CacheBundle inc;
    inc.v_cache = Matrix(n, d);
    inc.ones_cache = Matrix(n, 1);
    const std::vector<double> v0 = {1.0, -2.0, 0.5};
    update_heavy_cache_incremental(inc, 2, v0);
    Assignment a0;
    a0.indices = {2};
    const CacheBundle single =
        build_heavy_cache(build_assignment_csc(a0, n), Matrix(1, d, std::vector<double>(v0)));
    CHECK(inc.v_cache == single.v_cache);
    CHECK(inc.ones_cache == single.ones_cache);
    CHECK(inc.event_count == 1);

    // 100 sequential appends vs one batch rebuild.
    CacheBundle stream;
    stream.v_cache = Matrix(n, d);
    stream.ones_cache = Matrix(n, 1);
    Assignment all;
    Matrix values = random_matrix(rng, 100, d);
    std::uniform_int_distribution<std::uint32_t> pick(0, n - 1);
    for (std::size_t i = 0; i < 100; ++i) {
        const std::uint32_t code = pick(rng);
        all.indices.push_back(code);
        update_heavy_cache_incremental(stream, code, values.row(i));
    }
    const CacheBundle batch = build_heavy_cache(build_assignment_csc(all, n), values);
    for (std::size_t i = 0; i < batch.v_cache.size(); ++i) {
        CHECK(stream.v_cache.data()[i] == Catch::Approx(batch.v_cache.data()[i]).margin(1e-12));
    }
    CHECK(stream.event_count == batch.event_count);

    // Zero-weight append changes only the event count.
    CacheBundle zero = stream;
    update_heavy_cache_incremental(zero, 1, v0, 0.0);
    CHECK(zero.v_cache == stream.v_cache);
    CHECK(zero.ones_cache == stream.ones_cache);
    CHECK(zero.event_count == stream.event_count + 1);

    CHECK_THROWS_AS(update_heavy_cache_incremental(zero, 99, v0), corruption_error);
}

TEST_CASE("incremental updates keep per-scale caches consistent") {
    std::mt19937_64 rng(1811);
    const std::size_t n = 3, d = 4;
    TemporalConfig tc = TemporalConfig::uniform(2, d);

    Assignment all;
    Matrix values = random_matrix(rng, 30, d);
    std::vector<double> ts(30);
    std::uniform_real_distribution<double> gap(-86400.0, 0.0);
    std::uniform_int_distribution<std::uint32_t> pick(0, n - 1);

    CacheBundle stream;
    stream.v_cache = Matrix(n, d);
    stream.ones_cache = Matrix(n, 1);
    stream.lambdas = tc.lambdas;
    stream.scales.resize(2);
    for (ScaleCache& sc : stream.scales) {
        sc.v_cache = Matrix(n, d);
        sc.ones_cache = Matrix(n, 1);
    }
    for (std::size_t i = 0; i < 30; ++i) {
        ts[i] = gap(rng);
        const std::uint32_t code = pick(rng);
        all.indices.push_back(code);
        const std::vector<double> w = {std::exp(tc.lambdas[0] * ts[i]),
                                       std::exp(tc.lambdas[1] * ts[i])};
        update_heavy_cache_incremental(stream, code, values.row(i), 1.0, w);
    }
    const CacheBundle batch = build_heavy_cache(build_assignment_csc(all, n), values, ts, &tc);
    for (std::size_t m = 0; m < 2; ++m) {
        for (std::size_t i = 0; i < batch.scales[m].v_cache.size(); ++i) {
            CHECK(stream.scales[m].v_cache.data()[i] ==
                  Catch::Approx(batch.scales[m].v_cache.data()[i]).margin(1e-12));
        }
    }
    // Scale-count mismatch is rejected.
    CHECK_THROWS_AS(update_heavy_cache_incremental(stream, 0, values.row(0), 1.0, {}),
                    config_error);
}

TEST_CASE("storage accounting matches the tier complexity claims") {
    std::mt19937_64 rng(191);
    const std::size_t l = 500, d = 64;
    for (std::size_t g_count : {1u, 2u, 4u}) {
        const std::size_t n = 100, dg = d / g_count;
        std::size_t heavy_floats = 0;
        for (std::size_t g = 0; g < g_count; ++g) {
            const Assignment a = random_assignment(rng, l, n);
            const CacheBundle b = build_heavy_cache(build_assignment_csc(a, n),
                                                    random_matrix(rng, l, dg));
            heavy_floats += heavy_cache_float_count(b);
        }
        CHECK(heavy_floats == n * d + n * g_count);  // values + ones
    }
    const Assignment a = random_assignment(rng, l, 16);
    const AssignmentCsc csc = build_assignment_csc(a, 16);
    CHECK(csc_entry_count(csc) == 16 + 1 + l);  // O(L) per user

    // Per-scale temporal variants add N*d + N floats per scale.
    TemporalConfig tc = TemporalConfig::uniform(3, 8);
    std::vector<double> ts(l, 0.0);
    const CacheBundle tb = build_heavy_cache(csc, random_matrix(rng, l, 8), ts, &tc);
    CHECK(heavy_cache_float_count(tb) == (16 * 8 + 16) * (1 + 3));
}

TEST_CASE("temporal build rejects missing or unrebased timestamps") {
    std::mt19937_64 rng(193);
    Assignment a = random_assignment(rng, 10, 3);
    const AssignmentCsc csc = build_assignment_csc(a, 3);
    const Matrix values = random_matrix(rng, 10, 4);
    TemporalConfig tc = TemporalConfig::uniform(1, 4);
    CHECK_THROWS_AS(build_heavy_cache(csc, values, {}, &tc), config_error);
    std::vector<double> bad(10, 5.0);  // positive: not rebased
    CHECK_THROWS_AS(build_heavy_cache(csc, values, bad, &tc), config_error);
}
