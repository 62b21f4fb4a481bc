#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "vql/bench.hpp"

using namespace vql;

TEST_CASE("bench defaults pin the candidate grid and length sweep") {
    const bench::BenchConfig cfg;
    CHECK(cfg.candidates == std::vector<std::size_t>{50, 100, 200, 500, 1000});
    CHECK(cfg.lengths == std::vector<std::size_t>{1000, 10000, 100000});
    CHECK(cfg.topk_k == 100);
    CHECK(cfg.topk_lengths == std::vector<std::size_t>{100, 200, 500, 1000, 2000, 5000});
}

TEST_CASE("throughput mode distributes scoring across threads") {
    bench::BenchConfig cfg;
    cfg.lengths = {64};
    cfg.candidates = {4};
    cfg.tiers = {CacheTier::heavy};
    cfg.include_oracle = false;
    cfg.reps = 4;
    cfg.threads = 2;
    cfg.d = 8;
    cfg.d_in = 8;
    cfg.codebook_size = 4;
    cfg.topk_lengths = {};
    const bench::BenchReport report = bench::run_bench(cfg);
    REQUIRE(report.rows.size() == 1);
    CHECK(report.rows[0].threads == 2);
    CHECK(report.rows[0].stats.reps == 4);
    CHECK(report.rows[0].stats.mean_us > 0.0);
}

TEST_CASE("latency measurement collects the requested repetitions") {
    std::size_t calls = 0;
    const auto stats = bench::measure_latency([&] { ++calls; }, 5, 2);
    CHECK(calls == 7);  // 2 warmups + 5 measured
    CHECK(stats.reps == 5);
    CHECK(stats.mean_us >= 0.0);
    CHECK(stats.median_us >= 0.0);
}

TEST_CASE("top-k discarded mass grows with the sequence length") {
    double prev = -1.0;
    for (std::size_t l : {100u, 200u, 500u, 1000u}) {
        const double mass = bench::topk_discarded_mass(l, 100, 50, 16, 9);
        CHECK(mass >= prev);
        prev = mass;
    }
    CHECK(bench::topk_discarded_mass(100, 100, 10, 16, 9) == 0.0);  // k == L keeps everything
    CHECK(prev > 0.5);  // at L = 1000, most of the mass sits outside the top 100
}

TEST_CASE("bench sweep emits schema-stable CSV reports") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / ("vql_bench_" + std::to_string(::getpid()));
    fs::create_directories(dir);

    bench::BenchConfig cfg;
    cfg.lengths = {64, 256};
    cfg.candidates = {4, 8};
    cfg.tiers = {CacheTier::heavy, CacheTier::light};
    cfg.reps = 3;
    cfg.d = 8;
    cfg.d_in = 8;
    cfg.codebook_size = 4;
    cfg.topk_lengths = {50, 100};
    cfg.topk_k = 10;
    cfg.topk_queries = 20;
    const bench::BenchReport report = bench::run_bench(cfg);
    CHECK(report.rows.size() == 2 * 2 * 3);  // lengths x candidates x (oracle + 2 tiers)
    for (const bench::BenchRow& r : report.rows) {
        CHECK(r.stats.reps == 3);
        CHECK(r.stats.mean_us > 0.0);
        if (r.strategy == "vql") {
            CHECK(r.cache_bytes > 0);
            CHECK(r.max_output_err <= r.bound);
        }
    }

    const std::string bench_csv = (dir / "bench.csv").string();
    const std::string topk_csv = (dir / "topk.csv").string();
    bench::write_bench_csv(report, bench_csv);
    bench::write_topk_csv(report, topk_csv);
    std::ifstream bf(bench_csv), tf(topk_csv);
    std::string header;
    std::getline(bf, header);
    CHECK(header ==
          "strategy,tier,L,B,threads,reps,mean_us,stddev_us,median_us,per_candidate_us,"
          "cache_bytes,max_output_err,bound");
    std::getline(tf, header);
    CHECK(header == "L,k,queries,mean_discarded_mass");
    std::size_t lines = 0;
    std::string line;
    while (std::getline(bf, line)) ++lines;
    CHECK(lines == report.rows.size());

    std::error_code ec;
    fs::remove_all(dir, ec);
}
