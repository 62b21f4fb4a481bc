#include <catch2/catch_amalgamated.hpp>

#include <limits>

#include "vql/verify.hpp"

using namespace vql;

TEST_CASE("all verification suites pass on their default budgets") {
    for (const SuiteResult& r : run_all_suites(12345)) {
        INFO(r.name << ": " << r.detail);
        CHECK(r.passed);
    }
}

TEST_CASE("seeds change the sampled instances but never the outcome") {
    for (std::uint64_t seed : {1ULL, 99ULL, 20260810ULL}) {
        CHECK(suite_lemma_one(seed, 300).passed);
        CHECK(suite_equivalence(seed, 12).passed);
        CHECK(suite_error_bounds(seed, 40).passed);
        CHECK(suite_assignment(seed, 60).passed);
    }
}

TEST_CASE("an injected tie-rule fault is caught with a counterexample") {
    // Broken argmin: prefers the highest index on exact ties.
    auto broken = [](const Matrix& keys, const Codebook& cb) {
        Assignment a;
        a.indices.resize(keys.rows());
        for (std::size_t i = 0; i < keys.rows(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < cb.size(); ++j) {
                const double d = Codebook::sq_dist(keys.row(i), cb.codewords().row(j));
                if (d <= best) {  // the fault: <= instead of <
                    best = d;
                    a.indices[i] = static_cast<std::uint32_t>(j);
                }
            }
        }
        return a;
    };
    const SuiteResult r = suite_assignment(4242, 300, broken);
    CHECK_FALSE(r.passed);
    CHECK(r.detail.find("key row") != std::string::npos);
    CHECK(r.detail.find("brute force") != std::string::npos);
}
