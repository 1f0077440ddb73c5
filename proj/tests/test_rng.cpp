#include <cmath>
#include <vector>

#include "doctest.h"
#include "smedit/rng.hpp"

using namespace smedit;

TEST_CASE("same seed gives identical streams") {
    Rng a(0);
    Rng b(0);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    Rng c(0);
    Rng d(0);
    for (int i = 0; i < 100; ++i) {
        CHECK(c.normal() == d.normal());
    }
}

TEST_CASE("different seeds give different streams") {
    Rng a(0);
    Rng b(1);
    int differing = 0;
    for (int i = 0; i < 100; ++i) {
        if (a.next_u64() != b.next_u64()) ++differing;
    }
    CHECK(differing > 90);
}

TEST_CASE("normal draws have approximately unit moments") {
    Rng rng(42);
    const int n = 100000;
    double sum = 0;
    double sum_sq = 0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sum_sq += x * x;
    }
    const double mean = sum / n;
    const double var = sum_sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("uniform_int is in range and roughly uniform") {
    Rng rng(3);
    std::vector<int> counts(5, 0);
    for (int i = 0; i < 50000; ++i) {
        const int v = rng.uniform_int(5);
        REQUIRE(v >= 0);
        REQUIRE(v < 5);
        ++counts[static_cast<std::size_t>(v)];
    }
    for (int c : counts) {
        CHECK(c > 9000);
        CHECK(c < 11000);
    }
}

TEST_CASE("state round trip resumes the stream exactly") {
    Rng rng(9);
    for (int i = 0; i < 17; ++i) rng.normal();
    const std::string state = rng.serialize_state();
    Rng resumed = Rng::deserialize_state(state);
    for (int i = 0; i < 50; ++i) {
        CHECK(rng.normal() == resumed.normal());
        CHECK(rng.next_u64() == resumed.next_u64());
    }
}
