#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "smedit/errors.hpp"

namespace smedit {

// Deterministic random stream. All derived draws (uniform doubles, normals,
// bounded ints, shuffles) are built directly on the mt19937_64 output so the
// stream is identical across platforms and standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // [0, n), unbiased via 128-bit widening multiply
    int uniform_int(int n) {
        if (n <= 0) throw_error(ErrorKind::contract, "uniform_int requires n > 0");
        const auto un = static_cast<std::uint64_t>(n);
        while (true) {
            const std::uint64_t x = engine_();
            const auto product = static_cast<unsigned __int128>(x) * un;
            const auto low = static_cast<std::uint64_t>(product);
            if (low < un) {
                const std::uint64_t threshold = (~un + 1) % un;
                if (low < threshold) continue;
            }
            return static_cast<int>(product >> 64);
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (int i = static_cast<int>(items.size()) - 1; i > 0; --i) {
            const int j = uniform_int(i + 1);
            std::swap(items[i], items[static_cast<std::size_t>(j)]);
        }
    }

    // Round-trippable state for checkpoint/resume.
    std::string serialize_state() const {
        std::ostringstream out;
        out << engine_ << " " << (has_spare_ ? 1 : 0) << " ";
        out.precision(17);
        out << spare_;
        return out.str();
    }

    static Rng deserialize_state(const std::string& text) {
        Rng rng(0);
        std::istringstream in(text);
        int has_spare = 0;
        in >> rng.engine_ >> has_spare >> rng.spare_;
        if (in.fail()) throw_error(ErrorKind::io, "invalid rng state");
        rng.has_spare_ = has_spare != 0;
        return rng;
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace smedit
