// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace blockprefill {

/// Box-Muller normals over mt19937_64; identical sequences on every standard library.
class GaussianStream {
public:
    explicit GaussianStream(std::uint64_t seed) : m_engine(seed) {}

    double next() {
        if (m_has_spare) {
            m_has_spare = false;
            return m_spare;
        }
        const double u1 = (static_cast<double>(m_engine() >> 11) + 0.5) * 0x1.0p-53;
        const double u2 = static_cast<double>(m_engine() >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        m_spare = r * std::sin(theta);
        m_has_spare = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 m_engine;
    double m_spare = 0.0;
    bool m_has_spare = false;
};

}  // namespace blockprefill
