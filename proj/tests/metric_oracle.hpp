#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "ciml/metrics.hpp"

namespace testutil {

// Every binary mask on a 3x3 grid with at most four foreground voxels.
inline std::vector<ciml::Tensor<uint8_t>> small_masks() {
    std::vector<ciml::Tensor<uint8_t>> out;
    for (int bits = 0; bits < 512; ++bits) {
        if (__builtin_popcount(bits) > 4) continue;
        ciml::Tensor<uint8_t> m(ciml::Shape{3, 3});
        for (int i = 0; i < 9; ++i) m[i] = (bits >> i) & 1;
        out.push_back(m);
    }
    return out;
}

inline double oracle_dice(const ciml::Tensor<uint8_t>& a, const ciml::Tensor<uint8_t>& b) {
    int na = 0, nb = 0, both = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        na += a[i] != 0;
        nb += b[i] != 0;
        both += a[i] != 0 && b[i] != 0;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * both / (na + nb);
}

// Hausdorff distance by enumerating every pair of foreground voxels of a 2D grid.
inline std::optional<double> oracle_hausdorff(const ciml::Tensor<uint8_t>& a, const ciml::Tensor<uint8_t>& b) {
    const int64_t w = a.dim(1);
    std::vector<std::pair<int64_t, int64_t>> pa, pb;
    for (int64_t i = 0; i < a.numel(); ++i) {
        if (a[i]) pa.emplace_back(i / w, i % w);
        if (b[i]) pb.emplace_back(i / w, i % w);
    }
    if (pa.empty() || pb.empty()) return std::nullopt;
    auto directed = [](const auto& from, const auto& to) {
        double worst = 0;
        for (const auto& [y0, x0] : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& [y1, x1] : to) {
                const double dy = static_cast<double>(y0 - y1), dx = static_cast<double>(x0 - x1);
                best = std::min(best, std::sqrt(dy * dy + dx * dx));
            }
            worst = std::max(worst, best);
        }
        return worst;
    };
    return std::max(directed(pa, pb), directed(pb, pa));
}

struct MetricOracleResult {
    int64_t pairs = 0;
    int64_t dice_mismatches = 0;
    int64_t hausdorff_mismatches = 0;
};

inline MetricOracleResult run_metric_oracle() {
    const auto masks = small_masks();
    MetricOracleResult r;
    for (const auto& a : masks) {
        for (const auto& b : masks) {
            ++r.pairs;
            if (ciml::metrics::dice_score(a, b) != oracle_dice(a, b)) ++r.dice_mismatches;
            if (ciml::metrics::hausdorff(a, b, {1.0, 1.0}) != oracle_hausdorff(a, b)) ++r.hausdorff_mismatches;
        }
    }
    return r;
}

}  // namespace testutil
