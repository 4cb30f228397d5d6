#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ciml/training.hpp"

namespace testutil {

using namespace ciml;

inline Shape img(int64_t n, int64_t c, int64_t extent, int d) {
    Shape s{n, c};
    for (int i = 0; i < d; ++i) s.push_back(extent);
    return s;
}

// Per-layer shapes of one segmentor, written out from the architecture table
// independently of the implementation.
inline nn::ShapeTrace expected_trace(const ArchitectureConfig& a, int64_t n) {
    const int p = a.patch_size, c = a.base_filters, d = a.spatial_dims, k = a.message_count;
    nn::ShapeTrace t;
    for (int s = 1; s <= 4; ++s) {
        const int64_t ch = int64_t(c) << (s - 1);
        t["encoder.down" + std::to_string(s) + ".conv"] = img(n, ch, p >> (s - 1), d);
        t["encoder.stage" + std::to_string(s)] = img(n, ch, p >> s, d);
    }
    for (int s = 1; s <= 4; ++s) {
        const int e = 5 - s;
        const int64_t ce = int64_t(c) << (e - 1);
        const int64_t r = p >> e;
        const std::string cs = "cig" + std::to_string(s);
        if (k > 0) {
            t[cs + ".attention"] = img(n, k, r, d);
            for (int j = 0; j < k; ++j) t[cs + ".mu" + std::to_string(j)] = img(n, ce, r, d);
            t[cs + ".complementary"] = img(n, s == 1 ? ce : 2 * ce, r, d);
        }
        const std::string us = "up" + std::to_string(s);
        t[us + ".input"] = img(n, 2 * ce, r, d);
        t[us + ".transpose"] = img(n, ce, r * 2, d);
        t[us + ".output"] = img(n, ce, r * 2, d);
    }
    t["logits"] = img(n, a.out_channels, p, d);
    return t;
}

struct ShapeGridResult {
    int configs = 0;
    int mismatches = 0;
    int attention_out_of_range = 0;
    std::string first_failure;
};

// Runs one decoder of a (K+1)-segmentor network for every (P, C, K, d) in the grid.
inline ShapeGridResult check_shape_grid(const std::vector<int>& ps, const std::vector<int>& cs,
                                        const std::vector<int>& ks, const std::vector<int>& ds) {
    ShapeGridResult r;
    for (int p : ps)
        for (int c : cs)
            for (int k : ks)
                for (int d : ds) {
                    ArchitectureConfig a;
                    a.patch_size = p;
                    a.base_filters = c;
                    a.message_count = k;
                    a.spatial_dims = d;
                    a.out_channels = 3;
                    nn::ParameterSet<float> params;
                    std::mt19937_64 rng(p * 1000 + c * 100 + k * 10 + d);
                    std::vector<std::unique_ptr<nn::Segmentor<float>>> segs;
                    for (int i = 0; i <= k; ++i)
                        segs.push_back(std::make_unique<nn::Segmentor<float>>("m" + std::to_string(i), a, params, rng));
                    ag::NoGradGuard ng;
                    std::normal_distribution<double> g;
                    std::vector<nn::EncoderOutput<float>> enc;
                    nn::ShapeTrace trace;
                    for (int i = 0; i <= k; ++i) {
                        Tensor<float> x(img(1, 1, p, d));
                        for (auto& v : x.values()) v = static_cast<float>(g(rng));
                        enc.push_back(segs[i]->encode(ag::Var<float>::constant(x), false, i == 0 ? &trace : nullptr));
                    }
                    std::vector<const nn::MessageBundle<float>*> in;
                    for (int i = 1; i <= k; ++i) in.push_back(&enc[i].messages);
                    auto out = segs[0]->decode(enc[0], in, nn::NoiseMode::seeded(3), false, &trace);
                    ++r.configs;
                    if (trace != expected_trace(a, 1)) {
                        ++r.mismatches;
                        if (r.first_failure.empty())
                            r.first_failure = "P=" + std::to_string(p) + " C=" + std::to_string(c) +
                                              " K=" + std::to_string(k) + " d=" + std::to_string(d);
                    }
                    for (const auto& att : out.attention_maps)
                        for (float v : att.value().values())
                            if (!(v > 0.0f && v < 1.0f)) ++r.attention_out_of_range;
                }
    return r;
}

struct LossGradcheck {
    int checked = 0;
    int latent_checked = 0;
    size_t detached_inputs = 0;
    double max_rel_error = 0;
    std::string worst;  // parameter[index] analytic vs numeric at the largest error
};

// Two segmentors (P=16, C=1, 3D, float64) exchanging messages; compares the
// gradient of the summed CIML loss with central differences on `samples`
// random parameter scalars, a third of them from the gate mu/sigma convs.
inline LossGradcheck total_loss_gradcheck(uint64_t seed, int samples = 120, double h = 1e-6) {
    TaskAssignment asg;
    RegionSet regions{{{"R1", 1}, {"R2", 2}}, false};
    asg.entries = {{{"A", 0}, {regions.regions[0]}}, {{"B", 1}, {regions.regions[1]}}};
    ArchitectureConfig base;
    base.patch_size = 16;
    base.base_filters = 1;
    base.spatial_dims = 3;
    train::CimlModel<double> model(asg, regions, base, seed);

    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<double> g;
    Tensor<uint8_t> mask(img(1, 1, 16, 3));
    mask.reshape({1, 16, 16, 16});
    for (int64_t z = 0; z < 16; ++z)
        for (int64_t y = 0; y < 16; ++y)
            for (int64_t x = 0; x < 16; ++x) {
                const int64_t i = (z * 16 + y) * 16 + x;
                mask[i] = (z > 3 && z < 12 && y > 4 && x < 10) ? (x < 5 ? 2 : 1) : 0;
            }
    std::vector<Tensor<double>> inputs;
    std::vector<Tensor<int32_t>> labels;
    for (size_t i = 0; i < 2; ++i) {
        Tensor<double> x(img(1, 1, 16, 3));
        for (int64_t v = 0; v < x.numel(); ++v) x[v] = 0.5 * g(rng) + (mask[v] ? 1.0 + static_cast<double>(i) : 0.0);
        inputs.push_back(x);
        labels.push_back(model.remap(i).apply(mask));
    }
    const auto noise = nn::NoiseMode::seeded(seed + 2);
    auto loss = [&]() {
        std::vector<ag::Var<double>> vs;
        for (const auto& t : inputs) vs.push_back(ag::Var<double>::constant(t));
        return train::ciml_total_loss(model.forward(vs, noise, true), labels, 0.5).total;
    };

    // Detached inputs are constants for the analytic gradient, so the finite
    // differences replay their unperturbed values.
    ag::DetachFreezer freezer;
    model.params().zero_grad();
    loss().backward();
    freezer.replay();

    struct Coord {
        size_t entry;
        int64_t index;
    };
    std::vector<size_t> latent_entries, all_entries;
    const auto& entries = model.params().entries();
    for (size_t e = 0; e < entries.size(); ++e) {
        all_entries.push_back(e);
        const auto& n = entries[e].name;
        if (n.find(".mu") != std::string::npos || n.find(".sigma") != std::string::npos) latent_entries.push_back(e);
    }
    std::vector<Coord> coords;
    auto pick = [&](const std::vector<size_t>& pool) {
        const size_t e = pool[std::uniform_int_distribution<size_t>(0, pool.size() - 1)(rng)];
        const int64_t n = entries[e].var.value().numel();
        coords.push_back({e, std::uniform_int_distribution<int64_t>(0, n - 1)(rng)});
    };
    for (int i = 0; i < samples; ++i) pick(i % 3 == 0 ? latent_entries : all_entries);

    LossGradcheck out;
    out.detached_inputs = freezer.recorded();
    for (const auto& c : coords) {
        auto var = entries[c.entry].var;
        const double analytic = var.has_grad() ? var.grad()[c.index] : 0.0;
        double& w = var.mutable_value()[c.index];
        const double w0 = w;
        double lp, lm;
        {
            ag::NoGradGuard ng;
            w = w0 + h;
            freezer.replay();
            lp = loss().item();
            w = w0 - h;
            freezer.replay();
            lm = loss().item();
        }
        w = w0;
        const double numeric = (lp - lm) / (2 * h);
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        const double err = std::abs(analytic - numeric) / denom;
        if (err > out.max_rel_error) {
            out.max_rel_error = err;
            out.worst = entries[c.entry].name + "[" + std::to_string(c.index) + "] " + std::to_string(analytic) +
                        " vs " + std::to_string(numeric);
        }
        ++out.checked;
        const auto& n = entries[c.entry].name;
        if (n.find(".mu") != std::string::npos || n.find(".sigma") != std::string::npos) ++out.latent_checked;
    }
    return out;
}

}  // namespace testutil
