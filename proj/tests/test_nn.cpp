#include <cmath>
#include <stdexcept>

#include "ciml/nn.hpp"
#include "doctest.h"
#include "checks.hpp"
#include "gradcheck.hpp"

using namespace ciml;
using namespace ciml::nn;
using testutil::expected_trace;
using testutil::img;

namespace {

ArchitectureConfig arch(int p, int c, int k, int d, int o = 2) {
    ArchitectureConfig a;
    a.patch_size = p;
    a.base_filters = c;
    a.message_count = k;
    a.spatial_dims = d;
    a.out_channels = o;
    return a;
}

template <typename T>
Var<T> random_patch(const ArchitectureConfig& a, uint64_t seed, int64_t n = 1) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Tensor<T> t(img(n, a.in_channels, a.patch_size, a.spatial_dims));
    for (auto& v : t.values()) v = static_cast<T>(g(rng));
    return Var<T>::constant(t);
}

struct Network {
    ParameterSet<double> params;
    std::vector<std::unique_ptr<Segmentor<double>>> segs;
};

std::unique_ptr<Network> make_network(const ArchitectureConfig& a, uint64_t seed) {
    auto net = std::make_unique<Network>();
    std::mt19937_64 rng(seed);
    for (int i = 0; i <= a.message_count; ++i) {
        net->segs.push_back(std::make_unique<Segmentor<double>>("m" + std::to_string(i), a, net->params, rng));
    }
    return net;
}

void set_value(const ParameterSet<double>& ps, const std::string& name, double v) {
    auto var = ps.at(name);
    var.mutable_value().fill(v);
}

}  // namespace

TEST_CASE("encoder stage shapes") {
    struct Case {
        int p, c, d;
        std::vector<Shape> stages;
    };
    std::vector<Case> cases{
        {16, 1, 3, {{1, 1, 8, 8, 8}, {1, 2, 4, 4, 4}, {1, 4, 2, 2, 2}, {1, 8, 1, 1, 1}}},
        {32, 8, 2, {{1, 8, 16, 16}, {1, 16, 8, 8}, {1, 32, 4, 4}, {1, 64, 2, 2}}},
        {64, 24, 3, {{1, 24, 32, 32, 32}, {1, 48, 16, 16, 16}, {1, 96, 8, 8, 8}, {1, 192, 4, 4, 4}}},
    };
    for (const auto& c : cases) {
        auto a = arch(c.p, c.c, 0, c.d);
        ParameterSet<float> ps;
        std::mt19937_64 rng(1);
        Segmentor<float> seg("A", a, ps, rng);
        ag::NoGradGuard ng;
        auto enc = seg.encode(random_patch<float>(a, 2), false);
        for (int s = 0; s < 4; ++s) CHECK(enc.messages.stages[s].shape() == c.stages[s]);
    }
    auto a = arch(16, 1, 0, 3);
    ParameterSet<float> ps;
    std::mt19937_64 rng(1);
    Segmentor<float> seg("A", a, ps, rng);
    CHECK_THROWS_AS(seg.encode(random_patch<float>(arch(32, 1, 0, 3), 1), false), std::domain_error);
}

TEST_CASE("full segmentor at default scale") {
    // P=64, C=24, K=3, O=2 in 3D; inference only.
    auto a = arch(64, 24, 3, 3);
    ParameterSet<float> ps;
    std::mt19937_64 rng(3);
    std::vector<std::unique_ptr<Segmentor<float>>> segs;
    for (int i = 0; i < 4; ++i) segs.push_back(std::make_unique<Segmentor<float>>("m" + std::to_string(i), a, ps, rng));
    ag::NoGradGuard ng;
    std::vector<EncoderOutput<float>> enc;
    for (int i = 0; i < 4; ++i) enc.push_back(segs[i]->encode(random_patch<float>(a, 10 + i), false));
    std::vector<const MessageBundle<float>*> in{&enc[1].messages, &enc[2].messages, &enc[3].messages};
    ShapeTrace trace;
    auto out = segs[0]->decode(enc[0], in, NoiseMode::mean(), false, &trace);
    CHECK(out.logits.shape() == Shape{1, 2, 64, 64, 64});
    CHECK(trace.at("cig1.attention") == Shape{1, 3, 4, 4, 4});
    CHECK(trace.at("up1.input") == Shape{1, 384, 4, 4, 4});
}

TEST_CASE("shape contract on a reduced grid") {
    for (int d : {2, 3}) {
        for (int k : {0, 1, 3}) {
            auto a = arch(16, 2, k, d, 3);
            auto net = make_network(a, 4);
            std::vector<EncoderOutput<double>> enc;
            for (int i = 0; i <= k; ++i) enc.push_back(net->segs[i]->encode(random_patch<double>(a, 20 + i, 2), true));
            std::vector<const MessageBundle<double>*> in;
            for (int i = 1; i <= k; ++i) in.push_back(&enc[i].messages);
            ShapeTrace trace;
            net->segs[0]->encode(random_patch<double>(a, 20, 2), true, &trace);
            auto out = net->segs[0]->decode(enc[0], in, NoiseMode::fixed(0.3), true, &trace);
            CHECK(trace == expected_trace(a, 2));
            CHECK(out.latents.size() == (k > 0 ? 4u : 0u));
            for (const auto& att : out.attention_maps)
                for (double v : att.value().values()) CHECK((v > 0.0 && v < 1.0));
        }
    }
}

TEST_CASE("baseline without the information gate") {
    auto a = arch(16, 2, 0, 2);
    a.cig_enabled = false;
    ParameterSet<double> ps;
    std::mt19937_64 rng(5);
    Segmentor<double> seg("A", a, ps, rng);
    for (const auto& e : ps.entries()) CHECK(e.name.find(".cig") == std::string::npos);
    auto out = seg.forward(random_patch<double>(a, 1), {}, NoiseMode::mean(), false);
    CHECK(out.logits.shape() == Shape{1, 2, 16, 16});
    CHECK(out.latents.empty());
    CHECK(ps.contains("segmentor.A.encoder.down1.conv.weight"));
    CHECK_THROWS_AS(seg.forward(random_patch<double>(a, 1), {&out.messages}, NoiseMode::mean(), false),
                    std::domain_error);
}

TEST_CASE("attention") {
    auto a = arch(16, 2, 2, 3);
    auto net = make_network(a, 6);
    for (const auto& e : net->params.entries()) {
        if (e.name.find("segmentor.m0.decoder.cig1.attn") != std::string::npos) set_value(net->params, e.name, 0.0);
    }
    std::vector<EncoderOutput<double>> enc;
    for (int i = 0; i < 3; ++i) enc.push_back(net->segs[i]->encode(random_patch<double>(a, 30 + i), false));
    const auto& cig = net->segs[0]->cig(1);
    auto att = cig.attention(enc[0].messages.stages[3], {enc[1].messages.stages[3], enc[2].messages.stages[3]}, false);
    CHECK(att.shape() == Shape{1, 2, 1, 1, 1});
    for (double v : att.value().values()) CHECK(v == 0.5);
    CHECK_THROWS_AS(cig.attention(enc[0].messages.stages[3], {}, false), std::domain_error);
}

TEST_CASE("information gate filter") {
    auto a = arch(16, 1, 1, 2);
    auto net = make_network(a, 7);
    auto& ps = net->params;
    auto enc0 = net->segs[0]->encode(random_patch<double>(a, 40), false);
    auto enc1 = net->segs[1]->encode(random_patch<double>(a, 41), false);
    const auto& cig = net->segs[0]->cig(4);
    std::vector<Var<double>> msgs{enc1.messages.stages[0]};

    SUBCASE("zero noise gives the mean") {
        auto out = cig(enc0.skips[1], msgs, NoiseMode::fixed(0.0), 0, false);
        CHECK(out.latents[0].kappa.value() == out.latents[0].mu.value());
        auto mean = cig(enc0.skips[1], msgs, NoiseMode::mean(), 0, false);
        CHECK(mean.latents[0].kappa.value() == mean.latents[0].mu.value());
        for (double s : out.latents[0].sigma.value().values()) CHECK(s > 0.0);
    }
    SUBCASE("kappa = mu + sigma * eps") {
        const std::string p = "segmentor.m0.decoder.cig4.";
        set_value(ps, p + "mu0.weight", 0.0);
        set_value(ps, p + "mu0.bias", 1.0);
        set_value(ps, p + "sigma0.weight", 0.0);
        set_value(ps, p + "sigma0.bias", std::log(std::expm1(1.0 - kSigmaFloor)));
        auto out = cig(enc0.skips[1], msgs, NoiseMode::fixed(2.0), 0, false);
        for (double v : out.latents[0].kappa.value().values()) CHECK(v == doctest::Approx(3.0).epsilon(1e-12));
    }
    SUBCASE("supplied noise") {
        std::vector<Tensor<double>> zero{Tensor<double>(msgs[0].shape(), 0.0)};
        auto out = cig(enc0.skips[1], msgs, NoiseMode::fixed(5.0), 0, false, &zero);
        CHECK(out.latents[0].kappa.value() == out.latents[0].mu.value());
        std::vector<Tensor<double>> bad{Tensor<double>({1, 1, 3, 3})};
        CHECK_THROWS_AS(cig(enc0.skips[1], msgs, NoiseMode::mean(), 0, false, &bad), std::domain_error);
    }
    SUBCASE("severed message") {
        auto base = cig(enc0.skips[1], msgs, NoiseMode::mean(), 0, false);
        net->segs[0]->cig(4).sever(0);
        auto cut = net->segs[0]->cig(4)(enc0.skips[1], msgs, NoiseMode::mean(), 0, false);
        CHECK(cut.complementary.value() == enc0.skips[1].value());
        CHECK_FALSE(base.complementary.value() == cut.complementary.value());
    }
}

TEST_CASE("reparameterization gradient through the gate") {
    auto a = arch(16, 1, 1, 2);
    auto net = make_network(a, 8);
    auto enc0 = net->segs[0]->encode(random_patch<double>(a, 50), false);
    auto enc1 = net->segs[1]->encode(random_patch<double>(a, 51), false);
    auto out = net->segs[0]->cig(4)(enc0.skips[1], {enc1.messages.stages[0]}, NoiseMode::seeded(3), 0, false);
    const auto& lat = out.latents[0];
    // Finite differences of kappa = mu + sigma * eps at the sampled point.
    const double h = 1e-6;
    for (int64_t i = 0; i < lat.mu.value().numel(); i += 7) {
        const double m = lat.mu.value()[i], s = lat.sigma.value()[i], e = lat.eps[i];
        const double dmu = ((m + h + s * e) - (m - h + s * e)) / (2 * h);
        const double dsig = ((m + (s + h) * e) - (m + (s - h) * e)) / (2 * h);
        CHECK(std::abs(dmu - 1.0) <= 1e-4);
        CHECK(std::abs(dsig - e) <= 1e-4 * std::max(1.0, std::abs(e)));
    }
    ag::sum(lat.kappa).backward();
    for (int64_t i = 0; i < lat.mu.value().numel(); ++i) {
        CHECK(lat.mu.grad()[i] == 1.0);
        CHECK(lat.sigma.grad()[i] == doctest::Approx(lat.eps[i]).epsilon(1e-12));
    }
}

TEST_CASE("determinism under fixed noise") {
    auto a = arch(16, 2, 1, 3);
    auto run = [&] {
        auto net = make_network(a, 9);
        auto e1 = net->segs[1]->encode(random_patch<double>(a, 61), false);
        return net->segs[0]->forward(random_patch<double>(a, 60), {&e1.messages}, NoiseMode::fixed(0.0), false)
            .logits.value();
    };
    CHECK(run() == run());
    auto net = make_network(a, 9);
    auto e1 = net->segs[1]->encode(random_patch<double>(a, 61), false);
    auto s1 = net->segs[0]->forward(random_patch<double>(a, 60), {&e1.messages}, NoiseMode::seeded(4), false);
    auto s2 = net->segs[0]->forward(random_patch<double>(a, 60), {&e1.messages}, NoiseMode::seeded(4), false);
    CHECK(s1.logits.value() == s2.logits.value());
    auto s3 = net->segs[0]->forward(random_patch<double>(a, 60), {&e1.messages}, NoiseMode::seeded(5), false);
    CHECK_FALSE(s1.logits.value() == s3.logits.value());
}

TEST_CASE("batch norm variant and parameter naming") {
    auto a = arch(16, 2, 1, 2);
    a.norm_kind = NormKind::batch;
    auto net = make_network(a, 10);
    CHECK(net->params.buffers().count("segmentor.m0.encoder.down1.norm.running_mean") == 1);
    CHECK(net->params.contains("segmentor.m1.decoder.cig4.mu0.weight"));
    CHECK(net->params.contains("segmentor.m1.decoder.up2.transpose.weight"));
    auto e1 = net->segs[1]->encode(random_patch<double>(a, 70, 2), true);
    auto out = net->segs[0]->forward(random_patch<double>(a, 71, 2), {&e1.messages}, NoiseMode::mean(), true);
    CHECK(out.logits.shape() == Shape{2, 2, 16, 16});
    CHECK((*net->params.buffers().at("segmentor.m0.encoder.down1.norm.running_mean"))[0] != 0.0);
    CHECK_THROWS_AS(net->params.add("segmentor.m0.output.weight", Tensor<double>({1})), std::logic_error);
}
