#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"

using namespace ciml;
using namespace ciml::ag;
using testutil::max_grad_error;
using testutil::random_tensor;

namespace {

// Random linear functional of a tensor so every output element gets a distinct weight.
Var<double> project(const Var<double>& v, uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    return sum(mul(v, Var<double>::constant(random_tensor(v.shape(), rng))));
}

}  // namespace

TEST_CASE("tensor basics") {
    Tensor<float> t({2, 3, 4, 5}, 1.5f);
    CHECK(t.numel() == 120);
    CHECK(t.spatial_numel() == 20);
    CHECK(t.spatial_shape() == Shape{4, 5});
    CHECK(t.dim(-1) == 5);
    CHECK(shape_str(t.shape()) == "[2x3x4x5]");
    CHECK_THROWS_AS(t.reshape({7}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), std::invalid_argument);
    auto d = t.cast<double>();
    CHECK(d[7] == 1.5);
}

TEST_CASE("elementwise ops backprop") {
    std::mt19937_64 rng(1);
    Shape s{2, 3, 4};
    auto a = random_tensor(s, rng), b = random_tensor(s, rng, 0.5, 2.0);
    CHECK(max_grad_error([](auto& v) { return project(add(v[0], v[1])); }, {a, b}) < 1e-6);
    CHECK(max_grad_error([](auto& v) { return project(sub(v[0], v[1])); }, {a, b}) < 1e-6);
    CHECK(max_grad_error([](auto& v) { return project(mul(v[0], v[1])); }, {a, b}) < 1e-6);
    CHECK(max_grad_error([](auto& v) { return project(scale(v[0], 2.5)); }, {a}) < 1e-6);
    CHECK(max_grad_error([](auto& v) { return project(leaky_relu(v[0], 0.01)); }, {a}) < 1e-6);
    CHECK(max_grad_error([](auto& v) { return project(sigmoid(v[0])); }, {a}) < 1e-6);
    CHECK(max_grad_error([](auto& v) { return project(softplus(v[0])); }, {a}) < 1e-6);
    CHECK(max_grad_error([](auto& v) { return project(add_scalar(v[0], 3.0)); }, {a}) < 1e-6);
    CHECK(max_grad_error([](auto& v) { return mean(v[0]); }, {a}) < 1e-6);
}

TEST_CASE("channel broadcast multiply") {
    std::mt19937_64 rng(2);
    auto a = random_tensor({2, 3, 5}, rng), g = random_tensor({2, 1, 5}, rng);
    CHECK(max_grad_error([](auto& v) { return project(mul(v[0], v[1])); }, {a, g}) < 1e-6);
    auto out = mul(Var<double>::constant(a), Var<double>::constant(g));
    CHECK(out.value()[1 * 5 + 3] == doctest::Approx(a[1 * 5 + 3] * g[3]));
    CHECK_THROWS_AS(mul(Var<double>::constant(a), Var<double>::constant(random_tensor({2, 2, 5}, rng))),
                    std::domain_error);
}

TEST_CASE("structural ops") {
    std::mt19937_64 rng(3);
    auto a = random_tensor({2, 2, 3}, rng), b = random_tensor({2, 3, 3}, rng);
    CHECK(max_grad_error([](auto& v) { return project(concat_channels<double>({v[0], v[1]})); }, {a, b}) < 1e-6);
    CHECK(max_grad_error([](auto& v) { return project(channel_mean(v[0])); }, {b}) < 1e-6);
    CHECK(max_grad_error([](auto& v) { return project(slice_channels(v[0], 1, 2)); }, {b}) < 1e-6);
    auto c = concat_channels<double>({Var<double>::constant(a), Var<double>::constant(b)});
    CHECK(c.shape() == Shape{2, 5, 3});
    CHECK(c.value()[(1 * 5 + 2) * 3 + 1] == b[(1 * 3 + 0) * 3 + 1]);

    auto p = Var<double>::parameter(a);
    auto d = detach(p);
    CHECK_FALSE(d.requires_grad());
}

TEST_CASE("reparameterization and KL") {
    std::mt19937_64 rng(4);
    Shape s{1, 2, 3};
    auto mu = random_tensor(s, rng), sigma = random_tensor(s, rng, 0.3, 2.0), eps = random_tensor(s, rng);
    CHECK(max_grad_error([&](auto& v) { return project(reparameterize(v[0], v[1], eps)); }, {mu, sigma}) < 1e-6);
    CHECK(max_grad_error([](auto& v) { return gaussian_kl_mean(v[0], v[1]); }, {mu, sigma}) < 1e-6);

    // dkappa/dmu = 1 and dkappa/dsigma = eps elementwise.
    auto m = Var<double>::parameter(mu), sg = Var<double>::parameter(sigma);
    sum(reparameterize(m, sg, eps)).backward();
    for (int64_t i = 0; i < mu.numel(); ++i) {
        CHECK(m.grad()[i] == 1.0);
        CHECK(sg.grad()[i] == doctest::Approx(eps[i]));
    }

    auto zero = Var<double>::constant(Tensor<double>(s, 0.0)), one = Var<double>::constant(Tensor<double>(s, 1.0));
    CHECK(gaussian_kl_mean(zero, one).item() == 0.0);
    auto two = Var<double>::constant(Tensor<double>(s, 2.0));
    CHECK(gaussian_kl_mean(two, one).item() == doctest::Approx(2.0).epsilon(1e-14));
    auto e = Var<double>::constant(Tensor<double>(s, std::exp(1.0)));
    // 0.5 * (e^2 - ln e^2 - 1) = 0.5 * (e^2 - 3)
    CHECK(gaussian_kl_mean(zero, e).item() == doctest::Approx(2.1945280494653248).epsilon(1e-12));
    CHECK_THROWS_AS(gaussian_kl_mean(zero, zero), std::domain_error);
}

TEST_CASE("segmentation losses") {
    std::mt19937_64 rng(5);
    auto logits = random_tensor({2, 3, 4}, rng, -2, 2);
    Tensor<int32_t> labels({2, 4}, std::vector<int32_t>{0, 1, 2, 1, 2, 2, 0, 1});
    CHECK(max_grad_error([&](auto& v) { return softmax_cross_entropy(v[0], labels); }, {logits}) < 1e-6);
    CHECK(max_grad_error([&](auto& v) { return soft_dice_loss(v[0], labels, 1e-5); }, {logits}) < 1e-6);

    Tensor<uint8_t> mask({2, 4}, std::vector<uint8_t>{1, 0, 1, 1, 0, 0, 1, 0});
    CHECK(max_grad_error([&](auto& v) { return masked_class_sum(v[0], 1, mask); }, {logits}) < 1e-6);

    // Uniform logits over two classes give ln 2 per voxel.
    Tensor<int32_t> two({1, 2}, std::vector<int32_t>{0, 1});
    auto uniform = Var<double>::constant(Tensor<double>({1, 2, 2}, 0.0));
    CHECK(softmax_cross_entropy(uniform, two).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));

    // Two voxels, logits (1, 0) with labels (0, 1): CE = 0.5 * (log(1+e^-1) + log(1+e)).
    auto toy = Var<double>::constant(Tensor<double>({1, 2, 2}, std::vector<double>{1, 1, 0, 0}));
    CHECK(softmax_cross_entropy(toy, two).item() == doctest::Approx(0.8132616875182228).epsilon(1e-12));

    // Hard half-overlap: prediction {0,1}, target {1,2} out of 4 voxels -> Dice 0.5.
    Tensor<int32_t> target({1, 4}, std::vector<int32_t>{0, 1, 1, 0});
    double big = 60;
    auto hard = Var<double>::constant(Tensor<double>({1, 2, 4}, std::vector<double>{0, 0, big, big, big, big, 0, 0}));
    CHECK(soft_dice_loss(hard, target, 1e-5).item() == doctest::Approx(0.5).epsilon(1e-5));

    Tensor<int32_t> bad({1, 2}, std::vector<int32_t>{0, 2});
    CHECK_THROWS_AS(softmax_cross_entropy(uniform, bad), std::domain_error);
}

TEST_CASE("convolution and transpose convolution") {
    std::mt19937_64 rng(6);
    for (int dims : {2, 3}) {
        Shape xs = dims == 2 ? Shape{2, 2, 4, 4} : Shape{1, 2, 4, 4, 4};
        Shape ws = dims == 2 ? Shape{3, 2, 3, 3} : Shape{3, 2, 3, 3, 3};
        auto x = random_tensor(xs, rng), w = random_tensor(ws, rng), b = random_tensor({3}, rng);
        for (int stride : {1, 2}) {
            ConvSpec spec{dims, 3, stride, 1, 0};
            CHECK(max_grad_error([&](auto& v) { return project(conv(v[0], v[1], v[2], spec)); }, {x, w, b}) < 1e-5);
        }
        ConvSpec pw{dims, 1, 1, 0, 0};
        Shape w1 = dims == 2 ? Shape{3, 2, 1, 1} : Shape{3, 2, 1, 1, 1};
        auto w1t = random_tensor(w1, rng);
        CHECK(max_grad_error([&](auto& v) { return project(conv(v[0], v[1], Var<double>(), pw)); }, {x, w1t}) < 1e-5);

        ConvSpec up{dims, 3, 2, 1, 1};
        Shape wt = dims == 2 ? Shape{2, 3, 3, 3} : Shape{2, 3, 3, 3, 3};
        auto wtt = random_tensor(wt, rng);
        CHECK(max_grad_error([&](auto& v) { return project(conv_transpose(v[0], v[1], v[2], up)); }, {x, wtt, b}) <
              1e-5);
        auto y = conv_transpose(Var<double>::constant(x), Var<double>::constant(wtt), Var<double>::constant(b), up);
        CHECK(y.shape() == (dims == 2 ? Shape{2, 3, 8, 8} : Shape{1, 3, 8, 8, 8}));
    }
}

TEST_CASE("convolution matches direct summation") {
    // 1 channel, 3x3 image, 3x3 kernel, padding 1: centre output is the full dot product.
    Tensor<double> x({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor<double> w({1, 1, 3, 3}, std::vector<double>{1, 0, -1, 2, 0, -2, 1, 0, -1});
    auto y = conv(Var<double>::constant(x), Var<double>::constant(w), Var<double>(), ConvSpec{2, 3, 1, 1, 0});
    CHECK(y.value()[4] == -8.0);
    // Top-left output sees rows/cols {0,1} only: w[4]*1 + w[5]*2 + w[7]*4 + w[8]*5 = -4 - 5 = -9.
    CHECK(y.value()[0] == -9.0);
}

TEST_CASE("normalization") {
    std::mt19937_64 rng(7);
    auto x = random_tensor({2, 3, 2, 3}, rng), g = random_tensor({3}, rng, 0.5, 1.5), b = random_tensor({3}, rng);
    CHECK(max_grad_error([](auto& v) { return project(instance_norm(v[0], v[1], v[2], 1e-5)); }, {x, g, b}) < 1e-5);
    Tensor<double> rm({3}), rv({3}, 1.0);
    CHECK(max_grad_error(
              [&](auto& v) {
                  Tensor<double> m({3}), s({3}, 1.0);
                  return project(batch_norm(v[0], v[1], v[2], m, s, true, 0.1, 1e-5));
              },
              {x, g, b}) < 1e-5);
    batch_norm(Var<double>::constant(x), Var<double>::constant(g), Var<double>::constant(b), rm, rv, true, 0.1, 1e-5);
    CHECK(rm[0] != 0.0);
    CHECK(max_grad_error([&](auto& v) { return project(batch_norm(v[0], v[1], v[2], rm, rv, false, 0.1, 1e-5)); },
                         {x, g, b}) < 1e-5);

    auto y = instance_norm(Var<double>::constant(x), Var<double>::constant(Tensor<double>({3}, 1.0)),
                           Var<double>::constant(Tensor<double>({3}, 0.0)), 1e-12);
    double m = 0;
    for (int i = 0; i < 6; ++i) m += y.value()[i];
    CHECK(std::abs(m) < 1e-12);
}

TEST_CASE("no-grad guard and intermediate gradients") {
    auto p = Var<double>::parameter(Tensor<double>({1, 1, 2}, 1.0));
    {
        NoGradGuard guard;
        auto q = scale(p, 2.0);
        CHECK_FALSE(q.requires_grad());
    }
    CHECK(grad_enabled());
    auto h = scale(p, 3.0);
    sum(mul(h, h)).backward();
    CHECK(h.has_grad());
    CHECK(h.grad()[0] == 6.0);
    CHECK(p.grad()[0] == 18.0);
}
