#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a node in a dynamically built graph. Every op records
// a backward closure when any input requires a gradient and gradient
// recording is enabled. Gradients accumulate into every node that requires
// one, including intermediates, so callers can read d(loss)/d(activation)
// after backward() (Grad-CAM relies on this).

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ciml/tensor.hpp"

namespace ciml::ag {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Tensor<T>& grad_buffer() {
        if (!has_grad) {
            grad = Tensor<T>(value.shape());
            has_grad = true;
        }
        return grad;
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var constant(Tensor<T> value);
    static Var parameter(Tensor<T> value);

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_->has_grad; }
    const Tensor<T>& grad() const { return node_->grad; }
    void zero_grad() {
        node_->grad = Tensor<T>();
        node_->has_grad = false;
    }
    // Scalar value of a single-element var.
    T item() const;

    // Seeds d(self)/d(self) = 1; self must hold exactly one element.
    void backward() const;

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// Disables graph recording for the lifetime of the guard (inference).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// While alive, detach() records its input values in call order; after replay()
// each later detach() returns the recorded value at the same position instead.
// Holds detached inputs fixed for finite-difference checks.
class DetachFreezer {
public:
    DetachFreezer();
    ~DetachFreezer();
    DetachFreezer(const DetachFreezer&) = delete;
    DetachFreezer& operator=(const DetachFreezer&) = delete;

    // Rewinds to the first recorded value and switches to replay.
    void replay();
    size_t recorded() const { return values_.size(); }

    template <typename T>
    Tensor<T> pass(const Tensor<T>& value);

private:
    std::vector<std::shared_ptr<void>> values_;
    size_t cursor_ = 0;
    bool replaying_ = false;
    DetachFreezer* previous_;
};

// Convolution geometry; the same kernel, stride and padding apply on every
// spatial axis. Inputs are [N, C, H, W] (dims = 2) or [N, C, D, H, W] (dims = 3).
struct ConvSpec {
    int dims = 3;
    int kernel = 3;
    int stride = 1;
    int padding = 1;
    int output_padding = 0;  // transposed convolution only
};

Shape conv_output_shape(const Shape& input, int64_t out_channels, const ConvSpec& spec);
Shape conv_transpose_output_shape(const Shape& input, int64_t out_channels, const ConvSpec& spec);

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
// b has a's shape, or b is [N, 1, spatial...] and is broadcast over a's channels.
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> leaky_relu(const Var<T>& a, T negative_slope);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> softplus(const Var<T>& a);
template <typename T> Var<T> add_scalar(const Var<T>& a, T value);
template <typename T> Var<T> detach(const Var<T>& a);
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
template <typename T> Var<T> concat_channels(const std::vector<Var<T>>& parts);
template <typename T> Var<T> channel_mean(const Var<T>& a);
// Channels [start, start + count) of a [N, C, spatial...] tensor.
template <typename T> Var<T> slice_channels(const Var<T>& a, int64_t start, int64_t count);

// kappa = mu + sigma * eps, eps held constant.
template <typename T> Var<T> reparameterize(const Var<T>& mu, const Var<T>& sigma, const Tensor<T>& eps);
// Mean over elements of KL(N(mu, sigma^2) || N(0, 1)).
template <typename T> Var<T> gaussian_kl_mean(const Var<T>& mu, const Var<T>& sigma);

// Mean voxelwise softmax cross-entropy; logits [N, O, spatial], labels [N, spatial].
template <typename T> Var<T> softmax_cross_entropy(const Var<T>& logits, const Tensor<int32_t>& labels);
// 1 - mean over classes 1..O-1 of the smoothed soft Dice computed over the whole batch.
template <typename T> Var<T> soft_dice_loss(const Var<T>& logits, const Tensor<int32_t>& labels, T smooth);
// Sum of channel `cls` over voxels where mask != 0; logits [N, O, spatial], mask [N, spatial].
template <typename T> Var<T> masked_class_sum(const Var<T>& logits, int64_t cls, const Tensor<uint8_t>& mask);

// weight [Cout, Cin, k...], bias [Cout] (may be undefined).
template <typename T> Var<T> conv(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvSpec& spec);
// weight [Cin, Cout, k...], bias [Cout] (may be undefined).
template <typename T> Var<T> conv_transpose(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvSpec& spec);

template <typename T> Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum, T eps);

}  // namespace ciml::ag
