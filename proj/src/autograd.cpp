#include "ciml/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace ciml::ag {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
bool any_requires_grad(std::initializer_list<const Var<T>*> inputs) {
    if (!g_grad_enabled) return false;
    for (const Var<T>* v : inputs) {
        if (v->defined() && v->requires_grad()) return true;
    }
    return false;
}

template <typename T>
Var<T> make_result(Tensor<T> value, bool track, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    if (track) {
        node->requires_grad = true;
        for (auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::move(fn);
    }
    return Var<T>(node);
}

// Accumulate into an input's gradient only when that input wants one.
template <typename T>
Tensor<T>* grad_of(const std::shared_ptr<Node<T>>& n) {
    if (!n || !n->requires_grad) return nullptr;
    return &n->grad_buffer();
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw std::domain_error(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

// Geometry of one convolution, padded out to three spatial axes.
struct Geom {
    int64_t in[3];
    int64_t out[3];
    int64_t k[3];
    int64_t s[3];
    int64_t p[3];
    int64_t kernel_volume() const { return k[0] * k[1] * k[2]; }
    int64_t in_volume() const { return in[0] * in[1] * in[2]; }
    int64_t out_volume() const { return out[0] * out[1] * out[2]; }
};

Geom make_geom(const Shape& image_spatial, const Shape& out_spatial, const ConvSpec& spec) {
    Geom g{};
    const int pad_axes = 3 - spec.dims;
    for (int a = 0; a < 3; ++a) {
        if (a < pad_axes) {
            g.in[a] = g.out[a] = g.k[a] = g.s[a] = 1;
            g.p[a] = 0;
        } else {
            g.in[a] = image_spatial[static_cast<size_t>(a - pad_axes)];
            g.out[a] = out_spatial[static_cast<size_t>(a - pad_axes)];
            g.k[a] = spec.kernel;
            g.s[a] = spec.stride;
            g.p[a] = spec.padding;
        }
    }
    return g;
}

// image [C, in volume] -> cols [C * kernel volume, out volume]
template <typename T>
void im2col(const T* image, int64_t channels, const Geom& g, T* cols) {
    const int64_t ov = g.out_volume();
    int64_t row = 0;
    for (int64_t c = 0; c < channels; ++c) {
        const T* img = image + c * g.in_volume();
        for (int64_t kz = 0; kz < g.k[0]; ++kz) {
            for (int64_t ky = 0; ky < g.k[1]; ++ky) {
                for (int64_t kx = 0; kx < g.k[2]; ++kx, ++row) {
                    T* dst = cols + row * ov;
                    for (int64_t oz = 0; oz < g.out[0]; ++oz) {
                        const int64_t iz = oz * g.s[0] - g.p[0] + kz;
                        for (int64_t oy = 0; oy < g.out[1]; ++oy) {
                            const int64_t iy = oy * g.s[1] - g.p[1] + ky;
                            T* d = dst + (oz * g.out[1] + oy) * g.out[2];
                            if (iz < 0 || iz >= g.in[0] || iy < 0 || iy >= g.in[1]) {
                                std::fill(d, d + g.out[2], T(0));
                                continue;
                            }
                            const T* src = img + (iz * g.in[1] + iy) * g.in[2];
                            for (int64_t ox = 0; ox < g.out[2]; ++ox) {
                                const int64_t ix = ox * g.s[2] - g.p[2] + kx;
                                d[ox] = (ix >= 0 && ix < g.in[2]) ? src[ix] : T(0);
                            }
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add cols back into image.
template <typename T>
void col2im(const T* cols, int64_t channels, const Geom& g, T* image) {
    const int64_t ov = g.out_volume();
    int64_t row = 0;
    for (int64_t c = 0; c < channels; ++c) {
        T* img = image + c * g.in_volume();
        for (int64_t kz = 0; kz < g.k[0]; ++kz) {
            for (int64_t ky = 0; ky < g.k[1]; ++ky) {
                for (int64_t kx = 0; kx < g.k[2]; ++kx, ++row) {
                    const T* src = cols + row * ov;
                    for (int64_t oz = 0; oz < g.out[0]; ++oz) {
                        const int64_t iz = oz * g.s[0] - g.p[0] + kz;
                        if (iz < 0 || iz >= g.in[0]) continue;
                        for (int64_t oy = 0; oy < g.out[1]; ++oy) {
                            const int64_t iy = oy * g.s[1] - g.p[1] + ky;
                            if (iy < 0 || iy >= g.in[1]) continue;
                            const T* s = src + (oz * g.out[1] + oy) * g.out[2];
                            T* dst = img + (iz * g.in[1] + iy) * g.in[2];
                            for (int64_t ox = 0; ox < g.out[2]; ++ox) {
                                const int64_t ix = ox * g.s[2] - g.p[2] + kx;
                                if (ix >= 0 && ix < g.in[2]) dst[ix] += s[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

bool is_pointwise(const ConvSpec& spec) { return spec.kernel == 1 && spec.stride == 1 && spec.padding == 0; }

void check_image_rank(const Shape& s, int dims, const char* op) {
    if (static_cast<int>(s.size()) != dims + 2) {
        throw std::domain_error(std::string(op) + ": expected rank " + std::to_string(dims + 2) + " input, got " +
                                shape_str(s));
    }
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var<T>(node);
}

template <typename T>
Var<T> Var<T>::parameter(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var<T>(node);
}

template <typename T>
T Var<T>::item() const {
    if (node_->value.numel() != 1) {
        throw std::domain_error("item() on non-scalar var of shape " + shape_str(node_->value.shape()));
    }
    return node_->value[0];
}

template <typename T>
void Var<T>::backward() const {
    if (node_->value.numel() != 1) throw std::domain_error("backward() requires a scalar root");
    if (!node_->requires_grad) throw std::domain_error("backward() on a var that does not require grad");

    // Iterative post-order DFS gives a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node<T>* child = n->inputs[next++].get();
            if (child && child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && n->has_grad) n->backward(*n);
    }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return make_result<T>(std::move(out), any_requires_grad<T>({&a, &b}), {a, b}, [](Node<T>& self) {
        for (auto& in : self.inputs) {
            if (auto* g = grad_of(in)) {
                for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    return make_result<T>(std::move(out), any_requires_grad<T>({&a, &b}), {a, b}, [](Node<T>& self) {
        if (auto* g = grad_of(self.inputs[0])) {
            for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
        }
        if (auto* g = grad_of(self.inputs[1])) {
            for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const bool same = sa == sb;
    const bool channel_broadcast = !same && sa.size() >= 2 && sb.size() == sa.size() && sb[0] == sa[0] &&
                                   sb[1] == 1 && std::equal(sa.begin() + 2, sa.end(), sb.begin() + 2);
    if (!same && !channel_broadcast) {
        throw std::domain_error("mul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    }
    const int64_t n = same ? 1 : sa[0];
    const int64_t c = same ? 1 : sa[1];
    const int64_t s = same ? a.value().numel() : a.value().spatial_numel();
    Tensor<T> out(sa);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j)
            for (int64_t k = 0; k < s; ++k) {
                const int64_t ia = (i * c + j) * s + k;
                const int64_t ib = same ? ia : i * s + k;
                out[ia] = a.value()[ia] * b.value()[ib];
            }
    return make_result<T>(std::move(out), any_requires_grad<T>({&a, &b}), {a, b}, [=](Node<T>& self) {
        const Tensor<T>& av = self.inputs[0]->value;
        const Tensor<T>& bv = self.inputs[1]->value;
        Tensor<T>* ga = grad_of(self.inputs[0]);
        Tensor<T>* gb = grad_of(self.inputs[1]);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < c; ++j)
                for (int64_t k = 0; k < s; ++k) {
                    const int64_t ia = (i * c + j) * s + k;
                    const int64_t ib = same ? ia : i * s + k;
                    if (ga) (*ga)[ia] += self.grad[ia] * bv[ib];
                    if (gb) (*gb)[ib] += self.grad[ia] * av[ia];
                }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v *= factor;
    return make_result<T>(std::move(out), any_requires_grad<T>({&a}), {a}, [factor](Node<T>& self) {
        if (auto* g = grad_of(self.inputs[0])) {
            for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * factor;
        }
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T value) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v += value;
    return make_result<T>(std::move(out), any_requires_grad<T>({&a}), {a}, [](Node<T>& self) {
        if (auto* g = grad_of(self.inputs[0])) {
            for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T negative_slope) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v = v > T(0) ? v : v * negative_slope;
    return make_result<T>(std::move(out), any_requires_grad<T>({&a}), {a}, [negative_slope](Node<T>& self) {
        if (auto* g = grad_of(self.inputs[0])) {
            const Tensor<T>& x = self.inputs[0]->value;
            for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * (x[i] > T(0) ? T(1) : negative_slope);
        }
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v = T(1) / (T(1) + std::exp(-v));
    return make_result<T>(std::move(out), any_requires_grad<T>({&a}), {a}, [](Node<T>& self) {
        if (auto* g = grad_of(self.inputs[0])) {
            for (int64_t i = 0; i < g->numel(); ++i) {
                const T y = self.value[i];
                (*g)[i] += self.grad[i] * y * (T(1) - y);
            }
        }
    });
}

template <typename T>
Var<T> softplus(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v = v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    return make_result<T>(std::move(out), any_requires_grad<T>({&a}), {a}, [](Node<T>& self) {
        if (auto* g = grad_of(self.inputs[0])) {
            const Tensor<T>& x = self.inputs[0]->value;
            for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] / (T(1) + std::exp(-x[i]));
        }
    });
}

namespace {
thread_local DetachFreezer* active_freezer = nullptr;
}

DetachFreezer::DetachFreezer() : previous_(active_freezer) { active_freezer = this; }
DetachFreezer::~DetachFreezer() { active_freezer = previous_; }

void DetachFreezer::replay() {
    replaying_ = true;
    cursor_ = 0;
}

template <typename T>
Tensor<T> DetachFreezer::pass(const Tensor<T>& value) {
    if (!replaying_) {
        values_.push_back(std::make_shared<Tensor<T>>(value));
        return value;
    }
    if (cursor_ >= values_.size()) throw std::logic_error("detach replay: more detach calls than recorded");
    const auto& stored = *std::static_pointer_cast<Tensor<T>>(values_[cursor_++]);
    if (stored.shape() != value.shape()) throw std::logic_error("detach replay: shape changed between forwards");
    return stored;
}

template <typename T>
Var<T> detach(const Var<T>& a) {
    if (active_freezer) return Var<T>::constant(active_freezer->pass(a.value()));
    return Var<T>::constant(a.value());
}

template Tensor<float> DetachFreezer::pass(const Tensor<float>&);
template Tensor<double> DetachFreezer::pass(const Tensor<double>&);

template <typename T>
Var<T> sum(const Var<T>& a) {
    T total = 0;
    for (T v : a.value().values()) total += v;
    return make_result<T>(Tensor<T>(Shape{}, total), any_requires_grad<T>({&a}), {a}, [](Node<T>& self) {
        if (auto* g = grad_of(self.inputs[0])) {
            for (auto& v : g->values()) v += self.grad[0];
        }
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.value().numel()));
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::domain_error("concat_channels: no inputs");
    const Shape& first = parts[0].shape();
    if (first.size() < 2) throw std::domain_error("concat_channels: rank < 2");
    Shape out_shape = first;
    out_shape[1] = 0;
    bool track = false;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size() || s[0] != first[0] || !std::equal(s.begin() + 2, s.end(), first.begin() + 2)) {
            throw std::domain_error("concat_channels: incompatible shape " + shape_str(s) + " vs " + shape_str(first));
        }
        out_shape[1] += s[1];
        track = track || (grad_enabled() && p.requires_grad());
    }
    const int64_t n = first[0];
    const int64_t sp = parts[0].value().spatial_numel();
    Tensor<T> out(out_shape);
    int64_t offset = 0;
    for (const auto& p : parts) {
        const int64_t c = p.shape()[1];
        for (int64_t i = 0; i < n; ++i) {
            std::copy_n(p.value().data() + i * c * sp, c * sp, out.data() + (i * out_shape[1] + offset) * sp);
        }
        offset += c;
    }
    const int64_t total_c = out_shape[1];
    return make_result<T>(std::move(out), track, parts, [n, sp, total_c](Node<T>& self) {
        int64_t off = 0;
        for (auto& in : self.inputs) {
            const int64_t c = in->value.shape()[1];
            if (auto* g = grad_of(in)) {
                for (int64_t i = 0; i < n; ++i) {
                    const T* src = self.grad.data() + (i * total_c + off) * sp;
                    T* dst = g->data() + i * c * sp;
                    for (int64_t k = 0; k < c * sp; ++k) dst[k] += src[k];
                }
            }
            off += c;
        }
    });
}

template <typename T>
Var<T> channel_mean(const Var<T>& a) {
    const Shape& s = a.shape();
    if (s.size() < 2) throw std::domain_error("channel_mean: rank < 2");
    const int64_t n = s[0], c = s[1], sp = a.value().spatial_numel();
    Shape out_shape = s;
    out_shape[1] = 1;
    Tensor<T> out(out_shape);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j)
            for (int64_t k = 0; k < sp; ++k) out[i * sp + k] += a.value()[(i * c + j) * sp + k] / static_cast<T>(c);
    return make_result<T>(std::move(out), any_requires_grad<T>({&a}), {a}, [n, c, sp](Node<T>& self) {
        if (auto* g = grad_of(self.inputs[0])) {
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < c; ++j)
                    for (int64_t k = 0; k < sp; ++k) (*g)[(i * c + j) * sp + k] += self.grad[i * sp + k] / static_cast<T>(c);
        }
    });
}

template <typename T>
Var<T> slice_channels(const Var<T>& a, int64_t start, int64_t count) {
    const Shape& s = a.shape();
    if (s.size() < 2 || start < 0 || count <= 0 || start + count > s[1]) {
        throw std::domain_error("slice_channels: range out of bounds for " + shape_str(s));
    }
    const int64_t n = s[0], c = s[1], sp = a.value().spatial_numel();
    Shape out_shape = s;
    out_shape[1] = count;
    Tensor<T> out(out_shape);
    for (int64_t i = 0; i < n; ++i) {
        std::copy_n(a.value().data() + (i * c + start) * sp, count * sp, out.data() + i * count * sp);
    }
    return make_result<T>(std::move(out), any_requires_grad<T>({&a}), {a}, [n, c, sp, start, count](Node<T>& self) {
        if (auto* g = grad_of(self.inputs[0])) {
            for (int64_t i = 0; i < n; ++i) {
                const T* src = self.grad.data() + i * count * sp;
                T* dst = g->data() + (i * c + start) * sp;
                for (int64_t k = 0; k < count * sp; ++k) dst[k] += src[k];
            }
        }
    });
}

template <typename T>
Var<T> reparameterize(const Var<T>& mu, const Var<T>& sigma, const Tensor<T>& eps) {
    require_same_shape(mu.shape(), sigma.shape(), "reparameterize");
    require_same_shape(mu.shape(), eps.shape(), "reparameterize noise");
    Tensor<T> out(mu.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = mu.value()[i] + sigma.value()[i] * eps[i];
    return make_result<T>(std::move(out), any_requires_grad<T>({&mu, &sigma}), {mu, sigma}, [eps](Node<T>& self) {
        if (auto* g = grad_of(self.inputs[0])) {
            for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
        }
        if (auto* g = grad_of(self.inputs[1])) {
            for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * eps[i];
        }
    });
}

template <typename T>
Var<T> gaussian_kl_mean(const Var<T>& mu, const Var<T>& sigma) {
    require_same_shape(mu.shape(), sigma.shape(), "gaussian_kl_mean");
    const int64_t n = mu.value().numel();
    long double total = 0;
    for (int64_t i = 0; i < n; ++i) {
        const T m = mu.value()[i];
        const T s = sigma.value()[i];
        if (!(s > T(0))) throw std::domain_error("gaussian_kl_mean: sigma must be positive");
        total += 0.5L * (static_cast<long double>(m) * m + static_cast<long double>(s) * s -
                         2.0L * std::log(static_cast<long double>(s)) - 1.0L);
    }
    Tensor<T> out(Shape{}, static_cast<T>(total / static_cast<long double>(n)));
    return make_result<T>(std::move(out), any_requires_grad<T>({&mu, &sigma}), {mu, sigma}, [n](Node<T>& self) {
        const T g0 = self.grad[0] / static_cast<T>(n);
        if (auto* g = grad_of(self.inputs[0])) {
            const Tensor<T>& m = self.inputs[0]->value;
            for (int64_t i = 0; i < n; ++i) (*g)[i] += g0 * m[i];
        }
        if (auto* g = grad_of(self.inputs[1])) {
            const Tensor<T>& s = self.inputs[1]->value;
            for (int64_t i = 0; i < n; ++i) (*g)[i] += g0 * (s[i] - T(1) / s[i]);
        }
    });
}

namespace {

template <typename T>
void check_labels(const Shape& logits, const Tensor<int32_t>& labels, const char* op) {
    if (logits.size() < 3) throw std::domain_error(std::string(op) + ": logits must be [N, O, spatial...]");
    Shape expect{logits[0]};
    expect.insert(expect.end(), logits.begin() + 2, logits.end());
    if (labels.shape() != expect) {
        throw std::domain_error(std::string(op) + ": label shape " + shape_str(labels.shape()) +
                                " does not match logits " + shape_str(logits));
    }
    const int64_t classes = logits[1];
    for (int32_t v : labels.values()) {
        if (v < 0 || v >= classes) {
            throw std::domain_error(std::string(op) + ": class index " + std::to_string(v) + " >= " +
                                    std::to_string(classes) + " output channels");
        }
    }
}

// Softmax over channels for [N, O, S].
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
    const int64_t n = logits.dim(0), o = logits.dim(1), sp = logits.spatial_numel();
    Tensor<T> p(logits.shape());
    for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < sp; ++k) {
            T mx = logits[(i * o) * sp + k];
            for (int64_t c = 1; c < o; ++c) mx = std::max(mx, logits[(i * o + c) * sp + k]);
            T z = 0;
            for (int64_t c = 0; c < o; ++c) {
                const T e = std::exp(logits[(i * o + c) * sp + k] - mx);
                p[(i * o + c) * sp + k] = e;
                z += e;
            }
            for (int64_t c = 0; c < o; ++c) p[(i * o + c) * sp + k] /= z;
        }
    return p;
}

}  // namespace

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const Tensor<int32_t>& labels) {
    check_labels<T>(logits.shape(), labels, "softmax_cross_entropy");
    const Tensor<T>& x = logits.value();
    const int64_t n = x.dim(0), o = x.dim(1), sp = x.spatial_numel();
    Tensor<T> p = softmax_channels(x);
    long double total = 0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < sp; ++k) {
            const int64_t y = labels[i * sp + k];
            T mx = x[(i * o) * sp + k];
            for (int64_t c = 1; c < o; ++c) mx = std::max(mx, x[(i * o + c) * sp + k]);
            long double z = 0;
            for (int64_t c = 0; c < o; ++c) z += std::exp(static_cast<long double>(x[(i * o + c) * sp + k] - mx));
            total += std::log(z) - static_cast<long double>(x[(i * o + y) * sp + k] - mx);
        }
    const int64_t count = n * sp;
    Tensor<T> out(Shape{}, static_cast<T>(total / static_cast<long double>(count)));
    return make_result<T>(std::move(out), any_requires_grad<T>({&logits}), {logits},
                          [p = std::move(p), labels, n, o, sp, count](Node<T>& self) {
                              auto* g = grad_of(self.inputs[0]);
                              if (!g) return;
                              const T g0 = self.grad[0] / static_cast<T>(count);
                              for (int64_t i = 0; i < n; ++i)
                                  for (int64_t k = 0; k < sp; ++k) {
                                      const int64_t y = labels[i * sp + k];
                                      for (int64_t c = 0; c < o; ++c) {
                                          const int64_t idx = (i * o + c) * sp + k;
                                          (*g)[idx] += g0 * (p[idx] - (c == y ? T(1) : T(0)));
                                      }
                                  }
                          });
}

template <typename T>
Var<T> soft_dice_loss(const Var<T>& logits, const Tensor<int32_t>& labels, T smooth) {
    check_labels<T>(logits.shape(), labels, "soft_dice_loss");
    const Tensor<T>& x = logits.value();
    const int64_t n = x.dim(0), o = x.dim(1), sp = x.spatial_numel();
    if (o < 2) throw std::domain_error("soft_dice_loss: need at least one foreground class");
    Tensor<T> p = softmax_channels(x);
    std::vector<long double> inter(static_cast<size_t>(o), 0), psum(static_cast<size_t>(o), 0),
        gsum(static_cast<size_t>(o), 0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 1; c < o; ++c)
            for (int64_t k = 0; k < sp; ++k) {
                const T pv = p[(i * o + c) * sp + k];
                const bool gv = labels[i * sp + k] == c;
                psum[c] += pv;
                if (gv) {
                    inter[c] += pv;
                    gsum[c] += 1;
                }
            }
    long double dice_mean = 0;
    std::vector<T> dloss_dp_fg(static_cast<size_t>(o), 0), dloss_dp_bg(static_cast<size_t>(o), 0);
    const long double inv_fg = 1.0L / static_cast<long double>(o - 1);
    for (int64_t c = 1; c < o; ++c) {
        const long double num = 2 * inter[c] + smooth;
        const long double den = psum[c] + gsum[c] + smooth;
        dice_mean += num / den * inv_fg;
        // d dice_c / d p = (2 g den - num) / den^2, split by g in {0, 1}
        dloss_dp_fg[c] = static_cast<T>(-inv_fg * (2 * den - num) / (den * den));
        dloss_dp_bg[c] = static_cast<T>(-inv_fg * (-num) / (den * den));
    }
    Tensor<T> out(Shape{}, static_cast<T>(1.0L - dice_mean));
    return make_result<T>(
        std::move(out), any_requires_grad<T>({&logits}), {logits},
        [p = std::move(p), labels, n, o, sp, dloss_dp_fg, dloss_dp_bg](Node<T>& self) {
            auto* g = grad_of(self.inputs[0]);
            if (!g) return;
            const T g0 = self.grad[0];
            std::vector<T> dp(static_cast<size_t>(o));
            for (int64_t i = 0; i < n; ++i)
                for (int64_t k = 0; k < sp; ++k) {
                    const int32_t y = labels[i * sp + k];
                    T dot = 0;
                    dp[0] = 0;
                    for (int64_t c = 1; c < o; ++c) {
                        dp[c] = (y == c) ? dloss_dp_fg[c] : dloss_dp_bg[c];
                        dot += dp[c] * p[(i * o + c) * sp + k];
                    }
                    for (int64_t c = 0; c < o; ++c) {
                        const int64_t idx = (i * o + c) * sp + k;
                        (*g)[idx] += g0 * p[idx] * (dp[c] - dot);
                    }
                }
        });
}

template <typename T>
Var<T> masked_class_sum(const Var<T>& logits, int64_t cls, const Tensor<uint8_t>& mask) {
    const Tensor<T>& x = logits.value();
    if (x.rank() < 3 || cls < 0 || cls >= x.dim(1)) throw std::domain_error("masked_class_sum: bad class index");
    const int64_t n = x.dim(0), o = x.dim(1), sp = x.spatial_numel();
    if (mask.numel() != n * sp) throw std::domain_error("masked_class_sum: mask size mismatch");
    T total = 0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < sp; ++k)
            if (mask[i * sp + k]) total += x[(i * o + cls) * sp + k];
    return make_result<T>(Tensor<T>(Shape{}, total), any_requires_grad<T>({&logits}), {logits},
                          [mask, cls, n, o, sp](Node<T>& self) {
                              auto* g = grad_of(self.inputs[0]);
                              if (!g) return;
                              for (int64_t i = 0; i < n; ++i)
                                  for (int64_t k = 0; k < sp; ++k)
                                      if (mask[i * sp + k]) (*g)[(i * o + cls) * sp + k] += self.grad[0];
                          });
}

Shape conv_output_shape(const Shape& input, int64_t out_channels, const ConvSpec& spec) {
    check_image_rank(input, spec.dims, "conv");
    Shape out{input[0], out_channels};
    for (int a = 0; a < spec.dims; ++a) {
        const int64_t i = input[static_cast<size_t>(a + 2)];
        const int64_t o = (i + 2 * spec.padding - spec.kernel) / spec.stride + 1;
        if (o <= 0) throw std::domain_error("conv: input " + shape_str(input) + " too small for kernel");
        out.push_back(o);
    }
    return out;
}

Shape conv_transpose_output_shape(const Shape& input, int64_t out_channels, const ConvSpec& spec) {
    check_image_rank(input, spec.dims, "conv_transpose");
    Shape out{input[0], out_channels};
    for (int a = 0; a < spec.dims; ++a) {
        const int64_t i = input[static_cast<size_t>(a + 2)];
        out.push_back((i - 1) * spec.stride - 2 * spec.padding + spec.kernel + spec.output_padding);
    }
    return out;
}

template <typename T>
Var<T> conv(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvSpec& spec) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    check_image_rank(xs, spec.dims, "conv");
    if (static_cast<int>(ws.size()) != spec.dims + 2 || ws[1] != xs[1]) {
        throw std::domain_error("conv: weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
    }
    const int64_t n = xs[0], cin = xs[1], cout = ws[0];
    const Shape out_shape = conv_output_shape(xs, cout, spec);
    const Geom g = make_geom(Shape(xs.begin() + 2, xs.end()), Shape(out_shape.begin() + 2, out_shape.end()), spec);
    const int64_t kdim = cin * g.kernel_volume();
    const int64_t ov = g.out_volume();
    const bool pointwise = is_pointwise(spec);
    const bool track = any_requires_grad<T>({&x, &weight, &bias});

    Tensor<T> out(out_shape);
    std::vector<T> cols;
    // Without tracking one column buffer is reused across the batch.
    if (!pointwise) cols.resize(static_cast<size_t>((track ? n : 1) * kdim * ov));
    ConstMatMap<T> w(weight.value().data(), cout, kdim);
    for (int64_t i = 0; i < n; ++i) {
        const T* col_ptr;
        if (pointwise) {
            col_ptr = x.value().data() + i * cin * g.in_volume();
        } else {
            T* buf = cols.data() + (track ? i * kdim * ov : 0);
            im2col(x.value().data() + i * cin * g.in_volume(), cin, g, buf);
            col_ptr = buf;
        }
        MatMap<T> o(out.data() + i * cout * ov, cout, ov);
        o.noalias() = w * ConstMatMap<T>(col_ptr, kdim, ov);
        if (bias.defined()) {
            for (int64_t c = 0; c < cout; ++c) o.row(c).array() += bias.value()[c];
        }
    }
    if (!track) cols.clear();
    return make_result<T>(std::move(out), track, {x, weight, bias},
                          [cols = std::move(cols), g, n, cin, cout, kdim, ov, pointwise](Node<T>& self) {
                              const auto& xn = self.inputs[0];
                              const auto& wn = self.inputs[1];
                              const auto& bn = self.inputs[2];
                              Tensor<T>* gx = grad_of(xn);
                              Tensor<T>* gw = grad_of(wn);
                              Tensor<T>* gb = bn ? grad_of(bn) : nullptr;
                              ConstMatMap<T> w(wn->value.data(), cout, kdim);
                              std::vector<T> dcols;
                              if (gx && !pointwise) dcols.resize(static_cast<size_t>(kdim * ov));
                              for (int64_t i = 0; i < n; ++i) {
                                  ConstMatMap<T> dout(self.grad.data() + i * cout * ov, cout, ov);
                                  const T* col_ptr = pointwise ? xn->value.data() + i * cin * g.in_volume()
                                                               : cols.data() + i * kdim * ov;
                                  if (gw) {
                                      MatMap<T>(gw->data(), cout, kdim).noalias() +=
                                          dout * ConstMatMap<T>(col_ptr, kdim, ov).transpose();
                                  }
                                  if (gb) {
                                      for (int64_t c = 0; c < cout; ++c) (*gb)[c] += dout.row(c).sum();
                                  }
                                  if (gx) {
                                      if (pointwise) {
                                          MatMap<T>(gx->data() + i * cin * g.in_volume(), kdim, ov).noalias() +=
                                              w.transpose() * dout;
                                      } else {
                                          MatMap<T>(dcols.data(), kdim, ov).noalias() = w.transpose() * dout;
                                          col2im(dcols.data(), cin, g, gx->data() + i * cin * g.in_volume());
                                      }
                                  }
                              }
                          });
}

template <typename T>
Var<T> conv_transpose(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvSpec& spec) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    check_image_rank(xs, spec.dims, "conv_transpose");
    if (static_cast<int>(ws.size()) != spec.dims + 2 || ws[0] != xs[1]) {
        throw std::domain_error("conv_transpose: weight " + shape_str(ws) + " incompatible with input " +
                                shape_str(xs));
    }
    const int64_t n = xs[0], cin = xs[1], cout = ws[1];
    const Shape out_shape = conv_transpose_output_shape(xs, cout, spec);
    // The transposed conv is the adjoint of a conv from out_shape to xs.
    const Geom g = make_geom(Shape(out_shape.begin() + 2, out_shape.end()), Shape(xs.begin() + 2, xs.end()), spec);
    const int64_t kdim = cout * g.kernel_volume();
    const int64_t iv = g.out_volume();  // input volume of the transposed conv
    const int64_t ov = g.in_volume();
    const bool track = any_requires_grad<T>({&x, &weight, &bias});

    Tensor<T> out(out_shape);
    std::vector<T> cols(static_cast<size_t>(kdim * iv));
    ConstMatMap<T> w(weight.value().data(), cin, kdim);
    for (int64_t i = 0; i < n; ++i) {
        MatMap<T>(cols.data(), kdim, iv).noalias() =
            w.transpose() * ConstMatMap<T>(x.value().data() + i * cin * iv, cin, iv);
        col2im(cols.data(), cout, g, out.data() + i * cout * ov);
        if (bias.defined()) {
            for (int64_t c = 0; c < cout; ++c) {
                T* o = out.data() + (i * cout + c) * ov;
                for (int64_t k = 0; k < ov; ++k) o[k] += bias.value()[c];
            }
        }
    }
    return make_result<T>(std::move(out), track, {x, weight, bias}, [g, n, cin, cout, kdim, iv, ov](Node<T>& self) {
        const auto& xn = self.inputs[0];
        const auto& wn = self.inputs[1];
        const auto& bn = self.inputs[2];
        Tensor<T>* gx = grad_of(xn);
        Tensor<T>* gw = grad_of(wn);
        Tensor<T>* gb = bn ? grad_of(bn) : nullptr;
        ConstMatMap<T> w(wn->value.data(), cin, kdim);
        std::vector<T> dcols(static_cast<size_t>(kdim * iv));
        for (int64_t i = 0; i < n; ++i) {
            const T* dout = self.grad.data() + i * cout * ov;
            im2col(dout, cout, g, dcols.data());
            ConstMatMap<T> dc(dcols.data(), kdim, iv);
            if (gx) MatMap<T>(gx->data() + i * cin * iv, cin, iv).noalias() += w * dc;
            if (gw) {
                MatMap<T>(gw->data(), cin, kdim).noalias() +=
                    ConstMatMap<T>(xn->value.data() + i * cin * iv, cin, iv) * dc.transpose();
            }
            if (gb) {
                for (int64_t c = 0; c < cout; ++c)
                    for (int64_t k = 0; k < ov; ++k) (*gb)[c] += dout[c * ov + k];
            }
        }
    });
}

namespace {

// Shared backward for normalization: groups are (n, c) for instance norm and c
// for batch norm. xhat and invstd are saved from the forward pass.
template <typename T>
void norm_backward(Node<T>& self, const Tensor<T>& xhat, const std::vector<T>& invstd, int64_t n, int64_t c,
                   int64_t sp, bool per_instance) {
    Tensor<T>* gx = grad_of(self.inputs[0]);
    Tensor<T>* gg = grad_of(self.inputs[1]);
    Tensor<T>* gb = grad_of(self.inputs[2]);
    const Tensor<T>& gamma = self.inputs[1]->value;
    const int64_t groups = per_instance ? n * c : c;
    std::vector<long double> sum_dy(static_cast<size_t>(groups), 0), sum_dy_xhat(static_cast<size_t>(groups), 0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
            const int64_t grp = per_instance ? i * c + j : j;
            for (int64_t k = 0; k < sp; ++k) {
                const int64_t idx = (i * c + j) * sp + k;
                sum_dy[grp] += self.grad[idx];
                sum_dy_xhat[grp] += self.grad[idx] * xhat[idx];
            }
        }
    for (int64_t j = 0; j < c; ++j) {
        long double dg = 0, db = 0;
        for (int64_t grp = 0; grp < groups; ++grp) {
            if ((per_instance ? grp % c : grp) != j) continue;
            dg += sum_dy_xhat[grp];
            db += sum_dy[grp];
        }
        if (gg) (*gg)[j] += static_cast<T>(dg);
        if (gb) (*gb)[j] += static_cast<T>(db);
    }
    if (!gx) return;
    const T m = static_cast<T>(per_instance ? sp : n * sp);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
            const int64_t grp = per_instance ? i * c + j : j;
            const T s1 = static_cast<T>(sum_dy[grp]) * gamma[j];
            const T s2 = static_cast<T>(sum_dy_xhat[grp]) * gamma[j];
            const T scale_factor = invstd[grp] / m;
            for (int64_t k = 0; k < sp; ++k) {
                const int64_t idx = (i * c + j) * sp + k;
                const T dxhat = self.grad[idx] * gamma[j];
                (*gx)[idx] += scale_factor * (m * dxhat - s1 - xhat[idx] * s2);
            }
        }
}

template <typename T>
void check_norm_args(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const char* op) {
    if (x.value().rank() < 3) throw std::domain_error(std::string(op) + ": input must be [N, C, spatial...]");
    const int64_t c = x.shape()[1];
    if (gamma.value().numel() != c || beta.value().numel() != c) {
        throw std::domain_error(std::string(op) + ": affine parameters do not match channel count");
    }
}

}  // namespace

template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    check_norm_args(x, gamma, beta, "instance_norm");
    const Tensor<T>& xv = x.value();
    const int64_t n = xv.dim(0), c = xv.dim(1), sp = xv.spatial_numel();
    Tensor<T> xhat(xv.shape());
    Tensor<T> out(xv.shape());
    std::vector<T> invstd(static_cast<size_t>(n * c));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
            const T* src = xv.data() + (i * c + j) * sp;
            long double mu = 0, var = 0;
            for (int64_t k = 0; k < sp; ++k) mu += src[k];
            mu /= sp;
            for (int64_t k = 0; k < sp; ++k) var += (src[k] - mu) * (src[k] - mu);
            var /= sp;
            const T is = static_cast<T>(1.0L / std::sqrt(var + eps));
            invstd[static_cast<size_t>(i * c + j)] = is;
            for (int64_t k = 0; k < sp; ++k) {
                const int64_t idx = (i * c + j) * sp + k;
                xhat[idx] = static_cast<T>(src[k] - mu) * is;
                out[idx] = xhat[idx] * gamma.value()[j] + beta.value()[j];
            }
        }
    return make_result<T>(std::move(out), any_requires_grad<T>({&x, &gamma, &beta}), {x, gamma, beta},
                          [xhat = std::move(xhat), invstd = std::move(invstd), n, c, sp](Node<T>& self) {
                              norm_backward(self, xhat, invstd, n, c, sp, true);
                          });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum, T eps) {
    check_norm_args(x, gamma, beta, "batch_norm");
    const Tensor<T>& xv = x.value();
    const int64_t n = xv.dim(0), c = xv.dim(1), sp = xv.spatial_numel();
    Tensor<T> xhat(xv.shape());
    Tensor<T> out(xv.shape());
    std::vector<T> invstd(static_cast<size_t>(c));
    for (int64_t j = 0; j < c; ++j) {
        long double mu = 0, var = 0;
        if (training) {
            for (int64_t i = 0; i < n; ++i)
                for (int64_t k = 0; k < sp; ++k) mu += xv[(i * c + j) * sp + k];
            mu /= (n * sp);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t k = 0; k < sp; ++k) {
                    const long double d = xv[(i * c + j) * sp + k] - mu;
                    var += d * d;
                }
            var /= (n * sp);
            const long double unbiased = n * sp > 1 ? var * (n * sp) / (n * sp - 1) : var;
            running_mean[j] = static_cast<T>((1 - momentum) * running_mean[j] + momentum * mu);
            running_var[j] = static_cast<T>((1 - momentum) * running_var[j] + momentum * unbiased);
        } else {
            mu = running_mean[j];
            var = running_var[j];
        }
        const T is = static_cast<T>(1.0L / std::sqrt(var + eps));
        invstd[static_cast<size_t>(j)] = is;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t k = 0; k < sp; ++k) {
                const int64_t idx = (i * c + j) * sp + k;
                xhat[idx] = static_cast<T>(xv[idx] - mu) * is;
                out[idx] = xhat[idx] * gamma.value()[j] + beta.value()[j];
            }
    }
    const bool track = any_requires_grad<T>({&x, &gamma, &beta});
    if (!training) {
        // Running statistics are constants: the map is affine per channel.
        return make_result<T>(std::move(out), track, {x, gamma, beta},
                              [xhat = std::move(xhat), invstd = std::move(invstd), n, c, sp](Node<T>& self) {
                                  Tensor<T>* gx = grad_of(self.inputs[0]);
                                  Tensor<T>* gg = grad_of(self.inputs[1]);
                                  Tensor<T>* gb = grad_of(self.inputs[2]);
                                  const Tensor<T>& gamma_v = self.inputs[1]->value;
                                  for (int64_t i = 0; i < n; ++i)
                                      for (int64_t j = 0; j < c; ++j)
                                          for (int64_t k = 0; k < sp; ++k) {
                                              const int64_t idx = (i * c + j) * sp + k;
                                              if (gx) (*gx)[idx] += self.grad[idx] * gamma_v[j] * invstd[j];
                                              if (gg) (*gg)[j] += self.grad[idx] * xhat[idx];
                                              if (gb) (*gb)[j] += self.grad[idx];
                                          }
                              });
    }
    return make_result<T>(std::move(out), track, {x, gamma, beta},
                          [xhat = std::move(xhat), invstd = std::move(invstd), n, c, sp](Node<T>& self) {
                              norm_backward(self, xhat, invstd, n, c, sp, false);
                          });
}

#define CIML_INSTANTIATE_AG(T)                                                                                  \
    template class Var<T>;                                                                                      \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                          \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                                          \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                          \
    template Var<T> scale(const Var<T>&, T);                                                                    \
    template Var<T> add_scalar(const Var<T>&, T);                                                               \
    template Var<T> leaky_relu(const Var<T>&, T);                                                               \
    template Var<T> sigmoid(const Var<T>&);                                                                     \
    template Var<T> softplus(const Var<T>&);                                                                    \
    template Var<T> detach(const Var<T>&);                                                                      \
    template Var<T> sum(const Var<T>&);                                                                         \
    template Var<T> mean(const Var<T>&);                                                                        \
    template Var<T> concat_channels(const std::vector<Var<T>>&);                                                \
    template Var<T> channel_mean(const Var<T>&);                                                                \
    template Var<T> slice_channels(const Var<T>&, int64_t, int64_t);                                            \
    template Var<T> reparameterize(const Var<T>&, const Var<T>&, const Tensor<T>&);                             \
    template Var<T> gaussian_kl_mean(const Var<T>&, const Var<T>&);                                             \
    template Var<T> softmax_cross_entropy(const Var<T>&, const Tensor<int32_t>&);                               \
    template Var<T> soft_dice_loss(const Var<T>&, const Tensor<int32_t>&, T);                                   \
    template Var<T> masked_class_sum(const Var<T>&, int64_t, const Tensor<uint8_t>&);                           \
    template Var<T> conv(const Var<T>&, const Var<T>&, const Var<T>&, const ConvSpec&);                         \
    template Var<T> conv_transpose(const Var<T>&, const Var<T>&, const Var<T>&, const ConvSpec&);               \
    template Var<T> instance_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                              \
    template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, bool, T, T);

CIML_INSTANTIATE_AG(float)
CIML_INSTANTIATE_AG(double)

}  // namespace ciml::ag
