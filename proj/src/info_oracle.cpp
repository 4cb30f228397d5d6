#include "ciml/info_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

namespace ciml::oracle {

namespace {

constexpr double kSumTol = 1e-12;

void check_row(const double* row, int n, const std::string& what) {
    double s = 0;
    for (int i = 0; i < n; ++i) {
        if (!(row[i] >= 0)) throw std::domain_error(what + ": negative or NaN probability");
        s += row[i];
    }
    if (std::abs(s - 1.0) > kSumTol) throw std::domain_error(what + ": row sums to " + std::to_string(s));
}

void check_table(const std::vector<double>& t, int rows, int n, const std::string& what) {
    if (static_cast<int>(t.size()) != rows * n) {
        throw std::domain_error(what + ": expected " + std::to_string(rows * n) + " entries, got " +
                                std::to_string(t.size()));
    }
    for (int r = 0; r < rows; ++r) check_row(t.data() + static_cast<size_t>(r) * n, n, what);
}

void check_alphabet(int n, const char* name) {
    if (n < 1 || n > kMaxAlphabet) {
        throw std::domain_error(std::string("alphabet of ") + name + " must lie in [1, " +
                                std::to_string(kMaxAlphabet) + "]");
    }
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

void check_disjoint(const DiscreteDistribution& joint, const std::vector<std::vector<std::string>>& groups) {
    std::set<std::string> seen;
    for (const auto& g : groups) {
        for (const auto& name : g) {
            joint.axis_index(name);
            if (!seen.insert(name).second) throw std::domain_error("variable " + name + " appears in two groups");
        }
    }
}

// Maps each cell of `full` (over a ++ b ++ c) to flat indices in the marginals over a, b, c, a++c, b++c.
struct GroupIndexer {
    std::vector<size_t> a, b, c, ac, bc;
};

GroupIndexer index_groups(const DiscreteDistribution& full, size_t na, size_t nb, size_t nc) {
    GroupIndexer g;
    const auto& axes = full.axes();
    auto sub_index = [&](const std::vector<int>& coords, std::initializer_list<std::pair<size_t, size_t>> ranges) {
        size_t idx = 0;
        for (auto [lo, hi] : ranges) {
            for (size_t i = lo; i < hi; ++i) idx = idx * static_cast<size_t>(axes[i].size) + coords[i];
        }
        return idx;
    };
    for (size_t cell = 0; cell < full.cells(); ++cell) {
        auto coords = full.unravel(cell);
        g.a.push_back(sub_index(coords, {{0, na}}));
        g.b.push_back(sub_index(coords, {{na, na + nb}}));
        g.c.push_back(sub_index(coords, {{na + nb, na + nb + nc}}));
        g.ac.push_back(sub_index(coords, {{0, na}, {na + nb, na + nb + nc}}));
        g.bc.push_back(sub_index(coords, {{na, na + nb + nc}}));
    }
    return g;
}

}  // namespace

DiscreteDistribution::DiscreteDistribution(std::vector<Axis> axes, std::vector<double> probabilities)
    : axes_(std::move(axes)), p_(std::move(probabilities)) {
    size_t n = 1;
    std::set<std::string> names;
    for (const auto& a : axes_) {
        if (a.size < 1) throw std::domain_error("axis " + a.name + " has empty alphabet");
        if (!names.insert(a.name).second) throw std::domain_error("duplicate axis " + a.name);
        n *= static_cast<size_t>(a.size);
    }
    if (n != p_.size()) {
        throw std::domain_error("probability table has " + std::to_string(p_.size()) + " cells, axes need " +
                                std::to_string(n));
    }
}

int DiscreteDistribution::axis_index(const std::string& name) const {
    for (size_t i = 0; i < axes_.size(); ++i) {
        if (axes_[i].name == name) return static_cast<int>(i);
    }
    throw std::domain_error("unknown variable " + name);
}

void DiscreteDistribution::validate() const {
    if (p_.empty()) throw std::domain_error("empty distribution");
    double s = 0;
    for (double v : p_) {
        if (!(v >= 0)) throw std::domain_error("distribution has a negative or NaN entry");
        s += v;
    }
    if (std::abs(s - 1.0) > kSumTol) throw std::domain_error("distribution sums to " + std::to_string(s));
}

std::vector<int> DiscreteDistribution::unravel(size_t cell) const {
    std::vector<int> coords(axes_.size());
    for (size_t i = axes_.size(); i-- > 0;) {
        coords[i] = static_cast<int>(cell % static_cast<size_t>(axes_[i].size));
        cell /= static_cast<size_t>(axes_[i].size);
    }
    return coords;
}

size_t DiscreteDistribution::ravel(const std::vector<int>& coords) const {
    size_t idx = 0;
    for (size_t i = 0; i < axes_.size(); ++i) idx = idx * static_cast<size_t>(axes_[i].size) + coords[i];
    return idx;
}

DiscreteDistribution DiscreteDistribution::marginal(const std::vector<std::string>& names) const {
    std::vector<int> src;
    std::vector<Axis> axes;
    for (const auto& n : names) {
        src.push_back(axis_index(n));
        axes.push_back(axes_[static_cast<size_t>(src.back())]);
    }
    size_t n = 1;
    for (const auto& a : axes) n *= static_cast<size_t>(a.size);
    std::vector<double> out(n, 0.0);
    for (size_t cell = 0; cell < p_.size(); ++cell) {
        if (p_[cell] == 0) continue;
        auto coords = unravel(cell);
        size_t idx = 0;
        for (size_t k = 0; k < src.size(); ++k) {
            idx = idx * static_cast<size_t>(axes[k].size) + coords[static_cast<size_t>(src[k])];
        }
        out[idx] += p_[cell];
    }
    return DiscreteDistribution(std::move(axes), std::move(out));
}

double entropy(const DiscreteDistribution& dist) {
    dist.validate();
    double h = 0;
    for (double p : dist.probabilities()) {
        if (p > 0) h -= p * std::log(p);
    }
    return h;
}

double entropy(const DiscreteDistribution& joint, const std::vector<std::string>& vars) {
    if (vars.empty()) return 0.0;
    check_disjoint(joint, {vars});
    return entropy(joint.marginal(vars));
}

double conditional_mi(const DiscreteDistribution& joint, const std::vector<std::string>& a,
                      const std::vector<std::string>& b, const std::vector<std::string>& c) {
    joint.validate();
    if (a.empty() || b.empty()) throw std::domain_error("mutual information needs two non-empty variable groups");
    check_disjoint(joint, {a, b, c});
    // Direct summation of p(a,b,c) log [p(a,b,c) p(c) / (p(a,c) p(b,c))].
    const auto full = joint.marginal(concat(concat(a, b), c));
    const auto pa = joint.marginal(a), pb = joint.marginal(b);
    const auto pac = joint.marginal(concat(a, c)), pbc = joint.marginal(concat(b, c));
    const bool has_c = !c.empty();
    const auto pc = has_c ? joint.marginal(c) : DiscreteDistribution({}, {1.0});
    const auto idx = index_groups(full, a.size(), b.size(), c.size());
    double total = 0;
    for (size_t cell = 0; cell < full.cells(); ++cell) {
        double p = full.probabilities()[cell];
        if (p <= 0) continue;
        double ratio;
        if (has_c) {
            ratio = p * pc.probabilities()[idx.c[cell]] /
                    (pac.probabilities()[idx.ac[cell]] * pbc.probabilities()[idx.bc[cell]]);
        } else {
            ratio = p / (pa.probabilities()[idx.a[cell]] * pb.probabilities()[idx.b[cell]]);
        }
        total += p * std::log(ratio);
    }
    return total;
}

double mutual_information(const DiscreteDistribution& joint, const std::vector<std::string>& a,
                          const std::vector<std::string>& b) {
    return conditional_mi(joint, a, b, {});
}

double kl_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q) {
    p.validate();
    q.validate();
    if (p.axes().size() != q.axes().size()) throw std::domain_error("KL: distributions have different axes");
    for (size_t i = 0; i < p.axes().size(); ++i) {
        if (p.axes()[i].name != q.axes()[i].name || p.axes()[i].size != q.axes()[i].size) {
            throw std::domain_error("KL: axis " + p.axes()[i].name + " does not match " + q.axes()[i].name);
        }
    }
    double d = 0;
    for (size_t i = 0; i < p.cells(); ++i) {
        double pi = p.probabilities()[i], qi = q.probabilities()[i];
        if (pi <= 0) continue;
        if (qi <= 0) throw std::domain_error("KL: q is zero at cell " + std::to_string(i) + " where p > 0");
        d += pi * std::log(pi / qi);
    }
    return d;
}

void DiscreteBayesNet::validate() const {
    check_alphabet(nx, "X");
    check_alphabet(nx1, "X1");
    check_alphabet(nx2, "X2");
    check_alphabet(ny1, "Y1");
    check_alphabet(nk2, "K2");
    check_table(p_x, 1, nx, "p(X)");
    check_table(p_x1_x, nx, nx1, "p(X1|X)");
    check_table(p_x2_x, nx, nx2, "p(X2|X)");
    check_table(p_y1_x1x2, nx1 * nx2, ny1, "p(Y1|X1,X2)");
    check_table(p_k2_x1x2, nx1 * nx2, nk2, "p(K2|X1,X2)");
}

DiscreteDistribution DiscreteBayesNet::joint() const {
    validate();
    std::vector<Axis> axes{{"X", nx}, {"X1", nx1}, {"X2", nx2}, {"Y1", ny1}, {"K2", nk2}};
    std::vector<double> p(static_cast<size_t>(nx * nx1 * nx2 * ny1 * nk2));
    size_t i = 0;
    for (int x = 0; x < nx; ++x) {
        for (int a = 0; a < nx1; ++a) {
            for (int b = 0; b < nx2; ++b) {
                const int ab = a * nx2 + b;
                for (int y = 0; y < ny1; ++y) {
                    for (int k = 0; k < nk2; ++k) {
                        p[i++] = p_x[x] * p_x1_x[x * nx1 + a] * p_x2_x[x * nx2 + b] * p_y1_x1x2[ab * ny1 + y] *
                                 p_k2_x1x2[ab * nk2 + k];
                    }
                }
            }
        }
    }
    return DiscreteDistribution(std::move(axes), std::move(p));
}

std::vector<double> dirichlet_row(std::mt19937_64& rng, int n) {
    std::gamma_distribution<double> g(1.0, 1.0);
    std::vector<double> row(static_cast<size_t>(n));
    double s = 0;
    for (auto& v : row) s += (v = g(rng));
    for (auto& v : row) v /= s;
    return row;
}

DiscreteBayesNet DiscreteBayesNet::random(std::mt19937_64& rng, int max_alphabet) {
    if (max_alphabet < 2 || max_alphabet > kMaxAlphabet) throw std::domain_error("max_alphabet out of range");
    std::uniform_int_distribution<int> size(2, max_alphabet);
    DiscreteBayesNet net;
    net.nx = size(rng);
    net.nx1 = size(rng);
    net.nx2 = size(rng);
    net.ny1 = size(rng);
    net.nk2 = size(rng);
    auto table = [&](int rows, int n) {
        std::vector<double> t;
        for (int r = 0; r < rows; ++r) {
            auto row = dirichlet_row(rng, n);
            t.insert(t.end(), row.begin(), row.end());
        }
        return t;
    };
    net.p_x = table(1, net.nx);
    net.p_x1_x = table(net.nx, net.nx1);
    net.p_x2_x = table(net.nx, net.nx2);
    net.p_y1_x1x2 = table(net.nx1 * net.nx2, net.ny1);
    net.p_k2_x1x2 = table(net.nx1 * net.nx2, net.nk2);
    return net;
}

DecompositionTerms decomposition_terms(const DiscreteBayesNet& net) {
    const auto j = net.joint();
    DecompositionTerms t;
    t.i1 = mutual_information(j, {"X1", "X2"}, {"K2"});
    t.i2 = conditional_mi(j, {"K2"}, {"Y1"}, {"X1"});
    t.i3 = mutual_information(j, {"K2"}, {"X1"});
    t.i4 = conditional_mi(j, {"K2"}, {"X2"}, {"X1", "Y1"});
    return t;
}

double factorization_residual(const DiscreteBayesNet& net) {
    const auto j = net.joint().marginal({"X1", "X2", "Y1", "K2"});
    const auto p12y = j.marginal({"X1", "X2", "Y1"});
    const auto p12k = j.marginal({"X1", "X2", "K2"});
    const auto p12 = j.marginal({"X1", "X2"});
    double worst = 0;
    for (size_t cell = 0; cell < j.cells(); ++cell) {
        auto c = j.unravel(cell);
        double pair = p12.probabilities()[p12.ravel({c[0], c[1]})];
        double k_given = pair > 0 ? p12k.probabilities()[p12k.ravel({c[0], c[1], c[3]})] / pair : 0.0;
        double rhs = k_given * p12y.probabilities()[p12y.ravel({c[0], c[1], c[2]})];
        worst = std::max(worst, std::abs(j.probabilities()[cell] - rhs));
    }
    return worst;
}

DiscreteDistribution true_k2_marginal(const DiscreteBayesNet& net) { return net.joint().marginal({"K2"}); }

std::vector<double> true_y1_posterior(const DiscreteBayesNet& net) {
    const auto pkxy = net.joint().marginal({"K2", "X1", "Y1"});
    std::vector<double> q(pkxy.probabilities());
    const size_t ny = static_cast<size_t>(net.ny1);
    for (size_t row = 0; row < q.size() / ny; ++row) {
        double s = 0;
        for (size_t y = 0; y < ny; ++y) s += q[row * ny + y];
        for (size_t y = 0; y < ny; ++y) q[row * ny + y] = s > 0 ? q[row * ny + y] / s : 1.0 / static_cast<double>(ny);
    }
    return q;
}

BoundReport verify_bound_directions(const DiscreteBayesNet& net, const DiscreteDistribution& r,
                                    const std::vector<double>& q) {
    const auto j = net.joint();
    if (r.axes().size() != 1 || r.axes()[0].size != net.nk2) {
        throw std::domain_error("r must be a distribution over a single axis of size " + std::to_string(net.nk2));
    }
    r.validate();
    for (double v : r.probabilities()) {
        if (v <= 0) throw std::domain_error("r must be strictly positive");
    }
    check_table(q, net.nk2 * net.nx1, net.ny1, "q(Y1|K2,X1)");

    BoundReport rep;
    rep.i1 = mutual_information(j, {"X1", "X2"}, {"K2"});
    rep.i2 = conditional_mi(j, {"K2"}, {"Y1"}, {"X1"});

    // Upper surrogate: sum p(x1,x2,k) log p(k|x1,x2) / r(k), with p(k|x1,x2) taken from the net.
    const auto p12k = j.marginal({"X1", "X2", "K2"});
    for (size_t cell = 0; cell < p12k.cells(); ++cell) {
        double p = p12k.probabilities()[cell];
        if (p <= 0) continue;
        auto c = p12k.unravel(cell);
        double cond = net.p_k2_x1x2[static_cast<size_t>((c[0] * net.nx2 + c[1]) * net.nk2 + c[2])];
        rep.upper_surrogate += p * std::log(cond / r.probabilities()[static_cast<size_t>(c[2])]);
    }
    rep.upper_gap = rep.upper_surrogate - rep.i1;

    // Lower surrogate: sum p(x1,k,y) log q(y|k,x1) / p(y|x1).
    const auto p1ky = j.marginal({"X1", "K2", "Y1"});
    const auto p1y = j.marginal({"X1", "Y1"});
    const auto p1 = j.marginal({"X1"});
    for (size_t cell = 0; cell < p1ky.cells(); ++cell) {
        double p = p1ky.probabilities()[cell];
        if (p <= 0) continue;
        auto c = p1ky.unravel(cell);
        double qv = q[static_cast<size_t>((c[1] * net.nx1 + c[0]) * net.ny1 + c[2])];
        if (qv <= 0) throw std::domain_error("q is zero where p(x1, k2, y1) > 0");
        double py_given_x1 = p1y.probabilities()[p1y.ravel({c[0], c[2]})] / p1.probabilities()[static_cast<size_t>(c[0])];
        rep.lower_surrogate += p * std::log(qv / py_given_x1);
    }
    rep.lower_gap = rep.i2 - rep.lower_surrogate;
    return rep;
}

OracleSummary run_oracle_suite(int nets, uint64_t seed) {
    if (nets < 1) throw std::invalid_argument("run_oracle_suite: nets must be >= 1");
    std::mt19937_64 rng(seed);
    OracleSummary s;
    s.nets = nets;
    s.min_upper_gap = s.min_lower_gap = std::numeric_limits<double>::infinity();
    for (int n = 0; n < nets; ++n) {
        const auto net = DiscreteBayesNet::random(rng);
        s.max_decomposition_residual = std::max(s.max_decomposition_residual, std::abs(decomposition_terms(net).residual()));
        s.max_factorization_residual = std::max(s.max_factorization_residual, factorization_residual(net));
        const DiscreteDistribution r({{"K2", net.nk2}}, dirichlet_row(rng, net.nk2));
        std::vector<double> q;
        for (int k = 0; k < net.nk2 * net.nx1; ++k) {
            const auto row = dirichlet_row(rng, net.ny1);
            q.insert(q.end(), row.begin(), row.end());
        }
        const auto loose = verify_bound_directions(net, r, q);
        s.min_upper_gap = std::min(s.min_upper_gap, loose.upper_gap);
        s.min_lower_gap = std::min(s.min_lower_gap, loose.lower_gap);
        const auto tight = verify_bound_directions(net, true_k2_marginal(net), true_y1_posterior(net));
        s.max_tight_gap = std::max({s.max_tight_gap, std::abs(tight.upper_gap), std::abs(tight.lower_gap)});
    }
    return s;
}

}  // namespace ciml::oracle
