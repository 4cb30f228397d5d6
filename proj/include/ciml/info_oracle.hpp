#pragma once

// Exact information-theoretic quantities over small discrete distributions.
// All results are in nats with the 0 log 0 = 0 convention.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ciml::oracle {

struct Axis {
    std::string name;
    int size = 0;
};

inline constexpr int kMaxAlphabet = 8;

// Dense joint table over the product alphabet, row-major in axis order.
class DiscreteDistribution {
public:
    DiscreteDistribution() = default;
    DiscreteDistribution(std::vector<Axis> axes, std::vector<double> probabilities);

    const std::vector<Axis>& axes() const { return axes_; }
    const std::vector<double>& probabilities() const { return p_; }
    size_t cells() const { return p_.size(); }
    int axis_index(const std::string& name) const;

    // Throws std::domain_error unless entries are >= 0 and sum to 1 within 1e-12.
    void validate() const;

    // Distribution over the named axes, in the given order.
    DiscreteDistribution marginal(const std::vector<std::string>& names) const;

    // Per-axis coordinates of a flat cell index.
    std::vector<int> unravel(size_t cell) const;
    size_t ravel(const std::vector<int>& coords) const;

private:
    std::vector<Axis> axes_;
    std::vector<double> p_;
};

double entropy(const DiscreteDistribution& dist);
// Joint entropy of a subset of axes (empty set gives 0).
double entropy(const DiscreteDistribution& joint, const std::vector<std::string>& vars);
double mutual_information(const DiscreteDistribution& joint, const std::vector<std::string>& a,
                          const std::vector<std::string>& b);
double conditional_mi(const DiscreteDistribution& joint, const std::vector<std::string>& a,
                      const std::vector<std::string>& b, const std::vector<std::string>& c);
double kl_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q);

// Network X -> X1, X -> X2, (X1, X2) -> Y1, (X1, X2) -> K2.
// Conditional tables are row-major with the conditioned variable last.
struct DiscreteBayesNet {
    int nx = 2, nx1 = 2, nx2 = 2, ny1 = 2, nk2 = 2;
    std::vector<double> p_x;         // [nx]
    std::vector<double> p_x1_x;      // [nx][nx1]
    std::vector<double> p_x2_x;      // [nx][nx2]
    std::vector<double> p_y1_x1x2;   // [nx1][nx2][ny1]
    std::vector<double> p_k2_x1x2;   // [nx1][nx2][nk2]

    void validate() const;
    // Joint over (X, X1, X2, Y1, K2).
    DiscreteDistribution joint() const;

    // Alphabet sizes drawn uniformly from [2, max_alphabet]; rows ~ Dirichlet(1).
    static DiscreteBayesNet random(std::mt19937_64& rng, int max_alphabet = 4);
};

// Uniformly random point on the probability simplex of dimension n.
std::vector<double> dirichlet_row(std::mt19937_64& rng, int n);

struct DecompositionTerms {
    double i1 = 0;  // I(X1,X2; K2)
    double i2 = 0;  // I(K2; Y1 | X1)
    double i3 = 0;  // I(K2; X1)
    double i4 = 0;  // I(K2; X2 | X1, Y1)
    double residual() const { return i1 - (i2 + i3 + i4); }
};

DecompositionTerms decomposition_terms(const DiscreteBayesNet& net);

// Largest cell difference between the net's joint over (X1, X2, Y1, K2) and
// p(K2 | X1, X2) * p(X1, X2, Y1) assembled from its marginals.
double factorization_residual(const DiscreteBayesNet& net);

struct BoundReport {
    double i1 = 0;
    double upper_surrogate = 0;  // E log p(k|x1,x2) / r(k)
    double upper_gap = 0;        // upper_surrogate - i1
    double i2 = 0;
    double lower_surrogate = 0;  // E log q(y|k,x1) / p(y|x1)
    double lower_gap = 0;        // i2 - lower_surrogate
    bool holds(double tol = 1e-9) const { return upper_gap >= -tol && lower_gap >= -tol; }
};

// r: distribution over a single axis of size nk2, strictly positive.
// q: table [nk2][nx1][ny1] of q(Y1 | K2, X1), rows normalized.
BoundReport verify_bound_directions(const DiscreteBayesNet& net, const DiscreteDistribution& r,
                                    const std::vector<double>& q);

// The true p(K2) and p(Y1 | K2, X1) of a net, for which both bounds are tight.
DiscreteDistribution true_k2_marginal(const DiscreteBayesNet& net);
std::vector<double> true_y1_posterior(const DiscreteBayesNet& net);

struct OracleSummary {
    int nets = 0;
    double max_decomposition_residual = 0;
    double max_factorization_residual = 0;
    double min_upper_gap = 0;  // with random r
    double min_lower_gap = 0;  // with random q
    double max_tight_gap = 0;  // |gap| with the true r and q
    bool ok(double tol) const {
        return max_decomposition_residual <= tol && min_upper_gap >= -tol && min_lower_gap >= -tol && max_tight_gap <= tol;
    }
};

// Draws `nets` random networks (alphabets <= 4) and checks the decomposition
// and both bounds, using Dirichlet(1) r and q for the loose case.
OracleSummary run_oracle_suite(int nets, uint64_t seed);

}  // namespace ciml::oracle
