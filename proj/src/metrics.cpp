#include "ciml/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace ciml::metrics {

namespace {

void require_same_shape(const Tensor<uint8_t>& a, const Tensor<uint8_t>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw std::domain_error(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
    }
}

// Physical coordinates of boundary voxels.
std::vector<std::vector<double>> boundary_points(const Tensor<uint8_t>& m, const std::vector<double>& spacing) {
    const Shape& shape = m.shape();
    const size_t d = shape.size();
    std::vector<int64_t> stride(d, 1);
    for (size_t k = d; k-- > 1;) stride[k - 1] = stride[k] * shape[k];
    std::vector<std::vector<double>> pts;
    std::vector<int64_t> c(d, 0);
    for (int64_t i = 0; i < m.numel(); ++i) {
        if (m[i] != 0) {
            bool edge = false;
            for (size_t k = 0; k < d && !edge; ++k) {
                if (c[k] == 0 || c[k] == shape[k] - 1) edge = true;
                else if (m[i - stride[k]] == 0 || m[i + stride[k]] == 0) edge = true;
            }
            if (edge) {
                std::vector<double> p(d);
                for (size_t k = 0; k < d; ++k) p[k] = static_cast<double>(c[k]) * spacing[k];
                pts.push_back(std::move(p));
            }
        }
        for (size_t k = d; k-- > 0;) {
            if (++c[k] < shape[k]) break;
            c[k] = 0;
        }
    }
    return pts;
}

std::vector<double> directed(const std::vector<std::vector<double>>& from, const std::vector<std::vector<double>>& to) {
    std::vector<double> out;
    out.reserve(from.size());
    for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) {
            double s = 0;
            for (size_t k = 0; k < p.size(); ++k) {
                const double dx = p[k] - q[k];
                s += dx * dx;
                if (s >= best) break;
            }
            best = std::min(best, s);
        }
        out.push_back(std::sqrt(best));
    }
    return out;
}

}  // namespace

double dice_score(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth) {
    require_same_shape(pred, truth, "dice_score");
    int64_t a = 0, b = 0, both = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const bool x = pred[i] != 0, y = truth[i] != 0;
        a += x;
        b += y;
        both += x && y;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::domain_error("percentile of an empty sample");
    if (!(q >= 0.0 && q <= 100.0)) throw std::domain_error("percentile q must lie in [0, 100]");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

std::optional<double> percentile_surface_distance(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth,
                                                  const std::vector<double>& spacing, double q) {
    require_same_shape(pred, truth, "surface distance");
    if (spacing.size() != pred.shape().size()) {
        throw std::domain_error("spacing has " + std::to_string(spacing.size()) + " axes, masks have " +
                                std::to_string(pred.shape().size()));
    }
    const auto bp = boundary_points(pred, spacing);
    const auto bt = boundary_points(truth, spacing);
    if (bp.empty() || bt.empty()) return std::nullopt;
    return std::max(percentile(directed(bp, bt), q), percentile(directed(bt, bp), q));
}

std::optional<double> hd95(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth, const std::vector<double>& spacing) {
    return percentile_surface_distance(pred, truth, spacing, 95.0);
}

std::optional<double> hausdorff(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth,
                                const std::vector<double>& spacing) {
    return percentile_surface_distance(pred, truth, spacing, 100.0);
}

Tensor<uint8_t> region_mask(const Tensor<uint8_t>& labels, const RegionSet& regions, const RegionId& region) {
    Tensor<uint8_t> out(labels.shape());
    for (int64_t i = 0; i < labels.numel(); ++i) out[i] = regions.contains(labels[i], region) ? 1 : 0;
    return out;
}

Tensor<float> region_probability(const std::vector<Tensor<float>>& probs, const TaskAssignment& assignment,
                                 const RegionSet& regions, const RegionId& region) {
    if (probs.size() != assignment.entries.size()) {
        throw std::invalid_argument("ensemble: " + std::to_string(probs.size()) + " probability maps for " +
                                    std::to_string(assignment.entries.size()) + " segmentors");
    }
    const auto owners = assignment.segmentors_for(region);
    if (owners.empty()) throw std::domain_error("region " + region.name + " has no assigned segmentor");
    const Shape spatial(probs[owners[0]].shape().begin() + 1, probs[owners[0]].shape().end());
    const int64_t vox = shape_numel(spatial);
    Tensor<float> acc(spatial);
    for (size_t i : owners) {
        LabelRemap remap(regions, assignment.entries[i].targets);
        const auto& p = probs[i];
        if (p.dim(0) != remap.out_channels() || p.numel() != remap.out_channels() * vox) {
            throw std::invalid_argument("ensemble: probability map of segmentor " + assignment.entries[i].primary.name +
                                        " has shape " + shape_str(p.shape()));
        }
        for (size_t j = 0; j < remap.targets().size(); ++j) {
            // Local class j+1 lies inside `region` iff its target region does.
            const RegionId& t = remap.targets()[j];
            if (!regions.contains(t.class_index, region)) continue;
            const float* src = p.data() + static_cast<int64_t>(j + 1) * vox;
            for (int64_t v = 0; v < vox; ++v) acc[v] += src[v];
        }
    }
    const float inv = 1.0f / static_cast<float>(owners.size());
    for (int64_t v = 0; v < vox; ++v) acc[v] *= inv;
    return acc;
}

Tensor<uint8_t> ensemble_regions(const std::vector<Tensor<float>>& probs, const TaskAssignment& assignment,
                                 const RegionSet& regions) {
    std::vector<RegionId> order = regions.regions;
    std::sort(order.begin(), order.end(), [](const RegionId& a, const RegionId& b) { return a.class_index < b.class_index; });
    std::vector<Tensor<float>> avg;
    for (const auto& r : order) avg.push_back(region_probability(probs, assignment, regions, r));
    Tensor<uint8_t> out(avg.at(0).shape());
    for (int64_t v = 0; v < out.numel(); ++v) {
        int label = 0;
        if (regions.nested) {
            for (size_t r = 0; r < order.size(); ++r) {
                if (avg[r][v] > 0.5f) label = order[r].class_index;
                else break;
            }
        } else {
            float best = 0.5f;
            for (size_t r = 0; r < order.size(); ++r) {
                if (avg[r][v] > best) {
                    best = avg[r][v];
                    label = order[r].class_index;
                }
            }
        }
        out[v] = static_cast<uint8_t>(label);
    }
    return out;
}

CaseReport evaluate_case(const std::string& case_id, const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth,
                         const RegionSet& regions, const std::vector<double>& spacing) {
    require_same_shape(pred, truth, "evaluate_case");
    CaseReport rep{case_id, {}};
    for (const auto& r : regions.regions) {
        const auto p = region_mask(pred, regions, r);
        const auto t = region_mask(truth, regions, r);
        rep.regions.push_back({r, dice_score(p, t), hd95(p, t, spacing)});
    }
    return rep;
}

std::string reports_to_csv(const std::vector<CaseReport>& reports) {
    std::ostringstream os;
    os << std::setprecision(6);
    os << "case_id,region,dice,hd95\n";
    std::vector<std::string> names;
    std::map<std::string, std::pair<double, int>> dice, hd;
    for (const auto& c : reports) {
        for (const auto& r : c.regions) {
            if (!dice.count(r.region.name)) names.push_back(r.region.name);
            auto& d = dice[r.region.name];
            d.first += r.dice;
            d.second += 1;
            auto& h = hd[r.region.name];
            os << c.case_id << ',' << r.region.name << ',' << r.dice << ',';
            if (r.hd95) {
                os << *r.hd95;
                h.first += *r.hd95;
                h.second += 1;
            } else {
                os << "nan";
            }
            os << '\n';
        }
    }
    for (const auto& n : names) {
        const auto& d = dice[n];
        const auto& h = hd[n];
        os << "MEAN," << n << ',' << d.first / d.second << ',';
        if (h.second > 0) os << h.first / h.second;
        else os << "nan";
        os << '\n';
    }
    return os.str();
}

double mean_dice(const std::vector<CaseReport>& reports) {
    double s = 0;
    int n = 0;
    for (const auto& c : reports) {
        for (const auto& r : c.regions) {
            s += r.dice;
            ++n;
        }
    }
    if (n == 0) throw std::domain_error("mean_dice: no region reports");
    return s / n;
}

}  // namespace ciml::metrics
