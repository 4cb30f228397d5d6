// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.
#include <malloc.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "checks.hpp"
#include "ciml/cli.hpp"
#include "ciml/info_oracle.hpp"
#include "ciml/interpretability.hpp"
#include "ciml/io.hpp"
#include "ciml/metrics.hpp"
#include "ciml/shape_composition.hpp"
#include "ciml/synthetic.hpp"
#include "ciml/training.hpp"
#include "json.hpp"
#include "metric_oracle.hpp"

namespace fs = std::filesystem;
using namespace ciml;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& check) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = check();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << fmt("%.1f", secs) << " s]"
              << std::endl;
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- information-theoretic oracle ----

Outcome mi_decomposition() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto s = oracle::run_oracle_suite(50, 2024);
    const double secs = elapsed_since(t0);
    const bool ok = s.nets == 50 && s.max_decomposition_residual <= 1e-9 && secs < 10;
    return {ok, "nets=" + std::to_string(s.nets) + " max residual=" + fmt("%.3g", s.max_decomposition_residual) +
                    " time=" + fmt("%.2f", secs) + " s"};
}

Outcome variational_bounds() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto s = oracle::run_oracle_suite(20, 77);
    const double secs = elapsed_since(t0);
    const bool ok = s.nets == 20 && s.min_upper_gap >= -1e-9 && s.min_lower_gap >= -1e-9 && s.max_tight_gap <= 1e-9 &&
                    secs < 10;
    return {ok, "min upper gap=" + fmt("%.3g", s.min_upper_gap) + " min lower gap=" + fmt("%.3g", s.min_lower_gap) +
                    " max gap at true r,q=" + fmt("%.3g", s.max_tight_gap) + " time=" + fmt("%.2f", secs) + " s"};
}

Outcome mi_properties() {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<int> card(2, 4);
    double worst_sym = 0, worst_chain = 0, min_mi = 0;
    for (int t = 0; t < 100; ++t) {
        const int a = card(rng), b = card(rng), c = card(rng);
        const auto p = oracle::dirichlet_row(rng, a * b * c);
        oracle::DiscreteDistribution j({{"A", a}, {"B", b}, {"C", c}}, p);
        const double iab = oracle::mutual_information(j, {"A"}, {"B"});
        const double iba = oracle::mutual_information(j, {"B"}, {"A"});
        const double iac = oracle::mutual_information(j, {"A"}, {"C"});
        const double ibc_a = oracle::conditional_mi(j, {"B"}, {"C"}, {"A"});
        const double iab_c = oracle::mutual_information(j, {"A", "B"}, {"C"});
        worst_sym = std::max(worst_sym, std::abs(iab - iba));
        worst_chain = std::max(worst_chain, std::abs(iab_c - (iac + ibc_a)));
        min_mi = std::min({min_mi, iab, iac, ibc_a, iab_c, oracle::conditional_mi(j, {"A"}, {"B"}, {"C"})});
    }
    const bool ok = worst_sym <= 1e-9 && worst_chain <= 1e-9 && min_mi >= -1e-9;
    return {ok, "joints=100 symmetry=" + fmt("%.3g", worst_sym) + " chain rule=" + fmt("%.3g", worst_chain) +
                    " min MI=" + fmt("%.3g", min_mi)};
}

// ---- model and losses ----

Outcome gradient_check() {
    const auto g = testutil::total_loss_gradcheck(5);
    const bool ok = g.checked >= 100 && g.latent_checked > 0 && g.max_rel_error <= 1e-3;
    return {ok, "checked=" + std::to_string(g.checked) + " through kappa=" + std::to_string(g.latent_checked) +
                    " max rel error=" + fmt("%.3g", g.max_rel_error) + " (" + g.worst + ")"};
}

Outcome shape_contract() {
    const auto r = testutil::check_shape_grid({16, 32}, {1, 4}, {1, 3}, {2, 3});
    const bool ok = r.configs == 16 && r.mismatches == 0 && r.attention_out_of_range == 0;
    return {ok, "configs=" + std::to_string(r.configs) + " mismatches=" + std::to_string(r.mismatches) +
                    " attention outside (0,1)=" + std::to_string(r.attention_out_of_range) +
                    (r.first_failure.empty() ? "" : " first=" + r.first_failure)};
}

Outcome metric_oracles() {
    const auto r = testutil::run_metric_oracle();
    Tensor<uint8_t> a({1, 7}), b({1, 7});
    a[0] = 1;
    b[3] = 1;
    const auto same = metrics::hd95(a, a, {1.0, 1.0});
    const auto apart = metrics::hd95(a, b, {1.0, 1.0});
    const bool toys = same && *same == 0.0 && apart && *apart == 3.0;
    const bool ok = r.pairs == 256 * 256 && r.dice_mismatches == 0 && r.hausdorff_mismatches == 0 && toys;
    return {ok, "mask pairs=" + std::to_string(r.pairs) + " dice mismatches=" + std::to_string(r.dice_mismatches) +
                    " hausdorff mismatches=" + std::to_string(r.hausdorff_mismatches) +
                    " hd95 identical=" + (same ? fmt("%g", *same) : "undefined") +
                    " hd95 3 apart=" + (apart ? fmt("%g", *apart) : "undefined")};
}

Outcome poly_schedule() {
    const double lr0 = 1e-4;
    const int max_epoch = 500;
    double worst = 0;
    for (int e : {0, max_epoch / 2, max_epoch}) {
        const double ref = e == max_epoch ? 0.0 : lr0 * std::exp(0.9 * std::log1p(-static_cast<double>(e) / max_epoch));
        const double got = poly_lr(lr0, e, max_epoch);
        const double err = ref == 0.0 ? std::abs(got) : std::abs(got - ref) / ref;
        worst = std::max(worst, err);
    }
    return {worst <= 1e-12, "epochs {0, 250, 500} max rel error=" + fmt("%.3g", worst)};
}

// ---- toy shape composition ----

struct ShapeData {
    std::vector<shapes::ShapePair> pairs;
    shapes::DemoSplit split;
};

const ShapeData& shape_data() {
    static const ShapeData d = [] {
        ShapeData s;
        s.pairs = shapes::generate_dataset(1000, 64, 7);
        s.split = shapes::split_dataset(s.pairs.size(), 0.1, 7);
        return s;
    }();
    return d;
}

struct ShapeRun {
    shapes::DemoTrainResult train;
    shapes::DemoEvaluation eval;
};

ShapeRun run_shapes(double beta, int epochs) {
    const auto& d = shape_data();
    shapes::DemoModel<float> model(shapes::DemoConfig{}, 1);
    shapes::DemoTrainConfig cfg;
    cfg.epochs = epochs;
    cfg.beta = beta;
    cfg.seed = 1;
    ShapeRun r;
    r.train = shapes::train_demo(model, d.pairs, d.split, cfg);
    r.eval = shapes::evaluate_demo(model, d.pairs, d.split.test);
    return r;
}

Outcome shape_composition() {
    const auto r = run_shapes(0.5, 200);
    const bool ok = r.eval.dice >= 0.95 && r.eval.localization >= 0.6;
    return {ok, "epochs=200 held-out=" + std::to_string(shape_data().split.test.size()) +
                    " union dice=" + fmt("%.4f", r.eval.dice) + " localization=" + fmt("%.3f", r.eval.localization)};
}

Outcome beta_behaviour() {
    constexpr int kEpochs = 40;
    const auto b0 = run_shapes(0.0, kEpochs);
    const auto b05 = run_shapes(0.5, kEpochs);
    const auto b10 = run_shapes(10.0, kEpochs);
    const auto b100 = run_shapes(100.0, kEpochs);
    const double k0 = b0.train.converged_kl, k05 = b05.train.converged_kl, k10 = b10.train.converged_kl;
    const bool monotone = k0 >= k05 && k05 >= k10;
    const bool shrink = b100.eval.mean_abs_mu < b0.eval.mean_abs_mu &&
                        b100.eval.mean_abs_sigma_minus_one < b0.eval.mean_abs_sigma_minus_one;
    return {monotone && shrink,
            "KL beta 0/0.5/10=" + fmt("%.4g", k0) + "/" + fmt("%.4g", k05) + "/" + fmt("%.4g", k10) +
                " |mu| beta 0/100=" + fmt("%.4f", b0.eval.mean_abs_mu) + "/" + fmt("%.4f", b100.eval.mean_abs_mu) +
                " |sigma-1| beta 0/100=" + fmt("%.4f", b0.eval.mean_abs_sigma_minus_one) + "/" +
                fmt("%.4f", b100.eval.mean_abs_sigma_minus_one)};
}

// ---- synthetic 3D pipeline ----

fs::path scratch_root() {
    static const fs::path p = fs::temp_directory_path() / ("ciml_acceptance_" + std::to_string(::getpid()));
    return p;
}

synth::SynthConfig synth_config(int cases, uint64_t seed) {
    synth::SynthConfig s;
    s.n_cases = cases;
    s.size = 32;
    s.seed = seed;
    return s;
}

RunConfig pipeline_config(const fs::path& data, const fs::path& out, uint64_t seed) {
    RunConfig cfg;
    cfg.assignment = synth::default_assignment();
    cfg.architecture.patch_size = 16;
    cfg.architecture.base_filters = 4;
    cfg.architecture.spatial_dims = 3;
    cfg.training.max_epoch = 20;
    cfg.training.iterations_per_epoch = 20;
    cfg.training.batch_size = 2;
    cfg.training.initial_lr = 3e-3;
    cfg.training.seed = seed;
    cfg.data_root = data;
    cfg.output_dir = out;
    cfg.checkpoint_every = 10;
    return cfg;
}

std::vector<metrics::CaseReport> evaluate(const train::CimlModel<float>& model, const std::vector<VolumeSample>& cases,
                                          const io::DatasetManifest& m, bool background_only) {
    std::vector<metrics::CaseReport> reports;
    for (const auto& s : cases) {
        Tensor<uint8_t> pred(s.mask.shape());
        if (!background_only) {
            pred = metrics::ensemble_regions(train::predict_probabilities(model, s), model.assignment(),
                                             model.regions());
        }
        reports.push_back(metrics::evaluate_case(s.case_id, pred, s.mask, m.regions, m.spacing));
    }
    return reports;
}

bool same_tensor(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape() != b.shape()) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

Outcome full_pipeline() {
    const fs::path root = scratch_root() / "pipeline";
    synth::write_synthetic_dataset(synth_config(20, 11), root / "train");
    const auto test_manifest = synth::write_synthetic_dataset(synth_config(8, 12), root / "test");
    const auto test = io::load_dataset(test_manifest);

    std::ostringstream log;
    auto run = cli::run_training(pipeline_config(root / "train", root / "run", 3), log);

    bool finite = true;
    int records = 0;
    std::ifstream jl(root / "run" / "train_log.jsonl");
    for (std::string line; std::getline(jl, line);) {
        ++records;
        const auto j = nlohmann::json::parse(line);
        for (const auto& seg : j.at("segmentors"))
            for (const char* k : {"ce", "dice", "kl", "total"})
                if (!std::isfinite(seg.at(k).get<double>())) finite = false;
    }
    finite = finite && records == 20 * 20;

    const double dice = metrics::mean_dice(evaluate(*run.model, test, test_manifest, false));
    const double baseline = metrics::mean_dice(evaluate(*run.model, test, test_manifest, true));

    bool round_trip = run.checkpoints.size() == 3;
    for (const auto& ckpt : run.checkpoints) round_trip = round_trip && fs::exists(ckpt);
    const auto loaded = cli::load_model(root / "run" / "final.ckpt");
    const auto& pa = run.model->params().entries();
    const auto& pb = loaded->params().entries();
    round_trip = round_trip && pa.size() == pb.size();
    for (size_t i = 0; round_trip && i < pa.size(); ++i)
        round_trip = pa[i].name == pb[i].name && same_tensor(pa[i].var.value(), pb[i].var.value());
    const auto before = train::predict_probabilities(*run.model, test.front());
    const auto after = train::predict_probabilities(*loaded, test.front());
    for (size_t i = 0; round_trip && i < before.size(); ++i) round_trip = same_tensor(before[i], after[i]);

    const bool ok = dice >= baseline + 0.3 && finite && round_trip;
    return {ok, "mean dice=" + fmt("%.4f", dice) + " background baseline=" + fmt("%.4f", baseline) +
                    " losses finite over " + std::to_string(records) + " iterations=" + (finite ? "yes" : "no") +
                    " checkpoint round trip=" + (round_trip ? "identical" : "differs")};
}

Outcome interpretability() {
    // Highest-contrast modality per region; the explaining segmentor must not be driven by it.
    const std::map<std::string, std::string> strongest = synth::SynthConfig{}.contrast_modality;
    std::map<std::string, int> hits, runs;
    double min_zeta = 0, worst_sum = 0;
    std::string detail;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        const fs::path root = scratch_root() / ("interp" + std::to_string(seed));
        synth::write_synthetic_dataset(synth_config(20, 100 + seed), root / "train");
        const auto test = io::load_dataset(synth::write_synthetic_dataset(synth_config(8, 200 + seed), root / "test"));
        std::ostringstream log;
        auto run = cli::run_training(pipeline_config(root / "train", root / "run", seed), log);
        const auto& model = *run.model;

        for (const auto& s : test) {
            const auto inputs = train::window_inputs(
                model, s, train::centered_origin(s.spatial_shape(), model.base_config().patch_size));
            for (const auto& region : model.regions().regions) {
                size_t seg;
                try {
                    seg = interp::segmentor_for(model, region, strongest.at(region.name));
                } catch (const std::domain_error&) {
                    continue;
                }
                try {
                    const auto stacks = interp::extract_complementary_cams(model, inputs, seg, region);
                    for (const auto& h : stacks)
                        for (double v : h.zeta.values()) min_zeta = std::min(min_zeta, v);
                    double sum = 0;
                    for (const auto& [mod, w] : interp::complementary_weights(stacks)) sum += w;
                    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
                } catch (const interp::ZeroRegionError&) {
                } catch (const interp::UndefinedWeightsError&) {
                }
            }
        }

        const auto table = interp::average_weights(model, test, strongest);
        std::string seed_detail;
        for (const auto& [region, w] : table.weights) {
            double total = 0;
            for (const auto& [mod, v] : w) total += v;
            worst_sum = std::max(worst_sum, std::abs(total - 1.0));
            const auto best = std::max_element(w.begin(), w.end(),
                                               [](const auto& a, const auto& b) { return a.second < b.second; });
            ++runs[region];
            if (best->first == strongest.at(region)) ++hits[region];
            seed_detail += " " + region + "->" + best->first + fmt("(%.2f)", best->second);
        }
        detail += " seed" + std::to_string(seed) + "[" + seed_detail.substr(1) + "]";
    }
    // Every region with an eligible segmentor must rank its strongest modality first in 4 of 5 seeds.
    bool pass = !runs.empty() && min_zeta >= 0 && worst_sum <= 1e-9;
    std::string counts;
    for (const auto& [region, n] : runs) {
        pass = pass && n == 5 && hits[region] >= 4;
        counts += " " + region + " " + strongest.at(region) + " first=" + std::to_string(hits[region]) + "/" +
                  std::to_string(n);
    }
    return {pass, "min zeta=" + fmt("%g", min_zeta) + " max |sum-1|=" + fmt("%.3g", worst_sum) + counts + ";" + detail};
}

}  // namespace

int main() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);

    report("MI decomposition", mi_decomposition);
    report("variational bounds", variational_bounds);
    report("MI properties", mi_properties);
    report("gradient verification", gradient_check);
    report("shape contract", shape_contract);
    report("metric oracles", metric_oracles);
    report("poly LR", poly_schedule);
    report("ShapeComposition reproduction", shape_composition);
    report("beta behaviour", beta_behaviour);
    report("full pipeline", full_pipeline);
    report("interpretability invariants", interpretability);

    std::error_code ec;
    fs::remove_all(scratch_root(), ec);
    std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
    return failures == 0 ? 0 : 1;
}
