#include "ciml/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ciml/checkpoint.hpp"
#include "ciml/info_oracle.hpp"
#include "ciml/interpretability.hpp"
#include "ciml/io.hpp"
#include "ciml/metrics.hpp"
#include "ciml/png_export.hpp"
#include "ciml/shape_composition.hpp"
#include "ciml/synthetic.hpp"
#include "json.hpp"

namespace ciml::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

io::DatasetManifest load_validated_manifest(const fs::path& root) {
    auto manifest = io::read_manifest(root);
    auto report = manifest.validate();
    if (!report.ok()) throw ValidationError("dataset " + root.string() + " failed validation: " + report.summary());
    return manifest;
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

struct OracleArgs {
    int nets = 50;
    uint64_t seed = 1;
    double tol = 1e-9;
};

int cmd_oracle(const OracleArgs& a, std::ostream& out) {
    const auto s = oracle::run_oracle_suite(a.nets, a.seed);
    out << std::scientific << std::setprecision(3);
    out << "nets  max_decomposition_residual  max_factorization_residual  min_upper_gap  min_lower_gap  max_tight_gap\n";
    out << std::setw(4) << s.nets << "  " << std::setw(26) << s.max_decomposition_residual << "  " << std::setw(26)
        << s.max_factorization_residual << "  " << std::setw(13) << s.min_upper_gap << "  " << std::setw(13)
        << s.min_lower_gap << "  " << std::setw(13) << s.max_tight_gap << "\n";
    const bool ok = s.ok(a.tol);
    out << (ok ? "OK" : "FAILED") << " at tolerance " << a.tol << "\n";
    if (!ok) throw ValidationError("information identities violated beyond tolerance " + std::to_string(a.tol));
    return kOk;
}

struct DemoArgs {
    bool generate = false, train = false, evaluate = false, figures = false;
    int n = 1000, size = 64;
    uint64_t seed = 7;
    std::string data = "shapes";
    std::string model;
    std::string figure;
    int rows = 4;
    shapes::DemoTrainConfig train_cfg;
    shapes::DemoConfig model_cfg;
};

std::string demo_config_json(const DemoArgs& a) {
    return json{{"kind", "demo"},
                {"image_size", a.model_cfg.image_size},
                {"filters", a.model_cfg.filters},
                {"latent_channels", a.model_cfg.latent_channels},
                {"norm", to_string(a.model_cfg.norm_kind)},
                {"split_seed", a.seed},
                {"test_fraction", a.train_cfg.test_fraction}}
        .dump();
}

std::unique_ptr<shapes::DemoModel<float>> load_demo(const fs::path& path, uint64_t& split_seed, double& test_fraction) {
    const json j = json::parse(read_checkpoint_config(path));
    if (j.value("kind", "") != "demo") throw ValidationError(path.string() + " is not a shape demo checkpoint");
    shapes::DemoConfig cfg;
    cfg.image_size = j.at("image_size").get<int>();
    cfg.filters = j.at("filters").get<int>();
    cfg.latent_channels = j.at("latent_channels").get<int>();
    cfg.norm_kind = norm_kind_from_string(j.at("norm").get<std::string>());
    split_seed = j.at("split_seed").get<uint64_t>();
    test_fraction = j.at("test_fraction").get<double>();
    auto model = std::make_unique<shapes::DemoModel<float>>(cfg, 0);
    load_checkpoint(path, model->params());
    return model;
}

int cmd_demo(DemoArgs a, std::ostream& out) {
    if (!(a.generate || a.train || a.evaluate || a.figures)) {
        throw ValidationError("demo shapes needs at least one of --generate, --train, --evaluate, --export-figures");
    }
    const fs::path data(a.data);
    const fs::path model_path = a.model.empty() ? data / "model.ckpt" : fs::path(a.model);
    if (a.generate) {
        auto pairs = shapes::generate_dataset(a.n, a.size, a.seed);
        shapes::save_dataset(pairs, data);
        out << "generated " << pairs.size() << " pairs of " << a.size << "x" << a.size << " in " << data.string() << "\n";
    }
    std::vector<shapes::ShapePair> pairs;
    if (a.train || a.evaluate || a.figures) pairs = shapes::load_dataset(data);
    if (a.train) {
        a.model_cfg.image_size = static_cast<int>(pairs.at(0).primary_image.dim(0));
        a.train_cfg.seed = a.seed;
        const auto split = shapes::split_dataset(pairs.size(), a.train_cfg.test_fraction, a.seed);
        shapes::DemoModel<float> model(a.model_cfg, a.seed);
        std::ofstream log(data / "train_log.jsonl");
        auto result = shapes::train_demo(model, pairs, split, a.train_cfg, &log);
        save_checkpoint(model_path, model.params(), demo_config_json(a));
        out << "trained " << a.train_cfg.epochs << " epochs, final kl " << result.converged_kl << ", saved "
            << model_path.string() << "\n";
    }
    if (a.evaluate || a.figures) {
        uint64_t split_seed = 0;
        double test_fraction = 0.1;
        auto model = load_demo(model_path, split_seed, test_fraction);
        const auto split = shapes::split_dataset(pairs.size(), test_fraction, split_seed);
        if (a.evaluate) {
            const auto ev = shapes::evaluate_demo(*model, pairs, split.test);
            out << "held-out pairs " << split.test.size() << "\n"
                << "union dice " << ev.dice << "\n"
                << "localization " << ev.localization << "\n"
                << "mean |mu| " << ev.mean_abs_mu << "\n"
                << "mean |sigma-1| " << ev.mean_abs_sigma_minus_one << "\n";
        }
        if (a.figures) {
            const fs::path fig = a.figure.empty() ? data / "complementary.png" : fs::path(a.figure);
            std::vector<size_t> rows(split.test.begin(),
                                     split.test.begin() + std::min<size_t>(static_cast<size_t>(a.rows), split.test.size()));
            shapes::export_figure(*model, pairs, rows, fig);
            out << "wrote " << fig.string() << "\n";
        }
    }
    return kOk;
}

struct SynthArgs {
    std::string out = "synthetic";
    synth::SynthConfig cfg;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
    auto m = synth::write_synthetic_dataset(a.cfg, a.out);
    out << "wrote " << m.cases.size() << " cases to " << a.out << "\n";
    return kOk;
}

int cmd_train(const std::string& config_path, std::optional<uint64_t> seed, std::ostream& out) {
    RunConfig cfg = load_run_config(config_path);
    if (seed) cfg.training.seed = *seed;
    auto run = run_training(cfg, out);
    out << "trained " << run.epochs << " epochs; final checkpoint " << run.checkpoints.back().string() << "\n";
    return kOk;
}

struct EvalArgs {
    std::string checkpoint, data, out;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    auto model = load_model(a.checkpoint);
    auto manifest = load_validated_manifest(a.data);
    auto samples = io::load_dataset(manifest);
    std::vector<metrics::CaseReport> reports;
    for (const auto& s : samples) {
        auto probs = train::predict_probabilities(*model, s);
        auto pred = metrics::ensemble_regions(probs, model->assignment(), model->regions());
        reports.push_back(metrics::evaluate_case(s.case_id, pred, s.mask, manifest.regions, manifest.spacing));
    }
    const std::string csv = metrics::reports_to_csv(reports);
    if (a.out.empty()) {
        out << csv;
    } else {
        io::atomic_write(a.out, csv);
        out << "evaluated " << reports.size() << " cases, mean dice " << metrics::mean_dice(reports) << ", wrote "
            << a.out << "\n";
    }
    return kOk;
}

struct CamArgs {
    std::string checkpoint, data, out = "cams";
    int figures = 3;
};

int cmd_viz_cam(const CamArgs& a, std::ostream& out) {
    auto model = load_model(a.checkpoint);
    auto manifest = load_validated_manifest(a.data);
    auto samples = io::load_dataset(manifest);
    const fs::path dir(a.out);
    const int P = model->base_config().patch_size;
    int written = 0;
    for (size_t c = 0; c < samples.size() && static_cast<int>(c) < a.figures; ++c) {
        const auto& s = samples[c];
        const auto origin = train::centered_origin(s.spatial_shape(), P);
        const auto inputs = train::window_inputs(*model, s, origin);
        for (const auto& region : model->regions().regions) {
            const size_t seg = interp::segmentor_for(*model, region);
            std::vector<interp::HeatmapStack> maps;
            try {
                maps = interp::extract_complementary_cams(*model, inputs, seg, region);
            } catch (const interp::ZeroRegionError& e) {
                out << "skip " << s.case_id << " " << region.name << ": " << e.what() << "\n";
                continue;
            }
            interp::normalize_jointly(maps);
            const int zoom = std::max(1, 128 / P);
            const int S = P * zoom, gap = 4;
            png::Canvas cv(2 * S + 3 * gap, static_cast<int>(maps.size()) * (S + gap) + gap);
            for (size_t r = 0; r < maps.size(); ++r) {
                const int y = gap + static_cast<int>(r) * (S + gap);
                size_t m = 0;
                while (model->assignment().entries[m].primary.name != maps[r].aux_modality) ++m;
                Tensor<float> img = inputs[m];
                img.reshape(Shape(static_cast<size_t>(model->base_config().spatial_dims), P));
                const auto slice = png::mid_slice(img);
                const auto [lo, hi] = std::minmax_element(slice.values().begin(), slice.values().end());
                cv.blit_gray(slice, gap, y, *lo, *hi, zoom);
                cv.blit_ramp(png::mid_slice(maps[r].zeta.cast<float>()), 2 * gap + S, y, 0.0, 1.0, zoom);
            }
            const fs::path file = dir / (s.case_id + "_" + region.name + "_" + maps.front().segmentor + ".png");
            cv.save(file);
            ++written;
        }
    }
    const auto table = interp::average_weights(*model, samples);
    json j;
    j["averaged_over"] = "evaluation set";
    j["cases"] = samples.size();
    for (const auto& [region, w] : table.weights) {
        j["regions"][region]["segmentor"] = table.segmentor.at(region);
        j["regions"][region]["samples"] = table.samples.at(region);
        j["regions"][region]["weights"] = w;
    }
    io::atomic_write(dir / "weights.json", j.dump(2) + "\n");
    out << "wrote " << written << " heatmap panels and " << (dir / "weights.json").string() << "\n";
    for (const auto& [region, w] : table.weights) {
        out << region << " (" << table.segmentor.at(region) << ", " << table.samples.at(region) << " cases):";
        for (const auto& [mod, v] : w) out << " " << mod << "=" << std::fixed << std::setprecision(3) << v;
        out << "\n";
    }
    return kOk;
}

int cmd_viz_weights(const std::string& weights, const std::string& out_path, std::ostream& out) {
    json j;
    try {
        j = json::parse(io::read_file(weights));
    } catch (const json::parse_error& e) {
        throw ValidationError(weights + ": " + e.what());
    }
    if (!j.contains("regions")) throw ValidationError(weights + ": missing field 'regions'");
    std::vector<std::string> mods;
    for (const auto& [region, r] : j["regions"].items()) {
        for (const auto& [mod, _] : r.at("weights").items()) {
            if (std::find(mods.begin(), mods.end(), mod) == mods.end()) mods.push_back(mod);
        }
    }
    std::sort(mods.begin(), mods.end());
    const int bar = 16, gap = 24, H = 200, pad = 10;
    const int groups = static_cast<int>(j["regions"].size());
    const int W = pad * 2 + groups * (static_cast<int>(mods.size()) * bar + gap);
    png::Canvas cv(std::max(W, 32), H + 2 * pad);
    cv.fill_rect(pad, pad + H, W - 2 * pad, 1, {0, 0, 0});
    int x = pad;
    for (const auto& [region, r] : j["regions"].items()) {
        out << region << ":";
        for (size_t m = 0; m < mods.size(); ++m) {
            const double v = r.at("weights").value(mods[m], 0.0);
            const int h = static_cast<int>(v * H + 0.5);
            const double t = mods.size() > 1 ? static_cast<double>(m) / static_cast<double>(mods.size() - 1) : 0.0;
            cv.fill_rect(x + static_cast<int>(m) * bar, pad + H - h, bar - 2, h, png::ramp(t));
            out << " " << mods[m] << "=" << std::fixed << std::setprecision(3) << v;
        }
        out << "\n";
        x += static_cast<int>(mods.size()) * bar + gap;
    }
    cv.save(out_path);
    out << "bar order per group: ";
    for (const auto& m : mods) out << m << " ";
    out << "\nwrote " << out_path << "\n";
    return kOk;
}

}  // namespace

TrainingRun run_training(const RunConfig& cfg, std::ostream& log) {
    cfg.training.validate();
    auto manifest = load_validated_manifest(cfg.data_root);
    const TaskAssignment assignment = resolve_assignment(cfg.assignment, manifest.modalities, manifest.regions);
    auto report = validate_assignment(assignment, manifest.regions.regions);
    if (!report.ok()) throw ValidationError("task assignment: " + report.summary());
    ArchitectureConfig arch = cfg.architecture;
    arch.validate();
    auto data = io::load_dataset(manifest);
    if (data.empty()) throw ValidationError("dataset " + cfg.data_root.string() + " has no cases");
    for (const auto& s : data) {
        if (static_cast<int>(s.spatial_shape().size()) != arch.spatial_dims) {
            throw ValidationError("case " + s.case_id + " has " + std::to_string(s.spatial_shape().size()) +
                                  " axes but spatial_dims is " + std::to_string(arch.spatial_dims));
        }
    }
    auto state = train::make_train_state(assignment, manifest.regions, arch, cfg.training);
    fs::create_directories(cfg.output_dir);
    std::ofstream jsonl(cfg.output_dir / "train_log.jsonl");
    if (!jsonl) throw io::IoError("cannot open " + (cfg.output_dir / "train_log.jsonl").string());
    TrainingRun run;
    auto ckpt_json = [&](int epoch) {
        json j{{"kind", "ciml"}, {"epoch", epoch}, {"model", json::parse(state.model->config_json())}};
        return j.dump();
    };
    for (int e = 0; e < cfg.training.max_epoch; ++e) {
        auto recs = train::train_epoch(state, data, cfg.training, &jsonl);
        double total = 0;
        for (const auto& r : recs) {
            for (const auto& b : r.per_segmentor) total += b.total;
        }
        log << "epoch " << e << " lr " << recs.front().lr << " mean loss " << total / static_cast<double>(recs.size())
            << "\n";
        if (cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0) {
            const fs::path p = cfg.output_dir / ("epoch" + std::to_string(e + 1) + ".ckpt");
            save_checkpoint(p, state.model->params(), ckpt_json(e + 1));
            run.checkpoints.push_back(p);
        }
    }
    const fs::path final_path = cfg.output_dir / "final.ckpt";
    save_checkpoint(final_path, state.model->params(), ckpt_json(cfg.training.max_epoch));
    run.checkpoints.push_back(final_path);
    run.epochs = cfg.training.max_epoch;
    run.model = std::move(state.model);
    return run;
}

std::unique_ptr<train::CimlModel<float>> load_model(const fs::path& checkpoint) {
    json j;
    try {
        j = json::parse(read_checkpoint_config(checkpoint));
    } catch (const json::parse_error& e) {
        throw io::IoError(checkpoint.string() + ": config is not valid JSON");
    }
    if (j.value("kind", "") != "ciml") throw ValidationError(checkpoint.string() + " is not a segmentation checkpoint");
    auto model = train::CimlModel<float>::from_config_json(j.at("model").dump());
    load_checkpoint(checkpoint, model->params());
    return model;
}

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Complementary information mutual learning for multimodal segmentation", "ciml"};
    app.require_subcommand(1);

    auto* oracle_cmd = app.add_subcommand("oracle", "Exact information-theoretic checks");
    oracle_cmd->require_subcommand(1);
    OracleArgs oa;
    auto* verify = oracle_cmd->add_subcommand("verify", "Check the decomposition and bounds on random networks");
    verify->add_option("--nets", oa.nets, "number of random networks")->check(CLI::PositiveNumber);
    verify->add_option("--seed", oa.seed, "random seed");
    verify->add_option("--tol", oa.tol, "absolute tolerance");

    auto* demo_cmd = app.add_subcommand("demo", "Demonstration tasks");
    demo_cmd->require_subcommand(1);
    DemoArgs da;
    auto* shapes_cmd = demo_cmd->add_subcommand("shapes", "Triangle/ellipse union task");
    shapes_cmd->add_flag("--generate", da.generate, "generate the dataset");
    shapes_cmd->add_flag("--train", da.train, "train the demo model");
    shapes_cmd->add_flag("--evaluate", da.evaluate, "evaluate on the held-out split");
    shapes_cmd->add_flag("--export-figures", da.figures, "write the panel PNG");
    shapes_cmd->add_option("--n", da.n, "number of pairs")->check(CLI::PositiveNumber);
    shapes_cmd->add_option("--size", da.size, "image size");
    shapes_cmd->add_option("--seed", da.seed, "random seed");
    shapes_cmd->add_option("--data", da.data, "dataset directory");
    shapes_cmd->add_option("--model", da.model, "checkpoint path (default <data>/model.ckpt)");
    shapes_cmd->add_option("--figure", da.figure, "figure path (default <data>/complementary.png)");
    shapes_cmd->add_option("--rows", da.rows, "figure rows")->check(CLI::PositiveNumber);
    shapes_cmd->add_option("--epochs", da.train_cfg.epochs, "training epochs")->check(CLI::PositiveNumber);
    shapes_cmd->add_option("--iterations", da.train_cfg.iterations_per_epoch, "iterations per epoch")
        ->check(CLI::PositiveNumber);
    shapes_cmd->add_option("--batch", da.train_cfg.batch_size, "batch size")->check(CLI::PositiveNumber);
    shapes_cmd->add_option("--beta", da.train_cfg.beta, "KL weight")->check(CLI::NonNegativeNumber);
    shapes_cmd->add_option("--lr", da.train_cfg.initial_lr, "initial learning rate")->check(CLI::PositiveNumber);
    shapes_cmd->add_option("--filters", da.model_cfg.filters, "base filters")->check(CLI::PositiveNumber);

    auto* synth_cmd = app.add_subcommand("synth", "Synthetic multimodal volumes");
    synth_cmd->require_subcommand(1);
    SynthArgs sa;
    auto* gen = synth_cmd->add_subcommand("generate", "Write a synthetic dataset");
    gen->add_option("--out", sa.out, "output directory");
    gen->add_option("--cases", sa.cfg.n_cases, "number of cases")->check(CLI::PositiveNumber);
    gen->add_option("--size", sa.cfg.size, "edge length (multiple of 16)");
    gen->add_option("--dims", sa.cfg.spatial_dims, "spatial dimensions (2 or 3)");
    gen->add_option("--noise", sa.cfg.noise_sigma, "Gaussian noise sigma");
    gen->add_option("--seed", sa.cfg.seed, "random seed");

    auto* train_cmd = app.add_subcommand("train", "Train from a JSON config");
    std::string config_path;
    std::optional<uint64_t> train_seed;
    train_cmd->add_option("--config", config_path, "config file")->required();
    train_cmd->add_option("--seed", train_seed, "override training.seed");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    EvalArgs ea;
    eval_cmd->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--data", ea.data, "dataset root")->required();
    eval_cmd->add_option("--out", ea.out, "CSV path (default stdout)");

    auto* cam_cmd = app.add_subcommand("viz-cam", "Grad-CAM complementary information maps");
    CamArgs ca;
    cam_cmd->add_option("--checkpoint", ca.checkpoint, "checkpoint file")->required();
    cam_cmd->add_option("--data", ca.data, "dataset root")->required();
    cam_cmd->add_option("--out", ca.out, "output directory");
    cam_cmd->add_option("--figures", ca.figures, "cases to render")->check(CLI::NonNegativeNumber);

    auto* weights_cmd = app.add_subcommand("viz-weights", "Bar chart of complementary information weights");
    std::string weights_path, weights_out = "weights.png";
    weights_cmd->add_option("--weights", weights_path, "weights.json written by viz-cam")->required();
    weights_cmd->add_option("--out", weights_out, "PNG path");

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::Success& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        err << kErrorPrefix << "usage: " << one_line(e.what()) << std::endl;
        return kUsage;
    }

    try {
        if (verify->parsed()) return cmd_oracle(oa, out);
        if (shapes_cmd->parsed()) return cmd_demo(da, out);
        if (gen->parsed()) return cmd_synth(sa, out);
        if (train_cmd->parsed()) return cmd_train(config_path, train_seed, out);
        if (eval_cmd->parsed()) return cmd_eval(ea, out);
        if (cam_cmd->parsed()) return cmd_viz_cam(ca, out);
        if (weights_cmd->parsed()) return cmd_viz_weights(weights_path, weights_out, out);
    } catch (const ConfigError& e) {
        err << kErrorPrefix << one_line(e.what()) << std::endl;
        return kValidation;
    } catch (const ValidationError& e) {
        err << kErrorPrefix << one_line(e.what()) << std::endl;
        return kValidation;
    } catch (const io::IoError& e) {
        err << kErrorPrefix << one_line(e.what()) << std::endl;
        return kValidation;
    } catch (const std::invalid_argument& e) {
        err << kErrorPrefix << one_line(e.what()) << std::endl;
        return kValidation;
    } catch (const std::exception& e) {
        err << kErrorPrefix << one_line(e.what()) << std::endl;
        return kRuntime;
    }
    err << kErrorPrefix << "no command selected" << std::endl;
    return kUsage;
}

int cli_dispatch(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return cli_dispatch(args, std::cout, std::cerr);
}

}  // namespace ciml::cli
