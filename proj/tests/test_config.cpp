#include <cmath>

#include "ciml/config.hpp"
#include "doctest.h"

using namespace ciml;

namespace {

RegionSet brats_regions() { return {{{"WT", 1}, {"TC", 2}, {"ET", 3}}, true}; }

TaskAssignment brats_default() {
    auto r = brats_regions();
    return {{{{"FLAIR", 0}, {r.find("WT")}},
             {{"T1", 1}, {r.find("TC")}},
             {{"T2", 2}, {r.find("WT"), r.find("TC")}},
             {{"T1CE", 3}, {r.find("TC"), r.find("ET")}}}};
}

}  // namespace

TEST_CASE("validate_assignment") {
    auto regions = brats_regions();
    CHECK(validate_assignment(brats_default(), regions.regions).ok());

    RegionSet single{{{"union", 1}}, false};
    TaskAssignment one{{{{"shapeA", 0}, {single.regions[0]}}}};
    CHECK(validate_assignment(one, single.regions).ok());

    auto no_et = brats_default();
    no_et.entries[3].targets = {regions.find("TC")};
    auto report = validate_assignment(no_et, regions.regions);
    REQUIRE_FALSE(report.ok());
    CHECK(report.violations.size() == 1);
    CHECK(report.violations[0] == "region ET uncovered");

    auto dup = brats_default();
    dup.entries[1].primary = {"FLAIR", 1};
    dup.entries[2].targets.clear();
    auto r2 = validate_assignment(dup, regions.regions);
    CHECK(r2.violations.size() == 2);
}

TEST_CASE("poly_lr") {
    CHECK(poly_lr(1e-4, 0, 500) == 1e-4);
    CHECK(poly_lr(1e-4, 500, 500) == 0.0);
    CHECK(poly_lr(1e-4, 250, 500) == doctest::Approx(5.358867312681466e-05).epsilon(1e-12));
    CHECK_THROWS_AS(poly_lr(1e-4, 501, 500), std::domain_error);
    CHECK_THROWS_AS(poly_lr(1e-4, -1, 500), std::domain_error);
    CHECK_THROWS_AS(poly_lr(1e-4, 0, 0), std::domain_error);
    double prev = poly_lr(1e-3, 0, 37);
    for (int e = 1; e <= 37; ++e) {
        double cur = poly_lr(1e-3, e, 37);
        CHECK(cur <= prev);
        CHECK(cur >= 0.0);
        prev = cur;
    }
}

TEST_CASE("region membership and label remap") {
    auto regions = brats_regions();
    CHECK(regions.num_classes() == 4);
    CHECK(regions.contains(3, regions.find("WT")));
    CHECK_FALSE(regions.contains(1, regions.find("TC")));
    CHECK(regions.validate().empty());

    LabelRemap t2(regions, {regions.find("TC"), regions.find("WT")});
    CHECK(t2.targets()[0].name == "WT");
    CHECK(t2.out_channels() == 3);
    CHECK(t2.local_label(0) == 0);
    CHECK(t2.local_label(1) == 1);
    CHECK(t2.local_label(2) == 2);
    CHECK(t2.local_label(3) == 2);

    LabelRemap flair(regions, {regions.find("WT")});
    CHECK(flair.local_label(3) == 1);

    RegionSet flat{{{"A", 1}, {"B", 2}}, false};
    LabelRemap b(flat, {flat.find("B")});
    CHECK(b.local_label(1) == 0);
    CHECK(b.local_label(2) == 1);

    RegionSet broken{{{"A", 1}, {"A", 3}}, false};
    CHECK(broken.validate().size() == 2);
}

TEST_CASE("architecture and training validation") {
    ArchitectureConfig a;
    CHECK_NOTHROW(a.validate());
    CHECK(a.stage_channels(4) == 192);
    CHECK(a.stage_extent(1) == 32);
    a.patch_size = 40;
    CHECK_THROWS_AS(a.validate(), std::domain_error);
    a.patch_size = 16;
    a.cig_enabled = false;
    a.message_count = 2;
    CHECK_THROWS_AS(a.validate(), std::domain_error);

    TrainConfig t;
    CHECK_NOTHROW(t.validate());
    t.beta_kl = -1;
    CHECK_THROWS_AS(t.validate(), std::domain_error);
    t.beta_kl = 0.5;
    t.adam_betas = {0.9, 1.0};
    CHECK_THROWS_AS(t.validate(), std::domain_error);
}

TEST_CASE("volume sample validation") {
    VolumeSample s{"c0", {{"A", Tensor<float>({2, 2})}, {"B", Tensor<float>({2, 2})}}, Tensor<uint8_t>({2, 2})};
    CHECK_NOTHROW(s.validate(2));
    s.mask[0] = 2;
    CHECK_THROWS_AS(s.validate(2), std::domain_error);
    s.mask[0] = 0;
    s.volumes["B"] = Tensor<float>({2, 3});
    CHECK_THROWS_AS(s.validate(2), std::domain_error);
}

TEST_CASE("run config parsing") {
    const char* text = R"({
      "assignment": {"FLAIR": ["WT"], "T1CE": ["TC", "ET"]},
      "architecture": {"patch_size": 32, "base_filters": 4, "norm": "batch"},
      "training": {"max_epoch": 3, "beta_kl": 0.25, "adam_betas": [0.8, 0.99]},
      "data": {"root": "/tmp/data"},
      "output": {"dir": "/tmp/out", "checkpoint_every": 2}
    })";
    auto cfg = parse_run_config(text);
    CHECK(cfg.assignment.size() == 2);
    CHECK(cfg.assignment[1].second == std::vector<std::string>{"TC", "ET"});
    CHECK(cfg.architecture.patch_size == 32);
    CHECK(cfg.architecture.norm_kind == NormKind::batch);
    CHECK(cfg.training.max_epoch == 3);
    CHECK(cfg.training.adam_betas.first == 0.8);
    CHECK(cfg.training.iterations_per_epoch == 100);
    CHECK(cfg.checkpoint_every == 2);

    CHECK_THROWS_WITH_AS(parse_run_config(R"({"assignment": {"A": ["x"]}, "architecture": {"depth": 3},
        "training": {}, "data": {"root": "d"}})"),
                         doctest::Contains("unknown key 'depth'"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("{"), ConfigError);
    CHECK_THROWS_AS(parse_run_config(R"({"assignment": {"A": ["x"]}, "architecture": {}, "training": {}})"),
                    ConfigError);
    CHECK_THROWS_AS(parse_run_config(R"({"assignment": {"A": ["x"]}, "architecture": {},
        "training": {"beta_kl": -2}, "data": {"root": "d"}})"),
                    ConfigError);
    CHECK_THROWS_AS(load_run_config("/nonexistent/missing.json"), ConfigError);

    auto regions = brats_regions();
    std::vector<ModalityId> mods{{"FLAIR", 0}, {"T1", 1}, {"T2", 2}, {"T1CE", 3}};
    auto a = resolve_assignment(cfg.assignment, mods, regions);
    CHECK(a.entries[1].primary.index == 3);
    CHECK(a.entries[1].targets[1].class_index == 3);
    CHECK_THROWS_AS(resolve_assignment({{"PET", {"WT"}}}, mods, regions), ConfigError);
    CHECK_THROWS_AS(resolve_assignment({{"T1", {"XX"}}}, mods, regions), ConfigError);
}
