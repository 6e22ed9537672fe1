#include "jdp/error.hpp"
#include "jdp/io.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

using namespace jdp;
using jdp::io::json;

TEST(Io, MalformedJsonReportsLineAndColumn)
{
    test::TempDir dir("json");
    test::write_file(dir / "bad.json", "{\n  \"n\": 10,\n  \"seed\": ,\n}\n");
    try {
        io::read_json_file(dir / "bad.json");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.row(), 3u);
        EXPECT_EQ(e.column(), 11u);
    }
    EXPECT_THROW(io::read_json_file(dir / "missing.json"), Error);
}

TEST(Io, WriteAtomicLeavesNoTemporary)
{
    test::TempDir dir("atomic");
    io::write_atomic(dir / "a.txt", "one");
    io::write_atomic(dir / "a.txt", "two");
    EXPECT_EQ(test::read_file(dir / "a.txt"), "two");
    EXPECT_FALSE(std::filesystem::exists(dir / "a.txt.tmp"));
}

TEST(Io, DigestIsStableAndSensitive)
{
    const json a{{"x", 1}, {"y", {1.5, 2.5}}};
    json b = a;
    EXPECT_EQ(io::config_digest(a), io::config_digest(b));
    EXPECT_EQ(io::config_digest(a).size(), 16u);
    b["x"] = 2;
    EXPECT_NE(io::config_digest(a), io::config_digest(b));
    // FNV-1a of "{}" pinned from the published offset basis and prime
    EXPECT_EQ(io::config_digest(json::object()), "08f44b07b5901a25");
}

TEST(Io, ScenarioRoundTripAndPresets)
{
    const auto s = io::scenario_from_json(json{{"scenario", 2}, {"n", 50}, {"seed", 9}, {"generator_mode", "numeric"}});
    EXPECT_EQ(s.config.n, 50);
    EXPECT_EQ(s.seed, 9u);
    EXPECT_EQ(s.mode, simgen::GeneratorMode::numeric);
    EXPECT_EQ(s.config.event.gamma1, 3.5);
    EXPECT_EQ(s.config.event.censor_upper, 4.0);
    const auto back = io::scenario_from_json(io::to_json(s));
    EXPECT_EQ(io::to_json(back), io::to_json(s));
}

TEST(Io, ScenarioRejectsUnknownKeysAndBadValues)
{
    EXPECT_THROW(io::scenario_from_json(json{{"nn", 5}}), InvalidArgument);
    EXPECT_THROW(io::scenario_from_json(json{{"n", "five"}}), InvalidArgument);
    EXPECT_THROW(io::scenario_from_json(json{{"tau01", 1.5}}), InvalidArgument);
    EXPECT_THROW(io::scenario_from_json(json::array()), InvalidArgument);
}

TEST(Io, TuningConfigRoundTrip)
{
    const json j{{"mp_grid", {0.2, 1.0}},
                 {"K", 4},
                 {"W", 3},
                 {"t", 1.0},
                 {"u", 3.0},
                 {"n_mc", 100},
                 {"master_seed", 42},
                 {"mcmc", {{"n_iterations", 800}, {"n_burnin", 300}}},
                 {"model", {{"n_internal_knots", 4}}}};
    const auto c = io::tuning_config_from_json(j);
    EXPECT_EQ(c.mp_grid, (std::vector<double>{0.2, 1.0}));
    EXPECT_EQ(c.K, 4);
    EXPECT_EQ(c.model.mcmc.n_iterations, 800);
    EXPECT_EQ(c.model.n_internal_knots, 4);
    EXPECT_EQ(c.model.mcmc.n_thin, 2); // default kept
    const auto again = io::tuning_config_from_json(io::to_json(c));
    EXPECT_EQ(io::to_json(again), io::to_json(c));
    EXPECT_THROW(io::tuning_config_from_json(json{{"mcmc", {{"steps", 5}}}}), InvalidArgument);
    EXPECT_THROW(io::tuning_config_from_json(json{{"K", 1}}), InvalidArgument);
}

TEST(Io, JointFitRoundTripIsExact)
{
    joint::JointModelSpec spec;
    spec.mcmc.n_iterations = 200;
    spec.mcmc.n_burnin = 100;
    spec.mcmc.seed = 3;
    const auto fit = joint::fit_joint(test::scenario_cohort(1, 50, 2), spec);
    const auto text = io::to_json(fit).dump();
    const auto back = io::joint_fit_from_json(json::parse(text));
    ASSERT_EQ(back.draws.size(), fit.draws.size());
    for (std::size_t i = 0; i < fit.draws.size(); ++i) ASSERT_EQ(back.flatten(back.draws[i]), fit.flatten(fit.draws[i]));
    EXPECT_EQ(back.basis.interior_knots(), fit.basis.interior_knots());
    EXPECT_EQ(back.covariate_names, fit.covariate_names);
    EXPECT_EQ(back.spec.mcmc.seed, 3u);

    auto broken = json::parse(text);
    broken["columns"][0] = "b0";
    EXPECT_THROW(io::joint_fit_from_json(broken), InvalidArgument);
    broken.erase("spec");
    EXPECT_THROW(io::joint_fit_from_json(broken), InvalidArgument);
}

TEST(Io, TuningEntryNullsForMissingValues)
{
    tuner::TuningEntry e;
    e.mp = 0.2;
    e.se = std::numeric_limits<double>::quiet_NaN();
    const auto j = io::to_json(e);
    EXPECT_TRUE(j["se"].is_null());
    EXPECT_TRUE(j["ci95"].is_null());
    EXPECT_FALSE(j["feasible"].get<bool>());
}
