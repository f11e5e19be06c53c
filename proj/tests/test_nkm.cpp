#include <doctest.h>

#include <cmath>
#include <random>

#include "nlkacz/nkm.hpp"
#include "oracles.hpp"

using namespace nlkacz;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Index>(v.size()));
    Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

CallbackSystem circles() {
    return CallbackSystem(2, 2, [](Index j, const Vector& x, Vector* g) {
        const double cx = j == 0 ? 0.0 : 1.0;
        if (g) *g = Vector{{2.0 * (x[0] - cx), 2.0 * x[1]}};
        return (x[0] - cx) * (x[0] - cx) + x[1] * x[1] - 1.0;
    });
}

}  // namespace

TEST_CASE("cyclic selection wraps around") {
    CHECK(select_cyclic(0, 3) == 0);
    CHECK(select_cyclic(3, 3) == 0);
    CHECK(select_cyclic(5, 3) == 2);
    CHECK_THROWS_AS(select_cyclic(0, 0), Error);
}

TEST_CASE("max residual picks the largest magnitude, lowest index on ties") {
    CHECK(select_max_residual(vec({0.1, -0.5, 0.3})) == 1);
    CHECK(select_max_residual(vec({0.0, 0.0, 0.0})) == 0);
    CHECK(select_max_residual(vec({-2.0, 2.0})) == 0);
}

TEST_CASE("theta residual") {
    const Vector r = vec({0.1, -0.5, 0.3});
    // threshold = sqrt(0.35) / sqrt(3) = 0.34157...
    CHECK(select_theta_residual(r, 1.0 / std::sqrt(3.0)) == 1);
    CHECK(select_theta_residual(r, 0.1) == 0);  // 0.1 >= 0.0592
    try {
        select_theta_residual(vec({0.0, 0.0}), 0.5);
        FAIL("expected ZeroResidual");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::ZeroResidual);
    }
    CHECK_THROWS_AS(select_theta_residual(r, 0.9), Error);
    CHECK_THROWS_AS(select_theta_residual(r, 0.0), Error);
}

TEST_CASE("positive cyclic scans after the cursor and falls back to argmax") {
    auto pick = select_positive_cyclic(0, vec({-1.0, 0.5, 0.2}), 0.0);
    CHECK(pick.index == 1);
    CHECK(pick.cursor == 1);
    CHECK_FALSE(pick.fallback);

    pick = select_positive_cyclic(1, vec({-1.0, 0.5, 0.2}), 0.0);
    CHECK(pick.index == 2);

    pick = select_positive_cyclic(0, vec({-1.0, -0.5}), 1e-12);
    CHECK(pick.index == 0);
    CHECK(pick.fallback);

    try {
        select_positive_cyclic(0, vec({0.0, 0.0}), 0.0);
        FAIL("expected ZeroResidual");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::ZeroResidual);
    }
}

TEST_CASE("orthogonal hyperplanes converge in one sweep") {
    AffineSystem sys(Matrix::Identity(2, 2), vec({1.0, 2.0}));
    const auto trace = run(sys, Vector::Zero(2), {StrategyKind::Cyclic}, {10, 0.0, 1e-14});
    CHECK(trace.iterations == 2);
    CHECK(trace.reason == Termination::Converged);
    CHECK(trace.final_point[0] == 1.0);
    CHECK(trace.final_point[1] == 2.0);
    REQUIRE(trace.records.size() == 2);
    CHECK(trace.records[0].selected == 0);
    CHECK(trace.records[1].selected == 1);
}

TEST_CASE("two circles meet at (1/2, sqrt 3 / 2)") {
    auto sys = circles();
    const auto trace = run(sys, vec({0.6, 0.9}), {StrategyKind::MaxResidual}, {200, 1e-14, 1e-14});
    CHECK(trace.reason == Termination::Converged);
    CHECK((trace.final_point - oracle::circle_intersection()).norm() <= 1e-8);
}

TEST_CASE("every strategy solves the circle system") {
    for (auto kind : {StrategyKind::Cyclic, StrategyKind::MaxResidual, StrategyKind::ThetaResidual,
                      StrategyKind::PositiveCyclic}) {
        CAPTURE(to_string(kind));
        auto sys = circles();
        const auto trace = run(sys, vec({0.6, 0.9}), {kind}, {500, 1e-13, 1e-14});
        CHECK(trace.reason == Termination::Converged);
        CHECK((trace.final_point - oracle::circle_intersection()).norm() <= 1e-8);
    }
}

TEST_CASE("vanishing gradient is reported with its iteration") {
    CallbackSystem sys(2, 2, [](Index j, const Vector& x, Vector* g) {
        if (j == 0) {
            if (g) *g = Vector::Zero(2);
            return 5.0;
        }
        if (g) *g = Vector::Ones(2);
        return x.sum();
    });
    try {
        run(sys, Vector::Zero(2), {StrategyKind::MaxResidual}, {10, 0.0, 1e-14});
        FAIL("expected GradientVanished");
    } catch (const IterationError& e) {
        CHECK(e.code() == Errc::GradientVanished);
        CHECK(e.iteration() == 0);
        CHECK(e.component() == 0);
    }
    CHECK_THROWS_AS(nkm_step(sys, Vector::Zero(2), 0), Error);
}

TEST_CASE("start at the solution stops immediately") {
    AffineSystem sys(Matrix::Identity(3, 3), vec({1.0, 2.0, 3.0}));
    const auto trace = run(sys, vec({1.0, 2.0, 3.0}), {StrategyKind::MaxResidual}, {10, 0.0, 1e-14});
    CHECK(trace.iterations == 0);
    CHECK(trace.records.empty());
    CHECK(trace.epochs_started() == 0);
}

TEST_CASE("epoch budget counts J iterations per epoch") {
    auto sys = circles();
    const auto trace = run(sys, vec({3.0, -2.0}), {StrategyKind::Cyclic}, {3, 0.0, 1e-14});
    CHECK(trace.reason == Termination::MaxEpochs);
    CHECK(trace.iterations == 6);
    CHECK(trace.epochs_started() == 3);
}

TEST_CASE("epoch hook can end a run") {
    auto sys = circles();
    RunOptions opt;
    Index calls = 0;
    opt.on_epoch = [&](Index epoch, double, double) {
        ++calls;
        return epoch == 2;
    };
    const auto trace = run(sys, vec({3.0, -2.0}), {StrategyKind::Cyclic}, {50, 0.0, 1e-14}, opt);
    CHECK(trace.reason == Termination::Stopped);
    CHECK(trace.iterations == 4);
    CHECK(calls == 2);
}

TEST_CASE("trace distance uses the known solution") {
    AffineSystem sys(Matrix::Identity(2, 2), vec({1.0, 2.0}));
    sys.set_known_solution(vec({1.0, 2.0}));
    const auto trace = run(sys, Vector::Zero(2), {StrategyKind::Cyclic}, {10, 0.0, 1e-14});
    REQUIRE(trace.records.size() == 2);
    CHECK(trace.records[0].distance == doctest::Approx(std::sqrt(5.0)).epsilon(1e-15));
    CHECK(trace.records[1].distance == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(trace.final_distance == 0.0);
}

TEST_CASE("input validation") {
    AffineSystem sys(Matrix::Identity(2, 2), vec({1.0, 2.0}));
    CHECK_THROWS_AS(run(sys, Vector::Zero(3), {}, {}), Error);
    CHECK_THROWS_AS(run(sys, Vector::Zero(2), {}, {0, 0.0, 1e-14}), Error);
    CHECK_THROWS_AS(nkm_step(sys, Vector::Zero(2), 2), Error);
    CHECK_THROWS_AS(AffineSystem(Matrix::Identity(2, 2), Vector::Zero(3)), Error);
    CHECK(strategy_from_string("theta_residual") == StrategyKind::ThetaResidual);
    CHECK_THROWS_AS(strategy_from_string("random"), Error);
}

TEST_CASE("single step hits the linearization zero") {
    auto sys = circles();
    const Vector x = vec({0.3, 1.7});
    const Vector y = nkm_step(sys, x, 1);
    Vector g(2);
    const double f = (x[0] - 1.0) * (x[0] - 1.0) + x[1] * x[1] - 1.0;
    g << 2.0 * (x[0] - 1.0), 2.0 * x[1];
    CHECK(std::abs(f + g.dot(y - x)) <= 1e-12 * (1.0 + std::abs(f)));
}
