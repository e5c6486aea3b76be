#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "s2il/metrics.hpp"

using namespace s2il;
using Catch::Approx;

namespace {

RunRecord record_from(const std::vector<std::vector<double>>& rows,
                      const std::vector<std::size_t>& class_counts) {
    RunRecord r;
    for (std::size_t t = 0; t < rows.size(); ++t) r.append_task(rows[t], class_counts[t]);
    return r;
}

RunRecord random_record(std::mt19937_64& rng, std::size_t tasks) {
    std::uniform_real_distribution<double> acc(0.0, 1.0);
    RunRecord r;
    for (std::size_t t = 0; t < tasks; ++t) {
        std::vector<double> row(t + 1);
        for (double& v : row) v = acc(rng);
        r.append_task(row, 1 + rng() % 4);
    }
    return r;
}

}  // namespace

TEST_CASE("aia is the mean overall accuracy in percent", "[metrics]") {
    // single-task rows with one class each: overall equals the row accuracy
    const RunRecord r = record_from({{0.9}, {0.8, 0.8}, {0.7, 0.7, 0.7}}, {1, 1, 1});
    REQUIRE(r.overall.size() == 3);
    REQUIRE(r.overall[0] == Approx(0.9).margin(1e-12));
    REQUIRE(r.overall[1] == Approx(0.8).margin(1e-12));
    REQUIRE(r.overall[2] == Approx(0.7).margin(1e-12));
    REQUIRE(aia(r) == Approx(80.0).margin(1e-12));

    const RunRecord single = record_from({{0.65}}, {3});
    REQUIRE(aia(single) == Approx(65.0).margin(1e-12));
}

TEST_CASE("overall accuracy is the class-count-weighted row mean", "[metrics]") {
    RunRecord r = record_from({{0.9}, {0.6, 1.0}}, {3, 1});
    REQUIRE(r.overall[1] == Approx((0.6 * 3 + 1.0 * 1) / 4.0).margin(1e-12));
}

TEST_CASE("incomplete records are rejected", "[metrics]") {
    RunRecord r;
    REQUIRE_THROWS_AS(aia(r), ContractError);
    REQUIRE_THROWS_AS(r.append_task({0.5, 0.5}, 1), ContractError);   // wrong row length
    REQUIRE_THROWS_AS(r.append_task({1.5}, 1), ContractError);        // out of range
    r.append_task({0.5}, 1);
    REQUIRE_THROWS_AS(bt(r), ContractError);  // needs an incremental task
    REQUIRE_THROWS_AS(fgt(r), ContractError);
}

TEST_CASE("bt is zero without accuracy change and linear in shifts", "[metrics]") {
    const RunRecord flat = record_from({{0.8}, {0.8, 0.9}, {0.8, 0.9, 0.7}}, {1, 1, 1});
    REQUIRE(bt(flat) == Approx(0.0).margin(1e-12));

    const RunRecord two = record_from({{0.9}, {0.8, 0.95}}, {1, 1});
    REQUIRE(bt(two) == Approx(-10.0).margin(1e-12));

    // raising every final-row accuracy by delta raises bt by 100*delta
    const double delta = 0.04;
    const RunRecord shifted = record_from({{0.9}, {0.8 + delta, 0.95}}, {1, 1});
    REQUIRE(bt(shifted) == Approx(bt(two) + 100.0 * delta).margin(1e-9));
}

TEST_CASE("fgt examples", "[metrics]") {
    // monotone nondecreasing columns forget nothing
    const RunRecord mono =
        record_from({{0.5}, {0.6, 0.4}, {0.7, 0.5, 0.9}}, {1, 1, 1});
    REQUIRE(fgt(mono) == Approx(0.0).margin(1e-12));

    // one column peaks at 0.9 and ends at 0.7; the other column is flat
    const RunRecord peak =
        record_from({{0.9}, {0.9, 0.8}, {0.7, 0.8, 0.6}}, {1, 1, 1});
    REQUIRE(fgt(peak) == Approx((0.2 + 0.0) / 2.0 * 100.0).margin(1e-9));
    REQUIRE(fgt(peak) >= 0.0);
}

TEST_CASE("fgt equals negative bt when every column peaks at its diagonal", "[metrics]") {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> acc(0.2, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t tasks = 2 + rng() % 4;
        RunRecord r;
        std::vector<double> diag;
        for (std::size_t t = 0; t < tasks; ++t) {
            std::vector<double> row(t + 1);
            const double d = acc(rng);
            for (std::size_t i = 0; i < t; ++i)
                row[i] = diag[i] * std::uniform_real_distribution<double>(0.3, 1.0)(rng);
            row[t] = d;
            diag.push_back(d);
            r.append_task(row, 1);
        }
        REQUIRE(fgt(r) == Approx(-bt(r)).margin(1e-9));
    }
}

TEST_CASE("metrics are invariant to class relabeling within tasks", "[metrics]") {
    // relabeling classes does not change per-task accuracies, so the derived
    // values are computed from identical matrices
    std::mt19937_64 rng(42);
    const RunRecord r = random_record(rng, 4);
    RunRecord same = r;
    REQUIRE(aia(same) == aia(r));
    REQUIRE(bt(same) == bt(r));
    REQUIRE(fgt(same) == fgt(r));
}

TEST_CASE("metric formulas match independent oracles on random records", "[metrics]") {
    std::mt19937_64 rng(43);
    for (int trial = 0; trial < 100; ++trial) {
        const RunRecord r = random_record(rng, 2 + rng() % 5);
        const std::size_t T = r.T();

        double aia_oracle = 0.0;
        for (std::size_t t = 0; t <= T; ++t) {
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i <= t; ++i) {
                num += r.acc[t][i] * r.task_class_counts[i];
                den += r.task_class_counts[i];
            }
            aia_oracle += num / den;
        }
        aia_oracle *= 100.0 / (T + 1);

        double bt_oracle = 0.0;
        for (std::size_t i = 0; i < T; ++i) bt_oracle += r.acc[T][i] - r.acc[i][i];
        bt_oracle *= 100.0 / T;

        double fgt_oracle = 0.0;
        for (std::size_t i = 0; i < T; ++i) {
            double best = -1.0;
            for (std::size_t t = i; t <= T; ++t) best = std::max(best, r.acc[t][i]);
            fgt_oracle += best - r.acc[T][i];
        }
        fgt_oracle *= 100.0 / T;

        REQUIRE(aia(r) == Approx(aia_oracle).margin(1e-10));
        REQUIRE(bt(r) == Approx(bt_oracle).margin(1e-10));
        REQUIRE(fgt(r) == Approx(fgt_oracle).margin(1e-10));
    }
}

TEST_CASE("oracle deviation basics", "[metrics]") {
    const std::vector<double> base(8, 0.1);
    std::vector<double> m_final(8), o_final(8);
    for (std::size_t j = 0; j < 8; ++j) {
        o_final[j] = 0.1 + 0.05 * (j + 1);
        m_final[j] = o_final[j];
    }
    REQUIRE(oracle_deviation(m_final, base, o_final, base).value == 0.0);

    // every channel fraction = 0.5 -> deviation 0.25
    for (std::size_t j = 0; j < 8; ++j) m_final[j] = 0.1 + 0.025 * (j + 1);
    REQUIRE(oracle_deviation(m_final, base, o_final, base).value ==
            Approx(0.25).margin(1e-12));
}

TEST_CASE("oracle deviation matches a direct evaluation on random vectors", "[metrics]") {
    std::mt19937_64 rng(44);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> mf(8), mb(8), of(8), ob(8);
        for (std::size_t j = 0; j < 8; ++j) {
            mf[j] = dist(rng);
            mb[j] = dist(rng);
            of[j] = dist(rng);
            ob[j] = dist(rng);
        }
        double expect = 0.0;
        std::size_t used = 0;
        for (std::size_t j = 0; j < 8; ++j) {
            const double den = of[j] - ob[j];
            if (std::fabs(den) < 1e-8) continue;
            const double f = (mf[j] - mb[j]) / den;
            expect += (1.0 - f) * (1.0 - f);
            ++used;
        }
        const OracleDeviation d = oracle_deviation(mf, mb, of, ob);
        REQUIRE(d.value == Approx(expect / used).margin(1e-12));
    }
}

TEST_CASE("oracle deviation excludes channels without oracle evolution", "[metrics]") {
    const std::vector<double> zero(4, 0.0);
    std::vector<double> mf = {1.0, 1.0, 1.0, 1.0};
    std::vector<double> of = {2.0, 0.0, 2.0, 1e-12};  // channels 1 and 3 excluded
    const OracleDeviation d = oracle_deviation(mf, zero, of, zero);
    REQUIRE(d.excluded == std::vector<std::size_t>{1, 3});
    REQUIRE(d.value == Approx(0.25).margin(1e-12));  // fraction 1/2 on kept channels

    REQUIRE_THROWS_AS(oracle_deviation(mf, zero, zero, zero), NumericError);
    REQUIRE_THROWS_AS(oracle_deviation(mf, zero, of, {1.0}), ContractError);
}

TEST_CASE("oracle deviation is scale-free", "[metrics]") {
    std::mt19937_64 rng(45);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> mf(6), mb(6), of(6), ob(6);
    for (std::size_t j = 0; j < 6; ++j) {
        mf[j] = dist(rng);
        mb[j] = dist(rng);
        of[j] = dist(rng) * 2.0;
        ob[j] = dist(rng);
    }
    const double base = oracle_deviation(mf, mb, of, ob).value;
    const double k = 37.5;
    auto scaled = [&](std::vector<double> v) {
        for (double& x : v) x *= k;
        return v;
    };
    REQUIRE(oracle_deviation(scaled(mf), scaled(mb), scaled(of), scaled(ob)).value ==
            Approx(base).epsilon(1e-12));
}
