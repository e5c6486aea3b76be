#pragma once

// Accuracy-matrix bookkeeping over a task stream and the derived forgetting
// metrics, plus the per-class deviation of a model's Grad-CAM channel
// importances from the Oracle's.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "s2il/errors.hpp"

namespace s2il {

struct RunRecord {
    // acc[t][i]: accuracy on task i's test classes after training task t.
    std::vector<std::vector<double>> acc;
    // Class-count-weighted overall accuracy on all test data seen through t.
    std::vector<double> overall;
    std::vector<std::size_t> task_class_counts;  // m^t
    // Per task: class id -> Grad-CAM channel importances (base classes only).
    std::vector<std::map<int, std::vector<double>>> alphas;
    std::string config_text;

    std::size_t T() const {
        if (acc.empty()) throw ContractError("RunRecord: empty record");
        return acc.size() - 1;
    }

    void append_task(std::vector<double> row, std::size_t class_count) {
        if (row.size() != acc.size() + 1)
            throw ContractError("RunRecord: row " + std::to_string(acc.size()) + " needs " +
                                std::to_string(acc.size() + 1) + " entries");
        for (double a : row)
            if (a < 0.0 || a > 1.0) throw ContractError("RunRecord: accuracy outside [0,1]");
        task_class_counts.push_back(class_count);
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < row.size(); ++i) {
            num += row[i] * static_cast<double>(task_class_counts[i]);
            den += static_cast<double>(task_class_counts[i]);
        }
        overall.push_back(num / den);
        acc.push_back(std::move(row));
    }

    void check_complete() const {
        if (acc.empty()) throw ContractError("RunRecord: empty record");
        for (std::size_t t = 0; t < acc.size(); ++t)
            if (acc[t].size() != t + 1)
                throw ContractError("RunRecord: incomplete row " + std::to_string(t));
        if (overall.size() != acc.size() || task_class_counts.size() != acc.size())
            throw ContractError("RunRecord: inconsistent bookkeeping");
    }
};

// Average incremental accuracy, in percent: mean over tasks (including the
// base task) of the overall accuracy after each task.
inline double aia(const RunRecord& record) {
    record.check_complete();
    double s = 0.0;
    for (double v : record.overall) s += v;
    return 100.0 * s / static_cast<double>(record.overall.size());
}

// Backward transfer, in percent: mean over past tasks of the final-row
// accuracy minus the accuracy when the task was learned. Negative = forgetting.
inline double bt(const RunRecord& record) {
    record.check_complete();
    const std::size_t T = record.T();
    if (T == 0) throw ContractError("bt: needs at least one incremental task");
    double s = 0.0;
    for (std::size_t i = 0; i < T; ++i) s += record.acc[T][i] - record.acc[i][i];
    return 100.0 * s / static_cast<double>(T);
}

// Forgetting, in percent: mean over past tasks of the gap between the best
// accuracy the task ever reached and its final accuracy. Including the final
// row in the maximum keeps every column's gap nonnegative.
inline double fgt(const RunRecord& record) {
    record.check_complete();
    const std::size_t T = record.T();
    if (T == 0) throw ContractError("fgt: needs at least one incremental task");
    double s = 0.0;
    for (std::size_t i = 0; i < T; ++i) {
        double best = 0.0;
        for (std::size_t t = i; t <= T; ++t) best = std::max(best, record.acc[t][i]);
        s += best - record.acc[T][i];
    }
    return 100.0 * s / static_cast<double>(T);
}

struct OracleDeviation {
    double value = 0.0;
    // Channels whose Oracle evolution was below the guard; excluded from the
    // mean (the source formulation leaves this case undefined) and reported.
    std::vector<std::size_t> excluded;
};

// Per-class deviation of the model's channel-importance evolution from the
// Oracle's: mean over channels of (1 - delta_M / delta_O)^2, where delta is
// the final-task importance minus the base-task importance.
inline OracleDeviation oracle_deviation(const std::vector<double>& alpha_m_final,
                                        const std::vector<double>& alpha_m_base,
                                        const std::vector<double>& alpha_o_final,
                                        const std::vector<double>& alpha_o_base,
                                        double eps = 1e-8) {
    const std::size_t n = alpha_m_final.size();
    if (alpha_m_base.size() != n || alpha_o_final.size() != n || alpha_o_base.size() != n)
        throw ContractError("oracle_deviation: vectors must share length L_fm");
    if (n == 0) throw ContractError("oracle_deviation: empty importance vectors");

    OracleDeviation out;
    double s = 0.0;
    std::size_t used = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const double dm = alpha_m_final[j] - alpha_m_base[j];
        const double dor = alpha_o_final[j] - alpha_o_base[j];
        if (std::fabs(dor) < eps) {
            out.excluded.push_back(j);
            continue;
        }
        const double frac = dm / dor;
        s += (1.0 - frac) * (1.0 - frac);
        ++used;
    }
    if (used == 0)
        throw NumericError("oracle_deviation: no channel shows measurable Oracle evolution");
    out.value = s / static_cast<double>(used);
    return out;
}

}  // namespace s2il
