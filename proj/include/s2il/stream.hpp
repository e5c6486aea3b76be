#pragma once

// Task-stream construction: a seeded class permutation split into a base task
// and fixed-size increments, with disjoint train/test partitions per task.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "s2il/dataset.hpp"
#include "s2il/errors.hpp"

namespace s2il {

struct Task {
    std::vector<int> classes;
    std::vector<std::size_t> train_ids;
    std::vector<std::size_t> test_ids;
};

struct TaskStream {
    std::vector<Task> tasks;      // tasks[0] is the base task
    std::vector<int> class_order; // seeded permutation; classes enter in this order
    std::size_t base_classes = 0;
    std::size_t increment = 0;

    // Number of incremental steps; tasks run 0..T.
    std::size_t T() const { return tasks.size() - 1; }

    std::vector<int> classes_through(std::size_t t) const {
        std::vector<int> out;
        for (std::size_t i = 0; i <= t; ++i)
            out.insert(out.end(), tasks[i].classes.begin(), tasks[i].classes.end());
        return out;
    }

    std::size_t class_count_through(std::size_t t) const {
        std::size_t n = 0;
        for (std::size_t i = 0; i <= t; ++i) n += tasks[i].classes.size();
        return n;
    }

    std::vector<std::size_t> train_through(std::size_t t) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i <= t; ++i)
            out.insert(out.end(), tasks[i].train_ids.begin(), tasks[i].train_ids.end());
        return out;
    }
};

inline TaskStream build_stream(const Dataset& data, std::size_t base_classes,
                               std::size_t increment, std::uint64_t class_order_seed) {
    data.validate();
    if (increment == 0) throw ContractError("build_stream: increment must be positive");
    if (base_classes == 0) throw ContractError("build_stream: base task must be nonempty");
    if (base_classes > data.class_count)
        throw ContractError("build_stream: base task larger than the class set");
    if ((data.class_count - base_classes) % increment != 0)
        throw ContractError("build_stream: " + std::to_string(data.class_count - base_classes) +
                            " remaining classes do not divide into increments of " +
                            std::to_string(increment));

    // Every class must contribute to both partitions.
    for (std::size_t c = 0; c < data.class_count; ++c) {
        if (data.class_indices(static_cast<int>(c), false).empty())
            throw ContractError("build_stream: class " + std::to_string(c) +
                                " has no train samples");
        if (data.class_indices(static_cast<int>(c), true).empty())
            throw ContractError("build_stream: class " + std::to_string(c) +
                                " has no test samples");
    }

    TaskStream stream;
    stream.base_classes = base_classes;
    stream.increment = increment;
    stream.class_order.resize(data.class_count);
    std::iota(stream.class_order.begin(), stream.class_order.end(), 0);
    std::mt19937_64 rng(class_order_seed);
    std::shuffle(stream.class_order.begin(), stream.class_order.end(), rng);

    std::size_t cursor = 0;
    while (cursor < data.class_count) {
        const std::size_t take = cursor == 0 ? base_classes : increment;
        Task task;
        for (std::size_t i = 0; i < take; ++i) task.classes.push_back(stream.class_order[cursor + i]);
        for (int cls : task.classes) {
            auto tr = data.class_indices(cls, false);
            auto te = data.class_indices(cls, true);
            task.train_ids.insert(task.train_ids.end(), tr.begin(), tr.end());
            task.test_ids.insert(task.test_ids.end(), te.begin(), te.end());
        }
        stream.tasks.push_back(std::move(task));
        cursor += take;
    }
    return stream;
}

// Sample-id audit: class sets pairwise disjoint, no id in two partitions.
inline bool audit_stream(const TaskStream& stream) {
    std::set<int> seen_classes;
    std::set<std::size_t> seen_ids;
    for (const Task& task : stream.tasks) {
        for (int c : task.classes)
            if (!seen_classes.insert(c).second) return false;
        for (std::size_t id : task.train_ids)
            if (!seen_ids.insert(id).second) return false;
        for (std::size_t id : task.test_ids)
            if (!seen_ids.insert(id).second) return false;
    }
    return true;
}

}  // namespace s2il
