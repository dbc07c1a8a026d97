#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdu/tensor.hpp"

namespace hdu::arch {

/// Named model state. Parameters are trainable leaves; buffers (batch-norm
/// running statistics) are persisted but never receive gradients. Freezing a
/// parameter clears its requires_grad flag so no graph is recorded through it.
template <class T>
class ParameterSet {
public:
    struct Entry {
        Tensor<T> tensor;
        bool buffer = false;
        bool frozen = false;
    };

    Tensor<T> add_parameter(const std::string& name, Tensor<T> t) {
        t.set_requires_grad(true);
        insert(name, {t, false, false});
        return t;
    }

    Tensor<T> add_buffer(const std::string& name, Tensor<T> t) {
        t.set_requires_grad(false);
        insert(name, {t, true, false});
        return t;
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    const Tensor<T>& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("no parameter named " + name);
        return it->second.tensor;
    }

    const std::map<std::string, Entry>& entries() const { return entries_; }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    std::size_t set_frozen(const std::string& prefix, bool frozen) {
        std::size_t n = 0;
        for (auto& [name, e] : entries_) {
            if (e.buffer || name.rfind(prefix, 0) != 0) continue;
            e.frozen = frozen;
            e.tensor.set_requires_grad(!frozen);
            ++n;
        }
        return n;
    }

    bool is_frozen(const std::string& name) const { return entries_.at(name).frozen; }

    void zero_grad() {
        for (auto& [name, e] : entries_)
            if (!e.buffer) e.tensor.zero_grad();
    }

    /// Names of parameters (not buffers) under `prefix`.
    std::vector<std::string> parameter_names(const std::string& prefix = "") const {
        std::vector<std::string> out;
        for (auto& [name, e] : entries_)
            if (!e.buffer && name.rfind(prefix, 0) == 0) out.push_back(name);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto& [name, e] : entries_)
            if (!e.buffer) n += e.tensor.size();
        return n;
    }

    /// Checkpoint-import hook: copies values for every name present in both
    /// sets (shapes must agree). Returns the names that were imported.
    std::vector<std::string> import_values(const std::map<std::string, std::pair<Shape, std::vector<T>>>& external) {
        std::vector<std::string> imported;
        for (auto& [name, sv] : external) {
            auto it = entries_.find(name);
            if (it == entries_.end()) continue;
            auto& t = it->second.tensor;
            if (t.shape() != sv.first)
                throw ShapeError("import: " + name + " has shape " + to_string(sv.first) + ", model expects " +
                                 to_string(t.shape()));
            std::copy(sv.second.begin(), sv.second.end(), t.mutable_data().begin());
            imported.push_back(name);
        }
        return imported;
    }

private:
    void insert(const std::string& name, Entry e) {
        if (!entries_.emplace(name, std::move(e)).second) throw std::invalid_argument("duplicate parameter " + name);
    }

    std::map<std::string, Entry> entries_;
};

/// Zero-mean normal weights with variance 2 / fan_in.
template <class T>
Tensor<T> he_normal(const Shape& shape, std::mt19937_64& rng) {
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = T(dist(rng));
    return Tensor<T>(shape, std::move(v));
}

inline constexpr const char* kInitScheme = "he_normal(var=2/fan_in);bias=0;bn_gamma=1;bn_beta=0";

}  // namespace hdu::arch
