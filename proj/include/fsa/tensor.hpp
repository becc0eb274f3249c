#pragma once

// Named parameter tensors. A ParamSet is the unit the optimizers, the
// meta-learners and the checkpoint files work with.

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "fsa/core.hpp"

namespace fsa {

template <typename T>
struct Param {
    std::string name;
    std::vector<int> shape;
    std::vector<T> data;

    std::size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
};

template <typename T>
class ParamSet {
public:
    ParamSet() = default;

    Param<T>& add(std::string name, std::vector<int> shape, T fill = T(0)) {
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        params_.push_back(Param<T>{std::move(name), std::move(shape), std::vector<T>(n, fill)});
        return params_.back();
    }

    std::size_t count() const { return params_.size(); }
    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }

    Param<T>& operator[](std::size_t i) { return params_[i]; }
    const Param<T>& operator[](std::size_t i) const { return params_[i]; }

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name == name) return i;
        fail(ErrorCode::not_found, "no parameter named '" + name + "'");
    }
    Param<T>& at(const std::string& name) { return params_[index_of(name)]; }
    const Param<T>& at(const std::string& name) const { return params_[index_of(name)]; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    ParamSet zeros_like() const {
        ParamSet out;
        for (const auto& p : params_) out.add(p.name, p.shape);
        return out;
    }

    bool same_layout(const ParamSet& o) const {
        if (o.params_.size() != params_.size()) return false;
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name != o.params_[i].name || params_[i].shape != o.params_[i].shape) return false;
        return true;
    }

    /// this += alpha * other
    void axpy(T alpha, const ParamSet& other) {
        check_layout(other);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& d = params_[i].data;
            const auto& s = other.params_[i].data;
            for (std::size_t j = 0; j < d.size(); ++j) d[j] += alpha * s[j];
        }
    }

    void scale(T alpha) {
        for (auto& p : params_)
            for (auto& v : p.data) v *= alpha;
    }

    bool all_finite() const {
        for (const auto& p : params_)
            for (T v : p.data)
                if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& p : params_) {
            auto& q = out.add(p.name, p.shape);
            for (std::size_t j = 0; j < p.data.size(); ++j) q.data[j] = static_cast<U>(p.data[j]);
        }
        return out;
    }

    bool operator==(const ParamSet& o) const {
        if (!same_layout(o)) return false;
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].data != o.params_[i].data) return false;
        return true;
    }

    void check_layout(const ParamSet& other) const {
        if (!same_layout(other)) fail(ErrorCode::invalid_argument, "parameter sets have different layouts");
    }

private:
    std::vector<Param<T>> params_;
};

}  // namespace fsa
