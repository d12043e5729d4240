#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "stpil/common.hpp"
#include "stpil/rng.hpp"
#include "stpil/tensor.hpp"

namespace stpil {

/// One trainable array: a stable identifier, its value, and a gradient
/// accumulator of the same shape.
struct ParamLeaf {
    std::string id;
    Tensor value;
    Tensor grad;
};

/// Ordered collection of ParamLeaf. Registration order is the canonical leaf
/// order for checkpoints, optimizer state and gradient buffers.
class ParamStore {
public:
    std::size_t add(std::string id, Tensor init) {
        STPIL_REQUIRE(index_.find(id) == index_.end(), "ParamStore: duplicate leaf id '" + id + "'");
        const std::size_t i = leaves_.size();
        Tensor grad = Tensor::zeros(init.shape);
        leaves_.push_back(ParamLeaf{id, std::move(init), std::move(grad)});
        index_.emplace(leaves_.back().id, i);
        return i;
    }

    std::size_t size() const { return leaves_.size(); }
    ParamLeaf& operator[](std::size_t i) { return leaves_[i]; }
    const ParamLeaf& operator[](std::size_t i) const { return leaves_[i]; }

    const ParamLeaf* find(const std::string& id) const {
        auto it = index_.find(id);
        return it == index_.end() ? nullptr : &leaves_[it->second];
    }

    std::size_t index_of(const std::string& id) const {
        auto it = index_.find(id);
        STPIL_REQUIRE(it != index_.end(), "ParamStore: unknown leaf id '" + id + "'");
        return it->second;
    }

    void zero_grads() {
        for (auto& l : leaves_) l.grad.fill(0.0);
    }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& l : leaves_) n += l.value.numel();
        return n;
    }

    bool all_finite() const {
        for (const auto& l : leaves_)
            if (!l.value.finite()) return false;
        return true;
    }

private:
    std::vector<ParamLeaf> leaves_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Gradient buffer shaped like a store's leaves; used by batch workers that
/// accumulate independently and merge in a fixed order.
inline std::vector<Tensor> make_grad_buffer(const ParamStore& store) {
    std::vector<Tensor> g;
    g.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) g.push_back(Tensor::zeros(store[i].value.shape));
    return g;
}

inline Tensor uniform_init(std::vector<std::size_t> shape, RngState& rng, double lo = -0.05, double hi = 0.05) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& x : t.v) x = rng.uniform(lo, hi);
    return t;
}

}  // namespace stpil
