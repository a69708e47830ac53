#pragma once

#include <map>
#include <string>
#include <vector>

#include "golo/rng.hpp"
#include "golo/tensor.hpp"

namespace golo {

// Xavier-uniform fill: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <class T>
void xavier_uniform(std::vector<T>& data, int64_t fan_in, int64_t fan_out, Rng& rng) {
    double a = std::sqrt(6.0 / double(fan_in + fan_out));
    for (auto& v : data) v = T(rng.uniform(-a, a));
}

// Insertion-ordered registry of trainable tensors. Registration order is the
// canonical order for optimizer sweeps and checkpoints, so runs stay
// bit-reproducible.
template <class T>
class ParamStore {
  public:
    explicit ParamStore(uint64_t init_seed = 0) : rng_(init_seed) {}

    Tensor<T> add_xavier(const std::string& name, Shape shape, int64_t fan_in, int64_t fan_out) {
        auto t = Tensor<T>::zeros(shape, /*requires_grad=*/true);
        xavier_uniform(t.data(), fan_in, fan_out, rng_);
        insert(name, t);
        return t;
    }
    // Xavier with fans inferred from a 2-D (in, out) shape.
    Tensor<T> add_xavier2d(const std::string& name, int64_t in, int64_t out) {
        return add_xavier(name, {in, out}, in, out);
    }
    Tensor<T> add_const(const std::string& name, Shape shape, T v) {
        auto t = Tensor<T>::full(std::move(shape), v, /*requires_grad=*/true);
        insert(name, t);
        return t;
    }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return entries_[it->second].second;
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    size_t size() const { return entries_.size(); }
    std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }

    void zero_grad() {
        for (auto& [name, t] : entries_) t.zero_grad();
    }
    int64_t total_scalars() const {
        int64_t n = 0;
        for (const auto& [name, t] : entries_) n += t.size();
        return n;
    }

  private:
    void insert(const std::string& name, const Tensor<T>& t) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.emplace_back(name, t);
    }

    Rng rng_;
    std::vector<std::pair<std::string, Tensor<T>>> entries_;
    std::map<std::string, size_t> index_;
};

}  // namespace golo
