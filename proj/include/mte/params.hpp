#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mte/tensor.hpp"

namespace mte {

using Rng = std::mt19937_64;

// Mixes a base seed with stream identifiers (sample index, epoch, view, ...) so
// that every random draw is addressable without shared generator state.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

// Stable 64-bit FNV-1a of a string (unlike std::hash, fixed across standard libraries).
std::uint64_t hash_name(std::string_view name);

template <typename T>
void fill_trunc_normal(Tensor<T>& t, Rng& rng, double stddev);

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev);

// Named, insertion-ordered collection of trainable tensors.
template <typename T>
class ParameterSet {
   public:
    Tensor<T>& add(const std::string& name, Tensor<T> value);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Tensor<T>& get(const std::string& name);
    const Tensor<T>& get(const std::string& name) const;

    // Removes every tensor whose name starts with `prefix`; returns the number of scalars removed.
    Index erase_prefix(std::string_view prefix);

    const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
    std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
    Index size() const { return entries_.size(); }
    Index scalar_count() const;
    Index scalar_count(std::string_view prefix) const;

    // Deep copy; gradient flags are preserved.
    ParameterSet clone() const;

    void set_requires_grad(bool flag);
    void zero_grad();

    template <typename U>
    ParameterSet<U> cast() const {
        ParameterSet<U> out;
        for (const auto& [name, t] : entries_) {
            std::vector<U> values(t.data().begin(), t.data().end());
            Tensor<U> copy(t.shape(), std::move(values));
            copy.set_requires_grad(t.requires_grad());
            out.add(name, std::move(copy));
        }
        return out;
    }

   private:
    void reindex();

    std::vector<std::pair<std::string, Tensor<T>>> entries_;
    std::map<std::string, Index, std::less<>> index_;
};

// FNV-1a over names, shapes and raw value bytes; used to prove tensors were untouched.
template <typename T>
std::uint64_t fingerprint(const ParameterSet<T>& params, std::string_view prefix = "");

}  // namespace mte
