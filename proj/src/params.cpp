#include "mte/params.hpp"

#include <cstring>

namespace mte {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    // splitmix64 finalizer chained over the inputs
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    std::uint64_t h = mix(seed);
    h = mix(h ^ a);
    h = mix(h ^ (b + 0x632be59bd9b4e019ULL));
    h = mix(h ^ (c + 0x8cb92ba72f3d8dd7ULL));
    return h;
}

std::uint64_t hash_name(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : name) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename T>
void fill_trunc_normal(Tensor<T>& t, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (T& v : t.data()) {
        double x = dist(rng);
        while (std::abs(x) > 2.0 * stddev) x = dist(rng);
        v = static_cast<T>(x);
    }
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (T& v : t.data()) v = static_cast<T>(dist(rng));
}

template <typename T>
Tensor<T>& ParameterSet<T>::add(const std::string& name, Tensor<T> value) {
    require(!contains(name), ErrorKind::Structural, "duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
}

template <typename T>
Tensor<T>& ParameterSet<T>::get(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::Structural, "missing parameter '" + name + "'");
    return entries_[it->second].second;
}

template <typename T>
const Tensor<T>& ParameterSet<T>::get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::Structural, "missing parameter '" + name + "'");
    return entries_[it->second].second;
}

template <typename T>
Index ParameterSet<T>::erase_prefix(std::string_view prefix) {
    Index removed = 0;
    std::vector<std::pair<std::string, Tensor<T>>> kept;
    for (auto& entry : entries_) {
        if (entry.first.starts_with(prefix))
            removed += entry.second.size();
        else
            kept.push_back(std::move(entry));
    }
    entries_ = std::move(kept);
    reindex();
    return removed;
}

template <typename T>
Index ParameterSet<T>::scalar_count() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
}

template <typename T>
Index ParameterSet<T>::scalar_count(std::string_view prefix) const {
    Index n = 0;
    for (const auto& e : entries_)
        if (e.first.starts_with(prefix)) n += e.second.size();
    return n;
}

template <typename T>
ParameterSet<T> ParameterSet<T>::clone() const {
    ParameterSet out;
    for (const auto& [name, t] : entries_) out.add(name, t.clone());
    return out;
}

template <typename T>
void ParameterSet<T>::set_requires_grad(bool flag) {
    for (auto& e : entries_) e.second.set_requires_grad(flag);
}

template <typename T>
void ParameterSet<T>::zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
void ParameterSet<T>::reindex() {
    index_.clear();
    for (Index i = 0; i < entries_.size(); ++i) index_[entries_[i].first] = i;
}

template <typename T>
std::uint64_t fingerprint(const ParameterSet<T>& params, std::string_view prefix) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* data, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : params.entries()) {
        if (!name.starts_with(prefix)) continue;
        feed(name.data(), name.size());
        feed(t.shape().data(), t.shape().size() * sizeof(Index));
        feed(t.ptr(), t.size() * sizeof(T));
    }
    return h;
}

template void fill_trunc_normal<float>(Tensor<float>&, Rng&, double);
template void fill_trunc_normal<double>(Tensor<double>&, Rng&, double);
template void fill_normal<float>(Tensor<float>&, Rng&, double);
template void fill_normal<double>(Tensor<double>&, Rng&, double);
template class ParameterSet<float>;
template class ParameterSet<double>;
template std::uint64_t fingerprint(const ParameterSet<float>&, std::string_view);
template std::uint64_t fingerprint(const ParameterSet<double>&, std::string_view);

}  // namespace mte
