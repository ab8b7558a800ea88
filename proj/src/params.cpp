#include "dtl/params.hpp"

#include <stdexcept>

namespace dtl {

Param& ParamStore::add(std::string name, Tensor t, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("duplicate Param name: " + name);
    auto p = std::make_unique<Param>(Param{std::move(name), std::move(t), trainable});
    index_[p->name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
}

Param& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no Param named " + name);
    return *params_[it->second];
}

const Param& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no Param named " + name);
    return *params_[it->second];
}

std::vector<Param*> ParamStore::all() {
    std::vector<Param*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<const Param*> ParamStore::all() const {
    std::vector<const Param*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<Param*> ParamStore::trainable() {
    std::vector<Param*> out;
    for (auto& p : params_)
        if (p->trainable) out.push_back(p.get());
    return out;
}

long ParamStore::total_scalars() const {
    long n = 0;
    for (auto& p : params_) n += p->tensor.numel();
    return n;
}

long ParamStore::trainable_scalars() const {
    long n = 0;
    for (auto& p : params_)
        if (p->trainable) n += p->tensor.numel();
    return n;
}

}  // namespace dtl
