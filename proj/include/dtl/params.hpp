#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dtl/tensor.hpp"

namespace dtl {

// Named model weight. The trainable flag is fixed for the duration of a
// training run; attach() decides it once at model assembly.
struct Param {
    std::string name;  // hierarchical, e.g. "block.3.ffn.w1"
    Tensor tensor;
    bool trainable = false;
};

// Ordered collection of Params. Insertion order is the iteration order, which
// pins the gradient accumulation and optimizer update order.
class ParamStore {
  public:
    Param& add(std::string name, Tensor t, bool trainable = false);
    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<Param*> all();
    std::vector<const Param*> all() const;
    std::vector<Param*> trainable();

    long total_scalars() const;
    long trainable_scalars() const;
    std::size_t size() const { return params_.size(); }

    // Marks every Param whose name matches `pred`; returns how many matched.
    template <typename Pred>
    long set_trainable_if(Pred pred, bool value) {
        long n = 0;
        for (auto& p : params_) {
            if (pred(p->name)) {
                p->trainable = value;
                ++n;
            }
        }
        return n;
    }

  private:
    std::vector<std::unique_ptr<Param>> params_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace dtl
