#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "uvp/autodiff.hpp"
#include "uvp/io.hpp"
#include "uvp/tensor.hpp"

namespace uvp {

// A named leaf with Adam moments. Models register parameters in a fixed
// order; checkpoints and optimizer updates follow that order.
struct Param {
  std::string name;
  ad::Var var;
  Tensor m, v;
  bool trainable = true;

  Tensor& value() { return var->val; }
  const Tensor& value() const { return var->val; }
};

class ParamStore {
public:
  ParamStore() = default;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  // deep copy: a copied model owns fresh leaves and moments
  ParamStore(const ParamStore& o) { *this = o; }
  ParamStore& operator=(const ParamStore& o) {
    if (this == &o) return *this;
    params_.clear();
    for (const auto& p : o.params_) {
      auto q = std::make_shared<Param>();
      q->name = p->name;
      q->var = ad::leaf(p->var->val, p->var->needs_grad);
      q->m = p->m;
      q->v = p->v;
      q->trainable = p->trainable;
      params_.push_back(std::move(q));
    }
    return *this;
  }

  std::shared_ptr<Param> add(const std::string& name, Tensor init, bool trainable = true) {
    auto p = std::make_shared<Param>();
    p->name = name;
    p->var = ad::leaf(std::move(init), trainable);
    p->m = Tensor::zeros(p->var->val.shape);
    p->v = Tensor::zeros(p->var->val.shape);
    p->trainable = trainable;
    params_.push_back(p);
    return p;
  }

  std::vector<std::shared_ptr<Param>>& all() { return params_; }
  const std::vector<std::shared_ptr<Param>>& all() const { return params_; }

  std::shared_ptr<Param> find(const std::string& name) const {
    for (const auto& p : params_)
      if (p->name == name) return p;
    throw Error("unknown parameter: " + name);
  }

  void zero_grads() {
    for (auto& p : params_) {
      p->var->grad_alloc = false;
    }
  }

  void set_trainable_all(bool t) {
    for (auto& p : params_) {
      p->trainable = t;
      p->var->needs_grad = t;
    }
  }

  // Frozen parameters keep requires_grad off so the tape skips them.
  void set_trainable_prefix(const std::string& prefix, bool t) {
    for (auto& p : params_)
      if (p->name.rfind(prefix, 0) == 0) {
        p->trainable = t;
        p->var->needs_grad = t;
      }
  }

  double grad_norm() const {
    double acc = 0.0;
    for (const auto& p : params_) {
      if (!p->trainable || !p->var->grad_alloc) continue;
      for (double g : p->var->grad.v) acc += g * g;
    }
    return std::sqrt(acc);
  }

  bool grads_finite() const {
    for (const auto& p : params_) {
      if (!p->trainable || !p->var->grad_alloc) continue;
      if (!p->var->grad.all_finite()) return false;
    }
    return true;
  }

  int64_t count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p->value().numel();
    return n;
  }

  void save_into(io::Blob& b, const std::string& prefix) const {
    for (const auto& p : params_) {
      b.put(prefix + p->name, p->value());
      b.put(prefix + p->name + ".adam_m", p->m);
      b.put(prefix + p->name + ".adam_v", p->v);
    }
  }

  void load_from(const io::Blob& b, const std::string& prefix) {
    for (auto& p : params_) {
      const Tensor& t = b.tensor(prefix + p->name);
      check_shape(t.same_shape(p->value()),
                  "checkpoint shape mismatch for " + p->name + ": " + t.shape_str() +
                      " vs " + p->value().shape_str());
      p->var->val = t;
      p->m = b.tensor(prefix + p->name + ".adam_m");
      p->v = b.tensor(prefix + p->name + ".adam_v");
    }
  }

private:
  std::vector<std::shared_ptr<Param>> params_;
};

// Plain Adam. `factor` scales gradients before the moment update (gradient
// clipping is expressed as factor = clip/norm).
class Adam {
public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void step(ParamStore& store, double lr, double factor, int64_t step_index) {
    double b1c = 1.0 - std::pow(beta1, static_cast<double>(step_index + 1));
    double b2c = 1.0 - std::pow(beta2, static_cast<double>(step_index + 1));
    for (auto& p : store.all()) {
      if (!p->trainable) continue;
      const bool has_grad = p->var->grad_alloc;
      Tensor& val = p->value();
      for (int64_t i = 0; i < val.numel(); ++i) {
        double g = has_grad ? factor * p->var->grad[i] : 0.0;
        p->m[i] = beta1 * p->m[i] + (1.0 - beta1) * g;
        p->v[i] = beta2 * p->v[i] + (1.0 - beta2) * g * g;
        double mhat = p->m[i] / b1c;
        double vhat = p->v[i] / b2c;
        val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

}  // namespace uvp
