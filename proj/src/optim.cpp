#include "ssf/optim.hpp"

#include <cmath>

namespace ssf {

const char* optimizer_name(OptimizerKind k) {
    return k == OptimizerKind::Sgd ? "sgd" : "adam";
}

OptimizerKind optimizer_from_name(const std::string& name) {
    if (name == "sgd") return OptimizerKind::Sgd;
    if (name == "adam") return OptimizerKind::Adam;
    throw ConfigError("unknown optimizer '" + name + "' (sgd, adam)");
}

void OptimConfig::validate() const {
    if (lr < 0.0) throw ConfigError("optimizer: learning rate must be non-negative");
    if (decay_factor <= 0.0 || decay_factor > 1.0)
        throw ConfigError("optimizer: decay factor must be in (0, 1]");
    if (decay_every < 1) throw ConfigError("optimizer: decay interval must be >= 1");
}

Optimizer::Optimizer(std::vector<Tensor> params, OptimConfig cfg)
    : params_(std::move(params)), cfg_(cfg), lr_(cfg.lr) {
    cfg_.validate();
    for (const Tensor& p : params_) {
        if (!p.requires_grad())
            throw ContractError("optimizer: all parameters must require gradients");
        m_.emplace_back(p.value().size(), 0.0);
        v_.emplace_back(cfg_.kind == OptimizerKind::Adam ? p.value().size() : 0, 0.0);
    }
}

double Optimizer::scheduled_lr(int epoch) const {
    return cfg_.lr * std::pow(cfg_.decay_factor, epoch / cfg_.decay_every);
}

void Optimizer::step() {
    ++t_;
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        std::vector<double> g = p.grad();
        auto& val = p.mutable_value();
        if (cfg_.kind == OptimizerKind::Sgd) {
            auto& vel = m_[i];
            for (size_t j = 0; j < val.size(); ++j) {
                vel[j] = cfg_.momentum * vel[j] + g[j];
                val[j] -= lr_ * vel[j];
            }
        } else {
            auto& m = m_[i];
            auto& v = v_[i];
            double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
            double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
            for (size_t j = 0; j < val.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                double mhat = m[j] / bc1;
                double vhat = v[j] / bc2;
                val[j] -= lr_ * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }
}

void Optimizer::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

void Optimizer::restore_state(std::vector<std::vector<double>> m,
                              std::vector<std::vector<double>> v, int64_t t, double lr) {
    if (m.size() != params_.size() || v.size() != params_.size())
        throw ContractError("optimizer: restored state does not match parameter count");
    for (size_t i = 0; i < params_.size(); ++i) {
        if (m[i].size() != params_[i].value().size())
            throw ContractError("optimizer: restored slot shape mismatch");
    }
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
    lr_ = lr;
}

}  // namespace ssf
