#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssf/tensor.hpp"

namespace ssf {

enum class OptimizerKind { Sgd = 0, Adam = 1 };

const char* optimizer_name(OptimizerKind k);
OptimizerKind optimizer_from_name(const std::string& name);

struct OptimConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double lr = 1e-3;
    double decay_factor = 0.5;  // multiplies lr every decay_every epochs
    int decay_every = 10;
    double momentum = 0.9;      // sgd
    double beta1 = 0.9;         // adam
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;
};

// Holds the trainable leaves and per-parameter state. step() consumes the
// current gradients; callers zero them afterwards.
class Optimizer {
public:
    Optimizer(std::vector<Tensor> params, OptimConfig cfg);

    void step();
    void zero_grad();

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    // lr after `epoch` completed epochs under the decay schedule.
    double scheduled_lr(int epoch) const;

    const OptimConfig& config() const { return cfg_; }
    int64_t step_count() const { return t_; }

    // Serialization hooks for checkpoints.
    const std::vector<std::vector<double>>& slot_m() const { return m_; }
    const std::vector<std::vector<double>>& slot_v() const { return v_; }
    void restore_state(std::vector<std::vector<double>> m, std::vector<std::vector<double>> v,
                       int64_t t, double lr);

private:
    std::vector<Tensor> params_;
    OptimConfig cfg_;
    double lr_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_;  // sgd velocity / adam first moment
    std::vector<std::vector<double>> v_;  // adam second moment
};

}  // namespace ssf
