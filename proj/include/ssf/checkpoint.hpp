#pragma once

#include <optional>
#include <string>

#include "ssf/model.hpp"
#include "ssf/optim.hpp"
#include "ssf/rng.hpp"

namespace ssf {

// Everything needed to resume or reproduce a run: parameters, optimizer
// slots, schedule position, the resolved model config and the RNG state.
struct Checkpoint {
    Model model;
    int epoch = 0;
    std::string rng_state;  // Rng::serialize output; may be empty

    struct OptState {
        OptimizerKind kind = OptimizerKind::Adam;
        double lr = 0.0;
        int64_t step = 0;
        std::vector<std::vector<double>> m, v;
    };
    std::optional<OptState> optimizer;
};

// Binary container: magic "SSFCKPT1", version u32, then length-prefixed
// named tensor records (name_len u32, name, rank u32, dims u32 x rank,
// payload f64), all little-endian.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ssf
