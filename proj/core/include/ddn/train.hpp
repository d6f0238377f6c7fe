#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddn/loss.hpp"
#include "ddn/model.hpp"
#include "ddn/patches.hpp"

namespace ddn {

struct AdamConfig {
    float learning_rate = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

/// First/second moment estimates, aligned with the model's parameter list.
struct AdamState {
    std::vector<Tensor5<float>> m;
    std::vector<Tensor5<float>> v;
    std::int64_t step = 0;

    static AdamState zeros_like(const DdnModel<float>& model);
};

/// Bias-corrected adaptive-moment update from the gradients currently stored
/// in the trainable parameters. Increments state.step.
void adam_step(DdnModel<float>& model, AdamState& state, const AdamConfig& cfg);

struct TrainConfig {
    int batch_size = 4;
    int steps = 1000;
    AdamConfig adam;
    std::uint64_t seed = 0;
    LossConfig loss;
    int checkpoint_every = 0;     // 0: only the final checkpoint is written
    bool deterministic = true;    // reductions are always fixed-order; kept as a knob
    std::string checkpoint_path;  // empty: no checkpoints emitted
};

struct TrainRecord {
    std::int64_t step = 0; // 1-based, after the update
    double similarity = 0.0;
    double smoothness = 0.0;
    double total = 0.0;
    double ms = 0.0;
};

struct TrainLog {
    std::vector<TrainRecord> records;
};

/// CSV with header step,sim,smooth,total,ms.
void write_train_log(const TrainLog& log, const std::string& path);

/// Runs `cfg.steps` optimization steps of seeded-shuffled minibatches,
/// minimizing total_loss with batch-norm in train mode. The trajectory is a
/// pure function of (dataset, model, cfg, state): epoch e uses the
/// permutation seeded by hash(seed, e), and the batch position is derived
/// from the global step, so training resumed from a checkpoint matches an
/// uninterrupted run. Mutates model (and state, when given) in place.
TrainLog train(DdnModel<float>& model, const PatchPairSet& data, const TrainConfig& cfg,
               AdamState* state = nullptr);

/// DDNC checkpoint: "DDNC", u32 version=1, u32 config length + JSON config,
/// u32 tensor count, then per tensor u16 name length + name, u8 ndim,
/// ndim x u32 dims, f32 data. Optimizer tensors carry the "opt." prefix.
void save_checkpoint(const DdnModel<float>& model, const AdamState* opt, const std::string& path);

struct Checkpoint {
    DdnModel<float> model;
    std::optional<AdamState> opt;
};

/// Rebuilds the model from the embedded config. When `expect` is given, a
/// checkpoint whose config differs is rejected with format_error.
Checkpoint load_checkpoint(const std::string& path, const DdnConfig* expect = nullptr);

std::string config_to_json(const DdnConfig& cfg);
DdnConfig config_from_json(const std::string& text);

} // namespace ddn
