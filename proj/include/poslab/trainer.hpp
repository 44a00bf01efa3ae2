#pragma once

#include "poslab/adam.hpp"
#include "poslab/model.hpp"
#include "poslab/poison.hpp"

#include <string>
#include <vector>

namespace poslab {

struct TrainConfig {
    int epochs = 3;
    double lr = 1e-3; // from-scratch default; see shipped configs
    int batch_size = 32;
    uint64_t seed = 0;
    enum class Mode { full, lora } mode = Mode::full;
    int lora_rank = 4;
    double lora_alpha = 0.0; // 0 -> 2 * rank
    enum class LossTarget { class_head, lm_head } loss = LossTarget::class_head;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

    uint64_t hash() const;
};

struct RunRecord {
    std::vector<double> epoch_losses;
    std::string checkpoint_ref;
    uint64_t config_hash = 0;
    uint64_t dataset_hash = 0;

    std::string to_text() const;
};

// per-example loss on the tape; exposed for tests
Tensor<float> example_loss(ModelF& model, const Example& ex, TrainConfig::LossTarget target);

// Deterministic single-threaded optimization over the mixed dataset.
// Generative records compute loss only on target-token positions; records
// with an empty target train the LM over the whole sequence.
RunRecord train(ModelF& model, const MixedDataset& data, const TrainConfig& cfg);

// implant-then-finetune pipeline: stage 1 generative, stage 2 classification
std::pair<RunRecord, RunRecord> train_two_stage(ModelF& model, const MixedDataset& stage1,
                                                const TrainConfig& cfg1, const MixedDataset& stage2,
                                                const TrainConfig& cfg2);

uint64_t dataset_hash(const MixedDataset& data);

} // namespace poslab
