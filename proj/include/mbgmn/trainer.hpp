#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mbgmn/dataset.hpp"
#include "mbgmn/model.hpp"
#include "mbgmn/params.hpp"

namespace mbgmn::train {

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    model::ModelConfig model;
    double learning_rate = 1e-3;
    double lr_decay = 0.96;  // per epoch
    double lambda = 0.001;   // weight decay in the loss
    std::size_t batch_size = 32;  // users per batch
    std::size_t samples_per_user = 2;  // S
    std::size_t epochs = 30;
    std::uint64_t seed = 7;
    std::vector<std::string> drop_behaviors;
};

struct EpochLog {
    std::size_t epoch = 0;
    double learning_rate = 0.0;
    double mean_loss = 0.0;
    std::size_t batches = 0;
    // mean hinge per (source channel k, target behavior k'), (K+1) x K
    std::vector<std::vector<double>> attribution;
};

struct TrainState {
    ParamStore params;
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    double learning_rate = 0.0;
    std::vector<EpochLog> logs;
};

class Trainer {
public:
    Trainer(TrainConfig cfg, const data::SplitDataset& split);

    const model::Model& model() const { return model_; }
    const data::BehaviorGraphs& graphs() const { return graphs_; }
    const data::SplitDataset& split() const { return split_; }
    const TrainConfig& config() const { return cfg_; }

    TrainState init_state() const;
    EpochLog train_epoch(TrainState& state) const;
    void train(TrainState& state,
               const std::function<void(const EpochLog&)>& on_epoch = nullptr) const;

    // One forward+backward over a batch; returns loss value. Used by the
    // epoch loop and by scaling/gradient diagnostics.
    double step(TrainState& state, const data::TrainBatch& batch,
                model::LossBreakdown* breakdown = nullptr) const;

private:
    TrainConfig cfg_;
    data::SplitDataset split_;  // possibly with behaviors dropped
    data::BehaviorGraphs graphs_;
    model::Model model_;
};

// Deterministic derived seed for (seed, epoch, batch) sampling.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

void save_epoch_logs(const std::vector<EpochLog>& logs, const std::string& path);
std::vector<EpochLog> load_epoch_logs(const std::string& path);

}  // namespace mbgmn::train
