#include "mbgmn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

namespace mbgmn::train {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (a + 1) + 0xbf58476d1ce4e5b9ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

Trainer::Trainer(TrainConfig cfg, const data::SplitDataset& split)
    : cfg_(cfg),
      split_{cfg.drop_behaviors.empty()
                 ? split.train
                 : data::drop_behaviors(split.train, cfg.drop_behaviors),
             split.test, split.excluded},
      graphs_(data::build_graphs(split_.train)),
      model_(cfg.model, split_.train.num_users(), split_.train.num_items(),
             split_.train.num_behaviors()) {}

TrainState Trainer::init_state() const {
    TrainState st;
    model_.init_params(st.params, cfg_.seed);
    st.learning_rate = cfg_.learning_rate;
    return st;
}

double Trainer::step(TrainState& state, const data::TrainBatch& batch,
                     model::LossBreakdown* breakdown) const {
    ad::Tape tape;
    model::ParamVars pv = state.params.register_on(tape);
    model::EmbeddingState emb = model_.propagate(tape, pv, graphs_);
    model::LossBreakdown loss = model::build_loss(tape, model_, pv, emb, batch, cfg_.lambda,
                                                  split_.train.target_behavior());
    const double value = tape.value(loss.total)[0];
    if (!std::isfinite(value))
        throw NumericalError("non-finite loss (seed " + std::to_string(cfg_.seed) +
                             ", step " + std::to_string(state.step + 1) + ")");
    tape.backward(loss.total);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, var] : pv) grads[name] = tape.grad(var);
    adam_step(state.params, grads, state.learning_rate, ++state.step);
    if (breakdown) *breakdown = std::move(loss);
    return value;
}

EpochLog Trainer::train_epoch(TrainState& state) const {
    const std::size_t I = split_.train.num_users();
    const std::size_t K = split_.train.num_behaviors();
    std::vector<std::size_t> users(I);
    std::iota(users.begin(), users.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(cfg_.seed, state.epoch));
    std::shuffle(users.begin(), users.end(), shuffle_rng);

    EpochLog log;
    log.epoch = state.epoch + 1;
    log.learning_rate = state.learning_rate;
    log.attribution.assign(K + 1, std::vector<double>(K, 0.0));
    std::vector<std::vector<std::size_t>> counts(K + 1, std::vector<std::size_t>(K, 0));

    double loss_sum = 0.0;
    for (std::size_t start = 0, bi = 0; start < I; start += cfg_.batch_size, ++bi) {
        const std::size_t end = std::min(I, start + cfg_.batch_size);
        std::vector<std::size_t> slice(users.begin() + static_cast<std::ptrdiff_t>(start),
                                       users.begin() + static_cast<std::ptrdiff_t>(end));
        data::TrainBatch batch = data::sample_batch(split_, slice, cfg_.samples_per_user,
                                                    derive_seed(cfg_.seed, state.epoch, bi));
        if (batch.empty()) continue;
        model::LossBreakdown breakdown;
        try {
            loss_sum += step(state, batch, &breakdown);
        } catch (NumericalError& e) {
            throw NumericalError(std::string(e.what()) + " in epoch " +
                                 std::to_string(state.epoch + 1) + ", batch " +
                                 std::to_string(bi));
        }
        ++log.batches;
        for (std::size_t k = 0; k <= K; ++k)
            for (std::size_t kp = 0; kp < K; ++kp) {
                log.attribution[k][kp] += breakdown.hinge_sums[k][kp];
                counts[k][kp] += breakdown.hinge_counts[k][kp];
            }
    }
    for (std::size_t k = 0; k <= K; ++k)
        for (std::size_t kp = 0; kp < K; ++kp)
            log.attribution[k][kp] =
                counts[k][kp] ? log.attribution[k][kp] / static_cast<double>(counts[k][kp]) : 0.0;
    log.mean_loss = log.batches ? loss_sum / static_cast<double>(log.batches) : 0.0;

    state.epoch += 1;
    state.learning_rate *= cfg_.lr_decay;
    state.logs.push_back(log);
    return log;
}

void Trainer::train(TrainState& state,
                    const std::function<void(const EpochLog&)>& on_epoch) const {
    while (state.epoch < cfg_.epochs) {
        EpochLog log = train_epoch(state);
        if (on_epoch) on_epoch(log);
    }
}

void save_epoch_logs(const std::vector<EpochLog>& logs, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open log file: " + path);
    for (const auto& l : logs) {
        nlohmann::json j{{"epoch", l.epoch},
                         {"lr", l.learning_rate},
                         {"mean_loss", l.mean_loss},
                         {"batches", l.batches},
                         {"attribution", l.attribution}};
        out << j.dump() << '\n';
    }
}

std::vector<EpochLog> load_epoch_logs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open log file: " + path);
    std::vector<EpochLog> logs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        EpochLog l;
        l.epoch = j.at("epoch").get<std::size_t>();
        l.learning_rate = j.at("lr").get<double>();
        l.mean_loss = j.at("mean_loss").get<double>();
        l.batches = j.at("batches").get<std::size_t>();
        l.attribution = j.at("attribution").get<std::vector<std::vector<double>>>();
        logs.push_back(std::move(l));
    }
    return logs;
}

}  // namespace mbgmn::train
