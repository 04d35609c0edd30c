#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mbgmn/tensor.hpp"

namespace mbgmn::data {

// Binary multi-behavior interaction tensor, stored per behavior as
// per-user sorted item lists.
class InteractionTensor {
public:
    struct ItemEvent {
        std::size_t item = 0;
        std::int64_t timestamp = 0;
        bool has_timestamp = false;
    };

    InteractionTensor() = default;
    InteractionTensor(std::size_t num_users, std::size_t num_items,
                      std::vector<std::string> behavior_names,
                      std::size_t target_behavior);

    std::size_t num_users() const { return num_users_; }
    std::size_t num_items() const { return num_items_; }
    std::size_t num_behaviors() const { return behavior_names_.size(); }
    std::size_t target_behavior() const { return target_behavior_; }
    const std::vector<std::string>& behavior_names() const { return behavior_names_; }

    // Duplicate (user, item, behavior) events collapse; latest timestamp wins.
    void add_event(std::size_t user, std::size_t item, std::size_t behavior,
                   std::optional<std::int64_t> timestamp = std::nullopt);
    bool remove_event(std::size_t user, std::size_t item, std::size_t behavior);

    const std::vector<ItemEvent>& items_of(std::size_t user, std::size_t behavior) const;
    bool has_event(std::size_t user, std::size_t item, std::size_t behavior) const;
    bool has_any_event(std::size_t user, std::size_t item) const;
    std::size_t event_count() const { return event_count_; }
    std::size_t event_count(std::size_t behavior) const;
    // Items the user touched under any behavior, sorted ascending.
    std::vector<std::size_t> all_items_of(std::size_t user) const;

    // External id maps (internal index -> external token).
    std::vector<std::string> user_ids;
    std::vector<std::string> item_ids;

private:
    std::size_t num_users_ = 0, num_items_ = 0, target_behavior_ = 0;
    std::vector<std::string> behavior_names_;
    // events_[behavior][user] sorted by item id
    std::vector<std::vector<std::vector<ItemEvent>>> events_;
    std::size_t event_count_ = 0;
};

// Per-behavior adjacency with symmetric degree normalization.
struct BehaviorGraph {
    SparseMatrix adjacency;   // I x J, entries 1
    SparseMatrix normalized;  // I x J, entries 1/sqrt(du*dv)
    SparseMatrix normalized_t;  // J x I transpose of the above
    std::vector<std::size_t> user_degree;
    std::vector<std::size_t> item_degree;
};

struct BehaviorGraphs {
    std::vector<BehaviorGraph> per_behavior;
    std::size_t num_users = 0, num_items = 0;
    std::size_t num_edges() const;
};

BehaviorGraphs build_graphs(const InteractionTensor& t);

struct SplitDataset {
    InteractionTensor train;
    // Per evaluated user: the held-out target-behavior item and 99 negatives.
    struct HeldOut {
        std::size_t user;
        std::size_t item;
        std::vector<std::size_t> negatives;
    };
    std::vector<HeldOut> test;
    struct Exclusion {
        std::size_t user;
        std::string reason;
    };
    std::vector<Exclusion> excluded;
};

constexpr std::size_t kEvalNegatives = 99;

SplitDataset leave_one_out_split(const InteractionTensor& t, std::uint64_t seed);

struct TrainTuple {
    std::size_t user;
    std::size_t target_behavior;  // k' the supervision comes from
    std::size_t positive_item;
    std::size_t negative_item;
};
using TrainBatch = std::vector<TrainTuple>;

TrainBatch sample_batch(const SplitDataset& split, const std::vector<std::size_t>& users,
                        std::size_t samples_per_user, std::uint64_t seed);

struct SyntheticSpec {
    std::size_t num_users = 500;
    std::size_t num_items = 200;
    std::size_t num_behaviors = 3;
    double density = 0.02;           // per behavior, fraction of I*J
    double correlation = 0.8;        // rho: how informative context behaviors are
    std::uint64_t seed = 7;
    std::vector<std::string> behavior_names;  // defaults to beh0..; last is target
};

InteractionTensor generate_synthetic(const SyntheticSpec& spec);

// Removes the named context behaviors (for the -pv / -cart / +buy-only runs).
// Dropping the target behavior is an error.
InteractionTensor drop_behaviors(const InteractionTensor& t,
                                 const std::vector<std::string>& names);

// TSV: user<TAB>item<TAB>behavior[<TAB>unix-seconds]
InteractionTensor load_interactions(const std::string& path,
                                    const std::vector<std::string>& behavior_names,
                                    const std::string& target_behavior);
void save_interactions(const InteractionTensor& t, const std::string& path);
void save_id_maps(const InteractionTensor& t, const std::string& user_map_path,
                  const std::string& item_map_path);

}  // namespace mbgmn::data
