#include "mbgmn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace mbgmn::data {

InteractionTensor::InteractionTensor(std::size_t num_users, std::size_t num_items,
                                     std::vector<std::string> behavior_names,
                                     std::size_t target_behavior)
    : num_users_(num_users), num_items_(num_items),
      target_behavior_(target_behavior),
      behavior_names_(std::move(behavior_names)) {
    if (target_behavior_ >= behavior_names_.size())
        throw std::invalid_argument("target behavior index out of range");
    events_.assign(behavior_names_.size(), std::vector<std::vector<ItemEvent>>(num_users_));
}

void InteractionTensor::add_event(std::size_t user, std::size_t item, std::size_t behavior,
                                  std::optional<std::int64_t> timestamp) {
    if (user >= num_users_ || item >= num_items_ || behavior >= num_behaviors())
        throw std::out_of_range("interaction index out of range");
    auto& row = events_[behavior][user];
    auto it = std::lower_bound(row.begin(), row.end(), item,
                               [](const ItemEvent& e, std::size_t i) { return e.item < i; });
    if (it != row.end() && it->item == item) {
        if (timestamp && (!it->has_timestamp || *timestamp > it->timestamp)) {
            it->timestamp = *timestamp;
            it->has_timestamp = true;
        }
        return;  // binary tensor: duplicate collapses
    }
    row.insert(it, ItemEvent{item, timestamp.value_or(0), timestamp.has_value()});
    ++event_count_;
}

bool InteractionTensor::remove_event(std::size_t user, std::size_t item, std::size_t behavior) {
    auto& row = events_[behavior][user];
    auto it = std::lower_bound(row.begin(), row.end(), item,
                               [](const ItemEvent& e, std::size_t i) { return e.item < i; });
    if (it == row.end() || it->item != item) return false;
    row.erase(it);
    --event_count_;
    return true;
}

const std::vector<InteractionTensor::ItemEvent>&
InteractionTensor::items_of(std::size_t user, std::size_t behavior) const {
    return events_.at(behavior).at(user);
}

bool InteractionTensor::has_event(std::size_t user, std::size_t item,
                                  std::size_t behavior) const {
    const auto& row = events_[behavior][user];
    auto it = std::lower_bound(row.begin(), row.end(), item,
                               [](const ItemEvent& e, std::size_t i) { return e.item < i; });
    return it != row.end() && it->item == item;
}

bool InteractionTensor::has_any_event(std::size_t user, std::size_t item) const {
    for (std::size_t k = 0; k < num_behaviors(); ++k)
        if (has_event(user, item, k)) return true;
    return false;
}

std::size_t InteractionTensor::event_count(std::size_t behavior) const {
    std::size_t n = 0;
    for (const auto& row : events_.at(behavior)) n += row.size();
    return n;
}

std::vector<std::size_t> InteractionTensor::all_items_of(std::size_t user) const {
    std::vector<std::size_t> items;
    for (std::size_t k = 0; k < num_behaviors(); ++k)
        for (const auto& e : events_[k][user]) items.push_back(e.item);
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    return items;
}

std::size_t BehaviorGraphs::num_edges() const {
    std::size_t n = 0;
    for (const auto& g : per_behavior) n += g.adjacency.nnz();
    return n;
}

BehaviorGraphs build_graphs(const InteractionTensor& t) {
    BehaviorGraphs out;
    out.num_users = t.num_users();
    out.num_items = t.num_items();
    for (std::size_t k = 0; k < t.num_behaviors(); ++k) {
        BehaviorGraph g;
        g.user_degree.assign(t.num_users(), 0);
        g.item_degree.assign(t.num_items(), 0);
        std::vector<std::size_t> rows, cols;
        for (std::size_t u = 0; u < t.num_users(); ++u) {
            for (const auto& e : t.items_of(u, k)) {
                rows.push_back(u);
                cols.push_back(e.item);
                g.user_degree[u]++;
                g.item_degree[e.item]++;
            }
        }
        std::vector<double> ones(rows.size(), 1.0), alphas(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i)
            alphas[i] = 1.0 / std::sqrt(static_cast<double>(g.user_degree[rows[i]]) *
                                        static_cast<double>(g.item_degree[cols[i]]));
        g.adjacency = SparseMatrix::from_coo(t.num_users(), t.num_items(), rows, cols, ones);
        g.normalized = SparseMatrix::from_coo(t.num_users(), t.num_items(), rows, cols, alphas);
        g.normalized_t = g.normalized.transposed();
        out.per_behavior.push_back(std::move(g));
    }
    return out;
}

SplitDataset leave_one_out_split(const InteractionTensor& t, std::uint64_t seed) {
    SplitDataset split;
    split.train = t;
    const std::size_t tk = t.target_behavior();
    std::mt19937_64 rng(seed);
    for (std::size_t u = 0; u < t.num_users(); ++u) {
        const auto& target_events = t.items_of(u, tk);
        if (target_events.size() < 2) {
            if (!target_events.empty())
                split.excluded.push_back({u, "fewer than 2 target-behavior events"});
            continue;
        }
        std::vector<std::size_t> interacted = t.all_items_of(u);
        const std::size_t never = t.num_items() - interacted.size();
        if (never < kEvalNegatives) {
            split.excluded.push_back({u, "fewer than 99 never-interacted items"});
            continue;
        }
        // Hold out the latest-timestamp event; ties and missing timestamps
        // fall back to a seeded random choice among the candidates.
        std::vector<std::size_t> candidates;
        std::int64_t best_ts = 0;
        bool any_ts = false;
        for (std::size_t i = 0; i < target_events.size(); ++i) {
            if (!target_events[i].has_timestamp) continue;
            if (!any_ts || target_events[i].timestamp > best_ts) {
                best_ts = target_events[i].timestamp;
                any_ts = true;
            }
        }
        for (std::size_t i = 0; i < target_events.size(); ++i) {
            if (any_ts) {
                if (target_events[i].has_timestamp && target_events[i].timestamp == best_ts)
                    candidates.push_back(i);
            } else {
                candidates.push_back(i);
            }
        }
        std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
        const std::size_t held = target_events[candidates[pick(rng)]].item;

        // 99 negatives without replacement from the never-interacted complement.
        std::vector<std::size_t> complement;
        complement.reserve(never);
        std::size_t ip = 0;
        for (std::size_t j = 0; j < t.num_items(); ++j) {
            if (ip < interacted.size() && interacted[ip] == j) {
                ++ip;
                continue;
            }
            complement.push_back(j);
        }
        std::vector<std::size_t> negatives;
        negatives.reserve(kEvalNegatives);
        for (std::size_t n = 0; n < kEvalNegatives; ++n) {
            std::uniform_int_distribution<std::size_t> d(n, complement.size() - 1);
            std::swap(complement[n], complement[d(rng)]);
            negatives.push_back(complement[n]);
        }
        split.train.remove_event(u, held, tk);
        split.test.push_back({u, held, std::move(negatives)});
    }
    return split;
}

TrainBatch sample_batch(const SplitDataset& split, const std::vector<std::size_t>& users,
                        std::size_t samples_per_user, std::uint64_t seed) {
    if (samples_per_user == 0)
        throw std::invalid_argument("samples_per_user must be at least 1");
    const InteractionTensor& train = split.train;
    const std::size_t J = train.num_items();
    std::mt19937_64 rng(seed);
    TrainBatch batch;
    for (std::size_t u : users) {
        for (std::size_t k = 0; k < train.num_behaviors(); ++k) {
            const auto& events = train.items_of(u, k);
            if (events.empty() || events.size() == J) continue;
            std::uniform_int_distribution<std::size_t> pos_pick(0, events.size() - 1);
            std::uniform_int_distribution<std::size_t> item_pick(0, J - 1);
            for (std::size_t s = 0; s < samples_per_user; ++s) {
                const std::size_t pos = events[pos_pick(rng)].item;
                std::size_t neg = item_pick(rng);
                while (train.has_event(u, neg, k)) neg = item_pick(rng);
                batch.push_back({u, k, pos, neg});
            }
        }
    }
    return batch;
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Marks the top `count` entries of scores as events.
std::vector<bool> top_quantile(const std::vector<double>& scores, std::size_t count) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count),
                     order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<bool> mask(scores.size(), false);
    for (std::size_t i = 0; i < count; ++i) mask[order[i]] = true;
    return mask;
}

}  // namespace

InteractionTensor generate_synthetic(const SyntheticSpec& spec) {
    const std::size_t I = spec.num_users, J = spec.num_items, K = spec.num_behaviors;
    if (spec.density <= 0.0 || spec.density > 1.0)
        throw std::invalid_argument("density must lie in (0, 1]");
    if (spec.correlation < 0.0 || spec.correlation > 1.0)
        throw std::invalid_argument("correlation must lie in [0, 1]");
    std::vector<std::string> names = spec.behavior_names;
    if (names.empty())
        for (std::size_t k = 0; k < K; ++k) names.push_back("beh" + std::to_string(k));
    if (names.size() != K)
        throw std::invalid_argument("behavior name count does not match K");

    constexpr std::size_t kLatentDim = 8;
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> uf(I * kLatentDim), vf(J * kLatentDim);
    for (auto& x : uf) x = normal(rng);
    for (auto& x : vf) x = normal(rng);

    // Shared propensity: sigmoid of the scaled latent dot product.
    std::vector<double> base(I * J);
    for (std::size_t i = 0; i < I; ++i)
        for (std::size_t j = 0; j < J; ++j) {
            double dot = 0.0;
            for (std::size_t f = 0; f < kLatentDim; ++f)
                dot += uf[i * kLatentDim + f] * vf[j * kLatentDim + f];
            base[i * J + j] = dot / std::sqrt(static_cast<double>(kLatentDim));
        }

    const std::size_t per_behavior = static_cast<std::size_t>(
        std::llround(spec.density * static_cast<double>(I) * static_cast<double>(J)));
    if (per_behavior > I * J) throw std::invalid_argument("requested density infeasible");

    InteractionTensor t(I, J, names, K - 1);  // last behavior is the target
    for (std::size_t i = 0; i < I; ++i) t.user_ids.push_back("u" + std::to_string(i));
    for (std::size_t j = 0; j < J; ++j) t.item_ids.push_back("i" + std::to_string(j));

    std::vector<double> scores(I * J);
    for (std::size_t k = 0; k < K; ++k) {
        const bool is_target = (k == K - 1);
        for (std::size_t p = 0; p < I * J; ++p) {
            if (is_target) {
                // rho-weighted mixture of shared propensity and independent noise
                scores[p] = sigmoid(spec.correlation * base[p] +
                                    (1.0 - spec.correlation) * normal(rng));
            } else {
                scores[p] = sigmoid(base[p] + 0.1 * normal(rng));
            }
        }
        std::vector<bool> mask = top_quantile(scores, per_behavior);
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t j = 0; j < J; ++j)
                if (mask[i * J + j]) t.add_event(i, j, k);
    }
    return t;
}

InteractionTensor drop_behaviors(const InteractionTensor& t,
                                 const std::vector<std::string>& names) {
    std::vector<std::size_t> keep;
    std::vector<std::string> kept_names;
    for (std::size_t k = 0; k < t.num_behaviors(); ++k) {
        if (std::find(names.begin(), names.end(), t.behavior_names()[k]) != names.end()) {
            if (k == t.target_behavior())
                throw std::invalid_argument("cannot drop the target behavior '" +
                                            t.behavior_names()[k] + "'");
            continue;
        }
        keep.push_back(k);
        kept_names.push_back(t.behavior_names()[k]);
    }
    for (const auto& n : names)
        if (std::find(t.behavior_names().begin(), t.behavior_names().end(), n) ==
            t.behavior_names().end())
            throw std::invalid_argument("unknown behavior to drop: '" + n + "'");
    std::size_t new_target = 0;
    for (std::size_t i = 0; i < keep.size(); ++i)
        if (keep[i] == t.target_behavior()) new_target = i;
    InteractionTensor out(t.num_users(), t.num_items(), kept_names, new_target);
    out.user_ids = t.user_ids;
    out.item_ids = t.item_ids;
    for (std::size_t i = 0; i < keep.size(); ++i)
        for (std::size_t u = 0; u < t.num_users(); ++u)
            for (const auto& e : t.items_of(u, keep[i]))
                out.add_event(u, e.item, i,
                              e.has_timestamp ? std::optional<std::int64_t>(e.timestamp)
                                              : std::nullopt);
    return out;
}

InteractionTensor load_interactions(const std::string& path,
                                    const std::vector<std::string>& behavior_names,
                                    const std::string& target_behavior) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open interaction file: " + path);
    std::unordered_map<std::string, std::size_t> behavior_index;
    for (std::size_t k = 0; k < behavior_names.size(); ++k)
        behavior_index[behavior_names[k]] = k;
    auto tgt = behavior_index.find(target_behavior);
    if (tgt == behavior_index.end())
        throw std::invalid_argument("target behavior '" + target_behavior +
                                    "' is not in the declared behavior list");

    struct RawEvent {
        std::size_t user, item, behavior;
        std::optional<std::int64_t> ts;
    };
    std::vector<RawEvent> raw;
    std::unordered_map<std::string, std::size_t> user_map, item_map;
    std::vector<std::string> user_ids, item_ids;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            std::size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() < 3 || fields.size() > 4 || fields[0].empty() ||
            fields[1].empty() || fields[2].empty())
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": malformed line (expected user<TAB>item<TAB>behavior[<TAB>timestamp])");
        auto bk = behavior_index.find(fields[2]);
        if (bk == behavior_index.end())
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": unknown behavior name '" + fields[2] + "'");
        std::optional<std::int64_t> ts;
        if (fields.size() == 4) {
            try {
                ts = std::stoll(fields[3]);
            } catch (const std::exception&) {
                throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                         ": malformed timestamp '" + fields[3] + "'");
            }
        }
        auto intern = [](std::unordered_map<std::string, std::size_t>& map,
                         std::vector<std::string>& ids, const std::string& tok) {
            auto [it, inserted] = map.emplace(tok, ids.size());
            if (inserted) ids.push_back(tok);
            return it->second;
        };
        raw.push_back({intern(user_map, user_ids, fields[0]),
                       intern(item_map, item_ids, fields[1]), bk->second, ts});
    }
    if (raw.empty()) throw std::runtime_error(path + ": no interactions");

    InteractionTensor t(user_ids.size(), item_ids.size(),
                        behavior_names, tgt->second);
    t.user_ids = std::move(user_ids);
    t.item_ids = std::move(item_ids);
    for (const auto& e : raw) t.add_event(e.user, e.item, e.behavior, e.ts);
    return t;
}

void save_interactions(const InteractionTensor& t, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open output file: " + path);
    for (std::size_t k = 0; k < t.num_behaviors(); ++k) {
        for (std::size_t u = 0; u < t.num_users(); ++u) {
            for (const auto& e : t.items_of(u, k)) {
                out << (t.user_ids.empty() ? "u" + std::to_string(u) : t.user_ids[u]) << '\t'
                    << (t.item_ids.empty() ? "i" + std::to_string(e.item) : t.item_ids[e.item])
                    << '\t' << t.behavior_names()[k];
                if (e.has_timestamp) out << '\t' << e.timestamp;
                out << '\n';
            }
        }
    }
}

void save_id_maps(const InteractionTensor& t, const std::string& user_map_path,
                  const std::string& item_map_path) {
    auto dump = [](const std::vector<std::string>& ids, const std::string& path) {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open id map file: " + path);
        for (std::size_t i = 0; i < ids.size(); ++i) out << i << '\t' << ids[i] << '\n';
    };
    dump(t.user_ids, user_map_path);
    dump(t.item_ids, item_map_path);
}

}  // namespace mbgmn::data
