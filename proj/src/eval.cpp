#include "mbgmn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace mbgmn::eval {

std::pair<double, double> rank_metrics(std::size_t rank, std::size_t N) {
    if (rank < 1 || rank > data::kEvalNegatives + 1)
        throw std::out_of_range("rank must lie in [1, 100]");
    if (rank > N) return {0.0, 0.0};
    return {1.0, 1.0 / std::log2(static_cast<double>(rank) + 1.0)};
}

namespace {

std::size_t eval_threads() {
    if (const char* env = std::getenv("MBGMN_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<std::size_t>(v);
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc ? hc : 1;
}

// 1-based rank of candidate 0 under (score desc, item id asc).
std::size_t rank_of_first(const std::vector<std::size_t>& items,
                          const std::vector<double>& scores) {
    std::size_t rank = 1;
    for (std::size_t i = 1; i < items.size(); ++i) {
        if (scores[i] > scores[0] || (scores[i] == scores[0] && items[i] < items[0]))
            ++rank;
    }
    return rank;
}

}  // namespace

EvalReport evaluate(const data::SplitDataset& split, const Scorer& scorer,
                    const std::vector<std::size_t>& cutoffs,
                    const std::vector<std::pair<std::size_t, std::size_t>>& buckets) {
    EvalReport rep;
    rep.cutoffs = cutoffs;
    rep.excluded_users = split.excluded.size();
    for (const auto& e : split.excluded)
        rep.exclusion_reasons.push_back("user " + std::to_string(e.user) + ": " + e.reason);

    const std::size_t n = split.test.size();
    std::vector<std::size_t> ranks(n);
    const std::size_t threads = std::min(eval_threads(), std::max<std::size_t>(n, 1));
    auto worker = [&](std::size_t t) {
        for (std::size_t i = t; i < n; i += threads) {
            const auto& h = split.test[i];
            std::vector<std::size_t> items;
            items.reserve(1 + h.negatives.size());
            items.push_back(h.item);
            items.insert(items.end(), h.negatives.begin(), h.negatives.end());
            ranks[i] = rank_of_first(items, scorer(h.user, items));
        }
    };
    if (threads <= 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker, t);
        for (auto& th : pool) th.join();
    }

    rep.evaluated_users = n;
    rep.hr.assign(cutoffs.size(), 0.0);
    rep.ndcg.assign(cutoffs.size(), 0.0);
    for (const auto& [lo, hi] : buckets)
        rep.buckets.push_back({lo, hi, 0, std::vector<double>(cutoffs.size(), 0.0),
                               std::vector<double>(cutoffs.size(), 0.0)});

    const std::size_t tk = split.train.target_behavior();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t degree = split.train.items_of(split.test[i].user, tk).size();
        EvalReport::Bucket* bucket = nullptr;
        for (auto& b : rep.buckets)
            if (degree >= b.lo && degree <= b.hi) {
                bucket = &b;
                break;
            }
        if (bucket) bucket->users++;
        for (std::size_t c = 0; c < cutoffs.size(); ++c) {
            auto [hr, ndcg] = rank_metrics(ranks[i], cutoffs[c]);
            rep.hr[c] += hr;
            rep.ndcg[c] += ndcg;
            if (bucket) {
                bucket->hr[c] += hr;
                bucket->ndcg[c] += ndcg;
            }
        }
    }
    if (n > 0)
        for (std::size_t c = 0; c < cutoffs.size(); ++c) {
            rep.hr[c] /= static_cast<double>(n);
            rep.ndcg[c] /= static_cast<double>(n);
        }
    for (auto& b : rep.buckets)
        if (b.users > 0)
            for (std::size_t c = 0; c < cutoffs.size(); ++c) {
                b.hr[c] /= static_cast<double>(b.users);
                b.ndcg[c] /= static_cast<double>(b.users);
            }
    return rep;
}

Scorer model_scorer(const model::Model& model, const ParamStore& params,
                    const data::BehaviorGraphs& graphs, std::size_t target_behavior) {
    // One full-graph forward; snapshot the readouts and the parameters the
    // prediction head needs, then score candidates on throwaway tapes.
    auto readout_user = std::make_shared<std::vector<Tensor>>();
    auto readout_item = std::make_shared<std::vector<Tensor>>();
    {
        ad::Tape tape;
        model::ParamVars pv = params.register_on(tape);
        model::EmbeddingState st = model.propagate(tape, pv, graphs);
        for (auto v : st.user_readout) readout_user->push_back(tape.value(v));
        for (auto v : st.item_readout) readout_item->push_back(tape.value(v));
    }
    auto snapshot = std::make_shared<ParamStore>(params);
    auto model_copy = std::make_shared<model::Model>(model);
    const std::size_t K = model.num_behaviors();
    return [=](std::size_t user, const std::vector<std::size_t>& items) {
        ad::Tape tape;
        model::ParamVars pv;
        for (const auto& e : snapshot->entries()) pv[e.name] = tape.constant(e.value);
        model::EmbeddingState st;
        st.user_readout.resize(K + 1);
        st.item_readout.resize(K + 1);
        for (std::size_t k = 0; k <= K; ++k) {
            st.user_readout[k] = tape.constant((*readout_user)[k]);
            st.item_readout[k] = tape.constant((*readout_item)[k]);
        }
        std::vector<std::size_t> users(items.size(), user);
        ad::Var s = model_copy->score_pairs(tape, pv, st, users, items, K, target_behavior);
        return tape.value(s).vec();
    };
}

Scorer popularity_scorer(const data::SplitDataset& split) {
    auto counts = std::make_shared<std::vector<double>>(split.train.num_items(), 0.0);
    const std::size_t tk = split.train.target_behavior();
    for (std::size_t u = 0; u < split.train.num_users(); ++u)
        for (const auto& e : split.train.items_of(u, tk)) (*counts)[e.item] += 1.0;
    return [counts](std::size_t, const std::vector<std::size_t>& items) {
        std::vector<double> scores(items.size());
        for (std::size_t i = 0; i < items.size(); ++i) scores[i] = (*counts)[items[i]];
        return scores;
    };
}

Scorer random_scorer(std::uint64_t seed) {
    return [seed](std::size_t user, const std::vector<std::size_t>& items) {
        std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ull * (user + 1)));
        std::uniform_real_distribution<double> dist(0.0, 1.0);
        std::vector<double> scores(items.size());
        for (auto& s : scores) s = dist(rng);
        return scores;
    };
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["cutoffs"] = cutoffs;
    j["hr"] = hr;
    j["ndcg"] = ndcg;
    j["evaluated_users"] = evaluated_users;
    j["excluded_users"] = excluded_users;
    j["exclusion_reasons"] = exclusion_reasons;
    j["buckets"] = nlohmann::json::array();
    for (const auto& b : buckets)
        j["buckets"].push_back({{"lo", b.lo},
                                {"hi", b.hi},
                                {"users", b.users},
                                {"hr", b.hr},
                                {"ndcg", b.ndcg}});
    return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    EvalReport r;
    r.cutoffs = j.at("cutoffs").get<std::vector<std::size_t>>();
    r.hr = j.at("hr").get<std::vector<double>>();
    r.ndcg = j.at("ndcg").get<std::vector<double>>();
    r.evaluated_users = j.at("evaluated_users").get<std::size_t>();
    r.excluded_users = j.at("excluded_users").get<std::size_t>();
    r.exclusion_reasons = j.at("exclusion_reasons").get<std::vector<std::string>>();
    for (const auto& bj : j.at("buckets")) {
        Bucket b;
        b.lo = bj.at("lo").get<std::size_t>();
        b.hi = bj.at("hi").get<std::size_t>();
        b.users = bj.at("users").get<std::size_t>();
        b.hr = bj.at("hr").get<std::vector<double>>();
        b.ndcg = bj.at("ndcg").get<std::vector<double>>();
        r.buckets.push_back(std::move(b));
    }
    return r;
}

std::string EvalReport::to_text() const {
    std::ostringstream out;
    out << "evaluated users: " << evaluated_users
        << "  excluded: " << excluded_users << "\n";
    out << "  N      HR     NDCG\n";
    for (std::size_t c = 0; c < cutoffs.size(); ++c) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%3zu  %6.4f  %6.4f\n", cutoffs[c], hr[c], ndcg[c]);
        out << buf;
    }
    for (const auto& b : buckets) {
        out << "bucket [" << b.lo << ", ";
        if (b.hi == std::size_t(-1))
            out << "inf";
        else
            out << b.hi;
        out << "] users=" << b.users;
        if (b.users > 0 && !cutoffs.empty()) {
            const std::size_t last = cutoffs.size() - 1;
            char buf[96];
            std::snprintf(buf, sizeof buf, "  HR@%zu=%6.4f NDCG@%zu=%6.4f",
                          cutoffs[last], b.hr[last], cutoffs[last], b.ndcg[last]);
            out << buf;
        }
        out << "\n";
    }
    return out.str();
}

DependencyReport dependency_report(const std::vector<train::EpochLog>& logs) {
    if (logs.empty()) throw std::invalid_argument("dependency report needs at least one epoch");
    DependencyReport rep;
    rep.matrix = logs.back().attribution;
    rep.from_epoch = logs.back().epoch;
    return rep;
}

std::string DependencyReport::to_json() const {
    nlohmann::json j{{"epoch", from_epoch}, {"mean_hinge", matrix}};
    return j.dump(2);
}

}  // namespace mbgmn::eval
