#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mbgmn/model.hpp"
#include "test_helpers.hpp"

using namespace mbgmn;
using namespace mbgmn::testing;

namespace {

data::BehaviorGraphs random_graphs(std::size_t I, std::size_t J, std::size_t K,
                                   std::mt19937_64& rng, double p = 0.4) {
    data::InteractionTensor t(I, J, std::vector<std::string>(K, ""), 0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t j = 0; j < J; ++j)
                if (u(rng) < p) t.add_event(i, j, k);
    return data::build_graphs(t);
}

double lrelu(double x, double slope) { return x >= 0 ? x : slope * x; }

// One residual message pass: out = e + lrelu(N * other), all dense.
Tensor conv_oracle(const Tensor& e, const Tensor& other, const Tensor& norm,
                   double slope) {
    Tensor out = e;
    for (std::size_t i = 0; i < e.rows(); ++i)
        for (std::size_t c = 0; c < e.cols(); ++c) {
            double acc = 0;
            for (std::size_t j = 0; j < other.rows(); ++j)
                acc += norm.at(i, j) * other.at(j, c);
            out.at(i, c) += lrelu(acc, slope);
        }
    return out;
}

// Naive multi-head cross-behavior attention, one entity row at a time.
std::vector<Tensor> attention_oracle(const std::vector<Tensor>& channels,
                                     const std::vector<Tensor>& q_heads) {
    const std::size_t K = channels.size();
    const std::size_t n = channels[0].rows(), d = channels[0].cols();
    const std::size_t H = q_heads.size(), dh = d / H;
    std::vector<Tensor> refined(K, Tensor({n, d}));
    for (std::size_t row = 0; row < n; ++row) {
        // per-head projections of every channel for this entity
        std::vector<std::vector<std::vector<double>>> proj(
            H, std::vector<std::vector<double>>(K, std::vector<double>(dh, 0.0)));
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t r = 0; r < dh; ++r)
                    for (std::size_t c = 0; c < d; ++c)
                        proj[h][k][r] += q_heads[h].at(r, c) * channels[k].at(row, c);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t k = 0; k < K; ++k) {
                std::vector<double> logits(K, 0.0);
                for (std::size_t kp = 0; kp < K; ++kp) {
                    for (std::size_t r = 0; r < dh; ++r)
                        logits[kp] += proj[h][k][r] * proj[h][kp][r];
                    logits[kp] /= std::sqrt(double(dh));
                }
                double mx = logits[0];
                for (double l : logits) mx = std::max(mx, l);
                double z = 0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    z += l;
                }
                for (std::size_t kp = 0; kp < K; ++kp)
                    for (std::size_t c = 0; c < dh; ++c)
                        refined[k].at(row, h * dh + c) +=
                            (logits[kp] / z) * channels[kp].at(row, h * dh + c);
            }
    }
    return refined;
}

std::vector<Tensor> attention_fused_and_refined(const std::vector<Tensor>& channels,
                                                const std::vector<Tensor>& q_heads,
                                                Tensor* fused) {
    auto refined = attention_oracle(channels, q_heads);
    if (fused) {
        *fused = Tensor({channels[0].rows(), channels[0].cols()});
        for (const auto& r : refined)
            for (std::size_t i = 0; i < fused->size(); ++i) (*fused)[i] += r[i];
    }
    return refined;
}

}  // namespace

TEST_CASE("graph conv on an empty graph is the identity") {
    const std::size_t I = 3, J = 4, d = 4;
    data::InteractionTensor it(I, J, {"buy"}, 0);
    it.add_event(0, 0, 0);
    auto graphs = data::build_graphs(it);
    // strip the only edge to get an empty graph with valid structure
    data::InteractionTensor empty(I, J, {"buy"}, 0);
    auto eg = data::build_graphs(empty);

    model::Model m({.dim = d, .low_rank_dim = 2, .heads = 1, .layers = 1}, I, J, 1);
    std::mt19937_64 rng(3);
    ad::Tape t;
    ad::Var u = t.leaf(random_tensor({I, d}, rng));
    ad::Var v = t.leaf(random_tensor({J, d}, rng));
    auto [u2, v2] = m.graph_conv(t, u, v, eg.per_behavior[0]);
    CHECK(max_abs_diff(t.value(u2), t.value(u)) == 0.0);
    CHECK(max_abs_diff(t.value(v2), t.value(v)) == 0.0);
}

TEST_CASE("graph conv with one unit-weight edge") {
    const std::size_t d = 3;
    data::InteractionTensor it(2, 2, {"buy"}, 0);
    it.add_event(0, 1, 0);  // alpha = 1
    auto graphs = data::build_graphs(it);
    model::Model m({.dim = d, .low_rank_dim = 2, .heads = 1, .layers = 1}, 2, 2, 1);
    ad::Tape t;
    ad::Var u = t.leaf(Tensor({2, d}, {1, 2, 3, 4, 5, 6}));
    ad::Var v = t.leaf(Tensor({2, d}, {0, 0, 0, 2, -1, 0.5}));
    auto [u2, v2] = m.graph_conv(t, u, v, graphs.per_behavior[0]);
    // user 0 receives item 1: lrelu([2,-1,0.5], 0.1) = [2,-0.1,0.5]
    CHECK(t.value(u2).at(0, 0) == doctest::Approx(3.0));
    CHECK(t.value(u2).at(0, 1) == doctest::Approx(1.9));
    CHECK(t.value(u2).at(0, 2) == doctest::Approx(3.5));
    // user 1 untouched
    CHECK(t.value(u2).at(1, 0) == 4.0);
    // item 1 receives user 0: [1,2,3] all positive
    CHECK(t.value(v2).at(1, 0) == doctest::Approx(3.0));
    CHECK(t.value(v2).at(1, 1) == doctest::Approx(1.0));
    CHECK(t.value(v2).at(1, 2) == doctest::Approx(3.5));
    // item 0 untouched
    CHECK(t.value(v2).at(0, 0) == 0.0);
}

TEST_CASE("graph conv matches the per-edge scalar recurrence") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t I = 2 + std::size_t(rng() % 30);
        const std::size_t J = 2 + std::size_t(rng() % 30);
        const std::size_t d = 3;
        auto graphs = random_graphs(I, J, 1, rng, 0.3);
        model::Model m({.dim = d, .low_rank_dim = 2, .heads = 1, .layers = 1}, I, J, 1);
        ad::Tape t;
        Tensor eu = random_tensor({I, d}, rng), ev = random_tensor({J, d}, rng);
        auto [u2, v2] = m.graph_conv(t, t.leaf(eu), t.leaf(ev), graphs.per_behavior[0]);
        Tensor exp_u = conv_oracle(eu, ev, graphs.per_behavior[0].normalized.densify(), 0.1);
        Tensor exp_v = conv_oracle(ev, eu, graphs.per_behavior[0].normalized_t.densify(), 0.1);
        CHECK(max_abs_diff(t.value(u2), exp_u) < 1e-12);
        CHECK(max_abs_diff(t.value(v2), exp_v) < 1e-12);
    }
}

TEST_CASE("attention over a single channel is the identity") {
    const std::size_t d = 4;
    model::Model m({.dim = d, .low_rank_dim = 2, .heads = 2, .layers = 1}, 3, 3, 1);
    ParamStore store;
    m.init_params(store, 5);
    std::mt19937_64 rng(9);
    ad::Tape t;
    auto pv = store.register_on(t);
    ad::Var ch = t.leaf(random_tensor({3, d}, rng));
    auto res = m.behavior_attention(t, pv, {ch}, 'u');
    CHECK(max_abs_diff(t.value(res.fused), t.value(ch)) < 1e-14);
    REQUIRE(res.refined.size() == 1);
    CHECK(max_abs_diff(t.value(res.refined[0]), t.value(ch)) < 1e-14);
}

TEST_CASE("identical channels get uniform weights") {
    const std::size_t d = 4, K = 3;
    model::Model m({.dim = d, .low_rank_dim = 2, .heads = 2, .layers = 1}, 3, 3, K);
    ParamStore store;
    m.init_params(store, 6);
    std::mt19937_64 rng(10);
    ad::Tape t;
    auto pv = store.register_on(t);
    Tensor e = random_tensor({3, d}, rng);
    std::vector<ad::Var> chans;
    for (std::size_t k = 0; k < K; ++k) chans.push_back(t.leaf(e));
    auto res = m.behavior_attention(t, pv, chans, 'u');
    // each refined channel is a convex combination of identical inputs
    for (std::size_t k = 0; k < K; ++k)
        CHECK(max_abs_diff(t.value(res.refined[k]), e) < 1e-12);
    // fused = K * e
    Tensor scaled = e;
    for (double& x : scaled.vec()) x *= double(K);
    CHECK(max_abs_diff(t.value(res.fused), scaled) < 1e-12);
}

TEST_CASE("attention matches the naive triple-loop oracle") {
    const std::size_t d = 4, K = 3, H = 2, n = 5;
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        model::Model m({.dim = d, .low_rank_dim = 2, .heads = H, .layers = 1}, n, n, K);
        ParamStore store;
        m.init_params(store, 400 + std::uint64_t(trial));
        ad::Tape t;
        auto pv = store.register_on(t);
        std::vector<Tensor> raw;
        std::vector<ad::Var> chans;
        for (std::size_t k = 0; k < K; ++k) {
            raw.push_back(random_tensor({n, d}, rng));
            chans.push_back(t.leaf(raw.back()));
        }
        auto res = m.behavior_attention(t, pv, chans, 'u');
        std::vector<Tensor> q{store.value("attn.u.Q0"), store.value("attn.u.Q1")};
        Tensor fused;
        auto refined = attention_fused_and_refined(raw, q, &fused);
        for (std::size_t k = 0; k < K; ++k)
            CHECK(max_abs_diff(t.value(res.refined[k]), refined[k]) < 1e-10);
        CHECK(max_abs_diff(t.value(res.fused), fused) < 1e-10);
    }
}

TEST_CASE("mean-fusion ablation differs from attention fusion") {
    const std::size_t d = 4, K = 2, n = 4;
    std::mt19937_64 rng(29);
    Tensor a = random_tensor({n, d}, rng), b = random_tensor({n, d}, rng);

    model::ModelConfig cfg{.dim = d, .low_rank_dim = 2, .heads = 2, .layers = 1};
    model::Model attn(cfg, n, n, K);
    cfg.no_behavior_attention = true;
    model::Model mean(cfg, n, n, K);
    ParamStore store;
    attn.init_params(store, 12);
    mean.init_params(store, 12);

    ad::Tape t;
    auto pv = store.register_on(t);
    auto ra = attn.behavior_attention(t, pv, {t.leaf(a), t.leaf(b)}, 'u');
    auto rm = mean.behavior_attention(t, pv, {t.leaf(a), t.leaf(b)}, 'u');
    // mean fusion is exactly (a + b) / 2
    Tensor avg({n, d});
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = 0.5 * (a[i] + b[i]);
    CHECK(max_abs_diff(t.value(rm.fused), avg) < 1e-14);
    CHECK(max_abs_diff(t.value(ra.fused), t.value(rm.fused)) > 1e-6);
}

TEST_CASE("propagation on an empty graph doubles the contextualized embeddings") {
    const std::size_t I = 3, J = 4, d = 4;
    data::InteractionTensor it(I, J, {"buy"}, 0);
    auto graphs = data::build_graphs(it);
    model::Model m({.dim = d, .low_rank_dim = 2, .heads = 2, .layers = 1}, I, J, 1);
    ParamStore store;
    m.init_params(store, 15);
    ad::Tape t;
    auto pv = store.register_on(t);
    auto st = m.propagate(t, pv, graphs);
    auto ctx = m.contextualize_all(t, pv, graphs);
    // conv is the identity, so readout = layer0 + layer1 = 2 * contextualized;
    // K = 1 makes the fused channel equal the behavior channel as well
    Tensor doubled = t.value(ctx[0].first);
    for (double& x : doubled.vec()) x *= 2.0;
    CHECK(max_abs_diff(t.value(st.user_readout[0]), doubled) < 1e-12);
    CHECK(max_abs_diff(t.value(st.user_readout[1]), doubled) < 1e-12);
    Tensor doubled_v = t.value(ctx[0].second);
    for (double& x : doubled_v.vec()) x *= 2.0;
    CHECK(max_abs_diff(t.value(st.item_readout[0]), doubled_v) < 1e-12);
}

TEST_CASE("two-layer propagation matches an unrolled dense oracle") {
    const std::size_t I = 4, J = 5, K = 2, d = 4, H = 2, L = 2;
    std::mt19937_64 rng(47);
    auto graphs = random_graphs(I, J, K, rng);
    model::Model m({.dim = d, .low_rank_dim = 2, .heads = H, .layers = L}, I, J, K);
    ParamStore store;
    m.init_params(store, 99);

    ad::Tape t;
    auto pv = store.register_on(t);
    auto st = m.propagate(t, pv, graphs);

    // layer 0 from the model's own contextualizer (verified elsewhere),
    // everything above it recomputed densely
    auto ctx = m.contextualize_all(t, pv, graphs);
    std::vector<Tensor> u(K), v(K);
    for (std::size_t k = 0; k < K; ++k) {
        u[k] = t.value(ctx[k].first);
        v[k] = t.value(ctx[k].second);
    }
    std::vector<Tensor> q{store.value("attn.u.Q0"), store.value("attn.u.Q1")};

    Tensor fu, fv;
    attention_fused_and_refined(u, q, &fu);
    attention_fused_and_refined(v, q, &fv);
    std::vector<Tensor> ru_sum = u, rv_sum = v;  // readout accumulators, channels 0..K-1
    Tensor gu_sum = fu, gv_sum = fv;             // fused-channel accumulators

    Tensor gu = fu, gv = fv;
    for (std::size_t l = 1; l <= L; ++l) {
        std::vector<Tensor> nu(K), nv(K);
        for (std::size_t k = 0; k < K; ++k) {
            const auto& g = graphs.per_behavior[k];
            nu[k] = conv_oracle(u[k], v[k], g.normalized.densify(), 0.1);
            nv[k] = conv_oracle(v[k], u[k], g.normalized_t.densify(), 0.1);
        }
        u = nu;
        v = nv;
        attention_fused_and_refined(u, q, &gu);
        attention_fused_and_refined(v, q, &gv);
        for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t i = 0; i < u[k].size(); ++i) ru_sum[k][i] += u[k][i];
            for (std::size_t i = 0; i < v[k].size(); ++i) rv_sum[k][i] += v[k][i];
        }
        for (std::size_t i = 0; i < gu.size(); ++i) gu_sum[i] += gu[i];
        for (std::size_t i = 0; i < gv.size(); ++i) gv_sum[i] += gv[i];
    }

    for (std::size_t k = 0; k < K; ++k) {
        CHECK(max_abs_diff(t.value(st.user_readout[k]), ru_sum[k]) < 1e-10);
        CHECK(max_abs_diff(t.value(st.item_readout[k]), rv_sum[k]) < 1e-10);
    }
    CHECK(max_abs_diff(t.value(st.user_readout[K]), gu_sum) < 1e-10);
    CHECK(max_abs_diff(t.value(st.item_readout[K]), gv_sum) < 1e-10);

    // shape bookkeeping: L+1 layers, K+1 channels each
    CHECK(st.user_layers.size() == L + 1);
    for (const auto& layer : st.user_layers) CHECK(layer.size() == K + 1);
}

TEST_CASE("gradients flow through propagation") {
    const std::size_t I = 3, J = 3, d = 4;
    std::mt19937_64 rng(53);
    auto graphs = random_graphs(I, J, 2, rng);
    model::Model m({.dim = d, .low_rank_dim = 2, .heads = 2, .layers = 2}, I, J, 2);
    ParamStore store;
    m.init_params(store, 61);

    auto eval = [&](ParamStore& s, std::map<std::string, Tensor>* grads) {
        ad::Tape t;
        auto pv = s.register_on(t);
        auto st = m.propagate(t, pv, graphs);
        ad::Var loss = t.sum_all(t.mul(st.user_readout[2], st.user_readout[2]));
        loss = t.add(loss, t.sum_all(t.mul(st.item_readout[0], st.item_readout[0])));
        double val = t.value(loss)[0];
        if (grads) {
            t.backward(loss);
            for (const auto& [name, var] : pv) (*grads)[name] = t.grad(var);
        }
        return val;
    };
    std::map<std::string, Tensor> grads;
    eval(store, &grads);
    for (const std::string& name : {"attn.u.Q0", "attn.u.Q1", "emb.user", "ctx.v.W1"}) {
        Tensor base = store.value(name);
        auto f = [&](const Tensor& p) {
            store.value(name) = p;
            double v = eval(store, nullptr);
            store.value(name) = base;
            return v;
        };
        auto report = ad::finite_diff_check(f, base, grads.at(name), 1e-5, 1e-4);
        INFO("param " << name << " max rel err " << report.max_rel_error);
        CHECK(report.pass);
    }
}
