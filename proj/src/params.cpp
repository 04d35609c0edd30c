#include "mbgmn/params.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace mbgmn {

namespace {
// FNV-1a over the serialized payload.
std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 1099511628211ull;
    }
    return h;
}
}  // namespace

Tensor& ParamStore::add(const std::string& name, std::vector<std::size_t> shape,
                        std::uint64_t seed, double stddev) {
    Tensor t(shape);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(t), Tensor(shape), Tensor(shape)});
    return entries_.back().value;
}

Tensor& ParamStore::add_zeros(const std::string& name, std::vector<std::size_t> shape) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, Tensor(shape), Tensor(shape), Tensor(shape)});
    return entries_.back().value;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) != 0; }

ParamStore::Entry& ParamStore::entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second];
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
    return const_cast<ParamStore*>(this)->entry(name);
}

std::size_t ParamStore::coordinate_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

std::map<std::string, ad::Var> ParamStore::register_on(ad::Tape& tape) const {
    std::map<std::string, ad::Var> vars;
    for (const auto& e : entries_) vars[e.name] = tape.leaf(e.value);
    return vars;
}

Tensor ParamStore::flatten() const {
    Tensor flat({coordinate_count()});
    std::size_t off = 0;
    for (const auto& e : entries_) {
        std::memcpy(flat.data() + off, e.value.data(), e.value.size() * sizeof(double));
        off += e.value.size();
    }
    return flat;
}

void ParamStore::unflatten(const Tensor& flat) {
    if (flat.size() != coordinate_count())
        throw std::invalid_argument("flat vector size mismatch");
    std::size_t off = 0;
    for (auto& e : entries_) {
        std::memcpy(e.value.data(), flat.data() + off, e.value.size() * sizeof(double));
        off += e.value.size();
    }
}

void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
               double lr, std::uint64_t step, const AdamConfig& cfg) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (auto& e : params.entries()) {
        auto it = grads.find(e.name);
        if (it == grads.end()) continue;
        const Tensor& g = it->second;
        if (!g.same_shape(e.value))
            throw std::invalid_argument("gradient shape mismatch for " + e.name);
        for (std::size_t i = 0; i < g.size(); ++i) {
            e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g[i];
            e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = e.m[i] / bc1;
            const double vhat = e.v[i] / bc2;
            e.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
    }
}

namespace {

constexpr std::uint32_t kMagic = 0x4d42474dU;  // "MBGM"
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& buf, const T& v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_str(std::string& buf, const std::string& s) {
    put(buf, static_cast<std::uint64_t>(s.size()));
    buf.append(s);
}

void put_tensor(std::string& buf, const Tensor& t) {
    put(buf, static_cast<std::uint64_t>(t.shape().size()));
    for (auto s : t.shape()) put(buf, static_cast<std::uint64_t>(s));
    buf.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    template <typename T>
    T get() {
        if (pos + sizeof(T) > buf.size()) throw std::runtime_error("truncated checkpoint");
        T v;
        std::memcpy(&v, buf.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    std::string get_str() {
        auto n = get<std::uint64_t>();
        if (pos + n > buf.size()) throw std::runtime_error("truncated checkpoint");
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    Tensor get_tensor() {
        auto rank = get<std::uint64_t>();
        std::vector<std::size_t> shape(rank);
        for (auto& s : shape) s = static_cast<std::size_t>(get<std::uint64_t>());
        const std::size_t n = Tensor::count(shape);
        if (pos + n * sizeof(double) > buf.size())
            throw std::runtime_error("truncated checkpoint");
        Tensor t(shape);
        std::memcpy(t.data(), buf.data() + pos, n * sizeof(double));
        pos += n * sizeof(double);
        return t;
    }
};

}  // namespace

void save_checkpoint(const CheckpointState& state, const std::string& path) {
    std::string payload;
    put(payload, kMagic);
    put(payload, kVersion);
    put(payload, state.step);
    put(payload, state.epoch);
    put(payload, state.learning_rate);
    put(payload, static_cast<std::uint64_t>(state.params.count()));
    for (const auto& e : state.params.entries()) {
        put_str(payload, e.name);
        put_tensor(payload, e.value);
        put_tensor(payload, e.m);
        put_tensor(payload, e.v);
    }
    const std::uint64_t checksum = fnv1a(payload.data(), payload.size());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

CheckpointState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (all.size() < sizeof(std::uint64_t)) throw std::runtime_error("corrupt checkpoint: " + path);
    const std::size_t payload_size = all.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, all.data() + payload_size, sizeof(stored));
    if (fnv1a(all.data(), payload_size) != stored)
        throw std::runtime_error("checkpoint checksum mismatch: " + path);
    std::string payload = all.substr(0, payload_size);
    Reader r{payload};
    if (r.get<std::uint32_t>() != kMagic) throw std::runtime_error("not a checkpoint file: " + path);
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    CheckpointState st;
    st.step = r.get<std::uint64_t>();
    st.epoch = r.get<std::uint64_t>();
    st.learning_rate = r.get<double>();
    const auto n = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < n; ++i) {
        std::string name = r.get_str();
        Tensor value = r.get_tensor();
        Tensor& slot = st.params.add_zeros(name, value.shape());
        slot = value;
        auto& e = st.params.entry(name);
        e.m = r.get_tensor();
        e.v = r.get_tensor();
    }
    return st;
}

}  // namespace mbgmn
