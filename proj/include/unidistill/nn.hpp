#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unidistill/autodiff.hpp"
#include "unidistill/error.hpp"
#include "unidistill/rng.hpp"

namespace unidistill {

// Flat parameter vector partitioned into named, contiguous, row-major
// segments. The concatenation of segments in insertion order is the
// canonical flat vector shared with the optimizer.
class ParamStore {
public:
    struct Segment {
        std::string name;
        std::size_t rows = 0;
        std::size_t cols = 0;
        std::size_t offset = 0;
        std::size_t size() const { return rows * cols; }
    };

    std::size_t add_segment(const std::string& name, std::size_t rows, std::size_t cols, double fill = 0.0) {
        for (const auto& s : segments_)
            if (s.name == name) throw ContractError("ParamStore: duplicate segment '" + name + "'");
        segments_.push_back({name, rows, cols, values_.size()});
        values_.resize(values_.size() + rows * cols, fill);
        return segments_.size() - 1;
    }

    std::size_t total_len() const { return values_.size(); }
    const std::vector<Segment>& segments() const { return segments_; }
    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }

    const Segment& segment(const std::string& name) const {
        for (const auto& s : segments_)
            if (s.name == name) return s;
        throw ContractError("ParamStore: no segment '" + name + "'");
    }

    std::span<double> segment_values(const std::string& name) {
        const auto& s = segment(name);
        return std::span<double>(values_).subspan(s.offset, s.size());
    }
    std::span<const double> segment_values(const std::string& name) const {
        const auto& s = segment(name);
        return std::span<const double>(values_).subspan(s.offset, s.size());
    }

    ad::Matrix segment_matrix(const Segment& s) const {
        ad::Matrix m(static_cast<ad::Index>(s.rows), static_cast<ad::Index>(s.cols));
        for (std::size_t r = 0; r < s.rows; ++r)
            for (std::size_t c = 0; c < s.cols; ++c) m(r, c) = values_[s.offset + r * s.cols + c];
        return m;
    }

    bool frozen() const { return frozen_; }

    // Value-equal copy that never receives gradient.
    ParamStore frozen_snapshot() const {
        ParamStore copy = *this;
        copy.frozen_ = true;
        return copy;
    }

    friend bool operator==(const ParamStore& a, const ParamStore& b) {
        if (a.values_ != b.values_ || a.segments_.size() != b.segments_.size()) return false;
        for (std::size_t i = 0; i < a.segments_.size(); ++i)
            if (a.segments_[i].name != b.segments_[i].name || a.segments_[i].rows != b.segments_[i].rows ||
                a.segments_[i].cols != b.segments_[i].cols)
                return false;
        return true;
    }

private:
    std::vector<Segment> segments_;
    std::vector<double> values_;
    bool frozen_ = false;
};

// Leaf variables of a ParamStore on one tape.
class BoundParams {
public:
    BoundParams(ad::Tape& tape, const ParamStore& store) : segments_(store.segments()), total_(store.total_len()) {
        vars_.reserve(store.segments().size());
        for (const auto& s : store.segments()) vars_.push_back(tape.leaf(store.segment_matrix(s), !store.frozen()));
    }

    ad::Var operator[](const std::string& name) const {
        for (std::size_t i = 0; i < segments_.size(); ++i)
            if (segments_[i].name == name) return vars_[i];
        throw ContractError("BoundParams: no segment '" + name + "'");
    }
    ad::Var at(std::size_t i) const { return vars_.at(i); }

    // Flat gradient aligned with the store (zeros for a frozen store).
    std::vector<double> gradient() const {
        std::vector<double> g(total_, 0.0);
        const auto& segs = segments_;
        for (std::size_t i = 0; i < segs.size(); ++i) {
            const ad::Matrix& gm = vars_[i].tape->grad(vars_[i]);
            for (std::size_t r = 0; r < segs[i].rows; ++r)
                for (std::size_t c = 0; c < segs[i].cols; ++c)
                    g[segs[i].offset + r * segs[i].cols + c] = gm(r, c);
        }
        return g;
    }

private:
    std::vector<ParamStore::Segment> segments_;
    std::size_t total_ = 0;
    std::vector<ad::Var> vars_;
};

enum class Activation { SmoothRectifier, Tanh };
enum class TimeEmbedding { None, ConcatScalar, Sinusoidal };

struct MlpSpec {
    std::size_t input_dim = 1;
    std::vector<std::size_t> hidden_dims;
    std::size_t output_dim = 1;
    Activation activation = Activation::Tanh;
    TimeEmbedding time_embedding = TimeEmbedding::None;
    std::size_t frequencies = 8;  // k for the sinusoidal embedding

    std::size_t embedding_dim() const {
        switch (time_embedding) {
            case TimeEmbedding::None: return 0;
            case TimeEmbedding::ConcatScalar: return 1;
            case TimeEmbedding::Sinusoidal: return 2 * frequencies;
        }
        return 0;
    }

    std::size_t layer_count() const { return hidden_dims.size() + 1; }

    void validate() const {
        if (input_dim < 1 || output_dim < 1) throw ContractError("MlpSpec: dimensions must be >= 1");
        for (auto h : hidden_dims)
            if (h < 1) throw ContractError("MlpSpec: hidden dimensions must be >= 1");
        if (time_embedding == TimeEmbedding::Sinusoidal && frequencies < 1)
            throw ContractError("MlpSpec: sinusoidal embedding needs >= 1 frequency");
    }
};

// Frequencies are log-spaced on [1, 64] rad per unit time.
inline ad::Matrix time_features(const MlpSpec& spec, std::span<const double> times) {
    const auto n = static_cast<ad::Index>(times.size());
    ad::Matrix f(n, static_cast<ad::Index>(spec.embedding_dim()));
    if (spec.time_embedding == TimeEmbedding::ConcatScalar) {
        for (ad::Index i = 0; i < n; ++i) f(i, 0) = times[i];
    } else if (spec.time_embedding == TimeEmbedding::Sinusoidal) {
        const std::size_t k = spec.frequencies;
        for (std::size_t j = 0; j < k; ++j) {
            const double w = k == 1 ? 1.0 : std::exp(std::log(64.0) * static_cast<double>(j) / static_cast<double>(k - 1));
            for (ad::Index i = 0; i < n; ++i) {
                f(i, static_cast<ad::Index>(2 * j)) = std::sin(w * times[i]);
                f(i, static_cast<ad::Index>(2 * j + 1)) = std::cos(w * times[i]);
            }
        }
    }
    return f;
}

inline std::string layer_weight_name(std::size_t l) { return "layer" + std::to_string(l) + ".weight"; }
inline std::string layer_bias_name(std::size_t l) { return "layer" + std::to_string(l) + ".bias"; }

inline ParamStore make_mlp_params(const MlpSpec& spec) {
    spec.validate();
    ParamStore store;
    std::size_t in = spec.input_dim + spec.embedding_dim();
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        const std::size_t out = l < spec.hidden_dims.size() ? spec.hidden_dims[l] : spec.output_dim;
        store.add_segment(layer_weight_name(l), in, out);
        store.add_segment(layer_bias_name(l), 1, out);
        in = out;
    }
    return store;
}

// LeCun-normal weights, zero biases; the output layer is scaled by `output_gain`.
inline ParamStore init_mlp(const MlpSpec& spec, CounterRng& rng, double output_gain = 1.0) {
    ParamStore store = make_mlp_params(spec);
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        const auto& seg = store.segment(layer_weight_name(l));
        const double gain = l + 1 == spec.layer_count() ? output_gain : 1.0;
        const double stddev = gain / std::sqrt(static_cast<double>(seg.rows));
        for (double& w : store.segment_values(seg.name)) w = stddev * rng.normal();
    }
    return store;
}

// Zero hidden layers with input_dim == output_dim: W = I, b = 0.
inline ParamStore identity_mlp(const MlpSpec& spec) {
    if (!spec.hidden_dims.empty() || spec.input_dim != spec.output_dim || spec.embedding_dim() != 0)
        throw ContractError("identity_mlp: needs a single square layer without time embedding");
    ParamStore store = make_mlp_params(spec);
    auto w = store.segment_values(layer_weight_name(0));
    for (std::size_t i = 0; i < spec.input_dim; ++i) w[i * spec.input_dim + i] = 1.0;
    return store;
}

inline ad::Var activate(Activation a, ad::Var x) {
    return a == Activation::Tanh ? ad::tanh(x) : ad::softplus(x);
}

// Batched forward pass: x is (batch x input_dim); `times` holds one time per row
// and must be supplied iff the spec has a time embedding.
inline ad::Var forward_mlp(const MlpSpec& spec, const BoundParams& params, ad::Var x,
                           std::optional<std::span<const double>> times = std::nullopt) {
    if (static_cast<std::size_t>(x.cols()) != spec.input_dim)
        throw ShapeError("forward_mlp: input has " + std::to_string(x.cols()) + " features, spec expects " +
                         std::to_string(spec.input_dim));
    if (!x.value().allFinite()) throw NumericError("forward_mlp: non-finite input");
    const bool wants_time = spec.time_embedding != TimeEmbedding::None;
    if (wants_time != times.has_value())
        throw ContractError(wants_time ? "forward_mlp: time required by embedding" : "forward_mlp: unexpected time input");
    ad::Var h = x;
    if (wants_time) {
        if (static_cast<ad::Index>(times->size()) != x.rows()) throw ShapeError("forward_mlp: one time per row required");
        h = ad::concat_cols(x, x.tape->constant(time_features(spec, *times)));
    }
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        h = ad::add_row(ad::matmul(h, params[layer_weight_name(l)]), params[layer_bias_name(l)]);
        if (l + 1 < spec.layer_count()) h = activate(spec.activation, h);
    }
    return h;
}

}  // namespace unidistill
