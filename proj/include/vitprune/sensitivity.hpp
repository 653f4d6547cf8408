#pragma once

// Curvature-weighted importance scoring for token and head candidates.
// Each candidate's activation z is scored as S = z^T H z, where H is the
// Hessian of the per-example loss with respect to z, obtained by re-entering
// the network at the activation site and applying a Hessian-vector product
// with the probe direction z itself.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "vitprune/text.hpp"
#include "vitprune/vit.hpp"

namespace vitprune {

enum class ComponentKind { token, head };

inline const char* to_string(ComponentKind k) {
    return k == ComponentKind::token ? "token" : "head";
}

// One prunable unit: a non-CLS token position at a layer, or a head at a
// layer. Layers are 1-based to match block numbering.
struct ComponentRef {
    ComponentKind kind = ComponentKind::token;
    std::size_t layer = 1;
    std::size_t index = 0;

    friend bool operator==(const ComponentRef& a, const ComponentRef& b) {
        return a.kind == b.kind && a.layer == b.layer && a.index == b.index;
    }
    std::string str() const {
        return std::string(to_string(kind)) + " layer=" + std::to_string(layer) +
               " index=" + std::to_string(index);
    }
};

// Deterministic candidate enumeration: for each layer, all non-CLS token
// positions in order, then all heads in order.
inline std::vector<ComponentRef> candidate_set(const ViTConfig& c) {
    std::vector<ComponentRef> refs;
    refs.reserve(c.layers * (c.tokens() - 1 + c.heads));
    for (std::size_t l = 1; l <= c.layers; ++l) {
        for (std::size_t j = 1; j < c.tokens(); ++j)
            refs.push_back({ComponentKind::token, l, j});
        for (std::size_t h = 0; h < c.heads; ++h)
            refs.push_back({ComponentKind::head, l, h});
    }
    return refs;
}

struct InputScores {
    std::string id;
    std::vector<double> s;  // aligned with SensitivityReport::refs
};

struct SensitivityReport {
    std::vector<ComponentRef> refs;   // shared candidate order
    std::vector<InputScores> inputs;  // one entry per batch element
    std::vector<double> batch_avg;    // aligned with refs
    std::vector<double> token_agg;    // slot j-1 = sum over layers of the
                                      // batch-average score of token j
    std::string label_mode = "true";  // "true" or "predicted"

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    std::size_t find(const ComponentRef& r) const {
        for (std::size_t i = 0; i < refs.size(); ++i)
            if (refs[i] == r) return i;
        return npos;
    }

    std::string to_json() const;
};

namespace detail {

inline void json_scored_ref(std::string& out, const ComponentRef& r, double s) {
    out += "{\"kind\":\"";
    out += to_string(r.kind);
    out += "\",\"layer\":";
    out += std::to_string(r.layer);
    out += ",\"index\":";
    out += std::to_string(r.index);
    out += ",\"s\":";
    out += format_double(s);
    out += "}";
}

} // namespace detail

inline std::string SensitivityReport::to_json() const {
    std::string out = "{\"inputs\":[";
    for (std::size_t b = 0; b < inputs.size(); ++b) {
        if (b) out += ",";
        out += "{\"id\":\"" + inputs[b].id + "\",\"scores\":[";
        for (std::size_t i = 0; i < refs.size(); ++i) {
            if (i) out += ",";
            detail::json_scored_ref(out, refs[i], inputs[b].s[i]);
        }
        out += "]}";
    }
    out += "],\"batch_avg\":[";
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (i) out += ",";
        detail::json_scored_ref(out, refs[i], batch_avg[i]);
    }
    out += "],\"token_agg\":[";
    for (std::size_t j = 0; j < token_agg.size(); ++j) {
        if (j) out += ",";
        out += "{\"index\":" + std::to_string(j + 1) +
               ",\"s\":" + detail::format_double(token_agg[j]) + "}";
    }
    out += "],\"label_mode\":\"" + label_mode + "\"}";
    return out;
}

// S_z for one candidate, scored from a dense-forward cache. The activation
// itself is the probe direction, so S = <H z, z> with one HVP.
inline double score_from_cache(const ViTModel& m, const ActivationCache& cache,
                               std::size_t sample, const ComponentRef& ref, int label,
                               double smoothing) {
    const ViTConfig& c = m.config;
    require(ref.layer >= 1 && ref.layer <= c.layers, ErrorKind::contract,
            "score: layer out of range for " + ref.str());
    Tensor z0;
    SiteFn f;
    if (ref.kind == ComponentKind::token) {
        require(ref.index >= 1 && ref.index < c.tokens(), ErrorKind::contract,
                "score: token index out of range for " + ref.str());
        Tensor toks = cache.sample_tokens(ref.layer, sample);
        std::size_t pos = cache.token_pos(ref.layer, ref.index);
        require(pos != static_cast<std::size_t>(-1), ErrorKind::contract,
                "score: token not present in cache for " + ref.str());
        z0 = Tensor({c.hidden_dim});
        for (std::size_t col = 0; col < c.hidden_dim; ++col)
            z0.data[col] = toks.at(pos, col);
        f = [&m, &cache, sample, ref, label, smoothing](Tape& t, Var z) {
            return resume_token_loss(t, m, cache, sample, ref.layer, ref.index, z,
                                     label, smoothing);
        };
    } else {
        require(ref.index < c.heads, ErrorKind::contract,
                "score: head index out of range for " + ref.str());
        z0 = cache.sample_head(ref.layer, sample, ref.index);
        f = [&m, &cache, sample, ref, label, smoothing](Tape& t, Var z) {
            return resume_head_loss(t, m, cache, sample, ref.layer, ref.index, z,
                                    label, smoothing);
        };
    }
    Tensor hz = hvp(f, z0, z0);
    double s = dot(hz, z0);
    require(std::isfinite(s), ErrorKind::numeric, "score: non-finite value for " + ref.str());
    return s;
}

// Convenience path: score one candidate on one image (shape (C,S,S) or
// (1,C,S,S)) with a fresh dense forward.
inline double component_score(const ViTModel& m, const Tensor& image, int label,
                              const ComponentRef& ref) {
    const ViTConfig& c = m.config;
    Tensor batch = image;
    if (image.rank() == 3) batch = image.reshaped({1, c.channels, c.image_size, c.image_size});
    require(batch.rank() == 4 && batch.dim(0) == 1, ErrorKind::contract,
            "component_score: expected a single image, got " + image.shape_str());
    auto [logits, cache] = forward(m, batch);
    (void)logits;
    return score_from_cache(m, cache, 0, ref, label, c.label_smoothing);
}

// Score every candidate for every input in the batch. With labels empty the
// model's own argmax predictions stand in (recorded as label_mode
// "predicted"); measured losses elsewhere always use true labels.
inline SensitivityReport score_all(const ViTModel& m, const Tensor& batch,
                                   std::vector<int> labels, std::size_t threads = 1) {
    const ViTConfig& c = m.config;
    require(batch.rank() == 4 && batch.dim(0) >= 1, ErrorKind::data,
            "score_all: batch must be non-empty (B, C, S, S)");
    std::size_t B = batch.dim(0);
    auto [logits, cache] = forward(m, batch);
    SensitivityReport rep;
    rep.label_mode = labels.empty() ? "predicted" : "true";
    if (labels.empty()) {
        labels.resize(B);
        for (std::size_t b = 0; b < B; ++b) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < c.classes; ++k)
                if (logits.at(b, k) > logits.at(b, best)) best = k;
            labels[b] = static_cast<int>(best);
        }
    }
    require(labels.size() == B, ErrorKind::data,
            "score_all: label count must match batch size");
    rep.refs = candidate_set(c);
    rep.inputs.resize(B);
    auto score_input = [&](std::size_t b) {
        InputScores& in = rep.inputs[b];
        in.id = std::to_string(b);
        in.s.resize(rep.refs.size());
        for (std::size_t i = 0; i < rep.refs.size(); ++i)
            in.s[i] = score_from_cache(m, cache, b, rep.refs[i], labels[b],
                                       c.label_smoothing);
    };
    threads = std::max<std::size_t>(1, std::min(threads, B));
    if (threads == 1) {
        for (std::size_t b = 0; b < B; ++b) score_input(b);
    } else {
        // Inputs are independent and written to disjoint slots, so the
        // result is identical for any thread count.
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < threads; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t b = w; b < B; b += threads) score_input(b);
            });
        for (auto& th : pool) th.join();
    }
    rep.batch_avg.assign(rep.refs.size(), 0.0);
    for (std::size_t i = 0; i < rep.refs.size(); ++i) {
        double sum = 0.0;
        for (std::size_t b = 0; b < B; ++b) sum += rep.inputs[b].s[i];
        rep.batch_avg[i] = sum / static_cast<double>(B);
    }
    rep.token_agg.assign(c.tokens() - 1, 0.0);
    for (std::size_t i = 0; i < rep.refs.size(); ++i)
        if (rep.refs[i].kind == ComponentKind::token)
            rep.token_agg[rep.refs[i].index - 1] += rep.batch_avg[i];
    return rep;
}

// ---------------------------------------------------------------------------
// Layerwise normalization

enum class NormScope { per_layer_by_kind, per_layer_mixed };

inline const char* to_string(NormScope s) {
    return s == NormScope::per_layer_by_kind ? "by_kind" : "mixed";
}

struct LayerStats {
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation
    double tau = 0.0;     // selection threshold in normalized units
};

// Per-layer normalization statistics plus the thresholds induced by a
// policy's cut, kept so later phases can re-normalize fresh scores.
struct CalibrationStats {
    NormScope scope = NormScope::per_layer_by_kind;
    std::vector<LayerStats> token;  // per layer
    std::vector<LayerStats> head;   // per layer
    LayerStats token_agg;           // aggregate token pool (global token cut)
    std::string policy_text;
    std::string label_mode = "true";

    std::string to_text() const;
    static CalibrationStats from_text(const std::string& text);
};

struct NormalizedReport {
    std::vector<ComponentRef> refs;      // same order as the source report
    std::vector<double> shat;            // normalized batch-average scores
    std::vector<double> token_agg_shat;  // normalized aggregate token scores
    CalibrationStats stats;
};

namespace detail {

inline LayerStats pool_stats(const std::vector<double>& values) {
    LayerStats st;
    if (values.empty()) return st;
    double sum = 0.0;
    for (double v : values) sum += v;
    st.mean = sum / static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - st.mean) * (v - st.mean);
    st.stddev = std::sqrt(var / static_cast<double>(values.size()));
    return st;
}

inline double normalized(double s, const LayerStats& st) {
    return st.stddev == 0.0 ? 0.0 : (s - st.mean) / st.stddev;
}

} // namespace detail

// Computes per-layer statistics over the batch-average scores and maps every
// score to (s - mean)/stddev within its pool; a zero-spread pool maps to all
// zeros. The aggregate token pool is normalized against its own statistics.
inline NormalizedReport normalize(const SensitivityReport& rep,
                                  NormScope scope = NormScope::per_layer_by_kind) {
    require(!rep.refs.empty(), ErrorKind::contract, "normalize: empty report");
    std::size_t L = 0;
    for (const ComponentRef& r : rep.refs) L = std::max(L, r.layer);
    NormalizedReport out;
    out.refs = rep.refs;
    out.shat.resize(rep.refs.size());
    out.stats.scope = scope;
    out.stats.label_mode = rep.label_mode;
    out.stats.token.resize(L);
    out.stats.head.resize(L);
    for (std::size_t l = 1; l <= L; ++l) {
        std::vector<double> toks, heads, mixed;
        for (std::size_t i = 0; i < rep.refs.size(); ++i) {
            if (rep.refs[i].layer != l) continue;
            mixed.push_back(rep.batch_avg[i]);
            (rep.refs[i].kind == ComponentKind::token ? toks : heads)
                .push_back(rep.batch_avg[i]);
        }
        if (scope == NormScope::per_layer_mixed) {
            LayerStats st = detail::pool_stats(mixed);
            out.stats.token[l - 1] = st;
            out.stats.head[l - 1] = st;
        } else {
            out.stats.token[l - 1] = detail::pool_stats(toks);
            out.stats.head[l - 1] = detail::pool_stats(heads);
        }
    }
    for (std::size_t i = 0; i < rep.refs.size(); ++i) {
        const ComponentRef& r = rep.refs[i];
        const LayerStats& st = r.kind == ComponentKind::token
                                   ? out.stats.token[r.layer - 1]
                                   : out.stats.head[r.layer - 1];
        out.shat[i] = detail::normalized(rep.batch_avg[i], st);
    }
    out.stats.token_agg = detail::pool_stats(rep.token_agg);
    out.token_agg_shat.resize(rep.token_agg.size());
    for (std::size_t j = 0; j < rep.token_agg.size(); ++j)
        out.token_agg_shat[j] = detail::normalized(rep.token_agg[j], out.stats.token_agg);
    return out;
}

// Normalizes fresh raw scores with previously computed statistics (the
// per-input path: calibration fixes the pools, each input reuses them).
inline std::vector<double> apply_stats(const std::vector<ComponentRef>& refs,
                                       const std::vector<double>& raw,
                                       const CalibrationStats& stats) {
    require(refs.size() == raw.size(), ErrorKind::contract,
            "apply_stats: refs and scores must align");
    std::vector<double> shat(raw.size());
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const ComponentRef& r = refs[i];
        require(r.layer >= 1 && r.layer <= stats.token.size(), ErrorKind::contract,
                "apply_stats: layer out of range for " + r.str());
        const LayerStats& st = r.kind == ComponentKind::token ? stats.token[r.layer - 1]
                                                              : stats.head[r.layer - 1];
        shat[i] = detail::normalized(raw[i], st);
    }
    return shat;
}

inline std::vector<double> apply_token_agg_stats(const std::vector<double>& agg,
                                                 const CalibrationStats& stats) {
    std::vector<double> shat(agg.size());
    for (std::size_t j = 0; j < agg.size(); ++j)
        shat[j] = detail::normalized(agg[j], stats.token_agg);
    return shat;
}

// --- CalibrationStats text form (key=value lines) --------------------------

inline std::string CalibrationStats::to_text() const {
    std::string out;
    out += "scope=" + std::string(to_string(scope)) + "\n";
    out += "label_mode=" + label_mode + "\n";
    out += "policy=" + policy_text + "\n";
    out += "layers=" + std::to_string(token.size()) + "\n";
    auto emit = [&](const std::string& key, const LayerStats& st) {
        out += key + ".mean=" + detail::format_double(st.mean) + "\n";
        out += key + ".stddev=" + detail::format_double(st.stddev) + "\n";
        out += key + ".tau=" + detail::format_double(st.tau) + "\n";
    };
    for (std::size_t l = 0; l < token.size(); ++l) {
        emit("token" + std::to_string(l + 1), token[l]);
        emit("head" + std::to_string(l + 1), head[l]);
    }
    emit("token_agg", token_agg);
    return out;
}

inline CalibrationStats CalibrationStats::from_text(const std::string& text) {
    CalibrationStats st;
    std::map<std::string, std::string> kv;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        require(eq != std::string::npos, ErrorKind::format,
                "calibration stats: malformed line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto need = [&](const std::string& key) {
        auto it = kv.find(key);
        require(it != kv.end(), ErrorKind::format,
                "calibration stats: missing key '" + key + "'");
        return it->second;
    };
    std::string scope_text = need("scope");
    if (scope_text == "by_kind")
        st.scope = NormScope::per_layer_by_kind;
    else if (scope_text == "mixed")
        st.scope = NormScope::per_layer_mixed;
    else
        fail(ErrorKind::format, "calibration stats: unknown scope '" + scope_text + "'");
    st.label_mode = need("label_mode");
    st.policy_text = need("policy");
    std::size_t L = static_cast<std::size_t>(
        detail::parse_double(need("layers"), "layers"));
    require(L >= 1, ErrorKind::format, "calibration stats: layers must be >= 1");
    auto read = [&](const std::string& key) {
        LayerStats ls;
        ls.mean = detail::parse_double(need(key + ".mean"), key + ".mean");
        ls.stddev = detail::parse_double(need(key + ".stddev"), key + ".stddev");
        ls.tau = detail::parse_double(need(key + ".tau"), key + ".tau");
        return ls;
    };
    st.token.resize(L);
    st.head.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        st.token[l] = read("token" + std::to_string(l + 1));
        st.head[l] = read("head" + std::to_string(l + 1));
    }
    st.token_agg = read("token_agg");
    return st;
}

} // namespace vitprune
