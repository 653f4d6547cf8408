#pragma once

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vitprune/tape.hpp"

namespace vitprune {

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t hidden_dim = 64;
    std::size_t ffn_dim = 256;
    std::size_t classes = 8;
    double droppath_rate = 0.0;
    double label_smoothing = 0.0;

    std::size_t patches_per_side() const { return image_size / patch_size; }
    std::size_t patch_count() const { return patches_per_side() * patches_per_side(); }
    std::size_t tokens() const { return patch_count() + 1; }  // CLS included
    std::size_t head_dim() const { return hidden_dim / heads; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }

    void validate() const {
        require(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
                ErrorKind::config, "image_size must be a positive multiple of patch_size");
        require(heads > 0 && hidden_dim % heads == 0, ErrorKind::config,
                "hidden_dim must be a positive multiple of heads");
        require(channels > 0 && layers > 0 && ffn_dim > 0 && classes > 1,
                ErrorKind::config, "channels/layers/ffn_dim/classes out of range");
        require(droppath_rate >= 0.0 && droppath_rate < 1.0, ErrorKind::config,
                "droppath_rate must lie in [0,1)");
        require(label_smoothing >= 0.0 && label_smoothing < 1.0, ErrorKind::config,
                "label_smoothing must lie in [0,1)");
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "image_size=" << image_size << "\n"
           << "patch_size=" << patch_size << "\n"
           << "channels=" << channels << "\n"
           << "layers=" << layers << "\n"
           << "heads=" << heads << "\n"
           << "hidden_dim=" << hidden_dim << "\n"
           << "ffn_dim=" << ffn_dim << "\n"
           << "classes=" << classes << "\n"
           << "droppath_rate=" << droppath_rate << "\n"
           << "label_smoothing=" << label_smoothing << "\n";
        return os.str();
    }

    static ViTConfig from_text(const std::string& text) {
        ViTConfig c;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            auto eq = line.find('=');
            require(eq != std::string::npos, ErrorKind::format,
                    "config line missing '=': " + line);
            std::string key = line.substr(0, eq);
            std::string val = line.substr(eq + 1);
            try {
                if (key == "image_size") c.image_size = std::stoul(val);
                else if (key == "patch_size") c.patch_size = std::stoul(val);
                else if (key == "channels") c.channels = std::stoul(val);
                else if (key == "layers") c.layers = std::stoul(val);
                else if (key == "heads") c.heads = std::stoul(val);
                else if (key == "hidden_dim") c.hidden_dim = std::stoul(val);
                else if (key == "ffn_dim") c.ffn_dim = std::stoul(val);
                else if (key == "classes") c.classes = std::stoul(val);
                else if (key == "droppath_rate") c.droppath_rate = std::stod(val);
                else if (key == "label_smoothing") c.label_smoothing = std::stod(val);
                else fail(ErrorKind::format, "unknown config key: " + key);
            } catch (const Error&) {
                throw;
            } catch (const std::exception&) {
                fail(ErrorKind::format, "bad config value in line: " + line);
            }
        }
        c.validate();
        return c;
    }
};

// Named parameter registry with a fixed, closed ordering: every tensor the
// model owns appears here and nowhere else, so checkpoints, the optimizer
// state and gradient bookkeeping all walk the same list.
struct ViTModel {
    ViTConfig config;
    std::vector<std::pair<std::string, Tensor>> params;
    std::map<std::string, std::size_t> index;

    const Tensor& param(const std::string& name) const {
        auto it = index.find(name);
        require(it != index.end(), ErrorKind::contract, "unknown parameter: " + name);
        return params[it->second].second;
    }

    Tensor& param(const std::string& name) {
        auto it = index.find(name);
        require(it != index.end(), ErrorKind::contract, "unknown parameter: " + name);
        return params[it->second].second;
    }

    std::size_t param_count() const {
        std::size_t total = 0;
        for (const auto& [name, t] : params) total += t.size();
        return total;
    }
};

namespace detail {

inline std::vector<std::pair<std::string, std::vector<std::size_t>>>
param_registry(const ViTConfig& c) {
    std::size_t d = c.hidden_dim;
    std::vector<std::pair<std::string, std::vector<std::size_t>>> reg;
    reg.emplace_back("patch_proj.w", std::vector<std::size_t>{c.patch_dim(), d});
    reg.emplace_back("patch_proj.b", std::vector<std::size_t>{d});
    reg.emplace_back("cls", std::vector<std::size_t>{d});
    reg.emplace_back("pos", std::vector<std::size_t>{c.tokens(), d});
    for (std::size_t l = 1; l <= c.layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        reg.emplace_back(p + "ln1.scale", std::vector<std::size_t>{d});
        reg.emplace_back(p + "ln1.shift", std::vector<std::size_t>{d});
        for (const char* w : {"wq", "wk", "wv"})
            reg.emplace_back(p + "attn." + w, std::vector<std::size_t>{d, d});
        for (const char* b : {"bq", "bk", "bv"})
            reg.emplace_back(p + "attn." + b, std::vector<std::size_t>{d});
        reg.emplace_back(p + "attn.wo", std::vector<std::size_t>{d, d});
        reg.emplace_back(p + "attn.bo", std::vector<std::size_t>{d});
        reg.emplace_back(p + "ln2.scale", std::vector<std::size_t>{d});
        reg.emplace_back(p + "ln2.shift", std::vector<std::size_t>{d});
        reg.emplace_back(p + "ffn.w1", std::vector<std::size_t>{d, c.ffn_dim});
        reg.emplace_back(p + "ffn.b1", std::vector<std::size_t>{c.ffn_dim});
        reg.emplace_back(p + "ffn.w2", std::vector<std::size_t>{c.ffn_dim, d});
        reg.emplace_back(p + "ffn.b2", std::vector<std::size_t>{d});
    }
    reg.emplace_back("final_ln.scale", std::vector<std::size_t>{d});
    reg.emplace_back("final_ln.shift", std::vector<std::size_t>{d});
    reg.emplace_back("head.w", std::vector<std::size_t>{d, c.classes});
    reg.emplace_back("head.b", std::vector<std::size_t>{c.classes});
    return reg;
}

inline bool is_ln_scale(const std::string& name) {
    return name.size() >= 5 && name.substr(name.size() - 5) == "scale";
}

inline bool is_bias_or_shift(const std::string& name) {
    if (name.size() >= 5 && name.substr(name.size() - 5) == "shift") return true;
    auto dot = name.rfind('.');
    std::string last = dot == std::string::npos ? name : name.substr(dot + 1);
    return !last.empty() && last[0] == 'b' && last != "b";  // bq, bk, bv, bo, b1, b2, b
}

} // namespace detail

// Truncated-normal (std 0.02, cut at 2 std) weights; LN scales 1; biases and
// shifts 0. Parameter order is fixed, so a seed pins every bit.
inline ViTModel init_model(const ViTConfig& config, std::uint64_t seed) {
    config.validate();
    ViTModel m;
    m.config = config;
    Rng rng(seed);
    for (auto& [name, shape] : detail::param_registry(config)) {
        Tensor t(shape);
        bool bias = false;
        if (detail::is_ln_scale(name)) {
            std::fill(t.data.begin(), t.data.end(), 1.0);
            bias = true;
        } else {
            auto dot = name.rfind('.');
            std::string last = dot == std::string::npos ? name : name.substr(dot + 1);
            if (last == "shift" || last == "b" || last == "bq" || last == "bk" ||
                last == "bv" || last == "bo" || last == "b1" || last == "b2")
                bias = true;  // stays zero
        }
        if (!bias)
            for (double& v : t.data) v = rng.trunc_normal(0.02);
        m.index[name] = m.params.size();
        m.params.emplace_back(name, std::move(t));
    }
    return m;
}

enum class GateMode { mask, compact };

inline std::string to_string(GateMode m) { return m == GateMode::mask ? "mask" : "compact"; }

// Token/head gates. Hard gates are per-layer binary keep arrays (empty array
// = keep everything at that layer). Soft gates are per-layer multiplicative
// factors in (0,1] and replace the binary arrays entirely.
struct GateSet {
    std::vector<std::vector<std::uint8_t>> token_keep;  // [L][n], 1 = keep
    std::vector<std::vector<std::uint8_t>> head_keep;   // [L][H]
    bool soft = false;
    std::vector<std::vector<double>> token_gate;        // [L][n]
    std::vector<std::vector<double>> head_gate;         // [L][H]

    static GateSet all_keep(const ViTConfig& c) {
        GateSet g;
        g.token_keep.assign(c.layers, std::vector<std::uint8_t>(c.tokens(), 1));
        g.head_keep.assign(c.layers, std::vector<std::uint8_t>(c.heads, 1));
        return g;
    }

    bool prunes_tokens() const {
        for (const auto& l : token_keep)
            for (std::uint8_t k : l)
                if (!k) return true;
        return false;
    }

    bool prunes_heads() const {
        for (const auto& l : head_keep)
            for (std::uint8_t k : l)
                if (!k) return true;
        return false;
    }

    void validate(const ViTConfig& c) const {
        std::size_t L = c.layers, n = c.tokens(), H = c.heads;
        if (soft) {
            require(token_gate.size() == L && head_gate.size() == L, ErrorKind::gate,
                    "soft gate arrays must cover every layer");
            for (const auto& l : token_gate) {
                require(l.size() == n, ErrorKind::gate, "soft token gate length mismatch");
                require(l[0] == 1.0, ErrorKind::gate, "CLS soft gate must be exactly 1");
                for (double g : l)
                    require(g > 0.0 && g <= 1.0, ErrorKind::gate,
                            "soft token gates must lie in (0,1]");
            }
            for (const auto& l : head_gate) {
                require(l.size() == H, ErrorKind::gate, "soft head gate length mismatch");
                for (double g : l)
                    require(g > 0.0 && g <= 1.0, ErrorKind::gate,
                            "soft head gates must lie in (0,1]");
            }
            return;
        }
        require(token_keep.size() <= L && head_keep.size() <= L, ErrorKind::gate,
                "gate arrays longer than layer count");
        for (const auto& l : token_keep) {
            if (l.empty()) continue;
            require(l.size() == n, ErrorKind::gate, "token mask length mismatch");
            require(l[0] == 1, ErrorKind::gate, "CLS token must never be masked");
        }
        for (const auto& l : head_keep) {
            if (l.empty()) continue;
            require(l.size() == H, ErrorKind::gate, "head mask length mismatch");
        }
    }
};

// Activations recorded during a forward pass. Token tensors are stored per
// layer as (B * rows_per_sample, d); `survivors[l]` maps stored rows back to
// original token indices (identical to 0..n-1 for mask mode, packed for
// compact mode). Layer index 0 is the embedding output; blocks are 1..L.
struct ActivationCache {
    std::size_t batch = 0;
    std::size_t n_full = 0;
    std::size_t heads = 0;
    std::vector<Tensor> tokens;                        // [L+1]
    std::vector<std::vector<std::size_t>> survivors;   // [L+1] original token ids
    std::vector<Tensor> head_out;                      // [L] (B*H_l*rows, dk), pre-gate
    std::vector<std::vector<std::size_t>> kept_heads;  // [L] original head ids
    std::vector<Tensor> block_in_norm;                 // [L] (B, rows)
    std::vector<Tensor> block_out_norm;                // [L] (B, rows)
    Tensor cls_final;                                  // (B, d)
    Tensor logits;                                     // (B, classes)

    std::size_t rows_at(std::size_t layer) const { return survivors[layer].size(); }

    // Stored row position of original token j at `layer`, or npos if pruned.
    std::size_t token_pos(std::size_t layer, std::size_t j) const {
        const auto& s = survivors[layer];
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i] == j) return i;
        return static_cast<std::size_t>(-1);
    }

    // Sample slice of the layer-l token activations: (rows, d).
    Tensor sample_tokens(std::size_t layer, std::size_t b) const {
        const Tensor& t = tokens[layer];
        std::size_t rows = rows_at(layer), d = t.cols();
        Tensor out({rows, d});
        std::copy(t.row(b * rows), t.row(b * rows) + rows * d, out.data.data());
        return out;
    }

    // Sample slice of head h's output at block `layer` (1-based): (rows, dk).
    Tensor sample_head(std::size_t layer, std::size_t b, std::size_t h) const {
        const Tensor& t = head_out[layer - 1];
        std::size_t rows = rows_at(layer - 1), dk = t.cols();
        std::size_t Hl = kept_heads[layer - 1].size();
        std::size_t slot = static_cast<std::size_t>(-1);
        for (std::size_t i = 0; i < Hl; ++i)
            if (kept_heads[layer - 1][i] == h) slot = i;
        require(slot != static_cast<std::size_t>(-1), ErrorKind::contract,
                "sample_head: head not present in cache");
        Tensor out({rows, dk});
        std::copy(t.row((b * Hl + slot) * rows), t.row((b * Hl + slot) * rows) + rows * dk,
                  out.data.data());
        return out;
    }
};

struct ForwardOptions {
    GateMode mode = GateMode::mask;
    bool training = false;   // enables stochastic depth
    Rng* rng = nullptr;      // required when training with droppath_rate > 0
    bool build_cache = true;
};

namespace detail {

struct LayerVars {
    Var ln1s, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2s, ln2b, w1, b1, w2, b2;
};

// Parameter nodes on a tape, aligned with the model registry. Entries for
// layers outside [from_layer, L] stay invalid when a tail suffix is enough.
struct ParamVars {
    std::vector<Var> vars;

    Var at(const ViTModel& m, const std::string& name) const {
        auto it = m.index.find(name);
        require(it != m.index.end(), ErrorKind::contract, "unknown parameter: " + name);
        Var v = vars[it->second];
        require(v.valid(), ErrorKind::contract, "parameter not materialized: " + name);
        return v;
    }
};

inline ParamVars param_leaves(Tape& t, const ViTModel& m) {
    ParamVars pv;
    pv.vars.reserve(m.params.size());
    for (const auto& [name, tensor] : m.params) pv.vars.push_back(t.leaf(tensor, "param"));
    return pv;
}

// Constants for the final norm/classifier plus all blocks from `from_layer`
// on (1-based; 0 = everything including embeddings).
inline ParamVars param_constants(Tape& t, const ViTModel& m, std::size_t from_layer = 0) {
    ParamVars pv;
    pv.vars.assign(m.params.size(), Var{});
    auto mat = [&](const std::string& name) {
        pv.vars[m.index.at(name)] = t.constant(m.param(name), "param");
    };
    if (from_layer == 0) {
        mat("patch_proj.w");
        mat("patch_proj.b");
        mat("cls");
        mat("pos");
    }
    for (std::size_t l = std::max<std::size_t>(from_layer, 1); l <= m.config.layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        for (const char* s : {"ln1.scale", "ln1.shift", "attn.wq", "attn.bq", "attn.wk",
                              "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
                              "ln2.scale", "ln2.shift", "ffn.w1", "ffn.b1", "ffn.w2",
                              "ffn.b2"})
            mat(p + s);
    }
    mat("final_ln.scale");
    mat("final_ln.shift");
    mat("head.w");
    mat("head.b");
    return pv;
}

inline LayerVars layer_vars(const ParamVars& pv, const ViTModel& m, std::size_t l) {
    std::string p = "layer" + std::to_string(l) + ".";
    LayerVars lv;
    lv.ln1s = pv.at(m, p + "ln1.scale");
    lv.ln1b = pv.at(m, p + "ln1.shift");
    lv.wq = pv.at(m, p + "attn.wq");
    lv.bq = pv.at(m, p + "attn.bq");
    lv.wk = pv.at(m, p + "attn.wk");
    lv.bk = pv.at(m, p + "attn.bk");
    lv.wv = pv.at(m, p + "attn.wv");
    lv.bv = pv.at(m, p + "attn.bv");
    lv.wo = pv.at(m, p + "attn.wo");
    lv.bo = pv.at(m, p + "attn.bo");
    lv.ln2s = pv.at(m, p + "ln2.scale");
    lv.ln2b = pv.at(m, p + "ln2.shift");
    lv.w1 = pv.at(m, p + "ffn.w1");
    lv.b1 = pv.at(m, p + "ffn.b1");
    lv.w2 = pv.at(m, p + "ffn.w2");
    lv.b2 = pv.at(m, p + "ffn.b2");
    return lv;
}

// Residual + output projection + FFN half of a block, shared between the
// full forward and the head-site resumption path. droppath holds 2*B
// per-sample factors (attention branch, then FFN branch), empty = off.
inline Var block_from_heads(Tape&, const LayerVars& lv, Var x_in, Var merged,
                            Var wo, std::size_t B, const std::vector<double>& droppath) {
    Var o = op::add_rowvec(op::matmul(merged, wo), lv.bo);
    if (!droppath.empty())
        o = op::sample_scale(o, std::vector<double>(droppath.begin(), droppath.begin() + B), B);
    Var x1 = op::add(x_in, o);
    Var yn = op::layernorm(x1, lv.ln2s, lv.ln2b);
    Var f = op::gelu(op::add_rowvec(op::matmul(yn, lv.w1), lv.b1));
    Var f2 = op::add_rowvec(op::matmul(f, lv.w2), lv.b2);
    if (!droppath.empty())
        f2 = op::sample_scale(f2, std::vector<double>(droppath.begin() + B, droppath.end()), B);
    return op::add(x1, f2);
}

struct BlockResult {
    Var out;
    Var heads;  // pre-gate head outputs (B*H_l*rows, dk)
};

// One encoder block. keep_keys excludes key columns from attention (empty =
// none masked); head_sel physically restricts computation to those heads
// (nullptr = all); head_gate multiplies head outputs (invalid = none).
inline BlockResult encoder_block(Tape& t, const LayerVars& lv, Var x, std::size_t B,
                                 std::size_t n, std::size_t H, std::size_t dk,
                                 const std::vector<std::uint8_t>& keep_keys,
                                 const std::vector<std::size_t>* head_sel_p,
                                 Var head_gate, const std::vector<double>& droppath) {
    if (head_sel_p && head_sel_p->empty()) {
        // every head removed: the attention branch degenerates to its bias
        BlockResult res;
        res.heads = t.constant(Tensor::zeros({B * n, dk}), "no_heads");
        Var merged = t.constant(Tensor::zeros({B * n, H * dk}), "no_heads");
        res.out = block_from_heads(t, lv, x, merged, lv.wo, B, droppath);
        return res;
    }
    static const std::vector<std::size_t> no_restrict;
    const std::vector<std::size_t>& head_sel = head_sel_p ? *head_sel_p : no_restrict;
    Var xn = op::layernorm(x, lv.ln1s, lv.ln1b);
    Var wq = lv.wq, wk = lv.wk, wv = lv.wv, wo = lv.wo;
    std::size_t Hl = H;
    if (!head_sel.empty() && head_sel.size() != H) {
        Hl = head_sel.size();
        std::vector<std::size_t> cols;
        cols.reserve(Hl * dk);
        for (std::size_t h : head_sel)
            for (std::size_t c = 0; c < dk; ++c) cols.push_back(h * dk + c);
        wq = op::select_cols(wq, cols);
        wk = op::select_cols(wk, cols);
        wv = op::select_cols(wv, cols);
        wo = op::select_tokens(wo, cols, 1, H * dk);
    }
    auto bias_sel = [&](Var b) {
        if (Hl == H) return b;
        std::vector<std::size_t> cols;
        for (std::size_t h : head_sel)
            for (std::size_t c = 0; c < dk; ++c) cols.push_back(h * dk + c);
        return op::reshape(op::select_cols(op::reshape(b, {1, H * dk}), cols), {Hl * dk});
    };
    Var q = op::add_rowvec(op::matmul(xn, wq), bias_sel(lv.bq));
    Var k = op::add_rowvec(op::matmul(xn, wk), bias_sel(lv.bk));
    Var v = op::add_rowvec(op::matmul(xn, wv), bias_sel(lv.bv));
    Var qh = op::split_heads(q, B, n, Hl);
    Var kh = op::split_heads(k, B, n, Hl);
    Var vh = op::split_heads(v, B, n, Hl);
    double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Var p = op::attention_probs(qh, kh, B * Hl, n, scale, keep_keys);
    Var hd = op::attention_mix(p, vh, B * Hl, n);
    BlockResult res;
    res.heads = hd;
    if (head_gate.valid()) hd = op::scale_heads(hd, head_gate, B, Hl, n);
    Var merged = op::merge_heads(hd, B, n, Hl);
    res.out = block_from_heads(t, lv, x, merged, wo, B, droppath);
    return res;
}

// Image batch (B, C, S, S) flattened row-major into per-patch feature rows
// (B*(n-1), P*P*C), features ordered (channel, y, x) within the patch.
inline Tensor extract_patches(const ViTConfig& c, const Tensor& batch) {
    require(batch.rank() == 4 && batch.dim(1) == c.channels &&
                batch.dim(2) == c.image_size && batch.dim(3) == c.image_size,
            ErrorKind::contract,
            "forward: batch shape must be (B, channels, image, image), got " +
                batch.shape_str());
    std::size_t B = batch.dim(0), S = c.image_size, P = c.patch_size;
    std::size_t g = c.patches_per_side();
    Tensor out({B * c.patch_count(), c.patch_dim()});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t gy = 0; gy < g; ++gy)
            for (std::size_t gx = 0; gx < g; ++gx) {
                double* dst = out.row(b * c.patch_count() + gy * g + gx);
                std::size_t f = 0;
                for (std::size_t ch = 0; ch < c.channels; ++ch)
                    for (std::size_t py = 0; py < P; ++py)
                        for (std::size_t px = 0; px < P; ++px)
                            dst[f++] = batch.data[((b * c.channels + ch) * S +
                                                   (gy * P + py)) * S + (gx * P + px)];
            }
    return out;
}

inline void record_norms(const Tensor& x, std::size_t B, std::size_t rows, Tensor& out) {
    out = Tensor({B, rows});
    std::size_t d = x.cols();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t r = 0; r < rows; ++r) {
            const double* p = x.row(b * rows + r);
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += p[c] * p[c];
            out.at(b, r) = std::sqrt(s);
        }
}

// Soft gates as tape nodes, for callers that need d(loss)/d(gate): token[l]
// has length n, head[l] length H, both 0-indexed by block.
struct SoftGateVars {
    std::vector<Var> token;
    std::vector<Var> head;
};

// The single forward implementation behind training, evaluation and
// site-resumed scoring. Returns the logits node; fills `cache` if given.
// When `gate_vars` is supplied (soft gates only), those nodes are used
// instead of freshly created constants.
inline Var forward_graph(Tape& t, const ViTModel& m, const ParamVars& pv,
                         const Tensor& batch, const GateSet* gates,
                         const ForwardOptions& opt, ActivationCache* cache,
                         const SoftGateVars* gate_vars = nullptr) {
    const ViTConfig& c = m.config;
    if (gates) gates->validate(c);
    require(!(gates && gates->soft && opt.mode == GateMode::compact), ErrorKind::contract,
            "soft gates are a mask-mode construct; compact mode requires hard gates");
    std::size_t B = batch.dim(0), n = c.tokens(), H = c.heads, dk = c.head_dim();
    bool droppath_on = opt.training && c.droppath_rate > 0.0;
    require(!droppath_on || opt.rng, ErrorKind::contract,
            "training forward with droppath needs an rng");

    Var x = op::assemble_tokens(
        op::add_rowvec(op::matmul(t.constant(extract_patches(c, batch), "patches"),
                                  pv.at(m, "patch_proj.w")),
                       pv.at(m, "patch_proj.b")),
        pv.at(m, "cls"), B);
    x = op::add_pos(x, pv.at(m, "pos"), B);

    std::vector<std::size_t> cur(n);
    for (std::size_t i = 0; i < n; ++i) cur[i] = i;

    if (cache) {
        *cache = ActivationCache{};
        cache->batch = B;
        cache->n_full = n;
        cache->heads = H;
        cache->tokens.resize(c.layers + 1);
        cache->survivors.resize(c.layers + 1);
        cache->head_out.resize(c.layers);
        cache->kept_heads.resize(c.layers);
        cache->block_in_norm.resize(c.layers);
        cache->block_out_norm.resize(c.layers);
        cache->tokens[0] = t.val(x);
        cache->survivors[0] = cur;
    }

    std::size_t n_cur = n;
    for (std::size_t l = 1; l <= c.layers; ++l) {
        LayerVars lv = layer_vars(pv, m, l);
        const std::vector<std::uint8_t>* tok_keep = nullptr;
        const std::vector<std::uint8_t>* head_keep = nullptr;
        if (gates && !gates->soft) {
            if (l - 1 < gates->token_keep.size() && !gates->token_keep[l - 1].empty())
                tok_keep = &gates->token_keep[l - 1];
            if (l - 1 < gates->head_keep.size() && !gates->head_keep[l - 1].empty())
                head_keep = &gates->head_keep[l - 1];
        }

        std::vector<std::size_t> head_sel;
        const std::vector<std::size_t>* head_sel_p = nullptr;
        Var head_gate;
        std::vector<std::uint8_t> keep_keys;

        if (opt.mode == GateMode::compact) {
            if (tok_keep) {
                std::vector<std::size_t> want;
                for (std::size_t j = 0; j < n; ++j)
                    if ((*tok_keep)[j]) want.push_back(j);
                if (want != cur) {
                    // Re-materialize against the full index space: a token
                    // absent from the previous layer's survivors re-enters
                    // as a zero row, exactly matching mask-mode zeroing.
                    bool subset = true;
                    std::vector<std::size_t> local;
                    local.reserve(want.size());
                    for (std::size_t j : want) {
                        std::size_t pos = static_cast<std::size_t>(-1);
                        for (std::size_t i = 0; i < cur.size(); ++i)
                            if (cur[i] == j) pos = i;
                        if (pos == static_cast<std::size_t>(-1)) {
                            subset = false;
                            break;
                        }
                        local.push_back(pos);
                    }
                    if (subset) {
                        x = op::select_tokens(x, local, B, n_cur);
                    } else {
                        x = op::select_tokens(op::scatter_tokens(x, cur, B, n), want, B, n);
                    }
                    cur = want;
                    n_cur = cur.size();
                }
            }
            if (head_keep) {
                for (std::size_t h = 0; h < H; ++h)
                    if ((*head_keep)[h]) head_sel.push_back(h);
                head_sel_p = &head_sel;
            }
        } else {
            if (tok_keep) {
                keep_keys.resize(n_cur);
                for (std::size_t i = 0; i < n_cur; ++i) keep_keys[i] = (*tok_keep)[cur[i]];
            }
            if (head_keep) {
                Tensor hg({H});
                for (std::size_t h = 0; h < H; ++h) hg.data[h] = (*head_keep)[h] ? 1.0 : 0.0;
                head_gate = t.constant(hg, "head_mask");
            }
            if (gates && gates->soft) {
                Var tg;
                if (gate_vars) {
                    tg = gate_vars->token[l - 1];
                    head_gate = gate_vars->head[l - 1];
                } else {
                    Tensor tgt({n_cur});
                    for (std::size_t i = 0; i < n_cur; ++i)
                        tgt.data[i] = gates->token_gate[l - 1][cur[i]];
                    tg = t.constant(tgt, "token_gate");
                    head_gate = t.constant(Tensor({H}, std::vector<double>(
                                                           gates->head_gate[l - 1].begin(),
                                                           gates->head_gate[l - 1].end())),
                                           "head_gate");
                }
                x = op::row_scale(x, tg, B, n_cur);
            }
        }

        if (cache) detail::record_norms(t.val(x), B, n_cur, cache->block_in_norm[l - 1]);

        std::vector<double> droppath;
        if (droppath_on) {
            droppath.resize(2 * B);
            for (double& f : droppath)
                f = (opt.rng->uniform() < c.droppath_rate)
                        ? 0.0
                        : 1.0 / (1.0 - c.droppath_rate);
        }

        BlockResult br = encoder_block(t, lv, x, B, n_cur, H, dk, keep_keys, head_sel_p,
                                       head_gate, droppath);
        x = br.out;

        if (opt.mode == GateMode::mask && tok_keep) {
            Tensor zero_gate({n_cur});
            for (std::size_t i = 0; i < n_cur; ++i)
                zero_gate.data[i] = keep_keys.empty() || keep_keys[i] ? 1.0 : 0.0;
            x = op::row_scale(x, t.constant(zero_gate, "token_mask"), B, n_cur);
        }

        if (cache) {
            cache->tokens[l] = t.val(x);
            cache->survivors[l] = cur;
            cache->head_out[l - 1] = t.val(br.heads);
            if (!head_sel_p) {
                cache->kept_heads[l - 1].resize(H);
                for (std::size_t h = 0; h < H; ++h) cache->kept_heads[l - 1][h] = h;
            } else {
                cache->kept_heads[l - 1] = head_sel;
            }
            detail::record_norms(t.val(x), B, n_cur, cache->block_out_norm[l - 1]);
        }
    }

    Var xf = op::layernorm(x, pv.at(m, "final_ln.scale"), pv.at(m, "final_ln.shift"));
    Var cls = op::select_tokens(xf, {0}, B, n_cur);
    Var logits = op::add_rowvec(op::matmul(cls, pv.at(m, "head.w")), pv.at(m, "head.b"));
    if (cache) {
        cache->cls_final = t.val(cls);
        cache->logits = t.val(logits);
    }
    return logits;
}

} // namespace detail

// Plain inference forward: no tape recording, parameters frozen.
inline std::pair<Tensor, ActivationCache> forward(const ViTModel& m, const Tensor& batch,
                                                  const GateSet* gates = nullptr,
                                                  ForwardOptions opt = {}) {
    Tape t(false);
    detail::ParamVars pv = detail::param_constants(t, m);
    ActivationCache cache;
    Var logits = detail::forward_graph(t, m, pv, batch, gates, opt,
                                       opt.build_cache ? &cache : nullptr);
    return {t.val(logits), std::move(cache)};
}

// Mean smoothed cross-entropy of raw logits, outside any tape.
inline double loss(const Tensor& logits, const std::vector<int>& labels, double smoothing) {
    Tape t(false);
    return t.val(op::cross_entropy(t.leaf(logits), labels, smoothing)).data[0];
}

// Scalar loss as a function of one token activation: row j of the layer-l
// block output for one sample is replaced by z and the remaining blocks,
// final norm and classifier are re-run. Intended for caches produced by an
// ungated forward.
inline Var resume_token_loss(Tape& t, const ViTModel& m, const ActivationCache& cache,
                             std::size_t sample, std::size_t layer, std::size_t token,
                             Var z, int label, double smoothing) {
    require(layer >= 1 && layer <= m.config.layers, ErrorKind::contract,
            "resume_token_loss: layer out of range");
    std::size_t pos = cache.token_pos(layer, token);
    require(pos != static_cast<std::size_t>(-1), ErrorKind::contract,
            "resume_token_loss: token pruned at this layer");
    detail::ParamVars pv = detail::param_constants(t, m, layer + 1);
    Tensor base = cache.sample_tokens(layer, sample);
    Var x = op::set_row(z, base, pos);
    std::size_t n = base.rows(), H = m.config.heads, dk = m.config.head_dim();
    for (std::size_t l = layer + 1; l <= m.config.layers; ++l) {
        detail::LayerVars lv = detail::layer_vars(pv, m, l);
        x = detail::encoder_block(t, lv, x, 1, n, H, dk, {}, nullptr, Var{}, {}).out;
    }
    Var xf = op::layernorm(x, pv.at(m, "final_ln.scale"), pv.at(m, "final_ln.shift"));
    Var cls = op::select_tokens(xf, {0}, 1, n);
    Var logits = op::add_rowvec(op::matmul(cls, pv.at(m, "head.w")), pv.at(m, "head.b"));
    return op::cross_entropy(logits, {label}, smoothing);
}

// Scalar loss as a function of one head output: slot k of the layer-l
// pre-projection concat for one sample is replaced by z (shape (n, d_k));
// the block is completed from the cached input and siblings, then the tail
// re-runs as above.
inline Var resume_head_loss(Tape& t, const ViTModel& m, const ActivationCache& cache,
                            std::size_t sample, std::size_t layer, std::size_t head,
                            Var z, int label, double smoothing) {
    require(layer >= 1 && layer <= m.config.layers, ErrorKind::contract,
            "resume_head_loss: layer out of range");
    require(head < m.config.heads, ErrorKind::contract,
            "resume_head_loss: head out of range");
    detail::ParamVars pv = detail::param_constants(t, m, layer);
    std::size_t H = m.config.heads, dk = m.config.head_dim();
    std::vector<Tensor> siblings;
    siblings.reserve(H);
    for (std::size_t h = 0; h < H; ++h) siblings.push_back(cache.sample_head(layer, sample, h));
    Var merged = op::concat_heads_with(z, siblings, head);
    Tensor x_in = cache.sample_tokens(layer - 1, sample);
    std::size_t n = x_in.rows();
    detail::LayerVars lv = detail::layer_vars(pv, m, layer);
    Var x = detail::block_from_heads(t, lv, t.constant(x_in, "block_in"), merged, lv.wo, 1, {});
    for (std::size_t l = layer + 1; l <= m.config.layers; ++l) {
        detail::LayerVars lv2 = detail::layer_vars(pv, m, l);
        x = detail::encoder_block(t, lv2, x, 1, n, H, dk, {}, nullptr, Var{}, {}).out;
    }
    Var xf = op::layernorm(x, pv.at(m, "final_ln.scale"), pv.at(m, "final_ln.shift"));
    Var cls = op::select_tokens(xf, {0}, 1, n);
    Var logits = op::add_rowvec(op::matmul(cls, pv.at(m, "head.w")), pv.at(m, "head.b"));
    return op::cross_entropy(logits, {label}, smoothing);
}

} // namespace vitprune
