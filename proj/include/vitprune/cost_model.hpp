#pragma once

// Analytic multiply-accumulate accounting for gated ViT inference. Two head
// treatments: masked_heads (multiplicative gates, no compute saved by head
// removal — matches deployments that keep the full projection) and
// compact_heads (head slices physically removed). Token reduction shrinks
// the processed token count in both. Element-wise work (softmax, LayerNorm,
// activations) is excluded, which reproduces the community convention for
// transformer cost figures.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "vitprune/text.hpp"
#include "vitprune/vit.hpp"

namespace vitprune {

enum class CostMode { masked_heads, compact_heads };

inline const char* to_string(CostMode m) {
    return m == CostMode::masked_heads ? "masked" : "compact";
}

inline CostMode parse_cost_mode(const std::string& text) {
    if (text == "masked") return CostMode::masked_heads;
    if (text == "compact") return CostMode::compact_heads;
    fail(ErrorKind::usage, "cost mode must be 'masked' or 'compact', got '" + text + "'");
}

struct LayerCost {
    std::uint64_t qkv = 0;          // query/key/value projections
    std::uint64_t attn_logits = 0;  // query–key products
    std::uint64_t attn_values = 0;  // probability–value products
    std::uint64_t out_proj = 0;     // head concat projection
    std::uint64_t ffn = 0;          // both feed-forward layers
    std::uint64_t total() const { return qkv + attn_logits + attn_values + out_proj + ffn; }
};

struct CostReport {
    CostMode mode = CostMode::masked_heads;
    double alpha = 1.0;  // kept-token fraction
    double beta = 1.0;   // kept-head fraction
    std::size_t layers = 0;
    LayerCost per_layer;
    std::uint64_t patch_embed = 0;  // charged at the full token count
    std::uint64_t classifier = 0;
    std::uint64_t total = 0;
};

namespace detail {

inline std::uint64_t rounded_count(double v) {
    return static_cast<std::uint64_t>(std::llround(v));
}

inline void check_fractions(double alpha, double beta, CostMode mode) {
    if (mode == CostMode::compact_heads && beta == 0.0)
        fail(ErrorKind::degenerate, "cost: compact mode with zero kept heads");
    require(alpha > 0.0 && alpha <= 1.0 && beta > 0.0 && beta <= 1.0,
            ErrorKind::contract, "cost: kept fractions must lie in (0,1]");
}

} // namespace detail

// Tokens surviving a kept fraction alpha: CLS plus the rounded share of the
// patch tokens.
inline std::uint64_t kept_tokens(std::size_t n, double alpha) {
    return 1 + static_cast<std::uint64_t>(
                   std::llround(alpha * static_cast<double>(n - 1)));
}

// Per-layer MACs. Head reduction scales the projections and both attention
// products in compact mode only; the FFN never depends on heads.
inline LayerCost layer_cost(std::size_t n, std::size_t d, std::size_t H, std::size_t dk,
                            std::size_t dff, double alpha, double beta, CostMode mode) {
    require(H * dk == d, ErrorKind::contract, "cost: need heads * head_dim == hidden_dim");
    detail::check_fractions(alpha, beta, mode);
    double b = mode == CostMode::masked_heads ? 1.0 : beta;
    double np = static_cast<double>(kept_tokens(n, alpha));
    double dd = static_cast<double>(d);
    LayerCost lc;
    lc.qkv = detail::rounded_count(3.0 * b * np * dd * dd);
    lc.attn_logits = detail::rounded_count(b * np * np * dd);
    lc.attn_values = detail::rounded_count(b * np * np * dd);
    lc.out_proj = detail::rounded_count(b * np * dd * dd);
    lc.ffn = detail::rounded_count(2.0 * np * dd * static_cast<double>(dff));
    return lc;
}

inline CostReport model_cost(const ViTConfig& c, double alpha, double beta, CostMode mode) {
    c.validate();
    CostReport r;
    r.mode = mode;
    r.alpha = alpha;
    r.beta = beta;
    r.layers = c.layers;
    r.per_layer = layer_cost(c.tokens(), c.hidden_dim, c.heads, c.head_dim(), c.ffn_dim,
                             alpha, beta, mode);
    r.patch_embed = static_cast<std::uint64_t>(c.patch_count()) * c.patch_dim() * c.hidden_dim;
    r.classifier = static_cast<std::uint64_t>(c.hidden_dim) * c.classes;
    r.total = static_cast<std::uint64_t>(c.layers) * r.per_layer.total() + r.patch_embed +
              r.classifier;
    return r;
}

// Real-valued twin of model_cost with no token rounding, so the cost is an
// exact polynomial in the kept fractions: quadratic in alpha (coefficient
// 2*L*(n-1)^2*d*beta from the attention products) and linear in beta.
inline double continuous_layer_cost(std::size_t n, std::size_t d, std::size_t dff,
                                    double alpha, double beta) {
    double np = 1.0 + alpha * static_cast<double>(n - 1);
    double dd = static_cast<double>(d);
    return 4.0 * beta * np * dd * dd + 2.0 * beta * np * np * dd +
           2.0 * np * dd * static_cast<double>(dff);
}

inline double continuous_model_cost(const ViTConfig& c, double alpha, double beta) {
    c.validate();
    detail::check_fractions(alpha, beta, CostMode::compact_heads);
    double layers = static_cast<double>(c.layers) *
                    continuous_layer_cost(c.tokens(), c.hidden_dim, c.ffn_dim, alpha, beta);
    double patch = static_cast<double>(c.patch_count()) * c.patch_dim() * c.hidden_dim;
    double cls = static_cast<double>(c.hidden_dim) * c.classes;
    return layers + patch + cls;
}

struct GridRow {
    double tokens_pruned_pct = 0.0;
    double heads_pruned_pct = 0.0;
    CostReport report;
    double reduction_pct = 0.0;  // versus the dense model in the same mode
};

// One cost row per (token%, head%) pruning pair, sorted by token ratio then
// head ratio; reduction is measured against the dense total.
inline std::vector<GridRow> reduction_table(const ViTConfig& c,
                                            std::vector<std::pair<double, double>> grid,
                                            CostMode mode) {
    require(!grid.empty(), ErrorKind::contract, "reduction_table: empty grid");
    std::sort(grid.begin(), grid.end());
    std::uint64_t dense = model_cost(c, 1.0, 1.0, mode).total;
    std::vector<GridRow> rows;
    rows.reserve(grid.size());
    for (auto [tp, hp] : grid) {
        require(tp >= 0.0 && tp < 100.0 && hp >= 0.0 && hp < 100.0, ErrorKind::contract,
                "reduction_table: pruned percentages must lie in [0,100)");
        GridRow row;
        row.tokens_pruned_pct = tp;
        row.heads_pruned_pct = hp;
        row.report = model_cost(c, 1.0 - tp / 100.0, 1.0 - hp / 100.0, mode);
        row.reduction_pct = 100.0 * (static_cast<double>(dense) -
                                     static_cast<double>(row.report.total)) /
                            static_cast<double>(dense);
        rows.push_back(row);
    }
    return rows;
}

inline std::string reduction_csv(const std::vector<GridRow>& rows) {
    std::string out = "tokens_pruned,heads_pruned,mode,flops,reduction_pct\n";
    char buf[160];
    for (const GridRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%g,%g,%s,%llu,%.2f\n", r.tokens_pruned_pct,
                      r.heads_pruned_pct, to_string(r.report.mode),
                      static_cast<unsigned long long>(r.report.total), r.reduction_pct);
        out += buf;
    }
    return out;
}

// Grid text: "sym:20,40,50,60,80" expands each entry to a symmetric pair;
// "asym:20/80,40/60" lists explicit token/head pairs.
inline std::vector<std::pair<double, double>> parse_grid(const std::string& text) {
    std::size_t colon = text.find(':');
    require(colon != std::string::npos, ErrorKind::usage,
            "grid: expected 'sym:...' or 'asym:...', got '" + text + "'");
    std::string kind = text.substr(0, colon);
    require(kind == "sym" || kind == "asym", ErrorKind::usage,
            "grid: unknown kind '" + kind + "'");
    std::vector<std::pair<double, double>> grid;
    std::size_t pos = colon + 1;
    while (pos <= text.size()) {
        std::size_t end = text.find(',', pos);
        if (end == std::string::npos) end = text.size();
        std::string item = text.substr(pos, end - pos);
        require(!item.empty(), ErrorKind::usage, "grid: empty entry in '" + text + "'");
        if (kind == "sym") {
            double v = detail::parse_double(item, "grid entry");
            grid.emplace_back(v, v);
        } else {
            std::size_t slash = item.find('/');
            require(slash != std::string::npos, ErrorKind::usage,
                    "grid: asym entries need token/head, got '" + item + "'");
            grid.emplace_back(detail::parse_double(item.substr(0, slash), "grid tokens"),
                              detail::parse_double(item.substr(slash + 1), "grid heads"));
        }
        pos = end + 1;
        if (end == text.size()) break;
    }
    require(!grid.empty(), ErrorKind::usage, "grid: no entries in '" + text + "'");
    return grid;
}

// The standard large-model geometry the published reduction figures refer to.
inline ViTConfig vit_b16_config() {
    ViTConfig c;
    c.image_size = 224;
    c.patch_size = 16;
    c.channels = 3;
    c.layers = 12;
    c.heads = 12;
    c.hidden_dim = 768;
    c.ffn_dim = 3072;
    c.classes = 1000;
    return c;
}

} // namespace vitprune
