#pragma once

// Turns sensitivity scores into gate decisions: percentile top-k selection,
// per-layer loss-budget selection, induced thresholds, annealed soft gates
// and the additive predicted-loss bookkeeping.

#include <algorithm>
#include <limits>

#include "vitprune/sensitivity.hpp"

namespace vitprune {

struct PruningPolicy {
    enum class Mode { percentile, budget };
    Mode mode = Mode::percentile;
    double token_ratio = 0.0;  // fraction of non-CLS tokens to prune
    double head_ratio = 0.0;   // fraction of heads to prune per layer
    double epsilon = 0.0;      // total loss budget (budget mode)

    bool symmetric() const {
        return mode == Mode::percentile && token_ratio == head_ratio;
    }

    void validate() const {
        if (mode == Mode::percentile)
            require(token_ratio >= 0.0 && token_ratio <= 1.0 && head_ratio >= 0.0 &&
                        head_ratio <= 1.0,
                    ErrorKind::contract, "policy: ratios must lie in [0,1]");
        else
            require(epsilon >= 0.0, ErrorKind::contract, "policy: epsilon must be >= 0");
    }

    std::string to_text() const {
        if (mode == Mode::percentile)
            return "mode=percentile tokens=" + detail::format_double(token_ratio) +
                   " heads=" + detail::format_double(head_ratio);
        return "mode=budget epsilon=" + detail::format_double(epsilon);
    }

    // Accepts "mode=percentile tokens=0.2 heads=0.8" or "mode=budget epsilon=0.05".
    static PruningPolicy parse(const std::string& text) {
        std::map<std::string, std::string> kv;
        std::size_t pos = 0;
        while (pos < text.size()) {
            while (pos < text.size() && text[pos] == ' ') ++pos;
            std::size_t end = text.find(' ', pos);
            if (end == std::string::npos) end = text.size();
            if (end == pos) break;
            std::string item = text.substr(pos, end - pos);
            pos = end;
            std::size_t eq = item.find('=');
            require(eq != std::string::npos && eq > 0, ErrorKind::usage,
                    "policy: expected key=value, got '" + item + "'");
            std::string key = item.substr(0, eq);
            require(!kv.count(key), ErrorKind::usage, "policy: duplicate key '" + key + "'");
            kv[key] = item.substr(eq + 1);
        }
        auto it = kv.find("mode");
        require(it != kv.end(), ErrorKind::usage, "policy: missing mode");
        PruningPolicy p;
        if (it->second == "percentile") {
            p.mode = Mode::percentile;
            require(kv.count("tokens") && kv.count("heads"), ErrorKind::usage,
                    "policy: percentile mode needs tokens= and heads=");
            require(kv.size() == 3, ErrorKind::usage,
                    "policy: unexpected keys in percentile mode");
            p.token_ratio = detail::parse_double(kv["tokens"], "tokens");
            p.head_ratio = detail::parse_double(kv["heads"], "heads");
            require(p.token_ratio >= 0.0 && p.token_ratio <= 1.0 && p.head_ratio >= 0.0 &&
                        p.head_ratio <= 1.0,
                    ErrorKind::usage, "policy: ratios must lie in [0,1]");
        } else if (it->second == "budget") {
            p.mode = Mode::budget;
            require(kv.count("epsilon"), ErrorKind::usage,
                    "policy: budget mode needs epsilon=");
            require(kv.size() == 2, ErrorKind::usage,
                    "policy: unexpected keys in budget mode");
            p.epsilon = detail::parse_double(kv["epsilon"], "epsilon");
            require(p.epsilon >= 0.0, ErrorKind::usage, "policy: epsilon must be >= 0");
        } else {
            fail(ErrorKind::usage, "policy: unknown mode '" + it->second + "'");
        }
        return p;
    }
};

struct GateDecision {
    GateSet gateset;
    std::vector<ComponentRef> kept;
    std::vector<ComponentRef> pruned;  // kept ∪ pruned = candidate set
    double predicted_delta_loss = 0.0;
};

// Additive second-order estimate: half the sum of raw scores over the pruned
// set, looked up in the report.
inline double predicted_loss_increase(const GateDecision& d, const SensitivityReport& rep) {
    double sum = 0.0;
    for (const ComponentRef& r : d.pruned) {
        std::size_t i = rep.find(r);
        require(i != SensitivityReport::npos, ErrorKind::contract,
                "predicted_loss_increase: unknown " + r.str());
        sum += rep.batch_avg[i];
    }
    return 0.5 * sum;
}

namespace detail {

// ascending by score; equal scores prune the lower index first
inline std::vector<std::size_t> ascending_order(const std::vector<double>& s) {
    std::vector<std::size_t> order(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return s[a] < s[b]; });
    return order;
}

inline void partition_refs(const SensitivityReport& rep, const GateSet& g,
                           GateDecision& d) {
    for (const ComponentRef& r : rep.refs) {
        bool keep = r.kind == ComponentKind::token ? g.token_keep[r.layer - 1][r.index] != 0
                                                   : g.head_keep[r.layer - 1][r.index] != 0;
        (keep ? d.kept : d.pruned).push_back(r);
    }
}

} // namespace detail

// Global token cut from layer-aggregated scores (the token mask applies to
// every layer) plus an independent per-layer head cut. floor(ratio * pool)
// components are pruned per pool, lowest scores first.
inline GateDecision select_percentile(const ViTConfig& c, const SensitivityReport& rep,
                                      double p_T, double p_A) {
    require(p_T >= 0.0 && p_T <= 1.0 && p_A >= 0.0 && p_A <= 1.0, ErrorKind::contract,
            "select_percentile: ratios must lie in [0,1]");
    std::size_t n_tok = c.tokens() - 1;
    require(rep.token_agg.size() == n_tok, ErrorKind::contract,
            "select_percentile: report does not match the config token count");
    GateDecision d;
    d.gateset = GateSet::all_keep(c);

    std::size_t prune_tok =
        static_cast<std::size_t>(p_T * static_cast<double>(n_tok));
    std::vector<std::size_t> tok_order = detail::ascending_order(rep.token_agg);
    for (std::size_t i = 0; i < prune_tok; ++i) {
        std::size_t j = tok_order[i] + 1;  // slot -> token position
        for (std::size_t l = 0; l < c.layers; ++l) d.gateset.token_keep[l][j] = 0;
    }

    std::size_t prune_heads =
        static_cast<std::size_t>(p_A * static_cast<double>(c.heads));
    for (std::size_t l = 1; l <= c.layers; ++l) {
        std::vector<double> hs(c.heads);
        for (std::size_t h = 0; h < c.heads; ++h) {
            std::size_t i = rep.find({ComponentKind::head, l, h});
            require(i != SensitivityReport::npos, ErrorKind::contract,
                    "select_percentile: report is missing a head score");
            hs[h] = rep.batch_avg[i];
        }
        std::vector<std::size_t> order = detail::ascending_order(hs);
        for (std::size_t i = 0; i < prune_heads; ++i)
            d.gateset.head_keep[l - 1][order[i]] = 0;
    }

    detail::partition_refs(rep, d.gateset, d);
    d.predicted_delta_loss = predicted_loss_increase(d, rep);
    return d;
}

// Per-layer greedy knapsack: with a uniform split eps_l = eps/L, each layer
// prunes its candidates (tokens and heads together) in ascending raw-score
// order while the running sum of scores clamped at zero stays within
// 2*eps_l. Ascending order makes the greedy prefix the maximum-cardinality
// feasible subset, and guarantees predicted loss increase <= eps in total.
inline GateDecision select_budget(const ViTConfig& c, const SensitivityReport& rep,
                                  double epsilon) {
    require(epsilon >= 0.0, ErrorKind::contract, "select_budget: epsilon must be >= 0");
    GateDecision d;
    d.gateset = GateSet::all_keep(c);
    double eps_layer = epsilon / static_cast<double>(c.layers);

    for (std::size_t l = 1; l <= c.layers; ++l) {
        std::vector<std::size_t> idx;  // indexes into rep.refs for this layer
        for (std::size_t i = 0; i < rep.refs.size(); ++i)
            if (rep.refs[i].layer == l) idx.push_back(i);
        // ascending by raw score; ties resolve to tokens before heads, then
        // lower index, matching the candidate enumeration order
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return rep.batch_avg[a] < rep.batch_avg[b];
        });
        double running = 0.0;
        for (std::size_t i : idx) {
            double clamped = std::max(0.0, rep.batch_avg[i]);
            if (running + clamped > 2.0 * eps_layer) break;
            running += clamped;
            const ComponentRef& r = rep.refs[i];
            if (r.kind == ComponentKind::token)
                d.gateset.token_keep[l - 1][r.index] = 0;
            else
                d.gateset.head_keep[l - 1][r.index] = 0;
        }
    }

    detail::partition_refs(rep, d.gateset, d);
    d.predicted_delta_loss = predicted_loss_increase(d, rep);
    return d;
}

inline GateDecision select(const ViTConfig& c, const SensitivityReport& rep,
                           const PruningPolicy& p) {
    p.validate();
    return p.mode == PruningPolicy::Mode::percentile
               ? select_percentile(c, rep, p.token_ratio, p.head_ratio)
               : select_budget(c, rep, p.epsilon);
}

// Sigmoid gate over the normalized-score margin.
inline double soft_gate(double shat, double tau, double gamma) {
    require(gamma > 0.0, ErrorKind::contract, "soft_gate: gamma must be positive");
    if (std::isinf(shat) && shat > 0.0) return 1.0;  // never-pruned sentinel
    return 1.0 / (1.0 + std::exp(-gamma * (shat - tau)));
}

// Geometric ramp from gamma0 at t=0 to gamma_max at t=T; T=0 jumps straight
// to gamma_max. Endpoints are returned exactly.
inline double anneal_gamma(std::size_t t, std::size_t T, double gamma0, double gamma_max) {
    require(gamma0 > 0.0 && gamma0 <= gamma_max, ErrorKind::contract,
            "anneal_gamma: need 0 < gamma0 <= gamma_max");
    require(t <= T, ErrorKind::contract, "anneal_gamma: step out of range");
    if (T == 0 || t == T) return gamma_max;
    if (t == 0) return gamma0;
    double frac = static_cast<double>(t) / static_cast<double>(T);
    return gamma0 * std::pow(gamma_max / gamma0, frac);
}

namespace detail {

// Midpoint between the highest pruned and lowest kept normalized score of a
// pool; an empty side pushes the threshold one unit past the extreme so that
// every member lands strictly on its own side.
inline double induced_tau(const std::vector<double>& shat,
                          const std::vector<std::uint8_t>& kept) {
    double max_pruned = -std::numeric_limits<double>::infinity();
    double min_kept = std::numeric_limits<double>::infinity();
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < shat.size(); ++i) {
        lo = std::min(lo, shat[i]);
        hi = std::max(hi, shat[i]);
        if (kept[i])
            min_kept = std::min(min_kept, shat[i]);
        else
            max_pruned = std::max(max_pruned, shat[i]);
    }
    bool any_pruned = std::isfinite(max_pruned);
    bool any_kept = std::isfinite(min_kept);
    if (!any_pruned) return lo - 1.0;
    if (!any_kept) return hi + 1.0;
    return 0.5 * (max_pruned + min_kept);
}

} // namespace detail

// Fills the tau fields of the normalized report's statistics from a hard
// decision. Heads get a per-layer threshold. Tokens: percentile mode cuts the
// aggregate pool once and replicates that value per layer (the mask is
// global); budget mode cuts each layer's own token pool and leaves the
// aggregate threshold at its keep-all sentinel.
inline void derive_thresholds(NormalizedReport& nr, const GateDecision& d,
                              const PruningPolicy& policy) {
    std::size_t L = nr.stats.token.size();
    for (std::size_t l = 1; l <= L; ++l) {
        std::vector<double> head_shat, tok_shat;
        std::vector<std::uint8_t> head_kept, tok_kept;
        for (std::size_t i = 0; i < nr.refs.size(); ++i) {
            const ComponentRef& r = nr.refs[i];
            if (r.layer != l) continue;
            if (r.kind == ComponentKind::head) {
                head_shat.push_back(nr.shat[i]);
                head_kept.push_back(d.gateset.head_keep[l - 1][r.index]);
            } else {
                tok_shat.push_back(nr.shat[i]);
                tok_kept.push_back(d.gateset.token_keep[l - 1][r.index]);
            }
        }
        nr.stats.head[l - 1].tau = detail::induced_tau(head_shat, head_kept);
        if (policy.mode == PruningPolicy::Mode::budget)
            nr.stats.token[l - 1].tau = detail::induced_tau(tok_shat, tok_kept);
    }
    if (policy.mode == PruningPolicy::Mode::percentile) {
        std::vector<std::uint8_t> kept;
        for (std::size_t j = 1; j <= nr.token_agg_shat.size(); ++j)
            kept.push_back(d.gateset.token_keep[0][j]);
        double tau = detail::induced_tau(nr.token_agg_shat, kept);
        nr.stats.token_agg.tau = tau;
        for (std::size_t l = 0; l < L; ++l) nr.stats.token[l].tau = tau;
    } else {
        double lo = std::numeric_limits<double>::infinity();
        for (double v : nr.token_agg_shat) lo = std::min(lo, v);
        nr.stats.token_agg.tau = (std::isfinite(lo) ? lo : 0.0) - 1.0;
    }
    nr.stats.policy_text = policy.to_text();
}

// Normalized-score margins (shat - tau) per gate slot; the CLS slot carries
// +infinity so it can never be attenuated or pruned.
struct GateMargins {
    std::vector<std::vector<double>> token;  // [layer][token position]
    std::vector<std::vector<double>> head;   // [layer][head]
};

inline GateMargins gate_margins(const ViTConfig& c, const NormalizedReport& nr,
                                const PruningPolicy& policy) {
    GateMargins gm;
    double inf = std::numeric_limits<double>::infinity();
    gm.token.assign(c.layers, std::vector<double>(c.tokens(), inf));
    gm.head.assign(c.layers, std::vector<double>(c.heads, 0.0));
    for (std::size_t i = 0; i < nr.refs.size(); ++i) {
        const ComponentRef& r = nr.refs[i];
        if (r.kind == ComponentKind::head)
            gm.head[r.layer - 1][r.index] = nr.shat[i] - nr.stats.head[r.layer - 1].tau;
        else if (policy.mode == PruningPolicy::Mode::budget)
            gm.token[r.layer - 1][r.index] = nr.shat[i] - nr.stats.token[r.layer - 1].tau;
    }
    if (policy.mode == PruningPolicy::Mode::percentile)
        for (std::size_t l = 0; l < c.layers; ++l)
            for (std::size_t j = 1; j < c.tokens(); ++j)
                gm.token[l][j] = nr.token_agg_shat[j - 1] - nr.stats.token_agg.tau;
    return gm;
}

// Soft gates at sharpness gamma. CLS stays exactly 1.
inline GateSet soften(const GateMargins& gm, double gamma) {
    GateSet g;
    g.soft = true;
    g.token_gate.resize(gm.token.size());
    g.head_gate.resize(gm.head.size());
    for (std::size_t l = 0; l < gm.token.size(); ++l) {
        g.token_gate[l].resize(gm.token[l].size());
        for (std::size_t j = 0; j < gm.token[l].size(); ++j)
            g.token_gate[l][j] = soft_gate(gm.token[l][j], 0.0, gamma);
        g.head_gate[l].resize(gm.head[l].size());
        for (std::size_t h = 0; h < gm.head[l].size(); ++h)
            g.head_gate[l][h] = soft_gate(gm.head[l][h], 0.0, gamma);
    }
    return g;
}

// Hard gates at the 0.5 crossing: keep iff the soft gate would exceed 1/2
// (margin > 0). CLS is always kept.
inline GateSet binarize(const GateMargins& gm) {
    GateSet g;
    g.token_keep.resize(gm.token.size());
    g.head_keep.resize(gm.head.size());
    for (std::size_t l = 0; l < gm.token.size(); ++l) {
        g.token_keep[l].resize(gm.token[l].size());
        for (std::size_t j = 0; j < gm.token[l].size(); ++j)
            g.token_keep[l][j] = j == 0 || gm.token[l][j] > 0.0;
        g.head_keep[l].resize(gm.head[l].size());
        for (std::size_t h = 0; h < gm.head[l].size(); ++h)
            g.head_keep[l][h] = gm.head[l][h] > 0.0;
    }
    return g;
}

} // namespace vitprune
