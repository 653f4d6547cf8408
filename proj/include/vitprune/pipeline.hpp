#pragma once

// End-to-end workflow over the gated ViT: gradient training with decoupled
// weight decay and a warmup+cosine schedule, calibration of sensitivity
// statistics on a small batch, per-input hard-gated inference, soft-gate
// fine-tuning with an annealed sharpness schedule, and evaluation that pairs
// predicted with measured loss increases. Every loop serializes its state
// after each epoch, so an interrupted run resumes bit-exactly.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include "vitprune/checkpoint.hpp"
#include "vitprune/dataset.hpp"
#include "vitprune/policy.hpp"
#include "vitprune/sensitivity.hpp"
#include "vitprune/vit.hpp"

namespace vitprune {

// --- configuration -----------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    double lr = 1e-3;  // peak rate; warmup climbs to it, cosine decays from it
    std::size_t warmup_epochs = 5;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double label_smoothing = 0.0;
    std::size_t patience = 10;  // consecutive non-improving epochs tolerated
    double val_fraction = 0.2;
    // Supervised training only: per batch, each patch token is excluded from
    // the forward (mask-mode gate) with this probability. Teaches the network
    // to classify from token subsets, so later structural pruning starts from
    // a function that barely depends on any single token. Ignored by gated
    // fine-tuning, which owns its gates.
    double token_dropout = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        require(lr > 0.0, ErrorKind::config, "train: learning rate must be positive");
        require(weight_decay >= 0.0, ErrorKind::config,
                "train: weight decay must be nonnegative");
        require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0,
                ErrorKind::config, "train: optimizer moments must lie in (0,1)");
        require(label_smoothing >= 0.0 && label_smoothing < 1.0, ErrorKind::config,
                "train: label smoothing must lie in [0,1)");
        require(batch_size >= 1, ErrorKind::config, "train: batch size must be >= 1");
        require(patience <= epochs, ErrorKind::config,
                "train: patience must not exceed the epoch count");
        require(val_fraction >= 0.0 && val_fraction < 1.0, ErrorKind::config,
                "train: val_fraction must lie in [0,1)");
        require(token_dropout >= 0.0 && token_dropout < 1.0, ErrorKind::config,
                "train: token_dropout must lie in [0,1)");
    }

    std::string to_text() const {
        std::string out;
        out += "epochs=" + std::to_string(epochs) + "\n";
        out += "batch_size=" + std::to_string(batch_size) + "\n";
        out += "lr=" + detail::format_double(lr) + "\n";
        out += "warmup_epochs=" + std::to_string(warmup_epochs) + "\n";
        out += "weight_decay=" + detail::format_double(weight_decay) + "\n";
        out += "beta1=" + detail::format_double(beta1) + "\n";
        out += "beta2=" + detail::format_double(beta2) + "\n";
        out += "label_smoothing=" + detail::format_double(label_smoothing) + "\n";
        out += "patience=" + std::to_string(patience) + "\n";
        out += "val_fraction=" + detail::format_double(val_fraction) + "\n";
        out += "token_dropout=" + detail::format_double(token_dropout) + "\n";
        out += "seed=" + std::to_string(seed) + "\n";
        return out;
    }

    static TrainConfig from_text(const std::string& text) {
        TrainConfig c;
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t end = text.find('\n', pos);
            if (end == std::string::npos) end = text.size();
            std::string line = text.substr(pos, end - pos);
            pos = end + 1;
            if (line.empty()) continue;
            std::size_t eq = line.find('=');
            require(eq != std::string::npos, ErrorKind::format,
                    "train config: expected key=value, got '" + line + "'");
            std::string key = line.substr(0, eq), val = line.substr(eq + 1);
            try {
                if (key == "epochs") c.epochs = std::stoul(val);
                else if (key == "batch_size") c.batch_size = std::stoul(val);
                else if (key == "lr") c.lr = detail::parse_double(val, key);
                else if (key == "warmup_epochs") c.warmup_epochs = std::stoul(val);
                else if (key == "weight_decay") c.weight_decay = detail::parse_double(val, key);
                else if (key == "beta1") c.beta1 = detail::parse_double(val, key);
                else if (key == "beta2") c.beta2 = detail::parse_double(val, key);
                else if (key == "label_smoothing")
                    c.label_smoothing = detail::parse_double(val, key);
                else if (key == "patience") c.patience = std::stoul(val);
                else if (key == "val_fraction") c.val_fraction = detail::parse_double(val, key);
                else if (key == "token_dropout")
                    c.token_dropout = detail::parse_double(val, key);
                else if (key == "seed") c.seed = std::stoull(val);
                else fail(ErrorKind::format, "train config: unknown key '" + key + "'");
            } catch (const Error&) {
                throw;
            } catch (const std::exception&) {
                fail(ErrorKind::format, "train config: bad value for '" + key + "'");
            }
        }
        return c;
    }

    // Linear warmup to the peak rate, then cosine decay over what remains.
    double lr_at(std::size_t epoch) const {
        if (warmup_epochs > 0 && epoch < warmup_epochs)
            return lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
        std::size_t span = epochs > warmup_epochs ? epochs - warmup_epochs : 1;
        double t = static_cast<double>(epoch - warmup_epochs) / static_cast<double>(span);
        return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    }
};

struct GammaSchedule {
    double gamma0 = 1.0;
    double gamma_max = 50.0;
};

// --- run records --------------------------------------------------------------

struct EpochRecord {
    std::string phase = "train";  // "train" or "finetune"
    std::size_t epoch = 0;
    double lr = 0.0;
    double gamma = 0.0;
    double train_loss = 0.0, train_acc = 0.0;
    double val_loss = 0.0, val_acc = 0.0;
    double pred_dl = 0.0, meas_dl = 0.0;
    std::size_t pruned_tokens = 0, pruned_heads = 0;
    bool best = false;
    std::uint64_t wall_ms = 0;

    std::string to_json() const {
        std::string out = "{\"phase\":\"" + phase + "\"";
        out += ",\"epoch\":" + std::to_string(epoch);
        out += ",\"lr\":" + detail::format_double(lr);
        out += ",\"gamma\":" + detail::format_double(gamma);
        out += ",\"train_loss\":" + detail::format_double(train_loss);
        out += ",\"train_acc\":" + detail::format_double(train_acc);
        out += ",\"val_loss\":" + detail::format_double(val_loss);
        out += ",\"val_acc\":" + detail::format_double(val_acc);
        out += ",\"pred_dl\":" + detail::format_double(pred_dl);
        out += ",\"meas_dl\":" + detail::format_double(meas_dl);
        out += ",\"pruned_tokens\":" + std::to_string(pruned_tokens);
        out += ",\"pruned_heads\":" + std::to_string(pruned_heads);
        out += std::string(",\"best\":") + (best ? "true" : "false");
        out += ",\"wall_ms\":" + std::to_string(wall_ms);
        out += "}";
        return out;
    }
};

struct RunRecord {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_val_acc = 0.0;
    bool early_exit = false;
    bool resumed = false;
};

// Removes every `,"key":value` occurrence so records can be compared across
// runs that differ only in wall-clock fields.
inline std::string strip_json_key(std::string text, const std::string& key) {
    const std::string needle = ",\"" + key + "\":";
    std::size_t at;
    while ((at = text.find(needle)) != std::string::npos) {
        std::size_t end = at + needle.size();
        if (end < text.size() && text[end] == '"') {
            end = text.find('"', end + 1);
            require(end != std::string::npos, ErrorKind::format,
                    "strip_json_key: unterminated string value");
            ++end;
        } else {
            while (end < text.size() && text[end] != ',' && text[end] != '}') ++end;
        }
        text.erase(at, end - at);
    }
    return text;
}

inline std::string strip_timing(const std::string& jsonl) {
    return strip_json_key(jsonl, "wall_ms");
}

// --- evaluation types ---------------------------------------------------------

struct EvalMetrics {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    double mean_pred_dl = 0.0;
    double mean_meas_dl = 0.0;
    std::size_t count = 0;
};

struct PerInputEval {
    std::string id;
    int label = 0;
    int prediction = 0;
    bool correct = false;
    double loss = 0.0;
    double pred_dl = 0.0;
    double meas_dl = 0.0;
};

struct EvalReport {
    EvalMetrics dense;
    bool has_pruned = false;
    EvalMetrics pruned;
    std::vector<PerInputEval> inputs;  // pruned rows when a policy ran, else dense

    std::string to_csv() const {
        std::string out = "row,id,accuracy,loss,pred_dl,meas_dl\n";
        auto summary = [&](const char* name, const EvalMetrics& m) {
            out += std::string(name) + ",all," + detail::format_double(m.accuracy) + "," +
                   detail::format_double(m.mean_loss) + "," +
                   detail::format_double(m.mean_pred_dl) + "," +
                   detail::format_double(m.mean_meas_dl) + "\n";
        };
        summary("dense", dense);
        if (has_pruned) summary("pruned", pruned);
        for (const PerInputEval& r : inputs)
            out += "input," + r.id + "," + (r.correct ? "1" : "0") + "," +
                   detail::format_double(r.loss) + "," + detail::format_double(r.pred_dl) +
                   "," + detail::format_double(r.meas_dl) + "\n";
        return out;
    }
};

namespace detail {

// Per-row smoothed cross entropy from raw logits; the same definition the
// graph op uses, applied outside any tape.
inline double row_cross_entropy(const Tensor& logits, std::size_t row, int label,
                                double smoothing) {
    std::size_t K = logits.cols();
    require(label >= 0 && static_cast<std::size_t>(label) < K, ErrorKind::contract,
            "cross entropy: label out of range");
    const double* p = logits.row(row);
    double mx = p[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, p[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(p[k] - mx);
    double lse = mx + std::log(z);
    double nll_true = lse - p[static_cast<std::size_t>(label)];
    if (smoothing == 0.0) return nll_true;
    double nll_mean = 0.0;
    for (std::size_t k = 0; k < K; ++k) nll_mean += lse - p[k];
    nll_mean /= static_cast<double>(K);
    return (1.0 - smoothing) * nll_true + smoothing * nll_mean;
}

inline int argmax_row(const Tensor& logits, std::size_t row) {
    const double* p = logits.row(row);
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.cols(); ++k)
        if (p[k] > p[best]) best = k;
    return static_cast<int>(best);
}

// Batched forward over chosen samples; fills per-input loss and prediction.
inline void forward_metrics(const ViTModel& m, const Dataset& data,
                            const std::vector<std::size_t>& idx, std::size_t chunk,
                            const GateSet* gates, GateMode mode, double smoothing,
                            std::vector<double>& loss_out, std::vector<int>& pred_out) {
    loss_out.resize(idx.size());
    pred_out.resize(idx.size());
    ForwardOptions opt;
    opt.mode = mode;
    opt.build_cache = false;
    for (std::size_t at = 0; at < idx.size(); at += chunk) {
        std::size_t take = std::min(chunk, idx.size() - at);
        std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(at),
                                      idx.begin() + static_cast<std::ptrdiff_t>(at + take));
        auto [logits, cache] = forward(m, data.batch(part), gates, opt);
        (void)cache;
        for (std::size_t b = 0; b < take; ++b) {
            loss_out[at + b] = row_cross_entropy(logits, b, data.labels[part[b]], smoothing);
            pred_out[at + b] = argmax_row(logits, b);
        }
    }
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

// --- optimizer ----------------------------------------------------------------

inline bool decays(const std::string& name) {
    return !is_bias_or_shift(name) && !is_ln_scale(name) && name != "cls" && name != "pos";
}

struct AdamW {
    std::vector<Tensor> m, v;  // aligned with ViTModel::params
    std::size_t step = 0;

    void init(const ViTModel& model) {
        m.clear();
        v.clear();
        for (const auto& [name, tensor] : model.params) {
            (void)name;
            m.push_back(Tensor::zeros(tensor.shape));
            v.push_back(Tensor::zeros(tensor.shape));
        }
    }

    void update(ViTModel& model, const std::vector<Tensor>& grads, const TrainConfig& cfg,
                double lr) {
        ++step;
        double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        const double eps = 1e-8;
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            auto& [name, p] = model.params[i];
            const Tensor& g = grads[i];
            double wd = decays(name) ? cfg.weight_decay : 0.0;
            for (std::size_t j = 0; j < p.size(); ++j) {
                double gj = g.data[j];
                m[i].data[j] = cfg.beta1 * m[i].data[j] + (1.0 - cfg.beta1) * gj;
                v[i].data[j] = cfg.beta2 * v[i].data[j] + (1.0 - cfg.beta2) * gj * gj;
                double mhat = m[i].data[j] / c1;
                double vhat = v[i].data[j] / c2;
                p.data[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p.data[j]);
            }
        }
    }
};

// --- loop state (crash resume) --------------------------------------------------

struct LoopState {
    std::size_t next_epoch = 0;
    std::size_t best_epoch = 0;
    std::size_t since_improve = 0;
    double best_val_acc = -1.0;
    bool early_exit = false;
    double last_pred_dl = 0.0;  // finetune: predicted dL of the latest rescoring
    double best_pred_dl = 0.0;  // finetune: predicted dL behind the best margins
    AdamW opt;
    std::vector<Tensor> best_params;  // empty until a best epoch exists
    GateMargins margins;              // finetune carry between rescoring epochs
    bool have_margins = false;
    GateMargins best_margins;  // finetune: margins active at the best epoch
    bool have_best_margins = false;
};

inline std::string state_config_text(const ViTModel& m, const TrainConfig& cfg,
                                     const std::string& phase) {
    return m.config.to_text() + "---\n" + cfg.to_text() + "phase=" + phase + "\n";
}

inline void save_state(const std::string& path, const ViTModel& model,
                       const LoopState& st, const TrainConfig& cfg,
                       const std::string& phase) {
    std::vector<container::Record> recs;
    Tensor counters({8});
    counters.data = {static_cast<double>(st.next_epoch), static_cast<double>(st.best_epoch),
                     static_cast<double>(st.since_improve), st.best_val_acc,
                     st.early_exit ? 1.0 : 0.0, static_cast<double>(st.opt.step),
                     st.last_pred_dl, st.best_pred_dl};
    recs.push_back({"counters", counters});
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        recs.push_back({"param/" + model.params[i].first, model.params[i].second});
        recs.push_back({"adam_m/" + model.params[i].first, st.opt.m[i]});
        recs.push_back({"adam_v/" + model.params[i].first, st.opt.v[i]});
    }
    if (!st.best_params.empty())
        for (std::size_t i = 0; i < model.params.size(); ++i)
            recs.push_back({"best/" + model.params[i].first, st.best_params[i]});
    auto margin_records = [&recs](const GateMargins& gm, const std::string& prefix) {
        Tensor tok({gm.token.size(), gm.token[0].size()});
        for (std::size_t l = 0; l < gm.token.size(); ++l)
            for (std::size_t j = 0; j < gm.token[l].size(); ++j)
                tok.at(l, j) = gm.token[l][j];
        Tensor hd({gm.head.size(), gm.head[0].size()});
        for (std::size_t l = 0; l < gm.head.size(); ++l)
            for (std::size_t h = 0; h < gm.head[l].size(); ++h)
                hd.at(l, h) = gm.head[l][h];
        recs.push_back({prefix + "/token", tok});
        recs.push_back({prefix + "/head", hd});
    };
    if (st.have_margins) margin_records(st.margins, "margins");
    if (st.have_best_margins) margin_records(st.best_margins, "best_margins");
    container::write_file(path, state_config_text(model, cfg, phase), recs);
}

inline bool try_load_state(const std::string& path, ViTModel& model, LoopState& st,
                           const TrainConfig& cfg, const std::string& phase) {
    if (!std::filesystem::exists(path)) return false;
    container::File f = container::read_file(path);
    require(f.config_text == state_config_text(model, cfg, phase), ErrorKind::contract,
            "resume: state file '" + path +
                "' was produced by a different model/config/phase");
    auto need = [&](const std::string& name) -> const Tensor& {
        const container::Record* r = f.find(name);
        require(r != nullptr, ErrorKind::format,
                "resume: state file is missing record '" + name + "'");
        return r->tensor;
    };
    const Tensor& counters = need("counters");
    require(counters.size() == 8, ErrorKind::format, "resume: malformed counters");
    st.next_epoch = static_cast<std::size_t>(counters.data[0]);
    st.best_epoch = static_cast<std::size_t>(counters.data[1]);
    st.since_improve = static_cast<std::size_t>(counters.data[2]);
    st.best_val_acc = counters.data[3];
    st.early_exit = counters.data[4] != 0.0;
    st.opt.init(model);
    st.opt.step = static_cast<std::size_t>(counters.data[5]);
    st.last_pred_dl = counters.data[6];
    st.best_pred_dl = counters.data[7];
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const std::string& name = model.params[i].first;
        model.params[i].second = need("param/" + name);
        st.opt.m[i] = need("adam_m/" + name);
        st.opt.v[i] = need("adam_v/" + name);
    }
    if (f.find("best/" + model.params[0].first)) {
        st.best_params.clear();
        for (const auto& [name, tensor] : model.params) {
            (void)tensor;
            st.best_params.push_back(need("best/" + name));
        }
    }
    auto load_margins = [&f, &need](const std::string& prefix, GateMargins& gm) {
        const container::Record* tok = f.find(prefix + "/token");
        if (!tok) return false;
        const Tensor& hd = need(prefix + "/head");
        gm.token.assign(tok->tensor.dim(0), {});
        for (std::size_t l = 0; l < tok->tensor.dim(0); ++l) {
            gm.token[l].resize(tok->tensor.dim(1));
            for (std::size_t j = 0; j < tok->tensor.dim(1); ++j)
                gm.token[l][j] = tok->tensor.at(l, j);
        }
        gm.head.assign(hd.dim(0), {});
        for (std::size_t l = 0; l < hd.dim(0); ++l) {
            gm.head[l].resize(hd.dim(1));
            for (std::size_t h = 0; h < hd.dim(1); ++h) gm.head[l][h] = hd.at(l, h);
        }
        return true;
    };
    st.have_margins = load_margins("margins", st.margins);
    st.have_best_margins = load_margins("best_margins", st.best_margins);
    return true;
}

// Drops this phase's record lines for epochs >= next_epoch (a crash can leave
// a line for an epoch whose state never got saved; the rerun re-emits it).
inline void trim_jsonl(const std::string& path, const std::string& phase,
                       std::size_t next_epoch) {
    if (!std::filesystem::exists(path)) return;
    std::string body = read_text_file(path);
    std::string keep;
    std::size_t pos = 0;
    const std::string phase_tag = "\"phase\":\"" + phase + "\"";
    while (pos < body.size()) {
        std::size_t end = body.find('\n', pos);
        if (end == std::string::npos) end = body.size();
        std::string line = body.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        bool drop = false;
        if (line.find(phase_tag) != std::string::npos) {
            std::size_t at = line.find("\"epoch\":");
            if (at != std::string::npos) {
                std::size_t e = std::strtoull(line.c_str() + at + 8, nullptr, 10);
                drop = e >= next_epoch;
            }
        }
        if (!drop) keep += line + "\n";
    }
    atomic_write_text(path, keep);
}

inline void trim_metrics_csv(const std::string& path, std::size_t next_epoch) {
    if (!std::filesystem::exists(path)) return;
    std::string body = read_text_file(path);
    std::string keep;
    std::size_t pos = 0;
    bool first = true;
    while (pos < body.size()) {
        std::size_t end = body.find('\n', pos);
        if (end == std::string::npos) end = body.size();
        std::string line = body.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        bool drop = false;
        if (!first) {
            std::size_t e = std::strtoull(line.c_str(), nullptr, 10);
            drop = e >= next_epoch;
        }
        first = false;
        if (!drop) keep += line + "\n";
    }
    atomic_write_text(path, keep);
}

inline void append_line(const std::string& path, const std::string& line) {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    require(f.good(), ErrorKind::io, "cannot append to '" + path + "'");
    f << line << "\n";
    f.flush();
    require(f.good(), ErrorKind::io, "append failed for '" + path + "'");
}

inline const char* metrics_header() {
    return "epoch,split,loss,accuracy,gamma,pred_dl,meas_dl";
}

inline std::string metrics_row(std::size_t epoch, const char* split, double loss,
                               double acc, double gamma, double pred, double meas) {
    return std::to_string(epoch) + "," + split + "," + format_double(loss) + "," +
           format_double(acc) + "," + format_double(gamma) + "," + format_double(pred) +
           "," + format_double(meas);
}

struct EpochStats {
    double loss = 0.0;
    double acc = 0.0;
};

// One optimization epoch over the training indices: shuffled minibatches,
// whole-batch reverse-mode gradients, AdamW updates. Non-finite loss aborts
// with a pointer at the last persisted state.
inline EpochStats run_train_epoch(ViTModel& model, const Dataset& data,
                                  const std::vector<std::size_t>& train_idx,
                                  const TrainConfig& cfg, std::size_t epoch, double lr,
                                  const GateSet* gates, AdamW& opt,
                                  const std::string& last_good) {
    Rng rng = Rng(cfg.seed).fork(2 * epoch + (gates && gates->soft ? 1 : 0));
    std::vector<std::size_t> order = train_idx;
    rng.shuffle(order);
    // Token dropout applies only to plain supervised batches; gated fine-tune
    // forwards already carry their own gates. Masks come from a stream forked
    // per purpose so the shuffle above is unchanged by the setting.
    bool drop_tokens = cfg.token_dropout > 0.0 && gates == nullptr;
    Rng drop_rng = Rng(cfg.seed).fork(1'000'003 + epoch);
    GateSet dropped;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
        std::size_t take = std::min(cfg.batch_size, order.size() - at);
        std::vector<std::size_t> part(order.begin() + static_cast<std::ptrdiff_t>(at),
                                      order.begin() + static_cast<std::ptrdiff_t>(at + take));
        Tensor batch = data.batch(part);
        std::vector<int> labels = data.batch_labels(part);
        const GateSet* batch_gates = gates;
        if (drop_tokens) {
            dropped = GateSet::all_keep(model.config);
            for (std::size_t j = 1; j < model.config.tokens(); ++j)
                if (drop_rng.uniform() < cfg.token_dropout)
                    for (auto& layer : dropped.token_keep) layer[j] = 0;
            batch_gates = &dropped;
        }
        Tape t(true);
        ParamVars pv = param_leaves(t, model);
        ForwardOptions opt_fwd;
        opt_fwd.training = true;
        opt_fwd.rng = &rng;
        opt_fwd.build_cache = false;
        Var logits = forward_graph(t, model, pv, batch, batch_gates, opt_fwd, nullptr);
        Var ce = op::cross_entropy(logits, labels, cfg.label_smoothing);
        double batch_loss = t.val(ce).data[0];
        require(std::isfinite(batch_loss), ErrorKind::numeric,
                "training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                    ", batch " + std::to_string(at / cfg.batch_size) +
                    "; last good checkpoint: " + (last_good.empty() ? "none" : last_good));
        const Tensor& lg = t.val(logits);
        for (std::size_t b = 0; b < take; ++b)
            if (argmax_row(lg, b) == labels[b]) ++correct;
        t.backward(ce);
        std::vector<Tensor> grads;
        grads.reserve(model.params.size());
        for (std::size_t i = 0; i < model.params.size(); ++i)
            grads.push_back(t.grad_of(pv.vars[i]));
        opt.update(model, grads, cfg, lr);
        loss_sum += batch_loss * static_cast<double>(take);
    }
    EpochStats st;
    st.loss = loss_sum / static_cast<double>(order.size());
    st.acc = static_cast<double>(correct) / static_cast<double>(order.size());
    return st;
}

inline EpochStats eval_pass(const ViTModel& model, const Dataset& data,
                            const std::vector<std::size_t>& idx, std::size_t chunk,
                            const GateSet* gates, GateMode mode, double smoothing) {
    EpochStats st;
    if (idx.empty()) return st;
    std::vector<double> losses;
    std::vector<int> preds;
    forward_metrics(model, data, idx, chunk, gates, mode, smoothing, losses, preds);
    std::size_t correct = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        sum += losses[i];
        if (preds[i] == data.labels[idx[i]]) ++correct;
    }
    st.loss = sum / static_cast<double>(idx.size());
    st.acc = static_cast<double>(correct) / static_cast<double>(idx.size());
    return st;
}

} // namespace detail

// --- training -------------------------------------------------------------------

struct TrainResult {
    ViTModel model;  // best-by-validation parameters
    RunRecord record;
};

// Supervised training with per-epoch persistence. `work_dir` (optional) holds
// `state.hvit` (resume point), `run.jsonl` (one epoch per line) and
// `metrics.csv`; a run interrupted after epoch k resumes at k+1 and produces
// files identical to an uninterrupted run, timing fields aside.
inline TrainResult train(const ViTModel& init, const Dataset& data, const TrainConfig& cfg,
                         const std::string& work_dir = "") {
    cfg.validate();
    data.validate();
    require(data.classes == init.config.classes, ErrorKind::contract,
            "train: model classifies " + std::to_string(init.config.classes) +
                " classes but the dataset labels " + std::to_string(data.classes));

    namespace fs = std::filesystem;
    std::string state_path, record_path, metrics_path;
    if (!work_dir.empty()) {
        std::error_code ec;
        fs::create_directories(work_dir, ec);
        require(!ec, ErrorKind::io, "train: cannot create '" + work_dir + "'");
        state_path = (fs::path(work_dir) / "state.hvit").string();
        record_path = (fs::path(work_dir) / "run.jsonl").string();
        metrics_path = (fs::path(work_dir) / "metrics.csv").string();
    }

    TrainResult out;
    out.model = init;
    detail::LoopState st;
    bool resumed = !state_path.empty() &&
                   detail::try_load_state(state_path, out.model, st, cfg, "train");
    if (!resumed) {
        st.opt.init(out.model);
        if (!record_path.empty()) {
            atomic_write_text(record_path, "");
            atomic_write_text(metrics_path, std::string(detail::metrics_header()) + "\n");
        }
    } else {
        out.record.resumed = true;
        detail::trim_jsonl(record_path, "train", st.next_epoch);
        detail::trim_metrics_csv(metrics_path, st.next_epoch);
    }

    Split split = stratified_split(data, cfg.val_fraction);
    require(!split.train.empty() || cfg.epochs == 0, ErrorKind::data,
            "train: empty training split");

    for (std::size_t e = st.next_epoch; e < cfg.epochs && !st.early_exit; ++e) {
        auto t0 = std::chrono::steady_clock::now();
        double lr = cfg.lr_at(e);
        detail::EpochStats tr = detail::run_train_epoch(out.model, data, split.train, cfg,
                                                        e, lr, nullptr, st.opt, state_path);
        detail::EpochStats va = detail::eval_pass(out.model, data, split.val,
                                                  cfg.batch_size, nullptr, GateMode::mask,
                                                  cfg.label_smoothing);
        bool improved = split.val.empty() || va.acc > st.best_val_acc;
        if (improved) {
            st.best_val_acc = va.acc;
            st.best_epoch = e;
            st.since_improve = 0;
            st.best_params.clear();
            for (const auto& [name, tensor] : out.model.params) {
                (void)name;
                st.best_params.push_back(tensor);
            }
        } else {
            ++st.since_improve;
        }
        if (st.since_improve > cfg.patience) st.early_exit = true;
        st.next_epoch = e + 1;

        EpochRecord rec;
        rec.phase = "train";
        rec.epoch = e;
        rec.lr = lr;
        rec.train_loss = tr.loss;
        rec.train_acc = tr.acc;
        rec.val_loss = va.loss;
        rec.val_acc = va.acc;
        rec.best = improved;
        rec.wall_ms = static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::milliseconds>(
                std::chrono::steady_clock::now() - t0)
                .count());
        out.record.epochs.push_back(rec);
        if (!record_path.empty()) {
            detail::append_line(record_path, rec.to_json());
            detail::append_line(metrics_path,
                                detail::metrics_row(e, "train", tr.loss, tr.acc, 0, 0, 0));
            detail::append_line(metrics_path,
                                detail::metrics_row(e, "val", va.loss, va.acc, 0, 0, 0));
            detail::save_state(state_path, out.model, st, cfg, "train");
        }
    }

    out.record.best_epoch = st.best_epoch;
    out.record.best_val_acc = st.best_val_acc < 0.0 ? 0.0 : st.best_val_acc;
    out.record.early_exit = st.early_exit;
    if (!st.best_params.empty())
        for (std::size_t i = 0; i < out.model.params.size(); ++i)
            out.model.params[i].second = st.best_params[i];
    return out;
}

// --- calibration (Phase A) -------------------------------------------------------

struct CalibrationResult {
    SensitivityReport report;     // raw batch scores, true labels
    NormalizedReport normalized;  // stats carry the policy-induced thresholds
    GateDecision decision;        // batch-level selection
};

inline CalibrationResult calibrate(const ViTModel& m, const Tensor& batch,
                                   const std::vector<int>& labels,
                                   const PruningPolicy& policy,
                                   NormScope scope = NormScope::per_layer_by_kind,
                                   std::size_t threads = 1) {
    policy.validate();
    CalibrationResult out;
    out.report = score_all(m, batch, labels, threads);
    out.decision = select(m.config, out.report, policy);
    out.normalized = normalize(out.report, scope);
    derive_thresholds(out.normalized, out.decision, policy);
    return out;
}

// --- per-input pruned inference (Phase B) ----------------------------------------

struct PrunedInference {
    int prediction = 0;  // argmax of the pruned forward
    GateDecision decision;
    NormalizedReport normalized;  // per-input scores on the calibrated scale
    Tensor dense_logits, pruned_logits;  // (1, classes) each
    ActivationCache dense_cache, pruned_cache;
};

// Label-free hard-gated inference on one input: forward once densely
// (caching activations), score every candidate against the model's own
// predicted label, run the policy's selection on this input's scores, and
// re-run in compact mode. The calibration statistics place the scores on the
// calibrated scale (returned for diagnostics and soft gating); the hard
// selection itself uses the raw per-input scores, which is what makes the
// loss-budget guarantee hold input by input.
inline PrunedInference infer_pruned(const ViTModel& m, const Tensor& image,
                                    const PruningPolicy& policy,
                                    const CalibrationStats& stats) {
    policy.validate();
    require(stats.policy_text == policy.to_text(), ErrorKind::contract,
            "infer_pruned: statistics were calibrated for policy '" + stats.policy_text +
                "', not '" + policy.to_text() + "'");
    const ViTConfig& c = m.config;
    require(stats.token.size() == c.layers && stats.head.size() == c.layers,
            ErrorKind::contract, "infer_pruned: statistics cover a different layer count");
    Tensor batch = image;
    if (image.rank() == 3)
        batch = image.reshaped({1, c.channels, c.image_size, c.image_size});
    require(batch.rank() == 4 && batch.dim(0) == 1, ErrorKind::contract,
            "infer_pruned: expected a single image, got " + image.shape_str());

    PrunedInference out;
    auto dense = forward(m, batch);
    out.dense_logits = dense.first;
    out.dense_cache = std::move(dense.second);
    int pred_label = detail::argmax_row(out.dense_logits, 0);

    SensitivityReport rep;
    rep.refs = candidate_set(c);
    rep.label_mode = "predicted";
    std::vector<double> raw(rep.refs.size());
    for (std::size_t i = 0; i < rep.refs.size(); ++i)
        raw[i] = score_from_cache(m, out.dense_cache, 0, rep.refs[i], pred_label,
                                  c.label_smoothing);
    rep.inputs.push_back({"0", raw});
    rep.batch_avg = raw;
    rep.token_agg.assign(c.tokens() - 1, 0.0);
    for (std::size_t i = 0; i < rep.refs.size(); ++i)
        if (rep.refs[i].kind == ComponentKind::token)
            rep.token_agg[rep.refs[i].index - 1] += raw[i];

    out.decision = select(c, rep, policy);
    out.normalized.refs = rep.refs;
    out.normalized.shat = apply_stats(rep.refs, raw, stats);
    out.normalized.token_agg_shat = apply_token_agg_stats(rep.token_agg, stats);
    out.normalized.stats = stats;

    ForwardOptions opt;
    opt.mode = GateMode::compact;
    auto pruned = forward(m, batch, &out.decision.gateset, opt);
    out.pruned_logits = pruned.first;
    out.pruned_cache = std::move(pruned.second);
    out.prediction = detail::argmax_row(out.pruned_logits, 0);
    return out;
}

// --- evaluation -------------------------------------------------------------------

// Dense metrics always; with a policy and its calibration statistics, also
// per-input gated metrics where measured dL = loss(pruned) - loss(dense) on
// the true label. Inputs are independent, so they parallelize.
inline EvalReport evaluate(const ViTModel& m, const Dataset& data,
                           const PruningPolicy* policy = nullptr,
                           const CalibrationStats* stats = nullptr,
                           std::size_t threads = 1, std::size_t chunk = 32) {
    data.validate();
    require((policy == nullptr) == (stats == nullptr), ErrorKind::contract,
            "evaluate: policy and calibration statistics come as a pair");
    std::vector<std::size_t> idx = detail::all_indices(data.size());
    EvalReport out;

    std::vector<double> dense_loss;
    std::vector<int> dense_pred;
    detail::forward_metrics(m, data, idx, chunk, nullptr, GateMode::mask,
                            m.config.label_smoothing, dense_loss, dense_pred);
    std::size_t correct = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        sum += dense_loss[i];
        if (dense_pred[i] == data.labels[i]) ++correct;
    }
    out.dense.count = idx.size();
    out.dense.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
    out.dense.mean_loss = sum / static_cast<double>(idx.size());

    out.inputs.resize(idx.size());
    if (!policy) {
        for (std::size_t i = 0; i < idx.size(); ++i) {
            PerInputEval& r = out.inputs[i];
            r.id = std::to_string(i);
            r.label = data.labels[i];
            r.prediction = dense_pred[i];
            r.correct = r.prediction == r.label;
            r.loss = dense_loss[i];
        }
        return out;
    }

    out.has_pruned = true;
    auto eval_input = [&](std::size_t i) {
        PrunedInference inf = infer_pruned(m, data.images[i], *policy, *stats);
        PerInputEval& r = out.inputs[i];
        r.id = std::to_string(i);
        r.label = data.labels[i];
        r.prediction = inf.prediction;
        r.correct = r.prediction == r.label;
        r.loss = detail::row_cross_entropy(inf.pruned_logits, 0, data.labels[i],
                                           m.config.label_smoothing);
        r.pred_dl = inf.decision.predicted_delta_loss;
        r.meas_dl = r.loss - dense_loss[i];
    };
    threads = std::max<std::size_t>(1, std::min(threads, idx.size()));
    if (threads == 1) {
        for (std::size_t i = 0; i < idx.size(); ++i) eval_input(i);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < threads; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < idx.size(); i += threads) eval_input(i);
            });
        for (auto& th : pool) th.join();
    }
    out.pruned.count = idx.size();
    double l = 0, p = 0, d = 0;
    std::size_t pc = 0;
    for (const PerInputEval& r : out.inputs) {
        l += r.loss;
        p += r.pred_dl;
        d += r.meas_dl;
        if (r.correct) ++pc;
    }
    double inv = 1.0 / static_cast<double>(idx.size());
    out.pruned.accuracy = static_cast<double>(pc) * inv;
    out.pruned.mean_loss = l * inv;
    out.pruned.mean_pred_dl = p * inv;
    out.pruned.mean_meas_dl = d * inv;
    return out;
}

// Same report shape for one fixed gate set applied to every input (the
// baseline generator for ordering experiments and the post-fine-tune check).
inline EvalReport evaluate_gates(const ViTModel& m, const Dataset& data,
                                 const GateSet& gates,
                                 GateMode mode = GateMode::compact,
                                 std::size_t chunk = 32) {
    data.validate();
    gates.validate(m.config);
    std::vector<std::size_t> idx = detail::all_indices(data.size());
    EvalReport out;
    std::vector<double> dense_loss, gated_loss;
    std::vector<int> dense_pred, gated_pred;
    detail::forward_metrics(m, data, idx, chunk, nullptr, GateMode::mask,
                            m.config.label_smoothing, dense_loss, dense_pred);
    detail::forward_metrics(m, data, idx, chunk, &gates, mode, m.config.label_smoothing,
                            gated_loss, gated_pred);
    out.has_pruned = true;
    out.inputs.resize(idx.size());
    std::size_t dc = 0, pc = 0;
    double dl = 0, pl = 0, md = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        PerInputEval& r = out.inputs[i];
        r.id = std::to_string(i);
        r.label = data.labels[i];
        r.prediction = gated_pred[i];
        r.correct = r.prediction == r.label;
        r.loss = gated_loss[i];
        r.meas_dl = gated_loss[i] - dense_loss[i];
        dl += dense_loss[i];
        pl += gated_loss[i];
        md += r.meas_dl;
        if (dense_pred[i] == data.labels[i]) ++dc;
        if (r.correct) ++pc;
    }
    double inv = 1.0 / static_cast<double>(idx.size());
    out.dense.count = out.pruned.count = idx.size();
    out.dense.accuracy = static_cast<double>(dc) * inv;
    out.dense.mean_loss = dl * inv;
    out.pruned.accuracy = static_cast<double>(pc) * inv;
    out.pruned.mean_loss = pl * inv;
    out.pruned.mean_meas_dl = md * inv;
    return out;
}

// --- soft-gate fine-tuning (Phase C) ----------------------------------------------

struct FinetuneResult {
    ViTModel model;        // final-epoch weights (gates bind at the end)
    GateSet gates;         // hard gates binarized from the final margins
    GateDecision decision; // final rescoring's selection
    RunRecord record;
};

// Gradient training under soft gates sigma(gamma * (shat - tau)) with gamma
// annealed from gamma0 to gamma_max across the epochs. Scores, normalization
// statistics and thresholds are refreshed on the calibration batch every
// `rescore_every` epochs with the current weights; gates are binarized at
// the 0.5 crossing. Because the deployed network runs with hard gates in
// compact mode, epoch selection follows that deployment measurement: each
// epoch the current margins are binarized and scored on the validation
// split, and the returned weights/gates are those of the best such epoch
// (final epoch when there is no validation split).
inline FinetuneResult finetune(const ViTModel& trained, const Dataset& data,
                               const PruningPolicy& policy, const Tensor& calib_batch,
                               const std::vector<int>& calib_labels,
                               const TrainConfig& cfg, const GammaSchedule& gs = {},
                               const std::string& work_dir = "",
                               std::size_t rescore_every = 1, std::size_t threads = 1) {
    cfg.validate();
    data.validate();
    policy.validate();
    require(gs.gamma0 > 0.0 && gs.gamma_max >= gs.gamma0, ErrorKind::contract,
            "finetune: need 0 < gamma0 <= gamma_max");
    require(rescore_every >= 1, ErrorKind::contract,
            "finetune: rescore_every must be >= 1");

    namespace fs = std::filesystem;
    std::string state_path, record_path, metrics_path;
    if (!work_dir.empty()) {
        std::error_code ec;
        fs::create_directories(work_dir, ec);
        require(!ec, ErrorKind::io, "finetune: cannot create '" + work_dir + "'");
        state_path = (fs::path(work_dir) / "state.hvit").string();
        record_path = (fs::path(work_dir) / "run.jsonl").string();
        metrics_path = (fs::path(work_dir) / "metrics.csv").string();
    }

    FinetuneResult out;
    out.model = trained;
    detail::LoopState st;
    bool resumed = !state_path.empty() &&
                   detail::try_load_state(state_path, out.model, st, cfg, "finetune");
    if (!resumed) {
        st.opt.init(out.model);
        if (!record_path.empty()) {
            atomic_write_text(record_path, "");
            atomic_write_text(metrics_path, std::string(detail::metrics_header()) + "\n");
        }
    } else {
        out.record.resumed = true;
        detail::trim_jsonl(record_path, "finetune", st.next_epoch);
        detail::trim_metrics_csv(metrics_path, st.next_epoch);
        if (st.have_margins) {
            // the selection the interrupted run was annealing toward
            out.decision.gateset = binarize(st.margins);
            SensitivityReport refs_only;
            refs_only.refs = candidate_set(out.model.config);
            detail::partition_refs(refs_only, out.decision.gateset, out.decision);
            out.decision.predicted_delta_loss = st.last_pred_dl;
        }
    }

    Split split = stratified_split(data, cfg.val_fraction);
    std::size_t T = cfg.epochs > 0 ? cfg.epochs - 1 : 0;

    for (std::size_t e = st.next_epoch; e < cfg.epochs && !st.early_exit; ++e) {
        auto t0 = std::chrono::steady_clock::now();
        double gamma = anneal_gamma(e, T, gs.gamma0, gs.gamma_max);
        double lr = cfg.lr_at(e);
        if (!st.have_margins || e % rescore_every == 0) {
            CalibrationResult cal =
                calibrate(out.model, calib_batch, calib_labels, policy,
                          NormScope::per_layer_by_kind, threads);
            st.margins = gate_margins(out.model.config, cal.normalized, policy);
            st.have_margins = true;
            out.decision = std::move(cal.decision);
            st.last_pred_dl = out.decision.predicted_delta_loss;
        }
        GateSet soft = soften(st.margins, gamma);
        detail::EpochStats tr = detail::run_train_epoch(out.model, data, split.train, cfg,
                                                        e, lr, &soft, st.opt, state_path);
        detail::EpochStats va = detail::eval_pass(out.model, data, split.val,
                                                  cfg.batch_size, &soft, GateMode::mask,
                                                  cfg.label_smoothing);
        GateSet hard = binarize(st.margins);
        double meas_dl = 0.0;
        bool improved = split.val.empty();
        double hard_acc = 0.0;
        if (!split.val.empty()) {
            detail::EpochStats pr = detail::eval_pass(out.model, data, split.val,
                                                      cfg.batch_size, &hard,
                                                      GateMode::compact,
                                                      cfg.label_smoothing);
            detail::EpochStats dn = detail::eval_pass(out.model, data, split.val,
                                                      cfg.batch_size, nullptr,
                                                      GateMode::mask, cfg.label_smoothing);
            meas_dl = pr.loss - dn.loss;
            hard_acc = pr.acc;
            improved = hard_acc > st.best_val_acc;
        }
        if (improved) {
            st.best_val_acc = hard_acc;
            st.best_epoch = e;
            st.since_improve = 0;
            if (!split.val.empty()) {
                st.best_params.clear();
                for (const auto& [name, tensor] : out.model.params) {
                    (void)name;
                    st.best_params.push_back(tensor);
                }
                st.best_margins = st.margins;
                st.have_best_margins = true;
                st.best_pred_dl = st.last_pred_dl;
            }
        } else {
            ++st.since_improve;
        }
        if (st.since_improve > cfg.patience) st.early_exit = true;
        st.next_epoch = e + 1;

        EpochRecord rec;
        rec.phase = "finetune";
        rec.epoch = e;
        rec.lr = lr;
        rec.gamma = gamma;
        rec.train_loss = tr.loss;
        rec.train_acc = tr.acc;
        rec.val_loss = va.loss;
        rec.val_acc = va.acc;
        rec.pred_dl = out.decision.predicted_delta_loss;
        rec.meas_dl = meas_dl;
        rec.best = improved;
        for (const auto& l : hard.token_keep)
            for (std::size_t j = 1; j < l.size(); ++j) rec.pruned_tokens += l[j] == 0;
        for (const auto& l : hard.head_keep)
            for (std::uint8_t k : l) rec.pruned_heads += k == 0;
        rec.wall_ms = static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::milliseconds>(
                std::chrono::steady_clock::now() - t0)
                .count());
        out.record.epochs.push_back(rec);
        if (!record_path.empty()) {
            detail::append_line(record_path, rec.to_json());
            detail::append_line(metrics_path, detail::metrics_row(e, "train", tr.loss,
                                                                  tr.acc, gamma,
                                                                  rec.pred_dl, 0));
            detail::append_line(metrics_path, detail::metrics_row(e, "val", va.loss,
                                                                  va.acc, gamma,
                                                                  rec.pred_dl, meas_dl));
            detail::save_state(state_path, out.model, st, cfg, "finetune");
        }
    }

    if (!st.have_margins) {
        CalibrationResult cal = calibrate(out.model, calib_batch, calib_labels, policy,
                                          NormScope::per_layer_by_kind, threads);
        st.margins = gate_margins(out.model.config, cal.normalized, policy);
        out.decision = std::move(cal.decision);
        st.last_pred_dl = out.decision.predicted_delta_loss;
    }
    if (!st.best_params.empty()) {
        for (std::size_t i = 0; i < out.model.params.size(); ++i)
            out.model.params[i].second = st.best_params[i];
        out.gates = binarize(st.best_margins);
        SensitivityReport refs_only;
        refs_only.refs = candidate_set(out.model.config);
        out.decision = GateDecision{};
        out.decision.gateset = out.gates;
        detail::partition_refs(refs_only, out.decision.gateset, out.decision);
        out.decision.predicted_delta_loss = st.best_pred_dl;
    } else {
        out.gates = binarize(st.margins);
    }
    out.record.best_epoch = st.best_epoch;
    out.record.best_val_acc = st.best_val_acc < 0.0 ? 0.0 : st.best_val_acc;
    out.record.early_exit = st.early_exit;
    return out;
}

} // namespace vitprune
