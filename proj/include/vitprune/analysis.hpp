#pragma once

// Layerwise representation diagnostics for comparing two models over the
// same inputs — typically a dense network against its pruned or fine-tuned
// variant. Three views per block:
//   - linear CKA between token activations (how similar the layer's
//     representation geometry stayed),
//   - cosine similarity of the CLS token (how tightly the classification
//     pathway tracks the original),
//   - residual ratio ||x_in|| / ||x_out|| (how much each block actually
//     transforms its input; 1.0 means the block is a pure pass-through).
// All activations are compared after each transformer block (post-block),
// and that choice is recorded in the emitted CSV.

#include <cmath>
#include <string>
#include <vector>

#include "vitprune/text.hpp"
#include "vitprune/vit.hpp"

namespace vitprune {

// Linear CKA between two feature matrices with matching row counts. Columns
// are centered internally; the statistic is
//   ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F),
// which is 1 when Y is X up to orthogonal rotation and isotropic scaling,
// and 0 when every pair of columns is uncorrelated.
inline double linear_cka(const Tensor& X, const Tensor& Y) {
    require(X.rank() == 2 && Y.rank() == 2, ErrorKind::contract,
            "linear_cka: inputs must be rank-2 (samples, features)");
    require(X.dim(0) == Y.dim(0), ErrorKind::contract,
            "linear_cka: sample counts differ (" + std::to_string(X.dim(0)) + " vs " +
                std::to_string(Y.dim(0)) + ")");
    require(X.dim(0) >= 2, ErrorKind::contract, "linear_cka: need at least 2 samples");
    const std::size_t n = X.dim(0), fx = X.dim(1), fy = Y.dim(1);

    auto centered = [n](const Tensor& A, std::size_t f) {
        Tensor C({n, f});
        for (std::size_t j = 0; j < f; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += A.at(i, j);
            mean /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) C.at(i, j) = A.at(i, j) - mean;
        }
        return C;
    };
    Tensor Xc = centered(X, fx), Yc = centered(Y, fy);

    // Frobenius norm of A^T B via the (small) feature-by-feature Gram matrix.
    auto cross_fro2 = [n](const Tensor& A, const Tensor& B) {
        std::size_t fa = A.dim(1), fb = B.dim(1);
        double total = 0.0;
        for (std::size_t a = 0; a < fa; ++a)
            for (std::size_t b = 0; b < fb; ++b) {
                double dot = 0.0;
                for (std::size_t i = 0; i < n; ++i) dot += A.at(i, a) * B.at(i, b);
                total += dot * dot;
            }
        return total;
    };
    double xx = std::sqrt(cross_fro2(Xc, Xc));
    double yy = std::sqrt(cross_fro2(Yc, Yc));
    require(xx > 0.0 && yy > 0.0, ErrorKind::degenerate,
            "linear_cka: zero-variance input (all rows identical)");
    return cross_fro2(Yc, Xc) / (xx * yy);
}

namespace detail {

inline double row_cosine(const Tensor& A, std::size_t ra, const Tensor& B, std::size_t rb) {
    std::size_t d = A.cols();
    double dot = 0.0, na = 0.0, nb = 0.0;
    const double* pa = A.row(ra);
    const double* pb = B.row(rb);
    for (std::size_t k = 0; k < d; ++k) {
        dot += pa[k] * pb[k];
        na += pa[k] * pa[k];
        nb += pb[k] * pb[k];
    }
    require(na > 0.0 && nb > 0.0, ErrorKind::degenerate,
            "cls_cosine: zero-norm CLS activation");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace detail

// Mean over inputs of the cosine between the two models' CLS activations
// after block `layer` (layer 0 is the embedding output). The CLS token is
// never pruned, so it is row 0 of every per-sample slice in both caches.
inline double cls_cosine(const ActivationCache& a, const ActivationCache& b,
                         std::size_t layer) {
    require(a.batch == b.batch && a.batch >= 1, ErrorKind::contract,
            "cls_cosine: caches must hold the same non-empty batch");
    require(layer < a.tokens.size() && layer < b.tokens.size(), ErrorKind::contract,
            "cls_cosine: layer out of range");
    std::size_t rows_a = a.rows_at(layer), rows_b = b.rows_at(layer);
    double total = 0.0;
    for (std::size_t i = 0; i < a.batch; ++i)
        total += detail::row_cosine(a.tokens[layer], i * rows_a, b.tokens[layer], i * rows_b);
    return total / static_cast<double>(a.batch);
}

// Mean over inputs and surviving tokens of ||x_in|| / ||x_out|| for block
// `layer` (1-based). A block whose attention and MLP both output zero leaves
// x_out = x_in through the residual connection, giving exactly 1.0.
inline double residual_ratio(const ActivationCache& cache, std::size_t layer) {
    require(layer >= 1 && layer <= cache.block_in_norm.size(), ErrorKind::contract,
            "residual_ratio: layer must be in 1..L");
    const Tensor& in = cache.block_in_norm[layer - 1];
    const Tensor& out = cache.block_out_norm[layer - 1];
    double total = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        require(out.data[i] > 0.0, ErrorKind::degenerate,
                "residual_ratio: zero block-output norm");
        total += in.data[i] / out.data[i];
    }
    return total / static_cast<double>(out.size());
}

// One row per block: how the second model's representation tracks the first.
struct LayerReport {
    std::vector<double> cka;             // [L], in [0,1]
    std::vector<double> cls_cosine;      // [L], in [-1,1]
    std::vector<double> residual_ratio;  // [L], > 0 (from the second cache)

    std::size_t layers() const { return cka.size(); }

    void validate() const {
        require(cka.size() == cls_cosine.size() && cka.size() == residual_ratio.size() &&
                    !cka.empty(),
                ErrorKind::contract, "layer report: per-layer vectors must align");
        const double slack = 1e-9;
        for (double v : cka)
            require(v >= -slack && v <= 1.0 + slack, ErrorKind::contract,
                    "layer report: cka outside [0,1]");
        for (double v : cls_cosine)
            require(v >= -1.0 - slack && v <= 1.0 + slack, ErrorKind::contract,
                    "layer report: cls_cosine outside [-1,1]");
        for (double v : residual_ratio)
            require(v > 0.0, ErrorKind::contract, "layer report: residual_ratio must be > 0");
    }

    std::string to_csv() const {
        validate();
        std::string out = "# activations compared after each block (post-block)\n";
        out += "layer,cka,cls_cosine,residual_ratio\n";
        for (std::size_t l = 0; l < cka.size(); ++l) {
            out += std::to_string(l + 1);
            out += ',';
            out += detail::format_double(cka[l]);
            out += ',';
            out += detail::format_double(cls_cosine[l]);
            out += ',';
            out += detail::format_double(residual_ratio[l]);
            out += '\n';
        }
        return out;
    }
};

namespace detail {

// Token activations at `layer` restricted to the original token ids in
// `common`, flattened over (sample, position) pairs into (B*|common|, d).
inline Tensor common_token_features(const ActivationCache& cache, std::size_t layer,
                                    const std::vector<std::size_t>& common) {
    std::size_t rows = cache.rows_at(layer), d = cache.tokens[layer].cols();
    Tensor out({cache.batch * common.size(), d});
    std::size_t r = 0;
    for (std::size_t b = 0; b < cache.batch; ++b)
        for (std::size_t tok : common) {
            std::size_t pos = cache.token_pos(layer, tok);
            require(pos != static_cast<std::size_t>(-1), ErrorKind::contract,
                    "layer_report: token missing from cache");
            const double* src = cache.tokens[layer].row(b * rows + pos);
            std::copy(src, src + d, out.data.begin() + static_cast<std::ptrdiff_t>(r * d));
            ++r;
        }
    return out;
}

} // namespace detail

// Compares two caches recorded over the same inputs, layer by layer. CKA is
// computed on the token positions surviving in BOTH caches at each layer
// (pruned positions are excluded from both sides, aligned by original token
// id); cls_cosine pairs the two CLS rows; residual_ratio describes the
// second cache, which is the pruned/fine-tuned side in the usual pairing.
inline LayerReport layer_report(const ActivationCache& first, const ActivationCache& second) {
    require(first.batch == second.batch && first.batch >= 2, ErrorKind::contract,
            "layer_report: caches must hold the same batch of at least 2 inputs");
    require(first.block_in_norm.size() == second.block_in_norm.size() &&
                !first.block_in_norm.empty(),
            ErrorKind::contract, "layer_report: caches must hold the same layer count");
    std::size_t L = first.block_in_norm.size();
    LayerReport rep;
    for (std::size_t l = 1; l <= L; ++l) {
        std::vector<std::size_t> common;
        for (std::size_t tok : first.survivors[l])
            if (second.token_pos(l, tok) != static_cast<std::size_t>(-1))
                common.push_back(tok);
        require(!common.empty(), ErrorKind::degenerate,
                "layer_report: no common surviving tokens at layer " + std::to_string(l));
        Tensor X = detail::common_token_features(first, l, common);
        Tensor Y = detail::common_token_features(second, l, common);
        rep.cka.push_back(linear_cka(X, Y));
        rep.cls_cosine.push_back(cls_cosine(first, second, l));
        rep.residual_ratio.push_back(residual_ratio(second, l));
    }
    rep.validate();
    return rep;
}

} // namespace vitprune
