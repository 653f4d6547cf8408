#pragma once

// Desk-scale image datasets. The synthetic generator encodes class identity
// in the *relative placement* of two colored Gaussian blobs: an anchor blob
// lands anywhere on the image (positions wrap around the edges, so the
// canvas is a torus) and a second blob sits at a fixed radius in a
// class-specific direction. The wrap-around makes each blob's positional
// marginal exactly uniform for every class, so per-pixel linear models have
// no template signal and must guess, while an attention model can read off
// the relative offset. A class-independent brightness window additionally
// dims blobs rendered near the canvas corners (mimicking the center bias of
// natural photographs): corner regions then carry genuinely less class
// information than central ones — giving importance-ranked token pruning
// real slack — while class-conditional pixel means stay position-uniform,
// so the linear probe stays blind. The directory form is an index file
// (`label<TAB>relative-path`) plus one tensor container per sample.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "vitprune/checkpoint.hpp"
#include "vitprune/tensor.hpp"

namespace vitprune {

struct DatasetSpec {
    enum class Source { synthetic, directory };
    Source source = Source::synthetic;
    std::size_t classes = 8;
    std::size_t per_class = 64;
    std::size_t image_size = 32;
    std::size_t channels = 3;
    std::uint64_t seed = 0;
    std::string path;  // directory source only

    void validate() const {
        if (source == Source::synthetic) {
            require(classes >= 2 && per_class >= 1, ErrorKind::config,
                    "dataset: need at least 2 classes and 1 sample per class");
            require(channels == 3, ErrorKind::config,
                    "dataset: the synthetic generator renders 3-channel images");
            require(image_size >= 16, ErrorKind::config,
                    "dataset: synthetic images need image_size >= 16");
        } else {
            require(!path.empty(), ErrorKind::config,
                    "dataset: directory source needs a path");
        }
    }
};

struct Dataset {
    std::size_t image_size = 0;
    std::size_t channels = 0;
    std::size_t classes = 0;
    std::vector<Tensor> images;  // each (channels, image_size, image_size)
    std::vector<int> labels;

    std::size_t size() const { return images.size(); }

    void validate() const {
        require(!images.empty() && images.size() == labels.size(), ErrorKind::data,
                "dataset: images and labels must be non-empty and aligned");
        for (const Tensor& img : images)
            require(img.rank() == 3 && img.dim(0) == channels && img.dim(1) == image_size &&
                        img.dim(2) == image_size,
                    ErrorKind::data, "dataset: sample shape mismatch " + img.shape_str());
        for (int l : labels)
            require(l >= 0 && static_cast<std::size_t>(l) < classes, ErrorKind::data,
                    "dataset: label out of range");
    }

    // Stacks the chosen samples into a (B, C, S, S) batch.
    Tensor batch(const std::vector<std::size_t>& idx) const {
        require(!idx.empty(), ErrorKind::contract, "dataset: empty batch request");
        Tensor out({idx.size(), channels, image_size, image_size});
        std::size_t stride = channels * image_size * image_size;
        for (std::size_t b = 0; b < idx.size(); ++b) {
            require(idx[b] < images.size(), ErrorKind::contract,
                    "dataset: batch index out of range");
            std::copy(images[idx[b]].data.begin(), images[idx[b]].data.end(),
                      out.data.begin() + static_cast<std::ptrdiff_t>(b * stride));
        }
        return out;
    }

    std::vector<int> batch_labels(const std::vector<std::size_t>& idx) const {
        std::vector<int> out(idx.size());
        for (std::size_t b = 0; b < idx.size(); ++b) out[b] = labels.at(idx[b]);
        return out;
    }
};

namespace detail {

// Shortest distance between two coordinates on a circle of circumference S.
inline double torus_dist(double a, double b, double S) {
    double d = std::fabs(a - b);
    d = std::fmod(d, S);
    return std::min(d, S - d);
}

// Brightness multiplier for a blob centered at (x, y): 1.0 at the canvas
// center falling to `lo` at the corners. sin^2(pi*u/S) has period S, so the
// window is continuous across the wrap-around seam and accepts unwrapped
// coordinates directly.
inline double brightness_window(double x, double y, double S, double lo) {
    double sx = std::sin(std::numbers::pi * x / S);
    double sy = std::sin(std::numbers::pi * y / S);
    return lo + (1.0 - lo) * 0.5 * (sx * sx + sy * sy);
}

} // namespace detail

// Deterministic two-blob renderer. Classes differ only in the direction of
// the second blob relative to the first; anchor position (uniform over the
// toroidal canvas), blob amplitudes and pixel noise are randomized per
// sample. Per-sample draw order: anchor x, anchor y, amplitude a, amplitude
// b, then per-pixel noise in channel-major order.
inline Dataset generate_synthetic(const DatasetSpec& spec) {
    spec.validate();
    require(spec.source == DatasetSpec::Source::synthetic, ErrorKind::contract,
            "generate_synthetic: spec must be a synthetic source");
    const std::size_t S = spec.image_size;
    const double Sd = static_cast<double>(S);
    const double radius = 0.21875 * Sd;
    const double sigma = Sd / 8.0;
    const double noise_std = 0.15;
    const double window_lo = 0.5;
    const double color_a[3] = {1.0, 0.35, 0.15};
    const double color_b[3] = {0.15, 0.35, 1.0};

    Dataset ds;
    ds.image_size = S;
    ds.channels = spec.channels;
    ds.classes = spec.classes;
    Rng rng(spec.seed);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        double theta = 2.0 * std::numbers::pi * static_cast<double>(c) /
                       static_cast<double>(spec.classes);
        double ox = radius * std::cos(theta);
        double oy = radius * std::sin(theta);
        for (std::size_t i = 0; i < spec.per_class; ++i) {
            double ax = rng.uniform(0.0, Sd);
            double ay = rng.uniform(0.0, Sd);
            double amp_a = rng.uniform(0.7, 1.3);
            double amp_b = rng.uniform(0.7, 1.3);
            double bx = ax + ox, by = ay + oy;
            amp_a *= detail::brightness_window(ax, ay, Sd, window_lo);
            amp_b *= detail::brightness_window(bx, by, Sd, window_lo);
            Tensor img = Tensor::zeros({spec.channels, S, S});
            for (std::size_t ch = 0; ch < spec.channels; ++ch)
                for (std::size_t y = 0; y < S; ++y)
                    for (std::size_t x = 0; x < S; ++x) {
                        double xd = static_cast<double>(x), yd = static_cast<double>(y);
                        double dxa = detail::torus_dist(xd, ax, Sd);
                        double dya = detail::torus_dist(yd, ay, Sd);
                        double dxb = detail::torus_dist(xd, bx, Sd);
                        double dyb = detail::torus_dist(yd, by, Sd);
                        double v = amp_a * color_a[ch] *
                                       std::exp(-(dxa * dxa + dya * dya) /
                                                (2.0 * sigma * sigma)) +
                                   amp_b * color_b[ch] *
                                       std::exp(-(dxb * dxb + dyb * dyb) /
                                                (2.0 * sigma * sigma)) +
                                   rng.normal(0.0, noise_std);
                        img.data[(ch * S + y) * S + x] = v;
                    }
            ds.images.push_back(std::move(img));
            ds.labels.push_back(static_cast<int>(c));
        }
    }
    return ds;
}

// --- directory form ---------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    ds.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "samples", ec);
    require(!ec, ErrorKind::io, "dataset: cannot create '" + dir + "': " + ec.message());
    std::string index;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        char rel[32];
        std::snprintf(rel, sizeof(rel), "samples/%05zu.rec", i);
        container::write_file((fs::path(dir) / rel).string(), "kind=sample\n",
                              {{"image", ds.images[i]}});
        index += std::to_string(ds.labels[i]);
        index += '\t';
        index += rel;
        index += '\n';
    }
    atomic_write_text((fs::path(dir) / "index.tsv").string(), index);
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::string index = read_text_file((fs::path(dir) / "index.tsv").string());
    Dataset ds;
    std::size_t pos = 0, line_no = 0;
    while (pos < index.size()) {
        std::size_t end = index.find('\n', pos);
        if (end == std::string::npos) end = index.size();
        std::string line = index.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.empty()) continue;
        std::size_t tab = line.find('\t');
        require(tab != std::string::npos && tab > 0 && tab + 1 < line.size(),
                ErrorKind::format,
                "dataset index line " + std::to_string(line_no) +
                    ": expected 'label<TAB>path', got '" + line + "'");
        int label = 0;
        try {
            label = std::stoi(line.substr(0, tab));
        } catch (const std::exception&) {
            fail(ErrorKind::format, "dataset index line " + std::to_string(line_no) +
                                        ": bad label '" + line.substr(0, tab) + "'");
        }
        require(label >= 0, ErrorKind::format,
                "dataset index line " + std::to_string(line_no) + ": negative label");
        container::File f =
            container::read_file((fs::path(dir) / line.substr(tab + 1)).string());
        const container::Record* rec = f.find("image");
        require(rec != nullptr, ErrorKind::format,
                "dataset sample '" + line.substr(tab + 1) + "' has no image record");
        require(rec->tensor.rank() == 3, ErrorKind::format,
                "dataset sample '" + line.substr(tab + 1) + "' image must be rank 3, got " +
                    rec->tensor.shape_str());
        ds.images.push_back(rec->tensor);
        ds.labels.push_back(label);
    }
    require(!ds.images.empty(), ErrorKind::data, "dataset '" + dir + "' is empty");
    ds.channels = ds.images[0].dim(0);
    ds.image_size = ds.images[0].dim(1);
    ds.classes = static_cast<std::size_t>(
                     *std::max_element(ds.labels.begin(), ds.labels.end())) + 1;
    ds.validate();
    return ds;
}

inline Dataset make_dataset(const DatasetSpec& spec) {
    spec.validate();
    return spec.source == DatasetSpec::Source::synthetic ? generate_synthetic(spec)
                                                         : load_dataset(spec.path);
}

// --- splits and baselines ---------------------------------------------------

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

// Per class, the last floor(val_fraction * count) samples (in dataset order)
// become validation; everything else trains. Deterministic.
inline Split stratified_split(const Dataset& ds, double val_fraction) {
    require(val_fraction >= 0.0 && val_fraction < 1.0, ErrorKind::contract,
            "split: val_fraction must lie in [0,1)");
    std::vector<std::vector<std::size_t>> per_class(ds.classes);
    for (std::size_t i = 0; i < ds.size(); ++i)
        per_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    Split sp;
    for (const auto& members : per_class) {
        std::size_t v = static_cast<std::size_t>(
            val_fraction * static_cast<double>(members.size()));
        for (std::size_t k = 0; k < members.size(); ++k)
            (k + v < members.size() ? sp.train : sp.val).push_back(members[k]);
    }
    std::sort(sp.train.begin(), sp.train.end());
    std::sort(sp.val.begin(), sp.val.end());
    return sp;
}

// Multinomial logistic regression on raw pixels, full-batch Adam; returns
// held-out accuracy. The synthetic classes are built to keep this weak.
inline double linear_probe_accuracy(const Dataset& ds, double val_fraction,
                                    std::size_t epochs = 150) {
    ds.validate();
    Split sp = stratified_split(ds, val_fraction);
    require(!sp.train.empty() && !sp.val.empty(), ErrorKind::contract,
            "probe: both splits must be non-empty");
    std::size_t feat = ds.channels * ds.image_size * ds.image_size;
    std::size_t K = ds.classes;
    std::vector<double> w(feat * K, 0.0), b(K, 0.0);
    std::vector<double> mw(w.size(), 0.0), vw(w.size(), 0.0);
    std::vector<double> mb(K, 0.0), vb(K, 0.0);
    const double lr = 0.01, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    std::vector<double> logits(K), prob(K);
    auto scores = [&](std::size_t i) {
        const double* x = ds.images[i].data.data();
        for (std::size_t k = 0; k < K; ++k) logits[k] = b[k];
        for (std::size_t f = 0; f < feat; ++f) {
            const double xv = x[f];
            const double* wr = &w[f * K];
            for (std::size_t k = 0; k < K; ++k) logits[k] += xv * wr[k];
        }
    };

    for (std::size_t e = 1; e <= epochs; ++e) {
        std::vector<double> gw(w.size(), 0.0), gb(K, 0.0);
        for (std::size_t i : sp.train) {
            scores(i);
            double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (std::size_t k = 0; k < K; ++k) z += std::exp(logits[k] - mx);
            for (std::size_t k = 0; k < K; ++k) prob[k] = std::exp(logits[k] - mx) / z;
            prob[static_cast<std::size_t>(ds.labels[i])] -= 1.0;
            const double* x = ds.images[i].data.data();
            for (std::size_t f = 0; f < feat; ++f) {
                const double xv = x[f];
                if (xv == 0.0) continue;
                double* gr = &gw[f * K];
                for (std::size_t k = 0; k < K; ++k) gr[k] += xv * prob[k];
            }
            for (std::size_t k = 0; k < K; ++k) gb[k] += prob[k];
        }
        double inv = 1.0 / static_cast<double>(sp.train.size());
        double c1 = 1.0 - std::pow(beta1, static_cast<double>(e));
        double c2 = 1.0 - std::pow(beta2, static_cast<double>(e));
        auto adam = [&](std::vector<double>& p, std::vector<double>& m,
                        std::vector<double>& v, const std::vector<double>& g) {
            for (std::size_t j = 0; j < p.size(); ++j) {
                double gj = g[j] * inv;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
            }
        };
        adam(w, mw, vw, gw);
        adam(b, mb, vb, gb);
    }

    std::size_t correct = 0;
    for (std::size_t i : sp.val) {
        scores(i);
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k)
            if (logits[k] > logits[best]) best = k;
        if (static_cast<int>(best) == ds.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(sp.val.size());
}

} // namespace vitprune
