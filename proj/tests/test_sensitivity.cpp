#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "vitprune/sensitivity.hpp"

using namespace vitprune;

namespace {

ViTConfig small_config() {
    ViTConfig c;
    c.image_size = 16;
    c.patch_size = 8;
    c.channels = 3;
    c.layers = 2;
    c.heads = 2;
    c.hidden_dim = 16;
    c.ffn_dim = 32;
    c.classes = 4;
    return c;
}

Tensor random_batch(Rng& rng, const ViTConfig& c, std::size_t B) {
    Tensor t({B, c.channels, c.image_size, c.image_size});
    for (double& v : t.data) v = rng.normal();
    return t;
}

// Quadratic form z^T H z evaluated from an explicitly materialized Hessian —
// the independent reference the probe-based score must match.
double quad_form(const Tensor& H, const Tensor& z) {
    std::size_t d = z.size();
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double hz = 0.0;
        for (std::size_t j = 0; j < d; ++j) hz += H.at(i, j) * z.data[j];
        s += hz * z.data[i];
    }
    return s;
}

} // namespace

TEST_CASE("token score matches the materialized-Hessian quadratic form") {
    ViTConfig c = small_config();
    ViTModel m = init_model(c, 21);
    Rng rng(2100);
    Tensor batch = random_batch(rng, c, 1);
    auto [logits, cache] = forward(m, batch);

    for (auto [layer, j] : {std::pair<std::size_t, std::size_t>{1, 1}, {1, 3}, {2, 2}}) {
        Tensor toks = cache.sample_tokens(layer, 0);
        Tensor z({c.hidden_dim});
        for (std::size_t col = 0; col < c.hidden_dim; ++col) z.data[col] = toks.at(j, col);
        SiteFn f = [&, layer = layer, j = j](Tape& t, Var zv) {
            return resume_token_loss(t, m, cache, 0, layer, j, zv, 1, 0.0);
        };
        Tensor H = hessian_oracle(f, z);
        double want = quad_form(H, z);
        ComponentRef ref{ComponentKind::token, layer, j};
        double got = score_from_cache(m, cache, 0, ref, 1, 0.0);
        REQUIRE(rel_err(got, want) <= 1e-3);

        // Rayleigh form: S equals ||z||^2 times the quotient along z
        double zz = dot(z, z);
        REQUIRE(zz > 0.0);
        double rho = want / zz;
        REQUIRE(rel_err(got, zz * rho) <= 1e-3);
    }
}

TEST_CASE("head score matches the materialized-Hessian quadratic form") {
    ViTConfig c = small_config();
    ViTModel m = init_model(c, 22);
    Rng rng(2200);
    Tensor batch = random_batch(rng, c, 1);
    auto [logits, cache] = forward(m, batch);

    for (auto [layer, h] : {std::pair<std::size_t, std::size_t>{1, 0}, {2, 1}}) {
        Tensor z = cache.sample_head(layer, 0, h);
        REQUIRE(z.size() == c.tokens() * c.head_dim());  // flattened head output
        SiteFn f = [&, layer = layer, h = h](Tape& t, Var zv) {
            return resume_head_loss(t, m, cache, 0, layer, h, zv, 2, 0.0);
        };
        Tensor H = hessian_oracle(f, z);
        double want = quad_form(H, z);
        ComponentRef ref{ComponentKind::head, layer, h};
        double got = score_from_cache(m, cache, 0, ref, 2, 0.0);
        REQUIRE(rel_err(got, want) <= 1e-3);
    }
}

TEST_CASE("a head with zeroed output-projection rows scores exactly zero") {
    ViTConfig c = small_config();
    ViTModel m = init_model(c, 23);
    std::size_t victim = 1, dk = c.head_dim();
    Tensor& wo = m.param("layer2.attn.wo");
    for (std::size_t r = victim * dk; r < (victim + 1) * dk; ++r)
        for (std::size_t col = 0; col < c.hidden_dim; ++col) wo.at(r, col) = 0.0;
    Rng rng(2300);
    Tensor batch = random_batch(rng, c, 1);
    auto [logits, cache] = forward(m, batch);
    double s = score_from_cache(m, cache, 0, {ComponentKind::head, 2, victim}, 0, 0.0);
    REQUIRE(s == 0.0);
}

TEST_CASE("doubling the loss doubles the score exactly") {
    ViTConfig c = small_config();
    ViTModel m = init_model(c, 24);
    Rng rng(2400);
    Tensor batch = random_batch(rng, c, 1);
    auto [logits, cache] = forward(m, batch);

    ComponentRef ref{ComponentKind::token, 1, 2};
    double s1 = score_from_cache(m, cache, 0, ref, 3, 0.0);

    Tensor toks = cache.sample_tokens(1, 0);
    Tensor z({c.hidden_dim});
    for (std::size_t col = 0; col < c.hidden_dim; ++col) z.data[col] = toks.at(2, col);
    SiteFn doubled = [&](Tape& t, Var zv) {
        return op::scale(resume_token_loss(t, m, cache, 0, 1, 2, zv, 3, 0.0), 2.0);
    };
    double s2 = dot(hvp(doubled, z, z), z);
    REQUIRE(s2 == 2.0 * s1);
}

TEST_CASE("score_all covers the candidate set exactly once per input") {
    ViTConfig c = small_config();
    ViTModel m = init_model(c, 25);
    Rng rng(2500);
    Tensor batch = random_batch(rng, c, 4);
    std::vector<int> labels = {0, 1, 2, 3};
    SensitivityReport rep = score_all(m, batch, labels);

    std::size_t want = c.layers * (c.tokens() - 1) + c.layers * c.heads;
    REQUIRE(rep.refs.size() == want);
    REQUIRE(rep.inputs.size() == 4);
    for (const InputScores& in : rep.inputs) REQUIRE(in.s.size() == want);
    // all refs distinct
    for (std::size_t i = 0; i < rep.refs.size(); ++i)
        for (std::size_t k = i + 1; k < rep.refs.size(); ++k)
            REQUIRE(!(rep.refs[i] == rep.refs[k]));
    REQUIRE(rep.label_mode == "true");

    // batch_avg is the arithmetic mean of per-input scores
    for (std::size_t i = 0; i < rep.refs.size(); ++i) {
        double mean = 0.0;
        for (const InputScores& in : rep.inputs) mean += in.s[i];
        mean /= 4.0;
        REQUIRE(rep.batch_avg[i] == Catch::Approx(mean).margin(1e-15));
    }

    // token_agg recomputed from per-input scores
    for (std::size_t j = 1; j < c.tokens(); ++j) {
        double agg = 0.0;
        for (std::size_t l = 1; l <= c.layers; ++l) {
            std::size_t i = rep.find({ComponentKind::token, l, j});
            REQUIRE(i != SensitivityReport::npos);
            double mean = 0.0;
            for (const InputScores& in : rep.inputs) mean += in.s[i];
            agg += mean / 4.0;
        }
        REQUIRE(rep.token_agg[j - 1] == Catch::Approx(agg).margin(1e-12));
    }
}

TEST_CASE("single and duplicated inputs collapse to the per-input scores") {
    ViTConfig c = small_config();
    ViTModel m = init_model(c, 26);
    Rng rng(2600);
    Tensor one = random_batch(rng, c, 1);
    SensitivityReport r1 = score_all(m, one, {2});
    REQUIRE(r1.inputs.size() == 1);
    for (std::size_t i = 0; i < r1.refs.size(); ++i)
        REQUIRE(r1.batch_avg[i] == r1.inputs[0].s[i]);

    Tensor two({2, c.channels, c.image_size, c.image_size});
    std::memcpy(two.row(0), one.data.data(), one.size() * sizeof(double));
    std::memcpy(two.data.data() + one.size(), one.data.data(), one.size() * sizeof(double));
    SensitivityReport r2 = score_all(m, two, {2, 2});
    for (std::size_t i = 0; i < r2.refs.size(); ++i)
        REQUIRE(r2.batch_avg[i] == r1.batch_avg[i]);
}

TEST_CASE("empty labels switch scoring to the model's own predictions") {
    ViTConfig c = small_config();
    ViTModel m = init_model(c, 27);
    Rng rng(2700);
    Tensor batch = random_batch(rng, c, 3);
    auto [logits, cache] = forward(m, batch);
    std::vector<int> argmax(3);
    for (std::size_t b = 0; b < 3; ++b) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < c.classes; ++k)
            if (logits.at(b, k) > logits.at(b, best)) best = k;
        argmax[b] = static_cast<int>(best);
    }
    SensitivityReport pred = score_all(m, batch, {});
    SensitivityReport expl = score_all(m, batch, argmax);
    REQUIRE(pred.label_mode == "predicted");
    REQUIRE(expl.label_mode == "true");
    for (std::size_t b = 0; b < 3; ++b)
        REQUIRE(pred.inputs[b].s == expl.inputs[b].s);
}

TEST_CASE("scoring is deterministic and thread-count independent") {
    ViTConfig c = small_config();
    ViTModel m = init_model(c, 28);
    Rng rng(2800);
    Tensor batch = random_batch(rng, c, 3);
    std::vector<int> labels = {1, 0, 3};
    SensitivityReport a = score_all(m, batch, labels, 1);
    SensitivityReport b = score_all(m, batch, labels, 1);
    SensitivityReport t2 = score_all(m, batch, labels, 2);
    for (std::size_t i = 0; i < a.refs.size(); ++i) {
        REQUIRE(a.batch_avg[i] == b.batch_avg[i]);
        REQUIRE(a.batch_avg[i] == t2.batch_avg[i]);
    }
    REQUIRE(a.to_json() == b.to_json());
}

TEST_CASE("component_score validates references and labels") {
    ViTConfig c = small_config();
    ViTModel m = init_model(c, 29);
    Rng rng(2900);
    Tensor img({c.channels, c.image_size, c.image_size});
    for (double& v : img.data) v = rng.normal();

    REQUIRE_THROWS_AS(component_score(m, img, 0, {ComponentKind::token, 0, 1}), Error);
    REQUIRE_THROWS_AS(component_score(m, img, 0, {ComponentKind::token, 1, 0}), Error);  // CLS
    REQUIRE_THROWS_AS(component_score(m, img, 0, {ComponentKind::token, 1, c.tokens()}), Error);
    REQUIRE_THROWS_AS(component_score(m, img, 0, {ComponentKind::head, 3, 0}), Error);
    REQUIRE_THROWS_AS(component_score(m, img, 0, {ComponentKind::head, 1, c.heads}), Error);
    REQUIRE_THROWS_AS(component_score(m, img, 99, {ComponentKind::token, 1, 1}), Error);

    double s = component_score(m, img, 1, {ComponentKind::token, 1, 1});
    REQUIRE(std::isfinite(s));
}

TEST_CASE("normalization reproduces hand-computed values") {
    // one layer, three tokens with scores {1,2,3}, two heads with {5,5,5}...
    // heads get a constant pool to exercise the zero-spread rule
    SensitivityReport rep;
    rep.refs = {{ComponentKind::token, 1, 1}, {ComponentKind::token, 1, 2},
                {ComponentKind::token, 1, 3}, {ComponentKind::head, 1, 0},
                {ComponentKind::head, 1, 1}};
    rep.batch_avg = {1.0, 2.0, 3.0, 5.0, 5.0};
    rep.token_agg = {1.0, 2.0, 3.0};
    NormalizedReport nr = normalize(rep);
    REQUIRE(nr.shat[0] == Catch::Approx(-1.224744871391589).margin(1e-12));
    REQUIRE(nr.shat[1] == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(nr.shat[2] == Catch::Approx(+1.224744871391589).margin(1e-12));
    REQUIRE(nr.stats.token[0].stddev == Catch::Approx(0.816496580927726).margin(1e-12));
    REQUIRE(nr.shat[3] == 0.0);  // zero-spread pool
    REQUIRE(nr.shat[4] == 0.0);
    REQUIRE(nr.stats.head[0].stddev == 0.0);
    REQUIRE(nr.token_agg_shat[0] == Catch::Approx(-1.224744871391589).margin(1e-12));
}

TEST_CASE("normalization preserves ranks within each pool") {
    Rng rng(3000);
    SensitivityReport rep;
    for (std::size_t l = 1; l <= 2; ++l) {
        for (std::size_t j = 1; j <= 5; ++j) rep.refs.push_back({ComponentKind::token, l, j});
        for (std::size_t h = 0; h < 3; ++h) rep.refs.push_back({ComponentKind::head, l, h});
    }
    rep.batch_avg.resize(rep.refs.size());
    for (double& v : rep.batch_avg) v = rng.normal() * 10.0;
    rep.token_agg = {0.3, -0.7, 1.9, 0.2, 0.0};

    for (NormScope scope : {NormScope::per_layer_by_kind, NormScope::per_layer_mixed}) {
        NormalizedReport nr = normalize(rep, scope);
        for (std::size_t i = 0; i < rep.refs.size(); ++i)
            for (std::size_t k = 0; k < rep.refs.size(); ++k) {
                if (rep.refs[i].layer != rep.refs[k].layer) continue;
                bool same_pool = scope == NormScope::per_layer_mixed ||
                                 rep.refs[i].kind == rep.refs[k].kind;
                if (!same_pool) continue;
                if (rep.batch_avg[i] < rep.batch_avg[k]) REQUIRE(nr.shat[i] < nr.shat[k]);
            }
    }

    // mixed scope shares one pool per layer: token and head stats coincide
    NormalizedReport mixed = normalize(rep, NormScope::per_layer_mixed);
    REQUIRE(mixed.stats.token[0].mean == mixed.stats.head[0].mean);
    REQUIRE(mixed.stats.token[0].stddev == mixed.stats.head[0].stddev);
}

TEST_CASE("stored statistics re-normalize fresh scores identically") {
    Rng rng(3100);
    SensitivityReport rep;
    for (std::size_t l = 1; l <= 3; ++l) {
        for (std::size_t j = 1; j <= 4; ++j) rep.refs.push_back({ComponentKind::token, l, j});
        for (std::size_t h = 0; h < 2; ++h) rep.refs.push_back({ComponentKind::head, l, h});
    }
    rep.batch_avg.resize(rep.refs.size());
    for (double& v : rep.batch_avg) v = rng.normal();
    rep.token_agg = {0.5, 0.1, -0.2, 0.9};
    NormalizedReport nr = normalize(rep);
    std::vector<double> replay = apply_stats(rep.refs, rep.batch_avg, nr.stats);
    REQUIRE(replay == nr.shat);
    std::vector<double> agg_replay = apply_token_agg_stats(rep.token_agg, nr.stats);
    REQUIRE(agg_replay == nr.token_agg_shat);

    // text round-trip is value-exact
    CalibrationStats st = nr.stats;
    st.policy_text = "mode=percentile tokens=0.2 heads=0.8";
    CalibrationStats back = CalibrationStats::from_text(st.to_text());
    REQUIRE(back.scope == st.scope);
    REQUIRE(back.policy_text == st.policy_text);
    REQUIRE(back.label_mode == st.label_mode);
    for (std::size_t l = 0; l < st.token.size(); ++l) {
        REQUIRE(back.token[l].mean == st.token[l].mean);
        REQUIRE(back.token[l].stddev == st.token[l].stddev);
        REQUIRE(back.head[l].tau == st.head[l].tau);
    }
    REQUIRE(back.token_agg.mean == st.token_agg.mean);
    REQUIRE_THROWS_AS(CalibrationStats::from_text("scope=wat\n"), Error);
}

TEST_CASE("report JSON carries every section") {
    ViTConfig c = small_config();
    ViTModel m = init_model(c, 31);
    Rng rng(3200);
    Tensor batch = random_batch(rng, c, 2);
    SensitivityReport rep = score_all(m, batch, {0, 1});
    std::string js = rep.to_json();
    REQUIRE(js.find("\"inputs\":[") != std::string::npos);
    REQUIRE(js.find("\"batch_avg\":[") != std::string::npos);
    REQUIRE(js.find("\"token_agg\":[") != std::string::npos);
    REQUIRE(js.find("\"label_mode\":\"true\"") != std::string::npos);
    std::size_t kinds = 0;
    for (std::size_t p = js.find("\"kind\""); p != std::string::npos;
         p = js.find("\"kind\"", p + 1))
        ++kinds;
    REQUIRE(kinds == (rep.inputs.size() + 1) * rep.refs.size());
}
