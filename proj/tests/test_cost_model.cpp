#include <catch2/catch_amalgamated.hpp>

#include "vitprune/cost_model.hpp"

using namespace vitprune;

TEST_CASE("dense large-geometry layer cost matches integer arithmetic") {
    ViTConfig c = vit_b16_config();
    REQUIRE(c.tokens() == 197);
    LayerCost lc = layer_cost(197, 768, 12, 64, 3072, 1.0, 1.0, CostMode::masked_heads);

    // independent integer recomputation of the closed form
    std::uint64_t n = 197, d = 768, dff = 3072;
    std::uint64_t qkv = 3 * n * d * d;
    std::uint64_t logits = n * n * d;
    std::uint64_t values = n * n * d;
    std::uint64_t proj = n * d * d;
    std::uint64_t ffn = 2 * n * d * dff;
    REQUIRE(lc.qkv == qkv);
    REQUIRE(lc.attn_logits == logits);
    REQUIRE(lc.attn_values == values);
    REQUIRE(lc.out_proj == proj);
    REQUIRE(lc.ffn == ffn);
    REQUIRE(lc.total() == qkv + logits + values + proj + ffn);
    REQUIRE(lc.total() == 1453954560ULL);  // rounds to 1.454 G-MAC
}

TEST_CASE("dense large-geometry model lands on the published total") {
    CostReport r = model_cost(vit_b16_config(), 1.0, 1.0, CostMode::masked_heads);
    REQUIRE(r.patch_embed == 196ULL * 768 * 768);
    REQUIRE(r.classifier == 768ULL * 1000);
    REQUIRE(r.total == 12ULL * 1453954560ULL + r.patch_embed + r.classifier);
    double gigs = static_cast<double>(r.total) / 1e9;
    REQUIRE(gigs == Catch::Approx(17.6).epsilon(0.02));
}

TEST_CASE("masked-mode symmetric grid tracks the published reductions") {
    // published totals for symmetric pruning at 20/40/50/60/80 percent
    const double published[5] = {13.45, 10.14, 8.52, 6.83, 3.51};
    const double ratios[5] = {20, 40, 50, 60, 80};
    ViTConfig c = vit_b16_config();
    std::vector<std::pair<double, double>> grid;
    for (double v : ratios) grid.emplace_back(v, v);
    std::vector<GridRow> rows = reduction_table(c, grid, CostMode::masked_heads);
    REQUIRE(rows.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        double gigs = static_cast<double>(rows[i].report.total) / 1e9;
        INFO("row " << ratios[i] << "%: " << gigs << " vs " << published[i]);
        REQUIRE(std::fabs(gigs - published[i]) / published[i] <= 0.05);
    }
}

TEST_CASE("masked mode ignores the head ratio exactly") {
    ViTConfig c = vit_b16_config();
    CostReport sym = model_cost(c, 0.8, 0.8, CostMode::masked_heads);
    CostReport asym = model_cost(c, 0.8, 0.2, CostMode::masked_heads);
    REQUIRE(sym.total == asym.total);

    // alpha = 1 rows reduce by exactly zero regardless of beta
    std::vector<GridRow> rows =
        reduction_table(c, {{0.0, 0.0}, {0.0, 50.0}, {0.0, 80.0}}, CostMode::masked_heads);
    for (const GridRow& r : rows) REQUIRE(r.reduction_pct == 0.0);
}

TEST_CASE("identity fractions make both modes agree exactly") {
    ViTConfig c = vit_b16_config();
    REQUIRE(model_cost(c, 1.0, 1.0, CostMode::masked_heads).total ==
            model_cost(c, 1.0, 1.0, CostMode::compact_heads).total);
}

TEST_CASE("halving the surviving tokens scales each term by its power") {
    // n' = 32 versus n' = 16 on a 33-token geometry
    LayerCost big = layer_cost(33, 64, 4, 16, 256, 31.0 / 32.0, 1.0, CostMode::compact_heads);
    LayerCost small = layer_cost(33, 64, 4, 16, 256, 15.0 / 32.0, 1.0, CostMode::compact_heads);
    REQUIRE(big.attn_logits == 4 * small.attn_logits);
    REQUIRE(big.attn_values == 4 * small.attn_values);
    REQUIRE(big.qkv == 2 * small.qkv);
    REQUIRE(big.out_proj == 2 * small.out_proj);
    REQUIRE(big.ffn == 2 * small.ffn);
}

TEST_CASE("compact mode saves at least as much as masked mode") {
    ViTConfig c = vit_b16_config();
    std::vector<std::pair<double, double>> grid = {
        {0, 0}, {20, 20}, {20, 80}, {50, 50}, {80, 20}, {80, 80}};
    std::vector<GridRow> masked = reduction_table(c, grid, CostMode::masked_heads);
    std::vector<GridRow> compact = reduction_table(c, grid, CostMode::compact_heads);
    for (std::size_t i = 0; i < masked.size(); ++i)
        REQUIRE(compact[i].reduction_pct >= masked[i].reduction_pct);
}

TEST_CASE("rows come back sorted by token ratio then head ratio") {
    ViTConfig c = vit_b16_config();
    std::vector<GridRow> rows = reduction_table(
        c, {{50, 20}, {20, 80}, {20, 20}, {50, 0}}, CostMode::compact_heads);
    REQUIRE(rows[0].tokens_pruned_pct == 20);
    REQUIRE(rows[0].heads_pruned_pct == 20);
    REQUIRE(rows[1].heads_pruned_pct == 80);
    REQUIRE(rows[2].tokens_pruned_pct == 50);
    REQUIRE(rows[2].heads_pruned_pct == 0);
    REQUIRE(rows[3].heads_pruned_pct == 20);
}

TEST_CASE("continuous cost is an exact quadratic in the token fraction") {
    ViTConfig c = vit_b16_config();
    double a0 = 1.0, a1 = 0.6, a2 = 0.2;
    double f0 = continuous_model_cost(c, a0, 1.0);
    double f1 = continuous_model_cost(c, a1, 1.0);
    double f2 = continuous_model_cost(c, a2, 1.0);
    double d01 = (f0 - f1) / (a0 - a1);
    double d12 = (f1 - f2) / (a1 - a2);
    double coeff = (d01 - d12) / (a0 - a2);
    double expected = 2.0 * 12.0 * 196.0 * 196.0 * 768.0;
    REQUIRE(std::fabs(coeff - expected) / expected <= 1e-9);
}

TEST_CASE("continuous cost is exactly linear in the head fraction") {
    ViTConfig c = vit_b16_config();
    double g25 = continuous_model_cost(c, 1.0, 0.25);
    double g50 = continuous_model_cost(c, 1.0, 0.5);
    double g75 = continuous_model_cost(c, 1.0, 0.75);
    REQUIRE(g25 + g75 - 2.0 * g50 == 0.0);
}

TEST_CASE("token reduction outweighs head reduction at the dense point") {
    ViTConfig c = vit_b16_config();
    double h = 1e-6;
    double dalpha = (continuous_model_cost(c, 1.0, 1.0) -
                     continuous_model_cost(c, 1.0 - h, 1.0)) / h;
    double dbeta = (continuous_model_cost(c, 1.0, 1.0) -
                    continuous_model_cost(c, 1.0, 1.0 - h)) / h;
    REQUIRE(dalpha > dbeta);
    // the gap is at least the FFN share of the layer cost
    CostReport dense = model_cost(c, 1.0, 1.0, CostMode::masked_heads);
    double ffn_share = static_cast<double>(dense.per_layer.ffn) /
                       static_cast<double>(dense.per_layer.total());
    REQUIRE(ffn_share > 0.60);
    REQUIRE((dalpha - dbeta) / dalpha >= ffn_share - 0.02);
}

TEST_CASE("invalid fractions and geometries are rejected") {
    ViTConfig c = vit_b16_config();
    REQUIRE_THROWS_AS(model_cost(c, 0.0, 1.0, CostMode::masked_heads), Error);
    REQUIRE_THROWS_AS(model_cost(c, 1.5, 1.0, CostMode::masked_heads), Error);
    REQUIRE_THROWS_AS(model_cost(c, 1.0, -0.5, CostMode::compact_heads), Error);
    REQUIRE_THROWS_AS(layer_cost(197, 768, 12, 32, 3072, 1.0, 1.0, CostMode::masked_heads),
                      Error);
    try {
        model_cost(c, 1.0, 0.0, CostMode::compact_heads);
        FAIL("expected an error");
    } catch (const Error& e) {
        REQUIRE(e.kind() == ErrorKind::degenerate);
    }
    REQUIRE_THROWS_AS(reduction_table(c, {}, CostMode::masked_heads), Error);
    REQUIRE_THROWS_AS(reduction_table(c, {{100.0, 0.0}}, CostMode::masked_heads), Error);
}

TEST_CASE("surviving token counts round at the midpoint") {
    REQUIRE(kept_tokens(197, 1.0) == 197);
    REQUIRE(kept_tokens(197, 0.8) == 158);  // 1 + round(156.8)
    REQUIRE(kept_tokens(197, 0.5) == 99);   // 1 + round(98)
    REQUIRE(kept_tokens(17, 0.5) == 9);     // 1 + round(8)
}

TEST_CASE("grid text parses symmetric and explicit pairs") {
    auto sym = parse_grid("sym:20,40,80");
    REQUIRE(sym.size() == 3);
    REQUIRE(sym[0] == std::make_pair(20.0, 20.0));
    REQUIRE(sym[2] == std::make_pair(80.0, 80.0));
    auto asym = parse_grid("asym:20/80,40/60");
    REQUIRE(asym.size() == 2);
    REQUIRE(asym[0] == std::make_pair(20.0, 80.0));
    REQUIRE(asym[1] == std::make_pair(40.0, 60.0));
    REQUIRE_THROWS_AS(parse_grid("20,40"), Error);
    REQUIRE_THROWS_AS(parse_grid("diag:20"), Error);
    REQUIRE_THROWS_AS(parse_grid("asym:20"), Error);
    REQUIRE_THROWS_AS(parse_grid("sym:"), Error);
    REQUIRE_THROWS_AS(parse_grid("sym:20,,40"), Error);
    REQUIRE_THROWS_AS(parse_grid("sym:abc"), Error);
}

TEST_CASE("reduction CSV uses the documented row layout") {
    ViTConfig c = vit_b16_config();
    std::vector<GridRow> rows =
        reduction_table(c, {{0, 0}, {20, 80}}, CostMode::masked_heads);
    std::string csv = reduction_csv(rows);
    REQUIRE(csv.rfind("tokens_pruned,heads_pruned,mode,flops,reduction_pct\n", 0) == 0);
    REQUIRE(csv.find("\n0,0,masked,17563828224,0.00\n") != std::string::npos);
    REQUIRE(csv.find("\n20,80,masked,") != std::string::npos);
    // two data rows plus header
    std::size_t lines = 0;
    for (char ch : csv)
        if (ch == '\n') ++lines;
    REQUIRE(lines == 3);
}

TEST_CASE("cost mode names parse and print") {
    REQUIRE(parse_cost_mode("masked") == CostMode::masked_heads);
    REQUIRE(parse_cost_mode("compact") == CostMode::compact_heads);
    REQUIRE(std::string(to_string(CostMode::masked_heads)) == "masked");
    REQUIRE_THROWS_AS(parse_cost_mode("sparse"), Error);
}
