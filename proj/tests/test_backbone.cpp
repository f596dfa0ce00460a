#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "drpoint/model.hpp"

using namespace drpoint;

namespace {

PointCloud random_cloud(std::uint64_t seed, Index n) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(-1, 1);
    Points p(n, 3);
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = u(gen);
    return PointCloud(p);
}

BackboneConfig tiny_config() {
    BackboneConfig c;
    c.encoder = EncoderConfig{2, 8, 2, 2, 0.0};
    c.num_groups = 8;
    c.group_size = 4;
    c.embed_hidden = 6;
    c.codebook_size = 5;
    c.image_size = 16;
    c.image_width = 2;
    return c;
}

double sq(const Eigen::RowVector3d& v) { return v.squaredNorm(); }

}  // namespace

TEST(Fps, CollinearExample) {
    const PointCloud c{{0, 0, 0}, {1, 0, 0}, {10, 0, 0}};
    EXPECT_EQ(fps_from(c, 2, 0), (std::vector<Index>{0, 2}));
}

TEST(Fps, ExhaustionAndErrors) {
    const PointCloud c = random_cloud(1, 12);
    std::vector<Index> all = fps(c, 12, 7);
    std::sort(all.begin(), all.end());
    std::vector<Index> ref(12);
    std::iota(ref.begin(), ref.end(), 0);
    EXPECT_EQ(all, ref);
    EXPECT_THROW(fps(c, 13, 7), DomainError);
    EXPECT_THROW(fps(c, 0, 7), DomainError);
}

TEST(Fps, TiesGoToLowestIndex) {
    const PointCloud c{{0, 0, 0}, {-1, 0, 0}, {1, 0, 0}};
    EXPECT_EQ(fps_from(c, 2, 0), (std::vector<Index>{0, 1}));
}

TEST(Fps, MaxMinPropertyAgainstBruteForce) {
    const PointCloud c = random_cloud(2, 60);
    const std::vector<Index> sel = fps(c, 16, 3);
    for (std::size_t s = 1; s < sel.size(); ++s) {
        // the chosen point must have the largest distance to the already-selected set
        auto gap = [&](Index i) {
            double m = INFINITY;
            for (std::size_t j = 0; j < s; ++j) m = std::min(m, sq(c.xyz.row(i) - c.xyz.row(sel[j])));
            return m;
        };
        double best = -1;
        for (Index i = 0; i < c.count(); ++i) best = std::max(best, gap(i));
        EXPECT_EQ(gap(sel[s]), best);
    }
}

TEST(Fps, Deterministic) {
    const PointCloud c = random_cloud(3, 100);
    EXPECT_EQ(fps(c, 20, 99), fps(c, 20, 99));
}

TEST(Knn, MatchesSortedDistances) {
    const PointCloud c = random_cloud(4, 50);
    const GroupedTokens g = group_cloud(c, 6, 7, 5);
    ASSERT_EQ(g.groups.rows(), 42);
    for (Index gi = 0; gi < 6; ++gi) {
        std::vector<std::pair<double, Index>> d;
        for (Index i = 0; i < c.count(); ++i) d.push_back({sq(c.xyz.row(i) - g.centers.row(gi)), i});
        std::sort(d.begin(), d.end());
        for (Index j = 0; j < 7; ++j) {
            EXPECT_EQ(g.indices[gi * 7 + j], d[j].second);
            EXPECT_EQ(g.groups.row(gi * 7 + j), c.xyz.row(d[j].second) - g.centers.row(gi));
        }
        // every center is a cloud point, so the first offset is zero
        EXPECT_EQ(g.groups.row(gi * 7).norm(), 0.0);
    }
}

TEST(Knn, SingleNeighbour) {
    const PointCloud c{{0, 0, 0}, {1, 0, 0}, {5, 0, 0}};
    Points centers(1, 3);
    centers << 4, 0, 0;
    const GroupedTokens g = knn_group(c, centers, 1);
    EXPECT_EQ(g.indices[0], 2);
    EXPECT_THROW(knn_group(c, centers, 4), DomainError);
}

TEST(Knn, DefaultShape) {
    const GroupedTokens g = group_cloud(random_cloud(5, 1024), 64, 32, 0);
    EXPECT_EQ(g.num_groups(), 64);
    EXPECT_EQ(g.groups.rows(), 64 * 32);
    EXPECT_EQ(g.groups.cols(), 3);
}

TEST(Mask, Examples) {
    EXPECT_TRUE(mask_tokens(64, 0.0, 1).masked.empty());
    const TokenMask m = mask_tokens(64, 0.6, 1);
    EXPECT_EQ(m.masked.size(), 38u);
    EXPECT_EQ(m.visible.size(), 26u);
    const TokenMask again = mask_tokens(64, 0.6, 1);
    EXPECT_EQ(m.masked, again.masked);
    EXPECT_THROW(mask_tokens(64, 1.0, 1), DomainError);
    EXPECT_THROW(mask_tokens(64, -0.1, 1), DomainError);
}

TEST(Mask, PartitionProperty) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const Index G = 1 + Index(seed * 7 % 80);
        const double ratio = double(seed % 10) / 10.0;
        const TokenMask m = mask_tokens(G, ratio, seed);
        EXPECT_EQ(Index(m.masked.size()), Index(std::floor(ratio * double(G) + 1e-9)));
        std::set<Index> all(m.masked.begin(), m.masked.end());
        for (Index v : m.visible) EXPECT_TRUE(all.insert(v).second);
        EXPECT_EQ(Index(all.size()), G);
        EXPECT_EQ(*all.begin(), 0);
        EXPECT_EQ(*all.rbegin(), G - 1);
    }
}

TEST(Codebook, TokenizeExamples) {
    Mat cw(6, 1);
    cw << 0, 1, 2, 3, 4, 5;
    const Codebook cb{cw};
    EXPECT_EQ(tokenize(cw, cb), (std::vector<int>{0, 1, 2, 3, 4, 5}));
    // a feature equidistant from codewords 2 and 5
    Mat only(6, 2);
    only.setConstant(9);
    only.row(2) << 0.5, 0;
    only.row(5) << 0.5, 0;
    Mat mid(1, 2);
    mid << 0.5, 0;
    EXPECT_EQ(tokenize(mid, Codebook{only})[0], 2);
}

TEST(Codebook, HandKMeansStep) {
    Mat f(2, 1);
    f << 0, 10;
    Mat init(2, 1);
    init << 1, 9;
    const Codebook cb = fit_codebook_from(f, init, 1);
    EXPECT_EQ(cb.codewords(0, 0), 0.0);
    EXPECT_EQ(cb.codewords(1, 0), 10.0);
}

TEST(Codebook, FitErrorsAndIdempotence) {
    std::mt19937_64 gen(6);
    std::normal_distribution<double> nd;
    Mat f(40, 3);
    for (Index i = 0; i < f.size(); ++i) f.data()[i] = nd(gen);
    EXPECT_THROW(fit_codebook(f.topRows(3), 4, 0), DomainError);
    const Codebook cb = fit_codebook(f, 6, 0);
    EXPECT_EQ(cb.size(), 6);
    std::vector<int> ids = tokenize(cb.codewords, cb);
    for (int v = 0; v < 6; ++v) EXPECT_EQ(ids[v], v);
    EXPECT_EQ(fit_codebook(f, 6, 0).codewords, cb.codewords);
}

TEST(Embed, PermutationInvariantWithinGroups) {
    const BackboneConfig cfg = tiny_config();
    const ParamStore ps = init_model(cfg, 1);
    const GroupedTokens g = group_cloud(random_cloud(7, 64), 8, 4, 2);
    GroupedTokens shuffled = g;
    for (Index gi = 0; gi < 8; ++gi) {
        shuffled.groups.row(gi * 4) = g.groups.row(gi * 4 + 3);
        shuffled.groups.row(gi * 4 + 3) = g.groups.row(gi * 4);
        shuffled.groups.row(gi * 4 + 1) = g.groups.row(gi * 4 + 2);
        shuffled.groups.row(gi * 4 + 2) = g.groups.row(gi * 4 + 1);
    }
    Tape t;
    const Mat a = embed_groups(t, ps, g).value(), b = embed_groups(t, ps, shuffled).value();
    EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(a.rows(), 8);
    EXPECT_EQ(a.cols(), 8);
}

TEST(Embed, IdenticalGroupsIdenticalFeatures) {
    const BackboneConfig cfg = tiny_config();
    const ParamStore ps = init_model(cfg, 2);
    GroupedTokens g = group_cloud(random_cloud(8, 40), 2, 4, 0);
    g.groups.middleRows(4, 4) = g.groups.middleRows(0, 4);
    Tape t;
    const Mat f = local_group_features(t, ps, g).value();
    EXPECT_EQ(f.row(0), f.row(1));
}

TEST(Embed, DefaultWidth) {
    const BackboneConfig cfg;
    Rng rng(0, Stream::Init);
    ParamStore ps;
    init_group_embedder(ps, cfg, rng);
    Tape t;
    const Mat f = embed_groups(t, ps, group_cloud(random_cloud(9, 1024), 64, 32, 0)).value();
    EXPECT_EQ(f.rows(), 64);
    EXPECT_EQ(f.cols(), 384);
}

TEST(Encoder, IdentityWithZeroOutputProjections) {
    const EncoderConfig cfg{3, 8, 2, 2, 0.0};
    Rng rng(3, Stream::Init);
    ParamStore ps;
    init_encoder(ps, cfg, rng);
    for (int l = 0; l < cfg.layers; ++l)
        for (const char* n : {".attn.o.w", ".attn.o.b", ".ffn.fc2.w", ".ffn.fc2.b"})
            ps.at("encoder.block" + std::to_string(l) + n).setZero();
    std::mt19937_64 gen(1);
    std::normal_distribution<double> nd;
    Mat x(5, 8);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = nd(gen);
    Tape t;
    EXPECT_EQ(encode(t, ps, t.constant(x), cfg).value(), x);
}

TEST(Encoder, TrainEqualsEvalWithoutDropPath) {
    const EncoderConfig cfg{2, 8, 2, 2, 0.0};
    Rng rng(4, Stream::Init);
    ParamStore ps;
    init_encoder(ps, cfg, rng);
    Mat x = Mat::Random(6, 8);
    Tape t;
    Rng drop(5, Stream::DropPath);
    const Mat eval = encode(t, ps, t.constant(x), cfg).value();
    const Mat train = encode(t, ps, t.constant(x), cfg, &drop).value();
    EXPECT_EQ(std::memcmp(eval.data(), train.data(), sizeof(double) * eval.size()), 0);
}

TEST(Encoder, DropPathChangesTrainOutput) {
    const EncoderConfig cfg{4, 8, 2, 2, 0.9};
    Rng rng(4, Stream::Init);
    ParamStore ps;
    init_encoder(ps, cfg, rng);
    const Mat x = Mat::Random(6, 8);
    Tape t;
    Rng drop(5, Stream::DropPath);
    const Mat eval = encode(t, ps, t.constant(x), cfg).value();
    EXPECT_EQ(encode(t, ps, t.constant(x), cfg).value(), eval);
    EXPECT_NE(encode(t, ps, t.constant(x), cfg, &drop).value(), eval);
}

TEST(Encoder, DefaultShapeAndWidthCheck) {
    const EncoderConfig cfg;
    EXPECT_EQ(cfg.layers, 12);
    EXPECT_EQ(cfg.dim, 384);
    EXPECT_EQ(cfg.heads, 6);
    EXPECT_DOUBLE_EQ(cfg.droppath_rate, 0.1);
    Rng rng(0, Stream::Init);
    ParamStore ps;
    init_encoder(ps, cfg, rng);
    Tape t;
    const Var y = encode(t, ps, t.constant(Mat::Random(65, 384)), cfg);
    EXPECT_EQ(y.rows(), 65);
    EXPECT_EQ(y.cols(), 384);
    EXPECT_THROW(encode(t, ps, t.constant(Mat::Zero(65, 100)), cfg), DomainError);
}

TEST(Decoder, ShapesUnderDefaults) {
    const BackboneConfig cfg;
    EXPECT_EQ(cfg.token_decoder_blocks, 1);
    EXPECT_EQ(cfg.point_decoder_blocks, 4);
    const ParamStore ps = init_model(cfg, 0);
    EXPECT_TRUE(ps.contains("pta.block3.attn.q.w"));
    EXPECT_FALSE(ps.contains("pta.block4.attn.q.w"));
    EXPECT_TRUE(ps.contains("tta.block0.attn.q.w"));
    EXPECT_FALSE(ps.contains("tta.block1.attn.q.w"));
    EXPECT_EQ(ps.at("pta.block0.attn.q.w").rows(), 384);

    const GroupedTokens g = group_cloud(random_cloud(10, 1024), 64, 32, 0);
    const TokenMask m = mask_tokens(64, 0.6, 0);
    Tape t;
    const EncodedTokens enc = encode_groups(t, ps, cfg, g, m.visible);
    EXPECT_EQ(enc.tokens.rows(), 27);
    const Var mpos = ad::gather_rows(enc.positions, m.masked);
    const Var logits = decode_tokens(t, ps, enc.tokens, mpos, cfg);
    EXPECT_EQ(logits.rows(), 38);
    EXPECT_EQ(logits.cols(), 64);
    const Var pts = decode_points(t, ps, enc.tokens, mpos, select_groups(g, m.masked).centers, cfg);
    EXPECT_EQ(pts.rows(), 1216);
    EXPECT_EQ(pts.cols(), 3);
}

TEST(Decoder, EmptyMaskRejectedAndEvalDeterministic) {
    const BackboneConfig cfg = tiny_config();
    const ParamStore ps = init_model(cfg, 3);
    const GroupedTokens g = group_cloud(random_cloud(11, 64), 8, 4, 0);
    Tape t;
    const EncodedTokens enc = encode_groups(t, ps, cfg, g, all_indices(8));
    EXPECT_THROW(decode_tokens(t, ps, enc.tokens, ad::gather_rows(enc.positions, {}), cfg), DomainError);
    const std::vector<Index> masked = {1, 5};
    const Mat a = decode_tokens(t, ps, enc.tokens, ad::gather_rows(enc.positions, masked), cfg).value();
    const Mat b = decode_tokens(t, ps, enc.tokens, ad::gather_rows(enc.positions, masked), cfg).value();
    EXPECT_EQ(a, b);
}

TEST(Decoder, ReconstructionFollowsTranslation) {
    const BackboneConfig cfg = tiny_config();
    const ParamStore ps = init_model(cfg, 4);
    const PointCloud c = random_cloud(12, 64);
    const Vec3 shift(0.5, -2.0, 1.25);
    const PointCloud moved(Points(c.xyz.rowwise() + shift.transpose()));
    const TokenMask m = mask_tokens(8, 0.5, 2);
    auto recon = [&](const PointCloud& cloud) {
        const GroupedTokens g = group_cloud(cloud, 8, 4, 0);
        Tape t;
        const EncodedTokens enc = encode_groups(t, ps, cfg, g, m.visible);
        const Var mpos = ad::gather_rows(enc.positions, m.masked);
        return Mat(decode_points(t, ps, enc.tokens, mpos, select_groups(g, m.masked).centers, cfg).value());
    };
    const Mat a = recon(c), b = recon(moved);
    EXPECT_LT((b.rowwise() - shift.transpose() - a).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(ImageEncoder, UnitNormAndDeterministic) {
    const BackboneConfig cfg = tiny_config();
    const ParamStore ps = init_model(cfg, 5);
    Image img(40, 30, 3);
    std::mt19937_64 gen(1);
    std::uniform_real_distribution<double> u(0, 1);
    for (Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = u(gen);
    const RowVec a = embed_rgb(ps, cfg, img), b = embed_rgb(ps, cfg, img);
    EXPECT_EQ(a.cols(), 8);
    EXPECT_NEAR(a.norm(), 1.0, 1e-6);
    EXPECT_EQ(a, b);
    DepthImage d;
    d.pixels = Mat::Constant(12, 12, 0.4);
    d.pixels(3, 4) = 0.1;
    EXPECT_NEAR(embed_depth(ps, cfg, d).norm(), 1.0, 1e-6);
    Tape t;
    EXPECT_THROW(encode_image(t, ps, "rgb", t.constant(Mat::Zero(15 * 15, 3)), 3, cfg), DomainError);
    EXPECT_EQ(BackboneConfig{}.image_size, 224);
}

TEST(Momentum, Examples) {
    ParamStore key, query;
    key.add("a", Mat::Constant(2, 2, 2.0));
    query.add("a", Mat::Constant(2, 2, 4.0));
    ParamStore k1 = key;
    momentum_update(k1, query, 1.0);
    EXPECT_EQ(k1.at("a"), key.at("a"));
    ParamStore k0 = key;
    momentum_update(k0, query, 0.0);
    EXPECT_EQ(k0.at("a"), query.at("a"));
    ParamStore kh = key;
    momentum_update(kh, query, 0.5);
    EXPECT_EQ(kh.at("a"), Mat::Constant(2, 2, 3.0));
    ParamStore bad;
    bad.add("a", Mat::Zero(3, 2));
    EXPECT_THROW(momentum_update(kh, bad, 0.5), DomainError);
}

TEST(Momentum, KeyDriftsTowardQuery) {
    const BackboneConfig cfg = tiny_config();
    const ParamStore q = init_model(cfg, 6);
    ParamStore key = key_encoder_copy(init_model(cfg, 7));
    auto dist = [&] {
        double s = 0;
        for (const auto& [n, m] : key.tensors) s += (m - q.at(n)).squaredNorm();
        return s;
    };
    double prev = dist();
    for (int i = 0; i < 5; ++i) {
        momentum_update(key, q, 0.9);
        const double d = dist();
        EXPECT_LT(d, prev);
        prev = d;
    }
}
