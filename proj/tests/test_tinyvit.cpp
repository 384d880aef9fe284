#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "support/gradcheck.hpp"
#include "xmp/tinyvit.hpp"

using namespace xmp;

namespace {

ViTWeights<double> random_vit(std::uint64_t seed)
{
    ViTWeights<double> w{ViTConfig{}};
    Rng rng(seed);
    w.init(rng);
    for (auto& [name, t] : w.tensors())
        if (name.find("ln") == std::string::npos && name != "patch_w")
            *t *= 5.0;
    return w;
}

Grid one_cell(int cell)
{
    Grid g{};
    g[cell] = {Shape::Star, Color::Green};
    return g;
}

// Multinomial logistic regression trained by full-batch gradient descent;
// returns held-out accuracy. Classes: 0 empty, 1..4 shapes.
double linear_probe_accuracy(const MatD& xtr, const std::vector<int>& ytr, const MatD& xte, const std::vector<int>& yte)
{
    const int k = 5;
    MatD w = MatD::Zero(xtr.cols() + 1, k);
    auto aug = [](const MatD& x) {
        MatD a(x.rows(), x.cols() + 1);
        a << x, MatD::Ones(x.rows(), 1);
        return a;
    };
    MatD a = aug(xtr), b = aug(xte);
    for (int it = 0; it < 400; ++it) {
        MatD logits = a * w;
        MatD p = logits;
        for (Eigen::Index i = 0; i < p.rows(); ++i) {
            p.row(i) = (p.row(i).array() - p.row(i).maxCoeff()).exp().matrix();
            p.row(i) /= p.row(i).sum();
            p(i, ytr[static_cast<std::size_t>(i)]) -= 1.0;
        }
        w -= 0.5 * a.transpose() * p / static_cast<double>(a.rows());
    }
    MatD logits = b * w;
    int hits = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best;
        logits.row(i).maxCoeff(&best);
        hits += best == yte[static_cast<std::size_t>(i)];
    }
    return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

}  // namespace

TEST(Patchify, WhiteImageGivesIdenticalPatches)
{
    auto p = patchify<float>(render(Grid{}));
    ASSERT_EQ(p.rows(), 9);
    ASSERT_EQ(p.cols(), 192);
    for (int k = 1; k < 9; ++k)
        EXPECT_EQ(Mat<float>(p.row(k)), Mat<float>(p.row(0)));
}

TEST(Patchify, ReassemblyIsBitExact)
{
    auto img = gen_image(3, 0.7);
    auto p = patchify<float>(img.pixels);
    std::vector<float> back(img.pixels.size());
    for (int k = 0; k < 9; ++k)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                for (int c = 0; c < 3; ++c)
                    back[static_cast<std::size_t>((((k / 3) * 8 + y) * 24 + (k % 3) * 8 + x) * 3 + c)] =
                        p(k, (y * 8 + x) * 3 + c);
    EXPECT_EQ(back, img.pixels);
}

TEST(Patchify, PatchKCoversCellK)
{
    auto white = patchify<float>(render(Grid{}));
    for (int cell = 0; cell < 9; ++cell) {
        auto p = patchify<float>(render(one_cell(cell)));
        for (int k = 0; k < 9; ++k)
            EXPECT_EQ(Mat<float>(p.row(k)) == Mat<float>(white.row(k)), k != cell);
    }
}

TEST(Patchify, ShapeMismatch)
{
    EXPECT_THROW(patchify<float>(std::vector<float>(100)), ShapeMismatch);
}

TEST(ViTForward, NinePatchRowsAndDeterministic)
{
    auto w = random_vit(1).cast<float>();
    auto img = gen_image(5, 0.5);
    auto a = vit_forward(w, img.pixels), b = vit_forward(w, img.pixels);
    EXPECT_EQ(a.rows.rows(), 9);
    EXPECT_EQ(a.rows.cols(), 48);
    EXPECT_EQ(a.rows, b.rows);
    EXPECT_TRUE(a.rows.allFinite());
    for (int k = 0; k < 9; ++k)
        EXPECT_EQ(a.cell_of_patch[static_cast<std::size_t>(k)], k);
}

TEST(ViTForward, SensitiveToCellFive)
{
    auto w = random_vit(2).cast<float>();
    Grid g{};
    g[0] = {Shape::Circle, Color::Red};
    Grid h = g;
    h[5] = {Shape::Square, Color::Blue};
    auto a = vit_forward(w, render(g)), b = vit_forward(w, render(h));
    EXPECT_GT((a.rows - b.rows).norm(), 1e-4);
}

TEST(ViTForward, PermutationCovariantWithPositions)
{
    auto w = random_vit(3);
    auto patches = patchify<double>(gen_image(8, 0.8).pixels);
    auto out = vit_forward_patches(w, patches).rows;
    auto w2 = w;
    auto p2 = patches;
    p2.row(1).swap(p2.row(7));
    w2.pos.row(1).swap(w2.pos.row(7));
    auto out2 = vit_forward_patches(w2, p2).rows;
    for (int k = 0; k < 9; ++k) {
        int src = k == 1 ? 7 : k == 7 ? 1 : k;
        EXPECT_LT((out2.row(k) - out.row(src)).norm(), 1e-9);
    }
}

TEST(Contrastive, IdenticalPairsGiveLn2)
{
    ContrastiveModel<double> m(ViTConfig{}, default_tokenizer().vocab_size(), 72, 0.07);
    Rng rng(4);
    m.vit.init(rng);
    m.text.init(rng);
    ContrastivePair p{gen_image(1, 0.5).pixels, default_tokenizer().tokenize("a red circle at center.")};
    std::vector<const ContrastivePair*> batch{&p, &p};
    EXPECT_NEAR(contrastive_loss<double>(m, batch, nullptr), std::log(2.0), 1e-12);
    m.log_scale(0, 0) = 0.3;
    EXPECT_NEAR(contrastive_loss<double>(m, batch, nullptr), std::log(2.0), 1e-12);
    std::vector<const ContrastivePair*> one{&p};
    EXPECT_THROW(contrastive_loss<double>(m, one, nullptr), PreconditionError);
}

TEST(Contrastive, GradientMatchesFiniteDifferences)
{
    ContrastiveModel<double> m(ViTConfig{}, default_tokenizer().vocab_size(), 72, 0.07);
    Rng rng(5);
    m.vit.init(rng);
    m.text.init(rng);
    for (auto& [name, t] : m.tensors())
        if (name.find("ln") == std::string::npos && name != "log_scale" && name != "patch_w")
            *t *= 5.0;
    auto pairs = contrastive_pairs(4, 77, 0.5);
    std::vector<const ContrastivePair*> batch;
    for (auto& p : pairs)
        batch.push_back(&p);
    ContrastiveModel<double> g = m;
    zero_tensors(g.tensors());
    contrastive_loss(m, batch, &g);
    auto res = test::check_gradients(m.tensors(), g.tensors(), [&] { return contrastive_loss<double>(m, batch, nullptr); },
                                     24, 11);
    for (auto& s : res.samples)
        EXPECT_LT(s.rel_error, 1e-4) << s.tensor << "(" << s.row << "," << s.col << ") " << s.analytic << " vs "
                                     << s.numeric;
}

TEST(ViTCheckpoint, ChecksumStableAcrossSaveLoad)
{
    auto w = random_vit(6).cast<float>();
    auto path = std::filesystem::temp_directory_path() / "xmp_test_vit.bin";
    save_vit(path, w);
    EXPECT_EQ(load_vit(path).checksum(), w.checksum());
    std::filesystem::remove(path);
}

// Trains the tower once and checks retrieval, the per-patch linear probe, and
// determinism of a short rerun.
TEST(TrainContrastive, RetrievalProbeAndDeterminism)
{
    auto pairs = contrastive_pairs(6000, 21, 0.4);
    ContrastiveOptions opt;
    opt.epochs = 5;
    opt.seed = 3;
    auto t0 = std::chrono::steady_clock::now();
    auto res = train_contrastive(pairs, ViTConfig{}, opt);
    auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "contrastive training " << secs << " s, recall@1 " << res.val_recall_at_1 << "\n";
    EXPECT_GE(res.val_recall_at_1, 0.6);

    std::vector<int> ytr, yte;
    MatD xtr(9 * 1500, 48), xte(9 * 500, 48);
    for (int split = 0; split < 2; ++split) {
        const int n = split ? 500 : 1500;
        auto& x = split ? xte : xtr;
        auto& y = split ? yte : ytr;
        for (int i = 0; i < n; ++i) {
            auto img = gen_image(derive_seed(9000 + split, static_cast<std::uint64_t>(i)), 0.4);
            auto rows = vit_forward(res.vit, img.pixels).rows;
            for (int k = 0; k < 9; ++k) {
                x.row(i * 9 + k) = rows.row(k).cast<double>();
                y.push_back(static_cast<int>(img.grid[static_cast<std::size_t>(k)].shape));
            }
        }
    }
    double acc = linear_probe_accuracy(xtr, ytr, xte, yte);
    std::cout << "linear probe accuracy " << acc << "\n";
    EXPECT_GE(acc, 0.9);

    std::vector<ContrastivePair> small(pairs.begin(), pairs.begin() + 256);
    ContrastiveOptions quick;
    quick.epochs = 1;
    quick.batch_size = 32;
    EXPECT_EQ(train_contrastive(small, ViTConfig{}, quick).vit.checksum(),
              train_contrastive(small, ViTConfig{}, quick).vit.checksum());
}
