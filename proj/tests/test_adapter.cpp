#include <gtest/gtest.h>

#include "support/gradcheck.hpp"
#include "xmp/adapter.hpp"

using namespace xmp;

namespace {

LMConfig small_lm_config()
{
    LMConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.n_layers = 2;
    c.vocab_size = default_tokenizer().vocab_size();
    c.max_context = 64;
    return c;
}

ViTConfig small_vit_config()
{
    ViTConfig c;
    c.d_vis = 12;
    c.n_heads = 2;
    c.d_ff = 24;
    c.n_layers = 1;
    return c;
}

struct Fixture {
    LMWeights<float> lm{small_lm_config()};
    ViTWeights<float> vit{small_vit_config()};
    std::vector<MMExample> examples;

    explicit Fixture(int n = 12)
    {
        Rng rng(1);
        lm.init(rng);
        vit.init(rng);
        for (int i = 0; i < n; ++i)
            examples.push_back(make_qa_example(static_cast<std::uint64_t>(100 + i), 0.3, static_cast<std::uint64_t>(i)));
    }
};

}  // namespace

TEST(Adapter, ProjectMatchesNaiveLoop)
{
    Rng rng(2);
    AdapterWeights<double> a(5, 7);
    a.init(rng);
    MatD p(9, 5);
    fill_normal(p, rng, 1.0);
    MatD out = project(p, a);
    for (int r = 0; r < 9; ++r)
        for (int c = 0; c < 7; ++c) {
            double acc = a.b(0, c);
            for (int k = 0; k < 5; ++k)
                acc += p(r, k) * a.w(k, c);
            EXPECT_NEAR(out(r, c), acc, 1e-12);
        }
}

TEST(Adapter, ProjectTrivialCases)
{
    AdapterWeights<double> a(4, 6);
    MatD p = MatD::Random(9, 4);
    EXPECT_EQ(project(p, a), MatD::Zero(9, 6));
    a.w.topLeftCorner(4, 4).setIdentity();
    Rng rng(3);
    fill_normal(a.w, rng, 1.0);
    MatD unit = MatD::Zero(9, 4);
    unit(0, 2) = 1.0;
    EXPECT_EQ(MatD(project(unit, a).row(0)), MatD(a.w.row(2)));
    EXPECT_THROW(project(MatD(MatD::Zero(9, 5)), a), ShapeMismatch);
}

TEST(Adapter, AssembleLayoutAndTags)
{
    Fixture f;
    auto a = random_adapter(f.lm, f.vit, 4);
    const auto& img = f.examples[0].image;
    auto empty = assemble(img, Tokens{}, f.lm, f.vit, a);
    EXPECT_EQ(empty.embeddings.rows(), 10);
    EXPECT_EQ(empty.tags[0], PositionGroup::Bos);
    for (int i = 1; i <= 9; ++i)
        EXPECT_EQ(empty.tags[static_cast<std::size_t>(i)], PositionGroup::Visual);

    auto text = format_vlm_text(f.examples[0].instruction, f.examples[0].answer);
    auto s = assemble(img, text.tokens, f.lm, f.vit, a);
    ASSERT_EQ(static_cast<std::size_t>(s.embeddings.rows()), 10 + text.tokens.size());
    EXPECT_EQ(MatF(s.embeddings.row(0)), MatF(f.lm.tok_emb.row(Tokenizer::kBos)));
    EXPECT_EQ(MatF(s.embeddings.middleRows(1, 9)), project(vit_forward(f.vit, img.pixels).rows, a));
    EXPECT_EQ(MatF(s.embeddings.row(10)), MatF(f.lm.tok_emb.row(Tokenizer::kSep)));
    for (std::size_t i = 10; i < s.tags.size(); ++i)
        EXPECT_EQ(s.tags[i], PositionGroup::Text);
    EXPECT_EQ(text.tokens.front(), Tokenizer::kSep);
    EXPECT_EQ(text.tokens.back(), Tokenizer::kEos);
    EXPECT_EQ(text.tokens[static_cast<std::size_t>(text.answer_begin - 1)], Tokenizer::kSep);

    Tokens long_text(60, Tokenizer::kSep);
    EXPECT_THROW(assemble(img, long_text, f.lm, f.vit, a), ContextOverflow);
}

TEST(Adapter, TargetsCoverExactlyTheAnswer)
{
    auto text = format_vlm_text("What shape is at center?", "a red circle");
    auto targets = answer_targets(text);
    ASSERT_EQ(targets.size(), 10 + text.tokens.size());
    const auto& tok = default_tokenizer();
    Tokens want = tok.tokenize("a red circle");
    want.push_back(Tokenizer::kEos);
    Tokens got;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0)
            continue;
        got.push_back(targets[i]);
        // Predicting from the BOS or a visual position never carries loss.
        EXPECT_GE(i, 10u);
    }
    EXPECT_EQ(got, want);
    EXPECT_EQ(targets.back(), -1);
}

TEST(Adapter, GradientMatchesFiniteDifferences)
{
    Fixture f(3);
    auto lm = f.lm.cast<double>();
    auto vit = f.vit.cast<double>();
    auto a = random_adapter(f.lm, f.vit, 5).cast<double>();
    std::vector<MatD> patches;
    std::vector<VLMText> texts;
    for (const auto& ex : f.examples) {
        patches.push_back(vit_forward(vit, ex.image.pixels).rows);
        texts.push_back(format_vlm_text(ex.instruction, ex.answer));
    }
    auto loss = [&](AdapterWeights<double>* g) {
        double l = 0;
        for (std::size_t i = 0; i < patches.size(); ++i)
            l += vlm_example_loss(lm, patches[i], texts[i], a, g);
        return l;
    };
    AdapterWeights<double> g(a.d_vis, a.d_model);
    loss(&g);
    auto res = test::check_gradients(a.tensors(), g.tensors(), [&] { return loss(nullptr); }, 40, 6);
    EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(Adapter, NoAnswerMeansZeroGradient)
{
    Fixture f(1);
    auto a = random_adapter(f.lm, f.vit, 7);
    MatF patches = vit_forward(f.vit, f.examples[0].image.pixels).rows;
    VLMText t = format_vlm_text(f.examples[0].instruction, f.examples[0].answer);
    t.answer_begin = static_cast<int>(t.tokens.size());  // no target anywhere
    AdapterWeights<float> g(a.d_vis, a.d_model);
    EXPECT_EQ(vlm_example_loss(f.lm, patches, t, a, &g), 0.0);
    EXPECT_EQ(g.w.cwiseAbs().maxCoeff(), 0.0f);
    EXPECT_EQ(g.b.cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Adapter, ZeroLearningRateAndZeroEpochsLeaveWeightsUnchanged)
{
    Fixture f;
    auto items = prepare_items(f.vit, f.examples);
    auto a = random_adapter(f.lm, f.vit, 8);
    auto opt = stage1_options(9);
    opt.lr = 0.0;
    opt.batch_size = 4;
    EXPECT_EQ(train_adapter(f.lm, f.vit, items, a, opt).weights.checksum(), a.checksum());
    auto opt2 = stage2_options(9);
    opt2.epochs = 0;
    EXPECT_EQ(train_stage2(f.lm, f.vit, items, a, opt2).weights.checksum(), a.checksum());
}

TEST(Adapter, TrainingIsDeterministicKeepsBackbonesAndLowersLoss)
{
    Fixture f(48);
    auto items = prepare_items(f.vit, f.examples);
    const auto lm_sum = f.lm.checksum();
    const auto vit_sum = f.vit.checksum();
    auto opt = stage1_options(10);
    opt.batch_size = 8;
    opt.epochs = 6;
    auto r1 = train_stage1(f.lm, f.vit, items, opt);
    auto r2 = train_stage1(f.lm, f.vit, items, opt);
    EXPECT_EQ(r1.weights.checksum(), r2.weights.checksum());
    EXPECT_EQ(f.lm.checksum(), lm_sum);
    EXPECT_EQ(f.vit.checksum(), vit_sum);
    EXPECT_EQ(r1.lm_checksum, lm_sum);
    EXPECT_EQ(r1.steps, 36);
    auto init = random_adapter(f.lm, f.vit, 10);
    EXPECT_LT(mean_answer_loss(f.lm, items, r1.weights), mean_answer_loss(f.lm, items, init));
}

TEST(Adapter, StageOptionsFollowTheRecipe)
{
    auto s1 = stage1_options(0);
    EXPECT_DOUBLE_EQ(s1.lr, 1e-3);
    EXPECT_EQ(s1.epochs, 1);
    EXPECT_DOUBLE_EQ(s1.warmup_ratio, 0.03);
    EXPECT_EQ(s1.batch_size, 32);
    auto s2 = stage2_options(0);
    EXPECT_DOUBLE_EQ(s2.lr, 2e-5);
    EXPECT_EQ(s2.epochs, 3);
    EXPECT_DOUBLE_EQ(s2.warmup_ratio, 0.0);
    EXPECT_EQ(s2.batch_size, 16);
}

TEST(Adapter, GreedyAnswerStopsAndCheckpointRoundTrips)
{
    Fixture f(2);
    auto a = random_adapter(f.lm, f.vit, 11);
    auto items = prepare_items(f.vit, f.examples);
    auto ans = greedy_answer(f.lm, items[0].patch_rows, items[0].prompt, a, 5);
    EXPECT_LE(ans.size(), 5u);
    for (auto t : ans)
        EXPECT_NE(t, Tokenizer::kEos);
    auto path = std::filesystem::temp_directory_path() / "xmp_adapter.bin";
    save_adapter(path, a, 1);
    EXPECT_EQ(load_adapter(path).checksum(), a.checksum());
}
