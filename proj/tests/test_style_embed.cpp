#include "diffnst/error.hpp"
#include "diffnst/features.hpp"
#include "diffnst/style_embed.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace diffnst;
using namespace diffnst::testing;

TEST_SUITE("style_embed") {
  TEST_CASE("random conv pyramid has fixed layer shapes and works on 4x4 inputs") {
    RandomConvExtractor ex;
    auto f = ex.features(content_fixture());
    REQUIRE(f.size() == 4);
    CHECK(f[0].sizes() == torch::IntArrayRef{1, 16, 64, 64});
    CHECK(f[1].sizes() == torch::IntArrayRef{1, 32, 32, 32});
    CHECK(f[3].sizes() == torch::IntArrayRef{1, 64, 8, 8});
    CHECK(ex.perceptual_layer() == 3);
    auto tiny = ex.features(torch::rand({2, 3, 4, 4}));
    CHECK(tiny[3].sizes() == torch::IntArrayRef{2, 64, 1, 1});

    RandomConvExtractor again;
    CHECK(torch::equal(again.perceptual(content_fixture()), ex.perceptual(content_fixture())));
    CHECK(again.id() == ex.id());
  }

  TEST_CASE("extractor weights never require gradients") {
    auto x = content_fixture(1, 16).requires_grad_();
    auto y = default_extractor()->perceptual(x).sum();
    y.backward();
    CHECK(x.grad().defined());
  }

  TEST_CASE("same image twice gives identical codes of dimension 256") {
    auto enc = make_stats_encoder();
    auto a = enc->encode(style_fixture(3));
    auto b = enc->encode(style_fixture(3));
    CHECK(a.dim() == 256);
    CHECK(torch::equal(a.values, b.values));
    CHECK(a.encoder_id == enc->id());
    CHECK(torch::isfinite(a.values).all().item<bool>());
  }

  TEST_CASE("one-pixel translation barely moves the code") {
    auto enc = make_stats_encoder();
    for (uint64_t seed : {1, 2, 3}) {
      for (const auto& img : {style_fixture(seed), content_fixture(seed)}) {
        auto a = enc->encode(img).values;
        auto b = enc->encode(img.roll({1}, {2})).values;
        const double cos = torch::cosine_similarity(a, b, 0).item<double>();
        CHECK(1.0 - cos < 0.05);
      }
    }
  }

  TEST_CASE("equal per-layer statistics give equal codes") {
    auto stub = std::make_shared<IdentityExtractor>();
    StatsStyleEncoder enc(stub, 6, 32);
    auto img = style_fixture(5, 16);
    // A pixel permutation keeps every channel mean and std.
    auto perm = torch::randperm(256, torch::Generator(at::detail::createCPUGenerator(3)));
    auto shuffled = img.reshape({3, 256}).index_select(1, perm).reshape({3, 16, 16});
    CHECK(max_abs_diff(enc.encode(img).values, enc.encode(shuffled).values) < 1e-6);
  }

  TEST_CASE("registry rejects duplicates and names unknown ids") {
    auto reg = EncoderRegistry::with_defaults();
    CHECK(reg.ids().size() == 1);
    auto stats = reg.get(kStatsEncoderName);
    CHECK(stats->dim() == 256);
    CHECK(reg.get(stats->id()) == stats);
    CHECK_THROWS_AS(reg.add(make_stats_encoder()), EncoderError);
    try {
      reg.get("aladin-vit");
      FAIL("expected EncoderError");
    } catch (const EncoderError& e) {
      CHECK(std::string(e.what()).find("aladin-vit") != std::string::npos);
    }
  }

  TEST_CASE("codes from different encoders cannot be mixed") {
    auto a = make_stats_encoder()->encode(style_fixture(1));
    auto other = std::make_shared<StatsStyleEncoder>(std::make_shared<IdentityExtractor>(), 6, 256);
    auto b = other->encode(style_fixture(1));
    CHECK_NOTHROW(require_same_encoder({&a, &a}));
    CHECK_THROWS_AS(require_same_encoder({&a, &b}), EncoderError);
  }

  TEST_CASE("trainable encoder exposes its projection") {
    auto frozen = make_stats_encoder();
    CHECK(frozen->parameters().empty());
    auto trainable = make_stats_encoder(256, true);
    CHECK(trainable->parameters().size() == 2);
    auto x = style_fixture(2, 16);
    trainable->encode_values(x.unsqueeze(0)).sum().backward();
    CHECK(trainable->parameters()[0].grad().defined());
  }
}
