#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>

#include "sduseg/blocks.hpp"
#include "sduseg/loss.hpp"
#include "sduseg/models.hpp"
#include "support/gradcheck.hpp"
#include "support/impulse.hpp"

using namespace sduseg;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

// Closed-form parameter counts, independent of the layer machinery.
std::size_t conv_params(int c_in, int c_out, int k = 3) {
  return static_cast<std::size_t>(k) * k * c_in * c_out + c_out;
}

std::size_t sdu_params(int n_in, int n_out, bool norm) {
  const int widths[5] = {n_out / 2, n_out / 4, n_out / 8, n_out / 16, n_out / 16};
  std::size_t total = 0;
  int c = n_in;
  for (int w : widths) {
    total += conv_params(c, w) + (norm ? 2 * w : 0);
    c = w;
  }
  return total;
}

std::size_t double_conv_params(int n_in, int n_out, bool norm) {
  return conv_params(n_in, n_out) + conv_params(n_out, n_out) + (norm ? 4 * n_out : 0);
}

std::size_t model_params(const ModelConfig& cfg) {
  auto block = [&](int n_in, int n_out) {
    return cfg.block_kind == BlockKind::kSdu ? sdu_params(n_in, n_out, cfg.use_norm)
                                             : double_conv_params(n_in, n_out, cfg.use_norm);
  };
  const auto& w = cfg.widths;
  std::size_t total = block(cfg.in_channels, w[0]) + block(w[0], w[1]) + block(w[1], w[2]) +
                      block(w[2], w[3]);
  for (int i = 0; i < 3; ++i) {
    total += conv_params(w[i + 1], w[i]) + (cfg.use_norm ? 2 * w[i] : 0);  // upsample conv
    total += block(2 * w[i], w[i]);                                       // decoder block
  }
  total += conv_params(w[0], cfg.out_channels, 1);  // head
  return total;
}

SduBlockConfig sdu_cfg(int n_in, int n_out, bool norm) {
  SduBlockConfig cfg;
  cfg.n_in = n_in;
  cfg.n_out = n_out;
  cfg.use_norm = norm;
  return cfg;
}

}  // namespace

TEST_CASE("sdu block parameter count matches per-branch enumeration") {
  SduBlock<double> block(sdu_cfg(64, 64, false));
  REQUIRE(block.parameter_count() == 24688);
  REQUIRE(block.parameter_count() == 18464 + 4624 + 1160 + 292 + 148);
  REQUIRE(block.parameter_count() == sdu_params(64, 64, false));
}

TEST_CASE("double conv parameter counts match the closed form") {
  auto dc = make_double_conv_block<double>(64, 64, false);
  REQUIRE(dc->parameter_count() == 73856);
  auto dc2 = make_double_conv_block<double>(1, 64, false);
  REQUIRE(dc2->parameter_count() == 37568);
  auto dcn = make_double_conv_block<double>(8, 16, true);
  REQUIRE(dcn->parameter_count() == double_conv_params(8, 16, true));
}

TEST_CASE("sdu block needs less than 40 percent of double conv parameters") {
  for (int n : {16, 32, 64, 128}) {
    for (bool norm : {false, true}) {
      SduBlock<double> sdu(sdu_cfg(n, n, norm));
      auto dc = make_double_conv_block<double>(n, n, norm);
      const double ratio = static_cast<double>(sdu.parameter_count()) /
                           static_cast<double>(dc->parameter_count());
      INFO("n=" << n << " norm=" << norm << " ratio=" << ratio);
      REQUIRE(ratio < 0.40);
    }
  }
}

TEST_CASE("sdu block output always has n_out channels") {
  struct Case {
    int n_out;
    std::vector<double> fractions;
    std::vector<int> rates;
  };
  const Case cases[] = {
      {64, {0.5, 0.25, 0.125, 0.0625, 0.0625}, {1, 2, 4, 8, 16}},
      {16, {0.25, 0.25, 0.25, 0.125, 0.125}, {1, 2, 3, 4, 5}},
      {6, {0.5, 0.5}, {1, 3}},
  };
  for (const auto& tc : cases) {
    SduBlockConfig cfg = sdu_cfg(3, tc.n_out, false);
    cfg.split_fractions = tc.fractions;
    cfg.dilation_rates = tc.rates;
    SduBlock<double> block(cfg);
    Tensor<double> x(Shape4{2, 3, 40, 40}, 0.5);
    auto y = block.forward(x);
    REQUIRE(y.shape() == Shape4{2, tc.n_out, 40, 40});
  }
}

TEST_CASE("single-branch sdu block reduces to one standard conv") {
  SduBlockConfig cfg = sdu_cfg(3, 5, false);
  cfg.split_fractions = {1.0};
  cfg.dilation_rates = {1};
  SduBlock<double> block(cfg);
  REQUIRE(block.parameter_count() == conv_params(3, 5));

  Conv2dLayer<double> conv(3, 5, ConvSpec::same3x3(1));
  // Mirror the block's weights onto the plain conv, then outputs must agree.
  block.visit_parameters([&](const std::string& name, Tensor<double>& t) {
    conv.visit_parameters([&](const std::string& cname, Tensor<double>& ct) {
      if (name.ends_with(cname)) ct.values() = t.values();
    });
  });
  Rng rng(4);
  Tensor<double> x(Shape4{1, 3, 10, 10});
  for (auto& v : x.values()) v = rng.uniform(-1, 1);
  auto y_block = block.forward(x);
  auto y_conv = relu(conv.forward(x));
  REQUIRE(y_block.shape() == y_conv.shape());
  for (std::size_t i = 0; i < y_block.numel(); ++i) {
    REQUIRE(y_block.data()[i] == y_conv.data()[i]);
  }
}

TEST_CASE("sdu block config rejects invalid splits") {
  auto cfg = sdu_cfg(8, 8, false);  // default fractions on 8 channels -> width 0.5
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("not a positive integer"));

  cfg = sdu_cfg(8, 64, false);
  cfg.split_fractions = {0.5, 0.5, 0.25};
  cfg.dilation_rates = {1, 2, 4};
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("sum"));

  cfg = sdu_cfg(8, 64, false);
  cfg.dilation_rates = {2, 4, 8, 16, 32};
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("rate must be 1"));

  cfg = sdu_cfg(8, 64, false);
  cfg.dilation_rates = {1, 4, 4, 8, 16};
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("strictly increasing"));

  cfg = sdu_cfg(8, 64, false);
  cfg.dilation_rates = {1, 2, 4};
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("dilation rates"));

  cfg = sdu_cfg(0, 64, false);
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring(">= 1"));
}

TEST_CASE("receptive field extents compose along the cascade") {
  SduBlock<double> sdu(sdu_cfg(8, 64, false));
  auto rf = receptive_field(sdu);
  REQUIRE(rf.extents == std::vector<int>{3, 7, 15, 31, 63});
  REQUIRE_NOTHROW(rf.validate());

  auto dc = make_double_conv_block<double>(4, 4, false);
  REQUIRE(receptive_field(*dc).extents == std::vector<int>{5});

  Conv2dLayer<double> conv(1, 1, ConvSpec::same3x3(1));
  REQUIRE(receptive_field(conv).extents == std::vector<int>{3});

  Conv2dLayer<double> dilated(1, 1, ConvSpec::same3x3(2));
  REQUIRE(receptive_field(dilated).extents == std::vector<int>{5});

  // Pooling raises the jump: 3x3 conv, 2x2 pool, 3x3 conv covers 8 pixels.
  Sequential<double> chain;
  chain.append("c1", std::make_shared<Conv2dLayer<double>>(1, 2, ConvSpec::same3x3(1)));
  chain.append("p", std::make_shared<MaxPool2Layer<double>>());
  chain.append("c2", std::make_shared<Conv2dLayer<double>>(2, 2, ConvSpec::same3x3(1)));
  REQUIRE(receptive_field(chain).extents == std::vector<int>{8});
}

TEST_CASE("receptive field walker rejects unsupported graphs") {
  Sequential<double> seq;
  seq.append("up", std::make_shared<Upsample2xLayer<double>>(UpsampleMode::kNearest));
  REQUIRE_THROWS_WITH(receptive_field(seq), ContainsSubstring("unsupported"));
}

TEST_CASE("receptive field report validation") {
  REQUIRE_THROWS_WITH((ReceptiveField{{3, 7, 4}}.validate()), ContainsSubstring("odd"));
  REQUIRE_THROWS_WITH((ReceptiveField{{3, 3}}.validate()), ContainsSubstring("increase"));
  REQUIRE_THROWS_WITH((ReceptiveField{{}}.validate()), ContainsSubstring("no extents"));
  REQUIRE((ReceptiveField{{3, 7, 15, 31, 63}}.str()) == "{3, 7, 15, 31, 63}");
}

TEST_CASE("measured impulse footprints match the analytic extents") {
  SduBlockConfig cfg = sdu_cfg(8, 64, false);
  const auto widths = cfg.branch_widths();
  const std::vector<int> expected = {3, 7, 15, 31, 63};
  int channel = 0;
  for (std::size_t b = 0; b < widths.size(); ++b) {
    SduBlock<double> block(cfg);  // fresh weights each probe
    REQUIRE(testing::measured_extent(block, 8, channel, 128) == expected[b]);
    channel += widths[b];
  }

  auto dc = make_double_conv_block<double>(2, 4, false);
  REQUIRE(testing::measured_extent(*dc, 2, 1, 16) == 5);

  Conv2dLayer<double> conv(1, 2, ConvSpec::same3x3(1));
  REQUIRE(testing::measured_extent(conv, 1, 0, 16) == 3);
  Conv2dLayer<double> dilated(1, 2, ConvSpec::same3x3(2));
  REQUIRE(testing::measured_extent(dilated, 1, 0, 16) == 5);
}

TEST_CASE("kaiming init draws per-name streams") {
  auto block = make_double_conv_block<double>(64, 64, false);
  kaiming_init(*block, 7);
  std::vector<double> sample;
  block->visit_parameters([&](const std::string& name, Tensor<double>& t) {
    if (name == "conv1.weight") sample = t.values();
  });
  REQUIRE(sample.size() == 64 * 64 * 9);
  double mean = 0;
  for (double v : sample) mean += v;
  mean /= static_cast<double>(sample.size());
  double var = 0;
  for (double v : sample) var += (v - mean) * (v - mean);
  var /= static_cast<double>(sample.size());
  const double want = 2.0 / (9.0 * 64.0);
  REQUIRE(std::abs(var - want) / want < 0.2);

  // Same seed, same names -> identical draws; different seed differs.
  auto again = make_double_conv_block<double>(64, 64, false);
  kaiming_init(*again, 7);
  auto other = make_double_conv_block<double>(64, 64, false);
  kaiming_init(*other, 8);
  std::vector<double> w1, w2, w3;
  auto grab = [](Layer<double>& l, std::vector<double>& out) {
    l.visit_parameters([&](const std::string& name, Tensor<double>& t) {
      if (name == "conv1.weight") out = t.values();
    });
  };
  grab(*block, w1);
  grab(*again, w2);
  grab(*other, w3);
  REQUIRE(w1 == w2);
  REQUIRE(w1 != w3);
}

TEST_CASE("kaiming init is registration-order independent") {
  // Two containers share the child name "conv" with equal shapes; the extra
  // sibling in the second must not shift conv's draws.
  Sequential<double> a;
  a.append("conv", std::make_shared<Conv2dLayer<double>>(3, 4, ConvSpec::same3x3(1)));
  Sequential<double> b;
  b.append("first", std::make_shared<Conv2dLayer<double>>(5, 6, ConvSpec::same3x3(1)));
  b.append("conv", std::make_shared<Conv2dLayer<double>>(3, 4, ConvSpec::same3x3(1)));
  kaiming_init(a, 11);
  kaiming_init(b, 11);
  std::vector<double> wa, wb;
  a.visit_parameters([&](const std::string& n, Tensor<double>& t) {
    if (n == "conv.weight") wa = t.values();
  });
  b.visit_parameters([&](const std::string& n, Tensor<double>& t) {
    if (n == "conv.weight") wb = t.values();
  });
  REQUIRE(wa == wb);
}

TEST_CASE("model config validation") {
  ModelConfig cfg;
  REQUIRE_NOTHROW(cfg.validate());
  cfg.widths = {64, 64, 128, 256};
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("strictly increasing"));
  cfg.widths = {8, 16, 32, 64};
  REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("divisible by 16"));
  cfg.block_kind = BlockKind::kDoubleConv;
  REQUIRE_NOTHROW(cfg.validate());
}

TEST_CASE("model totals match the closed form and stay in the expected ratio") {
  for (bool norm : {false, true}) {
    ModelConfig sdu;
    sdu.use_norm = norm;
    ModelConfig dc = sdu;
    dc.block_kind = BlockKind::kDoubleConv;
    UNet<float> sdu_net(sdu);
    UNet<float> dc_net(dc);
    const auto sdu_report = count_parameters(sdu_net, dc_net);
    const auto dc_report = count_parameters(dc_net);
    REQUIRE(sdu_report.total_with_norm == model_params(sdu));
    REQUIRE(dc_report.total_with_norm == model_params(dc));
    REQUIRE(sdu_report.has_ratio);
    REQUIRE(sdu_report.ratio_vs > 0.30);
    REQUIRE(sdu_report.ratio_vs < 0.50);
    if (!norm) {
      REQUIRE(sdu_report.total_with_norm == 3755137);
      REQUIRE(dc_report.total_with_norm == 8556353);
      REQUIRE(sdu_report.total_without_norm == sdu_report.total_with_norm);
    }
  }
}

TEST_CASE("totals without norm exclude scale and shift rows") {
  ModelConfig cfg;
  cfg.widths = {16, 32, 64, 128};
  cfg.use_norm = true;
  UNet<float> net(cfg);
  const auto report = count_parameters(net);
  ModelConfig bare = cfg;
  bare.use_norm = false;
  REQUIRE(report.total_without_norm == model_params(bare));
  std::size_t sum = 0;
  for (const auto& row : report.rows) sum += row.count;
  REQUIRE(sum == report.total_with_norm);
}

TEST_CASE("enlarging any width strictly increases the total") {
  for (auto kind : {BlockKind::kSdu, BlockKind::kDoubleConv}) {
    ModelConfig base;
    base.block_kind = kind;
    base.widths = {16, 32, 64, 128};
    UNet<float> net(base);
    const auto total = count_parameters(net).total_with_norm;
    for (int i = 0; i < 4; ++i) {
      ModelConfig bigger = base;
      bigger.widths[i] += 16;
      if (bigger.widths[i] >= (i < 3 ? bigger.widths[i + 1] : 1 << 30)) continue;
      UNet<float> net2(bigger);
      REQUIRE(count_parameters(net2).total_with_norm > total);
    }
  }
}

TEST_CASE("forward preserves spatial extents and emits probabilities") {
  ModelConfig cfg;  // default widths, sdu
  auto model = build_model<float>(cfg, 3);
  Tensor<float> x(Shape4{1, 1, 64, 64}, 0.25f);
  auto y = model->forward(x);
  REQUIRE(y.shape() == Shape4{1, 1, 64, 64});
  for (std::size_t i = 0; i < y.numel(); ++i) {
    REQUIRE(y.data()[i] > 0.0f);
    REQUIRE(y.data()[i] < 1.0f);
  }
}

TEST_CASE("both block kinds accept identical inputs and agree on shapes") {
  ModelConfig sdu;
  sdu.widths = {16, 32, 64, 128};
  ModelConfig dc = sdu;
  dc.block_kind = BlockKind::kDoubleConv;
  auto m1 = build_model<float>(sdu, 1);
  auto m2 = build_model<float>(dc, 1);
  Tensor<float> x(Shape4{2, 1, 32, 48}, 0.5f);
  REQUIRE(m1->forward(x).shape() == m2->forward(x).shape());
}

TEST_CASE("skips keep decoding alive when the deepest feature is zeroed") {
  ModelConfig cfg;
  cfg.widths = {16, 32, 64, 128};
  auto model = build_model<float>(cfg, 5);
  Tensor<float> x(Shape4{1, 1, 32, 32}, 0.5f);
  auto feats = model->encode(x);
  std::fill(feats[3].values().begin(), feats[3].values().end(), 0.0f);
  auto y = model->decode(feats);
  REQUIRE(y.shape() == Shape4{1, 1, 32, 32});
  for (std::size_t i = 0; i < y.numel(); ++i) REQUIRE(std::isfinite(y.data()[i]));
}

TEST_CASE("model rejects inputs that cannot pool three times") {
  ModelConfig cfg;
  cfg.widths = {16, 32, 64, 128};
  auto model = build_model<float>(cfg, 5);
  Tensor<float> bad(Shape4{1, 1, 60, 64});
  REQUIRE_THROWS_MATCHES(model->forward(bad), DataError, Catch::Matchers::MessageMatches(
                                                             ContainsSubstring("divisible by 8")));
  Tensor<float> wrongc(Shape4{1, 3, 64, 64});
  REQUIRE_THROWS_AS(model->forward(wrongc), DataError);
}

TEST_CASE("same seed builds produce identical outputs") {
  ModelConfig cfg;
  cfg.widths = {16, 32, 64, 128};
  auto a = build_model<float>(cfg, 42);
  auto b = build_model<float>(cfg, 42);
  Tensor<float> x(Shape4{1, 1, 16, 16});
  Rng rng(9);
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
  auto ya = a->forward(x);
  auto yb = b->forward(x);
  REQUIRE(ya.values() == yb.values());
}

TEST_CASE("predict_mask thresholds a frozen model") {
  ModelConfig cfg;
  cfg.widths = {16, 32, 64, 128};
  auto model = build_model<float>(cfg, 6);
  Tensor<float> x(Shape4{1, 1, 16, 16}, 0.5f);
  REQUIRE_THROWS_WITH(predict_mask(*model, x), ContainsSubstring("inference"));
  model->set_training(false);
  auto mask = predict_mask(*model, x);
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    REQUIRE((mask.data()[i] == 0.0f || mask.data()[i] == 1.0f));
  }
  // Sigmoid outputs live in (0,1), so a threshold of 1 never fires.
  auto none = predict_mask(*model, x, 1.0f);
  for (std::size_t i = 0; i < none.numel(); ++i) REQUIRE(none.data()[i] == 0.0f);
  // Thresholding an already-binary map changes nothing.
  auto twice = predict_mask(*model, x);
  REQUIRE(twice.values() == mask.values());

  Tensor<float> odd(Shape4{1, 1, 12, 16});
  REQUIRE_THROWS_MATCHES(predict_mask(*model, odd), DataError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("resize")));
}

TEST_CASE("miniature models pass end-to-end gradient checks") {
  struct Case {
    BlockKind kind;
    std::array<int, 4> widths;
  };
  const Case cases[] = {{BlockKind::kDoubleConv, {8, 16, 32, 64}},
                        {BlockKind::kSdu, {16, 32, 64, 128}}};
  for (const auto& tc : cases) {
    ModelConfig cfg;
    cfg.block_kind = tc.kind;
    cfg.widths = tc.widths;
    cfg.use_norm = false;
    auto model = build_model<double>(cfg, 21);
    Rng rng(33);
    Tensor<double> x(Shape4{1, 1, 8, 8});
    for (auto& v : x.values()) v = rng.uniform(0, 1);
    x.set_requires_grad(true);
    Tensor<double> mask(Shape4{1, 1, 8, 8});
    for (auto& v : mask.values()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;

    Tape<double> tape;
    auto loss = bi_dice_loss(mask, model->forward(x, &tape), 1.0, &tape);
    tape.backward(loss);
    auto value = [&]() { return bi_dice_loss(mask, model->forward(x)).item(); };

    Tensor<double>* head_weight = nullptr;
    Tensor<double>* enc_bias = nullptr;
    model->visit_parameters([&](const std::string& name, Tensor<double>& t) {
      if (name == "head.weight") head_weight = &t;
      if (!enc_bias && name.starts_with("enc1") && name.ends_with("bias")) enc_bias = &t;
    });
    REQUIRE(head_weight != nullptr);
    REQUIRE(enc_bias != nullptr);
    REQUIRE(testing::max_fd_rel_err(value, *head_weight, 1e-6) < 1e-3);
    REQUIRE(testing::max_fd_rel_err(value, *enc_bias, 1e-6) < 1e-3);
    REQUIRE(testing::max_fd_rel_err(value, x, 1e-6) < 1e-3);
  }
}
