#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "sduseg/blocks.hpp"
#include "sduseg/errors.hpp"
#include "sduseg/layers.hpp"

namespace sduseg {

enum class BlockKind { kSdu, kDoubleConv };

inline const char* block_kind_name(BlockKind k) {
  return k == BlockKind::kSdu ? "sdu" : "double_conv";
}

struct ModelConfig {
  int in_channels = 1;
  int out_channels = 1;
  std::array<int, 4> widths = {64, 128, 256, 512};
  BlockKind block_kind = BlockKind::kSdu;
  bool use_norm = true;
  UpsampleMode upsample_mode = UpsampleMode::kBilinear;

  void validate() const {
    if (in_channels < 1 || out_channels < 1) {
      throw std::invalid_argument("model config: channel counts must be >= 1");
    }
    int prev = 0;
    for (int w : widths) {
      if (w <= prev) {
        throw std::invalid_argument("model config: widths must be strictly increasing");
      }
      prev = w;
    }
    if (block_kind == BlockKind::kSdu) {
      for (int w : widths) {
        if (w % 16 != 0) {
          throw std::invalid_argument(
              "model config: width " + std::to_string(w) +
              " not divisible by 16; sdu branch splits would be fractional");
        }
      }
    }
  }
};

// Reference totals reported by the original full-scale architectures, for
// display next to this build's exact counts.
inline constexpr std::size_t kReferenceSduNetParams = 6'028'833;
inline constexpr std::size_t kReferenceUNetParams = 14'787'777;
inline constexpr std::size_t kReferenceAttUNetParams = 34'877'421;
inline constexpr std::size_t kReferenceR2UNetParams = 39'091'265;

namespace detail {

template <typename T>
std::shared_ptr<Layer<T>> make_block(const ModelConfig& cfg, int n_in, int n_out) {
  if (cfg.block_kind == BlockKind::kSdu) {
    SduBlockConfig bc;
    bc.n_in = n_in;
    bc.n_out = n_out;
    bc.use_norm = cfg.use_norm;
    return std::make_shared<SduBlock<T>>(bc);
  }
  return make_double_conv_block<T>(n_in, n_out, cfg.use_norm);
}

// Upsample, then a 3x3 conv halving the channels so the decoder map matches
// the skip width before concatenation.
template <typename T>
std::shared_ptr<Sequential<T>> make_upconv(const ModelConfig& cfg, int c_in, int c_out) {
  auto seq = std::make_shared<Sequential<T>>();
  seq->append("up", std::make_shared<Upsample2xLayer<T>>(cfg.upsample_mode));
  seq->append("conv", std::make_shared<Conv2dLayer<T>>(c_in, c_out, ConvSpec::same3x3(1)));
  if (cfg.use_norm) seq->append("norm", std::make_shared<BatchNorm2dLayer<T>>(c_out));
  seq->append("act", std::make_shared<ReluLayer<T>>());
  return seq;
}

}  // namespace detail

// Four-level encoder/decoder: encoder operations at the configured widths
// with 2x2 pooling between levels, skip concatenation on the way up, and a
// 1x1 conv + sigmoid head, one output channel per class.
template <typename T>
class UNet : public Layer<T> {
 public:
  explicit UNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto& w = cfg_.widths;
    enc1_ = this->register_child("enc1", detail::make_block<T>(cfg_, cfg_.in_channels, w[0]));
    enc2_ = this->register_child("enc2", detail::make_block<T>(cfg_, w[0], w[1]));
    enc3_ = this->register_child("enc3", detail::make_block<T>(cfg_, w[1], w[2]));
    enc4_ = this->register_child("enc4", detail::make_block<T>(cfg_, w[2], w[3]));
    pool_ = this->register_child("pool", std::make_shared<MaxPool2Layer<T>>());
    up3_ = this->register_child("up3", detail::make_upconv<T>(cfg_, w[3], w[2]));
    dec3_ = this->register_child("dec3", detail::make_block<T>(cfg_, 2 * w[2], w[2]));
    up2_ = this->register_child("up2", detail::make_upconv<T>(cfg_, w[2], w[1]));
    dec2_ = this->register_child("dec2", detail::make_block<T>(cfg_, 2 * w[1], w[1]));
    up1_ = this->register_child("up1", detail::make_upconv<T>(cfg_, w[1], w[0]));
    dec1_ = this->register_child("dec1", detail::make_block<T>(cfg_, 2 * w[0], w[0]));
    head_ = this->register_child(
        "head", std::make_shared<Conv2dLayer<T>>(w[0], cfg_.out_channels, ConvSpec::pointwise()));
  }

  // Per-level encoder features, shallow to deep.
  std::array<Tensor<T>, 4> encode(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    check_input(x.shape());
    std::array<Tensor<T>, 4> f;
    f[0] = enc1_->forward(x, tape);
    f[1] = enc2_->forward(pool_->forward(f[0], tape), tape);
    f[2] = enc3_->forward(pool_->forward(f[1], tape), tape);
    f[3] = enc4_->forward(pool_->forward(f[2], tape), tape);
    return f;
  }

  // Decoder over encoder features; skips enter the concat first.
  Tensor<T> decode(const std::array<Tensor<T>, 4>& f, Tape<T>* tape = nullptr) {
    auto d3 = dec3_->forward(
        concat_channels<T>({f[2], up3_->forward(f[3], tape)}, tape), tape);
    auto d2 = dec2_->forward(concat_channels<T>({f[1], up2_->forward(d3, tape)}, tape), tape);
    auto d1 = dec1_->forward(concat_channels<T>({f[0], up1_->forward(d2, tape)}, tape), tape);
    return sigmoid(head_->forward(d1, tape), tape);
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) override {
    return decode(encode(x, tape), tape);
  }

  const ModelConfig& config() const { return cfg_; }

 private:
  void check_input(const Shape4& s) const {
    if (s.c != cfg_.in_channels) {
      throw DataError("model input has " + std::to_string(s.c) + " channels, expected " +
                      std::to_string(cfg_.in_channels));
    }
    if (s.h % 8 != 0 || s.w % 8 != 0) {
      throw DataError("model input extents " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                      " must be divisible by 8 (three pooling levels)");
    }
  }

  ModelConfig cfg_;
  std::shared_ptr<Layer<T>> enc1_, enc2_, enc3_, enc4_;
  std::shared_ptr<MaxPool2Layer<T>> pool_;
  std::shared_ptr<Sequential<T>> up3_, up2_, up1_;
  std::shared_ptr<Layer<T>> dec3_, dec2_, dec1_;
  std::shared_ptr<Conv2dLayer<T>> head_;
};

template <typename T>
std::shared_ptr<UNet<T>> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  auto model = std::make_shared<UNet<T>>(cfg);
  kaiming_init(*model, seed);
  return model;
}

struct ParameterRow {
  std::string name;
  Shape4 shape;
  std::size_t count;
};

struct ParameterReport {
  std::vector<ParameterRow> rows;
  std::size_t total_with_norm = 0;     // every parameter tensor
  std::size_t total_without_norm = 0;  // excluding norm scale/shift
  double ratio_vs = 0.0;               // this total / comparison total
  bool has_ratio = false;
};

template <typename T>
ParameterReport count_parameters(Layer<T>& model) {
  ParameterReport report;
  model.visit_parameters([&](const std::string& name, Tensor<T>& t) {
    report.rows.push_back({name, t.shape(), t.numel()});
    report.total_with_norm += t.numel();
    const auto dot = name.rfind('.');
    const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
    if (leaf != "scale" && leaf != "shift") report.total_without_norm += t.numel();
  });
  return report;
}

template <typename T>
ParameterReport count_parameters(Layer<T>& model, Layer<T>& versus) {
  ParameterReport report = count_parameters(model);
  const auto other = count_parameters(versus);
  report.ratio_vs =
      static_cast<double>(report.total_with_norm) / static_cast<double>(other.total_with_norm);
  report.has_ratio = true;
  return report;
}

// Thresholded per-class masks from a frozen model; values are exactly 0 or 1.
template <typename T>
Tensor<T> predict_mask(UNet<T>& model, const Tensor<T>& image, T threshold = T(0.5)) {
  if (model.training()) {
    throw std::invalid_argument("predict_mask: model must be in inference mode");
  }
  if (image.shape().h % 8 != 0 || image.shape().w % 8 != 0) {
    throw DataError("predict_mask: spatial extents " + std::to_string(image.shape().h) + "x" +
                    std::to_string(image.shape().w) +
                    " not divisible by 8; resize the input first");
  }
  auto probs = model.forward(image);
  Tensor<T> mask(probs.shape());
  for (std::size_t i = 0; i < probs.numel(); ++i) {
    mask.data()[i] = probs.data()[i] >= threshold ? T(1) : T(0);
  }
  return mask;
}

}  // namespace sduseg
