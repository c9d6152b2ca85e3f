#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "sduseg/layers.hpp"
#include "sduseg/rng.hpp"

namespace sduseg {

// One stacked-dilation operation: a standard 3x3 conv followed by a cascade
// of dilated 3x3 convs, every branch output kept and concatenated. Fractions
// size the branches so the concatenation has exactly n_out channels.
struct SduBlockConfig {
  int n_in = 0;
  int n_out = 0;
  std::vector<double> split_fractions = {0.5, 0.25, 0.125, 0.0625, 0.0625};
  std::vector<int> dilation_rates = {1, 2, 4, 8, 16};
  bool use_norm = true;

  std::vector<int> branch_widths() const {
    validate();
    std::vector<int> widths(split_fractions.size());
    for (std::size_t i = 0; i < split_fractions.size(); ++i) {
      widths[i] = static_cast<int>(std::lround(n_out * split_fractions[i]));
    }
    return widths;
  }

  void validate() const {
    if (n_in < 1 || n_out < 1) {
      throw std::invalid_argument("sdu block: channel counts must be >= 1, got " +
                                  std::to_string(n_in) + " -> " + std::to_string(n_out));
    }
    if (split_fractions.empty()) {
      throw std::invalid_argument("sdu block: at least one branch required");
    }
    if (split_fractions.size() != dilation_rates.size()) {
      throw std::invalid_argument("sdu block: " + std::to_string(split_fractions.size()) +
                                  " split fractions vs " + std::to_string(dilation_rates.size()) +
                                  " dilation rates");
    }
    double fsum = 0;
    for (double f : split_fractions) fsum += f;
    if (std::abs(fsum - 1.0) > 1e-9) {
      throw std::invalid_argument("sdu block: split fractions sum to " + std::to_string(fsum) +
                                  ", expected 1");
    }
    for (std::size_t i = 0; i < split_fractions.size(); ++i) {
      const double w = n_out * split_fractions[i];
      const double r = std::lround(w);
      if (std::abs(w - r) > 1e-9 || r < 1) {
        throw std::invalid_argument("sdu block: branch " + std::to_string(i) + " width " +
                                    std::to_string(w) + " is not a positive integer");
      }
    }
    if (dilation_rates.front() != 1) {
      throw std::invalid_argument("sdu block: first branch is the standard conv, rate must be 1");
    }
    for (std::size_t i = 1; i < dilation_rates.size(); ++i) {
      if (dilation_rates[i] <= dilation_rates[i - 1]) {
        throw std::invalid_argument("sdu block: dilation rates must be strictly increasing");
      }
    }
  }
};

template <typename T>
class SduBlock : public Layer<T> {
 public:
  explicit SduBlock(SduBlockConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto widths = cfg_.branch_widths();
    int c_in = cfg_.n_in;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      auto branch = std::make_shared<Sequential<T>>();
      branch->append("conv", std::make_shared<Conv2dLayer<T>>(
                                 c_in, widths[i], ConvSpec::same3x3(cfg_.dilation_rates[i])));
      if (cfg_.use_norm) {
        branch->append("norm", std::make_shared<BatchNorm2dLayer<T>>(widths[i]));
      }
      branch->append("act", std::make_shared<ReluLayer<T>>());
      branches_.push_back(this->register_child("branch" + std::to_string(i), branch));
      c_in = widths[i];
    }
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape = nullptr) override {
    std::vector<Tensor<T>> outs;
    outs.reserve(branches_.size());
    Tensor<T> cur = x;
    for (auto& branch : branches_) {
      cur = branch->forward(cur, tape);
      outs.push_back(cur);
    }
    return outs.size() == 1 ? outs.front() : concat_channels(outs, tape);
  }

  const SduBlockConfig& config() const { return cfg_; }

 private:
  SduBlockConfig cfg_;
  std::vector<std::shared_ptr<Sequential<T>>> branches_;
};

// Two plain 3x3 convs, each [+norm]+relu.
template <typename T>
std::shared_ptr<Sequential<T>> make_double_conv_block(int n_in, int n_out, bool use_norm) {
  auto seq = std::make_shared<Sequential<T>>();
  seq->append("conv1", std::make_shared<Conv2dLayer<T>>(n_in, n_out, ConvSpec::same3x3(1)));
  if (use_norm) seq->append("norm1", std::make_shared<BatchNorm2dLayer<T>>(n_out));
  seq->append("act1", std::make_shared<ReluLayer<T>>());
  seq->append("conv2", std::make_shared<Conv2dLayer<T>>(n_out, n_out, ConvSpec::same3x3(1)));
  if (use_norm) seq->append("norm2", std::make_shared<BatchNorm2dLayer<T>>(n_out));
  seq->append("act2", std::make_shared<ReluLayer<T>>());
  return seq;
}

// Conv weights ~ N(0, 2/fan_in); biases and norm shifts zero, norm scales
// one, norm running stats reset. Each parameter gets its own stream keyed by
// qualified name, so registration order cannot change the draw.
template <typename T>
void kaiming_init(Layer<T>& layer, std::uint64_t seed) {
  layer.visit_parameters([&](const std::string& qname, Tensor<T>& t) {
    const auto dot = qname.rfind('.');
    const std::string leaf = dot == std::string::npos ? qname : qname.substr(dot + 1);
    if (leaf == "weight") {
      Rng rng(derive_seed(seed, fnv1a64(qname)));
      const double fan_in =
          static_cast<double>(t.shape().c) * t.shape().h * t.shape().w;
      const double sd = std::sqrt(2.0 / fan_in);
      for (auto& v : t.values()) v = static_cast<T>(sd * rng.normal());
    } else if (leaf == "bias" || leaf == "shift") {
      std::fill(t.values().begin(), t.values().end(), T(0));
    } else if (leaf == "scale") {
      std::fill(t.values().begin(), t.values().end(), T(1));
    } else {
      throw std::invalid_argument("kaiming_init: unrecognized parameter " + qname);
    }
    t.drop_grad();
  });
  layer.visit_buffers([&](const std::string& qname, Tensor<T>& t) {
    const auto dot = qname.rfind('.');
    const std::string leaf = dot == std::string::npos ? qname : qname.substr(dot + 1);
    if (leaf == "running_mean") {
      std::fill(t.values().begin(), t.values().end(), T(0));
    } else if (leaf == "running_var") {
      std::fill(t.values().begin(), t.values().end(), T(1));
    } else {
      throw std::invalid_argument("kaiming_init: unrecognized buffer " + qname);
    }
  });
}

// Square receptive-field extents on the input, one entry per concatenated
// branch (a single-path block carries one entry).
struct ReceptiveField {
  std::vector<int> extents;

  void validate() const {
    if (extents.empty()) {
      throw std::invalid_argument("receptive field: no extents");
    }
    int prev = 0;
    for (int e : extents) {
      if (e < 1 || e % 2 == 0) {
        throw std::invalid_argument("receptive field: extent " + std::to_string(e) +
                                    " must be odd and >= 1");
      }
      if (e <= prev) {
        throw std::invalid_argument("receptive field: extents must increase along the cascade");
      }
      prev = e;
    }
  }

  std::string str() const {
    std::string s = "{";
    for (std::size_t i = 0; i < extents.size(); ++i) {
      if (i) s += ", ";
      s += std::to_string(extents[i]);
    }
    return s + "}";
  }
};

namespace detail {

struct RfWalk {
  std::vector<int> extents{1};
  int jump = 1;

  int widest() const { return *std::max_element(extents.begin(), extents.end()); }
};

// r <- r + (k-1)*d*j along each path; pooling multiplies the jump; a conv
// mixes all incoming channels so a carried set collapses to its widest
// member; an SDU block emits one extent per branch.
template <typename T>
void rf_advance(Layer<T>& layer, RfWalk& s) {
  if (auto* conv = dynamic_cast<Conv2dLayer<T>*>(&layer)) {
    const ConvSpec& cs = conv->spec();
    if (cs.kernel_h != cs.kernel_w || cs.dilation_h != cs.dilation_w ||
        cs.stride_h != cs.stride_w) {
      throw std::invalid_argument("receptive field: only square convolutions are supported");
    }
    const int e = s.widest() + (cs.kernel_h - 1) * cs.dilation_h * s.jump;
    s.extents = {e};
    s.jump *= cs.stride_h;
    return;
  }
  if (auto* sdu = dynamic_cast<SduBlock<T>*>(&layer)) {
    int e = s.widest();
    s.extents.clear();
    for (int d : sdu->config().dilation_rates) {
      e += 2 * d * s.jump;
      s.extents.push_back(e);
    }
    return;
  }
  if (dynamic_cast<MaxPool2Layer<T>*>(&layer)) {
    const int e = s.widest() + s.jump;
    s.extents = {e};
    s.jump *= 2;
    return;
  }
  if (dynamic_cast<BatchNorm2dLayer<T>*>(&layer) || dynamic_cast<ReluLayer<T>*>(&layer) ||
      dynamic_cast<SigmoidLayer<T>*>(&layer)) {
    return;
  }
  if (auto* seq = dynamic_cast<Sequential<T>*>(&layer)) {
    for (auto& [name, child] : seq->children()) rf_advance(*child, s);
    return;
  }
  throw std::invalid_argument("receptive field: unsupported operation in graph");
}

}  // namespace detail

template <typename T>
ReceptiveField receptive_field(Layer<T>& block) {
  detail::RfWalk walk;
  detail::rf_advance(block, walk);
  return ReceptiveField{walk.extents};
}

}  // namespace sduseg
