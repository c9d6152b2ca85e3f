#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "sduseg/errors.hpp"
#include "sduseg/models.hpp"
#include "sduseg/optim.hpp"

namespace sduseg {

using json = nlohmann::json;

inline const char* upsample_mode_name(UpsampleMode m) {
  return m == UpsampleMode::kNearest ? "nearest" : "bilinear";
}

inline UpsampleMode upsample_mode_from_name(const std::string& name) {
  if (name == "nearest") return UpsampleMode::kNearest;
  if (name == "bilinear") return UpsampleMode::kBilinear;
  throw DataError("unknown upsample mode: " + name);
}

inline BlockKind block_kind_from_name(const std::string& name) {
  if (name == "sdu") return BlockKind::kSdu;
  if (name == "double_conv") return BlockKind::kDoubleConv;
  throw DataError("unknown block kind: " + name);
}

inline json model_config_json(const ModelConfig& cfg) {
  return json{{"in_channels", cfg.in_channels},
              {"out_channels", cfg.out_channels},
              {"widths", cfg.widths},
              {"block_kind", block_kind_name(cfg.block_kind)},
              {"use_norm", cfg.use_norm},
              {"upsample_mode", upsample_mode_name(cfg.upsample_mode)}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.in_channels = j.at("in_channels").get<int>();
  cfg.out_channels = j.at("out_channels").get<int>();
  const auto widths = j.at("widths").get<std::vector<int>>();
  if (widths.size() != cfg.widths.size()) {
    throw DataError("model config: expected 4 widths, got " + std::to_string(widths.size()));
  }
  std::copy(widths.begin(), widths.end(), cfg.widths.begin());
  cfg.block_kind = block_kind_from_name(j.at("block_kind").get<std::string>());
  cfg.use_norm = j.at("use_norm").get<bool>();
  cfg.upsample_mode = upsample_mode_from_name(j.at("upsample_mode").get<std::string>());
  cfg.validate();
  return cfg;
}

inline json train_config_json(const TrainConfig& cfg) {
  return json{{"learning_rate", cfg.learning_rate},
              {"beta1", cfg.beta1},
              {"beta2", cfg.beta2},
              {"eps_adam", cfg.eps_adam},
              {"batch_size", cfg.batch_size},
              {"epochs", cfg.epochs},
              {"seed", cfg.seed},
              {"checkpoint_every", cfg.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig cfg;
  cfg.learning_rate = j.at("learning_rate").get<double>();
  cfg.beta1 = j.at("beta1").get<double>();
  cfg.beta2 = j.at("beta2").get<double>();
  cfg.eps_adam = j.at("eps_adam").get<double>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.epochs = j.at("epochs").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.checkpoint_every = j.at("checkpoint_every").get<int>();
  cfg.validate();
  return cfg;
}

namespace detail {

constexpr char kCheckpointMagic[4] = {'S', 'D', 'U', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError("checkpoint: truncated file " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& in, const std::string& path) {
  const std::uint64_t lo = get_u32(in, path);
  const std::uint64_t hi = get_u32(in, path);
  return lo | (hi << 32);
}

inline float get_f32(std::istream& in, const std::string& path) {
  return std::bit_cast<float>(get_u32(in, path));
}

inline void put_f32_span(std::ostream& out, const float* data, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) put_f32(out, data[i]);
}

inline void get_f32_span(std::istream& in, float* data, std::size_t count,
                         const std::string& path) {
  for (std::size_t i = 0; i < count; ++i) data[i] = get_f32(in, path);
}

}  // namespace detail

// Layout: "SDUC", u32 version, u64 metadata length, metadata (JSON), then the
// f32 little-endian blob — parameters in visit order, buffers after — and the
// Adam moments (m then v per parameter) when present. The metadata's tensor
// table (name, shape, byte offset into the blob) pins the order.
inline void save_checkpoint(const std::string& path, UNet<float>& model, const TrainConfig& tcfg,
                            int epoch, double best_val_dice,
                            const AdamOptimizer<float>* adam = nullptr) {
  json table = json::array();
  std::uint64_t offset = 0;
  std::vector<const Tensor<float>*> order;
  auto add_row = [&](const std::string& name, const Tensor<float>& t, const char* kind) {
    table.push_back(json{{"name", name},
                         {"shape", {t.shape().n, t.shape().c, t.shape().h, t.shape().w}},
                         {"offset", offset},
                         {"kind", kind}});
    order.push_back(&t);
    offset += t.numel() * 4;
  };
  model.visit_parameters(
      [&](const std::string& name, Tensor<float>& t) { add_row(name, t, "param"); });
  model.visit_buffers(
      [&](const std::string& name, Tensor<float>& t) { add_row(name, t, "buffer"); });

  json meta{{"model", model_config_json(model.config())},
            {"train", train_config_json(tcfg)},
            {"epoch", epoch},
            {"best_val_dice", best_val_dice},
            {"tensors", std::move(table)},
            {"adam", json{{"present", adam != nullptr},
                          {"steps", adam ? adam->steps() : 0}}}};
  const std::string text = meta.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  out.write(detail::kCheckpointMagic, 4);
  detail::put_u32(out, detail::kCheckpointVersion);
  detail::put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Tensor<float>* t : order) detail::put_f32_span(out, t->data(), t->numel());
  if (adam) {
    model.visit_parameters([&](const std::string& name, Tensor<float>& t) {
      const auto it = adam->state().find(name);
      if (it == adam->state().end() || it->second.m.empty()) {
        // Parameter never stepped; store zero moments.
        for (std::size_t i = 0; i < 2 * t.numel(); ++i) detail::put_f32(out, 0.0f);
        return;
      }
      detail::put_f32_span(out, it->second.m.data(), it->second.m.size());
      detail::put_f32_span(out, it->second.v.data(), it->second.v.size());
    });
  }
  if (!out) throw DataError("checkpoint: short write to " + path);
}

struct LoadedCheckpoint {
  std::shared_ptr<UNet<float>> model;
  TrainConfig train_config;
  int epoch = 0;
  double best_val_dice = 0.0;
  bool has_adam = false;
  long long adam_steps = 0;
  std::map<std::string, AdamOptimizer<float>::Moments> adam_state;

  // Fresh optimizer carrying the saved moments.
  AdamOptimizer<float> make_optimizer() const {
    AdamOptimizer<float> opt(train_config);
    if (has_adam) opt.restore(adam_state, adam_steps);
    return opt;
  }
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, 4) != 0) {
    throw DataError("checkpoint: bad magic in " + path);
  }
  const std::uint32_t version = detail::get_u32(in, path);
  if (version != detail::kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version) + " in " + path);
  }
  const std::uint64_t meta_len = detail::get_u64(in, path);
  std::string text(meta_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw DataError("checkpoint: truncated metadata in " + path);
  json meta;
  try {
    meta = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError("checkpoint: metadata is not valid json in " + path + ": " + e.what());
  }

  LoadedCheckpoint out;
  const ModelConfig mcfg = model_config_from_json(meta.at("model"));
  out.train_config = train_config_from_json(meta.at("train"));
  out.epoch = meta.at("epoch").get<int>();
  out.best_val_dice = meta.at("best_val_dice").get<double>();
  out.model = std::make_shared<UNet<float>>(mcfg);

  // The table must match the freshly built model tensor for tensor.
  const json& table = meta.at("tensors");
  std::size_t row = 0;
  std::uint64_t expect_offset = 0;
  auto fill = [&](const std::string& name, Tensor<float>& t, const char* kind) {
    if (row >= table.size()) throw DataError("checkpoint: tensor table too short in " + path);
    const json& r = table[row++];
    const auto shape = r.at("shape").get<std::vector<int>>();
    if (r.at("name").get<std::string>() != name || r.at("kind").get<std::string>() != kind ||
        shape != std::vector<int>{t.shape().n, t.shape().c, t.shape().h, t.shape().w}) {
      throw DataError("checkpoint: tensor table mismatch at " + name + " in " + path);
    }
    if (r.at("offset").get<std::uint64_t>() != expect_offset) {
      throw DataError("checkpoint: bad offset for " + name + " in " + path);
    }
    expect_offset += t.numel() * 4;
    detail::get_f32_span(in, t.data(), t.numel(), path);
  };
  out.model->visit_parameters(
      [&](const std::string& name, Tensor<float>& t) { fill(name, t, "param"); });
  out.model->visit_buffers(
      [&](const std::string& name, Tensor<float>& t) { fill(name, t, "buffer"); });
  if (row != table.size()) throw DataError("checkpoint: tensor table too long in " + path);

  const json& adam = meta.at("adam");
  out.has_adam = adam.at("present").get<bool>();
  if (out.has_adam) {
    out.adam_steps = adam.at("steps").get<long long>();
    out.model->visit_parameters([&](const std::string& name, Tensor<float>& t) {
      AdamOptimizer<float>::Moments mo;
      mo.m.resize(t.numel());
      mo.v.resize(t.numel());
      detail::get_f32_span(in, mo.m.data(), mo.m.size(), path);
      detail::get_f32_span(in, mo.v.data(), mo.v.size(), path);
      out.adam_state.emplace(name, std::move(mo));
    });
  }
  return out;
}

}  // namespace sduseg
