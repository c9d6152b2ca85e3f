#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sduseg/errors.hpp"
#include "sduseg/netpbm.hpp"
#include "sduseg/ops.hpp"
#include "sduseg/rng.hpp"
#include "sduseg/tensor.hpp"

namespace sduseg {

enum class ChannelMode { kGray, kRgb };

inline const char* channel_mode_name(ChannelMode m) {
  return m == ChannelMode::kGray ? "gray" : "rgb";
}

// One image with its per-class masks; image values in [0,1], masks exactly
// 0/1, both as single-batch tensors so samples stack straight into batches.
struct Sample {
  std::string id;
  Tensor<float> image;  // 1 x C x H x W
  Tensor<float> mask;   // 1 x K x H x W
  std::string image_path;
  std::string mask_path;  // first class file when masks are per-class
};

struct SampleSet {
  std::vector<Sample> samples;  // sorted by id
  ChannelMode mode = ChannelMode::kGray;
  int classes = 1;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  const Sample& operator[](std::size_t i) const { return samples[i]; }
};

namespace detail {

constexpr double kMaskThreshold = 128.0 / 255.0;

inline Tensor<float> image_tensor(const PnmImage& img) {
  Tensor<float> t(Shape4{1, img.channels, img.h, img.w});
  const float maxval = static_cast<float>(img.maxval);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.h; ++y) {
      for (int x = 0; x < img.w; ++x) {
        t.at(0, c, y, x) =
            static_cast<float>(img.data[(static_cast<std::size_t>(y) * img.w + x) * img.channels +
                                        c]) /
            maxval;
      }
    }
  }
  return t;
}

inline void binarize_into(const PnmImage& mask, Tensor<float>& out, int klass,
                          const std::string& path) {
  if (mask.channels != 1) {
    throw DataError("mask must be grayscale: " + path);
  }
  for (int y = 0; y < mask.h; ++y) {
    for (int x = 0; x < mask.w; ++x) {
      const double v = static_cast<double>(mask.data[static_cast<std::size_t>(y) * mask.w + x]) /
                       mask.maxval;
      out.at(0, klass, y, x) = v >= kMaskThreshold ? 1.0f : 0.0f;
    }
  }
}

}  // namespace detail

// Pairs every image with the mask files sharing its stem. Single-class masks
// are `<stem>.pgm`; multi-class datasets carry one file per class,
// `<stem>.c<k>.pgm` with k starting at 0. Mixing the two layouts, or leaving
// an image or mask unmatched, is an error.
inline SampleSet load_folder(const std::string& images_dir, const std::string& masks_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(images_dir)) throw DataError("not a directory: " + images_dir);
  if (!fs::is_directory(masks_dir)) throw DataError("not a directory: " + masks_dir);

  std::map<std::string, std::string> images;  // stem -> path, sorted
  for (const auto& entry : fs::directory_iterator(images_dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (ext != ".pgm" && ext != ".ppm" && ext != ".png") continue;
    const auto stem = entry.path().stem().string();
    if (!images.emplace(stem, entry.path().string()).second) {
      throw DataError("duplicate image stem: " + stem);
    }
  }
  if (images.empty()) throw DataError("no images found under " + images_dir);

  // stem -> class index -> path; class -1 marks the single-file layout
  std::map<std::string, std::map<int, std::string>> masks;
  for (const auto& entry : fs::directory_iterator(masks_dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".pgm") continue;
    std::string stem = entry.path().stem().string();
    int klass = -1;
    const auto dot = stem.rfind('.');
    if (dot != std::string::npos && dot + 2 <= stem.size() && stem[dot + 1] == 'c') {
      const std::string digits = stem.substr(dot + 2);
      if (!digits.empty() && digits.size() <= 6 &&
          digits.find_first_not_of("0123456789") == std::string::npos) {
        klass = std::stoi(digits);
        stem = stem.substr(0, dot);
      }
    }
    masks[stem][klass] = entry.path().string();
  }

  for (const auto& [stem, files] : masks) {
    if (!images.count(stem)) throw DataError("mask without image: " + stem);
    if (files.count(-1) && files.size() > 1) {
      throw DataError("mask " + stem + " mixes single-file and per-class layouts");
    }
  }

  SampleSet set;
  int classes = -1;
  int mode_channels = -1;
  for (const auto& [stem, image_path] : images) {
    const auto found = masks.find(stem);
    if (found == masks.end()) throw DataError("image without mask: " + stem);
    const auto& files = found->second;

    PnmImage raw;
    try {
      raw = read_pnm(image_path);
    } catch (const DataError&) {
      if (image_path.ends_with(".png")) {
        throw DataError("png decoding not built in, convert to pgm/ppm: " + image_path);
      }
      throw;
    }
    if (mode_channels == -1) mode_channels = raw.channels;
    if (raw.channels != mode_channels) {
      throw DataError("image " + stem + " has " + std::to_string(raw.channels) +
                      " channels, set uses " + std::to_string(mode_channels));
    }

    int k = files.count(-1) ? 1 : static_cast<int>(files.size());
    if (!files.count(-1)) {
      int expect = 0;
      for (const auto& [klass, path] : files) {
        if (klass != expect++) {
          throw DataError("mask classes for " + stem + " are not contiguous from 0");
        }
      }
    }
    if (classes == -1) classes = k;
    if (k != classes) {
      throw DataError("mask " + stem + " has " + std::to_string(k) + " classes, set uses " +
                      std::to_string(classes));
    }

    Sample s;
    s.id = stem;
    s.image_path = image_path;
    s.image = detail::image_tensor(raw);
    s.mask = Tensor<float>(Shape4{1, classes, raw.h, raw.w});
    for (const auto& [klass, path] : files) {
      const PnmImage m = read_pnm(path);
      if (m.h != raw.h || m.w != raw.w) {
        throw DataError("mask extents " + std::to_string(m.w) + "x" + std::to_string(m.h) +
                        " do not match image " + std::to_string(raw.w) + "x" +
                        std::to_string(raw.h) + " for " + stem);
      }
      detail::binarize_into(m, s.mask, std::max(klass, 0), path);
      if (s.mask_path.empty()) s.mask_path = path;
    }
    set.samples.push_back(std::move(s));
  }
  set.mode = mode_channels == 1 ? ChannelMode::kGray : ChannelMode::kRgb;
  set.classes = classes;
  return set;
}

// Deterministic k-fold assignment: ids sorted, shuffled by seed, dealt
// round-robin. Fold f is the validation split of run f.
struct FoldPlan {
  int k = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, int>> assignments;  // sorted by id

  int fold_of(const std::string& id) const {
    const auto it = std::lower_bound(
        assignments.begin(), assignments.end(), id,
        [](const auto& row, const std::string& key) { return row.first < key; });
    if (it == assignments.end() || it->first != id) {
      throw DataError("fold plan: unknown id " + id);
    }
    return it->second;
  }

  std::vector<std::string> fold_ids(int fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : assignments) {
      if (f == fold) out.push_back(id);
    }
    return out;
  }

  std::string to_csv() const {
    std::string out = "id,fold\n";
    for (const auto& [id, fold] : assignments) {
      out += id + "," + std::to_string(fold) + "\n";
    }
    return out;
  }

  static FoldPlan from_csv(const std::string& text) {
    FoldPlan plan;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "id,fold") {
      throw DataError("fold plan csv: expected header id,fold");
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto comma = line.rfind(',');
      if (comma == std::string::npos) throw DataError("fold plan csv: bad row " + line);
      const std::string id = line.substr(0, comma);
      int fold = -1;
      try {
        fold = std::stoi(line.substr(comma + 1));
      } catch (const std::exception&) {
        throw DataError("fold plan csv: bad fold in row " + line);
      }
      if (fold < 0) throw DataError("fold plan csv: bad fold in row " + line);
      plan.assignments.emplace_back(id, fold);
      plan.k = std::max(plan.k, fold + 1);
    }
    std::sort(plan.assignments.begin(), plan.assignments.end());
    return plan;
  }
};

inline FoldPlan make_folds(const SampleSet& set, int k, std::uint64_t seed) {
  if (k < 2) throw DataError("fold plan: k must be >= 2, got " + std::to_string(k));
  if (set.size() < static_cast<std::size_t>(k)) {
    throw DataError("fold plan: " + std::to_string(set.size()) + " samples but k = " +
                    std::to_string(k));
  }
  std::vector<std::string> ids;
  ids.reserve(set.size());
  for (const auto& s : set.samples) ids.push_back(s.id);
  std::sort(ids.begin(), ids.end());
  for (std::size_t i = 1; i < ids.size(); ++i) {
    if (ids[i] == ids[i - 1]) throw DataError("fold plan: duplicate id " + ids[i]);
  }

  Rng rng(seed);
  shuffle(ids.begin(), ids.end(), rng);

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    plan.assignments.emplace_back(ids[i], static_cast<int>(i % k));
  }
  std::sort(plan.assignments.begin(), plan.assignments.end());
  return plan;
}

namespace detail {

// General half-pixel tap: src = (dst + 0.5) * in/out - 0.5, clamped. For a
// 2x target this reproduces bilinear_tap bit for bit.
inline LinearTap resize_tap(int o, int in_extent, int out_extent) {
  double s = (o + 0.5) * (static_cast<double>(in_extent) / out_extent) - 0.5;
  if (s < 0) s = 0;
  const double smax = in_extent - 1;
  if (s > smax) s = smax;
  const int i0 = static_cast<int>(s);
  const int i1 = std::min(i0 + 1, in_extent - 1);
  return {i0, i1, s - i0};
}

}  // namespace detail

// Resample to target extents with the same half-pixel source mapping and
// combine arithmetic the decoder's upsampling uses. Images go bilinear, masks
// nearest so labels never interpolate. An identity target reproduces the
// buffer bit for bit, and a 2x target matches upsample2x exactly.
template <typename T>
Tensor<T> resize(const Tensor<T>& input, int out_h, int out_w, UpsampleMode mode) {
  const Shape4 s = input.shape();
  if (out_h < 1 || out_w < 1) {
    throw DataError("resize: target extents must be >= 1, got " + std::to_string(out_h) + "x" +
                    std::to_string(out_w));
  }
  std::vector<detail::LinearTap> th(static_cast<std::size_t>(out_h));
  std::vector<detail::LinearTap> tw(static_cast<std::size_t>(out_w));
  for (int o = 0; o < out_h; ++o) th[static_cast<std::size_t>(o)] = detail::resize_tap(o, s.h, out_h);
  for (int o = 0; o < out_w; ++o) tw[static_cast<std::size_t>(o)] = detail::resize_tap(o, s.w, out_w);

  Tensor<T> out(Shape4{s.n, s.c, out_h, out_w});
  const int planes = s.n * s.c;
  for (int p = 0; p < planes; ++p) {
    const T* src = input.data() + static_cast<std::size_t>(p) * s.h * s.w;
    T* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto& y = th[static_cast<std::size_t>(oy)];
      T* drow = dst + static_cast<std::size_t>(oy) * out_w;
      if (mode == UpsampleMode::kNearest) {
        const int yy = y.frac < 0.5 ? y.i0 : y.i1;
        const T* srow = src + static_cast<std::size_t>(yy) * s.w;
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& x = tw[static_cast<std::size_t>(ox)];
          drow[ox] = srow[x.frac < 0.5 ? x.i0 : x.i1];
        }
      } else {
        const T* r0 = src + static_cast<std::size_t>(y.i0) * s.w;
        const T* r1 = src + static_cast<std::size_t>(y.i1) * s.w;
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& x = tw[static_cast<std::size_t>(ox)];
          const double v0 = (1.0 - x.frac) * r0[x.i0] + x.frac * r0[x.i1];
          const double v1 = (1.0 - x.frac) * r1[x.i0] + x.frac * r1[x.i1];
          drow[ox] = static_cast<T>((1.0 - y.frac) * v0 + y.frac * v1);
        }
      }
    }
  }
  return out;
}

// ---- Synthetic ultrasound-like data ----------------------------------------

// Axis-aligned ellipse in pixel coordinates.
struct SynthEllipse {
  double cy = 0, cx = 0, ry = 1, rx = 1;

  bool contains(int y, int x) const {
    const double dy = (y - cy) / ry;
    const double dx = (x - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
  }
};

struct SynthSample {
  std::string id;
  std::vector<SynthEllipse> ellipses;
  double bg_level = 0, fg_level = 0;
};

namespace detail {

inline double synth_foreground_fraction(const std::vector<SynthEllipse>& ellipses, int h, int w) {
  std::size_t fg = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (const auto& e : ellipses) {
        if (e.contains(y, x)) {
          ++fg;
          break;
        }
      }
    }
  }
  return static_cast<double>(fg) / (static_cast<double>(h) * w);
}

}  // namespace detail

inline std::string synth_id(int index, int n) {
  int width = 4;
  for (int v = n - 1; v >= 10000; v /= 10) ++width;
  std::string digits = std::to_string(index);
  return "s" + std::string(width - digits.size(), '0') + digits;
}

// Geometry only, independent of the speckle flag; sample i depends on
// (seed, i) alone so any subset regenerates identically.
inline std::vector<SynthSample> synth_plan(int n, int h, int w, std::uint64_t seed) {
  if (n < 1) throw DataError("synth: need at least one sample");
  if (h % 8 != 0 || w % 8 != 0) {
    throw DataError("synth: extents " + std::to_string(h) + "x" + std::to_string(w) +
                    " must be divisible by 8");
  }
  std::vector<SynthSample> plan;
  plan.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, 2 * static_cast<std::uint64_t>(i)));
    SynthSample s;
    s.id = synth_id(i, n);
    s.bg_level = rng.uniform(0.05, 0.25);
    s.fg_level = rng.uniform(0.55, 0.95);
    const int count = 1 + static_cast<int>(rng.below(2));
    for (int e = 0; e < count; ++e) {
      SynthEllipse el;
      el.ry = rng.uniform(h / 10.0, h / 3.0);
      el.rx = rng.uniform(w / 10.0, w / 3.0);
      el.cy = rng.uniform(el.ry, h - 1 - el.ry);
      el.cx = rng.uniform(el.rx, w - 1 - el.rx);
      s.ellipses.push_back(el);
    }
    // Keep the foreground share inside [2%, 40%]: scale all axes down when
    // two large ellipses cover too much, up when a tiny grid rounds the
    // interiors away. The band is wide, so the loop settles in a few steps.
    for (int guard = 0; guard < 64; ++guard) {
      const double frac = detail::synth_foreground_fraction(s.ellipses, h, w);
      const double factor = frac > 0.40 ? 0.9 : (frac < 0.02 ? 1.25 : 0.0);
      if (factor == 0.0) break;
      for (auto& el : s.ellipses) {
        el.ry = std::min(el.ry * factor, (h - 1) / 2.0);
        el.rx = std::min(el.rx * factor, (w - 1) / 2.0);
        el.cy = std::clamp(el.cy, el.ry, h - 1 - el.ry);
        el.cx = std::clamp(el.cx, el.rx, w - 1 - el.rx);
      }
    }
    plan.push_back(std::move(s));
  }
  return plan;
}

// Renders the plan to `<dir>/images/<id>.pgm` + `<dir>/masks/<id>.pgm` and
// returns the loaded set. Speckle multiplies each pixel by a Rayleigh factor
// with unit mean, from a stream separate from the geometry, so the masks (and
// the geometry) match the speckle-free run.
inline SampleSet synth_dataset(const std::string& dir, int n, int h, int w, std::uint64_t seed,
                               bool speckle) {
  namespace fs = std::filesystem;
  const auto plan = synth_plan(n, h, w, seed);
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");

  constexpr double kRayleighUnitMeanSigma = 0.7978845608028654;  // sqrt(2/pi)
  std::vector<unsigned char> image(static_cast<std::size_t>(h) * w);
  std::vector<unsigned char> mask(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < n; ++i) {
    const SynthSample& s = plan[static_cast<std::size_t>(i)];
    Rng noise(derive_seed(seed, 2 * static_cast<std::uint64_t>(i) + 1));
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        bool fg = false;
        for (const auto& e : s.ellipses) {
          if (e.contains(y, x)) {
            fg = true;
            break;
          }
        }
        double v = fg ? s.fg_level : s.bg_level;
        if (speckle) v *= noise.rayleigh(kRayleighUnitMeanSigma);
        const std::size_t at = static_cast<std::size_t>(y) * w + x;
        image[at] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        mask[at] = fg ? 255 : 0;
      }
    }
    write_pgm((fs::path(dir) / "images" / (s.id + ".pgm")).string(), h, w, image);
    write_pgm((fs::path(dir) / "masks" / (s.id + ".pgm")).string(), h, w, mask);
  }
  return load_folder((fs::path(dir) / "images").string(), (fs::path(dir) / "masks").string());
}

}  // namespace sduseg
