#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "sduseg/checkpoint.hpp"
#include "sduseg/data.hpp"
#include "sduseg/loss.hpp"
#include "sduseg/models.hpp"
#include "sduseg/optim.hpp"
#include "sduseg/stats.hpp"

namespace sduseg {

struct HistoryRow {
  int epoch = 0;
  std::string split;  // "train" or "val"
  int class_id = 0;
  double loss = 0.0;
  double dice = 0.0;
};

inline std::string history_csv_line(const HistoryRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%s,%d,%.17g,%.17g", r.epoch, r.split.c_str(), r.class_id,
                r.loss, r.dice);
  return buf;
}

namespace detail {

inline const Tensor<float>& sample_tensor(const Sample& s, bool mask) {
  return mask ? s.mask : s.image;
}

inline Tensor<float> stack_samples(const SampleSet& set, const std::vector<std::size_t>& idx,
                                   bool mask) {
  const Shape4 s0 = sample_tensor(set[idx[0]], mask).shape();
  const Shape4 shape{static_cast<int>(idx.size()), s0.c, s0.h, s0.w};
  std::vector<float> data;
  data.reserve(shape.numel());
  for (std::size_t i : idx) {
    const Tensor<float>& t = sample_tensor(set[i], mask);
    data.insert(data.end(), t.data(), t.data() + t.numel());
  }
  return Tensor<float>::from_data(shape, std::move(data));
}

// Shuffled indices chopped into batch_size runs; a trailing singleton joins
// the previous batch so normalization always sees at least two samples.
inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order,
                                                          int batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < order.size(); at += batch_size) {
    const std::size_t end = std::min(order.size(), at + batch_size);
    batches.emplace_back(order.begin() + at, order.begin() + end);
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back()[0]);
    batches.pop_back();
  }
  return batches;
}

struct ClassAccum {
  double loss = 0.0;
  double dice = 0.0;
  long images = 0;
};

// Per-image, per-class soft loss (the bi-dice summand) and hard dice of the
// thresholded prediction. Loss arithmetic mirrors bi_dice_loss exactly.
inline void accumulate_metrics(const Tensor<float>& truth, const Tensor<float>& pred,
                               float threshold, std::vector<ClassAccum>& acc) {
  const Shape4 s = truth.shape();
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* p = truth.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
      const float* q = pred.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
      float sp = 0, sq = 0, spq = 0;
      long tp = 0, t1 = 0, q1 = 0;
      for (std::size_t j = 0; j < plane; ++j) {
        sp += p[j];
        sq += q[j];
        spq += p[j] * q[j];
        const bool tb = p[j] >= 0.5f;
        const bool qb = q[j] >= threshold;
        t1 += tb;
        q1 += qb;
        tp += tb && qb;
      }
      const float eps = 1;
      const float np = static_cast<float>(plane);
      const float loss = 2 - (2 * spq + eps) / (sp + sq + eps) -
                         (2 * (np - sp - sq + spq) + eps) / (2 * np - sp - sq + eps);
      acc[c].loss += loss;
      acc[c].dice += (t1 + q1 == 0) ? 1.0 : 2.0 * tp / static_cast<double>(t1 + q1);
      acc[c].images += 1;
    }
  }
}

inline void check_extents(const SampleSet& set, const char* what) {
  if (set.empty()) return;
  const Shape4 s0 = set[0].image.shape();
  if (s0.h % 8 != 0 || s0.w % 8 != 0) {
    throw DataError(std::string(what) + " sample extents " + std::to_string(s0.h) + "x" +
                    std::to_string(s0.w) + " must be divisible by 8");
  }
  for (std::size_t i = 1; i < set.size(); ++i) {
    const Shape4 s = set[i].image.shape();
    if (s.h != s0.h || s.w != s0.w || s.c != s0.c) {
      throw DataError(std::string(what) + " sample " + set[i].id +
                      " extents differ from the rest of the set");
    }
  }
}

inline void append_history(const std::string& path, const std::vector<HistoryRow>& rows) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("train: cannot write history " + path);
  if (fresh) out << "epoch,split,class,loss,dice\n";
  for (const HistoryRow& r : rows) out << history_csv_line(r) << "\n";
}

}  // namespace detail

struct EvalClass {
  Summary dice;
  double mean_loss = 0.0;
};

struct EvalResult {
  std::vector<std::string> ids;            // evaluation order (sorted by id)
  std::vector<std::vector<double>> dice;   // [class][image]
  std::vector<std::vector<double>> loss;   // [class][image]
  std::vector<double> per_image;           // dice averaged over classes
  std::vector<EvalClass> per_class;
  double mean_dice = 0.0;  // grand mean over class x image
};

// Scores arbitrary predictions: per-class soft loss plus hard dice at the
// threshold, iterated in id order so aggregates ignore input order.
template <typename Predict>
EvalResult evaluate_with(const SampleSet& set, float threshold, Predict&& predict) {
  if (set.empty()) throw std::invalid_argument("evaluate: no samples");

  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return set[a].id < set[b].id; });

  const int k = set.classes;
  EvalResult out;
  out.dice.assign(k, {});
  out.loss.assign(k, {});
  for (std::size_t i : order) {
    const Sample& s = set[i];
    const Tensor<float> pred = predict(s.image);
    if (!(pred.shape() == s.mask.shape())) {
      throw DataError("evaluate: prediction shape " + pred.shape().str() + " vs mask " +
                      s.mask.shape().str() + " for " + s.id);
    }
    std::vector<detail::ClassAccum> acc(k);
    detail::accumulate_metrics(s.mask, pred, threshold, acc);
    out.ids.push_back(s.id);
    double img_mean = 0;
    for (int c = 0; c < k; ++c) {
      out.dice[c].push_back(acc[c].dice);
      out.loss[c].push_back(acc[c].loss);
      img_mean += acc[c].dice;
    }
    out.per_image.push_back(img_mean / k);
  }
  double grand = 0;
  for (int c = 0; c < k; ++c) {
    EvalClass ec;
    ec.dice = summarize(out.dice[c]);
    double l = 0;
    for (double v : out.loss[c]) l += v;
    ec.mean_loss = l / static_cast<double>(out.loss[c].size());
    grand += ec.dice.mean;
    out.per_class.push_back(ec);
  }
  out.mean_dice = grand / k;
  return out;
}

// Model front end: requires a frozen model whose head matches the class count.
inline EvalResult evaluate(UNet<float>& model, const SampleSet& set, float threshold = 0.5f) {
  if (model.training()) {
    throw std::invalid_argument("evaluate: model must be in inference mode");
  }
  if (!set.empty() && set.classes != model.config().out_channels) {
    throw DataError("evaluate: dataset has " + std::to_string(set.classes) +
                    " classes but model outputs " + std::to_string(model.config().out_channels));
  }
  detail::check_extents(set, "evaluate:");
  return evaluate_with(set, threshold,
                       [&](const Tensor<float>& image) { return model.forward(image); });
}

struct TrainResult {
  std::vector<HistoryRow> history;
  int best_epoch = 0;
  double best_val_dice = 0.0;
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string history_csv;
};

// Bi-dice + Adam over seeded shuffles. Per-epoch rows go to history.csv as
// `epoch,split,class,loss,dice`; the best validation checkpoint and the
// rolling last.ckpt (with Adam state) land in out_dir. Resuming: pass the
// restored optimizer, first_epoch = saved epoch + 1, and the saved best —
// shuffles are keyed by absolute epoch, so the continuation replays the
// uninterrupted run bit for bit.
inline TrainResult train(UNet<float>& model, const SampleSet& train_set, const SampleSet& val_set,
                         const TrainConfig& cfg, const std::string& out_dir,
                         AdamOptimizer<float>* optimizer = nullptr, int first_epoch = 1,
                         double prior_best_val = -1.0) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (static_cast<std::size_t>(cfg.batch_size) > train_set.size()) {
    throw std::invalid_argument("train: batch size " + std::to_string(cfg.batch_size) +
                                " exceeds training set size " + std::to_string(train_set.size()));
  }
  if (train_set.classes != model.config().out_channels) {
    throw DataError("train: dataset has " + std::to_string(train_set.classes) +
                    " classes but model outputs " + std::to_string(model.config().out_channels));
  }
  detail::check_extents(train_set, "train:");
  detail::check_extents(val_set, "train:");
  model.set_training(true);

  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.history_csv = out_dir + "/history.csv";
  result.best_checkpoint = out_dir + "/best.ckpt";
  result.last_checkpoint = out_dir + "/last.ckpt";
  result.best_val_dice = prior_best_val;
  result.best_epoch = first_epoch - 1;

  AdamOptimizer<float> own(cfg);
  AdamOptimizer<float>* opt = optimizer ? optimizer : &own;
  const int classes = train_set.classes;

  auto validate_rows = [&](int epoch) {
    model.set_training(false);
    const EvalResult ev = evaluate(model, val_set);
    model.set_training(true);
    std::vector<HistoryRow> rows;
    for (int c = 0; c < classes; ++c) {
      rows.push_back({epoch, "val", c, ev.per_class[c].mean_loss, ev.per_class[c].dice.mean});
    }
    return std::pair{rows, ev.mean_dice};
  };

  // Epoch 0: the untrained baseline, reported but never "best".
  if (first_epoch <= 1 && !val_set.empty()) {
    const auto baseline = validate_rows(0);
    detail::append_history(result.history_csv, baseline.first);
    result.history.insert(result.history.end(), baseline.first.begin(), baseline.first.end());
  }

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = first_epoch; epoch <= cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 0x1000 + static_cast<std::uint64_t>(epoch)));
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order.begin(), order.end(), rng);
    const auto batches = detail::make_batches(order, cfg.batch_size);

    std::vector<detail::ClassAccum> acc(classes);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const Tensor<float> x = detail::stack_samples(train_set, batches[b], false);
      const Tensor<float> y = detail::stack_samples(train_set, batches[b], true);
      Tape<float> tape;
      const Tensor<float> pred = model.forward(x, &tape);
      for (std::size_t i = 0; i < pred.numel(); ++i) {
        if (!std::isfinite(pred.data()[i])) {
          throw NumericError("train: non-finite network output at epoch " +
                             std::to_string(epoch) + " batch " + std::to_string(b));
        }
      }
      const Tensor<float> loss = bi_dice_loss(y, pred, 1.0f, &tape);
      if (!std::isfinite(loss.item())) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           " batch " + std::to_string(b));
      }
      model.visit_parameters([](const std::string&, Tensor<float>& t) { t.zero_grad(); });
      tape.backward(loss);
      opt->step(model);
      detail::accumulate_metrics(y, pred, 0.5f, acc);
    }

    std::vector<HistoryRow> rows;
    for (int c = 0; c < classes; ++c) {
      rows.push_back({epoch, "train", c, acc[c].loss / acc[c].images, acc[c].dice / acc[c].images});
    }
    if (!val_set.empty()) {
      auto [vrows, vdice] = validate_rows(epoch);
      rows.insert(rows.end(), vrows.begin(), vrows.end());
      if (vdice > result.best_val_dice) {
        result.best_val_dice = vdice;
        result.best_epoch = epoch;
        save_checkpoint(result.best_checkpoint, model, cfg, epoch, result.best_val_dice, opt);
      }
    }
    detail::append_history(result.history_csv, rows);
    result.history.insert(result.history.end(), rows.begin(), rows.end());

    const bool last = epoch == cfg.epochs;
    if (last || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)) {
      save_checkpoint(result.last_checkpoint, model, cfg, epoch, result.best_val_dice, opt);
    }
  }

  if (val_set.empty()) {
    // No validation signal: the final model stands in for "best".
    result.best_epoch = cfg.epochs;
    for (const HistoryRow& r : result.history) {
      if (r.epoch == cfg.epochs && r.split == "train") result.best_val_dice = r.dice;
    }
    save_checkpoint(result.best_checkpoint, model, cfg, cfg.epochs, result.best_val_dice, opt);
  }
  return result;
}

// id-based subset; mode and class count carry over.
inline SampleSet subset(const SampleSet& set, const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < set.size(); ++i) by_id.emplace(set[i].id, i);
  SampleSet out;
  out.mode = set.mode;
  out.classes = set.classes;
  for (const std::string& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("subset: unknown id " + id);
    out.samples.push_back(set[it->second]);
  }
  std::sort(out.samples.begin(), out.samples.end(),
            [](const Sample& a, const Sample& b) { return a.id < b.id; });
  return out;
}

enum class Pairing { kFold, kImage };

struct FoldOutcome {
  int fold = 0;
  double mean_dice = 0.0;          // on the held-out fold, best checkpoint
  std::vector<std::string> ids;    // held-out ids, sorted
  std::vector<double> per_image;   // dice averaged over classes, aligned with ids
};

struct CrossValResult {
  FoldPlan plan;
  std::vector<FoldOutcome> a, b;
  Summary summary_a, summary_b;  // over fold means
  bool has_b = false;
  Pairing pairing = Pairing::kFold;
  TTestResult ttest;  // meaningful only when has_b
};

// k-fold protocol: fold f trains on the complement with seed = base seed + f
// and is scored on fold f by its best-validation checkpoint. A second config
// reuses the same folds and seeds, giving honestly paired scores for the
// t-test (per-fold means by default, per-image with Pairing::kImage).
inline CrossValResult cross_validate(const SampleSet& set, const ModelConfig& config_a,
                                     const ModelConfig* config_b, const TrainConfig& tcfg, int k,
                                     const std::string& work_dir,
                                     Pairing pairing = Pairing::kFold, int jobs = 1) {
  if (jobs < 1) throw std::invalid_argument("cross-validate: jobs must be >= 1");
  CrossValResult out;
  out.plan = make_folds(set, k, tcfg.seed);
  out.has_b = config_b != nullptr;
  out.pairing = pairing;
  out.a.resize(k);
  if (out.has_b) out.b.resize(k);

  struct Task {
    const ModelConfig* config;
    int fold;
    FoldOutcome* slot;
    std::string dir;
  };
  std::vector<Task> tasks;
  for (int f = 0; f < k; ++f) {
    tasks.push_back({&config_a, f, &out.a[f], work_dir + "/a/fold" + std::to_string(f)});
    if (out.has_b) {
      tasks.push_back({config_b, f, &out.b[f], work_dir + "/b/fold" + std::to_string(f)});
    }
  }

  auto run_task = [&](const Task& task) {
    std::vector<std::string> train_ids;
    for (const auto& [id, fold] : out.plan.assignments) {
      if (fold != task.fold) train_ids.push_back(id);
    }
    const SampleSet tr = subset(set, train_ids);
    const SampleSet va = subset(set, out.plan.fold_ids(task.fold));
    TrainConfig fc = tcfg;
    fc.seed = tcfg.seed + static_cast<std::uint64_t>(task.fold);
    auto model = build_model<float>(*task.config, fc.seed);
    const TrainResult tr_out = train(*model, tr, va, fc, task.dir);

    const LoadedCheckpoint best = load_checkpoint(tr_out.best_checkpoint);
    best.model->set_training(false);
    const EvalResult ev = evaluate(*best.model, va);
    task.slot->fold = task.fold;
    task.slot->mean_dice = ev.mean_dice;
    task.slot->ids = ev.ids;
    task.slot->per_image = ev.per_image;
  };

  if (jobs == 1 || tasks.size() == 1) {
    for (const Task& t : tasks) run_task(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::mutex fail_mu;
    std::exception_ptr failure;
    auto worker = [&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= tasks.size()) return;
        try {
          run_task(tasks[i]);
        } catch (...) {
          std::lock_guard<std::mutex> lock(fail_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    const std::size_t n = std::min<std::size_t>(jobs, tasks.size());
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  auto fold_means = [](const std::vector<FoldOutcome>& v) {
    std::vector<double> m;
    for (const FoldOutcome& f : v) m.push_back(f.mean_dice);
    return m;
  };
  out.summary_a = summarize(fold_means(out.a));
  if (out.has_b) {
    out.summary_b = summarize(fold_means(out.b));
    if (pairing == Pairing::kFold) {
      out.ttest = paired_t_test(fold_means(out.a), fold_means(out.b));
    } else {
      std::vector<double> ia, ib;
      for (const FoldOutcome& f : out.a) ia.insert(ia.end(), f.per_image.begin(), f.per_image.end());
      for (const FoldOutcome& f : out.b) ib.insert(ib.end(), f.per_image.begin(), f.per_image.end());
      out.ttest = paired_t_test(ia, ib);
    }
  }
  return out;
}

}  // namespace sduseg
