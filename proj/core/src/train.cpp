#include "thrid/train.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "thrid/error.hpp"

namespace thrid {

std::string init_mode_name(InitMode m) {
  return m == InitMode::gaussian ? "gaussian" : "pretrained_frozen";
}

InitMode init_mode_from_name(const std::string& name) {
  if (name == "gaussian") return InitMode::gaussian;
  if (name == "pretrained_frozen" || name == "pretrained-frozen") {
    return InitMode::pretrained_frozen;
  }
  throw FormatError("unknown init mode '" + name + "'");
}

void TrainConfig::validate() const {
  if (learning_rate <= 0 || epsilon <= 0 || lr_decay <= 0) {
    throw FormatError("train config: rates must be positive");
  }
  if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1) {
    throw FormatError("train config: beta1 and beta2 must lie in (0,1)");
  }
  if (batch_size < 1) throw FormatError("train config: batch_size must be >= 1");
  if (epochs < 0) throw FormatError("train config: epochs must be >= 0");
  network.validate();
}

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void adam_step(NetworkState& params,
               const std::unordered_map<std::string, std::vector<float>>& grads, AdamState& state,
               const AdamHyper& hyper) {
  state.t += 1;
  const double bias1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double bias2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  for (const std::string& name : params.order) {
    if (params.frozen.count(name) > 0) continue;
    const auto git = grads.find(name);
    if (git == grads.end()) continue;
    Tensor& p = params.at(name);
    const std::vector<float>& g = git->second;
    if (g.size() != p.size()) {
      throw ShapeError("adam_step: gradient size mismatch for '" + name + "'");
    }
    auto& [m, v] = state.moments[name];
    if (m.size() != p.size()) {
      m.assign(p.size(), 0.0f);
      v.assign(p.size(), 0.0f);
    }
    std::vector<float> updated(p.values().begin(), p.values().end());
    for (std::size_t i = 0; i < updated.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
      const double vi = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double m_hat = mi / bias1;
      const double v_hat = vi / bias2;
      updated[i] = static_cast<float>(updated[i] - hyper.lr * m_hat /
                                                       (std::sqrt(v_hat) + hyper.epsilon));
    }
    p.assign(std::move(updated));
  }
}

namespace {

struct LoadedSplit {
  std::vector<std::size_t> indices;    // manifest record indices
  std::vector<GrayImage> images;       // parallel to indices
  std::vector<int> labels;             // class indices
};

LoadedSplit load_split(const DatasetManifest& manifest, Split split) {
  LoadedSplit out;
  out.indices = manifest.indices_in(split);
  out.images.reserve(out.indices.size());
  out.labels.reserve(out.indices.size());
  for (std::size_t idx : out.indices) {
    const ManifestRecord& rec = manifest.records[idx];
    out.images.push_back(read_png_gray8(manifest.resolve(rec)));
    out.labels.push_back(manifest.label_index(rec.label));
  }
  return out;
}

Tensor stack_batch(const std::vector<Tensor>& rows) {
  const int n = static_cast<int>(rows.size());
  const Shape& s = rows.front().shape();
  std::vector<float> data(static_cast<std::size_t>(n) * s.numel());
  for (int i = 0; i < n; ++i) {
    const auto src = rows[static_cast<std::size_t>(i)].values();
    std::copy(src.begin(), src.end(), data.begin() + static_cast<std::size_t>(i) * s.numel());
  }
  return Tensor(Shape{n, s[1], s[2], s[3]}, std::move(data));
}

// Batched eval-mode accuracy over preloaded images (used for the per-epoch
// validation curve; evaluate() below is the per-image variant that also
// measures latency).
double split_accuracy(DenseNet& net, const LoadedSplit& split, int batch_size) {
  std::size_t correct = 0;
  const std::size_t n = split.images.size();
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    std::vector<Tensor> rows;
    rows.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) rows.push_back(normalize(split.images[i]));
    const Tensor logits = net.forward(nullptr, stack_batch(rows), /*train=*/false);
    const int k = logits.shape()[1];
    for (std::size_t i = start; i < end; ++i) {
      const float* row = logits.data() + (i - start) * static_cast<std::size_t>(k);
      int arg = 0;
      for (int j = 1; j < k; ++j) {
        if (row[j] > row[arg]) arg = j;
      }
      if (arg == split.labels[i]) ++correct;
    }
  }
  return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace

TrainOutput train(const TrainConfig& config, const DatasetManifest& manifest,
                  const NetworkState* donor) {
  config.validate();
  const auto t_start = std::chrono::steady_clock::now();

  const auto labels = manifest.class_labels();
  if (static_cast<int>(labels.size()) != config.network.num_classes) {
    throw FormatError("manifest has " + std::to_string(labels.size()) +
                      " classes but the network head has " +
                      std::to_string(config.network.num_classes));
  }

  LoadedSplit train_split = load_split(manifest, Split::train);
  LoadedSplit val_split = load_split(manifest, Split::val);
  if (train_split.indices.empty()) throw FormatError("train: empty train split");
  if (val_split.indices.empty()) throw FormatError("train: empty val split");

  DenseNet net(config.network);
  if (config.init_mode == InitMode::gaussian) {
    net.init_weights(config.seed);
  } else {
    if (!donor) throw FormatError("train: pretrained_frozen mode requires donor weights");
    net.load_pretrained_frozen(*donor, DenseNet::head_names(), config.seed);
  }

  TrainOutput out;
  AdamState opt;
  double lr = config.learning_rate;
  double best_acc = -1.0;
  const std::vector<std::string> trainable = net.trainable_names();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(train_split.indices.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(config.seed, 0xE90C4, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<Tensor> rows;
      std::vector<int> batch_labels;
      rows.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t pos = order[i];
        const GrayImage* img = &train_split.images[pos];
        GrayImage augmented;
        if (config.augment.enabled) {
          // per-sample stream keyed by (seed, epoch, record index): stable no
          // matter how batches are assembled
          Rng aug_rng(derive_seed(config.seed, 0xA06,
                                  static_cast<std::uint64_t>(epoch) * 1000003ULL +
                                      train_split.indices[pos]));
          augmented = augment(*img, config.augment, aug_rng);
          img = &augmented;
          out.record.augmented_train_samples += 1;
        }
        rows.push_back(normalize(*img));
        batch_labels.push_back(train_split.labels[pos]);
      }

      Tape tape;
      for (const std::string& name : trainable) tape.watch(net.state.at(name));
      const Tensor logits = net.forward(&tape, stack_batch(rows), /*train=*/true);
      auto ce = softmax_cross_entropy(&tape, logits, batch_labels);
      const double loss = static_cast<double>(ce.loss.value_at(0));
      if (!std::isfinite(loss)) {
        out.record.abort_reason = "non-finite loss at epoch " + std::to_string(epoch) +
                                  ", batch " + std::to_string(start / config.batch_size + 1);
        out.best_state = best_acc >= 0.0 ? std::move(out.best_state) : net.state.clone();
        out.final_state = net.state.clone();
        const auto t_end = std::chrono::steady_clock::now();
        out.record.wall_seconds = std::chrono::duration<double>(t_end - t_start).count();
        return out;
      }
      tape.backward(ce.loss);

      std::unordered_map<std::string, std::vector<float>> grads;
      grads.reserve(trainable.size());
      for (const std::string& name : trainable) {
        const auto g = tape.grad(net.state.at(name));
        grads.emplace(name, std::vector<float>(g.begin(), g.end()));
      }
      adam_step(net.state, grads, opt, {lr, config.beta1, config.beta2, config.epsilon});

      loss_sum += loss * static_cast<double>(end - start);
      seen += end - start;
    }
    out.record.train_loss.push_back(loss_sum / static_cast<double>(seen));

    const double acc = split_accuracy(net, val_split, config.batch_size);
    out.record.val_accuracy.push_back(acc);
    if (acc > best_acc) {
      best_acc = acc;
      out.best_state = net.state.clone();
      out.record.best_epoch = epoch;
    }
    lr *= config.lr_decay;
  }

  out.final_state = net.state.clone();
  if (out.record.best_epoch < 0) out.best_state = net.state.clone();  // epochs == 0
  const auto t_end = std::chrono::steady_clock::now();
  out.record.wall_seconds = std::chrono::duration<double>(t_end - t_start).count();
  return out;
}

EvalResult evaluate(DenseNet& net, const DatasetManifest& manifest, Split split) {
  const auto indices = manifest.indices_in(split);
  if (indices.empty()) {
    throw FormatError("evaluate: split '" + split_name(split) + "' is empty");
  }
  const auto labels = manifest.class_labels();
  const int k = net.spec.num_classes;

  EvalResult result;
  result.confusion.assign(static_cast<std::size_t>(k), std::vector<int>(static_cast<std::size_t>(k), 0));
  double latency_sum = 0.0;
  std::size_t correct = 0;

  for (std::size_t idx : indices) {
    const ManifestRecord& rec = manifest.records[idx];
    const auto t0 = std::chrono::steady_clock::now();
    const GrayImage img = read_png_gray8(manifest.resolve(rec));
    const Tensor x = normalize(img);
    const Tensor logits = net.forward(nullptr, x, /*train=*/false);
    const auto t1 = std::chrono::steady_clock::now();
    latency_sum += std::chrono::duration<double>(t1 - t0).count();

    const float* row = logits.data();
    int arg = 0;
    for (int j = 1; j < k; ++j) {
      if (row[j] > row[arg]) arg = j;
    }
    const int truth = manifest.label_index(rec.label);
    if (truth >= k) {
      throw FormatError("label '" + rec.label + "' exceeds the network's class count");
    }
    result.confusion[static_cast<std::size_t>(truth)][static_cast<std::size_t>(arg)] += 1;
    if (arg == truth) ++correct;

    Prediction p;
    p.id = rec.id;
    p.label = rec.label;
    p.predicted = arg < static_cast<int>(labels.size()) ? labels[static_cast<std::size_t>(arg)]
                                                        : std::to_string(arg);
    p.logits.assign(row, row + k);
    result.predictions.push_back(std::move(p));
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  result.mean_latency_seconds = latency_sum / static_cast<double>(indices.size());
  return result;
}

GridResult grid_search(const TrainConfig& base, const GridSpec& grid,
                       const DatasetManifest& manifest, const NetworkState* donor) {
  auto values_or = [](const std::vector<double>& v, double fallback) {
    return v.empty() ? std::vector<double>{fallback} : v;
  };
  auto ivalues_or = [](const std::vector<int>& v, int fallback) {
    return v.empty() ? std::vector<int>{fallback} : v;
  };
  const auto lrs = values_or(grid.learning_rate, base.learning_rate);
  const auto decays = values_or(grid.lr_decay, base.lr_decay);
  const auto batches = ivalues_or(grid.batch_size, base.batch_size);
  const auto epochs = ivalues_or(grid.epochs, base.epochs);
  const auto rotations = values_or(grid.aug_rotation_deg, base.augment.rotation_deg);
  const auto scales = values_or(grid.aug_scale_frac, base.augment.scale_frac);
  const auto translations = values_or(grid.aug_translate_frac, base.augment.translate_frac);

  GridResult result;
  int best = -1;
  for (double lr : lrs)
    for (double decay : decays)
      for (int batch : batches)
        for (int ep : epochs)
          for (double rot : rotations)
            for (double sc : scales)
              for (double tr : translations) {
                TrainConfig cfg = base;
                cfg.learning_rate = lr;
                cfg.lr_decay = decay;
                cfg.batch_size = batch;
                cfg.epochs = ep;
                cfg.augment.rotation_deg = rot;
                cfg.augment.scale_frac = sc;
                cfg.augment.translate_frac = tr;
                TrainOutput run = train(cfg, manifest, donor);
                GridTrial trial;
                trial.config = cfg;
                trial.val_accuracy =
                    run.record.val_accuracy.empty()
                        ? 0.0
                        : *std::max_element(run.record.val_accuracy.begin(),
                                            run.record.val_accuracy.end());
                trial.final_train_loss =
                    run.record.train_loss.empty() ? 0.0 : run.record.train_loss.back();
                result.trials.push_back(std::move(trial));
                const int i = static_cast<int>(result.trials.size()) - 1;
                if (best < 0) {
                  best = i;
                } else {
                  const GridTrial& b = result.trials[static_cast<std::size_t>(best)];
                  const GridTrial& t = result.trials[static_cast<std::size_t>(i)];
                  if (t.val_accuracy > b.val_accuracy ||
                      (t.val_accuracy == b.val_accuracy &&
                       t.final_train_loss < b.final_train_loss)) {
                    best = i;
                  }
                }
              }
  result.best_index = best < 0 ? 0 : best;
  return result;
}

TrainOutput pretrain_donor(const TrainConfig& config, const DatasetManifest& donor_manifest) {
  TrainConfig cfg = config;
  cfg.init_mode = InitMode::gaussian;  // the donor always trains from scratch
  return train(cfg, donor_manifest);
}

CompareResult compare_init_modes(const TrainConfig& config, const DatasetManifest& manifest,
                                 const NetworkState& donor) {
  TrainConfig gaussian_cfg = config;
  gaussian_cfg.init_mode = InitMode::gaussian;
  TrainConfig frozen_cfg = config;
  frozen_cfg.init_mode = InitMode::pretrained_frozen;

  TrainOutput g = train(gaussian_cfg, manifest);
  TrainOutput f = train(frozen_cfg, manifest, &donor);

  CompareResult result;
  result.verdict.acc_gaussian = g.record.val_accuracy.empty() ? 0.0 : g.record.val_accuracy.back();
  result.verdict.acc_frozen = f.record.val_accuracy.empty() ? 0.0 : f.record.val_accuracy.back();
  result.verdict.acc_difference = result.verdict.acc_gaussian - result.verdict.acc_frozen;
  auto ratio = [](const std::vector<double>& loss) {
    if (loss.empty() || loss.back() <= 0.0) return 0.0;
    return loss.front() / loss.back();
  };
  result.verdict.loss_ratio_gaussian = ratio(g.record.train_loss);
  result.verdict.loss_ratio_frozen = ratio(f.record.train_loss);
  result.best_gaussian = std::move(g.best_state);
  result.gaussian = std::move(g.record);
  result.frozen = std::move(f.record);
  return result;
}

void write_metrics_csv(const RunRecord& record, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write metrics csv " + path.string());
  out << "epoch,train_loss,val_accuracy\n";
  for (std::size_t i = 0; i < record.train_loss.size(); ++i) {
    out << (i + 1) << ',' << format_double(record.train_loss[i]) << ','
        << format_double(record.val_accuracy[i]) << '\n';
  }
}

void write_predictions_jsonl(const std::vector<Prediction>& predictions,
                             const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write prediction log " + path.string());
  for (const Prediction& p : predictions) {
    nlohmann::json row;
    row["id"] = p.id;
    row["label"] = p.label;
    row["predicted"] = p.predicted;
    row["logits"] = p.logits;
    if (p.localization >= 0.0) row["localization"] = p.localization;
    out << row.dump() << '\n';
  }
}

void write_trials_csv(const GridResult& result, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write trial table " + path.string());
  out << "trial,learning_rate,lr_decay,batch_size,epochs,aug_rotation_deg,aug_scale_frac,"
         "aug_translate_frac,val_accuracy,final_train_loss,best\n";
  for (std::size_t i = 0; i < result.trials.size(); ++i) {
    const GridTrial& t = result.trials[i];
    out << i << ',' << format_double(t.config.learning_rate) << ','
        << format_double(t.config.lr_decay) << ',' << t.config.batch_size << ','
        << t.config.epochs << ',' << format_double(t.config.augment.rotation_deg) << ','
        << format_double(t.config.augment.scale_frac) << ','
        << format_double(t.config.augment.translate_frac) << ','
        << format_double(t.val_accuracy) << ',' << format_double(t.final_train_loss) << ','
        << (static_cast<int>(i) == result.best_index ? 1 : 0) << '\n';
  }
}

void write_verdict_csv(const CompareVerdict& verdict, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write verdict csv " + path.string());
  out << "metric,gaussian,pretrained_frozen\n";
  out << "final_val_accuracy," << format_double(verdict.acc_gaussian) << ','
      << format_double(verdict.acc_frozen) << '\n';
  out << "loss_ratio_epoch1_over_final," << format_double(verdict.loss_ratio_gaussian) << ','
      << format_double(verdict.loss_ratio_frozen) << '\n';
  out << "accuracy_difference," << format_double(verdict.acc_difference) << ",\n";
}

}  // namespace thrid
