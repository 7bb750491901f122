// thrid: phantom-radiograph implant classification pipeline.
//
// Subcommands: phantoms, shapes, split, train, gridsearch, eval, compare,
// saliency, ingest. Every run is reproducible: identical flags, config and
// seed give byte-identical outputs regardless of --threads.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
// failure (NaN guard).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "thrid/config.hpp"
#include "thrid/dicom.hpp"
#include "thrid/error.hpp"
#include "thrid/parallel.hpp"
#include "thrid/phantom.hpp"
#include "thrid/saliency.hpp"

namespace fs = std::filesystem;
using namespace thrid;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::array<int, 3> parse_counts(const std::string& s) {
  std::array<int, 3> counts{};
  std::stringstream ss(s);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 3) throw UsageError("--counts expects three comma-separated integers");
    counts[static_cast<std::size_t>(i++)] = std::stoi(item);
  }
  if (i != 3) throw UsageError("--counts expects three comma-separated integers");
  return counts;
}

SplitRatios parse_ratios(const std::string& s) {
  std::array<double, 3> r{};
  std::stringstream ss(s);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 3) throw UsageError("--ratios expects three comma-separated numbers");
    r[static_cast<std::size_t>(i++)] = std::stod(item);
  }
  if (i != 3) throw UsageError("--ratios expects three comma-separated numbers");
  return SplitRatios{r[0], r[1], r[2]};
}

RunConfig load_effective_config(const std::string& preset, const std::string& config_path) {
  RunConfig base = preset == "paper" ? RunConfig::paper_defaults() : RunConfig::desk_defaults();
  if (config_path.empty()) return base;
  return load_run_config(config_path, base);
}

GridSpec load_grid(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open grid file " + path.string());
  GridSpec grid;
  std::string line;
  std::size_t line_no = 0;
  auto doubles = [](const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    return out;
  };
  auto ints = [](const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    return out;
  };
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("grid line " + std::to_string(line_no) + ": expected key=values");
    }
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "learning_rate") {
      grid.learning_rate = doubles(value);
    } else if (key == "lr_decay") {
      grid.lr_decay = doubles(value);
    } else if (key == "batch_size") {
      grid.batch_size = ints(value);
    } else if (key == "epochs") {
      grid.epochs = ints(value);
    } else if (key == "aug_rotation_deg") {
      grid.aug_rotation_deg = doubles(value);
    } else if (key == "aug_scale_frac") {
      grid.aug_scale_frac = doubles(value);
    } else if (key == "aug_translate_frac") {
      grid.aug_translate_frac = doubles(value);
    } else {
      throw FormatError("grid file: unknown key '" + key + "'");
    }
  }
  return grid;
}

void print_confusion(const EvalResult& result, const std::vector<std::string>& labels) {
  std::cout << "accuracy: " << format_double(result.accuracy) << "\n";
  std::cout << "confusion (rows = truth, cols = predicted):\n";
  std::cout << "      ";
  for (const auto& l : labels) std::cout << l << "     ";
  std::cout << "\n";
  for (std::size_t i = 0; i < result.confusion.size(); ++i) {
    std::cout << (i < labels.size() ? labels[i] : std::to_string(i)) << "  ";
    for (int v : result.confusion[i]) {
      std::cout.width(6);
      std::cout << v;
    }
    std::cout << "\n";
  }
  std::cout << "mean per-image latency: " << format_double(result.mean_latency_seconds)
            << " s\n";
}

NetworkState load_donor_checked(const std::string& path) {
  return load_weights(path);
}

PhantomMasks load_masks(const fs::path& masks_dir, const std::string& id, int size) {
  auto load_one = [&](const char* suffix) {
    const fs::path p = masks_dir / (id + suffix);
    if (!fs::exists(p)) throw IoError("missing mask file " + p.string());
    GrayImage m = read_png_gray8(p);
    if (m.width != size || m.height != size) {
      throw FormatError("mask " + p.string() + " size mismatch");
    }
    return m;
  };
  PhantomMasks masks;
  masks.implant = load_one("_implant.png");
  masks.tip = load_one("_tip.png");
  masks.collar = load_one("_collar.png");
  masks.sleeve = load_one("_sleeve.png");
  masks.cup = load_one("_cup.png");
  return masks;
}

double masked_localization(const SaliencyMap& map, const PhantomMasks& masks) {
  return localization_score(
      map, {&masks.implant, &masks.tip, &masks.collar, &masks.sleeve, &masks.cup}, 0.10);
}

int run(int argc, char** argv) {
  CLI::App app{"THR implant-design classification on phantom radiographs"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker thread cap (0 = hardware default)");

  // ---- phantoms ----
  auto* cmd_phantoms = app.add_subcommand("phantoms", "Generate the phantom radiograph corpus");
  std::string ph_out, ph_counts = "130,93,29";
  int ph_size = 96;
  std::uint64_t ph_seed = 42;
  cmd_phantoms->add_option("--out", ph_out, "Output directory")->required();
  cmd_phantoms->add_option("--counts", ph_counts, "Images per class A,B,C");
  cmd_phantoms->add_option("--size", ph_size, "Square image size in pixels");
  cmd_phantoms->add_option("--seed", ph_seed, "Corpus seed");

  // ---- shapes ----
  auto* cmd_shapes = app.add_subcommand("shapes", "Generate the donor-task shape corpus");
  std::string sh_out, sh_counts = "100,100,100";
  int sh_size = 96;
  std::uint64_t sh_seed = 7;
  cmd_shapes->add_option("--out", sh_out, "Output directory")->required();
  cmd_shapes->add_option("--counts", sh_counts, "Images per class A,B,C");
  cmd_shapes->add_option("--size", sh_size, "Square image size in pixels");
  cmd_shapes->add_option("--seed", sh_seed, "Corpus seed");

  // ---- split ----
  auto* cmd_split = app.add_subcommand("split", "Assign stratified train/val/test splits");
  std::string sp_manifest, sp_ratios = "0.8,0.1,0.1";
  std::uint64_t sp_seed = 42;
  cmd_split->add_option("--manifest", sp_manifest, "Manifest JSONL to rewrite")->required();
  cmd_split->add_option("--ratios", sp_ratios, "train,val,test ratios");
  cmd_split->add_option("--seed", sp_seed, "Shuffle seed");

  // ---- train ----
  auto* cmd_train = app.add_subcommand("train", "Train a classifier");
  std::string tr_config, tr_out, tr_init, tr_donor, tr_manifest, tr_preset = "desk";
  std::int64_t tr_seed = -1;
  int tr_epochs = -1;
  cmd_train->add_option("--config", tr_config, "Run config file");
  cmd_train->add_option("--out", tr_out, "Output directory")->required();
  cmd_train->add_option("--init", tr_init, "gaussian | pretrained-frozen");
  cmd_train->add_option("--donor", tr_donor, "Donor weights (pretrained-frozen)");
  cmd_train->add_option("--manifest", tr_manifest, "Manifest override");
  cmd_train->add_option("--preset", tr_preset, "desk (100 epochs) | paper (350 epochs)");
  cmd_train->add_option("--seed", tr_seed, "Seed override");
  cmd_train->add_option("--epochs", tr_epochs, "Epoch override");

  // ---- gridsearch ----
  auto* cmd_grid = app.add_subcommand("gridsearch", "Validation-driven grid search");
  std::string gr_config, gr_grid, gr_manifest, gr_out, gr_preset = "desk";
  cmd_grid->add_option("--config", gr_config, "Run config file");
  cmd_grid->add_option("--grid", gr_grid, "Grid file (key=v1,v2 lines)")->required();
  cmd_grid->add_option("--manifest", gr_manifest, "Manifest override");
  cmd_grid->add_option("--out", gr_out, "Output directory")->required();
  cmd_grid->add_option("--preset", gr_preset, "desk | paper");

  // ---- eval ----
  auto* cmd_eval = app.add_subcommand("eval", "Evaluate saved weights on a split");
  std::string ev_weights, ev_manifest, ev_split = "test", ev_config, ev_out, ev_masks,
              ev_preset = "desk";
  bool ev_saliency = false;
  cmd_eval->add_option("--weights", ev_weights, "Weights file")->required();
  cmd_eval->add_option("--manifest", ev_manifest, "Manifest JSONL")->required();
  cmd_eval->add_option("--split", ev_split, "train | val | test");
  cmd_eval->add_option("--config", ev_config, "Run config file (network spec)");
  cmd_eval->add_option("--out", ev_out, "Output directory for the prediction log");
  cmd_eval->add_option("--masks", ev_masks, "Mask directory for localization scores");
  cmd_eval->add_flag("--saliency", ev_saliency, "Also compute per-image localization");
  cmd_eval->add_option("--preset", ev_preset, "desk | paper");

  // ---- compare ----
  auto* cmd_compare = app.add_subcommand("compare", "Gaussian vs pretrained-frozen comparison");
  std::string cp_config, cp_donor, cp_manifest, cp_out, cp_preset = "desk";
  cmd_compare->add_option("--config", cp_config, "Run config file");
  cmd_compare->add_option("--donor", cp_donor, "Donor weights file")->required();
  cmd_compare->add_option("--manifest", cp_manifest, "Manifest override");
  cmd_compare->add_option("--out", cp_out, "Output directory")->required();
  cmd_compare->add_option("--preset", cp_preset, "desk | paper");

  // ---- saliency ----
  auto* cmd_sal = app.add_subcommand("saliency", "Saliency overlay for one image");
  std::string sa_weights, sa_image, sa_out, sa_masks, sa_config, sa_preset = "desk";
  int sa_class = -1;
  cmd_sal->add_option("--weights", sa_weights, "Weights file")->required();
  cmd_sal->add_option("--image", sa_image, "Input grayscale PNG")->required();
  cmd_sal->add_option("--out", sa_out, "Overlay PNG path")->required();
  cmd_sal->add_option("--masks", sa_masks, "Mask directory (prints localization)");
  cmd_sal->add_option("--config", sa_config, "Run config file (network spec)");
  cmd_sal->add_option("--class", sa_class, "Class index to differentiate (default: predicted)");
  cmd_sal->add_option("--preset", sa_preset, "desk | paper");

  // ---- ingest ----
  auto* cmd_ingest = app.add_subcommand("ingest", "Anonymize a DICOM file and export the image");
  std::string in_dicom, in_out, in_quarantine, in_clean;
  cmd_ingest->add_option("--dicom", in_dicom, "Input DICOM file")->required();
  cmd_ingest->add_option("--out", in_out, "Output grayscale PNG")->required();
  cmd_ingest->add_option("--quarantine", in_quarantine, "Sidecar JSONL for removed elements")
      ->required();
  cmd_ingest->add_option("--anonymized-out", in_clean, "Write the cleaned DICOM here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints the message or help text
    return code == 0 ? kExitOk : kExitUsage;
  }
  set_threads(threads);

  if (cmd_phantoms->parsed()) {
    const auto counts = parse_counts(ph_counts);
    const DatasetManifest manifest = generate_dataset(counts, ph_size, ph_seed, ph_out);
    std::cout << "wrote " << manifest.records.size() << " images under " << ph_out << "\n";
    std::cout << "manifest: " << (fs::path(ph_out) / "manifest.jsonl").string() << "\n";
    return kExitOk;
  }

  if (cmd_shapes->parsed()) {
    const auto counts = parse_counts(sh_counts);
    const DatasetManifest manifest = generate_shapes_dataset(counts, sh_size, sh_seed, sh_out);
    std::cout << "wrote " << manifest.records.size() << " images under " << sh_out << "\n";
    return kExitOk;
  }

  if (cmd_split->parsed()) {
    const SplitRatios ratios = parse_ratios(sp_ratios);
    DatasetManifest manifest = load_manifest(sp_manifest);
    stratified_split(manifest, ratios, sp_seed);  // validates before any write
    save_manifest(manifest, sp_manifest);
    int train_n = 0, val_n = 0, test_n = 0;
    for (const auto& r : manifest.records) {
      if (r.split == Split::train) ++train_n;
      if (r.split == Split::val) ++val_n;
      if (r.split == Split::test) ++test_n;
    }
    std::cout << "split sizes: train " << train_n << ", val " << val_n << ", test " << test_n
              << "\n";
    return kExitOk;
  }

  if (cmd_train->parsed()) {
    RunConfig cfg = load_effective_config(tr_preset, tr_config);
    if (!tr_init.empty()) cfg.train.init_mode = init_mode_from_name(tr_init);
    if (!tr_donor.empty()) cfg.donor_weights = tr_donor;
    if (!tr_manifest.empty()) cfg.manifest = tr_manifest;
    if (tr_seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(tr_seed);
    if (tr_epochs >= 0) cfg.train.epochs = tr_epochs;
    if (cfg.manifest.empty()) throw UsageError("train: no manifest (config key or --manifest)");
    if (cfg.train.init_mode == InitMode::pretrained_frozen && cfg.donor_weights.empty()) {
      throw UsageError("train: --init pretrained-frozen requires --donor");
    }

    fs::create_directories(tr_out);
    save_run_config(cfg, fs::path(tr_out) / "config.txt");

    const DatasetManifest manifest = load_manifest(cfg.manifest);
    NetworkState donor;
    const NetworkState* donor_ptr = nullptr;
    if (cfg.train.init_mode == InitMode::pretrained_frozen) {
      donor = load_donor_checked(cfg.donor_weights);
      donor_ptr = &donor;
    }
    TrainOutput result = train(cfg.train, manifest, donor_ptr);
    write_metrics_csv(result.record, fs::path(tr_out) / "metrics.csv");
    if (!result.record.abort_reason.empty()) {
      std::cerr << "training aborted: " << result.record.abort_reason << "\n";
      return kExitNumeric;
    }
    save_weights(result.best_state, fs::path(tr_out) / "weights.bin");

    DenseNet net(cfg.train.network);
    net.state = result.best_state.clone();
    const EvalResult val = evaluate(net, manifest, Split::val);
    write_predictions_jsonl(val.predictions, fs::path(tr_out) / "predictions.jsonl");

    std::cout << "epochs: " << result.record.train_loss.size() << "\n";
    std::cout << "best epoch: " << result.record.best_epoch << " (val accuracy "
              << format_double(result.record.val_accuracy.empty()
                                   ? 0.0
                                   : *std::max_element(result.record.val_accuracy.begin(),
                                                       result.record.val_accuracy.end()))
              << ")\n";
    std::cout << "wall time: " << format_double(result.record.wall_seconds) << " s\n";
    std::cout << "artifacts: metrics.csv weights.bin predictions.jsonl config.txt in " << tr_out
              << "\n";
    return kExitOk;
  }

  if (cmd_grid->parsed()) {
    RunConfig cfg = load_effective_config(gr_preset, gr_config);
    if (!gr_manifest.empty()) cfg.manifest = gr_manifest;
    if (cfg.manifest.empty()) throw UsageError("gridsearch: no manifest");
    const GridSpec grid = load_grid(gr_grid);
    fs::create_directories(gr_out);
    save_run_config(cfg, fs::path(gr_out) / "config.txt");

    const DatasetManifest manifest = load_manifest(cfg.manifest);
    NetworkState donor;
    const NetworkState* donor_ptr = nullptr;
    if (cfg.train.init_mode == InitMode::pretrained_frozen) {
      if (cfg.donor_weights.empty()) throw UsageError("gridsearch: donor weights required");
      donor = load_donor_checked(cfg.donor_weights);
      donor_ptr = &donor;
    }
    const GridResult result = grid_search(cfg.train, grid, manifest, donor_ptr);
    write_trials_csv(result, fs::path(gr_out) / "trials.csv");
    RunConfig best = cfg;
    best.train = result.trials[static_cast<std::size_t>(result.best_index)].config;
    save_run_config(best, fs::path(gr_out) / "best_config.txt");
    std::cout << "trials: " << result.trials.size() << "\n";
    std::cout << "best trial: " << result.best_index << " (val accuracy "
              << format_double(
                     result.trials[static_cast<std::size_t>(result.best_index)].val_accuracy)
              << ")\n";
    return kExitOk;
  }

  if (cmd_eval->parsed()) {
    RunConfig cfg = load_effective_config(ev_preset, ev_config);
    const DatasetManifest manifest = load_manifest(ev_manifest);
    DenseNet net(cfg.train.network);
    NetworkState loaded = load_weights(ev_weights);
    check_compatible(net.state, loaded);
    net.state = std::move(loaded);

    EvalResult result = evaluate(net, manifest, split_from_name(ev_split));
    if (ev_saliency) {
      if (ev_masks.empty()) throw UsageError("eval: --saliency requires --masks");
      for (Prediction& p : result.predictions) {
        const auto it = std::find_if(manifest.records.begin(), manifest.records.end(),
                                     [&](const ManifestRecord& r) { return r.id == p.id; });
        const GrayImage img = read_png_gray8(manifest.resolve(*it));
        const SaliencyMap map = compute_saliency(net, normalize(img), -1);
        p.localization = masked_localization(map, load_masks(ev_masks, p.id, img.width));
      }
    }
    print_confusion(result, manifest.class_labels());
    if (!ev_out.empty()) {
      fs::create_directories(ev_out);
      write_predictions_jsonl(result.predictions, fs::path(ev_out) / "predictions.jsonl");
    }
    return kExitOk;
  }

  if (cmd_compare->parsed()) {
    RunConfig cfg = load_effective_config(cp_preset, cp_config);
    if (!cp_manifest.empty()) cfg.manifest = cp_manifest;
    if (cfg.manifest.empty()) throw UsageError("compare: no manifest");
    cfg.donor_weights = cp_donor;
    fs::create_directories(cp_out);
    save_run_config(cfg, fs::path(cp_out) / "config.txt");

    const DatasetManifest manifest = load_manifest(cfg.manifest);
    const NetworkState donor = load_donor_checked(cp_donor);
    const CompareResult result = compare_init_modes(cfg.train, manifest, donor);
    write_metrics_csv(result.gaussian, fs::path(cp_out) / "metrics_gaussian.csv");
    write_metrics_csv(result.frozen, fs::path(cp_out) / "metrics_frozen.csv");
    write_verdict_csv(result.verdict, fs::path(cp_out) / "verdict.csv");
    std::cout << "final val accuracy: gaussian "
              << format_double(result.verdict.acc_gaussian) << ", frozen "
              << format_double(result.verdict.acc_frozen) << " (difference "
              << format_double(result.verdict.acc_difference) << ")\n";
    std::cout << "train-loss decrease (epoch 1 / final): gaussian "
              << format_double(result.verdict.loss_ratio_gaussian) << "x, frozen "
              << format_double(result.verdict.loss_ratio_frozen) << "x\n";
    return kExitOk;
  }

  if (cmd_sal->parsed()) {
    RunConfig cfg = load_effective_config(sa_preset, sa_config);
    DenseNet net(cfg.train.network);
    NetworkState loaded = load_weights(sa_weights);
    check_compatible(net.state, loaded);
    net.state = std::move(loaded);

    const GrayImage img = read_png_gray8(sa_image);
    const SaliencyMap map = compute_saliency(net, normalize(img), sa_class);
    const RgbImage overlay = render_overlay(img, map);
    write_png_rgb8(sa_out, overlay);

    // raw scores beside the overlay
    fs::path scores_path = sa_out;
    scores_path.replace_extension(".scores.csv");
    std::ofstream scores(scores_path, std::ios::binary);
    for (int y = 0; y < map.height; ++y) {
      for (int x = 0; x < map.width; ++x) {
        if (x) scores << ',';
        scores << format_double(map.scores[static_cast<std::size_t>(y) * map.width + x]);
      }
      scores << '\n';
    }

    std::cout << "class index: " << map.class_index << (map.degenerate ? " (degenerate map)" : "")
              << "\n";
    if (!sa_masks.empty()) {
      const std::string id = fs::path(sa_image).stem().string();
      const double loc = masked_localization(map, load_masks(sa_masks, id, img.width));
      std::cout << "localization score (top 10%): " << format_double(loc) << "\n";
    }
    std::cout << "overlay: " << sa_out << "\n";
    return kExitOk;
  }

  if (cmd_ingest->parsed()) {
    std::ifstream in(in_dicom, std::ios::binary);
    if (!in) throw IoError("cannot open DICOM file " + in_dicom);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    const dicom::File file = dicom::parse(bytes);
    const dicom::AnonymizeResult result = dicom::anonymize(file, dicom::PhiPolicy::defaults());
    const GrayImage img = dicom::export_image(result.clean);
    write_png_gray8(in_out, img);
    dicom::write_sidecar(in_quarantine, result.quarantined);
    if (!in_clean.empty()) {
      const auto clean_bytes = dicom::write(result.clean.elements);
      std::ofstream out(in_clean, std::ios::binary);
      out.write(reinterpret_cast<const char*>(clean_bytes.data()),
                static_cast<std::streamsize>(clean_bytes.size()));
    }
    std::cout << "image: " << in_out << " (" << img.width << "x" << img.height << ")\n";
    std::cout << "quarantined elements: " << result.quarantined.size() << "\n";
    return kExitOk;
  }

  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}
