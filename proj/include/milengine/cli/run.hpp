#pragma once

// Command-line front end. Settings come from, lowest priority first: built-in
// defaults, the MILENGINE_SEED environment variable (seed only), a JSON file
// given with --config, and command-line flags.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "milengine/aggregators/model_io.hpp"
#include "milengine/data/synth.hpp"
#include "milengine/preprocess/tiling.hpp"
#include "milengine/train_eval/report.hpp"
#include "milengine/tsne/tsne.hpp"

namespace milengine::cli {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out;
  std::string manifest;
  std::string folds;
  long fold = -1;  // -1: use every slide
  std::string model;
  std::string image;
  std::string slide_id;
  std::size_t k = 5;
  std::size_t jobs = 1;
  std::size_t downsample = 1;
  std::string aggregator = "abmil";
  eval::TrainConfig train;
  tsne::TsneConfig tsne;
  data::SynthSpec synth;
  prep::TileParams tile;
};

namespace detail {

// Reads known keys of `j` into fields; any other key is a usage error.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw UsageError("config: '" + name() + "' must be an object");
  }

  template <class T>
  ObjectReader& get(const char* key, T& field) {
    seen_.push_back(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        field = it->template get<T>();
      } catch (const nlohmann::json::exception&) {
        throw UsageError("config: '" + prefix() + key + "' has the wrong type");
      }
    }
    return *this;
  }

  template <class F>
  ObjectReader& object(const char* key, F&& read) {
    seen_.push_back(key);
    if (auto it = j_.find(key); it != j_.end()) read(ObjectReader(*it, prefix() + key));
    return *this;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
        throw UsageError("config: unknown key '" + prefix() + it.key() + "'");
  }

 private:
  std::string name() const { return where_.empty() ? "<root>" : where_; }
  std::string prefix() const { return where_.empty() ? "" : where_ + "."; }

  const Json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

}  // namespace detail

inline void apply_config(const Json& j, RunConfig& c) {
  detail::ObjectReader root(j, "");
  root.get("seed", c.seed)
      .get("out", c.out)
      .get("manifest", c.manifest)
      .get("folds", c.folds)
      .get("fold", c.fold)
      .get("model", c.model)
      .get("image", c.image)
      .get("slide_id", c.slide_id)
      .get("k", c.k)
      .get("jobs", c.jobs)
      .get("downsample", c.downsample)
      .object("train",
              [&](detail::ObjectReader r) {
                r.get("aggregator", c.aggregator)
                    .get("epochs", c.train.epochs)
                    .get("peak_lr", c.train.peak_lr)
                    .get("bag_batch", c.train.bag_batch)
                    .get("abmil_hidden", c.train.hyper.abmil_hidden)
                    .object("adamw",
                            [&](detail::ObjectReader a) {
                              a.get("beta1", c.train.adamw.beta1)
                                  .get("beta2", c.train.adamw.beta2)
                                  .get("eps", c.train.adamw.eps)
                                  .get("weight_decay", c.train.adamw.weight_decay)
                                  .finish();
                            })
                    .object("transmil",
                            [&](detail::ObjectReader t) {
                              t.get("width", c.train.hyper.transmil.width)
                                  .get("layers", c.train.hyper.transmil.layers)
                                  .get("heads", c.train.hyper.transmil.heads)
                                  .finish();
                            })
                    .finish();
              })
      .object("tsne",
              [&](detail::ObjectReader r) {
                r.get("perplexity", c.tsne.perplexity)
                    .get("iterations", c.tsne.iterations)
                    .get("learning_rate", c.tsne.learning_rate)
                    .get("exaggeration", c.tsne.exaggeration)
                    .get("exaggeration_iters", c.tsne.exaggeration_iters)
                    .get("momentum", c.tsne.momentum)
                    .get("final_momentum", c.tsne.final_momentum)
                    .get("momentum_switch", c.tsne.momentum_switch)
                    .finish();
              })
      .object("synth",
              [&](detail::ObjectReader r) {
                r.get("classes", c.synth.num_classes)
                    .get("slides_per_class", c.synth.slides_per_class)
                    .get("dim", c.synth.dim)
                    .get("min_instances", c.synth.min_instances)
                    .get("max_instances", c.synth.max_instances)
                    .get("salient_fraction", c.synth.salient_fraction)
                    .get("sigma_within", c.synth.sigma_within)
                    .get("sigma_background", c.synth.sigma_background)
                    .get("centroid_scale", c.synth.centroid_scale)
                    .finish();
              })
      .object("tile",
              [&](detail::ObjectReader r) {
                r.get("tile_size", c.tile.tile_size)
                    .get("overlap", c.tile.overlap)
                    .get("max_background", c.tile.max_background)
                    .finish();
              })
      .finish();
}

// Finds `--config FILE` or `--config=FILE` before full parsing so file values
// can sit underneath the flags.
inline std::string scan_config_path(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file name");
      path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    }
  }
  return path;
}

inline std::uint64_t parse_seed(const std::string& text, const std::string& source) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(text, &used, 10);
    if (used != text.size() || text.empty() || text[0] == '-') throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw UsageError(source + ": '" + text + "' is not a non-negative integer seed");
  }
}

namespace detail {

inline fs::path require_out(const RunConfig& c) {
  if (c.out.empty()) throw UsageError("--out is required");
  fs::create_directories(c.out);
  return c.out;
}

inline data::Manifest require_manifest(const RunConfig& c) {
  if (c.manifest.empty()) throw UsageError("--manifest is required");
  return data::load_manifest(c.manifest);
}

inline eval::TrainConfig train_config(const RunConfig& c) {
  eval::TrainConfig t = c.train;
  t.aggregator = agg::parse_aggregator(c.aggregator);
  t.seed = c.seed;
  return t;
}

// Slides selected by --folds/--fold: the training side or the test side of
// the fold, or everything when no fold plan is given.
inline std::vector<std::size_t> select_slides(const RunConfig& c, const data::Manifest& m, bool test_side) {
  std::vector<std::size_t> all(m.records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  if (c.folds.empty()) {
    if (c.fold >= 0) throw UsageError("--fold needs --folds");
    return all;
  }
  if (c.fold < 0) throw UsageError("--folds needs --fold");
  const auto plan = eval::fold_plan_from_json(eval::read_json(c.folds), m);
  if (static_cast<std::size_t>(c.fold) >= plan.k)
    throw UsageError("--fold " + std::to_string(c.fold) + " is out of range for k=" + std::to_string(plan.k));
  return test_side ? plan.test_indices(static_cast<std::size_t>(c.fold))
                   : plan.train_indices(static_cast<std::size_t>(c.fold));
}

inline void log(std::ostream& err, const std::string& line) { err << "milengine: " << line << '\n'; }

}  // namespace detail

inline void cmd_synth(RunConfig& c, std::ostream& err) {
  const auto out = detail::require_out(c);
  c.synth.seed = c.seed;
  const auto m = data::synth_dataset(c.synth, out);
  detail::log(err, "synth: wrote " + std::to_string(m.records.size()) + " slides to " + (out / "manifest.csv").string());
}

inline void cmd_split(RunConfig& c, std::ostream& err) {
  const auto m = detail::require_manifest(c);
  const auto out = detail::require_out(c);
  const auto plan = data::stratified_kfold(m, c.k, c.seed);
  eval::write_json(eval::to_json(plan, m), out / "folds.json");
  detail::log(err, "split: " + std::to_string(c.k) + " folds over " + std::to_string(m.records.size()) + " slides");
}

inline void cmd_tile(RunConfig& c, std::ostream& err) {
  if (c.image.empty()) throw UsageError("--image is required");
  const auto out = detail::require_out(c);
  auto image = prep::read_raster(c.image);
  image = prep::downsample(image, c.downsample);
  const std::string id = c.slide_id.empty() ? fs::path(c.image).stem().string() : c.slide_id;
  const auto scan = prep::build_patch_manifest(id, image, c.tile);
  for (const auto& w : scan.grid.warnings) detail::log(err, "warning: " + w);
  prep::write_patch_csv(scan.records, out / "patches.csv");
  detail::log(err, "tile: threshold " + std::to_string(scan.threshold) + ", kept " +
                       std::to_string(scan.kept_count()) + " of " + std::to_string(scan.records.size()) + " tiles");
}

inline void cmd_train(RunConfig& c, std::ostream& err) {
  const auto m = detail::require_manifest(c);
  const auto out = detail::require_out(c);
  const auto cfg = detail::train_config(c);
  const auto ds = eval::load_dataset(m);
  const auto indices = detail::select_slides(c, ds.manifest, false);
  auto result = eval::train_model(ds.select(indices), ds.num_classes(), cfg);
  agg::save_model(result.model, ds.manifest.classes, out / "model.milm");
  Json j;
  j["engine_version"] = kEngineVersion;
  j["config"] = eval::to_json(cfg);
  j["classes"] = ds.manifest.classes;
  j["train_slides"] = eval::slide_ids(ds.manifest, indices);
  j["optimizer_steps"] = result.optimizer_steps;
  j["param_count"] = agg::param_count(result.model);
  j["loss_curve"] = result.loss_curve;
  eval::write_json(j, out / "loss.json");
  detail::log(err, "train: " + c.aggregator + " on " + std::to_string(indices.size()) + " slides, " +
                       std::to_string(result.optimizer_steps) + " steps");
}

inline void cmd_eval(RunConfig& c, std::ostream& err) {
  const auto m = detail::require_manifest(c);
  const auto out = detail::require_out(c);
  if (c.model.empty()) throw UsageError("--model is required");
  auto file = agg::load_model(c.model);
  if (file.classes != m.classes) throw ConfigError("model classes do not match the manifest classes");
  const auto ds = eval::load_dataset(m);
  const auto indices = detail::select_slides(c, ds.manifest, true);
  const auto metrics = eval::evaluate(file.model, ds.select(indices), ds.num_classes());
  eval::write_json(eval::eval_report(metrics, ds.manifest.classes, agg::to_string(file.model.kind),
                                     eval::slide_ids(ds.manifest, indices)),
                   out / "metrics.json");
  detail::log(err, "eval: balanced accuracy " + std::to_string(metrics.balanced_accuracy));
}

inline void cmd_cv(RunConfig& c, std::ostream& err) {
  const auto m = detail::require_manifest(c);
  const auto out = detail::require_out(c);
  const auto cfg = detail::train_config(c);
  const auto ds = eval::load_dataset(m);
  const auto report = eval::run_cv(ds, c.k, cfg, c.jobs);
  eval::write_json(eval::to_json(report, ds.manifest, cfg), out / "report.json");
  detail::log(err, "cv: " + c.aggregator + " balanced accuracy " + std::to_string(report.mean_balanced_accuracy) +
                       " +/- " + std::to_string(report.std_balanced_accuracy));
}

inline void cmd_tsne(RunConfig& c, std::ostream& err) {
  const auto m = detail::require_manifest(c);
  const auto out = detail::require_out(c);
  c.tsne.seed = c.seed;
  const auto bags = data::load_bags(m);
  const auto emb = tsne::tsne_slides(m, bags, c.tsne);
  for (const auto& w : emb.warnings) detail::log(err, "warning: " + w);
  tsne::export_plot_data(emb, c.tsne, out / "tsne.tsv");
  detail::log(err, "tsne: " + std::to_string(bags.size()) + " slides, final KL " + std::to_string(emb.kl_final));
}

// Builds the parser bound to `c`; default strings shown by --help are the
// values in `c` at this point.
inline void build_app(CLI::App& app, RunConfig& c, std::string& config_path, std::string& seed_text) {
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", std::string(kEngineVersion));
  // top-level help lists every subcommand's flags and defaults
  app.set_help_flag();
  app.set_help_all_flag("-h,--help", "Print every subcommand, flag and default, then exit");
  app.add_option("--config", config_path, "JSON run config; flags override its values");
  app.add_option("--seed", seed_text,
                 "Global seed; falls back to the config file, then MILENGINE_SEED, then 0");

  auto out_opt = [&](CLI::App* s, const char* what) { s->add_option("--out", c.out, what); };
  auto manifest_opt = [&](CLI::App* s) {
    s->add_option("--manifest", c.manifest, "Manifest CSV (slide_id,label,center,bag_path)");
  };
  auto train_opts = [&](CLI::App* s) {
    s->add_option("--aggregator", c.aggregator, "simpleshot, bgap, abmil or transmil");
    s->add_option("--epochs", c.train.epochs, "Training epochs");
    s->add_option("--lr", c.train.peak_lr, "Peak learning rate of the cosine schedule");
    s->add_option("--weight-decay", c.train.adamw.weight_decay, "AdamW decoupled weight decay");
    s->add_option("--beta1", c.train.adamw.beta1, "AdamW first-moment decay");
    s->add_option("--beta2", c.train.adamw.beta2, "AdamW second-moment decay");
    s->add_option("--adam-eps", c.train.adamw.eps, "AdamW epsilon");
    s->add_option("--abmil-hidden", c.train.hyper.abmil_hidden, "ABMIL attention width");
    s->add_option("--transmil-width", c.train.hyper.transmil.width, "TransMIL model width");
    s->add_option("--transmil-layers", c.train.hyper.transmil.layers, "TransMIL encoder layers");
    s->add_option("--transmil-heads", c.train.hyper.transmil.heads, "TransMIL attention heads");
  };
  auto fold_opts = [&](CLI::App* s, const char* side) {
    s->add_option("--folds", c.folds, "Fold plan JSON written by 'split'");
    s->add_option("--fold", c.fold, std::string("Use the ") + side + " slides of this fold (-1: all slides)");
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic bag dataset");
  out_opt(synth, "Output directory (bags/ and manifest.csv)");
  synth->add_option("--classes", c.synth.num_classes, "Number of classes");
  synth->add_option("--slides-per-class", c.synth.slides_per_class, "Slides per class");
  synth->add_option("--dim", c.synth.dim, "Embedding dimension");
  synth->add_option("--min-instances", c.synth.min_instances, "Fewest instances per bag");
  synth->add_option("--max-instances", c.synth.max_instances, "Most instances per bag");
  synth->add_option("--salient-fraction", c.synth.salient_fraction, "Fraction of class-informative instances");
  synth->add_option("--sigma-within", c.synth.sigma_within, "Noise of salient instances around the class centroid");
  synth->add_option("--sigma-background", c.synth.sigma_background, "Noise of background instances");
  synth->add_option("--centroid-scale", c.synth.centroid_scale, "Scale of the random class centroids");

  auto* split = app.add_subcommand("split", "Write a stratified k-fold plan");
  manifest_opt(split);
  out_opt(split, "Output directory (folds.json)");
  split->add_option("--k", c.k, "Number of folds");

  auto* tile = app.add_subcommand("tile", "Tile a slide image and flag background patches");
  tile->add_option("--image", c.image, "PNG, PGM or PPM slide image");
  tile->add_option("--slide-id", c.slide_id, "Slide id for the records (default: image file stem)");
  out_opt(tile, "Output directory (patches.csv)");
  tile->add_option("--tile-size", c.tile.tile_size, "Tile edge in pixels");
  tile->add_option("--overlap", c.tile.overlap, "Fractional overlap of neighbouring tiles");
  tile->add_option("--max-background", c.tile.max_background, "Largest background fraction of a kept tile");
  tile->add_option("--downsample", c.downsample, "Integer area-average downsampling before tiling");

  auto* train = app.add_subcommand("train", "Train one model");
  manifest_opt(train);
  out_opt(train, "Output directory (model.milm, loss.json)");
  train_opts(train);
  fold_opts(train, "training");

  auto* ev = app.add_subcommand("eval", "Evaluate a trained model");
  manifest_opt(ev);
  out_opt(ev, "Output directory (metrics.json)");
  ev->add_option("--model", c.model, "Model file written by 'train'");
  fold_opts(ev, "test");

  auto* cv = app.add_subcommand("cv", "Stratified k-fold cross-validation");
  manifest_opt(cv);
  out_opt(cv, "Output directory (report.json)");
  cv->add_option("--k", c.k, "Number of folds");
  cv->add_option("--jobs", c.jobs, "Folds trained concurrently");
  train_opts(cv);

  auto* ts = app.add_subcommand("tsne", "2-D t-SNE of slide-level mean embeddings");
  manifest_opt(ts);
  out_opt(ts, "Output directory (tsne.tsv, tsne.tsv.json)");
  ts->add_option("--perplexity", c.tsne.perplexity, "Target perplexity, capped at (n-1)/3");
  ts->add_option("--iterations", c.tsne.iterations, "Gradient descent iterations");
  ts->add_option("--tsne-lr", c.tsne.learning_rate, "Learning rate");
  ts->add_option("--exaggeration", c.tsne.exaggeration, "Early exaggeration factor");
  ts->add_option("--exaggeration-iters", c.tsne.exaggeration_iters, "Iterations with early exaggeration");
}

// Runs one command line; returns the process exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  RunConfig c;
  std::string config_path, seed_text;
  CLI::App app("Slide-level multiple-instance classification engine", "milengine");
  build_app(app, c, config_path, seed_text);
  try {
    if (const char* env = std::getenv("MILENGINE_SEED"); env && *env) c.seed = parse_seed(env, "MILENGINE_SEED");
    if (const auto path = scan_config_path(args); !path.empty()) {
      try {
        apply_config(eval::read_json(path), c);
      } catch (const DataError& e) {
        throw UsageError(std::string("config: ") + e.what());
      }
    }
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    if (!seed_text.empty()) c.seed = parse_seed(seed_text, "--seed");

    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "synth") cmd_synth(c, err);
    else if (cmd == "split") cmd_split(c, err);
    else if (cmd == "tile") cmd_tile(c, err);
    else if (cmd == "train") cmd_train(c, err);
    else if (cmd == "eval") cmd_eval(c, err);
    else if (cmd == "cv") cmd_cv(c, err);
    else if (cmd == "tsne") cmd_tsne(c, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    // --help and --version arrive here with exit code 0.
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    err << "milengine: error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    err << "milengine: error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    err << "milengine: numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const fs::filesystem_error& e) {
    err << "milengine: error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace milengine::cli
