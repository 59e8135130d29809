#include "featseg/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "featseg/clustering.hpp"
#include "featseg/distill.hpp"
#include "featseg/error.hpp"
#include "featseg/fileutil.hpp"
#include "featseg/latentdir.hpp"
#include "featseg/maskgen.hpp"
#include "featseg/metrics.hpp"
#include "featseg/parallel.hpp"
#include "featseg/toygen.hpp"

namespace featseg {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct ToygenArgs {
  fs::path out;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::size_t first_index = 0;
  ToyConfig cfg;
};

struct ClusterArgs {
  fs::path manifest, out;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  bool l2 = false;
  std::optional<std::size_t> minibatch;
  std::size_t max_samples = 32;
  std::size_t max_iters = 300;
  double rel_tol = 1e-4;
  bool f64 = false;
  std::size_t restarts = 10;
};

struct SynthArgs {
  fs::path manifest, model, out;
  std::optional<fs::path> classmap;
};

struct DirectionArgs {
  fs::path manifest, out;
  DirectionConfig cfg;
};

struct ManipulateArgs {
  fs::path latent, direction, out;
  double alpha = 0.0;
};

struct DistillArgs {
  fs::path manifest, out;
  std::size_t classes = 0;
  TrainConfig cfg;
  bool f64 = false;
};

struct PredictArgs {
  fs::path params, out;
  std::optional<fs::path> image, manifest;
  bool f64 = false;
};

struct EvalArgs {
  fs::path pred, gt, out;
  std::string match = "none";
  std::size_t classes = 0;
};

double dot_score(std::span<const double> w, const LatentDirection& dir) {
  double s = dir.bias;
  for (std::size_t i = 0; i < w.size() && i < dir.g.size(); ++i) s += dir.g[i] * w[i];
  return s;
}

json cmd_toygen(ToygenArgs a, unsigned threads) {
  a.cfg.dataset_seed = a.seed;
  validate_toy_config(a.cfg);
  if (a.n == 0) throw ValidationError("--n must be at least 1");
  const auto m = toy_dataset(a.cfg, a.n, a.out, a.first_index, threads);
  return {{"command", "toygen"},
          {"out", a.out.string()},
          {"n", m.samples.size()},
          {"n_classes", a.cfg.n_classes()},
          {"manifest", (a.out / "manifest.json").string()}};
}

json cmd_cluster(const ClusterArgs& a, unsigned threads) {
  if (a.k == 0) throw ValidationError("--k must be at least 1");
  if (a.max_iters == 0) throw ValidationError("--max-iters must be at least 1");
  if (a.restarts == 0) throw ValidationError("--restarts must be at least 1");
  if (!(a.rel_tol >= 0.0)) throw ValidationError("--rel-tol must be non-negative");
  if (a.minibatch && *a.minibatch == 0) {
    throw ValidationError("--minibatch must be at least 1");
  }
  const auto manifest = read_manifest(a.manifest);
  std::vector<fs::path> files;
  for (const auto& s : manifest.samples) {
    if (a.max_samples != 0 && files.size() == a.max_samples) break;
    files.push_back(manifest.resolve(s.feature_path));
  }
  if (files.empty()) throw ValidationError("manifest has no samples");
  const FeatureMapPixels data(files, a.l2);

  LloydConfig cfg;
  cfg.max_iters = a.max_iters;
  cfg.rel_tol = a.rel_tol;
  cfg.seed = a.seed;
  cfg.threads = threads;
  cfg.precision = a.f64 ? Precision::f64 : Precision::f32;
  cfg.minibatch_size = a.minibatch;
  if (!cfg.minibatch_size && data.n_points() > kMinibatchThreshold) {
    cfg.minibatch_size = kDefaultMinibatch;
  }
  auto model = kmeans_fit(data, a.k, a.seed, cfg, a.restarts);
  model.feature_layer = manifest.feature_layer;
  save_cluster_model(model, a.out);
  return {{"command", "cluster"},
          {"out", a.out.string()},
          {"k", model.k},
          {"dim", model.dim},
          {"n_points", data.n_points()},
          {"iterations", model.inertia_history.size()},
          {"inertia", model.inertia_history.empty() ? 0.0 : model.inertia_history.back()},
          {"minibatch", cfg.minibatch_size ? json(*cfg.minibatch_size) : json(nullptr)}};
}

json cmd_synth(const SynthArgs& a, unsigned threads) {
  const auto manifest = read_manifest(a.manifest);
  const auto model = load_cluster_model(a.model);
  std::optional<ClassMap> cm;
  if (a.classmap) cm = read_classmap(*a.classmap);
  SynthOptions opts;
  opts.threads = threads;
  const auto out = synth_dataset(manifest, model, cm, a.out, opts);
  return {{"command", "synth"},
          {"out", a.out.string()},
          {"n", out.samples.size()},
          {"n_labels", cm ? cm->n_classes : model.k},
          {"manifest", (a.out / "manifest.json").string()}};
}

json cmd_fit_direction(const DirectionArgs& a) {
  if (!(a.cfg.l2_penalty >= 0.0)) throw ValidationError("--l2 must be non-negative");
  if (a.cfg.max_iters == 0) throw ValidationError("--max-iters must be at least 1");
  const auto pairs = load_latent_pairs(read_manifest(a.manifest));
  const auto dir = fit_direction(pairs, a.cfg);
  save_direction(dir, a.out);
  return {{"command", "fit-direction"},
          {"out", a.out.string()},
          {"n_pairs", dir.n_pairs},
          {"train_accuracy", dir.train_accuracy},
          {"bias", dir.bias},
          {"iterations", dir.loss_history.size()}};
}

json cmd_manipulate(const ManipulateArgs& a) {
  const auto latent = read_tensor(a.latent);
  if (latent.dtype() != DType::f32 || latent.ndim() != 1) {
    throw ValidationError("--latent must be a 1-d f32 tensor");
  }
  const auto dir = load_direction(a.direction);
  const auto src = latent.f32();
  const std::vector<double> w(src.begin(), src.end());
  const auto moved = manipulate(w, dir, a.alpha);
  write_tensor(FeatureTensor::from_f32({moved.size()},
                                       std::vector<float>(moved.begin(), moved.end())),
               a.out);
  return {{"command", "manipulate"},
          {"out", a.out.string()},
          {"alpha", a.alpha},
          {"score_before", dot_score(w, dir)},
          {"score_after", dot_score(moved, dir)}};
}

template <typename T>
json distill_impl(const DistillArgs& a, const DatasetManifest& manifest) {
  const auto result = fcn_train<T>(manifest, a.classes, a.cfg);
  save_fcn_params(result.params, a.out);
  return {{"command", "distill"},
          {"out", a.out.string()},
          {"classes", a.classes},
          {"precision", a.f64 ? "f64" : "f32"},
          {"epochs", a.cfg.epochs},
          {"loss_curve", result.loss_curve}};
}

json cmd_distill(DistillArgs a, unsigned threads) {
  if (a.classes == 0 || a.classes >= MaskImage::kIgnore) {
    throw ValidationError("--classes must be in [1, 254]");
  }
  a.cfg.threads = threads;
  validate_train_config(a.cfg);
  const auto manifest = read_manifest(a.manifest);
  return a.f64 ? distill_impl<double>(a, manifest) : distill_impl<float>(a, manifest);
}

template <typename T>
json predict_impl(const PredictArgs& a, unsigned threads) {
  const auto params = load_fcn_params<T>(a.params);
  if (a.image) {
    const auto mask = fcn_predict(params, to_image<T>(read_rgb_png(*a.image)));
    write_mask_png(mask, a.out);
    return {{"command", "predict"},
            {"out", a.out.string()},
            {"width", mask.width},
            {"height", mask.height}};
  }
  const auto in = read_manifest(*a.manifest);
  DatasetManifest out_m;
  out_m.feature_layer = in.feature_layer;
  out_m.samples.resize(in.samples.size());
  std::vector<MaskImage> masks(in.samples.size());
  parallel_for(in.samples.size(), threads, [&](std::size_t i) {
    const auto& s = in.samples[i];
    masks[i] = fcn_predict(params, to_image<T>(read_rgb_png(in.resolve(s.image_path))));
  });
  fs::create_directories(a.out);
  const auto abs_out = fs::absolute(a.out);
  for (std::size_t i = 0; i < in.samples.size(); ++i) {
    auto rec = in.samples[i];
    const std::string name = rec.id + "_mask.png";
    write_mask_png(masks[i], a.out / name);
    rec.image_path = fs::absolute(in.resolve(rec.image_path))
                         .lexically_proximate(abs_out)
                         .generic_string();
    rec.feature_path = fs::absolute(in.resolve(rec.feature_path))
                           .lexically_proximate(abs_out)
                           .generic_string();
    if (rec.latent_path) {
      *rec.latent_path = fs::absolute(in.resolve(*rec.latent_path))
                             .lexically_proximate(abs_out)
                             .generic_string();
    }
    rec.mask_path = name;
    out_m.samples[i] = std::move(rec);
  }
  write_palette_json(static_cast<int>(params.n_classes), a.out / "palette.json");
  write_manifest(out_m, a.out / "manifest.json");
  return {{"command", "predict"},
          {"out", a.out.string()},
          {"n", out_m.samples.size()},
          {"manifest", (a.out / "manifest.json").string()}};
}

json cmd_predict(const PredictArgs& a, unsigned threads) {
  if (a.image.has_value() == a.manifest.has_value()) {
    throw ValidationError("predict needs exactly one of --image or --manifest");
  }
  return a.f64 ? predict_impl<double>(a, threads) : predict_impl<float>(a, threads);
}

json cmd_eval(const EvalArgs& a, std::ostream& err) {
  std::optional<MatchMode> mode;
  if (a.match == "one_to_one") {
    mode = MatchMode::one_to_one;
  } else if (a.match == "majority") {
    mode = MatchMode::majority;
  } else if (a.match != "none") {
    throw ValidationError("--match must be one of none, one_to_one, majority");
  }
  const auto pred_m = read_manifest(a.pred);
  const auto gt_m = read_manifest(a.gt);
  std::map<std::string, const SampleRecord*> by_id;
  for (const auto& s : pred_m.samples) by_id.emplace(s.id, &s);

  std::vector<std::pair<MaskImage, MaskImage>> pairs;
  std::size_t max_pred = 0, max_gt = 0;
  for (const auto& g : gt_m.samples) {
    const auto it = by_id.find(g.id);
    if (it == by_id.end()) throw ValidationError("no prediction for sample " + g.id);
    if (!it->second->mask_path || !g.mask_path) {
      throw ValidationError("sample " + g.id + " has no mask_path");
    }
    auto pred = read_mask_png(pred_m.resolve(*it->second->mask_path));
    auto gt = read_mask_png(gt_m.resolve(*g.mask_path));
    for (const auto v : pred.labels) {
      if (v != MaskImage::kIgnore) max_pred = std::max<std::size_t>(max_pred, v + 1);
    }
    for (const auto v : gt.labels) {
      if (v != MaskImage::kIgnore) max_gt = std::max<std::size_t>(max_gt, v + 1);
    }
    pairs.emplace_back(std::move(pred), std::move(gt));
  }
  if (pairs.empty()) throw ValidationError("ground-truth manifest has no samples");
  std::size_t n_gt = std::max(max_gt, a.classes);
  std::size_t n_pred = max_pred;
  if (!mode) n_gt = n_pred = std::max(n_gt, n_pred);
  if (mode == MatchMode::one_to_one) n_pred = std::max(n_pred, n_gt);

  ConfusionMatrix cm(n_pred, n_gt);
  for (const auto& [pred, gt] : pairs) accumulate(cm, pred, gt);
  std::optional<ClassMap> map;
  if (mode) {
    map = match_clusters(cm, *mode);
    cm = remap_predictions(cm, *map);
  }
  const auto result = mean_iou(cm);
  write_text_atomic(a.out, iou_report_json(result, map));
  err << iou_report_table(result);
  return {{"command", "eval"},
          {"out", a.out.string()},
          {"mean", result.mean},
          {"n_pixels", result.n_pixels},
          {"n_samples", pairs.size()}};
}

int exit_code(ErrorKind kind) {
  return kind == ErrorKind::validation ? 1 : 2;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Feature clustering, mask synthesis and distillation toolkit", "featseg"};
  app.require_subcommand(1);
  unsigned threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: FEATSEG_THREADS or hardware)");

  ToygenArgs tg;
  auto* toygen = app.add_subcommand("toygen", "Generate a procedural dataset");
  toygen->add_option("--out", tg.out, "Output directory")->required();
  toygen->add_option("--n", tg.n, "Number of samples")->required();
  toygen->add_option("--seed", tg.seed, "Dataset seed")->required();
  toygen->add_option("--size", tg.cfg.image_size, "Image side in pixels");
  toygen->add_option("--feature-size", tg.cfg.feature_size, "Feature map side");
  toygen->add_option("--feature-dim", tg.cfg.feature_dim, "Feature channels");
  toygen->add_option("--regions", tg.cfg.n_regions, "Number of regions (2-8)");
  toygen->add_option("--noise", tg.cfg.noise_sigma, "Feature noise sigma");
  toygen->add_option("--latent-dim", tg.cfg.latent_dim, "Latent dimension");
  toygen->add_option("--first-index", tg.first_index, "Index of the first sample");
  toygen->add_flag("--attr-class", tg.cfg.attr_class, "Label the hat as its own class");

  ClusterArgs cl;
  auto* cluster = app.add_subcommand("cluster", "Fit k-means on feature maps");
  cluster->add_option("--manifest", cl.manifest, "Dataset manifest")->required();
  cluster->add_option("--k", cl.k, "Number of clusters")->required();
  cluster->add_option("--seed", cl.seed, "Seed")->required();
  cluster->add_option("--out", cl.out, "Model directory")->required();
  cluster->add_flag("--l2-normalize", cl.l2, "L2-normalise pixel vectors");
  cluster->add_option("--minibatch", cl.minibatch, "Minibatch size");
  cluster->add_option("--max-samples", cl.max_samples, "Samples to cluster (0: all)");
  cluster->add_option("--max-iters", cl.max_iters, "Iteration cap");
  cluster->add_option("--rel-tol", cl.rel_tol, "Relative inertia tolerance");
  cluster->add_option("--restarts", cl.restarts, "Independent k-means++ runs; best inertia wins");
  cluster->add_flag("--f64", cl.f64, "64-bit distances");

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Write masks for every sample");
  synth->add_option("--manifest", sy.manifest, "Dataset manifest")->required();
  synth->add_option("--model", sy.model, "Model directory")->required();
  synth->add_option("--out", sy.out, "Output directory")->required();
  synth->add_option("--classmap", sy.classmap, "Cluster to class JSON");

  DirectionArgs dr;
  auto* fitdir = app.add_subcommand("fit-direction", "Fit a latent attribute direction");
  fitdir->add_option("--manifest", dr.manifest, "Manifest with latents and labels")->required();
  fitdir->add_option("--out", dr.out, "Output directory")->required();
  fitdir->add_option("--l2", dr.cfg.l2_penalty, "L2 penalty");
  fitdir->add_option("--max-iters", dr.cfg.max_iters, "Iteration cap");
  fitdir->add_option("--tol", dr.cfg.tol, "Gradient norm tolerance");
  fitdir->add_option("--seed", dr.cfg.seed, "Seed (recorded)");

  ManipulateArgs mp;
  auto* manip = app.add_subcommand("manipulate", "Move a latent along a direction");
  manip->add_option("--latent", mp.latent, "Latent FT01 file")->required();
  manip->add_option("--direction", mp.direction, "Direction directory")->required();
  manip->add_option("--alpha", mp.alpha, "Step along the direction")->required();
  manip->add_option("--out", mp.out, "Output FT01 file")->required();

  DistillArgs ds;
  auto* distill = app.add_subcommand("distill", "Train the segmentation network");
  distill->add_option("--manifest", ds.manifest, "Manifest with masks")->required();
  distill->add_option("--classes", ds.classes, "Number of classes")->required();
  distill->add_option("--out", ds.out, "Parameter directory")->required();
  distill->add_option("--epochs", ds.cfg.epochs, "Epochs");
  distill->add_option("--lr", ds.cfg.lr, "Learning rate");
  distill->add_option("--seed", ds.cfg.seed, "Seed");
  distill->add_option("--batch", ds.cfg.batch_size, "Batch size");
  distill->add_option("--momentum", ds.cfg.momentum, "Momentum");
  distill->add_flag("--f64", ds.f64, "64-bit arithmetic");

  PredictArgs pr;
  auto* predict = app.add_subcommand("predict", "Segment images");
  predict->add_option("--params", pr.params, "Parameter directory")->required();
  predict->add_option("--image", pr.image, "Input PNG");
  predict->add_option("--manifest", pr.manifest, "Predict every image of a manifest");
  predict->add_option("--out", pr.out, "Mask PNG, or directory with --manifest")->required();
  predict->add_flag("--f64", pr.f64, "64-bit arithmetic");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Mean IoU of predictions against ground truth");
  eval->add_option("--pred-manifest", ev.pred, "Prediction manifest")->required();
  eval->add_option("--gt-manifest", ev.gt, "Ground-truth manifest")->required();
  eval->add_option("--match", ev.match, "none, one_to_one or majority");
  eval->add_option("--classes", ev.classes, "Minimum number of classes");
  eval->add_option("--out", ev.out, "Report JSON")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    json summary;
    if (toygen->parsed()) {
      summary = cmd_toygen(tg, threads);
    } else if (cluster->parsed()) {
      summary = cmd_cluster(cl, threads);
    } else if (synth->parsed()) {
      summary = cmd_synth(sy, threads);
    } else if (fitdir->parsed()) {
      summary = cmd_fit_direction(dr);
    } else if (manip->parsed()) {
      summary = cmd_manipulate(mp);
    } else if (distill->parsed()) {
      summary = cmd_distill(ds, threads);
    } else if (predict->parsed()) {
      summary = cmd_predict(pr, threads);
    } else {
      summary = cmd_eval(ev, err);
    }
    out << summary.dump() << "\n";
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return 2;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace featseg
