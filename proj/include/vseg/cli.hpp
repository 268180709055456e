#pragma once

#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vseg/checkpoint.hpp"
#include "vseg/dataset.hpp"
#include "vseg/evaluation.hpp"
#include "vseg/inference.hpp"
#include "vseg/pgm.hpp"
#include "vseg/postprocess.hpp"
#include "vseg/trainer.hpp"

namespace vseg {

struct RunConfig {
  std::string command;
  std::string method = "supervised";
  std::uint64_t seed = 1;
  std::string config;
  std::string data;
  std::string out = "out";
  std::string checkpoint;
  std::string init;
  std::string masks;

  std::size_t width = 64;
  std::size_t cardinality = 32;
  std::size_t blocks = 3;
  bool batchnorm = true;

  std::size_t batch_size = 8;
  double lr_bce = 1e-3;
  double lr_focal = 5e-4;
  double lr_semi = 5e-4;
  double switch_dsc = 0.5;
  std::size_t bce_epochs = 50;
  std::size_t epochs = 200;
  std::size_t semi_epochs = 50;
  std::size_t patience = 20;
  double ema_alpha = 0.99;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double gamma = 2.0;
  double alpha_focal = 0.25;
  double rampup = 0.1;
  bool augment = true;
  double target_dsc = 0;  // 0 disables

  double threshold = 0.5;
  int open_radius = 1;
  int close_radius = 1;

  std::size_t folds = 5;
  double validation_fraction = 0.15;
  bool overlays = true;

  double mm_per_pixel = 0.3;
  double needle_angle = 17.0;
  double skin_row = 0.0;

  std::size_t subjects = 10;
  std::size_t images = 30;
  std::size_t labeled = 6;
  std::size_t size = 70;

  ModelConfig model() const {
    ModelConfig m;
    m.base_width = width;
    m.cardinality = cardinality;
    m.blocks_per_stage = blocks;
    m.batchnorm = batchnorm;
    return m;
  }

  PostprocessConfig post() const { return {threshold, open_radius, close_radius}; }

  TrainConfig train() const {
    TrainConfig t;
    t.seed = seed;
    t.model = model();
    t.batch_size = batch_size;
    t.lr_bce = lr_bce;
    t.lr_focal = lr_focal;
    t.lr_semi = lr_semi;
    t.switch_dsc = switch_dsc;
    t.bce_epochs = bce_epochs;
    t.max_epochs = epochs;
    t.semi_epochs = semi_epochs;
    t.patience = patience;
    t.ema_alpha = ema_alpha;
    t.lambda1 = lambda1;
    t.lambda2 = lambda2;
    t.gamma = gamma;
    t.focal_alpha = alpha_focal;
    t.rampup_fraction = rampup;
    t.augment = augment;
    if (target_dsc > 0) t.target_dsc = target_dsc;
    t.post = post();
    return t;
  }

  std::vector<Method> methods() const {
    std::vector<Method> out;
    std::stringstream ss(method);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(parse_method(item));
    if (out.empty()) throw ConfigError("no method given");
    return out;
  }

  void validate() const {
    methods();
    if (command == "train" || command == "eval") train().validate();
    post().validate();
    if (folds < 2) throw ConfigError("folds must be at least 2");
    if (validation_fraction < 0 || validation_fraction >= 1) throw ConfigError("validation fraction must be in [0, 1)");
    if (!(mm_per_pixel > 0)) throw ConfigError("mm-per-pixel must be positive");
    if (!(needle_angle > 0 && needle_angle < 90)) throw ConfigError("needle angle must be in (0, 90)");
    PhantomDatasetConfig{subjects, images, labeled, size, seed}.validate();
  }

  nlohmann::json to_json() const {
    return {{"command", command},
            {"method", method},
            {"seed", seed},
            {"config", config},
            {"data", data},
            {"out", out},
            {"checkpoint", checkpoint},
            {"init", init},
            {"masks", masks},
            {"width", width},
            {"cardinality", cardinality},
            {"blocks", blocks},
            {"batchnorm", batchnorm},
            {"batch_size", batch_size},
            {"lr_bce", lr_bce},
            {"lr_focal", lr_focal},
            {"lr_semi", lr_semi},
            {"switch_dsc", switch_dsc},
            {"bce_epochs", bce_epochs},
            {"epochs", epochs},
            {"semi_epochs", semi_epochs},
            {"patience", patience},
            {"ema_alpha", ema_alpha},
            {"lambda1", lambda1},
            {"lambda2", lambda2},
            {"gamma", gamma},
            {"alpha_focal", alpha_focal},
            {"rampup", rampup},
            {"augment", augment},
            {"target_dsc", target_dsc},
            {"threshold", threshold},
            {"open_radius", open_radius},
            {"close_radius", close_radius},
            {"folds", folds},
            {"validation_fraction", validation_fraction},
            {"overlays", overlays},
            {"mm_per_pixel", mm_per_pixel},
            {"needle_angle", needle_angle},
            {"skin_row", skin_row},
            {"subjects", subjects},
            {"images", images},
            {"labeled", labeled},
            {"size", size}};
  }
};

namespace detail {

// JSON config entries become flags placed before the user's own flags, so the
// last-value policy lets the command line win.
inline std::vector<std::string> config_args(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError(path + ": config must be a JSON object");
  std::vector<std::string> args;
  for (const auto& [key, value] : j.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    std::string v;
    if (value.is_string())
      v = value.get<std::string>();
    else if (value.is_boolean())
      v = value.get<bool>() ? "true" : "false";
    else if (value.is_number())
      v = value.dump();
    else
      throw FormatError(path + ": value of '" + key + "' must be a string, number or boolean");
    args.push_back(flag);
    args.push_back(v);
  }
  return args;
}

inline std::vector<std::string> expand_config(const std::vector<std::string>& argv) {
  std::optional<std::string> config;
  for (std::size_t i = 1; i < argv.size(); ++i) {
    if (argv[i] == "--config" && i + 1 < argv.size()) config = argv[i + 1];
    if (argv[i].rfind("--config=", 0) == 0) config = argv[i].substr(9);
  }
  if (!config || argv.size() < 2) return argv;
  std::vector<std::string> out{argv[0], argv[1]};
  for (auto& a : config_args(*config)) out.push_back(std::move(a));
  out.insert(out.end(), argv.begin() + 2, argv.end());
  return out;
}

struct Artifacts {
  std::vector<std::string> paths;
  void write(const fs::path& p, const std::string& bytes) {
    write_file_atomic(p, bytes);
    paths.push_back(p.string());
  }
  void image(const fs::path& p, const Image& img) { write(p, encode_pgm(to_bytes(img))); }
  void mask(const fs::path& p, const Mask& m) {
    Grid<std::uint8_t> g(m.width, m.height);
    for (std::size_t i = 0; i < m.size(); ++i) g[i] = m[i] ? 255 : 0;
    write(p, encode_pgm(g));
  }
  void checkpoint(const fs::path& p, const SegModel<float>& model, const CheckpointMeta& meta) {
    write(p, encode_checkpoint(model, meta));
  }
};

inline void write_manifest(const RunConfig& rc, Artifacts& art) {
  const fs::path p = fs::path(rc.out) / "manifest.json";
  nlohmann::json j = {{"command", rc.command}, {"seed", rc.seed}, {"config", rc.to_json()}};
  j["artifacts"] = art.paths;
  j["artifacts"].push_back(p.string());
  write_file_atomic(p, j.dump(2) + "\n");
}

inline std::string file_stem(const DatasetEntry& e) { return e.subject + "_" + e.name; }

/// Centroid in native image pixels from a centroid at the model's input size.
inline Point to_native(Point c, std::size_t model_size, const Image& img) {
  const double sx = static_cast<double>(img.width) / static_cast<double>(model_size);
  const double sy = static_cast<double>(img.height) / static_cast<double>(model_size);
  return {(c.x + 0.5) * sx - 0.5, (c.y + 0.5) * sy - 0.5};
}

inline nlohmann::json navigation_record(const std::string& id, const std::optional<Point>& c, const RunConfig& rc) {
  nlohmann::json j = {{"image", id}};
  if (!c) {
    j["failed"] = true;
    j["error"] = "no vein found";
    return j;
  }
  j["centroid"] = {c->x, c->y};
  try {
    const PunctureCommand cmd = plan_puncture(*c, rc.skin_row, rc.mm_per_pixel, rc.needle_angle);
    j["failed"] = false;
    j["depth_mm"] = cmd.depth_mm;
    j["axis5_travel_mm"] = cmd.axis5_travel_mm;
    j["axis6_travel_mm"] = cmd.axis6_travel_mm;
    j["needle_angle_deg"] = cmd.needle_angle_deg;
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    j["failed"] = true;
    j["error"] = e.what();
  }
  return j;
}

inline SegModel<float> load_model(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  return load_checkpoint(rc.checkpoint).model;
}

inline int cmd_gen_phantom(const RunConfig& rc, std::ostream& out) {
  const Dataset d = generate_phantom_dataset({rc.subjects, rc.images, rc.labeled, rc.size, rc.seed});
  Artifacts art;
  std::string splits = "subject,image,split\n";
  for (const auto& e : d) {
    const fs::path dir = fs::path(rc.out) / e.subject;
    art.image(dir / (e.name + ".pgm"), e.image);
    art.mask(dir / (e.name + "_mask.pgm"), *e.ground_truth());
    splits += e.subject + "," + e.name + "," + to_string(e.split) + "\n";
  }
  art.write(fs::path(rc.out) / "splits.csv", splits);
  write_manifest(rc, art);
  out << "wrote " << d.size() << " images to " << rc.out << "\n";
  return 0;
}

inline int cmd_train(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const Method method = rc.methods().front();
  if (rc.methods().size() != 1) throw ConfigError("train takes exactly one method");
  const Dataset d = load_dataset(rc.data);
  std::vector<const DatasetEntry*> all;
  for (const auto& e : d) all.push_back(&e);
  const TrainingSplit split = make_training_split(all, rc.validation_fraction, derive_seed(rc.seed, {seed_tag::split}));
  TrainConfig tc = rc.train();
  tc.on_epoch = [&](const EpochInfo& e) {
    err << e.phase << " epoch " << e.epoch << " val_dsc " << e.student_dsc;
    if (e.teacher_dsc) err << " teacher " << *e.teacher_dsc;
    err << "\n";
  };
  Artifacts art;
  const fs::path o = rc.out;
  std::vector<LogRow> log;
  std::optional<SegModel<float>> init;
  if (!rc.init.empty()) init = load_checkpoint(rc.init).model;

  if (method == Method::supervised) {
    SupervisedResult r = train_supervised(split.labeled, split.validation, tc, std::move(init));
    art.checkpoint(o / "model.ckpt", r.model, {"supervised", "model", r.iterations, tc.ema_alpha, tc.model});
    log = r.log;
    out << "validation dsc " << r.best_val_dsc << "\n";
  } else {
    if (!init) {
      SupervisedResult s = train_supervised(split.labeled, split.validation, tc);
      art.checkpoint(o / "supervised.ckpt", s.model, {"supervised", "model", s.iterations, tc.ema_alpha, tc.model});
      log = s.log;
      init = std::move(s.model);
    }
    SemiResult r = train_semi(split.labeled, split.unlabeled, split.validation, method, *init, tc);
    for (const auto& row : r.log) log.push_back(row);
    const std::string name = to_string(method);
    art.checkpoint(o / "student.ckpt", r.student, {name, "student", r.iterations, tc.ema_alpha, tc.model});
    SegModel<float>* chosen = &r.student;
    if (r.teacher) {
      art.checkpoint(o / "teacher.ckpt", *r.teacher, {name, "teacher", r.iterations, tc.ema_alpha, tc.model});
      const Selection s = select_inference_model(*r.teacher, r.student, split.validation, tc.post);
      if (s.chosen == "teacher") chosen = &*r.teacher;
      out << "teacher dsc " << s.teacher_dsc << ", student dsc " << s.student_dsc << ", using " << s.chosen << "\n";
    } else {
      out << "validation dsc " << r.student_val_dsc << "\n";
    }
    art.checkpoint(o / "model.ckpt", *chosen, {name, chosen == &r.student ? "student" : "teacher", r.iterations,
                                                tc.ema_alpha, tc.model});
  }
  art.write(o / "train_log.csv", log_csv(log));
  write_manifest(rc, art);
  return 0;
}

inline int cmd_eval(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const Dataset d = load_dataset(rc.data);
  Artifacts art;
  const fs::path o = rc.out;
  CrossValConfig cv;
  cv.folds = rc.folds;
  cv.validation_fraction = rc.validation_fraction;
  cv.seed = rc.seed;
  cv.methods = rc.methods();
  cv.train = rc.train();
  cv.on_progress = [&](const std::string& s) { err << s << "\n"; };
  if (rc.overlays)
    cv.on_prediction = [&](const std::string& exp, std::size_t fold, const DatasetEntry& e, const Image& input,
                           const VeinMask& pred) {
      art.image(o / "overlays" / exp / ("fold_" + std::to_string(fold)) / (file_stem(e) + ".pgm"),
                overlay_boundary(input, pred.mask));
    };
  const auto experiments = cross_validate(d, cv);
  art.write(o / "results.csv", results_csv(experiments));
  art.write(o / "summary.csv", summary_csv(experiments));
  write_manifest(rc, art);
  for (const auto& e : experiments) {
    const SummaryRow a = aggregate(e.folds);
    out << e.name << ": dsc " << a.dsc.mean << " +- " << a.dsc.std << ", centroid " << a.centroid.mean << " +- "
        << a.centroid.std << ", failures " << a.failure_rate << "%\n";
  }
  return 0;
}

inline int cmd_infer(const RunConfig& rc, std::ostream& out) {
  SegModel<float> model = load_model(rc);
  const Dataset d = load_dataset(rc.data);
  const std::size_t S = model.config().input_size;
  std::vector<Image> images;
  for (const auto& e : d) images.push_back(resize_image(e.image, S));
  const auto preds = predict_masks(model, images, rc.post());
  Artifacts art;
  std::size_t failed = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Mask native = warp_mask(preds[i].mask, SpatialAug{.size = d[i].image.width});
    art.mask(fs::path(rc.out) / d[i].subject / (d[i].name + "_pred.pgm"), native);
    failed += preds[i].failed;
  }
  write_manifest(rc, art);
  out << "predicted " << d.size() << " masks, " << failed << " failures\n";
  return 0;
}

inline int cmd_navigate(const RunConfig& rc, std::ostream& out) {
  if (rc.checkpoint.empty() == rc.masks.empty()) throw ConfigError("navigate needs exactly one of --checkpoint or --masks");
  std::string lines;
  if (!rc.masks.empty()) {
    if (!fs::is_directory(rc.masks)) throw Error("mask directory not found: " + rc.masks);
    std::vector<fs::path> files;
    for (const auto& f : fs::recursive_directory_iterator(rc.masks))
      if (f.is_regular_file() && f.path().extension() == ".pgm") files.push_back(f.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const Mask m = read_mask(f);
      std::optional<Point> c;
      if (count_foreground(m) > 0) c = centroid(m);
      lines += navigation_record(fs::relative(f, rc.masks).string(), c, rc).dump() + "\n";
    }
  } else {
    SegModel<float> model = load_model(rc);
    const Dataset d = load_dataset(rc.data);
    const std::size_t S = model.config().input_size;
    std::vector<Image> images;
    for (const auto& e : d) images.push_back(resize_image(e.image, S));
    const auto preds = predict_masks(model, images, rc.post());
    for (std::size_t i = 0; i < d.size(); ++i) {
      std::optional<Point> c;
      if (!preds[i].failed) c = to_native(centroid(preds[i]), S, d[i].image);
      lines += navigation_record(d[i].id(), c, rc).dump() + "\n";
    }
  }
  Artifacts art;
  art.write(fs::path(rc.out) / "navigation.jsonl", lines);
  write_manifest(rc, art);
  out << "wrote " << fs::path(rc.out) / "navigation.jsonl" << "\n";
  return 0;
}

inline void add_common(CLI::App* app, RunConfig& rc) {
  app->add_option("--seed", rc.seed, "Root random seed");
  app->add_option("--config", rc.config, "JSON config file; flags override its values");
  app->add_option("--out", rc.out, "Output directory");
  app->add_option("--threshold", rc.threshold, "Foreground probability threshold");
  app->add_option("--open-radius", rc.open_radius, "Opening structuring element radius");
  app->add_option("--close-radius", rc.close_radius, "Closing structuring element radius");
}

inline void add_model(CLI::App* app, RunConfig& rc) {
  app->add_option("--width", rc.width, "Base channel width");
  app->add_option("--cardinality", rc.cardinality, "Groups per grouped convolution");
  app->add_option("--blocks", rc.blocks, "Residual blocks per encoder stage");
  app->add_option("--batchnorm", rc.batchnorm, "Use batch normalization (true/false)");
}

inline void add_training(CLI::App* app, RunConfig& rc) {
  app->add_option("--method", rc.method, "supervised, mean_teacher, pi_model, temporal_ensemble or pseudo_label");
  app->add_option("--data", rc.data, "Dataset directory")->required();
  app->add_option("--batch-size", rc.batch_size, "Mini-batch size");
  app->add_option("--lr-bce", rc.lr_bce, "Learning rate of the BCE stage");
  app->add_option("--lr-focal", rc.lr_focal, "Learning rate of the focal stage");
  app->add_option("--lr-semi", rc.lr_semi, "Learning rate of semi-supervised training");
  app->add_option("--switch-dsc", rc.switch_dsc, "Validation DSC that ends the BCE stage");
  app->add_option("--bce-epochs", rc.bce_epochs, "Maximum BCE epochs");
  app->add_option("--epochs", rc.epochs, "Maximum focal epochs");
  app->add_option("--semi-epochs", rc.semi_epochs, "Semi-supervised epochs");
  app->add_option("--patience", rc.patience, "Early stopping patience in epochs");
  app->add_option("--ema-alpha", rc.ema_alpha, "EMA decay of the teacher");
  app->add_option("--lambda1", rc.lambda1, "Supervised loss weight");
  app->add_option("--lambda2", rc.lambda2, "Unsupervised loss weight");
  app->add_option("--gamma", rc.gamma, "Focal loss gamma");
  app->add_option("--alpha-focal", rc.alpha_focal, "Focal loss alpha");
  app->add_option("--rampup", rc.rampup, "Fraction of iterations over which lambda2 ramps up");
  app->add_option("--augment", rc.augment, "Random augmentation (true/false)");
  app->add_option("--target-dsc", rc.target_dsc, "Stop supervised training at this validation DSC (0 disables)");
  app->add_option("--validation-fraction", rc.validation_fraction, "Labeled fraction held out for validation");
  add_model(app, rc);
}

}  // namespace detail

/// Parses and runs one command. Returns the process exit code.
inline int run_command(const std::vector<std::string>& raw_args, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  RunConfig rc;
  CLI::App app{"Ultrasound vein segmentation and puncture navigation"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-phantom", "Generate a synthetic phantom dataset");
  detail::add_common(gen, rc);
  gen->add_option("--subjects", rc.subjects, "Number of subjects");
  gen->add_option("--images", rc.images, "Images per subject");
  gen->add_option("--labeled", rc.labeled, "Labeled images per subject");
  gen->add_option("--size", rc.size, "Image side in pixels");

  auto* train = app.add_subcommand("train", "Train a model on a dataset");
  detail::add_common(train, rc);
  detail::add_training(train, rc);
  train->add_option("--init", rc.init, "Start semi-supervised training from this checkpoint");

  auto* eval = app.add_subcommand("eval", "Subject-level cross-validation");
  detail::add_common(eval, rc);
  detail::add_training(eval, rc);
  eval->add_option("--folds", rc.folds, "Number of folds");
  eval->add_option("--overlays", rc.overlays, "Write prediction overlays (true/false)");

  auto* infer = app.add_subcommand("infer", "Predict vein masks");
  detail::add_common(infer, rc);
  infer->add_option("--checkpoint", rc.checkpoint, "Model checkpoint")->required();
  infer->add_option("--data", rc.data, "Dataset directory")->required();

  auto* nav = app.add_subcommand("navigate", "Plan puncture commands from masks or a model");
  detail::add_common(nav, rc);
  nav->add_option("--checkpoint", rc.checkpoint, "Model checkpoint");
  nav->add_option("--data", rc.data, "Dataset directory (with --checkpoint)");
  nav->add_option("--masks", rc.masks, "Directory of mask PGM files");
  nav->add_option("--mm-per-pixel", rc.mm_per_pixel, "Physical pixel spacing in mm");
  nav->add_option("--needle-angle", rc.needle_angle, "Needle rail angle in degrees");
  nav->add_option("--skin-row", rc.skin_row, "Image row of the skin surface");

  std::vector<std::string> args;
  try {
    args = detail::expand_config(raw_args);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    CLI::App* sub = nullptr;
    for (auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return e.get_exit_code() ? e.get_exit_code() : 2;
  }
  rc.command = app.get_subcommands().front()->get_name();

  try {
    rc.validate();
    if (rc.command == "gen-phantom") return detail::cmd_gen_phantom(rc, out);
    if (rc.command == "train") return detail::cmd_train(rc, out, err);
    if (rc.command == "eval") return detail::cmd_eval(rc, out, err);
    if (rc.command == "infer") return detail::cmd_infer(rc, out);
    return detail::cmd_navigate(rc, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

inline int run_command(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run_command(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace vseg
