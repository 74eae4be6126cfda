#include "fabme/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "fabme/bench.hpp"
#include "fabme/checks.hpp"
#include "fabme/data.hpp"
#include "fabme/model.hpp"
#include "fabme/train.hpp"

namespace fabme::cli {

namespace fs = std::filesystem;

namespace {

/// key,value result file.
class ResultFile {
 public:
  void add(const std::string& key, const std::string& value) { rows_.emplace_back(key, value); }
  void add(const std::string& key, double value) {
    std::ostringstream s;
    s.precision(10);
    s << value;
    add(key, s.str());
  }
  void add(const std::string& key, Index value) { add(key, std::to_string(value)); }
  /// Replaces the key,value layout with free-form CSV.
  void set_body(std::string body) { body_ = std::move(body); }

  void write(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write result file " + path.string());
    if (!body_.empty()) {
      out << body_;
      return;
    }
    out << "key,value\n";
    for (const auto& [k, v] : rows_) out << k << ',' << v << '\n';
  }

 private:
  std::vector<std::pair<std::string, std::string>> rows_;
  std::string body_;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// Training keys go to the training config, the rest to the graph spec.
/// Lines are blanked rather than dropped so both parsers report true line numbers.
void load_config(const fs::path& path, GraphSpec& graph, TrainConfig& train_cfg) {
  std::istringstream in(read_text(path));
  std::string graph_text, train_text, line;
  while (std::getline(in, line)) {
    std::string key = line.substr(0, std::min(line.find('='), line.find('#')));
    key.erase(0, key.find_first_not_of(" \t"));
    key.erase(key.find_last_not_of(" \t\r") + 1);
    const bool is_train = is_train_config_key(key);
    (is_train ? train_text : graph_text) += line + '\n';
    (is_train ? graph_text : train_text) += '\n';
  }
  try {
    graph = parse_graph_spec(graph_text, graph);
    train_cfg = parse_train_config(train_text, train_cfg);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

/// dir/<sub> when it exists, else dir itself.
fs::path partition(const fs::path& dir, const char* sub) {
  if (!fs::is_directory(dir)) throw Error("data directory not found: " + dir.string());
  return fs::is_directory(dir / sub) ? dir / sub : dir;
}

/// "class cx cy w h [conf]" per line, class 0-based.
std::vector<Detection> read_predictions(const fs::path& dir, const std::vector<Sample>& samples) {
  if (!fs::is_directory(dir)) throw Error("predictions directory not found: " + dir.string());
  std::vector<Detection> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const fs::path p = dir / (samples[i].id + ".txt");
    if (!fs::exists(p)) continue;
    std::ifstream in(p);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      std::istringstream fields(line);
      std::vector<double> v;
      double x;
      while (fields >> x) v.push_back(x);
      if (!fields.eof()) throw Error(p.string() + " line " + std::to_string(line_no) + ": not a number");
      if (v.empty()) continue;
      if (v.size() != 5 && v.size() != 6)
        throw Error(p.string() + " line " + std::to_string(line_no) + ": expected 5 or 6 fields");
      const Annotation a{static_cast<int>(v[0]) + 1, v[1], v[2], v[3], v[4]};
      out.push_back({static_cast<Index>(i), a.class_id,
                     annotation_box(a, static_cast<double>(samples[i].image.width),
                                    static_cast<double>(samples[i].image.height)),
                     v.size() == 6 ? v[5] : 1.0});
    }
  }
  return out;
}

/// Same layout; confidence at full precision so rankings survive a reload.
void write_predictions(const fs::path& dir, const std::vector<Sample>& samples, const std::vector<Detection>& dets) {
  fs::create_directories(dir);
  std::vector<std::ofstream> files;
  for (const auto& s : samples) {
    files.emplace_back(dir / (s.id + ".txt"));
    if (!files.back()) throw Error("cannot write predictions to " + dir.string());
    files.back() << std::fixed << std::setprecision(6);
  }
  for (const auto& d : dets) {
    const auto& img = samples[static_cast<std::size_t>(d.image)].image;
    const double w = static_cast<double>(img.width), h = static_cast<double>(img.height);
    files[static_cast<std::size_t>(d.image)] << d.class_id - 1 << ' ' << (d.box.x1 + d.box.x2) / (2 * w) << ' '
                                             << (d.box.y1 + d.box.y2) / (2 * h) << ' ' << d.box.width() / w << ' '
                                             << d.box.height() / h << ' ' << std::defaultfloat
                                             << std::setprecision(17) << d.confidence << std::fixed
                                             << std::setprecision(6) << '\n';
  }
}

std::string percent(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << 100.0 * v << '%';
  return s.str();
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fabric defect detector: tiling, training, evaluation, benchmarks and checks", "fabme"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  fs::path result_path;
  auto add_result = [&](CLI::App* sub, const std::string& name) {
    sub->add_option("--result", result_path, "CSV result file")->default_str("fabme_" + name + ".csv");
  };
  auto finish_result = [&](const std::string& name) {
    if (result_path.empty()) result_path = "fabme_" + name + ".csv";
  };

  // tile
  auto* tile = app.add_subcommand("tile", "tile a labeled image directory and split it 4:1 by source image");
  fs::path tile_in, tile_out, tile_coco;
  TileOptions tile_opts;
  tile->add_option("--in", tile_in, "input directory (images/ + labels/, or flat)")->required();
  tile->add_option("--out", tile_out, "output directory")->required();
  tile->add_option("--size", tile_opts.tile, "tile side in pixels")->capture_default_str()->check(CLI::PositiveNumber);
  tile->add_option("--seed", tile_opts.seed, "split seed")->capture_default_str();
  tile->add_option("--coco", tile_coco, "COCO json with the annotations");
  add_result(tile, "tile");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic weave dataset with train/val partitions");
  Index synth_n = 200, synth_size = 64;
  int synth_classes = 4;
  std::uint64_t synth_seed = 0;
  fs::path synth_out;
  synth->add_option("--n", synth_n, "number of images")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--classes", synth_classes, "defect classes used (1..20)")
      ->capture_default_str()
      ->check(CLI::Range(1, kNumDefectClasses));
  synth->add_option("--size", synth_size, "image side")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "generator and split seed")->capture_default_str();
  synth->add_option("--out", synth_out, "output directory")->required();
  add_result(synth, "synth");

  // train
  auto* trn = app.add_subcommand("train", "train a detector on DIR/train, validating on DIR/val");
  std::string variant = "fabme", scale = "nano-test";
  fs::path data_dir, config_path, train_out = "runs/train";
  Index epochs = 0, classes = 0;
  std::optional<std::uint64_t> seed;
  trn->add_option("--variant", variant, "baseline, fabme, c2f1..c2f4, emca-only")->capture_default_str();
  trn->add_option("--scale", scale, "s or nano-test")->capture_default_str();
  trn->add_option("--data", data_dir, "dataset directory")->required();
  trn->add_option("--config", config_path, "key=value graph and training config")->check(CLI::ExistingFile);
  trn->add_option("--epochs", epochs, "maximum epochs (overrides the config)")->check(CLI::PositiveNumber);
  trn->add_option("--classes", classes, "number of classes (overrides the config)")->check(CLI::Range(1, 20));
  trn->add_option("--seed", seed, "seed for initialization and shuffling");
  trn->add_option("--out", train_out, "run directory")->capture_default_str();
  add_result(trn, "train");

  // eval
  auto* ev = app.add_subcommand("eval", "mAP@0.5 of a checkpoint or of saved predictions");
  fs::path model_path, graph_path, pred_dir, save_pred_dir, eval_data;
  EvalOptions eval_opts;
  Index eval_classes = kNumDefectClasses;
  auto* model_opt = ev->add_option("--model", model_path, "checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--graph", graph_path, "graph spec of the checkpoint (default: model.graph beside it)")
      ->check(CLI::ExistingFile);
  auto* pred_opt = ev->add_option("--predictions", pred_dir, "directory of <id>.txt: class cx cy w h [conf]");
  model_opt->excludes(pred_opt);
  ev->add_option("--data", eval_data, "dataset directory (its val/ partition when present)")->required();
  ev->add_option("--conf", eval_opts.conf_threshold, "confidence threshold")->capture_default_str();
  ev->add_option("--nms", eval_opts.nms_iou, "NMS IoU threshold")->capture_default_str();
  ev->add_option("--classes", eval_classes, "class count for --predictions")->capture_default_str();
  ev->add_option("--save-predictions", save_pred_dir, "write decoded detections here");
  add_result(ev, "eval");

  // bench
  auto* bench = app.add_subcommand("bench", "time ss2d or quadratic attention over a token-count sweep");
  std::vector<std::string> bench_ops{"ss2d"};
  std::vector<Index> sweep{256, 1024, 4096};
  BenchOptions bench_opts;
  bench->add_option("--op", bench_ops, "ss2d and/or attention")
      ->check(CLI::IsMember({"ss2d", "attention"}))
      ->delimiter(',')
      ->capture_default_str();
  bench->add_option("--sweep", sweep, "token counts L")->delimiter(',')->capture_default_str();
  bench->add_option("--d-model", bench_opts.d_model, "channels")->capture_default_str()->check(CLI::PositiveNumber);
  bench->add_option("--d-state", bench_opts.d_state, "state size")->capture_default_str()->check(CLI::PositiveNumber);
  bench->add_option("--seed", bench_opts.seed, "input seed")->capture_default_str();
  add_result(bench, "bench");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check of one block on three shapes");
  std::string block;
  std::uint64_t gc_seed = 0;
  gc->add_option("--block", block, "block name")->required()->check(CLI::IsMember(gradcheck_block_names()));
  gc->add_option("--seed", gc_seed, "parameter and input seed")->capture_default_str();
  add_result(gc, "gradcheck");

  // params
  auto* prm = app.add_subcommand("params", "learnable parameter counts of graph presets");
  std::vector<std::string> param_variants{"fabme"};
  std::string param_scale = "s";
  Index param_classes = kNumDefectClasses;
  prm->add_option("--variant", param_variants, "one or more presets")->delimiter(',')->capture_default_str();
  prm->add_option("--scale", param_scale, "s or nano-test")->capture_default_str();
  prm->add_option("--classes", param_classes, "number of classes")->capture_default_str();
  add_result(prm, "params");

  // ablate
  auto* abl = app.add_subcommand("ablate", "train baseline, +EMCA and +C2F-VMamba(C2F3) on the same data");
  std::string abl_scale = "nano-test";
  fs::path abl_data, abl_config;
  Index abl_epochs = 0, abl_classes = 0;
  std::uint64_t abl_seed = 0;
  abl->add_option("--data", abl_data, "dataset directory")->required();
  abl->add_option("--scale", abl_scale, "s or nano-test")->capture_default_str();
  abl->add_option("--config", abl_config, "key=value training config")->check(CLI::ExistingFile);
  abl->add_option("--epochs", abl_epochs, "maximum epochs per variant")->check(CLI::PositiveNumber);
  abl->add_option("--classes", abl_classes, "number of classes")->check(CLI::Range(1, 20));
  abl->add_option("--seed", abl_seed, "seed")->capture_default_str();
  add_result(abl, "ablate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    // Still leave a result file when the subcommand is known.
    if (const auto subs = app.get_subcommands(); !subs.empty()) {
      // Options after a failing one may not have been stored yet.
      for (int i = 1; i < argc; ++i) {
        const std::string_view a = argv[i];
        if (a == "--result" && i + 1 < argc) result_path = argv[i + 1];
        else if (a.starts_with("--result=")) result_path = std::string(a.substr(9));
      }
      finish_result(subs.front()->get_name());
      ResultFile r;
      r.add("command", subs.front()->get_name());
      r.add("status", "error");
      r.add("error", "\"invalid arguments\"");
      try {
        r.write(result_path);
      } catch (const std::exception& w) {
        err << w.what() << '\n';
      }
    }
    return 1;
  }

  ResultFile result;
  std::string command = app.get_subcommands().front()->get_name();
  finish_result(command);
  result.add("command", command);
  try {
    if (command == "tile") {
      const auto s = tile_directory(tile_in, tile_out, tile_opts, tile_coco);
      result.add("sources", s.sources);
      result.add("train_tiles", s.train_tiles);
      result.add("val_tiles", s.val_tiles);
      result.add("annotations", s.annotations);
      out << "tiled " << s.sources << " images into " << s.train_tiles << " train and " << s.val_tiles
          << " val tiles (" << s.annotations << " annotations) under " << tile_out.string() << '\n';
    } else if (command == "synth") {
      const auto samples = gen_synth_dataset(synth_n, synth_classes, synth_seed, synth_size);
      std::vector<std::string> ids;
      for (const auto& s : samples) ids.push_back(s.id);
      const Split split = split_dataset(ids, synth_seed);
      const std::set<std::string> val(split.val.begin(), split.val.end());
      std::vector<Sample> tr, va;
      for (const auto& s : samples) (val.count(s.id) ? va : tr).push_back(s);
      save_samples(synth_out / "train", tr);
      save_samples(synth_out / "val", va);
      result.add("train_images", static_cast<Index>(tr.size()));
      result.add("val_images", static_cast<Index>(va.size()));
      out << "wrote " << tr.size() << " train and " << va.size() << " val images to " << synth_out.string() << '\n';
    } else if (command == "train") {
      GraphSpec graph = GraphSpec::preset(variant, scale);
      TrainConfig cfg;
      if (!config_path.empty()) load_config(config_path, graph, cfg);
      if (epochs > 0) cfg.max_epochs = epochs;
      if (classes > 0) graph.num_classes = classes;
      if (seed) {
        cfg.seed = *seed;
        graph.seed = *seed;
      }
      graph.validate();
      cfg.validate();
      const auto tr = load_samples(partition(data_dir, "train"));
      const auto va = load_samples(partition(data_dir, "val"));
      fs::create_directories(train_out);
      {
        std::ofstream g(train_out / "model.graph");
        g << "# variant " << variant_name(graph) << '\n' << format_graph_spec(graph);
        std::ofstream t(train_out / "train.cfg");
        t << format_train_config(cfg);
      }
      Model model(graph);
      TrainOutputs outputs;
      outputs.dir = train_out;
      outputs.on_epoch = [&](const EpochRecord& r) {
        err << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.train_loss << " val mAP@0.5 "
            << percent(r.val_map50) << '\n';
      };
      const auto t0 = std::chrono::steady_clock::now();
      const TrainResult r = train(model, tr, va, cfg, outputs);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      model.save(train_out / "model.ckpt");
      result.add("variant", variant_name(graph));
      result.add("params", model.count_params());
      result.add("epochs_run", static_cast<Index>(r.history.size()));
      result.add("best_epoch", r.best_epoch);
      result.add("best_map50", r.best_map50);
      result.add("stopped_early", r.stopped_early ? "true" : "false");
      result.add("seconds", secs);
      out << "best val mAP@0.5 " << percent(r.best_map50) << " at epoch " << r.best_epoch << " ("
          << r.history.size() << " epochs, " << std::fixed << std::setprecision(1) << secs << " s); checkpoint "
          << (train_out / "model.ckpt").string() << '\n';
    } else if (command == "eval") {
      if (model_path.empty() && pred_dir.empty()) throw Error("eval: one of --model or --predictions is required");
      const auto samples = load_samples(partition(eval_data, "val"));
      std::vector<Detection> dets;
      int num_classes = static_cast<int>(eval_classes);
      if (!model_path.empty()) {
        const fs::path gp = graph_path.empty() ? model_path.parent_path() / "model.graph" : graph_path;
        if (!fs::exists(gp)) throw Error("graph spec not found: " + gp.string() + " (pass --graph)");
        Model model(load_graph_spec(gp));
        model.load(model_path);
        dets = predict(model, samples, eval_opts);
        num_classes = static_cast<int>(model.spec().num_classes);
      } else {
        dets = read_predictions(pred_dir, samples);
      }
      if (!save_pred_dir.empty()) write_predictions(save_pred_dir, samples, dets);
      const EvalReport rep = map50(dets, ground_truth(samples), num_classes);
      std::ostringstream body;
      write_report_csv(body, rep);
      result.set_body(body.str());
      out << "mAP@0.5 = " << std::fixed << std::setprecision(2) << 100.0 * rep.map50 << "% over "
          << rep.classes.size() << " classes (" << samples.size() << " images, TP " << rep.tp << ", FP " << rep.fp
          << ", FN " << rep.fn << ")\n";
    } else if (command == "bench") {
      std::ostringstream body;
      bool header = true;
      for (const auto& op : bench_ops) {
        const auto rows = bench_sweep(op, sweep, bench_opts);
        write_bench_csv(body, rows, header);
        header = false;
        const auto ratios = growth_ratios(rows);
        out << op << " time ratios:";
        for (std::size_t i = 0; i < ratios.size(); ++i)
          out << ' ' << rows[i].length << "->" << rows[i + 1].length << '=' << std::fixed << std::setprecision(2)
              << ratios[i];
        out << '\n';
      }
      out << body.str();
      result.set_body(body.str());
    } else if (command == "gradcheck") {
      const auto checks = gradcheck_block(block, gc_seed);
      std::ostringstream body;
      body << "block,shape,passed,max_rel_err,worst\n";
      bool ok = true;
      double worst = 0;
      for (const auto& c : checks) {
        ok = ok && c.report.passed;
        worst = std::max(worst, c.report.max_rel_err);
        body << c.block << ',' << c.shape.str() << ',' << (c.report.passed ? "true" : "false") << ','
             << c.report.max_rel_err << ',' << c.report.worst << '\n';
        if (!c.report.failure.empty()) err << c.shape.str() << ": " << c.report.failure << '\n';
      }
      result.set_body(body.str());
      result.write(result_path);
      out << (ok ? "PASS" : "FAIL") << " max_rel_err=" << std::scientific << std::setprecision(3) << worst << '\n';
      return ok ? 0 : 1;
    } else if (command == "params") {
      std::ostringstream body;
      body << "variant,scale,params\n";
      for (const auto& v : param_variants) {
        GraphSpec g = GraphSpec::preset(v, param_scale);
        g.num_classes = param_classes;
        const Index n = Model(g).count_params();
        body << v << ',' << param_scale << ',' << n << '\n';
        out << v << ' ' << n << '\n';
      }
      result.set_body(body.str());
    } else if (command == "ablate") {
      TrainConfig cfg;
      if (!abl_config.empty()) cfg = parse_train_config(read_text(abl_config));
      if (abl_epochs > 0) cfg.max_epochs = abl_epochs;
      cfg.seed = abl_seed;
      const auto tr = load_samples(partition(abl_data, "train"));
      const auto va = load_samples(partition(abl_data, "val"));
      Index nc = abl_classes;
      if (nc == 0) {
        for (const auto* set : {&tr, &va})
          for (const auto& s : *set)
            for (const auto& a : s.annotations) nc = std::max<Index>(nc, a.class_id);
      }
      const auto rows = run_ablation(abl_scale, nc, tr, va, cfg, [&](const AblationRow& r) {
        err << r.label << ": mAP@0.5 " << percent(r.best_map50) << '\n';
      });
      std::ostringstream body;
      write_ablation_csv(body, rows);
      result.set_body(body.str());
      out << body.str();
    }
  } catch (const std::exception& e) {
    err << "fabme " << command << ": " << e.what() << '\n';
    result.add("status", "error");
    std::string msg = e.what();
    for (std::size_t p = msg.find('"'); p != std::string::npos; p = msg.find('"', p + 2)) msg.insert(p, 1, '"');
    result.add("error", '"' + msg + '"');
    try {
      result.write(result_path);
    } catch (const std::exception& w) {
      err << w.what() << '\n';
    }
    return 1;
  }
  result.add("status", "ok");
  try {
    result.write(result_path);
  } catch (const std::exception& e) {
    err << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace fabme::cli
