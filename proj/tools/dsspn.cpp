// Command-line front end: each subcommand reads a JSON config (--config),
// writes a JSON report to --out (stdout when omitted) and logs to stderr.
// Exit status: 0 success, 1 validation failure, 2 I/O error, 64 usage.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dsspn/dsspn.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dsspn;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;
constexpr int kExitUsage = 64;

const std::map<std::string, std::string> kCommands = {
    {"validate-hierarchy", "check a hierarchy document and its dataset bindings"},
    {"gen-synth", "generate a synthetic dataset (and optional coarse variant)"},
    {"train", "train a model from dataset manifests"},
    {"eval", "evaluate a checkpoint on a dataset manifest"},
    {"predict", "write the hierarchical prediction for one image"},
    {"gradcheck", "finite-difference check of every differentiable op"},
    {"bench-autobatch", "compare batched and per-sample neuron execution"},
    {"bench-memory", "compare workspace and naive feature-buffer counts"},
};

void usage(std::ostream& os) {
  os << "usage: dsspn <subcommand> --config <file.json> [--out <report.json>]\n\nsubcommands:\n";
  for (const auto& [name, help] : kCommands) os << "  " << name << std::string(20 - name.size(), ' ') << help << '\n';
}

// Paths inside a config are relative to the config file.
struct Config {
  json j;
  fs::path dir;

  fs::path path(const std::string& key) const {
    if (!j.contains(key)) throw ValidationError("config is missing '" + key + "'");
    fs::path p = j.at(key).get<std::string>();
    return p.is_absolute() ? p : dir / p;
  }
  template <typename V>
  V get(const std::string& key, V fallback) const {
    return j.value(key, fallback);
  }
};

json validate_hierarchy(const Config& c) {
  const HierarchyDocument doc = load_hierarchy_file(c.path("hierarchy"), c.get("max_depth", kDefaultMaxDepth));
  const ConceptHierarchy& h = doc.hierarchy;
  json datasets = json::array();
  for (const auto& spec : doc.datasets) {
    const DatasetBinding b = bind_dataset(h, spec);
    json masked = json::object();
    for (ConceptId n : h.neuron_concepts()) {
      json off = json::array();
      const auto& m = b.child_mask(n);
      for (std::size_t k = 0; k < m.size(); ++k) {
        if (!m[k]) off.push_back(h.name(h.children(n)[k]));
      }
      if (!off.empty()) masked[h.name(n)] = off;
    }
    datasets.push_back({{"name", spec.name}, {"labels", spec.labels.size()}, {"masked_children", masked}});
  }
  json chains = json::array();
  for (ConceptId p : doc.chains.single_child_parents) chains.push_back(h.name(p));
  std::cerr << "hierarchy ok: " << h.size() << " concepts, " << h.neuron_concepts().size() << " neurons\n";
  return {{"valid", true},          {"concepts", h.size()},     {"neurons", h.neuron_concepts().size()},
          {"height", h.height()},   {"datasets", datasets},     {"single_child_parents", chains}};
}

SynthSpec synth_spec(const json& j) {
  SynthSpec s;
  s.num_samples = j.value("num_samples", s.num_samples);
  s.image_size = j.value("image_size", s.image_size);
  s.cell = j.value("cell", s.cell);
  s.channels = j.value("channels", s.channels);
  s.min_regions = j.value("min_regions", s.min_regions);
  s.max_regions = j.value("max_regions", s.max_regions);
  s.offset_scale = j.value("offset_scale", s.offset_scale);
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
  s.appearance_seed = j.value("appearance_seed", s.appearance_seed);
  return s;
}

json write_split(const fs::path& out_dir, const std::string& name, const std::string& split, const fs::path& hierarchy,
                 const std::vector<Tensor<float>>& images, const std::vector<LabelMap>& labels) {
  const fs::path dir = out_dir / name / split;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.name = name;
  m.hierarchy = fs::absolute(hierarchy).lexically_normal().string();
  m.labels_file = m.hierarchy;
  m.split = split;
  for (std::size_t i = 0; i < images.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%05zu", i);
    io::save_image(dir / (std::string("image_") + stem + ".dspn"), images[i]);
    io::save_label_map(dir / (std::string("label_") + stem + ".dspn"), labels[i]);
    m.samples.push_back({std::string("image_") + stem + ".dspn", std::string("label_") + stem + ".dspn"});
  }
  const fs::path manifest = dir / "manifest.json";
  write_json_file(manifest, to_json(m));
  std::cerr << "wrote " << images.size() << " samples to " << manifest.string() << '\n';
  return manifest.string();
}

json gen_synth(const Config& c) {
  const fs::path hpath = c.path("hierarchy");
  const HierarchyDocument doc = load_hierarchy_file(hpath);
  const std::string fine_name = c.j.at("dataset").get<std::string>();
  const DatasetBinding fine = doc.bind(fine_name);
  const fs::path out_dir = c.path("out_dir");
  json manifests = json::array();
  const json splits = c.j.value("splits", json{{"train", c.j.value("synth", json::object())}});
  for (const auto& [split, sj] : splits.items()) {
    const SynthSpec spec = synth_spec(sj);
    const auto samples = gen_synthetic(doc.hierarchy, fine, spec);
    std::vector<Tensor<float>> images;
    std::vector<LabelMap> labels;
    for (const auto& s : samples) {
      images.push_back(s.image);
      labels.push_back(s.labels);
    }
    manifests.push_back(write_split(out_dir, fine_name, split, hpath, images, labels));
    if (c.j.contains("coarse")) {
      const auto& cj = c.j.at("coarse");
      const std::string coarse_name = cj.at("dataset").get<std::string>();
      const DatasetBinding coarse = doc.bind(coarse_name);
      const std::size_t depth = cj.at("depth").get<std::size_t>();
      std::vector<LabelMap> coarse_labels;
      for (const auto& l : labels) coarse_labels.push_back(coarsen_labels(l, doc.hierarchy, fine, coarse, depth));
      manifests.push_back(write_split(out_dir, coarse_name, split, hpath, images, coarse_labels));
    }
  }
  return {{"manifests", manifests}};
}

std::vector<Dataset> load_datasets(const Config& c, const std::string& key, const HierarchyDocument& doc) {
  std::vector<Dataset> out;
  const fs::path base = c.dir;
  for (const auto& p : c.j.at(key)) {
    fs::path mp = p.get<std::string>();
    if (!mp.is_absolute()) mp = base / mp;
    out.push_back(load_dataset(load_manifest(mp), doc));
  }
  return out;
}

json train_cmd(const Config& c) {
  const HierarchyDocument doc = load_hierarchy_file(c.path("hierarchy"));
  TrainConfig tc = c.j.value("train", json::object()).get<TrainConfig>();
  const auto datasets = load_datasets(c, "manifests", doc);
  const fs::path out_dir = c.path("out_dir");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string());
  std::ofstream log(out_dir / "train_log.jsonl");
  if (!log) throw IoError("cannot write training log in " + out_dir.string());
  json checkpoints = json::object();
  TrainHooks hooks;
  hooks.log = &log;
  hooks.warn = &std::cerr;
  hooks.on_phase_end = [&](const std::string& phase, const NeuronGraph<float>& g) {
    std::string dir = "checkpoint_" + phase;
    std::replace(dir.begin(), dir.end(), ':', '_');
    save_checkpoint(out_dir / dir, g, doc.datasets);
    checkpoints[phase] = (out_dir / dir).string();
    std::cerr << "phase " << phase << " done; checkpoint " << (out_dir / dir).string() << '\n';
  };
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = train(tc, doc, datasets, hooks);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json report{{"steps", r.log.size()}, {"seconds", secs}, {"checkpoints", checkpoints},
              {"log", (out_dir / "train_log.jsonl").string()}};
  if (!r.log.empty()) report["final_loss"] = r.log.back().loss;
  return report;
}

json eval_cmd(const Config& c) {
  const Checkpoint ck = load_checkpoint(c.path("checkpoint"));
  fs::path mp = c.path("manifest");
  const Dataset ds = load_dataset(load_manifest(mp), ck.document);
  const SegmentationMetrics m = evaluate(ck.model, ds).metrics();
  std::cerr << "mIoU " << m.mean_iou << ", pixel acc " << m.pixel_acc << '\n';
  return to_json(m);
}

json predict_cmd(const Config& c) {
  const Checkpoint ck = load_checkpoint(c.path("checkpoint"));
  const DatasetBinding b = ck.document.bind(c.j.at("dataset").get<std::string>());
  const Tensor<float> image = io::load_image<float>(c.path("image"));
  const LabelMap pred = hierarchical_predict(ck.model, image, b);
  const fs::path out = c.path("output");
  io::save_label_map(out, pred);
  std::set<int> present(pred.values.begin(), pred.values.end());
  return {{"output", out.string()}, {"height", pred.height}, {"width", pred.width}, {"labels", present}};
}

json gradcheck_cmd(const Config& c, bool& ok) {
  GradCheckOptions opt;
  opt.eps = c.get("eps", opt.eps);
  opt.tolerance = c.get("tolerance", opt.tolerance);
  opt.max_per_tensor = c.get("max_per_tensor", std::size_t{8});
  const std::uint64_t seed = c.get("seed", std::uint64_t{0});
  const std::size_t rounds = c.get("rounds", std::size_t{3});
  std::vector<GradCheckResult> results;
  for (std::size_t r = 0; r < rounds; ++r) {
    GradCheckOptions all = opt;
    all.max_per_tensor = 0;
    for (auto& res : op_gradient_suite(seed + r, all)) results.push_back(std::move(res));
  }
  ModelConfig mc;
  mc.m = 4;
  mc.m0 = 8;
  mc.stem_channels = {4, 4, 4, 4, 4};
  if (c.j.contains("model")) mc = c.j.at("model").get<ModelConfig>();
  results.push_back(model_gradient_check(seed, mc, opt));
  ok = true;
  json out = json::array();
  for (const auto& r : results) {
    ok = ok && r.passed;
    out.push_back({{"name", r.name}, {"max_rel_error", r.max_rel_error}, {"checked", r.checked},
                   {"nonsmooth", r.nonsmooth}, {"passed", r.passed}});
    std::cerr << (r.passed ? "ok   " : "FAIL ") << r.name << "  max rel err " << r.max_rel_error << '\n';
  }
  return {{"passed", ok}, {"tolerance", opt.tolerance}, {"eps", opt.eps}, {"checks", out}};
}

json bench_autobatch(const Config& c) {
  const HierarchyDocument doc = load_hierarchy_file(c.path("hierarchy"));
  const DatasetBinding b = doc.bind(c.j.at("dataset").get<std::string>());
  const ModelConfig mc = c.j.value("model", json::object()).get<ModelConfig>();
  const NeuronGraph<float> g = build_model<float>(doc.hierarchy, mc, c.get("seed", std::uint64_t{0}));
  SynthSpec spec = synth_spec(c.j.value("synth", json::object()));
  const std::size_t batch = c.get("batch_size", std::size_t{8});
  const std::size_t batches = c.get("batches", std::size_t{5});
  spec.num_samples = batch * batches;
  const auto samples = gen_synthetic(doc.hierarchy, b, spec);
  double t_seq = 0, t_batch = 0;
  std::size_t steps = 0, executions = 0;
  bool identical = true;
  for (std::size_t k = 0; k < batches; ++k) {
    std::vector<ActivationPlan> plans;
    Tensor<float> images(Shape{batch, spec.channels, spec.image_size, spec.image_size});
    for (std::size_t i = 0; i < batch; ++i) {
      const auto& s = samples[k * batch + i];
      const LabelMap small = subsample_labels(s.labels, ModelConfig::kOutputStride);
      plans.push_back(plan_activation(present_concepts(small, b), doc.hierarchy, b, Structure::kDynamic, i));
      std::copy(s.image.data().begin(), s.image.data().end(), images.sample(i).begin());
    }
    const BatchSchedule sched = schedule(plans, doc.hierarchy);
    const BatchStats st = batch_stats(sched);
    steps += st.steps;
    executions += st.executions;
    auto t0 = std::chrono::steady_clock::now();
    std::vector<PlanOutputs<float>> seq;
    Tape<float> tape_seq(false);
    for (std::size_t i = 0; i < batch; ++i) {
      seq.push_back(forward_plan(tape_seq, g, tape_seq.constant(samples[k * batch + i].image), plans[i]).outputs);
    }
    auto t1 = std::chrono::steady_clock::now();
    Tape<float> tape_b(false);
    auto bf = execute_batched(tape_b, g, tape_b.constant(images), sched, plans);
    auto t2 = std::chrono::steady_clock::now();
    t_seq += std::chrono::duration<double>(t1 - t0).count();
    t_batch += std::chrono::duration<double>(t2 - t1).count();
    for (std::size_t i = 0; i < batch; ++i) {
      for (const auto& [n, r] : seq[i]) {
        identical = identical && r.logits.value() == bf.outputs[i].at(n).logits.value() &&
                    r.hidden.value() == bf.outputs[i].at(n).hidden.value();
      }
    }
  }
  std::cerr << "batched " << t_batch << "s vs per-sample " << t_seq << "s\n";
  return {{"steps", steps},
          {"executions", executions},
          {"merged", executions - steps},
          {"avg_activated", static_cast<double>(executions) / static_cast<double>(batch * batches)},
          {"identical_outputs", identical},
          {"sequential_seconds", t_seq},
          {"batched_seconds", t_batch},
          {"speedup_vs_sequential_wallclock", t_batch > 0 ? t_seq / t_batch : 0.0}};
}

json bench_memory(const Config& c) {
  const std::size_t depth = c.get("depth", std::size_t{5});
  const HierarchyDocument doc = comb_hierarchy(depth, c.get("branching", std::size_t{2}));
  const DatasetBinding b = doc.bind("all");
  ModelConfig mc = c.j.value("model", json::object()).get<ModelConfig>();
  const NeuronGraph<float> g = build_model<float>(doc.hierarchy, mc, c.get("seed", std::uint64_t{0}));
  const std::size_t size = c.get("image_size", std::size_t{16});
  std::mt19937_64 rng(c.get("seed", std::uint64_t{0}));
  std::normal_distribution<float> nd(0.f, 1.f);
  Tensor<float> image(Shape{1, mc.in_channels, size, size});
  for (auto& v : image.data()) v = nd(rng);
  const ActivationPlan plan = fixed_plan(doc.hierarchy, b);
  const std::size_t plane = (size / ModelConfig::kOutputStride) * (size / ModelConfig::kOutputStride);
  PathWorkspace<float> ws(g.max_neuron_depth(), g.max_input_channels() * plane);
  Tape<float> t1(false), t2(false);
  auto shared = forward_plan(t1, g, t1.constant(image), plan, {ConcatMode::kFused}, &ws);
  auto naive = forward_plan(t2, g, t2.constant(image), plan, {ConcatMode::kMaterialized});
  bool identical = true;
  for (const auto& [n, r] : shared.outputs) identical = identical && r.logits.value() == naive.outputs.at(n).logits.value();
  const double peak = static_cast<double>(shared.memory.peak_live_buffers);
  const double naive_peak = static_cast<double>(naive.memory.peak_live_buffers);
  std::cerr << "peak buffers " << peak << " (naive " << naive_peak << ")\n";
  return {{"depth", depth},
          {"neurons", plan.size()},
          {"peak_buffers", shared.memory.peak_live_buffers},
          {"naive_peak_buffers", naive.memory.peak_live_buffers},
          {"slot_allocations", ws.allocations()},
          {"ratio", naive_peak > 0 ? peak / naive_peak : 0.0},
          {"identical_outputs", identical}};
}

void emit(const json& report, const std::string& out) {
  if (out.empty()) {
    std::cout << report.dump(2) << '\n';
    return;
  }
  std::ofstream os(out);
  if (!os) throw IoError("cannot write report " + out);
  os << report.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2 || kCommands.count(argv[1]) == 0) {
    if (argc >= 2 && std::string(argv[1]) != "--help" && std::string(argv[1]) != "-h") {
      std::cerr << "unknown subcommand: " << argv[1] << "\n\n";
    }
    usage(std::cerr);
    return kExitUsage;
  }
  const std::string cmd = argv[1];
  CLI::App app{"dsspn " + cmd + ": " + kCommands.at(cmd)};
  std::string config_path, out_path;
  app.add_option("--config", config_path, "JSON config file")->required();
  app.add_option("--out", out_path, "write the JSON report here instead of stdout");
  try {
    app.parse(argc - 1, argv + 1);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  try {
    Config c{read_json_file(config_path), fs::path(config_path).parent_path()};
    json report;
    int status = 0;
    if (cmd == "validate-hierarchy") {
      report = validate_hierarchy(c);
    } else if (cmd == "gen-synth") {
      report = gen_synth(c);
    } else if (cmd == "train") {
      report = train_cmd(c);
    } else if (cmd == "eval") {
      report = eval_cmd(c);
    } else if (cmd == "predict") {
      report = predict_cmd(c);
    } else if (cmd == "gradcheck") {
      bool ok = false;
      report = gradcheck_cmd(c, ok);
      status = ok ? 0 : kExitValidation;
    } else if (cmd == "bench-autobatch") {
      report = bench_autobatch(c);
    } else {
      report = bench_memory(c);
    }
    emit(report, out_path);
    return status;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const HierarchyError& e) {
    std::cerr << "invalid hierarchy: " << e.what() << '\n';
    try {
      emit({{"valid", false}, {"error", e.what()}}, out_path);
    } catch (const IoError&) {
      return kExitIo;
    }
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "bad config: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
}
