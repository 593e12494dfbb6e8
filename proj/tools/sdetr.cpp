// sdetr: command-line driver for data generation, pretraining, finetuning,
// evaluation, the frozen-head probe and attention export.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sdetr/sdetr.hpp"

namespace fs = std::filesystem;
using namespace sdetr;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct ConfigOptions {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigOptions& opts) {
  cmd->add_option("--config", opts.config_path, "key = value config file");
  cmd->add_option("--set", opts.overrides, "override one key (key=value), repeatable");
}

/// Defaults, then the config file, then --set overrides, then SDTR_THREADS.
RunConfig resolve_config(const ConfigOptions& opts) {
  RunConfig cfg;
  std::vector<std::string> problems;
  if (!opts.config_path.empty()) {
    try {
      cfg.apply_text(read_file(opts.config_path), opts.config_path);
    } catch (const ConfigError& e) {
      problems.insert(problems.end(), e.problems().begin(), e.problems().end());
    } catch (const std::runtime_error& e) {
      problems.push_back(e.what());
    }
  }
  for (const auto& kv : opts.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      problems.push_back("--set " + kv + ": expected key=value");
      continue;
    }
    try {
      cfg.set(detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
    } catch (const ConfigError& e) {
      for (const auto& p : e.problems()) problems.push_back("--set: " + p);
    }
  }
  if (const char* env = std::getenv("SDTR_THREADS")) {
    try {
      const auto cap = std::stoul(env);
      if (cap == 0) throw std::invalid_argument("zero");
      cfg.threads = std::min<std::size_t>(cfg.threads, cap);
    } catch (const std::exception&) {
      problems.push_back(std::string("SDTR_THREADS: expected a positive integer, got '") + env + "'");
    }
  }
  for (auto& p : cfg.problems()) problems.push_back(std::move(p));
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return cfg;
}

/// Records what a run did: command line, resolved config and outputs.
class RunManifest {
 public:
  RunManifest(fs::path out_dir, std::string command, const std::vector<std::string>& argv)
      : out_dir_(std::move(out_dir)) {
    fs::create_directories(out_dir_);
    text_ << "# sdetr run manifest\n";
    text_ << "version = " << SDETR_VERSION << "\n";
    text_ << "command = " << command << "\n";
    text_ << "argv =";
    for (const auto& a : argv) text_ << ' ' << a;
    text_ << "\n";
  }

  void config(const RunConfig& cfg) {
    std::clog << "resolved config:\n" << cfg.to_text();
    text_ << "\n[config]\n" << cfg.to_text();
  }

  void entry(const std::string& key, const std::string& value) { entries_ << key << " = " << value << "\n"; }

  void finish() {
    text_ << "\n[run]\n" << entries_.str();
    write_file(out_dir_ / "run_manifest.txt", text_.str());
  }

 private:
  fs::path out_dir_;
  std::ostringstream text_, entries_;
};

std::vector<Image> images_of(const std::vector<LabeledImage>& data) {
  std::vector<Image> out;
  out.reserve(data.size());
  for (const auto& d : data) out.push_back(d.image);
  return out;
}

/// Keys that fix the parameter shapes and the frozen backbone.
const std::vector<std::string>& architecture_keys() {
  static const std::vector<std::string> keys{"backbone.seed",        "model.d_model",  "model.heads",
                                             "model.encoder_layers", "model.decoder_layers", "model.ffn_dim",
                                             "model.queries",        "model.projector"};
  return keys;
}

std::string value_of(const std::string& config_text, const std::string& key) {
  std::istringstream in(config_text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos && detail::trim(line.substr(0, eq)) == key) return detail::trim(line.substr(eq + 1));
  }
  return "";
}

void require_compatible(const Checkpoint& ck, const RunConfig& cfg, const std::string& what) {
  const std::string stored = ck.text("meta.config"), current = cfg.to_text();
  std::vector<std::string> mismatched;
  for (const auto& key : architecture_keys()) {
    const auto a = value_of(stored, key), b = value_of(current, key);
    if (a != b) mismatched.push_back(key + " (checkpoint " + a + ", config " + b + ")");
  }
  if (!mismatched.empty()) {
    std::string msg = what + " is incompatible with the configuration:";
    for (const auto& m : mismatched) msg += "\n  " + m;
    throw ConfigError({msg});
  }
}

struct Detector {
  RunConfig cfg;
  FrozenBackbone backbone;
  DetrModel<float> model;
};

Detector load_detector(const fs::path& path) {
  const Checkpoint ck = Checkpoint::load(path);
  if (ck.text("meta.kind") != "finetune") {
    throw CheckpointError(path.string() + ": not a finetuned model (meta.kind = " + ck.text("meta.kind") + ")");
  }
  RunConfig cfg = config_from_checkpoint(ck);
  FrozenBackbone backbone(cfg.backbone_seed);
  DetrModel<float> model(Pretrainer::model_config(cfg, backbone), 0);
  model.add_class_head(kNumClasses, 0);
  ck.load_params(model.params());
  return {cfg, std::move(backbone), std::move(model)};
}

std::string report_csv(const MetricReport& r) {
  std::ostringstream os;
  os << std::setprecision(6) << "ap,ap50,ap75,ar1,ar10\n"
     << r.ap << ',' << r.ap50 << ',' << r.ap75 << ',' << r.ar1 << ',' << r.ar10 << '\n';
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised view-pair pretraining for a small detection transformer"};
  app.require_subcommand(1);
  const std::vector<std::string> args(argv + 1, argv + argc);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "render a synthetic labeled dataset");
  std::size_t gen_count = 0;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--count", gen_count, "number of images")->required();
  gen->add_option("--seed", gen_seed, "dataset seed")->required();
  gen->add_option("--out", gen_out, "output directory")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining on unlabeled images");
  ConfigOptions pre_cfg;
  std::string pre_data, pre_out, pre_resume;
  add_config_options(pre, pre_cfg);
  pre->add_option("--data", pre_data, "dataset manifest (labels ignored)")->required();
  pre->add_option("--out", pre_out, "output directory")->required();
  pre->add_option("--resume", pre_resume, "continue from a pretraining checkpoint");

  // finetune
  auto* fin = app.add_subcommand("finetune", "supervised finetuning");
  ConfigOptions fin_cfg;
  std::string fin_data, fin_out, fin_init = "scratch";
  std::uint64_t fin_seed = 0;
  add_config_options(fin, fin_cfg);
  fin->add_option("--data", fin_data, "labeled training manifest")->required();
  fin->add_option("--out", fin_out, "output directory")->required();
  fin->add_option("--init", fin_init, "'scratch' or a pretraining checkpoint");
  fin->add_option("--seed", fin_seed, "model, class head and data-order seed");

  // eval
  auto* ev = app.add_subcommand("eval", "AP/AR of a finetuned model");
  std::string ev_model, ev_data, ev_out;
  ev->add_option("--model", ev_model, "finetuned checkpoint")->required();
  ev->add_option("--data", ev_data, "labeled evaluation manifest")->required();
  ev->add_option("--out", ev_out, "output directory")->required();

  // probe
  auto* probe = app.add_subcommand("probe", "frozen-body head probe: pretrained vs random init");
  ConfigOptions probe_cfg;
  std::string probe_init, probe_data, probe_eval, probe_out;
  std::uint64_t probe_seed = 0;
  add_config_options(probe, probe_cfg);
  probe->add_option("--init", probe_init, "pretraining checkpoint")->required();
  probe->add_option("--data", probe_data, "labeled training manifest")->required();
  probe->add_option("--eval-data", probe_eval, "labeled evaluation manifest")->required();
  probe->add_option("--out", probe_out, "output directory")->required();
  probe->add_option("--seed", probe_seed, "finetuning seed");

  // export-attn
  auto* exp = app.add_subcommand("export-attn", "decoder cross-attention maps as PGM files");
  std::string exp_model, exp_image, exp_out;
  exp->add_option("--model", exp_model, "finetuned or pretraining checkpoint")->required();
  exp->add_option("--image", exp_image, "PPM image (sides divisible by 8)")->required();
  exp->add_option("--out", exp_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (gen->parsed()) {
      RunManifest manifest(gen_out, "gen-data", args);
      SceneSpec spec;
      spec.seed = gen_seed;
      const auto path = generate_dataset(gen_count, spec, gen_out);
      manifest.entry("manifest", path.string());
      manifest.entry("count", std::to_string(gen_count));
      manifest.finish();
      std::cout << path.string() << '\n';
    } else if (pre->parsed()) {
      const RunConfig cfg = resolve_config(pre_cfg);
      RunManifest manifest(pre_out, "pretrain", args);
      manifest.config(cfg);
      Pretrainer trainer(cfg, images_of(load_dataset(pre_data)));
      if (!pre_resume.empty()) {
        trainer.resume(Checkpoint::load(pre_resume));
        std::clog << "resumed at step " << trainer.progress().step << '\n';
      }
      trainer.run(pre_out, [&](const StepRecord& r) {
        if (r.step % 50 == 0) std::clog << "step " << r.step << " epoch " << r.epoch << " loss " << r.loss.total << '\n';
      });
      manifest.entry("data", pre_data);
      manifest.entry("steps", std::to_string(trainer.progress().step));
      manifest.entry("final", (fs::path(pre_out) / "final.sdtr").string());
      manifest.finish();
    } else if (fin->parsed()) {
      const RunConfig cfg = resolve_config(fin_cfg);
      RunManifest manifest(fin_out, "finetune", args);
      manifest.config(cfg);
      std::optional<Checkpoint> init;
      if (fin_init != "scratch") {
        init = Checkpoint::load(fin_init);
        require_compatible(*init, cfg, fin_init);
      }
      std::clog << "initialization: " << (init ? fin_init : std::string("scratch")) << '\n';
      Finetuner ft(cfg, load_dataset(fin_data), init ? &*init : nullptr, fin_seed);
      MetricsLog log(fs::path(fin_out) / "metrics.csv", 0);
      ft.run([&](const StepRecord& r) { log.append(r); });
      ft.checkpoint().save(fs::path(fin_out) / "model.sdtr");
      manifest.entry("init", init ? fin_init : "scratch");
      manifest.entry("seed", std::to_string(fin_seed));
      manifest.entry("model", (fs::path(fin_out) / "model.sdtr").string());
      manifest.finish();
    } else if (ev->parsed()) {
      RunManifest manifest(ev_out, "eval", args);
      const Detector det = load_detector(ev_model);
      manifest.config(det.cfg);
      const std::string csv = report_csv(evaluate_model(det.model, det.backbone, load_dataset(ev_data)));
      write_file(fs::path(ev_out) / "metrics.csv", csv);
      manifest.entry("model", ev_model);
      manifest.entry("data", ev_data);
      manifest.finish();
      std::cout << csv;
    } else if (probe->parsed()) {
      const RunConfig cfg = resolve_config(probe_cfg);
      RunManifest manifest(probe_out, "probe", args);
      manifest.config(cfg);
      const Checkpoint ck = Checkpoint::load(probe_init);
      require_compatible(ck, cfg, probe_init);
      const auto rows = frozen_head_probe(cfg, ck, load_dataset(probe_data), load_dataset(probe_eval), probe_seed);
      const std::string table = format_probe_table(rows);
      write_file(fs::path(probe_out) / "probe.csv", table);
      manifest.entry("init", probe_init);
      manifest.finish();
      std::cout << table;
    } else if (exp->parsed()) {
      RunManifest manifest(exp_out, "export-attn", args);
      const Checkpoint ck = Checkpoint::load(exp_model);
      RunConfig cfg = config_from_checkpoint(ck);
      manifest.config(cfg);
      const FrozenBackbone backbone(cfg.backbone_seed);
      DetrModel<float> model(Pretrainer::model_config(cfg, backbone), 0);
      if (ck.contains("class.weight")) model.add_class_head(kNumClasses, 0);
      ck.load_params(model.params());
      const auto out = export_attention(model, backbone, load_ppm(exp_image), exp_out);
      manifest.entry("maps", std::to_string(out.maps.size()));
      manifest.entry("boxes", out.boxes.string());
      manifest.finish();
      std::cout << out.maps.size() << " attention maps written to " << exp_out << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 0;
}
