// Flat `key = value` run configuration shared by the CLI, the training
// loops and the checkpoint metadata.
#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "sdetr/losses.hpp"
#include "sdetr/optim.hpp"
#include "sdetr/transformer.hpp"
#include "sdetr/view_pipeline.hpp"

namespace sdetr {

enum class RegionTarget { kCrop, kObject };

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::invalid_argument(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "invalid configuration:";
    for (const auto& x : p) s += "\n  " + x;
    return s;
  }
  std::vector<std::string> problems_;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::uint64_t backbone_seed = 7;
  TransformerConfig model;
  ViewConfig views;
  bool augment = true;
  LossWeights loss = LossWeights::desk();
  RegionTarget region_target = RegionTarget::kCrop;
  bool aux_loss = false;
  AdamWConfig optim;
  double clip = 0.1;
  std::size_t batch = 8;
  StepSchedule schedule{20, 14, 0.1};
  std::size_t max_steps = 0;  // 0 = run the whole schedule
  std::size_t finetune_batch = 8;
  StepSchedule finetune_schedule{60, 45, 0.1};
  double finetune_lr = 1e-4;
  bool heads_only = false;
  bool finetune_flip = true;
  std::size_t threads = 1;

  /// Applies one `key=value`; throws ConfigError on unknown keys or
  /// malformed values.
  void set(const std::string& key, const std::string& value);

  /// Applies every non-comment line of a config file; all problems are
  /// collected before throwing.
  void apply_text(const std::string& text, const std::string& source = "config");

  /// Every serializable key, one per line, in a fixed order.
  std::string to_text() const;

  /// Cross-field checks; empty when the configuration is usable.
  std::vector<std::string> problems() const;
  void validate() const {
    auto p = problems();
    if (!p.empty()) throw ConfigError(std::move(p));
  }

  static std::vector<std::string> keys();
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class U>
U parse_number(const std::string& key, const std::string& v) {
  U out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError({key + ": cannot parse '" + v + "' as a number"});
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError({key + ": expected true/false, got '" + v + "'"});
}

template <class U>
std::string format_number(U v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string format_bool(bool b) { return b ? "true" : "false"; }

struct ConfigField {
  const char* key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;  // empty for write-only keys
};

template <class U>
ConfigField number_field(const char* key, U RunConfig::*member) {
  return {key, [member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<U>(k, v); },
          [member](const RunConfig& c) { return format_number(c.*member); }};
}

template <class U>
ConfigField nested_number(const char* key, std::function<U&(RunConfig&)> ref) {
  return {key, [ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_number<U>(k, v); },
          [ref](const RunConfig& c) { return format_number(ref(const_cast<RunConfig&>(c))); }};
}

inline ConfigField bool_field(const char* key, std::function<bool&(RunConfig&)> ref) {
  return {key, [ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_bool(k, v); },
          [ref](const RunConfig& c) { return format_bool(ref(const_cast<RunConfig&>(c))); }};
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    using C = RunConfig;
    std::vector<ConfigField> f;
    f.push_back(number_field("seed", &C::seed));
    f.push_back(number_field("backbone.seed", &C::backbone_seed));
    f.push_back(nested_number<std::size_t>("model.d_model", [](C& c) -> auto& { return c.model.d_model; }));
    f.push_back(nested_number<std::size_t>("model.heads", [](C& c) -> auto& { return c.model.heads; }));
    f.push_back(nested_number<std::size_t>("model.encoder_layers", [](C& c) -> auto& { return c.model.encoder_layers; }));
    f.push_back(nested_number<std::size_t>("model.decoder_layers", [](C& c) -> auto& { return c.model.decoder_layers; }));
    f.push_back(nested_number<std::size_t>("model.ffn_dim", [](C& c) -> auto& { return c.model.ffn_dim; }));
    f.push_back(nested_number<std::size_t>("model.queries", [](C& c) -> auto& { return c.model.queries; }));
    f.push_back({"model.projector",
                 [](C& c, const std::string& k, const std::string& v) {
                   if (v == "mlp") c.model.identity_projector = false;
                   else if (v == "identity") c.model.identity_projector = true;
                   else throw ConfigError({k + ": expected mlp or identity, got '" + v + "'"});
                 },
                 [](const C& c) { return std::string(c.model.identity_projector ? "identity" : "mlp"); }});
    f.push_back(nested_number<float>("views.tau", [](C& c) -> auto& { return c.views.tau; }));
    f.push_back(nested_number<int>("views.n", [](C& c) -> auto& { return c.views.n; }));
    f.push_back(nested_number<int>("views.size", [](C& c) -> auto& { return c.views.view_size; }));
    f.push_back(nested_number<float>("views.jitter", [](C& c) -> auto& { return c.views.jitter; }));
    f.push_back(nested_number<float>("views.base_min_ratio", [](C& c) -> auto& { return c.views.base_min_ratio; }));
    f.push_back(nested_number<float>("views.base_max_ratio", [](C& c) -> auto& { return c.views.base_max_ratio; }));
    f.push_back({"proposals.mode",
                 [](C& c, const std::string& k, const std::string& v) {
                   if (v == "objectness") c.views.mode = ProposalMode::kObjectness;
                   else if (v == "random") c.views.mode = ProposalMode::kRandom;
                   else throw ConfigError({k + ": expected objectness or random, got '" + v + "'"});
                 },
                 [](const C& c) {
                   return std::string(c.views.mode == ProposalMode::kObjectness ? "objectness" : "random");
                 }});
    f.push_back(nested_number<int>("views.proposal_pool", [](C& c) -> auto& { return c.views.proposal_pool; }));
    f.push_back(nested_number<float>("views.min_proposal_side", [](C& c) -> auto& { return c.views.min_proposal_side; }));
    f.push_back(bool_field("views.augment", [](C& c) -> bool& { return c.augment; }));
    f.push_back({"loss.preset",
                 [](C& c, const std::string& k, const std::string& v) {
                   if (v == "desk") c.loss = LossWeights::desk();
                   else if (v == "coco") c.loss = LossWeights::coco();
                   else if (v == "imagenet") c.loss = LossWeights::imagenet();
                   else throw ConfigError({k + ": expected desk, coco or imagenet, got '" + v + "'"});
                 },
                 {}});
    f.push_back(nested_number<double>("loss.lambda_r", [](C& c) -> auto& { return c.loss.region; }));
    f.push_back(nested_number<double>("loss.lambda_g", [](C& c) -> auto& { return c.loss.global; }));
    f.push_back(nested_number<double>("loss.lambda_loc", [](C& c) -> auto& { return c.loss.loc; }));
    f.push_back({"loss.region_target",
                 [](C& c, const std::string& k, const std::string& v) {
                   if (v == "crop") c.region_target = RegionTarget::kCrop;
                   else if (v == "object") c.region_target = RegionTarget::kObject;
                   else throw ConfigError({k + ": expected crop or object, got '" + v + "'"});
                 },
                 [](const C& c) { return std::string(c.region_target == RegionTarget::kCrop ? "crop" : "object"); }});
    f.push_back(bool_field("loss.aux", [](C& c) -> bool& { return c.aux_loss; }));
    f.push_back(nested_number<double>("optim.lr", [](C& c) -> auto& { return c.optim.lr; }));
    f.push_back(nested_number<double>("optim.weight_decay", [](C& c) -> auto& { return c.optim.weight_decay; }));
    f.push_back(nested_number<double>("optim.beta1", [](C& c) -> auto& { return c.optim.beta1; }));
    f.push_back(nested_number<double>("optim.beta2", [](C& c) -> auto& { return c.optim.beta2; }));
    f.push_back(nested_number<double>("optim.eps", [](C& c) -> auto& { return c.optim.eps; }));
    f.push_back(number_field("optim.clip", &C::clip));
    f.push_back(number_field("train.batch", &C::batch));
    f.push_back(nested_number<std::size_t>("train.epochs", [](C& c) -> auto& { return c.schedule.epochs; }));
    f.push_back(nested_number<std::size_t>("train.decay_epoch", [](C& c) -> auto& { return c.schedule.decay_epoch; }));
    f.push_back(number_field("train.max_steps", &C::max_steps));
    f.push_back(number_field("finetune.batch", &C::finetune_batch));
    f.push_back(nested_number<std::size_t>("finetune.epochs", [](C& c) -> auto& { return c.finetune_schedule.epochs; }));
    f.push_back(nested_number<std::size_t>("finetune.decay_epoch",
                                           [](C& c) -> auto& { return c.finetune_schedule.decay_epoch; }));
    f.push_back(number_field("finetune.lr", &C::finetune_lr));
    f.push_back(bool_field("finetune.heads_only", [](C& c) -> bool& { return c.heads_only; }));
    f.push_back(bool_field("finetune.flip", [](C& c) -> bool& { return c.finetune_flip; }));
    f.push_back(number_field("runtime.threads", &C::threads));
    return f;
  }();
  return fields;
}

}  // namespace detail

inline std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : detail::config_fields()) out.emplace_back(f.key);
  return out;
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) {
      f.set(*this, key, detail::trim(value));
      return;
    }
  }
  throw ConfigError({"unknown key '" + key + "'"});
}

inline void RunConfig::apply_text(const std::string& text, const std::string& source) {
  std::vector<std::string> problems;
  std::istringstream in(text);
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) {
      problems.push_back(where + "expected key = value");
      continue;
    }
    try {
      set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      for (const auto& p : e.problems()) problems.push_back(where + p);
    }
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

inline std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : detail::config_fields()) {
    if (f.get) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  }
  return out;
}

inline std::vector<std::string> RunConfig::problems() const {
  std::vector<std::string> p;
  if (model.heads == 0 || model.d_model % model.heads != 0) p.push_back("model.d_model must be a multiple of model.heads");
  if (model.d_model % 4 != 0) p.push_back("model.d_model must be divisible by 4");
  if (model.queries == 0) p.push_back("model.queries must be at least 1");
  if (views.n <= 0) p.push_back("views.n must be positive");
  if (static_cast<std::size_t>(std::max(views.n, 0)) != model.queries) {
    p.push_back("views.n (" + std::to_string(views.n) + ") must equal model.queries (" +
                std::to_string(model.queries) + ") for pretraining");
  }
  if (!(views.tau > 0 && views.tau <= 1)) p.push_back("views.tau must be in (0, 1]");
  if (views.view_size < 32 || views.view_size % 8 != 0) p.push_back("views.size must be a multiple of 8, at least 32");
  if (!(views.jitter >= 0 && views.jitter < 1)) p.push_back("views.jitter must be in [0, 1)");
  if (!(views.base_min_ratio > 0 && views.base_min_ratio <= views.base_max_ratio && views.base_max_ratio <= 1)) {
    p.push_back("views.base_min_ratio/base_max_ratio must satisfy 0 < min <= max <= 1");
  }
  if (views.proposal_pool < views.n) p.push_back("views.proposal_pool must be at least views.n");
  if (loss.region < 0 || loss.global < 0 || loss.loc < 0) p.push_back("loss weights must be non-negative");
  if (!(optim.lr >= 0) || !(optim.weight_decay >= 0)) p.push_back("optim.lr and optim.weight_decay must be non-negative");
  if (!(optim.beta1 >= 0 && optim.beta1 < 1 && optim.beta2 >= 0 && optim.beta2 < 1)) p.push_back("optim betas must be in [0, 1)");
  if (!(optim.eps > 0)) p.push_back("optim.eps must be positive");
  if (!(clip >= 0)) p.push_back("optim.clip must be non-negative (0 disables clipping)");
  if (batch == 0) p.push_back("train.batch must be positive");
  if (batch < 2 && !model.identity_projector) p.push_back("train.batch must be at least 2 with the mlp projector (batch norm)");
  if (schedule.epochs == 0 || schedule.decay_epoch >= schedule.epochs) p.push_back("train.decay_epoch must be below train.epochs");
  if (finetune_batch == 0) p.push_back("finetune.batch must be positive");
  if (finetune_schedule.epochs == 0 || finetune_schedule.decay_epoch >= finetune_schedule.epochs) {
    p.push_back("finetune.decay_epoch must be below finetune.epochs");
  }
  if (!(finetune_lr >= 0)) p.push_back("finetune.lr must be non-negative");
  if (threads == 0) p.push_back("runtime.threads must be positive");
  return p;
}

}  // namespace sdetr
