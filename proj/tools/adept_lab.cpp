// adept-lab: pretrain a tiny frozen transformer, adapt it with soft-prompt
// methods (plain, decomposed, adaptive), evaluate, and run the attention /
// offset probes. Every command prints one JSON report on stdout (or to
// --out) and exits 0 on success, 2 on configuration errors, 1 on runtime
// errors.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "adeptlab/analysis.hpp"
#include "adeptlab/backbone.hpp"
#include "adeptlab/error.hpp"
#include "adeptlab/peft.hpp"
#include "adeptlab/serialize.hpp"
#include "adeptlab/tasks.hpp"

namespace {

using nlohmann::json;
using namespace adeptlab;

constexpr const char* kSchema = "adept-lab/v1";

// Built-in defaults form a complete, working recipe: pretrain the default
// backbone on the two source tasks, then adapt any method to the target
// task. Config file values override these; flags override both.
struct CliConfig {
  struct {
    std::size_t vocab_size = 64;
    std::size_t embed_dim = 16;
    std::size_t heads = 2;
    std::size_t head_dim = 8;
    std::size_t layers = 2;
    std::size_t classes = 2;
    std::size_t max_content_len = 32;
    std::size_t max_prompt_len = 16;
    std::size_t ffn_hidden = 32;
    std::string positional_mode = "none";
  } backbone;

  struct {
    std::string kind = "keyed-presence";
    std::size_t key = 7;
    std::size_t threshold = 1;
    std::size_t min_len = 12;
    std::size_t max_len = 12;
    std::size_t vocab = 64;
    std::uint64_t seed = 11;
    std::size_t n = 200;
    // The pretraining suite is derived from the target: a keyed-count
    // task on `key` plus a keyed-presence task on `aux_key`, each task
    // excluding the other's key so the suite stays label-consistent.
    std::size_t aux_key = 19;
    std::size_t source_threshold = 2;
    std::size_t source_n = 400;
  } task;

  struct {
    std::string kind = "adept";
    std::size_t prompt_len = 8;
    std::size_t rank = 0;  // 0 = largest rank that fits the budget
    std::size_t max_content_len = 0;  // decomposed table length; 0 = backbone's
    std::size_t budget = 256;
  } method;

  struct {
    double prompt_lr = 0.5;
    double network_lr = 0.01;
    std::size_t steps = 1000;
    std::size_t batch_size = 16;
    std::size_t eval_interval = 100;
    std::uint64_t seed = 0;
    std::size_t pretrain_steps = 1500;
    double pretrain_lr = 0.1;
    std::size_t pretrain_batch = 16;
  } run;

  struct {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t position = 0;
    std::size_t example = 0;
    std::string split = "test";
    bool scaled = true;
    std::size_t prepend = 2;
    std::vector<std::size_t> shifts = {0, 1, 8, 16};
  } analysis;
};

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
  throw ConfigError(why, key);
}

std::size_t as_uint(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0)
    return static_cast<std::size_t>(v.get<long long>());
  bad_key(key, "expected a non-negative integer");
}

std::uint64_t as_u64(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0)
    return static_cast<std::uint64_t>(v.get<long long>());
  bad_key(key, "expected a non-negative integer");
}

double as_number(const json& v, const std::string& key) {
  if (v.is_number()) return v.get<double>();
  bad_key(key, "expected a number");
}

bool as_bool(const json& v, const std::string& key) {
  if (v.is_boolean()) return v.get<bool>();
  bad_key(key, "expected true or false");
}

std::string as_string(const json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  bad_key(key, "expected a string");
}

std::vector<std::size_t> as_uint_list(const json& v, const std::string& key) {
  if (!v.is_array()) bad_key(key, "expected an array of non-negative integers");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out.push_back(as_uint(v[i], key + "[" + std::to_string(i) + "]"));
  return out;
}

void apply_backbone(const json& obj, CliConfig& c) {
  for (const auto& [key, value] : obj.items()) {
    const std::string dotted = "backbone." + key;
    if (key == "vocab_size") c.backbone.vocab_size = as_uint(value, dotted);
    else if (key == "embed_dim") c.backbone.embed_dim = as_uint(value, dotted);
    else if (key == "heads") c.backbone.heads = as_uint(value, dotted);
    else if (key == "head_dim") c.backbone.head_dim = as_uint(value, dotted);
    else if (key == "layers") c.backbone.layers = as_uint(value, dotted);
    else if (key == "classes") c.backbone.classes = as_uint(value, dotted);
    else if (key == "max_content_len") c.backbone.max_content_len = as_uint(value, dotted);
    else if (key == "max_prompt_len") c.backbone.max_prompt_len = as_uint(value, dotted);
    else if (key == "ffn_hidden") c.backbone.ffn_hidden = as_uint(value, dotted);
    else if (key == "positional_mode") c.backbone.positional_mode = as_string(value, dotted);
    else bad_key(dotted, "unknown key");
  }
}

void apply_task(const json& obj, CliConfig& c) {
  for (const auto& [key, value] : obj.items()) {
    const std::string dotted = "task." + key;
    if (key == "kind") c.task.kind = as_string(value, dotted);
    else if (key == "key") c.task.key = as_uint(value, dotted);
    else if (key == "threshold") c.task.threshold = as_uint(value, dotted);
    else if (key == "min_len") c.task.min_len = as_uint(value, dotted);
    else if (key == "max_len") c.task.max_len = as_uint(value, dotted);
    else if (key == "vocab") c.task.vocab = as_uint(value, dotted);
    else if (key == "seed") c.task.seed = as_u64(value, dotted);
    else if (key == "n") c.task.n = as_uint(value, dotted);
    else if (key == "aux_key") c.task.aux_key = as_uint(value, dotted);
    else if (key == "source_threshold") c.task.source_threshold = as_uint(value, dotted);
    else if (key == "source_n") c.task.source_n = as_uint(value, dotted);
    else bad_key(dotted, "unknown key");
  }
}

void apply_method(const json& obj, CliConfig& c) {
  for (const auto& [key, value] : obj.items()) {
    const std::string dotted = "method." + key;
    if (key == "kind") c.method.kind = as_string(value, dotted);
    else if (key == "prompt_len") c.method.prompt_len = as_uint(value, dotted);
    else if (key == "rank") c.method.rank = as_uint(value, dotted);
    else if (key == "max_content_len") c.method.max_content_len = as_uint(value, dotted);
    else if (key == "budget") c.method.budget = as_uint(value, dotted);
    else bad_key(dotted, "unknown key");
  }
}

void apply_run(const json& obj, CliConfig& c) {
  for (const auto& [key, value] : obj.items()) {
    const std::string dotted = "run." + key;
    if (key == "prompt_lr") c.run.prompt_lr = as_number(value, dotted);
    else if (key == "network_lr") c.run.network_lr = as_number(value, dotted);
    else if (key == "steps") c.run.steps = as_uint(value, dotted);
    else if (key == "batch_size") c.run.batch_size = as_uint(value, dotted);
    else if (key == "eval_interval") c.run.eval_interval = as_uint(value, dotted);
    else if (key == "seed") c.run.seed = as_u64(value, dotted);
    else if (key == "pretrain_steps") c.run.pretrain_steps = as_uint(value, dotted);
    else if (key == "pretrain_lr") c.run.pretrain_lr = as_number(value, dotted);
    else if (key == "pretrain_batch") c.run.pretrain_batch = as_uint(value, dotted);
    else bad_key(dotted, "unknown key");
  }
}

void apply_analysis(const json& obj, CliConfig& c) {
  for (const auto& [key, value] : obj.items()) {
    const std::string dotted = "analysis." + key;
    if (key == "layer") c.analysis.layer = as_uint(value, dotted);
    else if (key == "head") c.analysis.head = as_uint(value, dotted);
    else if (key == "position") c.analysis.position = as_uint(value, dotted);
    else if (key == "example") c.analysis.example = as_uint(value, dotted);
    else if (key == "split") c.analysis.split = as_string(value, dotted);
    else if (key == "scaled") c.analysis.scaled = as_bool(value, dotted);
    else if (key == "prepend") c.analysis.prepend = as_uint(value, dotted);
    else if (key == "shifts") c.analysis.shifts = as_uint_list(value, dotted);
    else bad_key(dotted, "unknown key");
  }
}

void apply_config_file(const std::string& path, CliConfig& c) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path, "--config");
  json doc = json::parse(f, nullptr, /*allow_exceptions=*/false);
  if (doc.is_discarded()) throw ConfigError("invalid JSON in " + path, "--config");
  if (!doc.is_object()) throw ConfigError("top level must be an object", "--config");
  for (const auto& [key, value] : doc.items()) {
    if (!value.is_object()) bad_key(key, "section must be an object");
    if (key == "backbone") apply_backbone(value, c);
    else if (key == "task") apply_task(value, c);
    else if (key == "method") apply_method(value, c);
    else if (key == "run") apply_run(value, c);
    else if (key == "analysis") apply_analysis(value, c);
    else bad_key(key, "unknown section");
  }
}

void validate(const CliConfig& c) {
  const auto& b = c.backbone;
  if (b.vocab_size < 2) bad_key("backbone.vocab_size", "must be at least 2");
  if (b.embed_dim == 0) bad_key("backbone.embed_dim", "must be at least 1");
  if (b.heads == 0) bad_key("backbone.heads", "must be at least 1");
  if (b.head_dim == 0) bad_key("backbone.head_dim", "must be at least 1");
  if (b.embed_dim != b.heads * b.head_dim)
    bad_key("backbone.embed_dim", "must equal heads * head_dim");
  if (b.layers == 0) bad_key("backbone.layers", "must be at least 1");
  if (b.classes < 2) bad_key("backbone.classes", "must be at least 2");
  if (b.max_content_len == 0) bad_key("backbone.max_content_len", "must be at least 1");
  if (b.max_prompt_len == 0) bad_key("backbone.max_prompt_len", "must be at least 1");
  if (b.ffn_hidden == 0) bad_key("backbone.ffn_hidden", "must be at least 1");
  if (b.positional_mode != "none" && b.positional_mode != "learned-absolute")
    bad_key("backbone.positional_mode", "must be \"none\" or \"learned-absolute\"");

  const auto& t = c.task;
  if (t.kind != "keyed-presence" && t.kind != "keyed-count")
    bad_key("task.kind", "must be \"keyed-presence\" or \"keyed-count\"");
  if (t.vocab < 2) bad_key("task.vocab", "must be at least 2");
  if (t.vocab > b.vocab_size)
    bad_key("task.vocab", "exceeds backbone.vocab_size");
  if (t.key == kNeutralToken || t.key >= t.vocab)
    bad_key("task.key", "must be a non-neutral token id below task.vocab");
  if (t.aux_key == kNeutralToken || t.aux_key >= t.vocab)
    bad_key("task.aux_key", "must be a non-neutral token id below task.vocab");
  if (t.aux_key == t.key) bad_key("task.aux_key", "must differ from task.key");
  if (t.threshold == 0) bad_key("task.threshold", "must be at least 1");
  if (t.source_threshold == 0) bad_key("task.source_threshold", "must be at least 1");
  if (t.min_len == 0) bad_key("task.min_len", "must be at least 1");
  if (t.min_len > t.max_len) bad_key("task.min_len", "exceeds task.max_len");
  if (t.max_len > b.max_content_len)
    bad_key("task.max_len", "exceeds backbone.max_content_len");
  for (auto [n, key] : {std::pair<std::size_t, const char*>{t.n, "task.n"},
                        {t.source_n, "task.source_n"}}) {
    if (n < 10) bad_key(key, "must be at least 10");
    if (n % 2 != 0 && n < 15) bad_key(key, "odd sizes below 15 cannot be split");
  }

  const auto& m = c.method;
  if (m.kind != "pt" && m.kind != "dept" && m.kind != "adept")
    bad_key("method.kind", "must be \"pt\", \"dept\" or \"adept\"");
  if (m.kind == "pt" && m.prompt_len == 0)
    bad_key("method.prompt_len", "a plain prompt needs at least one row");
  if (m.prompt_len > b.max_prompt_len)
    bad_key("method.prompt_len", "exceeds backbone.max_prompt_len");
  const std::size_t table_len =
      m.max_content_len ? m.max_content_len : b.max_content_len;
  if (m.kind == "dept" && table_len < t.max_len)
    bad_key("method.max_content_len", "offset table shorter than task.max_len");

  const auto& r = c.run;
  if (!(r.prompt_lr >= 0.0) || !std::isfinite(r.prompt_lr))
    bad_key("run.prompt_lr", "must be a finite non-negative number");
  if (!(r.network_lr >= 0.0) || !std::isfinite(r.network_lr))
    bad_key("run.network_lr", "must be a finite non-negative number");
  if (r.batch_size == 0) bad_key("run.batch_size", "must be at least 1");
  if (r.eval_interval == 0) bad_key("run.eval_interval", "must be at least 1");
  if (!(r.pretrain_lr > 0.0) || !std::isfinite(r.pretrain_lr))
    bad_key("run.pretrain_lr", "must be a finite positive number");
  if (r.pretrain_batch == 0) bad_key("run.pretrain_batch", "must be at least 1");

  const auto& a = c.analysis;
  if (a.layer >= b.layers) bad_key("analysis.layer", "no such layer");
  if (a.head >= b.heads) bad_key("analysis.head", "no such head");
  if (a.split != "train" && a.split != "valid" && a.split != "test")
    bad_key("analysis.split", "must be \"train\", \"valid\" or \"test\"");
}

BackboneConfig backbone_config(const CliConfig& c) {
  BackboneConfig cfg;
  cfg.vocab_size = c.backbone.vocab_size;
  cfg.embed_dim = c.backbone.embed_dim;
  cfg.heads = c.backbone.heads;
  cfg.head_dim = c.backbone.head_dim;
  cfg.layers = c.backbone.layers;
  cfg.classes = c.backbone.classes;
  cfg.max_content_len = c.backbone.max_content_len;
  cfg.max_prompt_len = c.backbone.max_prompt_len;
  cfg.ffn_hidden = c.backbone.ffn_hidden;
  cfg.positional_mode = c.backbone.positional_mode == "none"
                            ? PositionalMode::kNone
                            : PositionalMode::kLearnedAbsolute;
  return cfg;
}

TaskKind task_kind(const std::string& name) {
  return name == "keyed-count" ? TaskKind::kKeyedCount : TaskKind::kKeyedPresence;
}

TaskSpec target_spec(const CliConfig& c) {
  TaskSpec s;
  s.kind = task_kind(c.task.kind);
  s.key = c.task.key;
  s.threshold = c.task.threshold;
  s.min_len = c.task.min_len;
  s.max_len = c.task.max_len;
  s.vocab = c.task.vocab;
  s.seed = c.task.seed;
  s.excluded_tokens = {c.task.aux_key};
  return s;
}

// Pretraining suite: counting the target key (so the frozen features
// carry its occupancy) plus detecting the auxiliary key.
std::vector<TaskSpec> source_specs(const CliConfig& c) {
  TaskSpec count = target_spec(c);
  count.kind = TaskKind::kKeyedCount;
  count.threshold = c.task.source_threshold;
  count.seed = c.task.seed + 1;

  TaskSpec aux = target_spec(c);
  aux.kind = TaskKind::kKeyedPresence;
  aux.key = c.task.aux_key;
  aux.threshold = 1;
  aux.seed = c.task.seed + 2;
  aux.excluded_tokens = {c.task.key};
  return {count, aux};
}

MethodConfig method_config(const CliConfig& c) {
  MethodConfig mc;
  mc.kind = c.method.kind == "pt"     ? MethodKind::kPrompt
            : c.method.kind == "dept" ? MethodKind::kDecomposed
                                      : MethodKind::kAdaptive;
  mc.prompt_len = c.method.prompt_len;
  mc.max_content_len = c.method.max_content_len;
  mc.rank = c.method.rank;
  if (mc.rank == 0 && mc.kind != MethodKind::kPrompt) {
    BudgetSpec spec{c.method.budget, c.backbone.embed_dim, c.method.prompt_len};
    const std::size_t table_len = c.method.max_content_len
                                      ? c.method.max_content_len
                                      : c.backbone.max_content_len;
    try {
      mc.rank = mc.kind == MethodKind::kDecomposed
                    ? solve_dept_rank(spec, table_len)
                    : solve_bottleneck(spec);
    } catch (const BudgetError& e) {
      bad_key("method.budget", e.what());
    }
  }
  return mc;
}

AdaptOptions adapt_options(const CliConfig& c) {
  AdaptOptions o;
  o.prompt_lr = c.run.prompt_lr;
  o.network_lr = c.run.network_lr;
  o.steps = c.run.steps;
  o.batch_size = c.run.batch_size;
  o.eval_interval = c.run.eval_interval;
  o.seed = c.run.seed + 2;
  return o;
}

const std::vector<Example>& pick_split(const Dataset& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "valid") return d.valid;
  return d.test;
}

const char* kind_name(const PeftMethod& m) {
  switch (method_kind(m)) {
    case MethodKind::kPrompt: return "pt";
    case MethodKind::kDecomposed: return "dept";
    default: return "adept";
  }
}

double bare_accuracy(const BackboneModel& model, const std::vector<Example>& split) {
  std::size_t hits = 0;
  for (const Example& ex : split) {
    const std::vector<double> logits = model.forward_logits(ex.ids);
    std::size_t pred = 0;
    for (std::size_t k = 1; k < logits.size(); ++k)
      if (logits[k] > logits[pred]) pred = k;
    if (pred == ex.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(split.size());
}

// Value-level gather of embedding rows (no graph, no gradients).
TensorPtr embed_rows(const BackboneModel& model, const std::vector<std::size_t>& ids) {
  const std::vector<double>& table = model.embedding()->values();
  const std::size_t d = model.config().embed_dim;
  std::vector<double> vals;
  vals.reserve(ids.size() * d);
  for (std::size_t id : ids) {
    if (id >= model.config().vocab_size)
      throw IndexError("token id " + std::to_string(id) + " out of range");
    vals.insert(vals.end(), table.begin() + static_cast<std::ptrdiff_t>(id * d),
                table.begin() + static_cast<std::ptrdiff_t>((id + 1) * d));
  }
  return Tensor::make({ids.size(), d}, std::move(vals), false);
}

BackboneModel load_backbone_checked(const std::string& path, const char* flag) {
  try {
    BackboneModel model = load_backbone(path);
    model.freeze();
    return model;
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what(), flag);
  }
}

PeftMethod load_method_checked(const std::string& path, const char* flag) {
  try {
    return load_method(path);
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what(), flag);
  }
}

json stats_json(const AbsStats& s) {
  return json{{"mean_abs", s.mean}, {"variance_abs", s.variance}};
}

const Example& pick_example(const std::vector<Example>& split, std::size_t index) {
  if (index >= split.size())
    bad_key("analysis.example", "split has only " + std::to_string(split.size()) +
                                    " examples");
  return split[index];
}

json run_pretrain(const CliConfig& c, const std::string& backbone_out) {
  BackboneModel model(backbone_config(c), c.run.seed);
  std::vector<Dataset> suite;
  std::vector<TaskSpec> specs = source_specs(c);
  for (const TaskSpec& s : specs) suite.push_back(generate(s, c.task.source_n));

  PretrainOptions opts;
  opts.steps = c.run.pretrain_steps;
  opts.lr = c.run.pretrain_lr;
  opts.batch_size = c.run.pretrain_batch;
  opts.seed = c.run.seed + 3;
  const PretrainResult result = pretrain(model, suite, opts);
  save_backbone(model, backbone_out);

  json sources = json::array();
  for (std::size_t i = 0; i < suite.size(); ++i) {
    sources.push_back({{"kind", specs[i].kind == TaskKind::kKeyedCount
                                    ? "keyed-count"
                                    : "keyed-presence"},
                       {"key", specs[i].key},
                       {"train_accuracy", bare_accuracy(model, suite[i].train)},
                       {"test_accuracy", bare_accuracy(model, suite[i].test)}});
  }
  json report{{"schema", kSchema},
              {"command", "pretrain"},
              {"steps", result.loss_history.size()},
              {"source_tasks", sources},
              {"backbone_checkpoint", backbone_out},
              {"value_checksum", model.value_checksum()}};
  if (!result.loss_history.empty()) {
    report["loss_first"] = result.loss_history.front();
    report["loss_final"] = result.loss_history.back();
  }
  return report;
}

json run_adapt(const CliConfig& c, const std::string& backbone_path,
               const std::string& method_out) {
  BackboneModel model = load_backbone_checked(backbone_path, "--backbone");
  const Dataset data = generate(target_spec(c), c.task.n);
  PeftMethod method = init_method(method_config(c), model, c.run.seed + 1);
  const AdaptResult result = adapt(model, method, data, adapt_options(c));
  save_method(method, method_out);

  json history = json::array();
  for (const MetricPoint& p : result.history) {
    history.push_back({{"step", p.step},
                       {"train_loss", p.train_loss},
                       {"valid_accuracy", p.valid_accuracy}});
  }
  return json{{"schema", kSchema},
              {"command", "adapt"},
              {"method", kind_name(method)},
              {"param_count", param_count(method)},
              {"best_step", result.best_step},
              {"best_valid_accuracy", result.best_valid_accuracy},
              {"history", history},
              {"method_checkpoint", method_out}};
}

json run_eval(const CliConfig& c, const std::string& backbone_path,
              const std::string& method_path, std::size_t prepend,
              const std::string& split_name) {
  BackboneModel model = load_backbone_checked(backbone_path, "--backbone");
  PeftMethod method = load_method_checked(method_path, "--method");
  const Dataset data = generate(target_spec(c), c.task.n);
  const std::vector<Example>& split = pick_split(data, split_name);
  const EvalResult result = evaluate(model, method, split, prepend);

  json labels = json::array();
  for (const Example& ex : split) labels.push_back(ex.label);
  return json{{"schema", kSchema},
              {"command", "eval"},
              {"split", split_name},
              {"prepend", prepend},
              {"n", split.size()},
              {"accuracy", result.accuracy},
              {"predictions", result.predictions},
              {"labels", labels}};
}

json run_decompose(const CliConfig& c, const std::string& backbone_path,
                   const std::string& method_path) {
  BackboneModel model = load_backbone_checked(backbone_path, "--backbone");
  PeftMethod method = load_method_checked(method_path, "--method");
  const Dataset data = generate(target_spec(c), c.task.n);
  const Example& ex = pick_example(pick_split(data, c.analysis.split),
                                   c.analysis.example);
  if (c.analysis.position >= ex.ids.size())
    bad_key("analysis.position",
            "example has only " + std::to_string(ex.ids.size()) + " tokens");

  const TensorPtr E = embed_rows(model, ex.ids);
  const TensorPtr e_i = embed_rows(model, {ex.ids[c.analysis.position]});
  const HeadWeights& head = model.layer(c.analysis.layer).heads.at(c.analysis.head);
  const bool scaled = c.analysis.scaled;

  DecompositionReport rep;
  if (const auto* sp = std::get_if<SoftPrompt>(&method)) {
    rep = pt_decompose(e_i, E, sp->prompt, head, scaled);
  } else if (const auto* dp = std::get_if<DecomposedPrompt>(&method)) {
    rep = dept_decompose(e_i, c.analysis.position, E, *dp, head, scaled);
  } else {
    const auto& ap = std::get<AdaptivePrompt>(method);
    rep = adept_decompose(e_i, E, ap, ap.prompt, head, scaled);
  }

  return json{{"schema", kSchema},
              {"command", "analyze.decompose"},
              {"method", kind_name(method)},
              {"split", c.analysis.split},
              {"example", c.analysis.example},
              {"position", c.analysis.position},
              {"layer", c.analysis.layer},
              {"head", c.analysis.head},
              {"scaled", scaled},
              {"prefix_mass", rep.prefix_mass},
              {"scale", rep.scale},
              {"max_abs_gap", rep.max_abs_gap},
              {"bias_term", rep.bias_term},
              {"content_term", rep.content_term},
              {"content_offset_term", rep.content_offset_term},
              {"content_token_term", rep.content_token_term},
              {"reconstructed", rep.reconstructed},
              {"direct", rep.direct}};
}

json run_shift(const CliConfig& c, const std::string& backbone_path,
               const std::string& method_path) {
  BackboneModel model = load_backbone_checked(backbone_path, "--backbone");
  PeftMethod method = load_method_checked(method_path, "--method");
  if (const auto* dp = std::get_if<DecomposedPrompt>(&method)) {
    for (std::size_t j : c.analysis.shifts) {
      if (j > dp->A->rows())
        bad_key("analysis.shifts", "shift " + std::to_string(j) +
                                       " exceeds the offset table length " +
                                       std::to_string(dp->A->rows()));
    }
  }
  const Dataset data = generate(target_spec(c), c.task.n);
  const std::vector<Example>& split = pick_split(data, c.analysis.split);
  const ShiftProbeReport rep = shift_probe(model, method, split, c.analysis.shifts);

  json entries = json::array();
  for (const ShiftProbeEntry& e : rep.entries) {
    entries.push_back({{"shift", e.shift},
                       {"accuracy", e.accuracy},
                       {"changed_predictions", e.changed_predictions},
                       {"displacement_max", e.displacement_max},
                       {"displacement_mean", e.displacement_mean}});
  }
  return json{{"schema", kSchema},
              {"command", "analyze.shift"},
              {"method", kind_name(method)},
              {"split", c.analysis.split},
              {"baseline_accuracy", rep.baseline_accuracy},
              {"entries", entries}};
}

json run_stats(const CliConfig& c, const std::string& backbone_path,
               const std::string& method_path) {
  BackboneModel model = load_backbone_checked(backbone_path, "--backbone");
  PeftMethod method = load_method_checked(method_path, "--method");
  const Dataset data = generate(target_spec(c), c.task.n);
  const std::vector<Example>& split = pick_split(data, c.analysis.split);
  const OffsetStatsReport rep = offset_stats(model, method, split);

  return json{{"schema", kSchema},
              {"command", "analyze.stats"},
              {"method", kind_name(method)},
              {"split", c.analysis.split},
              {"token_count", rep.token_count},
              {"embeddings", stats_json(rep.embeddings)},
              {"offsets", stats_json(rep.offsets)},
              {"offset_to_embedding_ratio",
               rep.embeddings.mean > 0.0 ? rep.offsets.mean / rep.embeddings.mean
                                         : 0.0}};
}

json run_prepend(const CliConfig& c, const std::string& backbone_path,
                 const std::string& method_path) {
  if (c.analysis.prepend == 0)
    bad_key("analysis.prepend", "the probe needs at least one prefix row");
  BackboneModel model = load_backbone_checked(backbone_path, "--backbone");
  PeftMethod method = load_method_checked(method_path, "--method");
  const Dataset data = generate(target_spec(c), c.task.n);
  const Example& ex = pick_example(pick_split(data, c.analysis.split),
                                   c.analysis.example);

  const TensorPtr E = embed_rows(model, ex.ids);
  const std::vector<std::size_t> neutral(c.analysis.prepend, kNeutralToken);
  const TensorPtr prefix = embed_rows(model, neutral);
  const double gap = prepend_probe(method, E, prefix);

  return json{{"schema", kSchema},
              {"command", "analyze.prepend"},
              {"method", kind_name(method)},
              {"split", c.analysis.split},
              {"example", c.analysis.example},
              {"prepend", c.analysis.prepend},
              {"max_row_gap", gap},
              {"exactly_zero", gap == 0.0}};
}

json run_budget(std::size_t budget, std::size_t dim, std::size_t prompt_len,
                std::size_t content_len) {
  std::size_t r = 0;
  try {
    r = solve_bottleneck(BudgetSpec{budget, dim, prompt_len});
  } catch (const BudgetError& e) {
    throw ConfigError(e.what(), "--budget");
  }
  json report{{"schema", kSchema},
              {"command", "budget"},
              {"budget", budget},
              {"dim", dim},
              {"prompt_len", prompt_len},
              {"content_len", content_len},
              {"r", r},
              {"adept_params", adept_param_count(prompt_len, r, dim)},
              {"pt_params", pt_param_count(prompt_len, dim)},
              {"pt_params_at_100", pt_param_count(100, dim)}};
  try {
    const std::size_t dept_rank =
        solve_dept_rank(BudgetSpec{budget, dim, prompt_len}, content_len);
    report["dept_rank"] = dept_rank;
    report["dept_params"] =
        dept_param_count(prompt_len, content_len, dept_rank, dim);
  } catch (const BudgetError&) {
    report["dept_rank"] = nullptr;
    report["dept_params"] = nullptr;
  }
  return report;
}

void emit(const json& report, const std::string& out_path) {
  std::string body = report.dump(2);
  body += '\n';
  if (out_path.empty()) {
    std::cout << body;
    return;
  }
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + out_path + " for writing", "--out");
  f << body;
  if (!f) throw ConfigError("failed writing " + out_path, "--out");
}

int run_cli(int argc, char** argv) {
  CliConfig cfg;

  // The config file must be folded in before flag parsing so that the
  // documented precedence (flag > file > built-in default) holds.
  std::string config_path;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) config_path = argv[i + 1];
    else if (arg.rfind("--config=", 0) == 0) config_path = arg.substr(9);
  }
  if (!config_path.empty()) apply_config_file(config_path, cfg);

  CLI::App app{
      "adept-lab: a desk-scale laboratory for input-side adaptation of a "
      "frozen transformer.\n"
      "Settings resolve as: command-line flag > config file (--config) > "
      "built-in default.\n"
      "Reports are JSON on stdout (or --out FILE). Seeds derive from "
      "run.seed: backbone init uses run.seed,\n"
      "method init run.seed+1, adaptation run.seed+2, pretraining "
      "run.seed+3. ADEPT_LAB_THREADS caps evaluation\n"
      "parallelism (default 1); results are identical at any setting."};
  app.require_subcommand(1);

  std::string config_flag;
  std::string out_path;
  std::uint64_t seed_flag = 0;
  app.add_option("--config", config_flag, "JSON config file with sections backbone/task/method/run/analysis");
  CLI::Option* seed_opt =
      app.add_option("--seed", seed_flag, "master seed; wins over run.seed from any source");
  app.add_option("--out", out_path, "write the report JSON to this file instead of stdout");

  auto uint_opt = [&](const std::string& name, std::size_t& field,
                      const std::string& help, const std::string& group) {
    app.add_option(name, field, help)->capture_default_str()->group(group);
  };
  auto num_opt = [&](const std::string& name, double& field,
                     const std::string& help, const std::string& group) {
    app.add_option(name, field, help)->capture_default_str()->group(group);
  };

  const std::string gb = "backbone settings";
  uint_opt("--backbone.vocab_size", cfg.backbone.vocab_size, "vocabulary size", gb);
  uint_opt("--backbone.embed_dim", cfg.backbone.embed_dim, "embedding width (heads * head_dim)", gb);
  uint_opt("--backbone.heads", cfg.backbone.heads, "attention heads per layer", gb);
  uint_opt("--backbone.head_dim", cfg.backbone.head_dim, "per-head width", gb);
  uint_opt("--backbone.layers", cfg.backbone.layers, "transformer layers", gb);
  uint_opt("--backbone.classes", cfg.backbone.classes, "output classes", gb);
  uint_opt("--backbone.max_content_len", cfg.backbone.max_content_len, "longest content sequence", gb);
  uint_opt("--backbone.max_prompt_len", cfg.backbone.max_prompt_len, "longest prompt", gb);
  uint_opt("--backbone.ffn_hidden", cfg.backbone.ffn_hidden, "feed-forward hidden width", gb);
  app.add_option("--backbone.positional_mode", cfg.backbone.positional_mode,
                 "\"none\" or \"learned-absolute\"")
      ->capture_default_str()
      ->group(gb);

  const std::string gt = "task settings";
  app.add_option("--task.kind", cfg.task.kind, "\"keyed-presence\" or \"keyed-count\"")
      ->capture_default_str()
      ->group(gt);
  uint_opt("--task.key", cfg.task.key, "key token of the target task", gt);
  uint_opt("--task.threshold", cfg.task.threshold, "count threshold (keyed-count)", gt);
  uint_opt("--task.min_len", cfg.task.min_len, "shortest sequence", gt);
  uint_opt("--task.max_len", cfg.task.max_len, "longest sequence", gt);
  uint_opt("--task.vocab", cfg.task.vocab, "token ids are drawn below this", gt);
  app.add_option("--task.seed", cfg.task.seed,
                 "dataset seed; sources use task.seed+1 and task.seed+2")
      ->capture_default_str()
      ->group(gt);
  uint_opt("--task.n", cfg.task.n, "target dataset size", gt);
  uint_opt("--task.aux_key", cfg.task.aux_key, "key of the auxiliary source task", gt);
  uint_opt("--task.source_threshold", cfg.task.source_threshold,
           "count threshold of the counting source task", gt);
  uint_opt("--task.source_n", cfg.task.source_n, "size of each source dataset", gt);

  const std::string gm = "method settings";
  app.add_option("--method.kind", cfg.method.kind, "\"pt\", \"dept\" or \"adept\"")
      ->capture_default_str()
      ->group(gm);
  uint_opt("--method.prompt_len", cfg.method.prompt_len, "prompt rows (0 allowed for dept/adept)", gm);
  uint_opt("--method.rank", cfg.method.rank,
           "offset rank / bottleneck width; 0 = solve from method.budget", gm);
  uint_opt("--method.max_content_len", cfg.method.max_content_len,
           "dept offset table length; 0 = backbone.max_content_len", gm);
  uint_opt("--method.budget", cfg.method.budget,
           "trainable-parameter budget used when method.rank is 0", gm);

  const std::string gr = "run settings";
  num_opt("--run.prompt_lr", cfg.run.prompt_lr, "learning rate of prompt rows", gr);
  num_opt("--run.network_lr", cfg.run.network_lr, "learning rate of offset parameters", gr);
  uint_opt("--run.steps", cfg.run.steps, "adaptation steps", gr);
  uint_opt("--run.batch_size", cfg.run.batch_size, "adaptation batch size", gr);
  uint_opt("--run.eval_interval", cfg.run.eval_interval, "steps between validation passes", gr);
  app.add_option("--run.seed", cfg.run.seed, "master seed (see --seed)")
      ->capture_default_str()
      ->group(gr);
  uint_opt("--run.pretrain_steps", cfg.run.pretrain_steps, "pretraining steps", gr);
  num_opt("--run.pretrain_lr", cfg.run.pretrain_lr, "pretraining learning rate", gr);
  uint_opt("--run.pretrain_batch", cfg.run.pretrain_batch, "pretraining batch size", gr);

  const std::string ga = "analysis settings";
  uint_opt("--analysis.layer", cfg.analysis.layer, "layer whose head is decomposed", ga);
  uint_opt("--analysis.head", cfg.analysis.head, "head within that layer", ga);
  uint_opt("--analysis.position", cfg.analysis.position, "content position of the query", ga);
  uint_opt("--analysis.example", cfg.analysis.example, "example index within the split", ga);
  app.add_option("--analysis.split", cfg.analysis.split, "\"train\", \"valid\" or \"test\"")
      ->capture_default_str()
      ->group(ga);
  app.add_flag("--analysis.scaled,!--analysis.unscaled", cfg.analysis.scaled,
               "divide attention logits by sqrt(head_dim)")
      ->capture_default_str()
      ->group(ga);
  uint_opt("--analysis.prepend", cfg.analysis.prepend, "neutral rows for the prepend probe", ga);
  app.add_option("--analysis.shifts", cfg.analysis.shifts,
                 "cyclic shifts to probe, comma-separated, e.g. 0,1,8,16")
      ->delimiter(',')
      ->capture_default_str()
      ->group(ga);

  std::string backbone_out = "backbone.json";
  std::string method_out = "method.json";
  std::string backbone_path;
  std::string method_path;
  std::string eval_split = "test";
  std::size_t eval_prepend = 0;

  CLI::App* cmd_pretrain = app.add_subcommand(
      "pretrain", "train a fresh backbone on the two source tasks");
  cmd_pretrain->fallthrough();
  cmd_pretrain->add_option("--backbone-out", backbone_out, "backbone checkpoint path")
      ->capture_default_str();

  CLI::App* cmd_adapt = app.add_subcommand(
      "adapt", "train a method on the target task against a frozen backbone");
  cmd_adapt->fallthrough();
  cmd_adapt->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
  cmd_adapt->add_option("--method-out", method_out, "method checkpoint path")
      ->capture_default_str();

  CLI::App* cmd_eval = app.add_subcommand(
      "eval", "accuracy of a trained method on a target split");
  cmd_eval->fallthrough();
  cmd_eval->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
  cmd_eval->add_option("--method", method_path, "method checkpoint")->required();
  cmd_eval->add_option("--prepend", eval_prepend, "neutral tokens prepended to every sequence")
      ->capture_default_str();
  cmd_eval->add_option("--split", eval_split, "\"train\", \"valid\" or \"test\"")
      ->check(CLI::IsMember({"train", "valid", "test"}))
      ->capture_default_str();

  CLI::App* cmd_analyze =
      app.add_subcommand("analyze", "attention and offset probes");
  cmd_analyze->fallthrough();
  cmd_analyze->require_subcommand(1);
  cmd_analyze->add_option("--backbone", backbone_path, "backbone checkpoint")->required();
  cmd_analyze->add_option("--method", method_path, "method checkpoint")->required();
  CLI::App* an_decompose = cmd_analyze->add_subcommand(
      "decompose", "split one query's attention into prompt bias + rescaled content term");
  CLI::App* an_shift = cmd_analyze->add_subcommand(
      "shift", "re-evaluate with a cyclically shifted offset table");
  CLI::App* an_stats = cmd_analyze->add_subcommand(
      "stats", "|offset| vs |embedding| statistics over a split");
  CLI::App* an_prepend = cmd_analyze->add_subcommand(
      "prepend", "offset drift of original rows under a neutral prefix");
  for (CLI::App* sub : {an_decompose, an_shift, an_stats, an_prepend})
    sub->fallthrough();

  std::size_t b_budget = 76800, b_dim = 768, b_prompt_len = 60, b_content_len = 256;
  CLI::App* cmd_budget = app.add_subcommand(
      "budget", "solve the bottleneck size for a trainable-parameter budget");
  cmd_budget->fallthrough();
  cmd_budget->add_option("--budget", b_budget, "trainable-parameter budget")
      ->capture_default_str();
  cmd_budget->add_option("--dim", b_dim, "embedding width")->capture_default_str();
  cmd_budget->add_option("--prompt-len", b_prompt_len, "prompt rows")->capture_default_str();
  cmd_budget->add_option("--content-len", b_content_len, "offset table length for the dept rank")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  if (seed_opt->count() > 0) cfg.run.seed = seed_flag;
  validate(cfg);

  json report;
  if (cmd_pretrain->parsed()) {
    report = run_pretrain(cfg, backbone_out);
  } else if (cmd_adapt->parsed()) {
    report = run_adapt(cfg, backbone_path, method_out);
  } else if (cmd_eval->parsed()) {
    report = run_eval(cfg, backbone_path, method_path, eval_prepend, eval_split);
  } else if (cmd_analyze->parsed()) {
    if (an_decompose->parsed()) report = run_decompose(cfg, backbone_path, method_path);
    else if (an_shift->parsed()) report = run_shift(cfg, backbone_path, method_path);
    else if (an_stats->parsed()) report = run_stats(cfg, backbone_path, method_path);
    else report = run_prepend(cfg, backbone_path, method_path);
  } else {
    report = run_budget(b_budget, b_dim, b_prompt_len, b_content_len);
  }
  emit(report, out_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error (" << e.key << "): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
