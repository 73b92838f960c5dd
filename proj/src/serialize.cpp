#include "adeptlab/serialize.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace adeptlab {

namespace {

using nlohmann::json;

void append_double(std::string& out, double v) {
  if (v == 0.0 && std::signbit(v)) {
    // "-0" alone would be read back as the integer zero
    out += "-0.0";
    return;
  }
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

void append_tensor(std::string& out, const std::string& name,
                   const Tensor& t) {
  out += '"';
  out += name;
  out += "\":{\"shape\":[";
  for (std::size_t i = 0; i < t.shape().size(); ++i) {
    if (i) out += ',';
    out += std::to_string(t.shape()[i]);
  }
  out += "],\"values\":[";
  for (std::size_t i = 0; i < t.values().size(); ++i) {
    if (i) out += ',';
    append_double(out, t.values()[i]);
  }
  out += "]}";
}

void write_file(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot open " + path + " for writing");
  f << body;
  if (!f) throw ArgumentError("failed writing " + path);
}

json read_json(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot open " + path);
  json doc = json::parse(f, nullptr, /*allow_exceptions=*/false);
  if (doc.is_discarded()) throw ArgumentError("invalid JSON in " + path);
  return doc;
}

// Copies the file's values into an existing tensor, insisting on an
// identical shape.
void load_into(const json& tensors, const std::string& name, Tensor& t) {
  if (!tensors.contains(name)) {
    throw ArgumentError("checkpoint is missing tensor " + name);
  }
  const json& entry = tensors.at(name);
  std::vector<std::size_t> shape =
      entry.at("shape").get<std::vector<std::size_t>>();
  if (shape != t.shape()) {
    throw ArgumentError("checkpoint tensor " + name + " has wrong shape");
  }
  std::vector<double> values = entry.at("values").get<std::vector<double>>();
  if (values.size() != t.numel()) {
    throw ArgumentError("checkpoint tensor " + name + " has wrong size");
  }
  t.values() = std::move(values);
}

const char* mode_name(PositionalMode m) {
  return m == PositionalMode::kNone ? "none" : "learned-absolute";
}

PositionalMode mode_from(const std::string& s) {
  if (s == "none") return PositionalMode::kNone;
  if (s == "learned-absolute") return PositionalMode::kLearnedAbsolute;
  throw ArgumentError("unknown positional mode " + s);
}

const char* kind_name(MethodKind k) {
  switch (k) {
    case MethodKind::kPrompt: return "pt";
    case MethodKind::kDecomposed: return "dept";
    case MethodKind::kAdaptive: return "adept";
  }
  return "pt";
}

}  // namespace

std::string backbone_to_json(const BackboneModel& model) {
  const BackboneConfig& c = model.config();
  std::string out = "{\"config\":{";
  out += "\"vocab_size\":" + std::to_string(c.vocab_size);
  out += ",\"embed_dim\":" + std::to_string(c.embed_dim);
  out += ",\"heads\":" + std::to_string(c.heads);
  out += ",\"head_dim\":" + std::to_string(c.head_dim);
  out += ",\"layers\":" + std::to_string(c.layers);
  out += ",\"classes\":" + std::to_string(c.classes);
  out += ",\"max_content_len\":" + std::to_string(c.max_content_len);
  out += ",\"max_prompt_len\":" + std::to_string(c.max_prompt_len);
  out += ",\"ffn_hidden\":" + std::to_string(c.ffn_hidden);
  out += std::string(",\"positional_mode\":\"") + mode_name(c.positional_mode) +
         "\"";
  out += "},\"tensors\":{";
  bool first = true;
  for (const auto& [name, t] : model.named_tensors()) {
    if (!first) out += ',';
    first = false;
    append_tensor(out, name, *t);
  }
  out += "}}";
  return out;
}

void save_backbone(const BackboneModel& model, const std::string& path) {
  write_file(path, backbone_to_json(model));
}

BackboneModel load_backbone(const std::string& path) {
  const json doc = read_json(path);
  if (!doc.contains("config") || !doc.contains("tensors")) {
    throw ArgumentError("backbone checkpoint needs config and tensors");
  }
  try {
    const json& c = doc.at("config");
    BackboneConfig config;
    config.vocab_size = c.at("vocab_size").get<std::size_t>();
    config.embed_dim = c.at("embed_dim").get<std::size_t>();
    config.heads = c.at("heads").get<std::size_t>();
    config.head_dim = c.at("head_dim").get<std::size_t>();
    config.layers = c.at("layers").get<std::size_t>();
    config.classes = c.at("classes").get<std::size_t>();
    config.max_content_len = c.at("max_content_len").get<std::size_t>();
    config.max_prompt_len = c.at("max_prompt_len").get<std::size_t>();
    config.ffn_hidden = c.at("ffn_hidden").get<std::size_t>();
    config.positional_mode =
        mode_from(c.at("positional_mode").get<std::string>());

    BackboneModel model(config, /*seed=*/0);
    const json& tensors = doc.at("tensors");
    for (auto& [name, t] : model.named_tensors()) load_into(tensors, name, *t);
    return model;
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("malformed backbone checkpoint: ") +
                        e.what());
  }
}

std::string method_to_json(const PeftMethod& method) {
  std::string out = "{\"method_kind\":\"";
  out += kind_name(method_kind(method));
  out += "\",\"config\":{";

  std::vector<std::pair<std::string, TensorPtr>> tensors;
  std::size_t prompt_len = 0, rank = 0, max_content_len = 0, d = 0;
  if (const auto* pt = std::get_if<SoftPrompt>(&method)) {
    prompt_len = pt->prompt->rows();
    d = pt->prompt->cols();
    tensors.emplace_back("P", pt->prompt);
  } else if (const auto* dp = std::get_if<DecomposedPrompt>(&method)) {
    if (dp->prompt) {
      prompt_len = dp->prompt->rows();
      tensors.emplace_back("P", dp->prompt);
    }
    rank = dp->A->cols();
    max_content_len = dp->A->rows();
    d = dp->B->cols();
    tensors.emplace_back("A", dp->A);
    tensors.emplace_back("B", dp->B);
  } else {
    const auto& ap = std::get<AdaptivePrompt>(method);
    if (ap.prompt) {
      prompt_len = ap.prompt->rows();
      tensors.emplace_back("P", ap.prompt);
    }
    rank = ap.W_down->cols();
    d = ap.W_down->rows();
    tensors.emplace_back("W_down", ap.W_down);
    tensors.emplace_back("b_1", ap.b1);
    tensors.emplace_back("W_up", ap.W_up);
    tensors.emplace_back("b_2", ap.b2);
  }
  out += "\"prompt_len\":" + std::to_string(prompt_len);
  out += ",\"rank\":" + std::to_string(rank);
  out += ",\"max_content_len\":" + std::to_string(max_content_len);
  out += ",\"embed_dim\":" + std::to_string(d);
  out += "},\"tensors\":{";
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (i) out += ',';
    append_tensor(out, tensors[i].first, *tensors[i].second);
  }
  out += "}}";
  return out;
}

void save_method(const PeftMethod& method, const std::string& path) {
  write_file(path, method_to_json(method));
}

PeftMethod load_method(const std::string& path) {
  const json doc = read_json(path);
  for (const char* key : {"method_kind", "config", "tensors"}) {
    if (!doc.contains(key)) {
      throw ArgumentError(std::string("method checkpoint is missing ") + key);
    }
  }
  try {
    const std::string kind = doc.at("method_kind").get<std::string>();
    if (kind != "pt" && kind != "dept" && kind != "adept") {
      throw ArgumentError("unknown method_kind " + kind);
    }
    const json& c = doc.at("config");
    const json& tensors = doc.at("tensors");
    const std::size_t prompt_len = c.at("prompt_len").get<std::size_t>();
    const std::size_t rank = c.at("rank").get<std::size_t>();
    const std::size_t s = c.at("max_content_len").get<std::size_t>();
    const std::size_t d = c.at("embed_dim").get<std::size_t>();

    auto fresh = [&](std::vector<std::size_t> shape, const std::string& name) {
      TensorPtr t = Tensor::zeros(std::move(shape), true);
      load_into(tensors, name, *t);
      return t;
    };
    auto prompt = [&]() -> TensorPtr {
      return prompt_len ? fresh({prompt_len, d}, "P") : nullptr;
    };

    if (kind == "pt") {
      if (prompt_len == 0) throw ArgumentError("pt checkpoint without prompt");
      return SoftPrompt{fresh({prompt_len, d}, "P")};
    }
    if (kind == "dept") {
      DecomposedPrompt m;
      m.prompt = prompt();
      m.A = fresh({s, rank}, "A");
      m.B = fresh({rank, d}, "B");
      return m;
    }
    AdaptivePrompt m;
    m.prompt = prompt();
    m.W_down = fresh({d, rank}, "W_down");
    m.b1 = fresh({rank}, "b_1");
    m.W_up = fresh({rank, d}, "W_up");
    m.b2 = fresh({d}, "b_2");
    return m;
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("malformed method checkpoint: ") +
                        e.what());
  }
}

void save_examples(const std::vector<Example>& examples,
                   const std::string& path) {
  std::string body;
  for (const Example& ex : examples) {
    body += "{\"ids\":[";
    for (std::size_t i = 0; i < ex.ids.size(); ++i) {
      if (i) body += ',';
      body += std::to_string(ex.ids[i]);
    }
    body += "],\"label\":";
    body += std::to_string(ex.label);
    body += "}\n";
  }
  write_file(path, body);
}

std::vector<Example> load_examples(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot open " + path);
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json doc = json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (doc.is_discarded()) {
      throw ArgumentError("invalid JSON on line " + std::to_string(line_no) +
                          " of " + path);
    }
    try {
      Example ex;
      ex.ids = doc.at("ids").get<std::vector<std::size_t>>();
      std::size_t label = doc.at("label").get<std::size_t>();
      if (label > 1) throw ArgumentError("label must be 0 or 1");
      ex.label = label;
      out.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw ArgumentError("malformed example on line " +
                          std::to_string(line_no) + " of " + path + ": " +
                          e.what());
    }
  }
  return out;
}

}  // namespace adeptlab
