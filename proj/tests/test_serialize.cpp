#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "adeptlab/error.hpp"
#include "adeptlab/serialize.hpp"
#include "test_helpers.hpp"

using namespace adeptlab;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig c;
  c.vocab_size = 8;
  c.embed_dim = 4;
  c.heads = 1;
  c.head_dim = 4;
  c.layers = 1;
  c.classes = 2;
  c.max_content_len = 8;
  c.max_prompt_len = 4;
  c.ffn_hidden = 6;
  return c;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("backbone checkpoints round-trip value-exactly") {
  BackboneConfig c = tiny_config();
  c.positional_mode = PositionalMode::kLearnedAbsolute;
  BackboneModel model(c, 17);
  // plant awkward values: subnormal, huge, tiny, negative zero
  model.classifier()->values()[0] = 5e-324;
  model.classifier()->values()[1] = 1.7976931348623157e308;
  model.classifier()->values()[2] = -0.0;
  model.classifier()->values()[3] = 0.1 + 0.2;

  TempFile f("adeptlab_backbone_roundtrip.json");
  save_backbone(model, f.path);
  BackboneModel loaded = load_backbone(f.path);

  CHECK(loaded.config().vocab_size == c.vocab_size);
  CHECK(loaded.config().positional_mode == PositionalMode::kLearnedAbsolute);
  CHECK(loaded.value_checksum() == model.value_checksum());

  auto a = model.named_tensors();
  auto b = loaded.named_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(testutil::bit_equal(a[i].second->values(), b[i].second->values()));
  }

  // equal state writes equal bytes
  CHECK(backbone_to_json(model) == backbone_to_json(loaded));
}

TEST_CASE("loaded backbones behave identically") {
  BackboneModel model(tiny_config(), 29);
  TempFile f("adeptlab_backbone_behave.json");
  save_backbone(model, f.path);
  BackboneModel loaded = load_backbone(f.path);
  const auto x = model.forward_logits({1, 4, 6, 2});
  const auto y = loaded.forward_logits({1, 4, 6, 2});
  CHECK(testutil::bit_equal(x, y));
}

TEST_CASE("method checkpoints round-trip for every kind") {
  BackboneModel backbone(tiny_config(), 3);
  MethodConfig cfg;

  SUBCASE("plain prompt") {
    cfg.kind = MethodKind::kPrompt;
    cfg.prompt_len = 3;
    PeftMethod m = init_method(cfg, backbone, 5);
    TempFile f("adeptlab_method_pt.json");
    save_method(m, f.path);
    PeftMethod r = load_method(f.path);
    const auto& a = std::get<SoftPrompt>(m);
    const auto& b = std::get<SoftPrompt>(r);
    CHECK(testutil::bit_equal(a.prompt->values(), b.prompt->values()));
    CHECK(b.prompt->requires_grad());
  }

  SUBCASE("decomposed") {
    cfg.kind = MethodKind::kDecomposed;
    cfg.prompt_len = 2;
    cfg.rank = 2;
    PeftMethod m = init_method(cfg, backbone, 5);
    TempFile f("adeptlab_method_dept.json");
    save_method(m, f.path);
    PeftMethod r = load_method(f.path);
    const auto& a = std::get<DecomposedPrompt>(m);
    const auto& b = std::get<DecomposedPrompt>(r);
    CHECK(testutil::bit_equal(a.prompt->values(), b.prompt->values()));
    CHECK(testutil::bit_equal(a.A->values(), b.A->values()));
    CHECK(testutil::bit_equal(a.B->values(), b.B->values()));
    CHECK(b.A->rows() == 8);
    CHECK(b.A->cols() == 2);
  }

  SUBCASE("decomposed without a prompt") {
    cfg.kind = MethodKind::kDecomposed;
    cfg.prompt_len = 0;
    cfg.rank = 2;
    PeftMethod m = init_method(cfg, backbone, 5);
    TempFile f("adeptlab_method_dept0.json");
    save_method(m, f.path);
    PeftMethod r = load_method(f.path);
    CHECK(std::get<DecomposedPrompt>(r).prompt == nullptr);
  }

  SUBCASE("adaptive") {
    cfg.kind = MethodKind::kAdaptive;
    cfg.prompt_len = 2;
    cfg.rank = 3;
    PeftMethod m = init_method(cfg, backbone, 5);
    // sprinkle awkward values into the biases
    std::get<AdaptivePrompt>(m).b1->values() = {1e-300, -2.5e17, 0.3};
    TempFile f("adeptlab_method_adept.json");
    save_method(m, f.path);
    PeftMethod r = load_method(f.path);
    const auto& a = std::get<AdaptivePrompt>(m);
    const auto& b = std::get<AdaptivePrompt>(r);
    CHECK(testutil::bit_equal(a.W_down->values(), b.W_down->values()));
    CHECK(testutil::bit_equal(a.b1->values(), b.b1->values()));
    CHECK(testutil::bit_equal(a.W_up->values(), b.W_up->values()));
    CHECK(testutil::bit_equal(a.b2->values(), b.b2->values()));
    CHECK(method_to_json(m) == method_to_json(r));
  }
}

TEST_CASE("loading rejects broken documents") {
  CHECK_THROWS_AS(load_backbone("/tmp/adeptlab_missing_file.json"),
                  ArgumentError);

  TempFile f("adeptlab_broken.json");
  {
    std::ofstream out(f.path);
    out << "{\"config\": nope";
  }
  CHECK_THROWS_AS(load_backbone(f.path), ArgumentError);
  CHECK_THROWS_AS(load_method(f.path), ArgumentError);

  {
    std::ofstream out(f.path);
    out << R"({"method_kind":"warp","config":{},"tensors":{}})";
  }
  CHECK_THROWS_AS(load_method(f.path), ArgumentError);
}

TEST_CASE("loading rejects tensors of the wrong size") {
  BackboneModel backbone(tiny_config(), 3);
  MethodConfig cfg;
  cfg.kind = MethodKind::kPrompt;
  cfg.prompt_len = 2;
  PeftMethod m = init_method(cfg, backbone, 5);
  std::string doc = method_to_json(m);
  const auto pos = doc.find("\"shape\":[2,4]");
  REQUIRE(pos != std::string::npos);
  doc.replace(pos, 13, "\"shape\":[2,5]");
  TempFile f("adeptlab_badshape.json");
  {
    std::ofstream out(f.path);
    out << doc;
  }
  CHECK_THROWS_AS(load_method(f.path), ArgumentError);
}

TEST_CASE("example lists round-trip as JSON lines") {
  std::vector<Example> examples = {
      {{3, 1, 4, 1, 5}, 1},
      {{2, 7}, 0},
      {{6}, 1},
  };
  TempFile f("adeptlab_examples.jsonl");
  save_examples(examples, f.path);

  // One object per line, in order.
  std::ifstream in(f.path);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "{\"ids\":[3,1,4,1,5],\"label\":1}");
  REQUIRE(std::getline(in, line));
  CHECK(line == "{\"ids\":[2,7],\"label\":0}");

  std::vector<Example> back = load_examples(f.path);
  REQUIRE(back.size() == examples.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].ids == examples[i].ids);
    CHECK(back[i].label == examples[i].label);
  }
}

TEST_CASE("loading examples rejects malformed lines") {
  TempFile f("adeptlab_badlines.jsonl");
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_examples("/tmp/adeptlab_no_such.jsonl"), ArgumentError);
  }
  SUBCASE("broken JSON") {
    std::ofstream(f.path) << "{\"ids\":[1,2],\"label\":1}\n{\"ids\":[1\n";
    CHECK_THROWS_AS(load_examples(f.path), ArgumentError);
  }
  SUBCASE("missing field") {
    std::ofstream(f.path) << "{\"ids\":[1,2]}\n";
    CHECK_THROWS_AS(load_examples(f.path), ArgumentError);
  }
  SUBCASE("label out of range") {
    std::ofstream(f.path) << "{\"ids\":[1,2],\"label\":3}\n";
    CHECK_THROWS_AS(load_examples(f.path), ArgumentError);
  }
}
