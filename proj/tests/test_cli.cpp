// Drives the adept-lab binary end to end. The test runner passes the
// binary's location in ADEPT_LAB_BIN; every case works in its own
// scratch directory under /tmp.

#include <sys/wait.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "adeptlab/backbone.hpp"
#include "adeptlab/peft.hpp"
#include "adeptlab/serialize.hpp"
#include "adeptlab/tasks.hpp"
#include "test_helpers.hpp"

using namespace adeptlab;
using nlohmann::json;

namespace {

std::string binary_path() {
  const char* bin = std::getenv("ADEPT_LAB_BIN");
  REQUIRE_MESSAGE(bin != nullptr,
                  "set ADEPT_LAB_BIN to the adept-lab binary (ctest does)");
  return bin;
}

struct ScratchDir {
  std::string path;
  ScratchDir() {
    char tmpl[] = "/tmp/adeptlab_cli_XXXXXX";
    char* made = mkdtemp(tmpl);
    REQUIRE(made != nullptr);
    path = made;
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

std::string slurp(const std::string& file) {
  std::ifstream f(file, std::ios::binary);
  std::ostringstream out;
  out << f.rdbuf();
  return out.str();
}

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

CliResult run_cli(const ScratchDir& dir, const std::string& args) {
  const std::string out_f = dir.path + "/.stdout";
  const std::string err_f = dir.path + "/.stderr";
  const std::string cmd = "cd " + dir.path + " && " + binary_path() + " " +
                          args + " >" + out_f + " 2>" + err_f;
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_f);
  r.err = slurp(err_f);
  return r;
}

json parse_report(const CliResult& r) {
  REQUIRE_MESSAGE(r.code == 0, r.err);
  json doc = json::parse(r.out, nullptr, /*allow_exceptions=*/false);
  REQUIRE(!doc.is_discarded());
  CHECK(doc.at("schema") == "adept-lab/v1");
  return doc;
}

// Mirrors the binary's seed plumbing: backbone at seed, method init at
// seed+1, adaptation at seed+2, pretraining at seed+3; source datasets
// at task seed+1 / +2.
struct Pipeline {
  std::size_t pretrain_steps, source_n, target_n, adapt_steps, eval_interval;

  TaskSpec target() const {
    TaskSpec s;
    s.kind = TaskKind::kKeyedPresence;
    s.key = 7;
    s.seed = 11;
    s.excluded_tokens = {19};
    return s;
  }

  BackboneModel pretrained(std::uint64_t seed) const {
    BackboneModel model(BackboneConfig{}, seed);
    TaskSpec count = target();
    count.kind = TaskKind::kKeyedCount;
    count.threshold = 2;
    count.seed = 12;
    TaskSpec aux = target();
    aux.key = 19;
    aux.seed = 13;
    aux.excluded_tokens = {7};
    PretrainOptions opts;
    opts.steps = pretrain_steps;
    opts.lr = 0.1;
    opts.batch_size = 16;
    opts.seed = seed + 3;
    pretrain(model, {generate(count, source_n), generate(aux, source_n)}, opts);
    model.freeze();
    return model;
  }

  MethodConfig adept_config() const {
    MethodConfig mc;
    mc.kind = MethodKind::kAdaptive;
    mc.prompt_len = 8;
    mc.rank = solve_bottleneck(BudgetSpec{256, 16, 8});
    return mc;
  }

  AdaptOptions adapt_opts(std::uint64_t seed) const {
    AdaptOptions o;
    o.steps = adapt_steps;
    o.eval_interval = eval_interval;
    o.seed = seed + 2;
    return o;
  }
};

}  // namespace

TEST_CASE("budget subcommand prints the reference arithmetic") {
  ScratchDir dir;
  const CliResult r = run_cli(dir, "budget --budget 76800 --dim 768 --prompt-len 60");
  const json doc = parse_report(r);
  CHECK(doc.at("r") == 19);
  CHECK(doc.at("adept_params") == 76051);
  CHECK(doc.at("pt_params_at_100") == 76800);
  CHECK(doc.at("dept_rank") == 30);
  CHECK(doc.at("dept_params") == 76800);

  const CliResult again =
      run_cli(dir, "budget --budget 76800 --dim 768 --prompt-len 60");
  CHECK(again.out == r.out);
}

TEST_CASE("configuration mistakes exit with code 2 and name the key") {
  ScratchDir dir;
  SUBCASE("unknown flag") {
    const CliResult r = run_cli(dir, "pretrain --task.bogus 3");
    CHECK(r.code == 2);
  }
  SUBCASE("bad field value") {
    const CliResult r = run_cli(dir, "pretrain --task.key 0");
    CHECK(r.code == 2);
    CHECK(r.err.find("task.key") != std::string::npos);
  }
  SUBCASE("unknown key in the config file") {
    std::ofstream(dir.path + "/cfg.json") << "{\"task\":{\"bogus\":1}}";
    const CliResult r = run_cli(dir, "pretrain --config cfg.json");
    CHECK(r.code == 2);
    CHECK(r.err.find("task.bogus") != std::string::npos);
  }
  SUBCASE("wrongly typed key in the config file") {
    std::ofstream(dir.path + "/cfg.json") << "{\"run\":{\"steps\":\"many\"}}";
    const CliResult r = run_cli(dir, "adapt --config cfg.json --backbone x.json");
    CHECK(r.code == 2);
    CHECK(r.err.find("run.steps") != std::string::npos);
  }
  SUBCASE("missing checkpoint file") {
    const CliResult r = run_cli(dir, "adapt --backbone missing.json");
    CHECK(r.code == 2);
    CHECK(r.err.find("--backbone") != std::string::npos);
  }
  SUBCASE("bad split name") {
    const CliResult r =
        run_cli(dir, "eval --backbone x.json --method y.json --split maybe");
    CHECK(r.code == 2);
  }
  SUBCASE("infeasible budget") {
    const CliResult r = run_cli(dir, "budget --budget 100 --dim 768 --prompt-len 60");
    CHECK(r.code == 2);
    CHECK(r.err.find("--budget") != std::string::npos);
  }
}

TEST_CASE("the master seed steers initialization and reruns are identical") {
  ScratchDir dir;
  const std::string args =
      "pretrain --run.pretrain_steps 0 --task.source_n 40 --backbone-out bb.json";
  const CliResult a = run_cli(dir, args);
  const CliResult b = run_cli(dir, args);
  const CliResult c = run_cli(dir, args + " --seed 5");
  CHECK(a.out == b.out);  // same seed: byte-identical report
  const json da = parse_report(a);
  const json dc = parse_report(c);
  CHECK(da.at("value_checksum") != dc.at("value_checksum"));
}

TEST_CASE("checkpoint round trip reproduces the in-process pipeline bit-exactly") {
  ScratchDir dir;
  const Pipeline p{150, 60, 60, 60, 20};

  const CliResult pre = run_cli(
      dir,
      "pretrain --run.pretrain_steps 150 --task.source_n 60 --backbone-out bb.json");
  parse_report(pre);
  const CliResult ad = run_cli(
      dir,
      "adapt --backbone bb.json --task.n 60 --run.steps 60 --run.eval_interval 20 "
      "--method-out m.json");
  const json ad_doc = parse_report(ad);
  const CliResult ev = run_cli(
      dir, "eval --backbone bb.json --method m.json --task.n 60");
  const json ev_doc = parse_report(ev);

  // The same pipeline without any serialization in between.
  BackboneModel model = p.pretrained(0);
  const Dataset data = generate(p.target(), p.target_n);
  PeftMethod method = init_method(p.adept_config(), model, 1);
  const AdaptResult result = adapt(model, method, data, p.adapt_opts(0));
  const EvalResult ref = evaluate(model, method, data.test);

  CHECK(ev_doc.at("accuracy").get<double>() == ref.accuracy);
  CHECK(ev_doc.at("predictions").get<std::vector<std::size_t>>() == ref.predictions);
  CHECK(ad_doc.at("best_step").get<std::size_t>() == result.best_step);
  CHECK(ad_doc.at("best_valid_accuracy").get<double>() == result.best_valid_accuracy);
  REQUIRE(ad_doc.at("history").size() == result.history.size());
  for (std::size_t i = 0; i < result.history.size(); ++i) {
    CHECK(ad_doc.at("history")[i].at("train_loss").get<double>() ==
          result.history[i].train_loss);
    CHECK(ad_doc.at("history")[i].at("valid_accuracy").get<double>() ==
          result.history[i].valid_accuracy);
  }

  // The method checkpoint holds exactly the adapted parameters.
  const PeftMethod loaded = load_method(dir.path + "/m.json");
  const auto& got = std::get<AdaptivePrompt>(loaded);
  const auto& want = std::get<AdaptivePrompt>(method);
  CHECK(testutil::bit_equal(got.prompt->values(), want.prompt->values()));
  CHECK(testutil::bit_equal(got.W_up->values(), want.W_up->values()));

  SUBCASE("shift probe at j=0 agrees with eval") {
    const CliResult ad2 = run_cli(
        dir,
        "adapt --backbone bb.json --task.n 60 --run.steps 40 --method.kind dept "
        "--method-out md.json");
    parse_report(ad2);
    const CliResult ev2 = run_cli(
        dir, "eval --backbone bb.json --method md.json --task.n 60");
    const CliResult sh = run_cli(
        dir,
        "analyze shift --backbone bb.json --method md.json --task.n 60 "
        "--analysis.shifts 0,1");
    const json ev2_doc = parse_report(ev2);
    const json sh_doc = parse_report(sh);
    CHECK(sh_doc.at("baseline_accuracy").get<double>() ==
          ev2_doc.at("accuracy").get<double>());
    CHECK(sh_doc.at("entries")[0].at("accuracy").get<double>() ==
          ev2_doc.at("accuracy").get<double>());
    CHECK(sh_doc.at("entries")[0].at("changed_predictions") == 0);
  }

  SUBCASE("decompose reports a tight reconstruction") {
    const CliResult de = run_cli(
        dir,
        "analyze decompose --backbone bb.json --method m.json --task.n 60 "
        "--analysis.position 3");
    const json de_doc = parse_report(de);
    CHECK(de_doc.at("max_abs_gap").get<double>() < 1e-10);
    CHECK(de_doc.at("prefix_mass").get<double>() > 0.0);
    CHECK(de_doc.at("scale").get<double>() ==
          1.0 - de_doc.at("prefix_mass").get<double>());
  }

  SUBCASE("prepend probe reports exact invariance for the adaptive method") {
    const CliResult pr = run_cli(
        dir, "analyze prepend --backbone bb.json --method m.json --task.n 60");
    const json pr_doc = parse_report(pr);
    CHECK(pr_doc.at("max_row_gap").get<double>() == 0.0);
    CHECK(pr_doc.at("exactly_zero") == true);
  }

  SUBCASE("stats report covers every content token of the split") {
    const CliResult st = run_cli(
        dir, "analyze stats --backbone bb.json --method m.json --task.n 60");
    const json st_doc = parse_report(st);
    CHECK(st_doc.at("token_count") == 8 * 12);  // test split of n=60, length 12
    CHECK(st_doc.at("embeddings").at("mean_abs").get<double>() > 0.0);
  }
}

TEST_CASE("adapt with zero steps writes the freshly initialized method") {
  ScratchDir dir;
  const CliResult pre = run_cli(
      dir,
      "pretrain --run.pretrain_steps 0 --task.source_n 40 --backbone-out bb.json");
  parse_report(pre);
  const CliResult ad = run_cli(
      dir, "adapt --backbone bb.json --task.n 40 --run.steps 0 --method-out m.json");
  const json doc = parse_report(ad);
  CHECK(doc.at("history").empty());
  CHECK(doc.at("best_step") == 0);

  const Pipeline p{0, 40, 40, 0, 100};
  BackboneModel model = load_backbone(dir.path + "/bb.json");
  const PeftMethod init = init_method(p.adept_config(), model, 1);
  CHECK(slurp(dir.path + "/m.json") == method_to_json(init));
}

TEST_CASE("--out moves the report into a file") {
  ScratchDir dir;
  const CliResult r = run_cli(dir, "budget --out report.json");
  CHECK(r.code == 0);
  CHECK(r.out.empty());
  const json doc = json::parse(slurp(dir.path + "/report.json"));
  CHECK(doc.at("schema") == "adept-lab/v1");
  CHECK(doc.at("r") == 19);
}

TEST_CASE("flags override config file values which override defaults") {
  ScratchDir dir;
  std::ofstream(dir.path + "/cfg.json")
      << "{\"task\":{\"n\":60},\"run\":{\"pretrain_steps\":0}}";
  const CliResult pre = run_cli(
      dir, "pretrain --config cfg.json --task.source_n 40 --backbone-out bb.json");
  parse_report(pre);
  const CliResult ad = run_cli(
      dir,
      "adapt --config cfg.json --backbone bb.json --run.steps 0 --method-out m.json");
  parse_report(ad);

  // file n=60 -> test split 8; flag n=40 -> test split 6
  const CliResult from_file =
      run_cli(dir, "eval --config cfg.json --backbone bb.json --method m.json");
  CHECK(parse_report(from_file).at("n") == 8);
  const CliResult from_flag = run_cli(
      dir, "eval --config cfg.json --task.n 40 --backbone bb.json --method m.json");
  CHECK(parse_report(from_flag).at("n") == 6);
}
