#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "asyncfm/commands.hpp"
#include "asyncfm/evals.hpp"

using namespace asyncfm;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "backbone": {"d": 32, "layers": 2, "heads": 2, "ffn": 64},
  "rater": {"d_r": 32, "layers": 2, "heads": 2, "ffn": 64},
  "bench": {"n_train": 48, "n_val": 8, "n_test": 8},
  "train": {"batch": 16, "epochs": 2},
  "rater_train": {"batch": 16, "epochs": 1, "subset": 32},
  "eval": {"episodes": 8}
})";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / ("asyncfm_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string file(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("relative outputs honor the output directory variable") {
  setenv("ASYNCFM_OUT", "/some/base", 1);
  CHECK(resolve_out_path("report.txt") == "/some/base/report.txt");
  CHECK(resolve_out_path("/abs/report.txt") == "/abs/report.txt");
  unsetenv("ASYNCFM_OUT");
  CHECK(resolve_out_path("report.txt") == "report.txt");
}

TEST_CASE("full command pipeline is byte-for-byte reproducible") {
  Workspace ws;
  std::ofstream(ws.file("cfg.json")) << kTinyConfig;

  cmd_gen_data(ws.file("cfg.json"), ws.file("data.afmd"));
  cmd_gen_data(ws.file("cfg.json"), ws.file("data2.afmd"));
  CHECK(slurp(ws.file("data.afmd")) == slurp(ws.file("data2.afmd")));

  cmd_train(ws.file("cfg.json"), ws.file("data.afmd"), ws.file("bb.afmk"));
  cmd_train(ws.file("cfg.json"), ws.file("data.afmd"), ws.file("bb2.afmk"));
  CHECK(slurp(ws.file("bb.afmk")) == slurp(ws.file("bb2.afmk")));
  CHECK(slurp(ws.file("bb.afmk.log")) == slurp(ws.file("bb2.afmk.log")));
  CHECK(slurp(ws.file("bb.afmk.log")).find("0\ttrain\t") != std::string::npos);

  cmd_train_rater(ws.file("cfg.json"), ws.file("data.afmd"), ws.file("bb.afmk"),
                  ws.file("rr.afmk"));
  cmd_train_rater(ws.file("cfg.json"), ws.file("data.afmd"), ws.file("bb.afmk"),
                  ws.file("rr2.afmk"));
  CHECK(slurp(ws.file("rr.afmk")) == slurp(ws.file("rr2.afmk")));

  for (const char* mode : {"sfm-only", "async"}) {
    const std::string a = ws.file(std::string("infer_") + mode + ".txt");
    const std::string b = ws.file(std::string("infer_") + mode + "_2.txt");
    cmd_infer(ws.file("rr.afmk"), ws.file("data.afmd"), 0, mode, a);
    cmd_infer(ws.file("rr.afmk"), ws.file("data.afmd"), 0, mode, b);
    CHECK(slurp(a) == slurp(b));
    // timing sidecars exist but are excluded from the determinism contract
    CHECK(fs::exists(a + ".timings.txt"));
  }

  cmd_eval(ws.file("rr.afmk"), ws.file("data.afmd"), "async", ws.file("eval.txt"));
  cmd_eval(ws.file("rr.afmk"), ws.file("data.afmd"), "async", ws.file("eval2.txt"));
  CHECK(slurp(ws.file("eval.txt")) == slurp(ws.file("eval2.txt")));
  CHECK(slurp(ws.file("eval.txt")).find("success_rate") != std::string::npos);

  cmd_self_correct(ws.file("rr.afmk"), ws.file("data.afmd"), 1.0, "gaussian-offset", {},
                   ws.file("sc.txt"));
  cmd_self_correct(ws.file("rr.afmk"), ws.file("data.afmd"), 1.0, "gaussian-offset", {},
                   ws.file("sc2.txt"));
  CHECK(slurp(ws.file("sc.txt")) == slurp(ws.file("sc2.txt")));
  CHECK(slurp(ws.file("sc.txt")).find("detection_rate") != std::string::npos);

  SUBCASE("mismatched pairings are refused with both digests named") {
    std::ofstream(ws.file("cfg2.json")) << R"({
      "backbone": {"d": 32, "layers": 2, "heads": 2, "ffn": 64},
      "bench": {"n_train": 48, "n_val": 8, "n_test": 8, "seed": 99}
    })";
    try {
      cmd_train(ws.file("cfg2.json"), ws.file("data.afmd"), ws.file("bad.afmk"));
      FAIL("expected a digest mismatch");
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find("digest mismatch") != std::string::npos);
      CHECK(msg.find("expected") != std::string::npos);
      CHECK(msg.find("found") != std::string::npos);
    }
    CHECK_THROWS_WITH_AS(cmd_train_rater(ws.file("cfg2.json"), ws.file("data.afmd"),
                                         ws.file("bb.afmk"), ws.file("bad.afmk")),
                         doctest::Contains("digest mismatch"), std::runtime_error);
  }

  SUBCASE("bad arguments are rejected") {
    CHECK_THROWS_AS(cmd_infer(ws.file("rr.afmk"), ws.file("data.afmd"), 100, "async",
                              ws.file("x.txt")),
                    std::invalid_argument);
    CHECK_THROWS_AS(cmd_infer(ws.file("rr.afmk"), ws.file("data.afmd"), 0, "turbo",
                              ws.file("x.txt")),
                    std::invalid_argument);
    CHECK_THROWS(cmd_self_correct(ws.file("bb.afmk"), ws.file("data.afmd"), 1.0,
                                  "gaussian-offset", {}, ws.file("x.txt")));
  }
}

TEST_CASE("reports carry the config digest and parse back") {
  Workspace ws;
  std::ofstream(ws.file("cfg.json")) << kTinyConfig;
  cmd_gen_data(ws.file("cfg.json"), ws.file("data.afmd"));
  cmd_train(ws.file("cfg.json"), ws.file("data.afmd"), ws.file("bb.afmk"));
  cmd_infer(ws.file("bb.afmk"), ws.file("data.afmd"), 1, "sfm-only", ws.file("r.txt"));
  const std::string text = slurp(ws.file("r.txt"));
  CHECK(text.find("# asyncfm report v1") == 0);
  CHECK(text.find("config_digest") != std::string::npos);
  CHECK(text.find("chunk_mse") != std::string::npos);
  CHECK(text.find("action.0.0") != std::string::npos);
}
