#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include <doctest.h>
#include <json.hpp>

#include "bwnh/cli.hpp"
#include "bwnh/manifest.hpp"
#include "helpers.hpp"

using namespace bwnh;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    files[fs::relative(e.path(), dir).string()] =
        std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return files;
}

// Small dataset and trained model shared by the workflow tests.
struct Workspace {
  testing::TempDir dir;
  fs::path data = dir / "data";
  fs::path model = dir / "model.manifest";

  Workspace() {
    REQUIRE(cli({"gen-data", "--out", data.string(), "--count", "120"}).code == 0);
    REQUIRE(cli({"train-baseline", "--arch", "(1x4C3)-MP2-(1x8C3)-MP2-10FC-Softmax", "--data",
                 data.string(), "--out", model.string(), "--iters", "20"})
                .code == 0);
  }
};

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  const auto r = cli({"verify", "--oracle", "--bogus"});
  CHECK(r.code == kExitUsage);
  CHECK_FALSE(r.err.empty());
  CHECK(cli({"verify"}).code == kExitUsage);
  CHECK(cli({"verify", "--oracle", "--s-max", "40"}).code == kExitUsage);
  CHECK(cli({"binarize", "--model", "m", "--data", "d"}).code == kExitUsage);
  CHECK(cli({"binarize", "--model", "m", "--data", "d", "--out", "o", "--target-from", "sideways"})
            .code == kExitUsage);
}

TEST_CASE("help exits cleanly") {
  const auto r = cli({"--help"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("binarize") != std::string::npos);
}

TEST_CASE("verify prints the oracle summary") {
  testing::TempDir dir;
  const auto report = dir / "oracle.json";
  const auto r = cli({"verify", "--oracle", "--s-max", "8", "--trials", "10", "--report", report.string()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("oracle trials=10") != std::string::npos);
  std::ifstream in(report);
  CHECK(nlohmann::json::parse(in)["trials"] == 10);
}

TEST_CASE("workflow commands") {
  Workspace ws;
  const auto before = snapshot(ws.dir.path());

  SUBCASE("binarize honours the pipeline switches and leaves inputs alone") {
    const auto out = ws.dir / "bin.manifest";
    const auto r = cli({"binarize", "--model", ws.model.string(), "--data", ws.data.string(), "--out",
                        out.string(), "--max-iter", "20", "--seed", "42", "--skip-first",
                        "--target-from", "full_precision", "--batch", "32"});
    REQUIRE(r.code == kExitOk);
    const auto m = read_manifest(out);
    CHECK_FALSE(m.layers[0].binarized);
    CHECK(m.layers[4].binarized);
    CHECK(fs::exists(ws.dir / "bin.manifest.report.json"));
    const auto after = snapshot(ws.dir.path());
    for (const auto& [name, bytes] : before) CHECK(after.at(name) == bytes);

    CHECK(cli({"eval", "--model", out.string(), "--data", ws.data.string(), "--mode", "mixed"}).code ==
          kExitOk);
    CHECK(cli({"eval", "--model", out.string(), "--data", ws.data.string(), "--mode", "binary"}).code ==
          kExitRuntime);
    CHECK(cli({"finetune", "--model", out.string(), "--data", ws.data.string(), "--out",
               (ws.dir / "tuned.manifest").string(), "--iters", "3"})
              .code == kExitOk);
  }

  SUBCASE("invalid flags are caught before anything is written") {
    const auto out = ws.dir / "never.manifest";
    CHECK(cli({"binarize", "--model", ws.model.string(), "--data", ws.data.string(), "--out",
               out.string(), "--max-iter", "0"})
              .code == kExitUsage);
    CHECK_FALSE(fs::exists(out));
    CHECK(cli({"binarize", "--model", ws.model.string(), "--data", ws.data.string(), "--out",
               ws.model.string()})
              .code == kExitUsage);
    CHECK(snapshot(ws.dir.path()) == before);
  }

  SUBCASE("runtime failures exit with 2") {
    CHECK(cli({"binarize", "--model", ws.model.string(), "--data", (ws.dir / "missing").string(),
               "--out", (ws.dir / "x.manifest").string()})
              .code == kExitRuntime);
  }

  SUBCASE("curve and ablate write their reports") {
    const auto curve = ws.dir / "curve.json";
    CHECK(cli({"curve", "--model", ws.model.string(), "--data", ws.data.string(), "--layer", "conv2",
               "--batch", "16", "--report", curve.string()})
              .code == kExitOk);
    std::ifstream cin(curve);
    CHECK_FALSE(nlohmann::json::parse(cin)["series"].empty());

    const auto abl = ws.dir / "ablate.json";
    CHECK(cli({"ablate", "--model", ws.model.string(), "--data", ws.data.string(), "--batch", "16",
               "--report", abl.string()})
              .code == kExitOk);
    std::ifstream ain(abl);
    CHECK(nlohmann::json::parse(ain).size() == 3);
  }
}
