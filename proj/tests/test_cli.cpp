#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fabme/cli.hpp"
#include "fabme/data.hpp"

using namespace fabme;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("fabme_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome call(std::vector<std::string> args) {
  args.insert(args.begin(), "fabme");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("params: fabme is no larger than the baseline") {
  TempDir dir("params");
  const auto r = call({"params", "--variant", "fabme,baseline", "--result", (dir.path / "p.csv").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out == "fabme 10943472\nbaseline 11132011\n");
  CHECK(slurp(dir.path / "p.csv") == "variant,scale,params\nfabme,s,10943472\nbaseline,s,11132011\n");
}

TEST_CASE("gradcheck prints PASS with the worst relative error") {
  TempDir dir("gc");
  const auto r = call({"gradcheck", "--block", "emca", "--result", (dir.path / "g.csv").string()});
  CHECK(r.code == 0);
  CHECK(r.out.rfind("PASS max_rel_err=", 0) == 0);
  CHECK(slurp(dir.path / "g.csv").rfind("block,shape,passed,max_rel_err,worst\nemca,", 0) == 0);
}

TEST_CASE("bad arguments exit 1 and still leave a result file") {
  TempDir dir("bad");
  const auto result = (dir.path / "r.csv").string();
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"gradcheck", "--result", result, "--block", "nope"},
           {"params", "--result", result, "--bogus"},
       }) {
    fs::remove(result);
    const auto r = call(args);
    CHECK(r.code == 1);
    CHECK_FALSE(r.err.empty());
    CHECK(slurp(result).find("status,error") != std::string::npos);
  }
  CHECK(call({}).code == 1);
  CHECK(call({"--help"}).code == 0);
}

TEST_CASE("tile on an empty directory fails with a message") {
  TempDir dir("tile_empty");
  fs::create_directories(dir.path / "in");
  const auto r = call({"tile", "--in", (dir.path / "in").string(), "--out", (dir.path / "out").string(), "--result",
                       (dir.path / "t.csv").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("no images found") != std::string::npos);
  CHECK(slurp(dir.path / "t.csv").find("status,error") != std::string::npos);
}

TEST_CASE("missing data directory is reported") {
  TempDir dir("missing");
  const auto r = call({"eval", "--predictions", (dir.path / "p").string(), "--data", (dir.path / "nowhere").string(),
                       "--result", (dir.path / "e.csv").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("not found") != std::string::npos);
}

TEST_CASE("synth then eval with ground truth as predictions gives 100%") {
  TempDir dir("synth_eval");
  const auto data = (dir.path / "syn").string();
  REQUIRE(call({"synth", "--n", "20", "--classes", "4", "--seed", "2", "--out", data, "--result",
                (dir.path / "s.csv").string()})
              .code == 0);
  CHECK(load_samples(dir.path / "syn" / "train").size() == 16);
  CHECK(load_samples(dir.path / "syn" / "val").size() == 4);
  const auto r = call({"eval", "--predictions", (dir.path / "syn" / "val" / "labels").string(), "--data", data,
                       "--result", (dir.path / "e.csv").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("mAP@0.5 = 100.00%", 0) == 0);
  const std::string csv = slurp(dir.path / "e.csv");
  CHECK(csv.rfind("class_id,n_gt,n_tp,n_fp,AP\n", 0) == 0);
  CHECK(csv.find("mAP@0.5,1\n") != std::string::npos);
}

TEST_CASE("train, then eval the checkpoint; same seed gives the same numbers") {
  TempDir dir("train");
  const auto data = (dir.path / "syn").string();
  REQUIRE(call({"synth", "--n", "20", "--classes", "2", "--out", data, "--result", (dir.path / "s.csv").string()})
              .code == 0);
  {
    std::ofstream cfg(dir.path / "cfg.txt");
    cfg << "# small run\nd_state=4\nbatch_size=8\nlr=0.004\n";
  }
  auto train_once = [&](const std::string& run) {
    const auto r = call({"train", "--data", data, "--config", (dir.path / "cfg.txt").string(), "--epochs", "2",
                         "--classes", "2", "--seed", "5", "--out", (dir.path / run).string(), "--result",
                         (dir.path / (run + ".csv")).string()});
    REQUIRE(r.code == 0);
    return slurp(dir.path / run / "history.csv");
  };
  const std::string h1 = train_once("run1");
  CHECK(h1 == train_once("run2"));
  for (const char* f : {"model.ckpt", "model.graph", "train.cfg", "best.ckpt", "last.ckpt"})
    CHECK(fs::exists(dir.path / "run1" / f));
  CHECK(slurp(dir.path / "run1" / "train.cfg").find("batch_size=8\n") != std::string::npos);
  CHECK(slurp(dir.path / "run1" / "model.graph").find("d_state=4\n") != std::string::npos);

  const auto e = call({"eval", "--model", (dir.path / "run1" / "model.ckpt").string(), "--data", data,
                       "--save-predictions", (dir.path / "pred").string(), "--result",
                       (dir.path / "e.csv").string()});
  REQUIRE(e.code == 0);
  CHECK(e.out.rfind("mAP@0.5 = ", 0) == 0);
  // Saved predictions re-evaluate to the same score.
  const auto again = call({"eval", "--predictions", (dir.path / "pred").string(), "--data", data, "--classes", "2",
                           "--result", (dir.path / "e2.csv").string()});
  REQUIRE(again.code == 0);
  CHECK(again.out.substr(0, 17) == e.out.substr(0, 17));

  const auto bad = call({"train", "--data", data, "--config", (dir.path / "missing.txt").string(), "--result",
                         (dir.path / "bad.csv").string()});
  CHECK(bad.code == 1);
}

TEST_CASE("bench writes the CSV columns") {
  TempDir dir("bench");
  const auto r = call({"bench", "--op", "ss2d,attention", "--sweep", "16,64", "--result",
                       (dir.path / "b.csv").string()});
  REQUIRE(r.code == 0);
  const std::string csv = slurp(dir.path / "b.csv");
  CHECK(csv.rfind("operator,L,d_model,d_state,mean_ns,p95_ns\nss2d,16,16,16,", 0) == 0);
  CHECK(csv.find("\nattention,64,16,16,") != std::string::npos);
}
