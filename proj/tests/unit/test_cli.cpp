#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "xmodal/cli.hpp"
#include "xmodal/trainer.hpp"

using namespace xmodal;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result xmodal_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = xmodal::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t lines(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

// Tiny model and corpus sizes as a config file.
fs::path write_config(const fs::path& dir, const std::string& extra = "") {
  auto c = test::tiny_config();
  c.corpus_recipe_only = 16;
  auto path = dir / "tiny.txt";
  std::ofstream(path) << serialize_config(c) << extra;
  return path;
}

std::set<std::string> listing(const fs::path& dir) {
  std::set<std::string> names;
  for (const auto& e : fs::recursive_directory_iterator(dir)) names.insert(fs::relative(e.path(), dir).string());
  return names;
}

std::string fingerprint_of_tree(const fs::path& dir) {
  std::string all;
  for (const auto& name : listing(dir)) {
    all += name;
    if (fs::is_regular_file(dir / name)) all += to_hex(fnv1a(slurp(dir / name)));
  }
  return all;
}

std::string seed_in(const fs::path& config_txt) {
  auto c = load_config_file(config_txt);
  return std::to_string(c.seed);
}

}  // namespace

TEST_CASE("usage errors exit 1, help exits 0") {
  CHECK(xmodal_run({}).code == 1);
  CHECK(xmodal_run({"frobnicate"}).code == 1);
  CHECK(xmodal_run({"train", "--out", "x", "--no-such-flag"}).code == 1);
  CHECK(xmodal_run({"train"}).code == 1);  // --out is required
  CHECK(xmodal_run({"--help"}).code == 0);
  CHECK(xmodal_run({"train", "--help"}).code == 0);
  auto dir = test::temp_dir("cli_usage");
  auto r = xmodal_run({"train", "--out", (dir / "o").string(), "--set", "no_such_key=1"});
  CHECK(r.code == 1);
  CHECK(r.err.find("no_such_key") != std::string::npos);
  CHECK(xmodal_run({"train", "--out", (dir / "o").string(), "--set", "batch_size=1"}).code == 1);
  CHECK(xmodal_run({"train", "--out", (dir / "o").string(), "--set", "novalue"}).code == 1);
  CHECK(xmodal_run({"report", (dir / "missing.jsonl").string(), "--out", (dir / "r").string()}).code == 1);
  CHECK(xmodal_run({"grad-check", "--probe", "no_such_probe"}).code == 1);
  fs::remove_all(dir);
}

TEST_CASE("gen-data writes a corpus layer that train consumes without modifying it") {
  auto dir = test::temp_dir("cli_data");
  auto data = dir / "data";
  auto r = xmodal_run({"gen-data", "--out", data.string(), "--paired", "32", "--recipe-only", "16", "--val", "16",
                       "--test", "16", "--seed", "3", "--categories", "5", "--ingredients", "20", "--image-size",
                       "16"});
  REQUIRE(r.code == 0);
  CHECK(lines(slurp(data / "corpus.jsonl")) == 32 + 16 + 16 + 16);
  std::size_t pngs = 0;
  for (const auto& name : listing(data)) pngs += name.ends_with(".png");
  CHECK(pngs == 32 + 16 + 16);

  const auto before = fingerprint_of_tree(data);
  auto config = write_config(dir);
  auto out = dir / "run";
  r = xmodal_run({"train", "--config", config.string(), "--data", data.string(), "--out", out.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fingerprint_of_tree(data) == before);
  for (const char* f : {"config.txt", "runlog.jsonl", "metrics.json", "checkpoints/best.pt", "checkpoints/last.pt"}) {
    CHECK_MESSAGE(fs::exists(out / f), f);
  }
  auto metrics = nlohmann::json::parse(slurp(out / "metrics.json"));
  CHECK(metrics_schema_error(metrics["test"]).empty());
  // Outputs stay under --out: the working area holds only what we created.
  CHECK(listing(dir).count("run") == 1);
  for (const auto& name : listing(dir)) {
    CHECK_MESSAGE((name.starts_with("data") || name.starts_with("run") || name == "tiny.txt"), name);
  }

  // eval and gen-images from the checkpoint.
  r = xmodal_run({"eval", "--checkpoint", (out / "checkpoints" / "best.pt").string(), "--data", data.string(),
                  "--split", "test", "--out", (dir / "eval").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(metrics_schema_error(nlohmann::json::parse(slurp(dir / "eval" / "metrics.json"))).empty());
  r = xmodal_run({"gen-images", "--checkpoint", (out / "checkpoints" / "best.pt").string(), "--data", data.string(),
                  "--count", "3", "--out", (dir / "images").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  auto index = nlohmann::json::parse(slurp(dir / "images" / "index.json"));
  CHECK(index.size() == 3);
  for (auto& [id, file] : index.items()) CHECK(fs::exists(dir / "images" / file.get<std::string>()));
  CHECK(fingerprint_of_tree(data) == before);
  fs::remove_all(dir);
}

TEST_CASE("seed precedence: config < XMODAL_SEED < --set < --seed") {
  auto dir = test::temp_dir("cli_seed");
  auto config = write_config(dir, "seed = 3\nepochs = 1\ncorpus_paired = 16\ncorpus_val = 8\ncorpus_test = 8\n");
  auto run_with = [&](const std::string& name, std::vector<std::string> extra) {
    std::vector<std::string> args = {"train", "--config", config.string(), "--out", (dir / name).string()};
    args.insert(args.end(), extra.begin(), extra.end());
    auto r = xmodal_run(args);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return seed_in(dir / name / "config.txt");
  };
  ::unsetenv("XMODAL_SEED");
  CHECK(run_with("a", {}) == "3");
  ::setenv("XMODAL_SEED", "5", 1);
  CHECK(run_with("b", {}) == "5");
  CHECK(run_with("c", {"--set", "seed=6"}) == "6");
  CHECK(run_with("d", {"--set", "seed=6", "--seed", "7"}) == "7");
  ::unsetenv("XMODAL_SEED");
  fs::remove_all(dir);
}

TEST_CASE("sweep writes one row per size") {
  auto dir = test::temp_dir("cli_sweep");
  auto config = write_config(dir, "max_steps = 2\n");
  auto r = xmodal_run({"sweep", "--sizes", "4,8,16", "--config", config.string(), "--out", (dir / "s").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  auto csv = slurp(dir / "s" / "sweep.csv");
  CHECK(lines(csv) == 4);
  CHECK(csv.rfind(kSweepColumns, 0) == 0);
  auto json = nlohmann::json::parse(slurp(dir / "s" / "sweep.json"));
  CHECK(json["rows"].size() == 3);
  auto svg = slurp(dir / "s" / "batch_size.svg");
  std::size_t points = 0;
  for (auto pos = svg.find("class=\"point medR\""); pos != std::string::npos; pos = svg.find("class=\"point medR\"", pos + 1)) ++points;
  CHECK(points == 3);

  r = xmodal_run({"report", (dir / "s" / "sweep.json").string(), "--out", (dir / "rep").string()});
  CHECK(r.code == 0);
  CHECK(fs::exists(dir / "rep" / "batch_size_sweep.svg"));
  fs::remove_all(dir);
}

TEST_CASE("grad-check runs probes and lists them") {
  auto dir = test::temp_dir("cli_grad");
  auto r = xmodal_run({"grad-check", "--list"});
  CHECK(r.code == 0);
  CHECK(r.out.find("l_ret_hardest") != std::string::npos);
  r = xmodal_run({"grad-check", "--probe", "l_ret_hardest", "--probe", "constant", "--seeds", "2", "--out", dir.string()});
  CHECK(r.code == 0);
  auto json = nlohmann::json::parse(slurp(dir / "gradcheck.json"));
  CHECK(json.dump().find("l_ret_hardest") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("runtime failures exit 2") {
  auto dir = test::temp_dir("cli_runtime");
  auto config = write_config(dir, "learning_rate = 1e30\ncritic_lr = 1e30\ndisc_lr = 1e30\n");
  auto r = xmodal_run({"train", "--config", config.string(), "--out", (dir / "o").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("non_finite") != std::string::npos);
  // An unwritable output location is an I/O failure.
  std::ofstream(dir / "file") << "x";
  r = xmodal_run({"gen-data", "--out", (dir / "file" / "sub").string(), "--paired", "2"});
  CHECK(r.code == 2);
  fs::remove_all(dir);
}
