// Drives the installed command-line binary as a subprocess and checks its
// artifacts, exit codes, and reproducibility guarantees.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sduseg/netpbm.hpp"
#include "support/tempdir.hpp"

using Catch::Matchers::ContainsSubstring;
using sduseg::testing::TempDir;

namespace {

namespace fs = std::filesystem;

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr combined
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(SDUSEG_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult res;
  char buf[4096];
  while (std::size_t got = std::fread(buf, 1, sizeof(buf), pipe)) {
    res.output.append(buf, got);
  }
  const int status = ::pclose(pipe);
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool trees_identical(const fs::path& a, const fs::path& b) {
  std::vector<std::string> ra, rb;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) ra.push_back(fs::relative(e.path(), a).generic_string());
  }
  for (const auto& e : fs::recursive_directory_iterator(b)) {
    if (e.is_regular_file()) rb.push_back(fs::relative(e.path(), b).generic_string());
  }
  std::sort(ra.begin(), ra.end());
  std::sort(rb.begin(), rb.end());
  if (ra != rb) return false;
  for (const std::string& rel : ra) {
    if (slurp(a / rel) != slurp(b / rel)) return false;
  }
  return true;
}

// epoch,split,class,loss,dice rows for one split, ordered as written.
std::vector<std::pair<int, double>> dice_rows(const std::string& csv, const std::string& split) {
  std::vector<std::pair<int, double>> out;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string epoch, sp, klass, loss, dice;
    std::getline(row, epoch, ',');
    std::getline(row, sp, ',');
    std::getline(row, klass, ',');
    std::getline(row, loss, ',');
    std::getline(row, dice, ',');
    if (sp == split) out.emplace_back(std::stoi(epoch), std::stod(dice));
  }
  return out;
}

}  // namespace

TEST_CASE("synth regenerates byte-identically and validates extents") {
  TempDir tmp;
  const std::string a = tmp.file("a"), b = tmp.file("b");
  REQUIRE(run_cli("synth --out " + a + " --n 4 --size 32 --seed 11").exit_code == 0);
  REQUIRE(run_cli("synth --out " + b + " --n 4 --size 32 --seed 11").exit_code == 0);
  // manifests record their own --out path; the datasets must match bytewise
  REQUIRE(trees_identical(fs::path(a) / "images", fs::path(b) / "images"));
  REQUIRE(trees_identical(fs::path(a) / "masks", fs::path(b) / "masks"));
  REQUIRE(fs::exists(fs::path(a) / "manifest.json"));

  const RunResult bad = run_cli("synth --out " + tmp.file("c") + " --size 60");
  REQUIRE(bad.exit_code == 2);
  REQUIRE_THAT(bad.output, ContainsSubstring("divisible by 8"));
}

TEST_CASE("train writes checkpoints, history, and a manifest") {
  TempDir tmp;
  const std::string data = tmp.file("data"), out = tmp.file("run");
  REQUIRE(run_cli("synth --out " + data + " --n 8 --size 32 --seed 21").exit_code == 0);

  const RunResult r = run_cli("train --data " + data + " --out " + out +
                              " --widths 16,32,48,64 --epochs 4 --batch 4 --lr 1e-3 --seed 5");
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(fs::path(out) / "best.ckpt"));
  REQUIRE(fs::exists(fs::path(out) / "last.ckpt"));
  REQUIRE(fs::exists(fs::path(out) / "manifest.json"));

  const auto train_dice = dice_rows(slurp(fs::path(out) / "history.csv"), "train");
  REQUIRE(train_dice.size() == 4);
  REQUIRE(train_dice.back().second > train_dice.front().second);

  SECTION("the baseline arch trains through the same plumbing") {
    const std::string out2 = tmp.file("run-unet");
    const RunResult u = run_cli("train --data " + data + " --out " + out2 +
                                " --arch unet --widths 16,32,48,64 --epochs 1 --batch 4 --seed 5");
    CAPTURE(u.output);
    REQUIRE(u.exit_code == 0);
    REQUIRE(fs::exists(fs::path(out2) / "best.ckpt"));
  }

  SECTION("a data folder without masks fails naming the path") {
    const std::string broken = tmp.file("broken");
    fs::create_directories(fs::path(broken) / "images");
    fs::copy(fs::path(data) / "images", fs::path(broken) / "images",
             fs::copy_options::overwrite_existing);
    const RunResult bad = run_cli("train --data " + broken + " --out " + tmp.file("x"));
    REQUIRE(bad.exit_code == 2);
    REQUIRE_THAT(bad.output, ContainsSubstring("masks"));
  }
}

TEST_CASE("eval scores a checkpoint and writes parsable overlays") {
  TempDir tmp;
  const std::string data = tmp.file("data"), run = tmp.file("run");
  REQUIRE(run_cli("synth --out " + data + " --n 6 --size 32 --seed 31").exit_code == 0);
  REQUIRE(run_cli("train --data " + data + " --out " + run +
                  " --widths 16,32,48,64 --epochs 2 --batch 3 --seed 7")
              .exit_code == 0);

  const std::string ev = tmp.file("ev"), ov = tmp.file("ov");
  const RunResult r = run_cli("eval --checkpoint " + run + "/best.ckpt --data " + data + " --out " +
                              ev + " --overlay-dir " + ov);
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  REQUIRE_THAT(r.output, ContainsSubstring("mean dice"));

  const std::string scores = slurp(fs::path(ev) / "scores.csv");
  REQUIRE_THAT(scores, ContainsSubstring("id,class,dice,loss"));
  REQUIRE_THAT(scores, ContainsSubstring("s0000,0,"));

  const sduseg::PnmImage img = sduseg::read_pnm((fs::path(ov) / "s0000.ppm").string());
  REQUIRE(img.channels == 3);
  REQUIRE(img.h == 32);
  REQUIRE(img.w == 32);

  SECTION("a corrupt checkpoint magic is a data error") {
    const std::string fake = tmp.file("bad.ckpt");
    std::ofstream(fake, std::ios::binary) << "XXXXnotacheckpoint";
    const RunResult bad = run_cli("eval --checkpoint " + fake + " --data " + data);
    REQUIRE(bad.exit_code == 2);
    REQUIRE_THAT(bad.output, ContainsSubstring("bad magic"));
  }
}

TEST_CASE("parameter report carries the reference totals") {
  const RunResult r = run_cli("params");
  REQUIRE(r.exit_code == 0);
  REQUIRE_THAT(r.output, ContainsSubstring("6028833"));
  REQUIRE_THAT(r.output, ContainsSubstring("14787777"));
  REQUIRE_THAT(r.output, ContainsSubstring("ratio"));

  const RunResult narrow = run_cli("params --arch sdu --widths 8,16,32,64");
  REQUIRE(narrow.exit_code == 1);
  REQUIRE_THAT(narrow.output, ContainsSubstring("divisible by 16"));

  const RunResult unet = run_cli("params --arch unet --widths 8,16,32,64");
  REQUIRE(unet.exit_code == 0);
  REQUIRE_THAT(unet.output, ContainsSubstring("total"));
}

TEST_CASE("receptive-field report matches the known cascades") {
  const RunResult sdu = run_cli("rf --arch sdu");
  REQUIRE(sdu.exit_code == 0);
  REQUIRE_THAT(sdu.output, ContainsSubstring("{3, 7, 15, 31, 63}"));

  const RunResult unet = run_cli("rf --arch unet");
  REQUIRE(unet.exit_code == 0);
  REQUIRE_THAT(unet.output, ContainsSubstring("{5}"));

  const RunResult conv = run_cli("rf --arch conv");
  REQUIRE(conv.exit_code == 0);
  REQUIRE_THAT(conv.output, ContainsSubstring("{3}"));
}

TEST_CASE("cross-validation artifacts agree with the report") {
  TempDir tmp;
  const std::string data = tmp.file("data"), out = tmp.file("cv");
  REQUIRE(run_cli("synth --out " + data + " --n 6 --size 32 --seed 41").exit_code == 0);

  const RunResult r = run_cli("crossval --data " + data + " --out " + out +
                              " --arch-a sdu --arch-b sdu --widths 16,32,48,64 --k 2 --epochs 1" +
                              " --batch 3 --seed 3");
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  // identical configs on identical folds cannot differ
  REQUIRE_THAT(r.output, ContainsSubstring("degenerate"));

  const std::string folds = slurp(fs::path(out) / "folds.csv");
  REQUIRE_THAT(folds, ContainsSubstring("id,fold"));
  const std::string scores = slurp(fs::path(out) / "scores.csv");
  REQUIRE_THAT(scores, ContainsSubstring("arch,fold,mean_dice"));
  // two archs x two folds
  REQUIRE(std::count(scores.begin(), scores.end(), '\n') == 5);

  SECTION("k below 2 is a usage error") {
    const RunResult bad = run_cli("crossval --data " + data + " --out " + tmp.file("y") + " --k 1");
    REQUIRE(bad.exit_code == 1);
  }
}

TEST_CASE("replay rebuilds a training run byte for byte") {
  TempDir tmp;
  const std::string data = tmp.file("data"), out = tmp.file("run");
  REQUIRE(run_cli("synth --out " + data + " --n 6 --size 32 --seed 51").exit_code == 0);
  REQUIRE(run_cli("train --data " + data + " --out " + out +
                  " --widths 16,32,48,64 --epochs 2 --batch 3 --seed 9")
              .exit_code == 0);

  const std::string keep = tmp.file("keep");
  fs::create_directories(keep);
  fs::copy(out, keep, fs::copy_options::recursive);
  fs::remove(fs::path(out) / "best.ckpt");
  fs::remove(fs::path(out) / "last.ckpt");
  fs::remove(fs::path(out) / "history.csv");

  const RunResult r = run_cli("replay --manifest " + out + "/manifest.json");
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  REQUIRE(trees_identical(out, keep));

  SECTION("changed inputs are refused") {
    std::ofstream(fs::path(data) / "images" / "s0000.pgm", std::ios::binary | std::ios::app)
        << "tamper";
    const RunResult bad = run_cli("replay --manifest " + out + "/manifest.json");
    REQUIRE(bad.exit_code == 2);
    REQUIRE_THAT(bad.output, ContainsSubstring("changed since the manifest"));
  }
}
