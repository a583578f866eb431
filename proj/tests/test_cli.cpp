// SPDX-License-Identifier: Apache-2.0
#include "gssd/eval.hpp"
#include "gssd/overlay.hpp"
#include "support.hpp"

#include <doctest.h>

#include <sys/wait.h>

using namespace gssd;
using gssd::test::read_file;
using gssd::test::TempDir;
using gssd::test::write_file;

namespace {

struct Run {
  int code;
  std::string err;
};

Run run_cli(const std::string &args, const TempDir &dir) {
  const auto err = dir / "stderr.txt";
  const std::string cmd = std::string(GSSD_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() +
                          " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(err)};
}

const char *kSpec = "depth = 5\nheight = 64\nwidth = 64\nliver_radii = 2 0.32 0.38\nrandom.count_min = 1\nrandom.count_max = 2\n"
                    "random.radius_min = 6\nrandom.radius_max = 9\nrandom.vendor_bias_max = 10\n";

const char *kConfig = "seed = 2\niterations = 3\nbatch_size = 2\nval_interval = 0\ncheckpoint_interval = 2\n"
                      "model.input_size = 64\nmodel.width_scale = 0.125\n";

} // namespace

TEST_CASE("phantom-gen is byte-identical for the same seed") {
  TempDir dir("cli_gen");
  write_file(dir / "s.spec", kSpec);
  for (const char *out : {"a", "b"})
    REQUIRE(run_cli("phantom-gen --spec " + (dir / "s.spec").string() + " --out " + (dir / out).string() +
                        " --count 2 --seed 5",
                    dir)
                .code == 0);
  for (const char *f : {"manifest.csv", "volume_000.gssdvol", "volume_001.gssdvol", "volume_001.labels"})
    CHECK(read_file(dir.path() / "a" / f) == read_file(dir.path() / "b" / f));
  CHECK(run_cli("phantom-gen --spec " + (dir / "s.spec").string() + " --out " + (dir / "c").string() +
                    " --count 2 --seed 6",
                dir)
            .code == 0);
  CHECK(read_file(dir.path() / "a" / "volume_000.gssdvol") != read_file(dir.path() / "c" / "volume_000.gssdvol"));
}

TEST_CASE("phantom-gen rejects a lesion outside the liver, naming it") {
  TempDir dir("cli_bad");
  write_file(dir / "s.spec", "lesion.0.center = 20 64 64\nlesion.0.radius = 8\nlesion.0.delta = 0 50 0 0\n"
                             "lesion.1.center = 20 3 3\nlesion.1.radius = 8\nlesion.1.delta = 0 50 0 0\n");
  const auto r = run_cli("phantom-gen --spec " + (dir / "s.spec").string() + " --out " + (dir / "o").string(), dir);
  CHECK(r.code == 2);
  CHECK(r.err.find("lesion 1") != std::string::npos);
  CHECK(run_cli("phantom-gen --out x", dir).code == 2);
  CHECK(run_cli("no-such-command", dir).code == 2);
}

TEST_CASE("an empty lesion list gives empty label files") {
  TempDir dir("cli_empty");
  write_file(dir / "s.spec", "depth = 4\nheight = 32\nwidth = 32\n");
  REQUIRE(run_cli("phantom-gen --spec " + (dir / "s.spec").string() + " --out " + (dir / "o").string() +
                      " --seed 1",
                  dir)
              .code == 0);
  CHECK(read_labels(dir.path() / "o" / "volume_000.labels").empty());
}

TEST_CASE("train is reproducible; detect, overlay and resume work end to end") {
  TempDir dir("cli_train");
  write_file(dir / "s.spec", kSpec);
  write_file(dir / "run.conf", kConfig);
  const std::string data = (dir / "data").string();
  REQUIRE(run_cli("phantom-gen --spec " + (dir / "s.spec").string() + " --out " + data + " --count 2 --seed 3", dir)
              .code == 0);
  for (const char *out : {"t1", "t2"})
    REQUIRE(run_cli("train --config " + (dir / "run.conf").string() + " --data " + data + " --out " +
                        (dir / out).string(),
                    dir)
                .code == 0);
  CHECK(read_file(dir.path() / "t1" / "loss.csv") == read_file(dir.path() / "t2" / "loss.csv"));
  CHECK(read_file(dir.path() / "t1" / "final.gssdckpt") == read_file(dir.path() / "t2" / "final.gssdckpt"));

  // resume from the iteration-2 checkpoint reproduces the final weights
  REQUIRE(run_cli("train --config " + (dir / "run.conf").string() + " --data " + data + " --out " +
                      (dir / "t3").string() + " --resume " + (dir.path() / "t1" / "checkpoint_2.gssdckpt").string(),
                  dir)
              .code == 0);
  CHECK(read_file(dir.path() / "t3" / "final.gssdckpt") == read_file(dir.path() / "t1" / "final.gssdckpt"));
  const auto r = run_cli("train --config " + (dir / "run.conf").string() + " --data " + data + " --out " +
                             (dir / "t4").string() + " --seed 9 --resume " +
                             (dir.path() / "t1" / "checkpoint_2.gssdckpt").string(),
                         dir);
  CHECK(r.code == 2);
  CHECK(r.err.find("seed") != std::string::npos);

  const std::string vol = (dir.path() / "data" / "volume_000.gssdvol").string();
  const std::string ckpt = (dir.path() / "t1" / "final.gssdckpt").string();
  REQUIRE(run_cli("detect --checkpoint " + ckpt + " --volume " + vol + " --out " + (dir / "d.csv").string(), dir)
              .code == 0);
  CHECK_NOTHROW(read_detections(dir / "d.csv"));
  CHECK(run_cli("detect --checkpoint " + (dir / "nope").string() + " --volume " + vol + " --out x", dir).code == 1);
  CHECK(run_cli("benchmark --checkpoint " + ckpt + " --volume " + vol + " --runs 3", dir).code == 0);
  CHECK(read_file(dir / "stdout.txt").find("identical_outputs yes") != std::string::npos);
}

TEST_CASE("overlay with no detections shows only ground truth") {
  TempDir dir("cli_overlay");
  write_file(dir / "s.spec", "depth = 5\nheight = 64\nwidth = 64\nliver_radii = 2 0.32 0.38\nnoise = 0\nlesion.0.center = 2 30 30\n"
                             "lesion.0.radius = 8\nlesion.0.delta = 0 80 60 40\n");
  REQUIRE(run_cli("phantom-gen --spec " + (dir / "s.spec").string() + " --out " + (dir / "o").string() +
                      " --seed 1",
                  dir)
              .code == 0);
  write_detections(dir / "empty.csv", {});
  REQUIRE(run_cli("overlay --volume " + (dir.path() / "o" / "volume_000.gssdvol").string() + " --detections " +
                      (dir / "empty.csv").string() + " --labels " +
                      (dir.path() / "o" / "volume_000.labels").string() + " --out " + (dir / "png").string(),
                  dir)
              .code == 0);
  const std::string ppm = read_file(dir.path() / "png" / "slice_002.ppm");
  REQUIRE(ppm.rfind("P6\n64 64\n255\n", 0) == 0);
  const std::string pixels = ppm.substr(std::string("P6\n64 64\n255\n").size());
  REQUIRE(pixels.size() == 64 * 64 * 3);
  int yellow = 0, red = 0;
  for (std::size_t i = 0; i < pixels.size(); i += 3) {
    const auto r = static_cast<unsigned char>(pixels[i]), g = static_cast<unsigned char>(pixels[i + 1]),
               b = static_cast<unsigned char>(pixels[i + 2]);
    yellow += r == 255 && g == 255 && b == 0;
    red += r == 255 && g == 0 && b == 0;
  }
  CHECK(yellow > 0);
  CHECK(red == 0);
}
