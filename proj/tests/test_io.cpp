// SPDX-License-Identifier: Apache-2.0
#include "gssd/io.hpp"
#include "gssd/run_config.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cstdlib>

using namespace gssd;
using gssd::test::read_file;
using gssd::test::TempDir;
using gssd::test::write_file;

TEST_CASE("volume round trip is bit exact") {
  TempDir dir("vol");
  PhaseVolume pv(4, 3, 5, 7);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(50, 100);
  for (Index i = 0; i < pv.hu.size(); ++i)
    pv.hu[i] = n(rng);
  pv.hu[3] = -0.0f;
  write_volume(dir / "a.gssdvol", pv);
  const auto back = read_volume(dir / "a.gssdvol");
  CHECK(back.phases == 4);
  CHECK(back.depth == 3);
  CHECK(back.height == 5);
  CHECK(back.width == 7);
  CHECK(std::memcmp(back.hu.data(), pv.hu.data(), sizeof(float) * static_cast<std::size_t>(pv.hu.size())) == 0);
}

TEST_CASE("corrupt volumes are rejected") {
  TempDir dir("badvol");
  PhaseVolume pv(1, 2, 2, 2, 1.0f);
  write_volume(dir / "v", pv);
  const std::string good = read_file(dir / "v");
  write_file(dir / "t", good.substr(0, good.size() - 3));
  CHECK_THROWS_WITH_AS(read_volume(dir / "t"), doctest::Contains("truncated"), FormatError);
  write_file(dir / "x", good + "junk");
  CHECK_THROWS_AS(read_volume(dir / "x"), FormatError);
  std::string bad = good;
  bad[0] = 'X';
  write_file(dir / "m", bad);
  CHECK_THROWS_AS(read_volume(dir / "m"), FormatError);
  CHECK_THROWS_AS(read_volume(dir / "missing"), IoError);
}

TEST_CASE("labels round trip and reject malformed lines") {
  TempDir dir("labels");
  const std::vector<WeakLabel> labels{{0, 3, 9, {0.1, 0.2, 0.3, 0.45}, 1}, {2, 0, 0, {1.0 / 3, 0.5, 0.75, 0.9}, 1}};
  write_labels(dir / "l", labels);
  const auto back = read_labels(dir / "l");
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].phase == labels[i].phase);
    CHECK(back[i].z_start == labels[i].z_start);
    CHECK(back[i].z_end == labels[i].z_end);
    CHECK(back[i].box == labels[i].box);
    CHECK(back[i].label == labels[i].label);
  }
  write_labels(dir / "e", {});
  CHECK(read_labels(dir / "e").empty());
  write_file(dir / "bad", "0 1 2 0.1 0.1 0.2\n");
  CHECK_THROWS_WITH_AS(read_labels(dir / "bad"), doctest::Contains(":1"), FormatError);
  write_file(dir / "bad2", "# comment\n0 1 2 0.1 0.1 0.2 zz 1\n");
  CHECK_THROWS_WITH_AS(read_labels(dir / "bad2"), doctest::Contains(":2"), FormatError);
}

TEST_CASE("key=value parsing") {
  const auto kv = KeyValues::parse("# header\n a = 1.5 \nlist = 1, 2 3\nflag = true\n\nname = x y\n", "f.conf");
  CHECK(kv.number("a") == 1.5);
  CHECK(kv.numbers("list") == std::vector<double>{1, 2, 3});
  CHECK(kv.boolean("flag"));
  CHECK(kv.get("name") == "x y");
  CHECK_THROWS_WITH_AS(kv.get("nope"), doctest::Contains("nope"), FormatError);
  CHECK_THROWS_AS(kv.integer("a"), FormatError);
  CHECK_THROWS_WITH_AS(KeyValues::parse("a = 1\na = 2\n", "f.conf"), doctest::Contains("f.conf:2"), FormatError);
  CHECK_THROWS_AS(KeyValues::parse("just words\n"), FormatError);
  CHECK(KeyValues::parse("s = 18446744073709551615").unsigned_integer("s") == 18446744073709551615ull);
  CHECK(KeyValues::parse(kv.serialize()).entries() == kv.entries());
}

TEST_CASE("phantom config: explicit lesions") {
  const auto cfg = parse_phantom_config(KeyValues::parse("depth = 20\nnoise = 0\nlesion.0.center = 10 64 60\n"
                                                         "lesion.0.radius = 9\nlesion.0.delta = 0 50 -40 -30\n"));
  CHECK(cfg.base.depth == 20);
  CHECK(cfg.base.noise_sigma == 0);
  REQUIRE(cfg.base.lesions.size() == 1);
  CHECK(cfg.base.lesions[0].x == 60);
  CHECK(cfg.base.lesions[0].delta[3] == -30);
  CHECK_FALSE(cfg.sampler);
}

TEST_CASE("phantom config errors") {
  CHECK_THROWS_WITH_AS(parse_phantom_config(KeyValues::parse("colour = red\n")), doctest::Contains("colour"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_phantom_config(KeyValues::parse("lesion.0.center = 20 64 64\nlesion.0.radius = 8\n"
                                                             "lesion.0.delta = 0 1 0 0\nlesion.1.center = 20 2 2\n"
                                                             "lesion.1.radius = 8\nlesion.1.delta = 0 1 0 0\n")),
                       doctest::Contains("lesion 1"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_phantom_config(KeyValues::parse("lesion.3.center = 20 64 64\n")),
                       doctest::Contains("lesion 3"), ConfigError);
  CHECK_THROWS_AS(parse_phantom_config(KeyValues::parse("random.count_min = 1\nlesion.0.center = 20 64 64\n"
                                                        "lesion.0.radius = 8\nlesion.0.delta = 0 1 0 0\n")),
                  ConfigError);
  CHECK_THROWS_AS(parse_phantom_config(KeyValues::parse("random.count_min = 4\nrandom.count_max = 2\n")),
                  ConfigError);
}

TEST_CASE("phantom sets are reproducible from the seed") {
  TempDir a("set_a"), b("set_b");
  auto cfg = parse_phantom_config(KeyValues::parse("depth = 8\nheight = 64\nwidth = 64\nrandom.count_min = 1\n"
                                                   "random.count_max = 2\nrandom.radius_min = 5\n"
                                                   "random.radius_max = 8\nrandom.vendor_bias_max = 20\n"));
  const auto ea = write_phantom_set(cfg, 3, 11, a.path());
  const auto eb = write_phantom_set(cfg, 3, 11, b.path());
  REQUIRE(ea.size() == 3);
  for (const char *f : {"manifest.csv", "volume_000.gssdvol", "volume_002.labels"})
    CHECK(read_file(a / f) == read_file(b / f));
  const auto m = read_manifest(a.path());
  REQUIRE(m.size() == 3);
  CHECK(m[1].seed == volume_seed(11, 1));
  CHECK(std::abs(m[1].vendor_bias) <= 20);
  CHECK(m[0].seed != m[1].seed);
  CHECK(read_file(a / "volume_000.gssdvol") != read_file(a / "volume_001.gssdvol"));
}

TEST_CASE("checkpoint round trip with config echo") {
  TempDir dir("ckpt");
  Checkpoint c;
  std::mt19937_64 rng(3);
  c.records.push_back({"w", gssd::test::random_tensor<float>({2, 3}, rng)});
  c.records.push_back({"b", gssd::test::random_tensor<float>({5}, rng)});
  c.config = "seed = 1\nname = caf\xc3\xa9\n";
  write_checkpoint(dir / "c", c);
  CHECK_FALSE(std::filesystem::exists(dir / "c.tmp"));
  const auto back = read_checkpoint(dir / "c");
  CHECK(back.config == c.config);
  REQUIRE(back.records.size() == 2);
  REQUIRE(back.find("w"));
  CHECK((back.find("w")->data() == c.records[0].tensor.data()).all());
  CHECK(back.find("w")->shape() == Shape{2, 3});
  CHECK(back.find("zz") == nullptr);

  const std::string good = read_file(dir / "c");
  write_file(dir / "t", good.substr(0, good.size() / 2));
  CHECK_THROWS_AS(read_checkpoint(dir / "t"), FormatError);
  std::string v = good;
  v[8] = 9;
  write_file(dir / "v", v);
  CHECK_THROWS_WITH_AS(read_checkpoint(dir / "v"), doctest::Contains("version"), FormatError);
}

TEST_CASE("store_model/load_model restore parameters and report mismatches") {
  TempDir dir("model");
  ModelConfig mc;
  mc.input_size = 64;
  mc.width_scale = 0.125;
  std::mt19937_64 a(1), b(2);
  auto m1 = build_model<float>(mc, a);
  auto m2 = build_model<float>(mc, b);
  Checkpoint c;
  store_model(m1, c);
  write_checkpoint(dir / "m", c);
  load_model(read_checkpoint(dir / "m"), m2);
  CHECK(parameter_checksum(m1) == parameter_checksum(m2));
  ModelConfig wide = mc;
  wide.width_scale = 0.25;
  std::mt19937_64 d(1);
  auto m3 = build_model<float>(wide, d);
  CHECK_THROWS_WITH_AS(load_model(c, m3), doctest::Contains("shape"), FormatError);
}

TEST_CASE("run config: defaults, echo round trip, unknown keys") {
  const auto cfg = parse_run_config(KeyValues::parse("seed = 4\niterations = 100\ninput_mode = portal_only\n"
                                                     "model.grouped = false\nmodel.n_fusion_convs = 0\n"));
  CHECK(cfg.train.seed == 4);
  CHECK(cfg.train.iterations == 100);
  CHECK(cfg.train.input_mode == InputMode::PortalOnly);
  CHECK_FALSE(cfg.train.model.grouped);
  CHECK(cfg.train.lr0 == 0.0005);
  CHECK(cfg.train.loss.negatives_per_positive == 3);
  const auto echo = echo_run_config(cfg);
  const auto again = parse_run_config(KeyValues::parse(echo.serialize()));
  CHECK(echo_run_config(again).serialize() == echo.serialize());
  CHECK(config_differences(echo, echo).empty());
  auto other = echo;
  other.set("lr0", "0.001");
  CHECK(config_differences(echo, other) == std::vector<std::string>{"lr0"});
  CHECK_THROWS_WITH_AS(parse_run_config(KeyValues::parse("seed = 1\nlearning_rate = 3\n")),
                       doctest::Contains("learning_rate"), ConfigError);
}

TEST_CASE("seed precedence: command line, environment, file") {
  const auto kv = KeyValues::parse("seed = 5\n");
  const auto none = KeyValues::parse("iterations = 10\n");
  ::unsetenv("GSSD_SEED");
  CHECK(parse_run_config(kv).train.seed == 5);
  CHECK_THROWS_WITH_AS(parse_run_config(none), doctest::Contains("seed"), ConfigError);
  ::setenv("GSSD_SEED", "77", 1);
  CHECK(parse_run_config(kv).train.seed == 77);
  CHECK(parse_run_config(none).train.seed == 77);
  CHECK(parse_run_config(kv, 9).train.seed == 9);
  ::setenv("GSSD_SEED", "abc", 1);
  CHECK_THROWS(parse_run_config(kv));
  ::unsetenv("GSSD_SEED");
}
