#include <sstream>

#include "doctest.h"
#include "gte/config.hpp"

using namespace gte;

TEST_SUITE_BEGIN("config");

TEST_CASE("parse and round trip") {
  std::istringstream in(
      "# comment\n"
      "epochs = 5\n"
      "hidden_dim=32\n"
      "strategy = elastic\n"
      "\n"
      "lr_start = 0.01\n");
  RunConfig cfg = parse_config(in);
  CHECK(cfg.get_int("epochs", 0) == 5);
  CHECK(cfg.get_int("hidden_dim", 0) == 32);
  CHECK(cfg.get_str("strategy", "") == "elastic");
  CHECK(cfg.get_real("lr_start", 0) == doctest::Approx(0.01));

  std::string text = serialize_config(cfg);
  std::istringstream again(text);
  RunConfig back = parse_config(again);
  CHECK(back.values == cfg.values);
}

TEST_CASE("malformed lines and values") {
  std::istringstream in("this is not a pair\n");
  CHECK_THROWS_AS(parse_config(in), ConfigError);

  RunConfig cfg;
  cfg.set("epochs", "five");
  CHECK_THROWS_AS(cfg.get_int("epochs", 0), ConfigError);
  cfg.set("lr_start", "fast");
  CHECK_THROWS_AS(cfg.get_real("lr_start", 0), ConfigError);
  cfg.set("auto_tune", "maybe");
  CHECK_THROWS_AS(cfg.get_bool("auto_tune", true), ConfigError);
}

TEST_CASE("unknown keys are rejected by name") {
  RunConfig cfg;
  cfg.set("epochs", "3");
  cfg.set("warp_speed", "9");
  CHECK_THROWS_WITH_AS(validate_keys(cfg, "train"), doctest::Contains("warp_speed"), ConfigError);

  RunConfig ok;
  ok.set("epochs", "3");
  ok.set("strategy", "none");
  CHECK_NOTHROW(validate_keys(ok, "train"));

  // bench-only keys pass for bench, fail for train.
  RunConfig bench;
  bench.set("bench_seq_lens", "64,128");
  CHECK_NOTHROW(validate_keys(bench, "bench"));
  CHECK_THROWS_AS(validate_keys(bench, "train"), ConfigError);
}

TEST_CASE("to_train_config validation") {
  RunConfig cfg;
  cfg.set("workers", "3");
  cfg.set("heads", "8");
  CHECK_THROWS_AS(to_train_config(cfg), ConfigError);

  RunConfig ok;
  ok.set("workers", "2");
  ok.set("heads", "8");
  ok.set("hidden_dim", "64");
  ok.set("strategy", "indolent");
  ok.set("db_profile", "8:1.5,16:2.0");
  TrainConfig tc = to_train_config(ok);
  CHECK(tc.workers == 2);
  CHECK(tc.strategy == Strategy::Indolent);
  CHECK(tc.db_profile.at(16) == doctest::Approx(2.0));

  RunConfig bad_div;
  bad_div.set("heads", "3");
  bad_div.set("hidden_dim", "8");
  CHECK_THROWS_AS(to_train_config(bad_div), ConfigError);

  RunConfig bad_strat;
  bad_strat.set("strategy", "lazy");
  CHECK_THROWS_AS(to_train_config(bad_strat), ConfigError);
}

TEST_CASE("sbm dataset from config") {
  RunConfig cfg;
  cfg.set("dataset", "sbm");
  cfg.set("sbm_nodes", "24");
  cfg.set("sbm_blocks", "3");
  cfg.set("sbm_p_in", "0.8");
  cfg.set("sbm_p_out", "0.05");
  cfg.set("seed", "5");
  Dataset ds = load_dataset(cfg);
  REQUIRE(ds.graphs.size() == 1);
  CHECK(ds.graphs[0].num_nodes == 24);
  CHECK(ds.graphs[0].labels.size() == 24);

  RunConfig missing;
  missing.set("dataset", "file");
  CHECK_THROWS_AS(load_dataset(missing), ConfigError);
  missing.set("edge_list", "/nonexistent/path.edges");
  CHECK_THROWS_AS(load_dataset(missing), DataError);
}

TEST_SUITE_END();
