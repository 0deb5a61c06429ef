#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "odesr/adam.hpp"
#include "odesr/checkpoint.hpp"
#include "odesr/dataset.hpp"
#include "odesr/image.hpp"
#include "odesr/metrics.hpp"
#include "odesr/reports.hpp"
#include "odesr/rng.hpp"
#include "odesr/train.hpp"

using namespace odesr;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

std::vector<ImagePair<double>> make_pairs(int n, int hr_size,
                                          std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ImagePair<double>> out;
  for (int i = 0; i < n; ++i) {
    Tensor<double> hr =
        random_uniform<double>(rng, {1, 3, hr_size, hr_size}, 0.02, 0.98);
    out.push_back(make_image_pair(hr, "img" + std::to_string(i)));
  }
  return out;
}

GeneratorConfig small_ode(GradientBackend backend) {
  GeneratorConfig g;
  g.filters = 6;
  g.core = CoreKind::ode;
  g.ode_layers = 2;
  g.time_dependent = true;
  g.augment_channels = 2;
  g.t_final = 1.0;
  g.solver.rtol = 1e-3;
  g.solver.atol = 1e-6;
  g.backend = backend;
  return g;
}

GeneratorConfig small_rrdb(int blocks) {
  GeneratorConfig g;
  g.filters = 6;
  g.core = CoreKind::rrdb;
  g.rrdb_blocks = blocks;
  g.growth = 4;
  return g;
}

std::vector<double> snapshot(const std::vector<Tensor<double>*>& params) {
  std::vector<double> out;
  for (const Tensor<double>* p : params) {
    out.insert(out.end(), p->data(), p->data() + p->size());
  }
  return out;
}

}  // namespace

TEST_CASE("adam: zero gradient is a no-op on parameters") {
  Rng rng(1);
  Tensor<double> a = random_normal<double>(rng, {1, 2, 3, 3}, 1.0);
  Tensor<double> b = random_normal<double>(rng, {1, 4, 1, 1}, 1.0);
  const Tensor<double> a0 = a, b0 = b;
  std::vector<Tensor<double>*> params{&a, &b};
  AdamState<double> st = AdamState<double>::zeros_like(params);
  std::vector<Tensor<double>> grads{Tensor<double>(a.shape()),
                                    Tensor<double>(b.shape())};

  REQUIRE(adam_step(params, grads, st, 1e-2));
  REQUIRE(st.t == 1);
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a.data()[i] == a0.data()[i]);
  for (std::size_t i = 0; i < b.size(); ++i) REQUIRE(b.data()[i] == b0.data()[i]);
  for (const Tensor<double>& m : st.m) {
    for (std::size_t i = 0; i < m.size(); ++i) REQUIRE(m.data()[i] == 0.0);
  }
}

TEST_CASE("adam: first step matches the closed form") {
  // With zero moments, bias correction cancels the (1-beta) factors exactly,
  // so step one is -lr * g / (|g| + eps) regardless of the betas.
  Tensor<double> p(1, 1, 2, 2);
  p.data()[0] = 1.0;
  p.data()[1] = -2.0;
  p.data()[2] = 3.0;
  p.data()[3] = 0.5;
  Tensor<double> g(1, 1, 2, 2);
  g.data()[0] = 0.5;
  g.data()[1] = -0.25;
  g.data()[2] = 1e-3;
  g.data()[3] = 0.0;
  const Tensor<double> p0 = p;
  std::vector<Tensor<double>*> params{&p};
  AdamState<double> st = AdamState<double>::zeros_like(params);
  const double lr = 1e-2;

  REQUIRE(adam_step(params, {g}, st, lr));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g.data()[i];
    const double expect = p0.data()[i] - lr * gi / (std::abs(gi) + 1e-8);
    REQUIRE(p.data()[i] == Catch::Approx(expect).margin(1e-12));
  }
  REQUIRE(p.data()[3] == p0.data()[3]);  // zero gradient moves nothing
}

TEST_CASE("adam: constant gradients settle into fixed-size steps") {
  // A constant gradient keeps m-hat = g and v-hat = g^2 at every step, so
  // each update is lr * g / (|g| + eps): a signed step of size ~lr.
  Tensor<double> p(1, 1, 1, 2);
  Tensor<double> g(1, 1, 1, 2);
  g.data()[0] = 0.3;
  g.data()[1] = -7.0;
  std::vector<Tensor<double>*> params{&p};
  AdamState<double> st = AdamState<double>::zeros_like(params);
  const double lr = 1e-3;
  for (int i = 0; i < 1000; ++i) REQUIRE(adam_step(params, {g}, st, lr));
  REQUIRE(st.t == 1000);
  REQUIRE(p.data()[0] == Catch::Approx(-1000 * lr).epsilon(1e-4));
  REQUIRE(p.data()[1] == Catch::Approx(1000 * lr).epsilon(1e-4));
}

TEST_CASE("adam: a non-finite gradient skips the whole update") {
  Rng rng(2);
  Tensor<double> a = random_normal<double>(rng, {1, 2, 2, 2}, 1.0);
  Tensor<double> b = random_normal<double>(rng, {1, 3, 1, 1}, 1.0);
  std::vector<Tensor<double>*> params{&a, &b};
  AdamState<double> st = AdamState<double>::zeros_like(params);
  std::vector<Tensor<double>> grads{
      random_normal<double>(rng, a.shape(), 1.0),
      random_normal<double>(rng, b.shape(), 1.0)};
  REQUIRE(adam_step(params, grads, st, 1e-3));  // prime non-zero moments

  const std::vector<double> pa = snapshot(params);
  const std::vector<double> ma = snapshot({&st.m[0], &st.m[1]});
  const std::vector<double> va = snapshot({&st.v[0], &st.v[1]});

  for (double bad : {std::numeric_limits<double>::quiet_NaN(),
                     std::numeric_limits<double>::infinity()}) {
    auto poisoned = grads;
    poisoned[1].data()[2] = bad;
    REQUIRE_FALSE(adam_step(params, poisoned, st, 1e-3));
    REQUIRE(st.t == 1);
    REQUIRE(snapshot(params) == pa);
    REQUIRE(snapshot({&st.m[0], &st.m[1]}) == ma);
    REQUIRE(snapshot({&st.v[0], &st.v[1]}) == va);
  }
}

TEST_CASE("adam: mismatched shapes or counts are configuration errors") {
  Tensor<double> a(1, 1, 2, 2);
  std::vector<Tensor<double>*> params{&a};
  AdamState<double> st = AdamState<double>::zeros_like(params);
  REQUIRE_THROWS_AS(adam_step(params, {}, st, 1e-3), config_error);
  std::vector<Tensor<double>> wrong{Tensor<double>(1, 1, 2, 3)};
  REQUIRE_THROWS_AS(adam_step(params, wrong, st, 1e-3), config_error);
}

TEST_CASE("metrics file is byte-stable") {
  REQUIRE(format_sig9(0.0002) == "0.0002");
  REQUIRE(format_sig9(12.3456789012) == "12.3456789");
  REQUIRE(format_sig9(1e-6) == "1e-06");
  REQUIRE(format_sig9(100.0) == "100");

  const std::string dir = temp_dir("odesr_metrics_test");
  const std::string path = dir + "/metrics.csv";
  {
    MetricsWriter w(path);
    w.row(1, "train", 12.3456789012, 7.0, 0.5, 2e-4);
    w.row(1, "val", 13.5, 0.0, 0.0, 2e-4);
  }
  REQUIRE(read_file(path) ==
          "epoch,split,psnr,nfe_mean,nfe_std,lr\n"
          "1,train,12.3456789,7,0.5,0.0002\n"
          "1,val,13.5,0,0,0.0002\n");

  REQUIRE_THROWS_AS(MetricsWriter(dir + "/no/such/dir/m.csv"), io_error);
  fs::remove_all(dir);
}

TEST_CASE("train config round-trips through json and rejects bad values") {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 4;
  c.patience = 2;
  c.lr_decay_factor = 0.25;
  c.min_lr = 1e-5;
  c.max_epochs = 7;
  c.seed = 42;
  c.hr_patch = 32;
  c.stride = 16;
  c.augment = false;
  c.generator = small_ode(GradientBackend::adjoint);

  const json j = train_to_json(c);
  const TrainConfig c2 = train_from_json(j);
  REQUIRE(train_to_json(c2).dump() == j.dump());
  REQUIRE(c2.seed == 42);
  REQUIRE(c2.generator.backend == GradientBackend::adjoint);

  auto expect_reject = [&](auto mutate) {
    json bad = j;
    mutate(bad);
    REQUIRE_THROWS_AS(train_from_json(bad), config_error);
  };
  expect_reject([](json& b) { b["patience"] = 0; });
  expect_reject([](json& b) { b["min_lr"] = b["learning_rate"]; });
  expect_reject([](json& b) { b["lr_decay_factor"] = 1.0; });
  expect_reject([](json& b) { b["hr_patch"] = 13; });
  expect_reject([](json& b) { b["batch_size"] = 0; });
  expect_reject([](json& b) { b["typo_key"] = 1; });
  expect_reject([](json& b) { b["generator"]["typo_key"] = 1; });
}

TEST_CASE("learning-rate controller decays on plateaus and stops at the floor") {
  LrController lrc(1e-3, 2, 0.5, 2e-4);
  REQUIRE_FALSE(lrc.observe(10.0));  // first observation is the best so far
  REQUIRE_FALSE(lrc.observe(11.0));  // improvement
  REQUIRE_FALSE(lrc.observe(10.5));  // bad 1
  REQUIRE(lrc.lr() == 1e-3);
  REQUIRE_FALSE(lrc.observe(10.9));  // bad 2 -> decay
  REQUIRE(lrc.lr() == 1e-3 * 0.5);
  REQUIRE(lrc.bad_epochs() == 0);

  REQUIRE_FALSE(lrc.observe(12.0));  // new best resets the counter
  REQUIRE_FALSE(lrc.observe(11.0));
  REQUIRE_FALSE(lrc.observe(11.0));  // second decay
  REQUIRE(lrc.lr() == 1e-3 * 0.25);

  REQUIRE_FALSE(lrc.observe(5.0));
  // The next decay would land below min_lr, so the controller asks to stop
  // and keeps the current rate.
  REQUIRE(lrc.observe(5.0));
  REQUIRE(lrc.lr() == 1e-3 * 0.25);
  REQUIRE(lrc.best() == 12.0);
}

TEST_CASE("validation reports per-image cost and quality") {
  auto pairs = make_pairs(3, 32, 9);
  REQUIRE(std::isnan(NfeRecord{}.psnr));

  SECTION("a feedforward core performs no solver work") {
    Generator<double> gen(small_rrdb(1));
    Rng rng(4);
    gen.init_params(rng);
    ValidationResult v = validate(gen, pairs);
    REQUIRE(v.records.size() == 3);
    REQUIRE(v.nfe_mean == 0.0);
    REQUIRE(v.nfe_std == 0.0);
    double mean = 0;
    for (std::size_t i = 0; i < v.records.size(); ++i) {
      REQUIRE(v.records[i].scope == "image");
      REQUIRE(v.records[i].id == pairs[i].source_id);
      REQUIRE(v.records[i].nfe == 0);
      REQUIRE(v.records[i].solver_steps == 0);
      REQUIRE(std::isfinite(v.records[i].psnr));
      mean += v.records[i].psnr;
    }
    REQUIRE(v.psnr_mean == Catch::Approx(mean / 3.0).margin(1e-12));
  }

  SECTION("a freshly initialized flow is the identity and solves in one step") {
    // init_params zeroes the last conv of the ODE function, so the field is
    // identically zero: the whole-interval trial step has zero error and is
    // accepted immediately (nfe = 6 * 1 + 1).
    Generator<double> gen(small_ode(GradientBackend::discrete));
    Rng rng(4);
    gen.init_params(rng);
    ValidationResult v = validate(gen, pairs);
    REQUIRE(v.nfe_mean == 7.0);
    REQUIRE(v.nfe_std == 0.0);
    for (const NfeRecord& r : v.records) {
      REQUIRE(r.nfe == 7);
      REQUIRE(r.solver_steps == 1);
    }
  }

  SECTION("an empty image list is a configuration error") {
    Generator<double> gen(small_rrdb(1));
    REQUIRE_THROWS_AS(validate(gen, {}), config_error);
  }
}

TEST_CASE("gradient backends drive the same batch to compatible updates") {
  // Identical initializations, one batch, one step per backend. The forward
  // arithmetic is shared, so the losses must agree bitwise; the two
  // tape-exact backends must land on nearly identical parameters.
  GeneratorConfig base = small_ode(GradientBackend::discrete);
  base.solver.rtol = 1e-6;
  base.solver.atol = 1e-9;

  Rng drng(21);
  const Tensor<double> lr_batch =
      random_uniform<double>(drng, {2, 3, 6, 6}, 0.0, 1.0);
  const Tensor<double> hr_batch =
      random_uniform<double>(drng, {2, 3, 24, 24}, 0.0, 1.0);

  auto run = [&](GradientBackend b) {
    GeneratorConfig cfg = base;
    cfg.backend = b;
    auto gen = std::make_unique<Generator<double>>(cfg);
    Rng rng(7);
    gen->init_params(rng);
    // Wake the flow up: the zero-initialized last conv would make every
    // field gradient trivially zero.
    ConvParams<double>& last = gen->conv("ode.conv1");
    Rng wake(8);
    last.kernel = random_normal<double>(wake, last.kernel.shape(), 0.05);
    AdamState<double> opt = AdamState<double>::zeros_like(gen->parameters());
    StepResult<double> step =
        train_step(*gen, lr_batch, hr_batch, opt, 1e-3);
    return std::make_pair(std::move(gen), step);
  };

  auto [gd, sd] = run(GradientBackend::discrete);
  auto [gc, sc] = run(GradientBackend::checkpointed);
  auto [ga, sa] = run(GradientBackend::adjoint);

  REQUIRE(sd.applied);
  REQUIRE(sc.applied);
  REQUIRE(sa.applied);
  REQUIRE(sd.mse == sc.mse);
  REQUIRE(sd.mse == sa.mse);

  REQUIRE(sd.report.method == "discrete");
  REQUIRE(sc.report.method == "checkpointed");
  REQUIRE(sa.report.method == "adjoint");
  REQUIRE(sd.report.backward_nfe == 0);
  REQUIRE(sc.report.backward_nfe > 0);
  REQUIRE(sc.report.backward_nfe % 6 == 1);  // 6 per replayed step plus one
  REQUIRE(sa.report.backward_nfe >= 7);
  REQUIRE(sd.report.forward_nfe == sc.report.forward_nfe);
  REQUIRE_FALSE(sa.report.diverged);

  const std::vector<double> pd = snapshot(gd->parameters());
  const std::vector<double> pc = snapshot(gc->parameters());
  REQUIRE(pd.size() == pc.size());
  double worst = 0;
  for (std::size_t i = 0; i < pd.size(); ++i) {
    worst = std::max(worst, std::abs(pd[i] - pc[i]));
  }
  REQUIRE(worst < 1e-7);
}

TEST_CASE("a diverged backward pass leaves parameters and moments untouched") {
  Generator<double> gen(small_ode(GradientBackend::adjoint));
  Rng rng(5);
  gen.init_params(rng);
  Rng drng(6);
  const Tensor<double> lr_batch =
      random_uniform<double>(drng, {1, 3, 4, 4}, 0.0, 1.0);
  const Tensor<double> hr_batch =
      random_uniform<double>(drng, {1, 3, 16, 16}, 0.0, 1.0);
  AdamState<double> opt = AdamState<double>::zeros_like(gen.parameters());
  const std::vector<double> before = snapshot(gen.parameters());

  // A one-evaluation budget cannot finish even a single backward step, so
  // the report comes back flagged instead of throwing.
  StepResult<double> step =
      train_step(gen, lr_batch, hr_batch, opt, 1e-3, /*adjoint_budget=*/1);
  REQUIRE_FALSE(step.applied);
  REQUIRE(step.report.diverged);
  REQUIRE(step.report.method == "adjoint");
  REQUIRE(step.report.gradients.empty());
  REQUIRE(snapshot(gen.parameters()) == before);
  REQUIRE(opt.t == 0);
}

TEST_CASE("training writes stable metrics, reports, and checkpoints") {
  const std::string dir = temp_dir("odesr_train_smoke");
  auto pairs = make_pairs(4, 32, 3);
  std::vector<ImagePair<double>> train_pairs(pairs.begin(), pairs.end() - 1);
  std::vector<ImagePair<double>> val_pairs(pairs.end() - 1, pairs.end());

  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 4;
  cfg.patience = 3;
  cfg.min_lr = 1e-5;
  cfg.max_epochs = 2;
  cfg.seed = 11;
  cfg.hr_patch = 16;
  cfg.stride = 16;
  cfg.generator = small_ode(GradientBackend::discrete);

  TrainResult res = train(cfg, train_pairs, val_pairs, dir);
  REQUIRE(res.epochs_run == 2);
  REQUIRE((res.best_epoch == 1 || res.best_epoch == 2));

  // 3 images x 4 patches = 12 patches -> 3 batches of 4 per epoch.
  const auto report_lines = lines_of(read_file(res.reports_path));
  REQUIRE(report_lines.size() == 6);
  for (const std::string& line : report_lines) {
    const json r = json::parse(line);
    REQUIRE(r.at("method") == "discrete");
    REQUIRE(r.at("diverged") == false);
    REQUIRE(r.at("backward_nfe") == 0);
    REQUIRE(r.at("forward_nfe").get<long long>() >= 7);
  }

  const auto rows = lines_of(read_file(res.metrics_path));
  REQUIRE(rows.size() == 5);
  REQUIRE(rows[0] == "epoch,split,psnr,nfe_mean,nfe_std,lr");
  double best_val = -1e300;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = split_csv(rows[i]);
    REQUIRE(f.size() == 6);
    REQUIRE(f[0] == std::to_string((i - 1) / 2 + 1));
    REQUIRE(f[1] == ((i - 1) % 2 == 0 ? "train" : "val"));
    REQUIRE(f[5] == "0.001");  // no decay in two epochs of patience three
    if (f[1] == "val") best_val = std::max(best_val, std::stod(f[2]));
  }
  REQUIRE(format_sig9(res.best_val_psnr) == format_sig9(best_val));

  auto best = load_checkpoint<double>(res.best_ckpt_path);
  REQUIRE(best->config().filters == cfg.generator.filters);
  REQUIRE(best->config().backend == GradientBackend::discrete);
  auto out = best->forward(val_pairs[0].lr);
  REQUIRE(out.sr.shape() == val_pairs[0].hr.shape());
  REQUIRE(fs::exists(res.last_ckpt_path));
  fs::remove_all(dir);
}

TEST_CASE("fixed seeds reproduce the metrics file byte for byte") {
  auto pairs = make_pairs(3, 32, 3);
  std::vector<ImagePair<double>> train_pairs(pairs.begin(), pairs.end() - 1);
  std::vector<ImagePair<double>> val_pairs(pairs.end() - 1, pairs.end());

  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.max_epochs = 1;
  cfg.seed = 77;
  cfg.hr_patch = 16;
  cfg.stride = 16;
  cfg.generator = small_ode(GradientBackend::discrete);

  const std::string da = temp_dir("odesr_det_a");
  const std::string db = temp_dir("odesr_det_b");
  const std::string dc = temp_dir("odesr_det_c");
  train(cfg, train_pairs, val_pairs, da);
  train(cfg, train_pairs, val_pairs, db);
  TrainConfig other = cfg;
  other.seed = 78;
  train(other, train_pairs, val_pairs, dc);

  REQUIRE(read_file(da + "/metrics.csv") == read_file(db + "/metrics.csv"));
  REQUIRE(read_file(da + "/ckpt_last.bin") == read_file(db + "/ckpt_last.bin"));
  REQUIRE(read_file(da + "/metrics.csv") != read_file(dc + "/metrics.csv"));
  fs::remove_all(da);
  fs::remove_all(db);
  fs::remove_all(dc);
}

TEST_CASE("an epoch trained through the adjoint streams adjoint reports") {
  const std::string dir = temp_dir("odesr_train_adjoint");
  auto pairs = make_pairs(3, 32, 13);
  std::vector<ImagePair<double>> train_pairs(pairs.begin(), pairs.end() - 1);
  std::vector<ImagePair<double>> val_pairs(pairs.end() - 1, pairs.end());

  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = 1;
  cfg.seed = 20;
  cfg.hr_patch = 16;
  cfg.stride = 16;
  cfg.generator = small_ode(GradientBackend::adjoint);

  TrainResult res = train(cfg, train_pairs, val_pairs, dir);
  const auto report_lines = lines_of(read_file(res.reports_path));
  REQUIRE(report_lines.size() == 1);
  const json r = json::parse(report_lines[0]);
  REQUIRE(r.at("method") == "adjoint");
  REQUIRE(r.at("diverged") == false);
  REQUIRE(r.at("backward_nfe").get<long long>() >= 7);
  REQUIRE(lines_of(read_file(res.metrics_path)).size() == 3);
  fs::remove_all(dir);
}

TEST_CASE("empty datasets are configuration errors") {
  TrainConfig cfg;
  cfg.hr_patch = 16;
  cfg.generator = small_ode(GradientBackend::discrete);
  auto pairs = make_pairs(1, 32, 2);
  REQUIRE_THROWS_AS(train(cfg, {}, pairs, temp_dir("odesr_empty_a")),
                    config_error);
  REQUIRE_THROWS_AS(train(cfg, pairs, {}, temp_dir("odesr_empty_b")),
                    config_error);
}

TEST_CASE("difficulty buckets follow mode arithmetic") {
  SECTION("three distinct counts split around the mode") {
    const std::vector<std::string> ids{"a", "b", "c", "d", "e", "f"};
    const std::vector<long long> steps{7, 7, 9, 9, 9, 12};
    const std::vector<std::vector<double>> table{
        {20.0, 21.0}, {22.0, 23.0}, {24.0, 25.0},
        {26.0, 27.0}, {28.0, 29.0}, {30.0, 31.0}};
    NfeDifficultyReport rep = bucket_by_steps(ids, steps, table);
    REQUIRE(rep.mode_steps == 9);
    REQUIRE_FALSE(rep.degenerate);
    REQUIRE(rep.rows[0].bucket == "low");
    REQUIRE(rep.rows[2].bucket == "medium");
    REQUIRE(rep.rows[5].bucket == "high");
    REQUIRE(rep.bucket_counts.at("low") == 2);
    REQUIRE(rep.bucket_counts.at("medium") == 3);
    REQUIRE(rep.bucket_counts.at("high") == 1);
    REQUIRE(rep.bucket_mean_psnr.at("low")[0] == Catch::Approx(21.0));
    REQUIRE(rep.bucket_mean_psnr.at("low")[1] == Catch::Approx(22.0));
    REQUIRE(rep.bucket_mean_psnr.at("medium")[0] == Catch::Approx(26.0));
    REQUIRE(rep.bucket_mean_psnr.at("high")[1] == Catch::Approx(31.0));
  }

  SECTION("a tie in frequency resolves to the smaller count") {
    REQUIRE(mode_of({7, 7, 9, 9}) == 7);
    REQUIRE(mode_of({9, 9, 7, 7}) == 7);
    REQUIRE(mode_of({12}) == 12);
  }

  SECTION("fewer than three distinct counts degrade gracefully") {
    NfeDifficultyReport rep = bucket_by_steps(
        {"a", "b", "c"}, {7, 7, 7}, {{1.0}, {2.0}, {3.0}});
    REQUIRE(rep.degenerate);
    REQUIRE_FALSE(rep.warning.empty());
    REQUIRE(rep.bucket_counts.at("medium") == 3);
    REQUIRE(rep.bucket_counts.size() == 1);

    rep = bucket_by_steps({"a", "b", "c"}, {7, 9, 9}, {{1.0}, {2.0}, {3.0}});
    REQUIRE(rep.degenerate);
    REQUIRE(rep.bucket_counts.size() == 2);
  }

  SECTION("shape mistakes are configuration errors") {
    REQUIRE_THROWS_AS(bucket_by_steps({"a"}, {1, 2}, {{1.0}}), config_error);
    REQUIRE_THROWS_AS(bucket_by_steps({}, {}, {}), config_error);
    REQUIRE_THROWS_AS(
        bucket_by_steps({"a", "b"}, {1, 2}, {{1.0}, {1.0, 2.0}}),
        config_error);
  }
}

TEST_CASE("difficulty report measures models and writes the table") {
  const std::string dir = temp_dir("odesr_nfe_report");
  auto pairs = make_pairs(4, 32, 5);

  Generator<double> ode(small_ode(GradientBackend::discrete));
  Generator<double> r1(small_rrdb(1));
  Generator<double> r2(small_rrdb(2));
  Rng rng(6);
  ode.init_params(rng);
  r1.init_params(rng);
  r2.init_params(rng);

  const std::string csv = dir + "/nfe_report.csv";
  NfeDifficultyReport rep =
      nfe_difficulty_report(ode, {&r1, &r2}, pairs, csv);
  REQUIRE(rep.rows.size() == 4);
  // The freshly initialized flow solves every image in one step, so the
  // report collapses to a single bucket and says so.
  REQUIRE(rep.degenerate);
  for (const NfeDifficultyRow& row : rep.rows) {
    REQUIRE(row.steps == 1);
    REQUIRE(row.bucket == "medium");
    REQUIRE(row.psnrs.size() == 2);
  }

  const auto rows = lines_of(read_file(csv));
  REQUIRE(rows.size() == 5);
  REQUIRE(rows[0] == "image_id,steps,bucket,psnr_b1,psnr_b2");
  REQUIRE(split_csv(rows[1])[0] == pairs[0].source_id);

  REQUIRE_THROWS_AS(nfe_difficulty_report(ode, {&r1}, pairs, csv),
                    config_error);
  REQUIRE_THROWS_AS(nfe_difficulty_report(ode, {&r2, &r1}, pairs, csv),
                    config_error);
  REQUIRE_THROWS_AS(nfe_difficulty_report(r1, {&r1, &r2}, pairs, csv),
                    config_error);
  fs::remove_all(dir);
}

TEST_CASE("stability sweep: tape methods stay exact where the adjoint diverges") {
  const std::string dir = temp_dir("odesr_stability");
  std::vector<StabilityScenario> scenarios;
  for (double lambda : {0.0, 10.0, 50.0}) {
    StabilityScenario sc;
    sc.lambda = lambda;
    scenarios.push_back(sc);
  }
  const std::string csv = dir + "/stability.csv";
  StabilityTable table = stability_bench(scenarios, csv);
  REQUIRE(table.rows.size() == 9);

  auto row = [&](double lambda, const std::string& method) -> const StabilityRow& {
    for (const StabilityRow& r : table.rows) {
      if (r.lambda == lambda && r.method == method) return r;
    }
    FAIL("missing row");
    return table.rows[0];
  };

  // Neutral field: nothing moves, nothing diverges, every method matches FD.
  for (const char* m : {"adjoint", "discrete", "checkpointed"}) {
    REQUIRE_FALSE(row(0.0, m).diverged);
    REQUIRE(row(0.0, m).grad_err_vs_fd < 1e-9);
  }

  // Mild contraction: the backward solve is still healthy.
  REQUIRE_FALSE(row(10.0, "adjoint").diverged);
  REQUIRE(row(10.0, "adjoint").backward_nfe >= 7);
  REQUIRE(row(10.0, "adjoint").grad_err_vs_fd < 1e-6);

  // Strong contraction: the adjoint exhausts its backward budget while the
  // tape-based methods keep matching finite differences.
  REQUIRE(row(50.0, "adjoint").diverged);
  REQUIRE(std::isnan(row(50.0, "adjoint").grad_err_vs_fd));
  for (const char* m : {"discrete", "checkpointed"}) {
    for (double lambda : {0.0, 10.0, 50.0}) {
      REQUIRE_FALSE(row(lambda, m).diverged);
      REQUIRE(row(lambda, m).grad_err_vs_fd < 1e-6);
    }
  }
  for (double lambda : {0.0, 10.0, 50.0}) {
    REQUIRE(row(lambda, "discrete").backward_nfe == 0);
  }

  REQUIRE(table.first_adjoint_divergence.at(1e-3) == 50.0);
  REQUIRE(table.summary().find("50") != std::string::npos);
  REQUIRE(table.summary().find("adjoint") != std::string::npos);

  const auto rows = lines_of(read_file(csv));
  REQUIRE(rows.size() == 10);
  REQUIRE(rows[0] ==
          "lambda,rtol,budget,method,backward_nfe,diverged,grad_err_vs_fd");
  REQUIRE(split_csv(rows[1]).size() == 7);
  fs::remove_all(dir);
}
