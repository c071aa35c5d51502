#include <gtest/gtest.h>

#include <cmath>

#include "common.hpp"

using namespace pden;
using pden::test::quick_config;
using pden::test::same_params;
using pden::test::small_arch;
using pden::test::toy;

namespace {

/// A synthetic domain whose images are the source images scaled by `f`.
SyntheticDomain scaled(const DomainDataset& src, double f, std::size_t k) {
  DomainDataset d = src;
  for (auto& v : d.images.data()) v *= f;
  d.name = "scaled-" + std::to_string(k);
  Rng r(k);
  return {d, Generator(small_arch(src.classes), r), k};
}

}  // namespace

// -------------------------------------------------------------------- sampling

TEST(PairSampler, PositivesAreAlignedCounterparts) {
  auto src = toy(4, 40, 1);
  DomainPool pool{src, {}};
  pool.add(scaled(src, 0.5, 1));
  pool.add(scaled(src, 0.25, 2));
  Rng r(3);
  std::vector<std::size_t> doms;
  auto b = pair_sampler(pool, 64, r, &doms);
  ASSERT_EQ(b.y.size(), 64u);
  ASSERT_EQ(doms.size(), 64u);
  const std::size_t per = 16 * 16;
  const double factor[2] = {0.5, 0.25};
  for (std::size_t i = 0; i < 64; ++i) {
    for (std::size_t p = 0; p < per; ++p)
      ASSERT_DOUBLE_EQ(b.x_plus[i * per + p], b.x[i * per + p] * factor[doms[i]]);
    // The anchor is a source image carrying its own label.
    bool found = false;
    for (std::size_t j = 0; j < src.size() && !found; ++j) {
      found = src.labels[j] == b.y[i] &&
              std::equal(b.x.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                         b.x.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per),
                         src.images.data().begin() + static_cast<std::ptrdiff_t>(j * per));
    }
    EXPECT_TRUE(found) << i;
  }
}

TEST(PairSampler, SingleDomainSuppliesAllPositives) {
  auto src = toy(3, 12, 2);
  DomainPool pool{src, {}};
  pool.add(scaled(src, 0.5, 1));
  Rng r(4);
  std::vector<std::size_t> doms;
  pair_sampler(pool, 100, r, &doms);
  for (auto d : doms) EXPECT_EQ(d, 0u);
}

TEST(PairSampler, UniformOverFourDomains) {
  auto src = toy(2, 8, 3);
  DomainPool pool{src, {}};
  for (std::size_t k = 1; k <= 4; ++k) pool.add(scaled(src, 1.0 / static_cast<double>(k + 1), k));
  Rng r(5);
  std::vector<std::size_t> doms;
  for (int i = 0; i < 100; ++i) pair_sampler(pool, 100, r, &doms);
  std::vector<double> freq(4, 0.0);
  for (auto d : doms) freq[d] += 1.0 / static_cast<double>(doms.size());
  for (double f : freq) EXPECT_NEAR(f, 0.25, 0.02);
}

TEST(PairSampler, EmptyPoolThrows) {
  auto src = toy(2, 4, 1);
  DomainPool pool{src, {}};
  Rng r(1);
  EXPECT_THROW(pair_sampler(pool, 4, r), std::invalid_argument);
}

TEST(DomainPool, AccumulateOrReplace) {
  auto src = toy(2, 4, 1);
  DomainPool pool{src, {}};
  pool.add(scaled(src, 0.5, 1));
  pool.add(scaled(src, 0.5, 2));
  EXPECT_EQ(pool.size(), 2u);
  pool.add(scaled(src, 0.5, 3), false);
  EXPECT_EQ(pool.size(), 1u);
  auto wrong = scaled(src, 0.5, 4);
  wrong.data.labels[0] = 1 - wrong.data.labels[0];
  EXPECT_THROW(pool.add(wrong), std::invalid_argument);
}

TEST(BatchSampler, EpochCoversEveryIndex) {
  BatchSampler s(10, Rng(1));
  auto idx = s.next(10);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(idx[i], i);
}

// -------------------------------------------------------------------- phases

TEST(Pretrain, SeparableTwoClassSet) {
  auto src = toy(2, 64, 11);
  auto cfg = quick_config(1, 3);
  cfg.T_task = 120;
  cfg.N = 16;
  auto r = pretrain(src, small_arch(2), cfg);
  EXPECT_GE(r.train_accuracy, 0.99);
  double early = 0.0, late = 0.0;
  for (std::size_t i = 0; i < 10; ++i) early += r.losses[i] / 10.0;
  for (std::size_t i = r.losses.size() - 10; i < r.losses.size(); ++i) late += r.losses[i] / 10.0;
  EXPECT_LT(late, early);
}

TEST(Pretrain, Deterministic) {
  auto src = toy(3, 24, 12);
  auto cfg = quick_config();
  auto a = pretrain(src, small_arch(3), cfg), b = pretrain(src, small_arch(3), cfg);
  EXPECT_TRUE(same_params(a.model.params(), b.model.params()));
  cfg.seed += 1;
  auto c = pretrain(src, small_arch(3), cfg);
  EXPECT_FALSE(same_params(a.model.params(), c.model.params()));
}

TEST(Pretrain, EmptyDatasetThrows) {
  DomainDataset empty;
  EXPECT_ANY_THROW(pretrain(empty, small_arch(), quick_config()));
}

TEST(TrainGenerator, SeedsGiveDifferentGenerators) {
  auto src = toy(3, 24, 13);
  auto cfg = quick_config();
  auto m1 = pretrain(src, small_arch(3), cfg).model;
  auto m2 = m1;
  auto g1 = train_generator(m1, src, cfg, 1);
  cfg.seed += 5;
  auto g2 = train_generator(m2, src, cfg, 1);
  auto d1 = materialize_domain(g1.generator, src, 1, 1);
  auto d2 = materialize_domain(g2.generator, src, 1, 1);
  EXPECT_GT(mean_pixel_distance(d1.images, d2.images), 0.0);
  ASSERT_EQ(g1.last.size(), 1u);
  EXPECT_TRUE(std::isfinite(g1.last[0].total.item()));
}

TEST(TrainGenerator, FreshInitPerPhase) {
  auto cfg = quick_config();
  Rng a(derive_seed(cfg.seed, "generator-init", 1)), b(derive_seed(cfg.seed, "generator-init", 2));
  Generator g1(small_arch(), a), g2(small_arch(), b);
  EXPECT_FALSE(same_params(g1.params(), g2.params()));
}

TEST(Materialize, SizeLabelsDeterminism) {
  auto src = toy(4, 300, 14);
  Rng r(1);
  Generator g(small_arch(4), r);
  auto a = materialize_domain(g, src, 99, 2), b = materialize_domain(g, src, 99, 2);
  EXPECT_EQ(a.size(), src.size());
  EXPECT_EQ(a.label_histogram(), src.label_histogram());
  EXPECT_EQ(a.labels, src.labels);
  EXPECT_EQ(a.images.values(), b.images.values());
  EXPECT_NE(a.images.values(), materialize_domain(g, src, 100, 2).images.values());
  EXPECT_EQ(a.provenance.kind, Provenance::Kind::synthetic);
  EXPECT_EQ(a.provenance.k, 2u);
  EXPECT_NO_THROW(a.validate());
}

TEST(Retrain, ReproducibleAndFinite) {
  auto src = toy(3, 24, 15);
  auto cfg = quick_config();
  auto base = pretrain(src, small_arch(3), cfg).model;
  DomainPool pool{src, {}};
  pool.add(scaled(src, 0.5, 1));
  auto m1 = base, m2 = base;
  auto r1 = retrain_task(m1, pool, cfg, 1);
  retrain_task(m2, pool, cfg, 1);
  EXPECT_TRUE(same_params(m1.params(), m2.params()));
  for (double l : r1.losses) EXPECT_TRUE(std::isfinite(l));
  DomainPool empty{src, {}};
  EXPECT_THROW(retrain_task(m1, empty, cfg, 1), std::invalid_argument);
}

// ------------------------------------------------------------------- run_pden

TEST(RunPden, SingleExpansionStructure) {
  auto src = toy(3, 24, 16);
  std::vector<std::string> phases;
  PipelineHooks hooks;
  hooks.on_record = [&](const StepRecord& r) {
    if (phases.empty() || phases.back() != r.phase) phases.push_back(r.phase);
  };
  auto r = run_pden(src, small_arch(3), quick_config(1), &hooks);
  EXPECT_EQ(r.pool.size(), 1u);
  EXPECT_EQ(r.expansions.size(), 1u);
  EXPECT_EQ(phases, (std::vector<std::string>{"pretrain", "generator", "expansion", "retrain"}));
  EXPECT_FALSE(same_params(r.model.params(), r.pretrained.params()));
}

TEST(RunPden, PoolSizeMatchesK) {
  auto src = toy(3, 24, 17);
  auto r = run_pden(src, small_arch(3), quick_config(3));
  EXPECT_EQ(r.pool.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(r.pool.synthetic[k].data.provenance.k, k + 1);
    EXPECT_EQ(r.expansions[k].k, k + 1);
    EXPECT_GT(r.expansions[k].pixel_distance, 0.0);
    EXPECT_GT(r.expansions[k].noise_diversity, 0.0);
  }
  auto cfg = quick_config(3);
  cfg.accumulate = false;
  EXPECT_EQ(run_pden(src, small_arch(3), cfg).pool.size(), 1u);
}

TEST(RunPden, Deterministic) {
  auto src = toy(3, 24, 18);
  auto a = run_pden(src, small_arch(3), quick_config(2));
  auto b = run_pden(src, small_arch(3), quick_config(2));
  EXPECT_TRUE(same_params(a.model.params(), b.model.params()));
  EXPECT_EQ(a.pool.synthetic[1].data.images.values(), b.pool.synthetic[1].data.images.values());
}

TEST(RunPden, ShorterRunIsPrefixOfLonger) {
  auto src = toy(3, 24, 19);
  std::optional<TaskModel> at1;
  PipelineHooks hooks;
  hooks.on_model = [&](std::size_t k, const TaskModel& m) {
    if (k == 1) at1 = m;
  };
  run_pden(src, small_arch(3), quick_config(2), &hooks);
  auto one = run_pden(src, small_arch(3), quick_config(1));
  ASSERT_TRUE(at1.has_value());
  EXPECT_TRUE(same_params(at1->params(), one.model.params()));
}

TEST(RunPden, PhaseCheckpoints) {
  auto dir = pden::test::scratch("pipeline-ckpt");
  auto src = toy(3, 24, 20);
  PipelineHooks hooks;
  hooks.checkpoint_dir = dir;
  auto r = run_pden(src, small_arch(3), quick_config(1), &hooks);
  for (const char* f : {"pretrain-k0.ckpt", "generator-k1.ckpt", "retrain-k1.ckpt"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  auto ck = load_checkpoint(dir / "retrain-k1.ckpt");
  EXPECT_TRUE(same_params(task_model_from(ck).params(), r.model.params()));
  EXPECT_NO_THROW(generator_from(load_checkpoint(dir / "generator-k1.ckpt"), "generator/"));
}

TEST(RunPden, AbortFlushesCheckpoint) {
  auto dir = pden::test::scratch("pipeline-abort");
  auto src = toy(3, 24, 21);
  PipelineHooks hooks;
  hooks.checkpoint_dir = dir;
  hooks.on_domain = [](std::size_t k, const DomainDataset&) {
    if (k == 2) throw TrainingError("stop");
  };
  EXPECT_THROW(run_pden(src, small_arch(3), quick_config(3), &hooks), TrainingError);
  EXPECT_TRUE(std::filesystem::exists(dir / "abort-k2.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "retrain-k1.ckpt"));
  EXPECT_EQ(load_checkpoint(dir / "abort-k2.ckpt").manifest["phase"], "abort");
}

TEST(RunPden, ConfigValidation) {
  auto src = toy(3, 24, 22);
  auto cfg = quick_config();
  cfg.K = 0;
  EXPECT_THROW(run_pden(src, small_arch(3), cfg), std::invalid_argument);
  cfg = quick_config();
  cfg.N = 1;
  EXPECT_THROW(run_pden(src, small_arch(3), cfg), std::invalid_argument);
  cfg = quick_config();
  cfg.weights.w_adv = -0.1;
  EXPECT_THROW(run_pden(src, small_arch(3), cfg), std::invalid_argument);
}

TEST(Logging, CsvRows) {
  StepRecord r{"retrain", 2, 10};
  r.total = 0.5;
  r.source_acc = 0.25;
  EXPECT_EQ(to_csv_row(r), "retrain,2,10,0.5,,,,,,,,0.25,\n");
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(std::stod(format_number(1.0 / 3.0)), 1.0 / 3.0);
  EXPECT_EQ(format_number(NAN), "");
}
