#include <cmath>
#include <numeric>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "spear/config.hpp"
#include "spear/env.hpp"
#include "spear/policy.hpp"
#include "spear/trainer.hpp"

using namespace spear;

namespace {

VariantGates drbot_gates() {
  TrainConfig cfg;
  cfg.algorithm = Algorithm::kDrbot;
  return derive_gates(cfg);
}

PolicyParams random_params(int states, int actions, RngStream& rng, double scale = 1.5) {
  PolicyParams p(states, actions);
  for (double& v : p.logits) v = scale * (2.0 * rng.next_double() - 1.0);
  return p;
}

// A synthetic trajectory over random states/actions with behavior log-probs
// taken from a (possibly different) behavior policy.
Trajectory random_traj(int states, int actions, int len, const PolicyParams& behavior,
                       RngStream& rng) {
  Trajectory t;
  for (int i = 0; i < len; ++i) {
    int s = static_cast<int>(rng.next_below(states));
    int a = static_cast<int>(rng.next_below(actions));
    t.turns.push_back({s, a, log_prob(behavior, s, a), true, true});
  }
  t.loss_mask.assign(t.turns.size(), 1);
  return t;
}

}  // namespace

TEST_CASE("importance ratio closed forms and overflow handling") {
  REQUIRE(importance_ratio(-1.0, -1.0) == 1.0);
  REQUIRE(importance_ratio(-1.0 + std::log(1.5), -1.0) == Catch::Approx(1.5).margin(1e-12));
  REQUIRE(importance_ratio(-1.0 - std::log(2.0), -1.0) == Catch::Approx(0.5).margin(1e-12));

  Diagnostics diag;
  double capped = importance_ratio(0.0, -100.0, &diag);
  REQUIRE(capped == kRatioCap);
  REQUIRE(diag.ratio_overflow_count == 1);

  REQUIRE_THROWS_AS(importance_ratio(std::nan(""), -1.0), NumericError);
}

TEST_CASE("clipped surrogate reproduces the hand-computed table") {
  const double lb = 0.2, ub = 0.28, C = 10.0;
  struct Case {
    double r, adv, expect;
  };
  // Spans unclipped / clip-higher / clip-lower / dual-clip-floor regions for
  // both advantage signs.
  const Case table[12] = {
      {1.0, 1.0, 1.0},      // on-policy identity
      {1.5, 1.0, 1.28},     // upper clip engaged
      {0.5, 1.0, 0.5},      // below band, min keeps r*A
      {1.1, 2.0, 2.2},      // inside the band
      {20.0, 1.0, 1.28},    // far above band, positive advantage
      {0.72, 1.5, 1.08},    // just below band, still unclipped
      {1.0, 0.0, 0.0},      // zero advantage
      {0.5, -1.0, -0.8},    // lower clip engaged, floor inactive
      {1.5, -1.0, -1.5},    // negative advantage, ratio branch
      {20.0, -1.0, -10.0},  // dual-clip floor engaged
      {0.05, -2.0, -1.6},   // deep below band, clip branch
      {12.0, -0.5, -5.0},   // floor engaged at C*A = -5
  };
  for (const Case& c : table)
    REQUIRE(clipped_surrogate(c.r, c.adv, lb, ub, C) == Catch::Approx(c.expect).margin(1e-15));

  REQUIRE_THROWS_AS(clipped_surrogate(0.0, 1.0, lb, ub, C), ContractViolation);
}

TEST_CASE("token covariance") {
  SECTION("uniform advantages zero out") {
    std::vector<double> lps{-1.0, -2.0, -0.5};
    std::vector<double> advs{0.5, 0.5, 0.5};
    for (double c : token_covariance(lps, advs)) REQUIRE(c == 0.0);
  }
  SECTION("uniform log-probs zero out") {
    std::vector<double> lps{-1.3, -1.3};
    std::vector<double> advs{1.0, 0.2};
    for (double c : token_covariance(lps, advs)) REQUIRE(c == 0.0);
  }
  SECTION("hand-computed two-token case") {
    std::vector<double> lps{-1.0, -3.0};
    std::vector<double> advs{1.0, 0.2};
    auto cov = token_covariance(lps, advs);
    REQUIRE(cov[0] == Catch::Approx(0.4).margin(1e-15));
    REQUIRE(cov[1] == Catch::Approx(0.4).margin(1e-15));
  }
}

TEST_CASE("clip mask budget and eligibility") {
  // 100 tokens; 30 eligible (covariance inside [1, 40]).
  std::vector<double> cov(100, 0.0);
  for (int i = 0; i < 30; ++i) cov[i * 3] = 1.0 + i;

  SECTION("budget is round(lambda * N) when enough tokens are eligible") {
    RngStream rng(8, {0});
    auto mask = select_clip_mask(cov, 1.0, 40.0, 0.02, rng);
    int masked = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) {
        ++masked;
        REQUIRE(cov[i] >= 1.0);
        REQUIRE(cov[i] <= 40.0);
      }
    }
    REQUIRE(masked == 2);
  }

  SECTION("budget clamps to the eligible count") {
    std::vector<double> sparse(100, 0.0);
    sparse[7] = 5.0;
    RngStream rng(8, {1});
    auto mask = select_clip_mask(sparse, 1.0, 40.0, 0.02, rng);
    int masked = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) masked += mask[i] ? 0 : 1;
    REQUIRE(masked == 1);
    REQUIRE_FALSE(mask[7]);
  }

  SECTION("lambda zero masks nothing") {
    RngStream rng(8, {2});
    auto mask = select_clip_mask(cov, 1.0, 40.0, 0.0, rng);
    for (auto m : mask) REQUIRE(m == 1);
  }

  SECTION("a fixed seed reproduces the mask") {
    RngStream r1(8, {3}), r2(8, {3});
    REQUIRE(select_clip_mask(cov, 1.0, 40.0, 0.1, r1) == select_clip_mask(cov, 1.0, 40.0, 0.1, r2));
  }
}

TEST_CASE("void-turn and over-long filtering") {
  auto make = [](int len, int bad_turn) {
    Trajectory t;
    for (int i = 0; i < len; ++i) {
      bool ok = i != bad_turn;
      t.turns.push_back({0, 0, -1.0, ok, ok});
    }
    return t;
  };

  std::vector<Trajectory> trajs{make(5, 2), make(5, -1), make(8, -1)};
  int masked = filter_void_and_overlong(trajs, 5);
  REQUIRE(masked == 2);
  REQUIRE(trajs[0].fully_masked());       // void turn
  REQUIRE_FALSE(trajs[1].fully_masked()); // exactly at the budget
  REQUIRE(trajs[2].fully_masked());       // over-long
}

TEST_CASE("low-variance group filter") {
  auto group_with = [](double std_dev, std::uint64_t seed) {
    GroupBatch g;
    g.reward_std = std_dev;
    g.task_seed = seed;
    return g;
  };

  SECTION("bottom quarter by std is dropped") {
    std::vector<GroupBatch> groups{group_with(0.0, 0), group_with(0.5, 1), group_with(1.0, 2),
                                   group_with(0.2, 3)};
    auto retained = filter_low_variance_groups(groups, 0.75);
    REQUIRE(retained == std::vector<int>{1, 2, 3});  // the zero-std group is gone
  }

  SECTION("ties break toward the lower task seed") {
    std::vector<GroupBatch> groups{group_with(0.5, 9), group_with(0.5, 1), group_with(0.5, 4),
                                   group_with(0.5, 7)};
    auto retained = filter_low_variance_groups(groups, 0.75);
    // ceil(0.75 * 4) = 3 kept: seeds 1, 4, 7.
    REQUIRE(retained == std::vector<int>{1, 2, 3});
  }

  SECTION("ratio one keeps everything") {
    std::vector<GroupBatch> groups{group_with(0.0, 0), group_with(1.0, 1)};
    REQUIRE(filter_low_variance_groups(groups, 1.0) == std::vector<int>{0, 1});
  }
}

TEST_CASE("objective value and gradient in the on-policy identity case") {
  // r = 1 everywhere, advantage 1: the loss equals the token count and the
  // gradient equals the summed score function.
  PolicyParams params(3, 4);
  RngStream rng(21, {0});
  for (double& v : params.logits) v = rng.next_double() - 0.5;

  Trajectory traj;
  for (int i = 0; i < 5; ++i) {
    int s = i % 3, a = (i * 2 + 1) % 4;
    traj.turns.push_back({s, a, log_prob(params, s, a), true, true});
  }
  traj.loss_mask.assign(5, 1);
  std::vector<UpdateItem> items{{traj.turns, traj.loss_mask, 1.0}};

  ObjectiveEval eval = evaluate_objective(items, params, drbot_gates(), 10.0, {}, nullptr);
  REQUIRE(eval.value == Catch::Approx(5.0).margin(1e-12));

  std::vector<double> expected(params.logits.size(), 0.0);
  for (const Turn& t : traj.turns) {
    auto g = grad_log_prob(params, t.state_index, t.action_index);
    for (int b = 0; b < 4; ++b) expected[t.state_index * 4 + b] += g[b];
  }
  for (std::size_t k = 0; k < expected.size(); ++k)
    REQUIRE(eval.gradient[k] == Catch::Approx(expected[k]).margin(1e-12));
}

TEST_CASE("zero advantages give a zero gradient") {
  PolicyParams params(2, 3);
  RngStream rng(22, {0});
  Trajectory traj = random_traj(2, 3, 4, params, rng);
  std::vector<UpdateItem> items{{traj.turns, traj.loss_mask, 0.0}};
  ObjectiveEval eval = evaluate_objective(items, params, drbot_gates(), 10.0, {}, nullptr);
  for (double g : eval.gradient) REQUIRE(g == 0.0);
  REQUIRE(eval.value == 0.0);
}

TEST_CASE("objective gradient matches finite differences") {
  const double h = 1e-5;
  RngStream rng(500, {0});
  const int states = 3, actions = 4;

  auto check_fd = [&](bool sil_style) {
    for (int fixture = 0; fixture < 100; ++fixture) {
      PolicyParams behavior = random_params(states, actions, rng);
      PolicyParams params = random_params(states, actions, rng);
      std::vector<Trajectory> trajs;
      std::vector<UpdateItem> items;
      trajs.reserve(3);
      for (int i = 0; i < 3; ++i)
        trajs.push_back(random_traj(states, actions, 2 + static_cast<int>(rng.next_below(4)),
                                    behavior, rng));
      std::vector<double> advs;
      for (int i = 0; i < 3; ++i) advs.push_back(4.0 * rng.next_double() - 2.0);
      for (int i = 0; i < 3; ++i) items.push_back({trajs[i].turns, trajs[i].loss_mask, advs[i]});

      std::vector<std::uint8_t> clip_mask;
      if (sil_style) {
        std::size_t tokens = 0;
        for (const auto& t : trajs) tokens += t.turns.size();
        clip_mask.assign(tokens, 1);
        clip_mask[rng.next_below(tokens)] = 0;  // one covariance-masked token
      }

      VariantGates gates = drbot_gates();
      ObjectiveEval eval = evaluate_objective(items, params, gates, 10.0, clip_mask, nullptr);
      for (int s = 0; s < states; ++s) {
        for (int a = 0; a < actions; ++a) {
          std::size_t k = static_cast<std::size_t>(s) * actions + a;
          PolicyParams hi = params, lo = params;
          hi.logits[k] += h;
          lo.logits[k] -= h;
          double fd = (evaluate_objective(items, hi, gates, 10.0, clip_mask, nullptr).value -
                       evaluate_objective(items, lo, gates, 10.0, clip_mask, nullptr).value) /
                      (2.0 * h);
          double scale = std::max({std::abs(fd), std::abs(eval.gradient[k]), 1e-7});
          REQUIRE(std::abs(fd - eval.gradient[k]) / scale < 1e-5);
        }
      }
    }
  };

  SECTION("on-policy objective") { check_fd(false); }
  SECTION("covariance-masked objective") { check_fd(true); }
}

TEST_CASE("sil_update respects the curriculum weight and the clip mask") {
  TrainConfig cfg;
  cfg.algorithm = Algorithm::kSpear;
  VariantGates gates = derive_gates(cfg);
  Diagnostics diag;

  RngStream rng(600, {0});
  PolicyParams behavior = random_params(2, 3, rng);
  std::vector<StoredTrajectory> stored;
  for (int i = 0; i < 4; ++i) {
    Trajectory t = random_traj(2, 3, 3, behavior, rng);
    StoredTrajectory s;
    s.turns = t.turns;
    s.loss_mask = t.loss_mask;
    s.reward_total = 1.0;
    s.adv_at_store = 0.5;
    stored.push_back(s);
  }
  std::vector<RetainedTrajectory> retained;
  for (const auto& s : stored) retained.push_back({&s, 0.8});

  SECTION("gamma zero leaves the parameters bit-identical") {
    PolicyParams params = random_params(2, 3, rng);
    PolicyParams before = params;
    RngStream mask_rng(1, {0});
    UpdateStats stats = sil_update(retained, params, gates, cfg, 0.0, mask_rng, diag);
    REQUIRE(stats.noop);
    REQUIRE(params.logits == before.logits);
  }

  SECTION("an all-masking band leaves the parameters bit-identical") {
    TrainConfig wide = cfg;
    wide.lambda = 1.0;
    wide.omega_lb = -1e9;
    wide.omega_ub = 1e9;
    PolicyParams params = random_params(2, 3, rng);
    PolicyParams before = params;
    RngStream mask_rng(1, {1});
    UpdateStats stats = sil_update(retained, params, derive_gates(wide), wide, 1.0, mask_rng, diag);
    REQUIRE(stats.noop);
    REQUIRE(params.logits == before.logits);
  }

  SECTION("masked tokens contribute a bit-exact zero gradient") {
    // Two items on disjoint states; mask every token of the second one and
    // check its logit rows receive no update.
    PolicyParams params(4, 3);
    StoredTrajectory a, b;
    a.turns = {{0, 1, log_prob(params, 0, 1), true, true},
               {1, 0, log_prob(params, 1, 0), true, true}};
    a.loss_mask = {1, 1};
    a.reward_total = 1.0;
    a.adv_at_store = 0.4;
    b.turns = {{2, 2, log_prob(params, 2, 2), true, true},
               {3, 1, log_prob(params, 3, 1), true, true}};
    b.loss_mask = {0, 0};  // fully loss-masked entry
    b.reward_total = 1.0;
    b.adv_at_store = 0.4;
    std::vector<RetainedTrajectory> two{{&a, 0.7}, {&b, 0.7}};
    RngStream mask_rng(1, {2});
    TrainConfig no_cov = cfg;
    no_cov.lambda = 0.0;
    sil_update(two, params, derive_gates(no_cov), no_cov, 1.0, mask_rng, diag);
    for (int s = 2; s < 4; ++s)
      for (int x = 0; x < 3; ++x) REQUIRE(params.row(s)[x] == 0.0);
    bool moved = false;
    for (int s = 0; s < 2; ++s)
      for (int x = 0; x < 3; ++x) moved = moved || params.row(s)[x] != 0.0;
    REQUIRE(moved);
  }
}

TEST_CASE("kl metric") {
  PolicyParams p(2, 4);
  RngStream rng(700, {0});
  std::vector<Trajectory> batch{random_traj(2, 4, 5, p, rng)};

  SECTION("identical parameters give zero") { REQUIRE(kl_metric(p, p, batch) == 0.0); }

  SECTION("non-negative for any pair and matching a direct recomputation") {
    for (int trial = 0; trial < 50; ++trial) {
      PolicyParams cur = random_params(2, 4, rng);
      PolicyParams ref = random_params(2, 4, rng);
      double metric = kl_metric(cur, ref, batch);
      REQUIRE(metric >= 0.0);
      double expect = 0.0;
      int tokens = 0;
      for (const Trajectory& t : batch)
        for (const Turn& turn : t.turns) {
          double d = log_prob(ref, turn.state_index, turn.action_index) -
                     log_prob(cur, turn.state_index, turn.action_index);
          expect += std::exp(d) - d - 1.0;
          ++tokens;
        }
      expect /= tokens;
      REQUIRE(metric == Catch::Approx(expect).margin(1e-12));
    }
  }

  SECTION("empty batch is a contract violation") {
    std::vector<Trajectory> empty;
    REQUIRE_THROWS_AS(kl_metric(p, p, empty), ContractViolation);
  }
}

TEST_CASE("train_step branch semantics and determinism") {
  TrainConfig cfg;
  cfg.algorithm = Algorithm::kSpear;
  cfg.env_name = "calcchain";
  cfg.train_batch_size = 8;
  cfg.n_samples_per_prompt = 4;
  cfg.num_steps = 16;
  cfg.N_D = 2;
  cfg.N_D_R = 32;
  cfg.seed = 11;
  auto env = make_environment(cfg.env_name, cfg.env_max_turns);

  SECTION("fill and SIL branches follow the buffer state") {
    Trainer trainer(*env, cfg);
    bool saw_fill = false, saw_sil = false;
    std::size_t before = 0;
    for (int t = 0; t < 16; ++t) {
      bool was_full = trainer.replay().is_full();
      MetricsRecord rec = trainer.train_step();
      const StepInfo& info = trainer.last_step_info();
      REQUIRE(info.sil_branch == was_full);
      if (info.sil_branch) {
        saw_sil = true;
        REQUIRE(trainer.replay().size() == 0);  // drained
        REQUIRE(rec.replay_fill == 0.0);
      } else {
        saw_fill = true;
        REQUIRE(trainer.replay().size() >= before);
        REQUIRE(trainer.replay().size() <= static_cast<std::size_t>(cfg.N_D));
      }
      before = trainer.replay().size();
    }
    REQUIRE(saw_fill);
    REQUIRE(saw_sil);
  }

  SECTION("two trainers with one seed emit identical records") {
    Trainer a(*env, cfg), b(*env, cfg);
    for (int t = 0; t < 5; ++t) {
      MetricsRecord ra = a.train_step(), rb = b.train_step();
      REQUIRE(ra.step == rb.step);
      REQUIRE(ra.success_rate == rb.success_rate);
      REQUIRE(ra.mean_total_reward == rb.mean_total_reward);
      REQUIRE(ra.entropy == rb.entropy);
      REQUIRE(ra.kl_metric == rb.kl_metric);
      REQUIRE(ra.replay_fill == rb.replay_fill);
      REQUIRE(ra.clipped_token_fraction == rb.clipped_token_fraction);
    }
    REQUIRE(a.params().logits == b.params().logits);
  }

  SECTION("the streamed entropy is recomputable from the logged rollouts") {
    Trainer a(*env, cfg), b(*env, cfg);
    PolicySnapshot snap = snapshot(b.params());
    MetricsRecord rec = a.train_step();
    auto groups = b.rollout_batch(snap, 0, mu_schedule(0, cfg.T_decay));
    double manual = 0.0;
    int n = 0;
    for (const GroupBatch& g : groups)
      for (const Trajectory& traj : g.trajectories) {
        for (const Turn& t : traj.turns) manual -= t.behavior_log_prob;
        ++n;
      }
    manual /= n;
    REQUIRE(rec.entropy == Catch::Approx(manual).margin(1e-12));
  }

  SECTION("grpo variant never exercises replay or covariance clipping") {
    TrainConfig g = cfg;
    g.algorithm = Algorithm::kGrpo;
    Trainer trainer(*env, g);
    for (int t = 0; t < 5; ++t) {
      MetricsRecord rec = trainer.train_step();
      REQUIRE(rec.replay_fill == 0.0);
      REQUIRE(rec.clipped_token_fraction == 0.0);
      REQUIRE(rec.mu_t == 0.0);
      REQUIRE(rec.gamma_t == 0.0);
    }
  }
}

TEST_CASE("excluded trajectories cannot influence the update") {
  // Build two groups by hand: one retained, one dropped by the variance
  // filter. Perturbing the dropped group's gradient-relevant data must leave
  // the post-update parameters bit-identical.
  TrainConfig cfg;
  cfg.algorithm = Algorithm::kDrbot;
  cfg.rollout_filter_ratio = 0.5;
  VariantGates gates = derive_gates(cfg);
  Diagnostics diag;

  auto run_once = [&](double perturbation) {
    PolicyParams params(4, 3);
    RngStream rng(901, {0});
    PolicyParams behavior = random_params(4, 3, rng);

    GroupBatch keep;
    keep.task_seed = 0;
    keep.reward_std = 1.0;
    keep.trajectories.push_back(random_traj(4, 3, 3, behavior, rng));
    keep.advantages = {0.9};

    GroupBatch drop;
    drop.task_seed = 1;
    drop.reward_std = 0.1;
    Trajectory t = random_traj(4, 3, 3, behavior, rng);
    t.turns[0].behavior_log_prob += perturbation;  // gradient-relevant mutation
    drop.trajectories.push_back(t);
    drop.advantages = {0.9 + perturbation};

    std::vector<GroupBatch> groups{keep, drop};
    auto retained = filter_low_variance_groups(groups, cfg.rollout_filter_ratio);
    REQUIRE(retained == std::vector<int>{0});
    std::vector<UpdateItem> items;
    for (int gi : retained)
      items.push_back({groups[gi].trajectories[0].turns, groups[gi].trajectories[0].loss_mask,
                       groups[gi].advantages[0]});
    on_policy_update(items, params, gates, cfg, diag);
    return params.logits;
  };

  REQUIRE(run_once(0.0) == run_once(-0.7));
}
