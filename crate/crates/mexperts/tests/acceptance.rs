//! Release checklist. Each test covers one shipping criterion and prints a
//! single pass line, so `cargo test --test acceptance -- --nocapture` reads
//! off the whole list.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use mexperts::data::{read_band_csv, synthetic_dataset, write_band_csv, ExperimentConfig};
use mexperts::ftpl::{best_response, DeviationContext, FtplState};
use mexperts::losses::{quadratic_loss, utility, ExpertSet, LossMatrix, UtilityKind};
use mexperts::noise::{NoiseKind, NoiseModel};
use mexperts::odg::{instance_loss_rows, OdgState};
use mexperts::sim::{
    audit_odg_instance, audit_wsu, brute_force_opt, run_experiment, AgentPolicy, AlgorithmSpec,
    Environment, SimConfig,
};
use mexperts::wsu::{
    adaptive_regret_bound, default_eta, wswm_payment, MetaWsu, SubsetIndex, WeightVector,
};
use mexperts::Error;

#[test]
fn criterion_1_budget_balance() {
    let mut rng = StdRng::seed_from_u64(101);
    for trial in 0..10_000 {
        let k = rng.random_range(2..=8);
        let reports: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let mut wagers: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = wagers.iter().sum();
        for w in &mut wagers {
            *w /= total;
        }
        let payments = wswm_payment(&reports, &wagers, rng.random::<bool>()).unwrap();
        let paid: f64 = payments.iter().sum();
        assert!(
            (paid - 1.0).abs() <= 1e-12,
            "trial {trial}: payments sum to {paid}, wagers to 1"
        );
        assert!(
            payments.iter().all(|&p| p >= 0.0),
            "trial {trial}: negative payment in {payments:?}"
        );
    }
    println!("criterion 1 (budget balance): PASS");
}

#[test]
fn criterion_2_weight_update_incentives() {
    let mut rng = StdRng::seed_from_u64(202);
    let grid_step = 1e-3;
    for trial in 0..100 {
        let k = if rng.random::<bool>() { 3 } else { 10 };
        let rounds = rng.random_range(1..=50);
        let eta = rng.random_range(0.05..=0.5);
        let mut weights = WeightVector::uniform(k, eta).unwrap();
        for _ in 0..rounds {
            let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            weights.update(&row).unwrap();
            let sum: f64 = weights.weights().iter().sum();
            assert!(
                (sum - 1.0).abs() <= 1e-12,
                "trial {trial}: weights sum to {sum}"
            );
        }
        let expert = rng.random_range(0..k);
        let belief = rng.random::<f64>();
        let reports: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let audit = audit_wsu(&weights, expert, belief, &reports, grid_step).unwrap();
        assert!(
            audit.deviation <= grid_step + 1e-12,
            "trial {trial}: argmax {} strays from belief {belief}",
            audit.argmax_report
        );
    }
    println!("criterion 2 (weight update incentives): PASS");
}

#[test]
fn criterion_3_hazard_bounds() {
    let grid: Vec<f64> = (0..=40_000).map(|i| -20.0 + i as f64 * 1e-3).collect();
    for kind in [NoiseKind::Laplace, NoiseKind::Hyperbolic, NoiseKind::Gumbel] {
        let model = NoiseModel::new(kind);
        let hazards = model.hazard_on_grid(&grid).unwrap();
        let max = hazards.iter().fold(0.0f64, |a, &b| a.max(b));
        assert!(
            hazards.iter().all(|h| h.is_finite()),
            "{kind}: non-finite hazard"
        );
        assert!(max <= 1.0 + 1e-6, "{kind}: max hazard {max}");
    }
    // The Gumbel hazard just stayed below one, yet its potential slope blows
    // up on the left tail: a bounded hazard rate does not give a bounded
    // potential slope.
    let neg: Vec<f64> = (0..=10_000).map(|i| -10.0 + i as f64 * 1e-3).collect();
    let report = NoiseModel::new(NoiseKind::Gumbel).check_condition1(&neg);
    assert!(
        report.max_abs_nu_prime > 1e3,
        "gumbel max |nu'| only {}",
        report.max_abs_nu_prime
    );
    println!("criterion 3 (hazard bounds): PASS");
}

#[test]
fn criterion_4_report_deviation_bound() {
    let eta = 10.0;
    let bound = 0.25; // 2B / (eta - 2B) with B = 1
    for kind in [NoiseKind::Laplace, NoiseKind::Hyperbolic] {
        let model = NoiseModel::new(kind);
        let mut worst = 0.0f64;
        for bi in 1..=99 {
            let belief = bi as f64 / 100.0;
            for li in 0..=40 {
                let gap = -5.0 + 0.25 * li as f64;
                for xi in 0..=8 {
                    let dx = -1.0 + 0.25 * xi as f64;
                    let ctx = DeviationContext::new(gap, 0.0, dx).unwrap();
                    let p = best_response(&ctx, belief, &model, eta).unwrap();
                    worst = worst.max((p - belief).abs());
                }
            }
        }
        assert!(worst <= bound + 1e-9, "{kind}: worst deviation {worst}");
    }

    // Gaussian noise has no potential-slope bound. Inside the window above
    // its best response still happens to stay within 0.25 (deviations only
    // reach about 0.02), so the contrast needs larger leader gaps: by a gap
    // of 100 the optimal report moves more than 0.25 from the belief.
    let gauss = NoiseModel::new(NoiseKind::Gaussian);
    let mut stated_worst = 0.0f64;
    let mut violations = 0usize;
    for bi in 1..=19 {
        let belief = bi as f64 / 20.0;
        for dx in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            for li in 0..=40 {
                let gap = -5.0 + 0.25 * li as f64;
                let ctx = DeviationContext::new(gap, 0.0, dx).unwrap();
                let p = best_response(&ctx, belief, &gauss, eta).unwrap();
                stated_worst = stated_worst.max((p - belief).abs());
            }
            for gap in [-150.0, -120.0, -100.0, 100.0, 120.0, 150.0] {
                let ctx = DeviationContext::new(gap, 0.0, dx).unwrap();
                if let Ok(p) = best_response(&ctx, belief, &gauss, eta) {
                    if (p - belief).abs() > bound {
                        violations += 1;
                    }
                } else {
                    violations += 1;
                }
            }
        }
    }
    assert!(
        stated_worst < bound,
        "gaussian already violates inside the small window: {stated_worst}"
    );
    assert!(violations > 0, "gaussian never broke the {bound} bound");
    println!("criterion 4 (report deviation bound): PASS");
}

#[test]
fn criterion_5_perturbed_selection_oracle() {
    let mut rng = StdRng::seed_from_u64(505);
    let (k, m) = (10, 3);
    let model = NoiseModel::new(NoiseKind::Laplace);
    let index = SubsetIndex::new(k, m).unwrap();
    for trial in 0..1_000 {
        let cumulative: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..30.0)).collect();
        let eta = rng.random_range(1.5..5.0);
        let gamma: Vec<f64> = (0..k).map(|_| model.sample(&mut rng)).collect();
        let state = FtplState::with_cumulative(cumulative.clone(), m, eta, model).unwrap();
        let picked = state.select_with_perturbations(&gamma);

        let score = |i: usize| cumulative[i] + eta * gamma[i];
        let mut best: Option<(f64, Vec<usize>)> = None;
        index.for_each_subset(|_, members| {
            let total: f64 = members.iter().map(|&i| score(i)).sum();
            if best.as_ref().is_none_or(|(b, _)| total < *b) {
                best = Some((total, members.to_vec()));
            }
        });
        let (_, oracle) = best.unwrap();
        assert_eq!(
            picked.members(),
            &oracle[..],
            "trial {trial}: selection disagrees with exhaustive argmin"
        );
    }
    println!("criterion 5 (perturbed selection oracle): PASS");
}

#[test]
fn criterion_6_modular_regret_envelope() {
    let (k, m) = (20, 5);
    let seeds = 20u64;
    let mut prev_rate = f64::INFINITY;
    for horizon in [512usize, 2048, 8192] {
        let env = Environment::iid_uniform(horizon, k).unwrap();
        let mut total = 0.0;
        for seed in 0..seeds {
            let cfg = SimConfig {
                algorithm: AlgorithmSpec::Ftpl {
                    noise: NoiseKind::Laplace,
                    eta: None,
                },
                utility: UtilityKind::Modular { m },
                k,
                m,
                seed: 6_000 + seed,
                policy: AgentPolicy::Truthful,
            };
            total += run_experiment(&cfg, &env).unwrap().final_regret();
        }
        let mean = total / seeds as f64;
        let envelope = 5.0 * (horizon as f64 * (k as f64 / m as f64).ln()).sqrt();
        assert!(
            mean <= envelope,
            "T = {horizon}: mean regret {mean} above {envelope}"
        );
        let rate = mean / horizon as f64;
        assert!(
            rate < prev_rate,
            "T = {horizon}: per-round regret {rate} did not fall below {prev_rate}"
        );
        prev_rate = rate;
    }
    println!("criterion 6 (modular regret envelope): PASS");
}

#[test]
fn criterion_7_submodular_regret_decomposition() {
    let (k, m, horizon) = (8, 3, 512);
    let kind = UtilityKind::Submodular;
    for seed in 0..20u64 {
        let mut rng = StdRng::seed_from_u64(7_000 + seed);
        let mut odg = OdgState::with_default_eta(k, m, kind, horizon).unwrap();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(horizon);
        let mut all_picks: Vec<Vec<usize>> = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let beliefs: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let mean = beliefs.iter().sum::<f64>() / k as f64;
            let outcome = rng.random::<f64>() < mean;
            let row: Vec<f64> = beliefs
                .iter()
                .map(|&b| quadratic_loss(b, outcome).unwrap())
                .collect();
            let picks = odg.select(&mut rng);
            odg.feedback(&row, &picks).unwrap();
            rows.push(row);
            all_picks.push(picks);
        }

        let matrix = LossMatrix::from_rows(rows.clone()).unwrap();
        let (_, opt_total) = brute_force_opt(&matrix, kind, m).unwrap();
        let alpha = mexperts::losses::alpha_for(kind, &matrix).unwrap();
        let algo_total: f64 = rows
            .iter()
            .zip(&all_picks)
            .map(|(row, picks)| {
                utility(kind, &ExpertSet::new(picks.clone()).unwrap(), row)
            })
            .sum();
        let alpha_regret = alpha * opt_total - algo_total;

        // Per-instance regret in the reward each instance was actually fed,
        // against the best fixed candidate for that instance.
        let mut instance_regret_sum = 0.0;
        for i in 0..m {
            let mut fixed = vec![0.0; k];
            let mut realized = 0.0;
            for (row, picks) in rows.iter().zip(&all_picks) {
                let loss_rows = instance_loss_rows(kind, row, picks).unwrap();
                for (v, f) in fixed.iter_mut().enumerate() {
                    *f += 1.0 - loss_rows[i][v];
                }
                realized += 1.0 - loss_rows[i][picks[i]];
            }
            let best = fixed.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            instance_regret_sum += best - realized;
        }
        assert!(
            alpha_regret <= instance_regret_sum + 1e-9,
            "seed {seed}: alpha-regret {alpha_regret} above instance sum {instance_regret_sum}"
        );
    }
    println!("criterion 7 (submodular regret decomposition): PASS");
}

#[test]
fn criterion_8_loss_scaled_bound() {
    let (k, horizon) = (10, 1024);
    let eta = default_eta(k, horizon).unwrap();
    let mut means = [0.0f64; 2];
    for (regime, (lo, hi)) in [(0.6, 1.0), (0.0, 0.2)].into_iter().enumerate() {
        let mut total = 0.0;
        for seed in 0..20u64 {
            let mut rng = StdRng::seed_from_u64(8_000 + 100 * regime as u64 + seed);
            let mut weights = WeightVector::uniform(k, eta).unwrap();
            let mut cumulative = vec![0.0f64; k];
            let mut algo = 0.0;
            for _ in 0..horizon {
                let row: Vec<f64> = (0..k).map(|_| rng.random_range(lo..hi)).collect();
                algo += weights.expected_loss(&row);
                for (c, &l) in cumulative.iter_mut().zip(&row) {
                    *c += l;
                }
                weights.update(&row).unwrap();
            }
            let best = cumulative.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let regret = algo - best;
            let envelope = 3.0 * adaptive_regret_bound(algo.max(best), k);
            assert!(
                regret <= envelope,
                "seed {seed} losses in [{lo}, {hi}]: regret {regret} above {envelope}"
            );
            total += regret;
        }
        means[regime] = total / 20.0;
    }
    assert!(
        means[1] < means[0],
        "sparse-loss mean regret {} not below dense {}",
        means[1],
        means[0]
    );
    println!("criterion 8 (loss-scaled bound): PASS");
}

#[test]
fn criterion_9_instance_loss_linearity() {
    let mut rng = StdRng::seed_from_u64(909);
    for trial in 0..100 {
        let k = rng.random_range(4..=8);
        let m = rng.random_range(2..=3.min(k));
        let mut row: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..0.95)).collect();
        let mut pool: Vec<usize> = (0..k).collect();
        let picks: Vec<usize> = (0..m)
            .map(|_| pool.swap_remove(rng.random_range(0..pool.len())))
            .collect();
        let instance = rng.random_range(0..m);
        let expert = rng.random_range(0..k);

        let probes = [0.1, 0.45, 0.8];
        let mut values = [0.0f64; 3];
        for (slot, &x) in values.iter_mut().zip(&probes) {
            row[expert] = x;
            let loss_rows = instance_loss_rows(UtilityKind::Submodular, &row, &picks).unwrap();
            *slot = loss_rows[instance][expert];
        }
        let slope_ab = (values[1] - values[0]) / (probes[1] - probes[0]);
        let slope_ac = (values[2] - values[0]) / (probes[2] - probes[0]);
        assert!(
            (slope_ab - slope_ac).abs() <= 1e-12,
            "trial {trial}: instance loss bends, slopes {slope_ab} vs {slope_ac}"
        );
    }

    // With a modular objective the slope is outcome-independent, so the
    // audit of a single instance's weights lands on the belief.
    let (k, m) = (6, 3);
    let kind = UtilityKind::Modular { m };
    for trial in 0..20 {
        let mut rng = StdRng::seed_from_u64(910 + trial);
        let mut odg = OdgState::with_default_eta(k, m, kind, 256).unwrap();
        for _ in 0..10 {
            let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let picks = odg.select(&mut rng);
            odg.feedback(&row, &picks).unwrap();
        }
        let picks = odg.select(&mut rng);
        let instance = rng.random_range(0..m);
        let expert = rng.random_range(0..k);
        let belief = rng.random::<f64>();
        let reports: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let audit =
            audit_odg_instance(&odg, instance, &picks, expert, belief, &reports, 1e-3).unwrap();
        assert!(
            audit.deviation <= 1e-3 + 1e-12,
            "trial {trial}: instance {instance} argmax {} vs belief {belief}",
            audit.argmax_report
        );
    }
    println!("criterion 9 (instance-loss linearity): PASS");
}

#[test]
fn criterion_10_forecast_pipeline() {
    let dataset = synthetic_dataset(284, 274, 10, 29).unwrap();
    for k in [20usize, 100] {
        let cfg = ExperimentConfig {
            k,
            m: 5,
            groups: 5,
            runs: 10,
            seed: 11,
            ..ExperimentConfig::default()
        };
        let outcome = mexperts::data::run_nfl_experiment(&cfg, &dataset).unwrap();
        for (name, result) in [("ftpl", &outcome.ftpl), ("odg", &outcome.odg)] {
            for (g, series) in result.group_means.iter().enumerate() {
                assert_eq!(series.len(), 284);
                for (i, &v) in series.iter().enumerate().skip(27) {
                    assert!(
                        v > 0.0 && v <= 1.0,
                        "K = {k} {name} group {g}: mean average regret {v} at t = {} \
                         outside (0, 1]",
                        i + 1
                    );
                }
                assert!(
                    series[283] < series[27],
                    "K = {k} {name} group {g}: no improvement from t = 28 ({}) to \
                     t = 284 ({})",
                    series[27],
                    series[283]
                );
            }
            let mut buf = Vec::new();
            write_band_csv(&mut buf, &result.bands).unwrap();
            let back = read_band_csv(&buf[..]).unwrap();
            assert_eq!(back.len(), 284);
            for (i, row) in back.iter().enumerate() {
                assert_eq!(row.t, i + 1);
                assert!(row.p20 <= row.p80, "crossed band at t = {}", row.t);
                assert!(row.mean.is_finite());
            }
        }
    }
    println!("criterion 10 (forecast pipeline): PASS");
}

#[test]
fn criterion_11_subset_learner_envelope() {
    let (k, m, horizon) = (5, 2, 4096);
    let env = Environment::iid_uniform(horizon, k).unwrap();
    let mut total = 0.0;
    for seed in 0..20u64 {
        let cfg = SimConfig {
            algorithm: AlgorithmSpec::MetaWsu { eta: None },
            utility: UtilityKind::Modular { m },
            k,
            m,
            seed: 11_000 + seed,
            policy: AgentPolicy::Truthful,
        };
        total += run_experiment(&cfg, &env).unwrap().final_regret();
    }
    let mean = total / 20.0;
    let envelope = 3.0
        * (m as f64 * horizon as f64 * (k as f64 * std::f64::consts::E / m as f64).ln()).sqrt();
    assert!(mean <= envelope, "mean regret {mean} above {envelope}");

    let blowup = SubsetIndex::new(40, 10);
    assert!(
        matches!(blowup, Err(Error::CombinatorialBlowup { .. })),
        "expected a refusal for C(40, 10) subsets"
    );
    let meta = MetaWsu::with_default_eta(40, 10, 100);
    assert!(matches!(meta, Err(Error::CombinatorialBlowup { .. })));
    println!("criterion 11 (subset learner envelope): PASS");
}
