//! Forecast-data ingestion and the forecast experiment pipeline.
//!
//! The input is a long-format CSV of game forecasts (one row per forecaster
//! per game). After restricting to forecasters with a prediction for every
//! game, the pipeline samples groups of K forecasters, replays the games
//! through the perturbed-leader and distorted-greedy learners, and emits
//! average-regret curves with 20th/80th percentile bands.
//!
//! Average regret at round t is the cumulative 1-regret divided by t, where
//! the benchmark is the best fixed m-set for the first t rounds, so the
//! target tightens as the season unfolds.

use std::io::{Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ftpl::{default_step_size, ic_deviation_bound};
use crate::losses::{quadratic_loss, UtilityKind};
use crate::noise::NoiseKind;
use crate::sim::{
    run_experiment, AgentPolicy, AlgorithmSpec, Environment, RegretTrace, SimConfig,
};

pub const NFL_HEADER: [&str; 5] = [
    "game_id",
    "date",
    "forecaster_id",
    "prob_home_win",
    "home_won",
];

/// One game: an identifier, a sortable date string, and whether the home
/// team won.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Game {
    pub id: String,
    pub date: String,
    pub outcome: bool,
}

/// A panel of win-probability forecasts. Games are ordered by date then id;
/// `predictions[f][g]` is forecaster f's probability for game g, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDataset {
    games: Vec<Game>,
    forecasters: Vec<String>,
    predictions: Vec<Vec<Option<f64>>>,
}

impl ForecastDataset {
    pub fn games(&self) -> &[Game] {
        &self.games
    }

    pub fn forecasters(&self) -> &[String] {
        &self.forecasters
    }

    pub fn horizon(&self) -> usize {
        self.games.len()
    }

    pub fn prediction(&self, forecaster: usize, game: usize) -> Option<f64> {
        self.predictions[forecaster][game]
    }

    pub fn is_complete(&self, forecaster: usize) -> bool {
        self.predictions[forecaster].iter().all(Option::is_some)
    }

    pub fn outcomes(&self) -> Vec<bool> {
        self.games.iter().map(|g| g.outcome).collect()
    }

    /// Restriction to forecasters who predicted every game. Idempotent;
    /// errors if nobody qualifies.
    pub fn filter_complete(&self) -> Result<ForecastDataset> {
        let keep: Vec<usize> = (0..self.forecasters.len())
            .filter(|&f| self.is_complete(f))
            .collect();
        if keep.is_empty() {
            return Err(Error::Data(
                "no forecaster predicted every game".into(),
            ));
        }
        Ok(ForecastDataset {
            games: self.games.clone(),
            forecasters: keep.iter().map(|&f| self.forecasters[f].clone()).collect(),
            predictions: keep.iter().map(|&f| self.predictions[f].clone()).collect(),
        })
    }

    /// Per-round belief rows for the given forecasters, who must all have
    /// full coverage.
    pub fn belief_matrix(&self, members: &[usize]) -> Result<Vec<Vec<f64>>> {
        for &f in members {
            if f >= self.forecasters.len() {
                return Err(Error::Data(format!(
                    "forecaster index {f} out of range for {}",
                    self.forecasters.len()
                )));
            }
            if !self.is_complete(f) {
                return Err(Error::Data(format!(
                    "forecaster '{}' is missing predictions",
                    self.forecasters[f]
                )));
            }
        }
        Ok((0..self.games.len())
            .map(|g| {
                members
                    .iter()
                    .map(|&f| self.predictions[f][g].expect("checked complete"))
                    .collect()
            })
            .collect())
    }

    /// Writes the long-format CSV read by [`ingest_nfl_csv`], one row per
    /// present prediction.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(NFL_HEADER)
            .map_err(|e| Error::Data(format!("csv write failed: {e}")))?;
        for (f, name) in self.forecasters.iter().enumerate() {
            for (g, game) in self.games.iter().enumerate() {
                if let Some(p) = self.predictions[f][g] {
                    wtr.write_record(&[
                        game.id.clone(),
                        game.date.clone(),
                        name.clone(),
                        p.to_string(),
                        if game.outcome { "1" } else { "0" }.to_string(),
                    ])
                    .map_err(|e| Error::Data(format!("csv write failed: {e}")))?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Parses the long-format forecast CSV. Header must be exactly
/// `game_id,date,forecaster_id,prob_home_win,home_won`. Malformed rows are
/// rejected with their line number; conflicting duplicates are errors.
pub fn ingest_nfl_csv<R: Read>(reader: R) -> Result<ForecastDataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("header unreadable: {e}")))?;
    for want in NFL_HEADER {
        if !headers.iter().any(|h| h == want) {
            return Err(Error::Data(format!("missing column '{want}'")));
        }
    }
    if headers.iter().ne(NFL_HEADER.iter().copied()) {
        return Err(Error::Data(format!(
            "unexpected column layout {:?}, expected {:?}",
            headers.iter().collect::<Vec<_>>(),
            NFL_HEADER
        )));
    }
    // game id -> (date, outcome); (forecaster, game) -> probability.
    let mut games: Vec<Game> = Vec::new();
    let mut game_index: std::collections::HashMap<String, usize> = Default::default();
    let mut forecasters: Vec<String> = Vec::new();
    let mut fc_index: std::collections::HashMap<String, usize> = Default::default();
    let mut cells: std::collections::HashMap<(usize, usize), f64> = Default::default();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Data(format!("row unreadable: {e}")))?;
        let line = record
            .position()
            .map(|p| p.line().to_string())
            .unwrap_or_else(|| "?".into());
        if record.len() != NFL_HEADER.len() {
            return Err(Error::Data(format!(
                "line {line}: {} fields, expected {}",
                record.len(),
                NFL_HEADER.len()
            )));
        }
        let (game_id, date, fc, prob_s, won_s) =
            (&record[0], &record[1], &record[2], &record[3], &record[4]);
        if game_id.is_empty() || fc.is_empty() {
            return Err(Error::Data(format!("line {line}: empty identifier")));
        }
        let prob: f64 = prob_s
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: bad probability '{prob_s}'")))?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Data(format!(
                "line {line}: probability {prob} outside [0,1]"
            )));
        }
        let outcome = match won_s {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Data(format!(
                    "line {line}: home_won '{other}' is not 0 or 1"
                )))
            }
        };
        let g = match game_index.get(game_id) {
            Some(&g) => {
                let known = &games[g];
                if known.date != date || known.outcome != outcome {
                    return Err(Error::Data(format!(
                        "line {line}: game '{game_id}' re-declared with a \
                         different date or outcome"
                    )));
                }
                g
            }
            None => {
                let g = games.len();
                games.push(Game {
                    id: game_id.to_string(),
                    date: date.to_string(),
                    outcome,
                });
                game_index.insert(game_id.to_string(), g);
                g
            }
        };
        let f = *fc_index.entry(fc.to_string()).or_insert_with(|| {
            forecasters.push(fc.to_string());
            forecasters.len() - 1
        });
        if cells.insert((f, g), prob).is_some() {
            return Err(Error::Data(format!(
                "line {line}: duplicate prediction by '{fc}' for game '{game_id}'"
            )));
        }
    }
    if games.is_empty() {
        return Err(Error::Data("dataset has no games".into()));
    }
    // Chronological game order, stable forecaster order by id.
    let mut game_order: Vec<usize> = (0..games.len()).collect();
    game_order.sort_by(|&a, &b| {
        (games[a].date.as_str(), games[a].id.as_str())
            .cmp(&(games[b].date.as_str(), games[b].id.as_str()))
    });
    let mut fc_order: Vec<usize> = (0..forecasters.len()).collect();
    fc_order.sort_by(|&a, &b| forecasters[a].cmp(&forecasters[b]));
    let sorted_games: Vec<Game> = game_order.iter().map(|&g| games[g].clone()).collect();
    let sorted_names: Vec<String> = fc_order.iter().map(|&f| forecasters[f].clone()).collect();
    let predictions = fc_order
        .iter()
        .map(|&f| {
            game_order
                .iter()
                .map(|&g| cells.get(&(f, g)).copied())
                .collect()
        })
        .collect();
    Ok(ForecastDataset {
        games: sorted_games,
        forecasters: sorted_names,
        predictions,
    })
}

pub fn load_nfl_csv(path: &Path) -> Result<ForecastDataset> {
    let file = std::fs::File::open(path)?;
    ingest_nfl_csv(file)
}

/// Generates a forecast panel with the season-scale shape: `complete`
/// forecasters covering every game plus `extras` with gaps. Each game has a
/// latent home-win probability q ~ U[0.15, 0.85]; forecaster i reports
/// q + skill_i * z clipped to [0.02, 0.98] with z standard normal and
/// skill_i ~ U[0.05, 0.45], so low-skill forecasters track q closely.
pub fn synthetic_dataset(
    games: usize,
    complete: usize,
    extras: usize,
    seed: u64,
) -> Result<ForecastDataset> {
    if games == 0 || complete == 0 {
        return Err(Error::Config(
            "synthetic dataset needs games and complete forecasters".into(),
        ));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let game_rows: Vec<Game> = (0..games)
        .map(|g| Game {
            id: format!("game{:04}", g + 1),
            date: format!("day{:04}", g + 1),
            outcome: false,
        })
        .collect();
    let mut games_vec = game_rows;
    let q: Vec<f64> = (0..games).map(|_| 0.15 + 0.7 * rng.random::<f64>()).collect();
    for (g, game) in games_vec.iter_mut().enumerate() {
        game.outcome = rng.random::<f64>() < q[g];
    }
    let total = complete + extras;
    let skills: Vec<f64> = (0..total).map(|_| 0.05 + 0.4 * rng.random::<f64>()).collect();
    let mut forecasters = Vec::with_capacity(total);
    let mut predictions = Vec::with_capacity(total);
    for f in 0..total {
        forecasters.push(format!("fc{:04}", f + 1));
        let mut row: Vec<Option<f64>> = (0..games)
            .map(|g| {
                let z: f64 = rng.sample(StandardNormal);
                Some((q[g] + skills[f] * z).clamp(0.02, 0.98))
            })
            .collect();
        if f >= complete {
            // Punch at least one hole so the forecaster fails the
            // coverage filter.
            let holes = 1 + rng.random_range(0..games.max(2) / 2);
            for _ in 0..holes {
                let g = rng.random_range(0..games);
                row[g] = None;
            }
        }
        predictions.push(row);
    }
    Ok(ForecastDataset {
        games: games_vec,
        forecasters,
        predictions,
    })
}

/// Experiment shape for the forecast pipeline; mirrored one-to-one by the
/// TOML config file the CLI accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Forecasters per group.
    pub k: usize,
    /// Experts selected per round.
    pub m: usize,
    /// Number of sampled groups.
    pub groups: usize,
    /// Runs per group per algorithm.
    pub runs: usize,
    /// Base seed; per-run seeds derive from it.
    pub seed: u64,
    /// Rounds to play; defaults to the full dataset.
    pub horizon: Option<usize>,
    /// Perturbation distribution for the perturbed-leader runs.
    pub noise: NoiseKind,
    /// Explicit step sizes; the documented defaults apply when absent.
    pub ftpl_eta: Option<f64>,
    pub odg_eta: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            k: 20,
            m: 5,
            groups: 5,
            runs: 10,
            seed: 17,
            horizon: None,
            noise: NoiseKind::Laplace,
            ftpl_eta: None,
            odg_eta: None,
        }
    }
}

/// One row of the plot-ready percentile summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandRow {
    pub t: usize,
    pub mean: f64,
    pub p20: f64,
    pub p80: f64,
}

pub const BAND_HEADER: [&str; 4] = ["t", "mean", "p20", "p80"];

pub fn write_band_csv<W: Write>(writer: W, rows: &[BandRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(BAND_HEADER)
        .map_err(|e| Error::Data(format!("csv write failed: {e}")))?;
    for r in rows {
        wtr.write_record(&[
            r.t.to_string(),
            r.mean.to_string(),
            r.p20.to_string(),
            r.p80.to_string(),
        ])
        .map_err(|e| Error::Data(format!("csv write failed: {e}")))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_band_csv<R: Read>(reader: R) -> Result<Vec<BandRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("band header unreadable: {e}")))?;
    if headers.iter().ne(BAND_HEADER.iter().copied()) {
        return Err(Error::Data(format!(
            "unexpected band header {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Data(format!("band row unreadable: {e}")))?;
        let parse = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| Error::Data(format!("bad band value '{}'", &record[i])))
        };
        rows.push(BandRow {
            t: record[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad band round '{}'", &record[0])))?,
            mean: parse(1)?,
            p20: parse(2)?,
            p80: parse(3)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("band file has no rows".into()));
    }
    Ok(rows)
}

/// Linear-interpolation percentile of an ascending-sorted slice, q in [0,1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&q));
    debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
}

/// Samples `groups` groups of `k` distinct forecasters from `pool`. Groups
/// are mutually disjoint when the pool is large enough (groups*k <= pool);
/// otherwise each group is an independent without-replacement draw.
pub fn sample_groups<R: Rng + ?Sized>(
    pool: usize,
    k: usize,
    groups: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 || groups == 0 {
        return Err(Error::Config("need a positive group size and count".into()));
    }
    if k > pool {
        return Err(Error::Data(format!(
            "{pool} complete forecasters available, {k} needed per group"
        )));
    }
    let draw = |rng: &mut R, take: usize| -> Vec<usize> {
        let mut ids: Vec<usize> = (0..pool).collect();
        for i in 0..take {
            let j = i + rng.random_range(0..pool - i);
            ids.swap(i, j);
        }
        ids.truncate(take);
        ids
    };
    if groups * k <= pool {
        let all = draw(rng, groups * k);
        Ok(all.chunks(k).map(<[usize]>::to_vec).collect())
    } else {
        Ok((0..groups).map(|_| draw(rng, k)).collect())
    }
}

/// Everything one algorithm produced across the group-by-run matrix.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    /// Traces in (group, run) order.
    pub traces: Vec<RegretTrace>,
    /// Per-group mean average-regret series across runs.
    pub group_means: Vec<Vec<f64>>,
    /// Pooled mean and 20th/80th percentiles across all traces.
    pub bands: Vec<BandRow>,
}

/// Output of the full forecast experiment.
#[derive(Debug, Clone)]
pub struct NflOutcome {
    pub ftpl: ExperimentResult,
    pub odg: ExperimentResult,
    /// Complete-forecaster indices per group.
    pub groups: Vec<Vec<usize>>,
    /// Human-readable record of the definitions and assumptions baked into
    /// the numbers, intended for a run_meta.txt next to the CSV outputs.
    pub meta: String,
}

/// Cumulative utility of the best fixed m-set for each prefix of the season:
/// at round t the benchmark picks the m forecasters with the smallest
/// cumulative loss so far.
fn prefix_opt_series(beliefs: &[Vec<f64>], outcomes: &[bool], m: usize) -> Result<Vec<f64>> {
    let k = beliefs.first().map_or(0, Vec::len);
    let mut cum = vec![0.0f64; k];
    let mut series = Vec::with_capacity(beliefs.len());
    for (t, (row, &out)) in beliefs.iter().zip(outcomes).enumerate() {
        for (c, &b) in cum.iter_mut().zip(row) {
            *c += quadratic_loss(b, out)?;
        }
        let mut sorted = cum.clone();
        sorted.sort_by(f64::total_cmp);
        let best_m: f64 = sorted[..m].iter().sum();
        series.push((t + 1) as f64 - best_m / m as f64);
    }
    Ok(series)
}

fn summarize(
    traces: &[RegretTrace],
    groups: usize,
    runs: usize,
    prefix_opt: &[Vec<f64>],
) -> ExperimentResult {
    let horizon = traces[0].rounds.len();
    let series: Vec<Vec<f64>> = traces
        .iter()
        .enumerate()
        .map(|(i, trace)| {
            let target = &prefix_opt[i / runs];
            trace
                .rounds
                .iter()
                .enumerate()
                .map(|(t, r)| (target[t] - r.cum_util) / (t + 1) as f64)
                .collect()
        })
        .collect();
    let group_means = (0..groups)
        .map(|g| {
            (0..horizon)
                .map(|t| {
                    (0..runs).map(|r| series[g * runs + r][t]).sum::<f64>() / runs as f64
                })
                .collect()
        })
        .collect();
    let bands = (0..horizon)
        .map(|t| {
            let mut vals: Vec<f64> = series.iter().map(|s| s[t]).collect();
            vals.sort_by(f64::total_cmp);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            BandRow {
                t: t + 1,
                mean,
                p20: percentile(&vals, 0.2),
                p80: percentile(&vals, 0.8),
            }
        })
        .collect();
    ExperimentResult {
        traces: traces.to_vec(),
        group_means,
        bands,
    }
}

/// Runs the full forecast experiment: filter to complete forecasters,
/// sample groups, and play every (group, run) pair through the
/// perturbed-leader (beliefs perturbed uniformly within the incentive
/// deviation bound) and the distorted-greedy learner (truthful reports,
/// modular utility).
pub fn run_nfl_experiment(cfg: &ExperimentConfig, data: &ForecastDataset) -> Result<NflOutcome> {
    if cfg.runs == 0 {
        return Err(Error::Config("need at least one run per group".into()));
    }
    if cfg.m == 0 || cfg.m > cfg.k {
        return Err(Error::Config(format!(
            "cannot select m = {} of {} forecasters",
            cfg.m, cfg.k
        )));
    }
    let complete = data.filter_complete()?;
    let horizon = match cfg.horizon {
        Some(h) if h == 0 || h > complete.horizon() => {
            return Err(Error::Config(format!(
                "horizon {h} outside 1..={}",
                complete.horizon()
            )))
        }
        Some(h) => h,
        None => complete.horizon(),
    };
    let pool = complete.forecasters().len();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let groups = sample_groups(pool, cfg.k, cfg.groups, &mut rng)?;

    let noise_model = crate::noise::NoiseModel::new(cfg.noise);
    let b = noise_model.condition1_bound().ok_or_else(|| {
        Error::Config(format!(
            "{} noise has no potential bound; the perturbed-leader default \
             step size is undefined",
            cfg.noise
        ))
    })?;
    let ftpl_eta = match cfg.ftpl_eta {
        Some(e) => e,
        None => default_step_size(b, horizon, cfg.k, cfg.m)?,
    };
    let delta = ic_deviation_bound(b, ftpl_eta)?.min(1.0);

    let outcomes_full = complete.outcomes();
    let mut envs = Vec::with_capacity(groups.len());
    let mut prefix_opt = Vec::with_capacity(groups.len());
    for members in &groups {
        let mut beliefs = complete.belief_matrix(members)?;
        beliefs.truncate(horizon);
        let mut outs = outcomes_full.clone();
        outs.truncate(horizon);
        prefix_opt.push(prefix_opt_series(&beliefs, &outs, cfg.m)?);
        envs.push(Environment::scripted(beliefs, outs)?);
    }

    let mut jobs = Vec::new();
    for g in 0..envs.len() {
        for r in 0..cfg.runs {
            let run_seed = cfg
                .seed
                .wrapping_add(1_000_003u64.wrapping_mul(g as u64))
                .wrapping_add(7919u64.wrapping_mul(r as u64));
            for (offset, algorithm, policy) in [
                (
                    0u64,
                    AlgorithmSpec::Ftpl {
                        noise: cfg.noise,
                        eta: Some(ftpl_eta),
                    },
                    AgentPolicy::UniformPerturbed { delta },
                ),
                (
                    500_009,
                    AlgorithmSpec::Odg { eta: cfg.odg_eta },
                    AgentPolicy::Truthful,
                ),
            ] {
                jobs.push((
                    g,
                    offset,
                    SimConfig {
                        algorithm,
                        utility: UtilityKind::Modular { m: cfg.m },
                        k: cfg.k,
                        m: cfg.m,
                        seed: run_seed.wrapping_add(offset),
                        policy,
                    },
                ));
            }
        }
    }
    let results: Vec<Result<(u64, RegretTrace)>> = jobs
        .par_iter()
        .map(|(g, offset, sim_cfg)| {
            run_experiment(sim_cfg, &envs[*g]).map(|t| (*offset, t))
        })
        .collect();
    let mut ftpl_traces = Vec::new();
    let mut odg_traces = Vec::new();
    for r in results {
        let (offset, trace) = r?;
        if offset == 0 {
            ftpl_traces.push(trace);
        } else {
            odg_traces.push(trace);
        }
    }

    let disjoint = cfg.groups * cfg.k <= pool;
    let meta = format!(
        "forecast experiment\n\
         k = {k}, m = {m}, groups = {groups}, runs per group = {runs}, \
         horizon = {horizon}, base seed = {seed}\n\
         complete forecasters in pool: {pool}\n\
         group sampling: {sampling}\n\
         perturbed leader: {noise} noise, eta = {eta:.6} \
         ({eta_src}), agent reports = belief + U[-{delta:.6}, {delta:.6}] \
         clipped to [0,1], redrawn independently every round (the per-round \
         redraw is an assumption of this pipeline)\n\
         distorted greedy: truthful reports, modular utility, per-instance \
         step size {odg_eta}\n\
         average regret at round t = (best fixed {m}-set's cumulative \
         utility over the first t rounds, minus the algorithm's cumulative \
         utility) / t\n\
         band files: t, mean, 20th and 80th percentile of the average regret \
         across all {total} traces per algorithm\n",
        k = cfg.k,
        m = cfg.m,
        groups = cfg.groups,
        runs = cfg.runs,
        horizon = horizon,
        seed = cfg.seed,
        pool = pool,
        sampling = if disjoint {
            "disjoint (no forecaster in two groups)"
        } else {
            "independent per group (pool too small for disjoint groups)"
        },
        noise = cfg.noise,
        eta = ftpl_eta,
        eta_src = if cfg.ftpl_eta.is_some() {
            "explicit"
        } else {
            "default sqrt(B*T/ln(K/m))"
        },
        delta = delta,
        odg_eta = match cfg.odg_eta {
            Some(e) => format!("{e:.6} (explicit)"),
            None => "default min(1/2, sqrt(ln K / T))".to_string(),
        },
        total = cfg.groups * cfg.runs,
    );

    Ok(NflOutcome {
        ftpl: summarize(&ftpl_traces, cfg.groups, cfg.runs, &prefix_opt),
        odg: summarize(&odg_traces, cfg.groups, cfg.runs, &prefix_opt),
        groups,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "\
game_id,date,forecaster_id,prob_home_win,home_won
g2,2023-09-14,alice,0.7,1
g1,2023-09-07,alice,0.55,0
g3,2023-09-21,alice,0.25,0
g1,2023-09-07,bob,0.6,0
g3,2023-09-21,bob,0.4,0
";

    #[test]
    fn fixture_ingests_sorted_and_filters() {
        let data = ingest_nfl_csv(FIXTURE.as_bytes()).unwrap();
        assert_eq!(data.horizon(), 3);
        let ids: Vec<&str> = data.games().iter().map(|g| g.id.as_str()).collect();
        assert_eq!(ids, ["g1", "g2", "g3"]);
        assert_eq!(data.forecasters(), ["alice", "bob"]);
        assert!(data.is_complete(0));
        assert!(!data.is_complete(1));
        assert_eq!(data.prediction(1, 1), None);
        assert_eq!(data.prediction(0, 1), Some(0.7));
        assert_eq!(data.outcomes(), vec![false, true, false]);

        let complete = data.filter_complete().unwrap();
        assert_eq!(complete.forecasters(), ["alice"]);
        // Idempotent.
        assert_eq!(complete.filter_complete().unwrap(), complete);
    }

    #[test]
    fn ingestion_rejects_malformed_input() {
        let missing_col = "game_id,date,forecaster_id,prob_home_win\ng1,d1,a,0.5\n";
        let err = ingest_nfl_csv(missing_col.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("home_won"), "got: {err}");

        let bad_prob = "game_id,date,forecaster_id,prob_home_win,home_won\n\
                        g1,d1,a,0.5,1\ng2,d2,a,1.7,0\n";
        let err = ingest_nfl_csv(bad_prob.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "got: {err}");

        let not_num = "game_id,date,forecaster_id,prob_home_win,home_won\n\
                       g1,d1,a,maybe,1\n";
        let err = ingest_nfl_csv(not_num.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");

        let bad_outcome = "game_id,date,forecaster_id,prob_home_win,home_won\n\
                           g1,d1,a,0.5,yes\n";
        assert!(ingest_nfl_csv(bad_outcome.as_bytes()).is_err());

        let dup = "game_id,date,forecaster_id,prob_home_win,home_won\n\
                   g1,d1,a,0.5,1\ng1,d1,a,0.6,1\n";
        let err = ingest_nfl_csv(dup.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "got: {err}");

        let conflict = "game_id,date,forecaster_id,prob_home_win,home_won\n\
                        g1,d1,a,0.5,1\ng1,d1,b,0.6,0\n";
        let err = ingest_nfl_csv(conflict.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("re-declared"), "got: {err}");

        let empty = "game_id,date,forecaster_id,prob_home_win,home_won\n";
        assert!(ingest_nfl_csv(empty.as_bytes()).is_err());
    }

    #[test]
    fn no_complete_forecaster_is_an_error() {
        let all_gappy = "game_id,date,forecaster_id,prob_home_win,home_won\n\
                         g1,d1,a,0.5,1\ng2,d2,b,0.6,0\n";
        let data = ingest_nfl_csv(all_gappy.as_bytes()).unwrap();
        assert!(matches!(data.filter_complete(), Err(Error::Data(_))));
    }

    #[test]
    fn csv_round_trips() {
        let data = ingest_nfl_csv(FIXTURE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let again = ingest_nfl_csv(&buf[..]).unwrap();
        assert_eq!(again, data);
    }

    #[test]
    fn synthetic_dataset_has_the_requested_shape() {
        let data = synthetic_dataset(60, 30, 8, 5).unwrap();
        assert_eq!(data.horizon(), 60);
        assert_eq!(data.forecasters().len(), 38);
        let complete = data.filter_complete().unwrap();
        assert_eq!(complete.forecasters().len(), 30);
        assert!(data
            .games()
            .windows(2)
            .all(|w| w[0].date < w[1].date));
        // Deterministic in the seed.
        assert_eq!(synthetic_dataset(60, 30, 8, 5).unwrap(), data);
        assert_ne!(synthetic_dataset(60, 30, 8, 6).unwrap(), data);
        // Probabilities live inside the clip range.
        for f in 0..30 {
            for g in 0..60 {
                let p = complete.prediction(f, g).unwrap();
                assert!((0.02..=0.98).contains(&p));
            }
        }
    }

    #[test]
    fn belief_matrix_requires_complete_members() {
        let data = ingest_nfl_csv(FIXTURE.as_bytes()).unwrap();
        let rows = data.belief_matrix(&[0]).unwrap();
        assert_eq!(rows, vec![vec![0.55], vec![0.7], vec![0.25]]);
        assert!(data.belief_matrix(&[0, 1]).is_err());
        assert!(data.belief_matrix(&[9]).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert!((percentile(&v, 0.2) - 1.6).abs() < 1e-12);
        assert!((percentile(&v, 0.8) - 3.4).abs() < 1e-12);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert_eq!(percentile(&[7.0], 0.5), 7.0);
    }

    #[test]
    fn groups_are_disjoint_when_the_pool_allows() {
        let mut rng = StdRng::seed_from_u64(2);
        let groups = sample_groups(10, 3, 2, &mut rng).unwrap();
        let mut seen = std::collections::HashSet::new();
        for g in &groups {
            assert_eq!(g.len(), 3);
            for &f in g {
                assert!(seen.insert(f), "forecaster {f} in two groups");
            }
        }
        // Oversubscribed: still distinct within each group.
        let groups = sample_groups(10, 8, 3, &mut rng).unwrap();
        for g in &groups {
            let set: std::collections::HashSet<_> = g.iter().collect();
            assert_eq!(set.len(), 8);
        }
        assert!(sample_groups(5, 6, 1, &mut rng).is_err());
    }

    #[test]
    fn config_defaults_match_the_documented_shape() {
        let cfg = ExperimentConfig::default();
        assert_eq!((cfg.k, cfg.m, cfg.groups, cfg.runs), (20, 5, 5, 10));
        assert_eq!(cfg.noise, NoiseKind::Laplace);
        assert!(cfg.ftpl_eta.is_none() && cfg.odg_eta.is_none());
    }

    #[test]
    fn small_experiment_runs_deterministically() {
        let data = synthetic_dataset(40, 12, 2, 9).unwrap();
        let cfg = ExperimentConfig {
            k: 4,
            m: 2,
            groups: 2,
            runs: 2,
            seed: 3,
            ..ExperimentConfig::default()
        };
        let out = run_nfl_experiment(&cfg, &data).unwrap();
        assert_eq!(out.ftpl.traces.len(), 4);
        assert_eq!(out.odg.traces.len(), 4);
        assert_eq!(out.ftpl.bands.len(), 40);
        assert_eq!(out.groups.len(), 2);
        assert_eq!(out.ftpl.group_means.len(), 2);
        assert_eq!(out.ftpl.group_means[0].len(), 40);
        for b in &out.odg.bands {
            assert!(b.p20 <= b.p80 + 1e-12);
        }
        assert!(out.meta.contains("average regret"));
        assert!(out.meta.contains("redrawn"));

        let again = run_nfl_experiment(&cfg, &data).unwrap();
        for (a, b) in out.ftpl.traces.iter().zip(&again.ftpl.traces) {
            assert_eq!(a.rounds, b.rounds);
        }
        for (a, b) in out.odg.traces.iter().zip(&again.odg.traces) {
            assert_eq!(a.rounds, b.rounds);
        }
    }

    #[test]
    fn prefix_opt_series_tracks_the_running_best_set() {
        let beliefs = vec![vec![0.9, 0.1], vec![0.8, 0.4]];
        let outcomes = vec![true, true];
        // Losses: round 1 gives (0.01, 0.81), round 2 gives (0.04, 0.36).
        let single = prefix_opt_series(&beliefs, &outcomes, 1).unwrap();
        assert!((single[0] - (1.0 - 0.01)).abs() < 1e-12);
        assert!((single[1] - (2.0 - 0.05)).abs() < 1e-12);
        let pair = prefix_opt_series(&beliefs, &outcomes, 2).unwrap();
        assert!((pair[0] - (1.0 - 0.82 / 2.0)).abs() < 1e-12);
        assert!((pair[1] - (2.0 - 1.22 / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn band_csv_round_trips() {
        let rows = vec![
            BandRow {
                t: 1,
                mean: 0.25,
                p20: 0.125,
                p80: 0.5,
            },
            BandRow {
                t: 2,
                mean: 0.2,
                p20: 0.1,
                p80: 0.4,
            },
        ];
        let mut buf = Vec::new();
        write_band_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,mean,p20,p80"));
        assert_eq!(read_band_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn experiment_config_validation() {
        let data = synthetic_dataset(20, 6, 0, 1).unwrap();
        let mut cfg = ExperimentConfig {
            k: 4,
            m: 2,
            groups: 1,
            runs: 1,
            seed: 1,
            ..ExperimentConfig::default()
        };
        cfg.horizon = Some(99);
        assert!(run_nfl_experiment(&cfg, &data).is_err());
        cfg.horizon = None;
        cfg.k = 7;
        assert!(run_nfl_experiment(&cfg, &data).is_err());
        cfg.k = 4;
        cfg.m = 5;
        assert!(run_nfl_experiment(&cfg, &data).is_err());
    }
}
