//! The round loop tying agents, learners, and outcomes together, plus the
//! regret bookkeeping and the incentive auditor.
//!
//! Protocol per round: experts hold beliefs, a reporting policy turns
//! beliefs into reports, the learner selects its m-subset, the outcome is
//! revealed, and the learner is updated with report-based quadratic losses.
//! The trace, however, scores the selected set with losses computed from the
//! true beliefs; regret statements are about what the experts actually knew,
//! not what they chose to say.
//!
//! The auditor asks, for one expert at one frozen point in a run: over a
//! grid of possible reports, which one maximizes the expected probability of
//! being selected next round, with the outcome drawn from the expert's own
//! belief? For the weighted-score family that expectation is a closed form
//! in the updated weights; for the perturbed-leader it is estimated by
//! integrating the expert's own perturbation exactly against sampled rival
//! perturbations.

use std::io::{Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::ftpl::FtplState;
use crate::losses::{
    alpha_for, quadratic_loss, set_product, utility, ExpertSet, LossMatrix, UtilityKind,
};
use crate::noise::NoiseKind;
use crate::odg::{instance_loss_rows, OdgState};
use crate::wsu::{MetaWsu, SubsetIndex, WeightVector};

/// How experts turn beliefs into reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgentPolicy {
    /// Report the belief exactly.
    Truthful,
    /// Re-run the incentive audit every `refresh_every` rounds against the
    /// learner's frozen state and keep reporting belief + cached deviation
    /// in between; everyone else is treated as truthful during the audit.
    BestResponse {
        refresh_every: usize,
        grid_step: f64,
        mc_samples: usize,
    },
    /// Belief plus independent uniform noise on [-delta, delta], clipped.
    UniformPerturbed { delta: f64 },
    /// Push the belief away from 1/2 by the factor 1 + gamma, clipped.
    Extremizer { gamma: f64 },
}

impl AgentPolicy {
    /// Best-response policy with the default audit cadence.
    pub fn best_response() -> Self {
        AgentPolicy::BestResponse {
            refresh_every: 16,
            grid_step: 1e-3,
            mc_samples: 2000,
        }
    }
}

/// One expert's report under a policy. `cached_deviation` is the offset the
/// best-response policy last computed for this expert; other policies ignore
/// it.
pub fn policy_report<R: Rng + ?Sized>(
    policy: &AgentPolicy,
    belief: f64,
    cached_deviation: f64,
    rng: &mut R,
) -> f64 {
    match policy {
        AgentPolicy::Truthful => belief,
        AgentPolicy::BestResponse { .. } => (belief + cached_deviation).clamp(0.0, 1.0),
        AgentPolicy::UniformPerturbed { delta } => {
            let u: f64 = rng.random();
            (belief + (2.0 * u - 1.0) * delta).clamp(0.0, 1.0)
        }
        AgentPolicy::Extremizer { gamma } => {
            (0.5 + (1.0 + gamma) * (belief - 0.5)).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone)]
enum BeliefSource {
    IidUniform,
    Fixed(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
enum OutcomeSource {
    /// Bernoulli draw with success probability equal to the round's mean
    /// belief, so outcomes track whatever consensus the experts hold.
    Consensus,
    Fixed(Vec<bool>),
}

/// Where beliefs and outcomes come from for a run.
#[derive(Debug, Clone)]
pub struct Environment {
    beliefs: BeliefSource,
    outcomes: OutcomeSource,
    horizon: usize,
    k: usize,
}

impl Environment {
    /// Beliefs i.i.d. uniform on [0,1], outcomes Bernoulli at the round's
    /// consensus.
    pub fn iid_uniform(horizon: usize, k: usize) -> Result<Self> {
        if horizon == 0 || k == 0 {
            return Err(Error::Config(
                "environment needs a positive horizon and expert count".into(),
            ));
        }
        Ok(Environment {
            beliefs: BeliefSource::IidUniform,
            outcomes: OutcomeSource::Consensus,
            horizon,
            k,
        })
    }

    /// Fully scripted beliefs and outcomes, one row per round.
    pub fn scripted(beliefs: Vec<Vec<f64>>, outcomes: Vec<bool>) -> Result<Self> {
        let horizon = beliefs.len();
        if horizon == 0 {
            return Err(Error::Config("script needs at least one round".into()));
        }
        if outcomes.len() != horizon {
            return Err(Error::Config(format!(
                "{} belief rows but {} outcomes",
                horizon,
                outcomes.len()
            )));
        }
        let k = beliefs[0].len();
        if k == 0 {
            return Err(Error::Config("script needs at least one expert".into()));
        }
        for (t, row) in beliefs.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Config(format!(
                    "round {} has {} beliefs, expected {k}",
                    t + 1,
                    row.len()
                )));
            }
            if row.iter().any(|b| !(0.0..=1.0).contains(b)) {
                return Err(Error::Config(format!(
                    "round {} holds a belief outside [0,1]",
                    t + 1
                )));
            }
        }
        Ok(Environment {
            beliefs: BeliefSource::Fixed(beliefs),
            outcomes: OutcomeSource::Fixed(outcomes),
            horizon,
            k,
        })
    }

    /// Loads the adversarial-script CSV format (columns b1..bK, outcome).
    pub fn from_script(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let (beliefs, outcomes) = read_script_csv(file)?;
        Self::scripted(beliefs, outcomes)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn beliefs_at<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Vec<f64> {
        match &self.beliefs {
            BeliefSource::IidUniform => (0..self.k).map(|_| rng.random()).collect(),
            BeliefSource::Fixed(rows) => rows[t].clone(),
        }
    }

    fn outcome_at<R: Rng + ?Sized>(&self, t: usize, beliefs: &[f64], rng: &mut R) -> bool {
        match &self.outcomes {
            OutcomeSource::Consensus => {
                let mean = beliefs.iter().sum::<f64>() / beliefs.len() as f64;
                rng.random::<f64>() < mean
            }
            OutcomeSource::Fixed(rs) => rs[t],
        }
    }
}

/// Reads a script: header b1,...,bK,outcome; each row K beliefs and a 0/1.
pub fn read_script_csv<R: Read>(reader: R) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("script header unreadable: {e}")))?
        .clone();
    let n = headers.len();
    if n < 2 || &headers[n - 1] != "outcome" {
        return Err(Error::Data(
            "script header must end with an 'outcome' column".into(),
        ));
    }
    for (i, name) in headers.iter().take(n - 1).enumerate() {
        if name != format!("b{}", i + 1) {
            return Err(Error::Data(format!(
                "script column {} named '{name}', expected 'b{}'",
                i + 1,
                i + 1
            )));
        }
    }
    let mut beliefs = Vec::new();
    let mut outcomes = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Data(format!("script row unreadable: {e}")))?;
        let line = record
            .position()
            .map(|p| p.line().to_string())
            .unwrap_or_else(|| "?".into());
        if record.len() != n {
            return Err(Error::Data(format!(
                "line {line}: {} fields, expected {n}",
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(n - 1);
        for field in record.iter().take(n - 1) {
            let b: f64 = field
                .parse()
                .map_err(|_| Error::Data(format!("line {line}: bad belief '{field}'")))?;
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Data(format!(
                    "line {line}: belief {b} outside [0,1]"
                )));
            }
            row.push(b);
        }
        let r = match &record[n - 1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Data(format!(
                    "line {line}: outcome '{other}' is not 0 or 1"
                )))
            }
        };
        beliefs.push(row);
        outcomes.push(r);
    }
    if beliefs.is_empty() {
        return Err(Error::Data("script has no rounds".into()));
    }
    Ok((beliefs, outcomes))
}

/// Writes the script format read by [`read_script_csv`].
pub fn write_script_csv<W: Write>(
    writer: W,
    beliefs: &[Vec<f64>],
    outcomes: &[bool],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let k = beliefs.first().map_or(0, Vec::len);
    let mut header: Vec<String> = (1..=k).map(|i| format!("b{i}")).collect();
    header.push("outcome".into());
    wtr.write_record(&header).map_err(csv_io)?;
    for (row, &r) in beliefs.iter().zip(outcomes) {
        let mut rec: Vec<String> = row.iter().map(|b| b.to_string()).collect();
        rec.push(if r { "1" } else { "0" }.into());
        wtr.write_record(&rec).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Data(format!("csv write failed: {e}"))
}

/// Which learner to run, with an optional explicit step size; `None` means
/// the algorithm's documented default for the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlgorithmSpec {
    Wsu { eta: Option<f64> },
    MetaWsu { eta: Option<f64> },
    Ftpl { noise: NoiseKind, eta: Option<f64> },
    Odg { eta: Option<f64> },
}

impl AlgorithmSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmSpec::Wsu { .. } => "wsu",
            AlgorithmSpec::MetaWsu { .. } => "meta-wsu",
            AlgorithmSpec::Ftpl { .. } => "ftpl",
            AlgorithmSpec::Odg { .. } => "odg",
        }
    }
}

/// One run's full configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub algorithm: AlgorithmSpec,
    pub utility: UtilityKind,
    pub k: usize,
    pub m: usize,
    pub seed: u64,
    pub policy: AgentPolicy,
}

/// Run metadata carried alongside a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMeta {
    pub algorithm: String,
    pub seed: u64,
    pub eta: f64,
    pub noise: Option<NoiseKind>,
    pub m: usize,
    pub k: usize,
}

/// Per-round bookkeeping: the selected set, its true-belief utility, prefix
/// sums of algorithm and benchmark utility, and the running alpha-regret.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub t: usize,
    pub set: ExpertSet,
    pub util_true: f64,
    pub cum_util: f64,
    pub cum_opt: f64,
    pub alpha: f64,
    pub alpha_regret: f64,
}

/// A complete run: rounds plus the hindsight benchmark they are scored
/// against.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub meta: TraceMeta,
    pub rounds: Vec<RoundRecord>,
    pub opt_set: ExpertSet,
    pub opt_total: f64,
    pub alpha: f64,
}

pub const TRACE_HEADER: [&str; 9] = [
    "t",
    "algo",
    "seed",
    "set",
    "util_true",
    "cum_util",
    "cum_opt",
    "alpha",
    "alpha_regret",
];

impl RegretTrace {
    pub fn final_regret(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.alpha_regret)
    }

    /// Alpha-regret divided by the round number, per round.
    pub fn average_regret(&self) -> Vec<f64> {
        self.rounds
            .iter()
            .map(|r| r.alpha_regret / r.t as f64)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(TRACE_HEADER).map_err(csv_io)?;
        for r in &self.rounds {
            wtr.write_record(&[
                r.t.to_string(),
                self.meta.algorithm.clone(),
                self.meta.seed.to_string(),
                r.set.to_string(),
                r.util_true.to_string(),
                r.cum_util.to_string(),
                r.cum_opt.to_string(),
                r.alpha.to_string(),
                r.alpha_regret.to_string(),
            ])
            .map_err(csv_io)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// A trace read back from CSV: the per-round records plus the identifying
/// columns common to all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadTrace {
    pub algorithm: String,
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
}

pub fn read_trace_csv<R: Read>(reader: R) -> Result<ReadTrace> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("trace header unreadable: {e}")))?;
    if headers.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(Error::Data(format!(
            "unexpected trace header {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut algorithm = String::new();
    let mut seed = 0u64;
    let mut rounds = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Data(format!("trace row unreadable: {e}")))?;
        let line = record
            .position()
            .map(|p| p.line().to_string())
            .unwrap_or_else(|| "?".into());
        let field = |i: usize| -> &str { &record[i] };
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::Data(format!("line {line}: bad number '{}'", field(i))))
        };
        let t: usize = field(0)
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: bad round '{}'", field(0))))?;
        algorithm = field(1).to_string();
        seed = field(2)
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: bad seed '{}'", field(2))))?;
        rounds.push(RoundRecord {
            t,
            set: ExpertSet::parse(field(3))?,
            util_true: num(4)?,
            cum_util: num(5)?,
            cum_opt: num(6)?,
            alpha: num(7)?,
            alpha_regret: num(8)?,
        });
    }
    if rounds.is_empty() {
        return Err(Error::Data("trace has no rounds".into()));
    }
    Ok(ReadTrace {
        algorithm,
        seed,
        rounds,
    })
}

/// The best fixed m-set in hindsight and its total utility. Modular rounds
/// admit the separable fast path (m smallest cumulative losses); submodular
/// rounds are enumerated exactly up to the subset cap.
pub fn brute_force_opt(
    losses: &LossMatrix,
    kind: UtilityKind,
    m: usize,
) -> Result<(ExpertSet, f64)> {
    let k = losses.experts();
    if m == 0 || m > k {
        return Err(Error::Domain(format!("cannot pick m = {m} of {k} experts")));
    }
    match kind {
        UtilityKind::Modular { m: budget } => {
            if budget != m {
                return Err(Error::Config(format!(
                    "modular budget {budget} disagrees with m = {m}"
                )));
            }
            let totals = losses.cumulative();
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| totals[a].total_cmp(&totals[b]).then(a.cmp(&b)));
            order.truncate(m);
            let set = ExpertSet::new(order)?;
            let total = losses.rows().map(|row| utility(kind, &set, row)).sum();
            Ok((set, total))
        }
        UtilityKind::Submodular => {
            let idx = SubsetIndex::new(k, m)?;
            let mut best_total = f64::NEG_INFINITY;
            let mut best_members: Vec<usize> = Vec::new();
            idx.for_each_subset(|_, members| {
                let total: f64 = losses
                    .rows()
                    .map(|row| 1.0 - set_product(row, members))
                    .sum();
                if total > best_total {
                    best_total = total;
                    best_members = members.to_vec();
                }
            });
            Ok((ExpertSet::from_sorted(best_members), best_total))
        }
    }
}

/// alpha times the benchmark total minus the algorithm's total.
pub fn alpha_regret(cum_util: f64, opt_total: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} outside (0,1]")));
    }
    Ok(alpha * opt_total - cum_util)
}

/// Outcome of one incentive audit: the grid report maximizing expected
/// next-round selection, how far it sits from the belief, and how much it
/// gains over reporting the belief (positive gap = profitable deviation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditReport {
    pub argmax_report: f64,
    pub deviation: f64,
    pub truthful_gap: f64,
}

fn validate_audit_inputs(
    k: usize,
    expert: usize,
    belief: f64,
    other_reports: &[f64],
    grid_step: f64,
) -> Result<usize> {
    if expert >= k {
        return Err(Error::Domain(format!(
            "expert {expert} out of range for {k} experts"
        )));
    }
    if !(0.0..=1.0).contains(&belief) {
        return Err(Error::Domain(format!("belief {belief} outside [0,1]")));
    }
    if other_reports.len() != k {
        return Err(Error::Domain(format!(
            "{} reports for {k} experts",
            other_reports.len()
        )));
    }
    if other_reports.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Domain("reports must lie in [0,1]".into()));
    }
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(Error::Domain(format!(
            "grid step {grid_step} outside (0, 0.5]"
        )));
    }
    Ok(((1.0 / grid_step).round() as usize).max(2))
}

/// Sweeps the report grid, returning the audit report for a closed-form or
/// estimated objective.
fn sweep_grid(n: usize, belief: f64, mut objective: impl FnMut(f64) -> f64) -> AuditReport {
    let mut best_p = 0.0;
    let mut best_val = f64::NEG_INFINITY;
    for i in 0..=n {
        let p = i as f64 / n as f64;
        let val = objective(p);
        if val > best_val {
            best_val = val;
            best_p = p;
        }
    }
    let truthful = objective(belief);
    AuditReport {
        argmax_report: best_p,
        deviation: (best_p - belief).abs(),
        truthful_gap: best_val - truthful,
    }
}

/// Audit of the single-expert weighted-score update: the objective is the
/// expert's expected updated weight, exact from the update formula.
pub fn audit_wsu(
    weights: &WeightVector,
    expert: usize,
    belief: f64,
    other_reports: &[f64],
    grid_step: f64,
) -> Result<AuditReport> {
    let k = weights.len();
    let n = validate_audit_inputs(k, expert, belief, other_reports, grid_step)?;
    let eta = weights.eta();
    let w = weights.weights();
    // Precompute the rivals' loss rows once per outcome.
    let mut base = [vec![0.0; k], vec![0.0; k]];
    for (r, row) in base.iter_mut().enumerate() {
        for j in 0..k {
            if j != expert {
                row[j] = quadratic_loss(other_reports[j], r == 1)?;
            }
        }
    }
    let objective = |p: f64| {
        let mut mixed = 0.0;
        for (r, row) in base.iter().enumerate() {
            let own = quadratic_loss(p, r == 1).expect("grid point in range");
            let mut mean = own * w[expert];
            for j in 0..k {
                if j != expert {
                    mean += row[j] * w[j];
                }
            }
            let updated = w[expert] * (1.0 - eta * (own - mean));
            let weight = if r == 1 { belief } else { 1.0 - belief };
            mixed += weight * updated;
        }
        mixed
    };
    Ok(sweep_grid(n, belief, objective))
}

/// Audit of the subset learner: the objective is the probability that the
/// sampled subset contains the expert after the update, summed in closed
/// form over all subset weights.
pub fn audit_meta_wsu(
    meta: &MetaWsu,
    expert: usize,
    belief: f64,
    other_reports: &[f64],
    grid_step: f64,
) -> Result<AuditReport> {
    let k = meta.index().k();
    let n = validate_audit_inputs(k, expert, belief, other_reports, grid_step)?;
    let eta = meta.eta();
    let w = meta.weights().weights();
    let idx = *meta.index();
    let m = idx.m() as f64;
    let objective = |p: f64| {
        let mut mixed = 0.0;
        for r in [false, true] {
            let mut row = Vec::with_capacity(k);
            for j in 0..k {
                let report = if j == expert { p } else { other_reports[j] };
                row.push(quadratic_loss(report, r).expect("grid point in range"));
            }
            // Meta losses, their weighted mean, and the inclusion mass of
            // the updated weights, in one pass over the subsets.
            let mut mean = 0.0;
            idx.for_each_subset(|rank, members| {
                let meta_loss = members.iter().map(|&j| row[j]).sum::<f64>() / m;
                mean += w[rank] * meta_loss;
            });
            let mut included = 0.0;
            idx.for_each_subset(|rank, members| {
                if members.contains(&expert) {
                    let meta_loss = members.iter().map(|&j| row[j]).sum::<f64>() / m;
                    included += w[rank] * (1.0 - eta * (meta_loss - mean));
                }
            });
            let weight = if r { belief } else { 1.0 - belief };
            mixed += weight * included;
        }
        mixed
    };
    Ok(sweep_grid(n, belief, objective))
}

/// Audit of one distorted-greedy instance: the objective is the expert's
/// expected updated weight inside that instance, with the round's realized
/// picks fixing each instance's prefix.
pub fn audit_odg_instance(
    state: &OdgState,
    instance: usize,
    picks: &[usize],
    expert: usize,
    belief: f64,
    other_reports: &[f64],
    grid_step: f64,
) -> Result<AuditReport> {
    let k = state.k();
    let n = validate_audit_inputs(k, expert, belief, other_reports, grid_step)?;
    if instance >= state.m() {
        return Err(Error::Domain(format!(
            "instance {instance} out of range for m = {}",
            state.m()
        )));
    }
    let inst = &state.instances()[instance];
    let eta = inst.eta();
    let w = inst.weights();
    let kind = state.kind();
    let objective = |p: f64| {
        let mut mixed = 0.0;
        for r in [false, true] {
            let mut row = Vec::with_capacity(k);
            for j in 0..k {
                let report = if j == expert { p } else { other_reports[j] };
                row.push(quadratic_loss(report, r).expect("grid point in range"));
            }
            let loss_row = &instance_loss_rows(kind, &row, picks).expect("validated inputs")
                [instance];
            let mean: f64 = w.iter().zip(loss_row).map(|(wi, li)| wi * li).sum();
            let updated = w[expert] * (1.0 - eta * (loss_row[expert] - mean));
            let weight = if r { belief } else { 1.0 - belief };
            mixed += weight * updated;
        }
        mixed
    };
    Ok(sweep_grid(n, belief, objective))
}

/// Aggregate distorted-greedy audit: Monte Carlo estimate of the
/// probability that the whole selected set contains the expert after the
/// update. Reported for observation; the per-instance audit carries the
/// exact incentive claim.
pub fn audit_odg_inclusion<R: Rng + ?Sized>(
    state: &OdgState,
    picks: &[usize],
    expert: usize,
    belief: f64,
    other_reports: &[f64],
    grid_step: f64,
    mc_samples: usize,
    rng: &mut R,
) -> Result<AuditReport> {
    let k = state.k();
    let n = validate_audit_inputs(k, expert, belief, other_reports, grid_step)?;
    if mc_samples == 0 {
        return Err(Error::Domain("need at least one Monte Carlo sample".into()));
    }
    let mut objective = |p: f64| {
        let mut mixed = 0.0;
        for r in [false, true] {
            let mut row = Vec::with_capacity(k);
            for j in 0..k {
                let report = if j == expert { p } else { other_reports[j] };
                row.push(quadratic_loss(report, r).expect("grid point in range"));
            }
            let mut updated = state.clone();
            updated
                .feedback(&row, picks)
                .expect("validated inputs");
            let mut hits = 0usize;
            for _ in 0..mc_samples {
                if updated.select(rng).contains(&expert) {
                    hits += 1;
                }
            }
            let weight = if r { belief } else { 1.0 - belief };
            mixed += weight * hits as f64 / mc_samples as f64;
        }
        mixed
    };
    Ok(sweep_grid(n, belief, &mut objective))
}

/// Audit of the perturbed leader. The state's cumulative losses must run
/// through the previous round; this function applies the current round's
/// report-based losses itself. The expert's own perturbation is integrated
/// exactly through the noise cdf against `mc_samples` sampled realizations
/// of the rivals' perturbations, which keeps the grid sweep smooth.
pub fn audit_ftpl<R: Rng + ?Sized>(
    state: &FtplState,
    expert: usize,
    belief: f64,
    other_reports: &[f64],
    grid_step: f64,
    mc_samples: usize,
    rng: &mut R,
) -> Result<AuditReport> {
    let k = state.k();
    let n = validate_audit_inputs(k, expert, belief, other_reports, grid_step)?;
    if mc_samples == 0 {
        return Err(Error::Domain("need at least one Monte Carlo sample".into()));
    }
    if state.m() >= k {
        return Err(Error::Degenerate(
            "audit needs at least one rival slot (m < K)".into(),
        ));
    }
    let eta = state.eta();
    let noise = *state.noise();
    let own_cum = state.cumulative()[expert];
    // Rival thresholds per outcome: the m-th smallest perturbed rival score
    // with the rivals' current-round losses applied.
    let mut thresholds = [
        Vec::with_capacity(mc_samples),
        Vec::with_capacity(mc_samples),
    ];
    let mut scores = vec![0.0; k - 1];
    for _ in 0..mc_samples {
        let gammas: Vec<f64> = (0..k - 1).map(|_| noise.sample(rng)).collect();
        for (r, bucket) in thresholds.iter_mut().enumerate() {
            let mut s = 0;
            for j in 0..k {
                if j == expert {
                    continue;
                }
                let loss = quadratic_loss(other_reports[j], r == 1)?;
                scores[s] = state.cumulative()[j] + loss + eta * gammas[s];
                s += 1;
            }
            scores.sort_by(f64::total_cmp);
            bucket.push(scores[state.m() - 1]);
        }
    }
    let objective = |p: f64| {
        let mut mixed = 0.0;
        for (r, bucket) in thresholds.iter().enumerate() {
            let own = own_cum + quadratic_loss(p, r == 1).expect("grid point in range");
            let mean: f64 = bucket
                .iter()
                .map(|&x| noise.cdf((x - own) / eta))
                .sum::<f64>()
                / mc_samples as f64;
            let weight = if r == 1 { belief } else { 1.0 - belief };
            mixed += weight * mean;
        }
        mixed
    };
    Ok(sweep_grid(n, belief, objective))
}

/// One audited (round, expert) pair in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub t: usize,
    pub expert: usize,
    pub belief: f64,
    pub argmax_report: f64,
    pub deviation: f64,
    pub gap: f64,
}

pub const AUDIT_HEADER: [&str; 6] = ["t", "expert", "belief", "argmax_report", "deviation", "gap"];

pub fn write_audit_csv<W: Write>(writer: W, rows: &[AuditRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(AUDIT_HEADER).map_err(csv_io)?;
    for r in rows {
        wtr.write_record(&[
            r.t.to_string(),
            (r.expert + 1).to_string(),
            r.belief.to_string(),
            r.argmax_report.to_string(),
            r.deviation.to_string(),
            r.gap.to_string(),
        ])
        .map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Cadence and precision of in-run audits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditOptions {
    /// Audit every this-many rounds, starting at the first.
    pub every: usize,
    pub grid_step: f64,
    pub mc_samples: usize,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            every: 16,
            grid_step: 1e-3,
            mc_samples: 10_000,
        }
    }
}

enum Learner {
    Wsu(WeightVector),
    Meta(MetaWsu),
    Ftpl(FtplState),
    Odg(OdgState),
}

impl Learner {
    fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> (ExpertSet, Option<Vec<usize>>) {
        match self {
            Learner::Wsu(w) => {
                let i = w.sample(rng);
                (ExpertSet::from_sorted(vec![i]), None)
            }
            Learner::Meta(m) => (m.select(rng), None),
            Learner::Ftpl(f) => (f.select(rng), None),
            Learner::Odg(o) => {
                let picks = o.select(rng);
                let set = ExpertSet::new(picks.clone()).expect("distinct picks");
                (set, Some(picks))
            }
        }
    }

    fn observe(&mut self, losses: &[f64], picks: Option<&[usize]>) -> Result<()> {
        match self {
            Learner::Wsu(w) => w.update(losses),
            Learner::Meta(m) => m.observe(losses),
            Learner::Ftpl(f) => f.observe(losses),
            Learner::Odg(o) => o.feedback(losses, picks.expect("odg picks recorded")),
        }
    }
}

fn build_learner(cfg: &SimConfig, horizon: usize) -> Result<(Learner, f64, Option<NoiseKind>)> {
    let (k, m) = (cfg.k, cfg.m);
    match cfg.algorithm {
        AlgorithmSpec::Wsu { eta } => {
            if m != 1 {
                return Err(Error::Config(format!(
                    "the single-expert update selects one expert, got m = {m}"
                )));
            }
            let eta = match eta {
                Some(e) => e,
                None => crate::wsu::default_eta(k, horizon)?,
            };
            Ok((Learner::Wsu(WeightVector::uniform(k, eta)?), eta, None))
        }
        AlgorithmSpec::MetaWsu { eta } => {
            let meta = match eta {
                Some(e) => MetaWsu::new(k, m, e)?,
                None => MetaWsu::with_default_eta(k, m, horizon)?,
            };
            let eta = meta.eta();
            Ok((Learner::Meta(meta), eta, None))
        }
        AlgorithmSpec::Ftpl { noise, eta } => {
            let model = crate::noise::NoiseModel::new(noise);
            let eta = match (eta, model.condition1_bound()) {
                (Some(e), _) => e,
                (None, Some(b)) => crate::ftpl::default_step_size(b, horizon, k, m)?,
                (None, None) => {
                    return Err(Error::Config(format!(
                        "{noise} noise has no potential bound; pass an explicit step size"
                    )))
                }
            };
            Ok((
                Learner::Ftpl(FtplState::new(k, m, eta, model)?),
                eta,
                Some(noise),
            ))
        }
        AlgorithmSpec::Odg { eta } => {
            let state = match eta {
                Some(e) => OdgState::new(k, m, cfg.utility, e)?,
                None => OdgState::with_default_eta(k, m, cfg.utility, horizon)?,
            };
            let eta = state.instances()[0].eta();
            Ok((Learner::Odg(state), eta, None))
        }
    }
}

fn validate_config(cfg: &SimConfig, env: &Environment) -> Result<()> {
    if cfg.k != env.k() {
        return Err(Error::Config(format!(
            "config has {} experts but the environment has {}",
            cfg.k,
            env.k()
        )));
    }
    if cfg.m == 0 || cfg.m > cfg.k {
        return Err(Error::Config(format!(
            "cannot select m = {} of {} experts",
            cfg.m, cfg.k
        )));
    }
    if let UtilityKind::Modular { m } = cfg.utility {
        if m != cfg.m {
            return Err(Error::Config(format!(
                "modular budget {m} disagrees with m = {}",
                cfg.m
            )));
        }
    }
    match cfg.policy {
        AgentPolicy::BestResponse {
            refresh_every,
            grid_step,
            mc_samples,
        } => {
            if refresh_every == 0 || mc_samples == 0 || !(grid_step > 0.0 && grid_step <= 0.5) {
                return Err(Error::Config(
                    "best-response policy needs positive cadence, samples, and a \
                     grid step in (0, 0.5]"
                        .into(),
                ));
            }
        }
        AgentPolicy::UniformPerturbed { delta } => {
            if !(0.0..=1.0).contains(&delta) {
                return Err(Error::Config(format!(
                    "perturbation half-width {delta} outside [0,1]"
                )));
            }
        }
        AgentPolicy::Extremizer { gamma } => {
            if !(gamma >= 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!(
                    "extremizing factor {gamma} must be nonnegative"
                )));
            }
        }
        AgentPolicy::Truthful => {}
    }
    Ok(())
}

/// Runs one experiment and returns its trace.
pub fn run_experiment(cfg: &SimConfig, env: &Environment) -> Result<RegretTrace> {
    let (trace, _) = run_loop(cfg, env, None)?;
    Ok(trace)
}

/// Runs one experiment, auditing every expert at the configured cadence.
/// Audits see the learner exactly as it stands before the round's update,
/// with all other experts' reports fixed at their actual values.
pub fn run_audited_experiment(
    cfg: &SimConfig,
    env: &Environment,
    audit: AuditOptions,
) -> Result<(RegretTrace, Vec<AuditRow>)> {
    if audit.every == 0 {
        return Err(Error::Config("audit cadence must be positive".into()));
    }
    run_loop(cfg, env, Some(audit))
}

fn run_loop(
    cfg: &SimConfig,
    env: &Environment,
    audit: Option<AuditOptions>,
) -> Result<(RegretTrace, Vec<AuditRow>)> {
    validate_config(cfg, env)?;
    let horizon = env.horizon();
    let (mut learner, eta, noise) = build_learner(cfg, horizon)?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut cached_dev = vec![0.0; cfg.k];
    let mut sets = Vec::with_capacity(horizon);
    let mut true_rows = Vec::with_capacity(horizon);
    let mut audit_rows = Vec::new();

    for t in 0..horizon {
        let beliefs = env.beliefs_at(t, &mut rng);
        if let AgentPolicy::BestResponse {
            refresh_every,
            grid_step,
            mc_samples,
        } = cfg.policy
        {
            if t % refresh_every == 0 {
                refresh_best_responses(
                    &learner,
                    &beliefs,
                    grid_step,
                    mc_samples,
                    &mut cached_dev,
                    &mut rng,
                )?;
            }
        }
        let reports: Vec<f64> = beliefs
            .iter()
            .enumerate()
            .map(|(i, &b)| policy_report(&cfg.policy, b, cached_dev[i], &mut rng))
            .collect();
        let (set, picks) = learner.select(&mut rng);
        if let Some(opts) = &audit {
            if t % opts.every == 0 {
                audit_round(
                    &learner, t, &beliefs, &reports, picks.as_deref(), opts, &mut audit_rows,
                    &mut rng,
                )?;
            }
        }
        let outcome = env.outcome_at(t, &beliefs, &mut rng);
        let mut reported_losses = Vec::with_capacity(cfg.k);
        let mut true_losses = Vec::with_capacity(cfg.k);
        for i in 0..cfg.k {
            reported_losses.push(quadratic_loss(reports[i], outcome)?);
            true_losses.push(quadratic_loss(beliefs[i], outcome)?);
        }
        learner.observe(&reported_losses, picks.as_deref())?;
        sets.push(set);
        true_rows.push(true_losses);
    }

    let loss_matrix = LossMatrix::from_rows(true_rows)?;
    let (opt_set, opt_total) = brute_force_opt(&loss_matrix, cfg.utility, cfg.m)?;
    let alpha = alpha_for(cfg.utility, &loss_matrix)?;
    let mut cum_util = 0.0;
    let mut cum_opt = 0.0;
    let mut rounds = Vec::with_capacity(horizon);
    for (t, set) in sets.into_iter().enumerate() {
        let row = loss_matrix.row(t);
        let util_true = utility(cfg.utility, &set, row);
        cum_util += util_true;
        cum_opt += utility(cfg.utility, &opt_set, row);
        rounds.push(RoundRecord {
            t: t + 1,
            set,
            util_true,
            cum_util,
            cum_opt,
            alpha,
            alpha_regret: alpha_regret(cum_util, cum_opt, alpha)?,
        });
    }
    let trace = RegretTrace {
        meta: TraceMeta {
            algorithm: cfg.algorithm.name().to_string(),
            seed: cfg.seed,
            eta,
            noise,
            m: cfg.m,
            k: cfg.k,
        },
        rounds,
        opt_set,
        opt_total,
        alpha,
    };
    Ok((trace, audit_rows))
}

/// Recomputes each expert's cached best-response offset against the frozen
/// learner, with everyone else treated as truthful.
fn refresh_best_responses<R: Rng + ?Sized>(
    learner: &Learner,
    beliefs: &[f64],
    grid_step: f64,
    mc_samples: usize,
    cached_dev: &mut [f64],
    rng: &mut R,
) -> Result<()> {
    let k = beliefs.len();
    for i in 0..k {
        let report = match learner {
            Learner::Wsu(w) => audit_wsu(w, i, beliefs[i], beliefs, grid_step)?,
            Learner::Meta(m) => audit_meta_wsu(m, i, beliefs[i], beliefs, grid_step)?,
            Learner::Ftpl(f) => {
                audit_ftpl(f, i, beliefs[i], beliefs, grid_step, mc_samples, rng)?
            }
            Learner::Odg(o) => {
                // The first instance has an empty prefix, so any placeholder
                // pick vector yields the same objective.
                let placeholder: Vec<usize> = (0..o.m()).collect();
                audit_odg_instance(o, 0, &placeholder, i, beliefs[i], beliefs, grid_step)?
            }
        };
        cached_dev[i] = report.argmax_report - beliefs[i];
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn audit_round<R: Rng + ?Sized>(
    learner: &Learner,
    t: usize,
    beliefs: &[f64],
    reports: &[f64],
    picks: Option<&[usize]>,
    opts: &AuditOptions,
    out: &mut Vec<AuditRow>,
    rng: &mut R,
) -> Result<()> {
    let k = beliefs.len();
    for i in 0..k {
        let report = match learner {
            Learner::Wsu(w) => audit_wsu(w, i, beliefs[i], reports, opts.grid_step)?,
            Learner::Meta(m) => audit_meta_wsu(m, i, beliefs[i], reports, opts.grid_step)?,
            Learner::Ftpl(f) => audit_ftpl(
                f,
                i,
                beliefs[i],
                reports,
                opts.grid_step,
                opts.mc_samples,
                rng,
            )?,
            Learner::Odg(o) => {
                let picks = picks.expect("odg audit needs the round's picks");
                // Rotate through instances so a long run covers them all.
                let instance = (t / opts.every) % o.m();
                audit_odg_instance(o, instance, picks, i, beliefs[i], reports, opts.grid_step)?
            }
        };
        out.push(AuditRow {
            t: t + 1,
            expert: i,
            belief: beliefs[i],
            argmax_report: report.argmax_report,
            deviation: report.deviation,
            gap: report.truthful_gap,
        });
    }
    Ok(())
}
