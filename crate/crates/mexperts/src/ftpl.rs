//! Follow the perturbed leader over m-subsets, and the machinery for asking
//! whether a single expert can gain by misreporting.
//!
//! Each round the learner adds fresh scaled noise to every expert's
//! cumulative loss and keeps the m smallest perturbed scores. Incentive
//! analysis conditions on the rivals' perturbations: given the deviating
//! expert's cumulative loss and the m-th smallest rival score under either
//! outcome, the report that maximizes next-round selection probability is
//! the fixed point of
//!
//! ```text
//! p  =  b / (b + (1 - b) * A(p))
//! ```
//!
//! where b is the expert's belief and A compares the noise potential at the
//! two selection thresholds. When |nu'| <= B and eta > 2B the fixed point
//! stays within 2B/(eta - 2B) of the belief; without the bound on nu' the
//! factor A, and with it the best response, can drift arbitrarily far.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{quadratic_loss, ExpertSet};
use crate::noise::NoiseModel;

/// Learner state: cumulative losses, noise scale, and the subset size.
#[derive(Debug, Clone)]
pub struct FtplState {
    cumulative: Vec<f64>,
    eta: f64,
    noise: NoiseModel,
    m: usize,
}

impl FtplState {
    pub fn new(k: usize, m: usize, eta: f64, noise: NoiseModel) -> Result<Self> {
        Self::with_cumulative(vec![0.0; k], m, eta, noise)
    }

    /// Starts from given cumulative losses; the incentive auditor uses this
    /// to build hypothetical states with one round's losses already applied.
    pub fn with_cumulative(
        cumulative: Vec<f64>,
        m: usize,
        eta: f64,
        noise: NoiseModel,
    ) -> Result<Self> {
        let k = cumulative.len();
        if m == 0 || m > k {
            return Err(Error::Domain(format!(
                "cannot select m = {m} of k = {k} experts"
            )));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::Domain(format!("step size {eta} must be positive")));
        }
        if let Some(b) = noise.condition1_bound() {
            if eta <= b {
                return Err(Error::Domain(format!(
                    "step size {eta} must exceed the noise bound B = {b} \
                     for the incentive analysis to apply"
                )));
            }
        }
        if cumulative.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("cumulative losses must be finite".into()));
        }
        Ok(FtplState {
            cumulative,
            eta,
            noise,
            m,
        })
    }

    pub fn k(&self) -> usize {
        self.cumulative.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn noise(&self) -> &NoiseModel {
        self.noise_ref()
    }

    fn noise_ref(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Draws K fresh perturbations and selects the m lowest perturbed scores.
    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> ExpertSet {
        let gamma: Vec<f64> = (0..self.k()).map(|_| self.noise.sample(rng)).collect();
        self.select_with_perturbations(&gamma)
    }

    /// Selection under an externally supplied perturbation vector, so tests
    /// and audits can pin the randomness. Ties break toward the lower index.
    pub fn select_with_perturbations(&self, gamma: &[f64]) -> ExpertSet {
        assert_eq!(gamma.len(), self.k(), "one perturbation per expert");
        let mut order: Vec<usize> = (0..self.k()).collect();
        let score = |i: usize| self.cumulative[i] + self.eta * gamma[i];
        order.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)));
        order.truncate(self.m);
        ExpertSet::new(order).expect("distinct indices")
    }

    pub fn observe(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.k() {
            return Err(Error::Domain(format!(
                "{} losses for {} experts",
                row.len(),
                self.k()
            )));
        }
        if row.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Domain("losses must lie in [0,1]".into()));
        }
        for (c, &l) in self.cumulative.iter_mut().zip(row) {
            *c += l;
        }
        Ok(())
    }
}

/// Horizon-tuned noise scale sqrt(B T / ln(K/m)). Defined for K > m, and
/// only once the horizon clears B ln(K/m), below which the scale would not
/// exceed B and the incentive analysis has nothing to say.
pub fn default_step_size(b: f64, horizon: usize, k: usize, m: usize) -> Result<f64> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::Domain(format!("noise bound B = {b} must be positive")));
    }
    if m == 0 || k <= m {
        return Err(Error::Degenerate(format!(
            "step size needs K > m >= 1, got K = {k}, m = {m}"
        )));
    }
    let log_ratio = (k as f64 / m as f64).ln();
    let eta = (b * horizon as f64 / log_ratio).sqrt();
    if eta <= b {
        return Err(Error::HorizonTooShort {
            needed: b * log_ratio,
            got: horizon as f64,
            what: "perturbed-leader default step size".into(),
        });
    }
    Ok(eta)
}

/// How far the best response can sit from the belief: 2B/(eta - 2B),
/// defined for eta > 2B.
pub fn ic_deviation_bound(b: f64, eta: f64) -> Result<f64> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::Domain(format!("noise bound B = {b} must be positive")));
    }
    if eta <= 2.0 * b {
        return Err(Error::Domain(format!(
            "deviation bound needs eta > 2B, got eta = {eta}, B = {b}"
        )));
    }
    Ok(2.0 * b / (eta - 2.0 * b))
}

/// Everything the single-expert deviation analysis conditions on: the
/// expert's own cumulative loss and the m-th smallest rival perturbed score
/// under each outcome. The two thresholds differ by at most one because no
/// rival's round loss can move by more.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationContext {
    cum_loss: f64,
    threshold_zero: f64,
    threshold_one: f64,
}

impl DeviationContext {
    pub fn new(cum_loss: f64, threshold_zero: f64, threshold_one: f64) -> Result<Self> {
        for x in [cum_loss, threshold_zero, threshold_one] {
            if !x.is_finite() {
                return Err(Error::Domain("deviation context must be finite".into()));
            }
        }
        if (threshold_zero - threshold_one).abs() > 1.0 + 1e-12 {
            return Err(Error::Domain(format!(
                "rival thresholds {threshold_zero} and {threshold_one} differ by more \
                 than one round's loss"
            )));
        }
        Ok(DeviationContext {
            cum_loss,
            threshold_zero,
            threshold_one,
        })
    }

    pub fn cum_loss(&self) -> f64 {
        self.cum_loss
    }

    pub fn threshold_zero(&self) -> f64 {
        self.threshold_zero
    }

    pub fn threshold_one(&self) -> f64 {
        self.threshold_one
    }
}

/// The factor A(p) comparing the noise potential at the two conditional
/// selection thresholds. Under |nu'| <= B it stays inside
/// [exp(-2B/eta), exp(2B/eta)]; for unbounded potentials it escapes any
/// fixed interval as the loss gap grows.
pub fn deviation_factor(ctx: &DeviationContext, p: f64, noise: &NoiseModel, eta: f64) -> f64 {
    assert!(eta > 0.0, "noise scale must be positive");
    let arg_one = (-(1.0 - p) * (1.0 - p) - (ctx.cum_loss - ctx.threshold_one)) / eta;
    let arg_zero = (-p * p - (ctx.cum_loss - ctx.threshold_zero)) / eta;
    (noise.nu(arg_one) - noise.nu(arg_zero)).exp()
}

/// The report maximizing next-round selection probability for an expert with
/// belief `b`, conditioned on the rivals' perturbations summarized in `ctx`:
/// the unique root of p - b/(b + (1-b) A(p)), found by bisection.
///
/// Requires eta above the noise bound B so the map is strictly increasing.
/// A sign failure at either end means the increasing-map argument has broken
/// down, which is the symptom of a noise model violating the |nu'| bound.
pub fn best_response(
    ctx: &DeviationContext,
    belief: f64,
    noise: &NoiseModel,
    eta: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&belief) {
        return Err(Error::Domain(format!("belief {belief} outside [0,1]")));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Domain(format!("step size {eta} must be positive")));
    }
    if let Some(b) = noise.condition1_bound() {
        if eta <= b {
            return Err(Error::Domain(format!(
                "best response needs eta > B = {b}, got {eta}"
            )));
        }
    }
    if belief == 0.0 {
        return Ok(0.0);
    }
    if belief == 1.0 {
        return Ok(1.0);
    }
    let h = |p: f64| {
        let a = deviation_factor(ctx, p, noise, eta);
        p - belief / (belief + (1.0 - belief) * a)
    };
    let h0 = h(0.0);
    let h1 = h(1.0);
    if h0 >= 0.0 || h1 <= 0.0 {
        return Err(Error::MonotonicityViolation(format!(
            "fixed-point map has no sign change on [0,1] (h(0) = {h0}, h(1) = {h1}) \
             for {} noise at eta = {eta}",
            noise.kind()
        )));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..60 {
        if hi - lo <= 1e-10 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A Monte Carlo probability with its binomial standard error.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub probability: f64,
    pub stderr: f64,
}

/// Estimates the probability that `expert` lands in the selected subset at
/// the next round, given that it reports `p` and the outcome is `r`. The
/// state's cumulative losses must already include the current round for the
/// rivals; the expert's own score additionally pays the loss of its report.
pub fn selection_probability_mc<R: Rng + ?Sized>(
    state: &FtplState,
    expert: usize,
    p: f64,
    r: bool,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let k = state.k();
    if expert >= k {
        return Err(Error::Domain(format!(
            "expert {expert} out of range for {k} experts"
        )));
    }
    if samples == 0 {
        return Err(Error::Domain("need at least one Monte Carlo sample".into()));
    }
    let own_base = state.cumulative()[expert] + quadratic_loss(p, r)?;
    let mut hits = 0usize;
    let mut gamma = vec![0.0; k];
    for _ in 0..samples {
        for g in &mut gamma {
            *g = state.noise().sample(rng);
        }
        let own = own_base + state.eta() * gamma[expert];
        // Rank of the expert's score among all K, honoring the ascending
        // index tie-break; selected iff fewer than m scores beat it.
        let mut better = 0usize;
        for j in 0..k {
            if j == expert {
                continue;
            }
            let s = state.cumulative()[j] + state.eta() * gamma[j];
            if s < own || (s == own && j < expert) {
                better += 1;
            }
        }
        if better < state.m() {
            hits += 1;
        }
    }
    let probability = hits as f64 / samples as f64;
    let stderr = (probability * (1.0 - probability) / samples as f64).sqrt();
    Ok(McEstimate {
        probability,
        stderr,
    })
}
