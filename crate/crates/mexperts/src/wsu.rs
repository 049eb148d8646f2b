//! Weighted-score updates: the payment rule, the multiplicative update it
//! induces, and the lift from single experts to m-subsets.
//!
//! The payment to expert i with wager w_i after outcome r is
//!
//! ```text
//! payment_i = w_i * (1 - loss_i + sum_j w_j * loss_j)
//! ```
//!
//! which is nonnegative and, when the wagers form a probability vector,
//! redistributes exactly the total wagered. Treating next-round selection
//! probabilities as wagers turns the rule into the update
//!
//! ```text
//! p_i  <-  p_i * (1 - eta * (loss_i - expected loss))
//! ```
//!
//! whose relative losses are centered, so the probabilities keep summing to
//! one without projection, and an expert's update depends on its own report
//! only through a proper score, which is where incentive compatibility
//! comes from. Selecting m-subsets reduces to the single-expert update over
//! all C(K, m) subsets, each scored by its members' average loss; subsets
//! are indexed colexicographically so ranks and member lists convert both
//! ways without storing the enumeration.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::ExpertSet;

/// Refuse to build a subset learner past this many subsets.
pub const SUBSET_CAP: u128 = 2_000_000;

/// Payments for one round: wager times (one minus own loss plus the wager-
/// weighted average loss). Wagers may be any nonnegative stakes; budget
/// balance holds exactly when they sum to one.
pub fn wswm_payment(reports: &[f64], wagers: &[f64], outcome: bool) -> Result<Vec<f64>> {
    if reports.len() != wagers.len() {
        return Err(Error::Domain(format!(
            "{} reports but {} wagers",
            reports.len(),
            wagers.len()
        )));
    }
    let losses = reports
        .iter()
        .map(|&p| crate::losses::quadratic_loss(p, outcome))
        .collect::<Result<Vec<f64>>>()?;
    for &w in wagers {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Domain(format!("wager {w} is not a nonnegative stake")));
        }
    }
    let pooled: f64 = wagers.iter().zip(&losses).map(|(w, l)| w * l).sum();
    Ok(wagers
        .iter()
        .zip(&losses)
        .map(|(w, l)| w * (1.0 - l + pooled))
        .collect())
}

/// Default step size for the single-expert update over a known horizon,
/// capped at one half so multipliers stay well inside (0, 2).
pub fn default_eta(k: usize, horizon: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Degenerate(
            "step size schedule needs at least two experts".into(),
        ));
    }
    if horizon == 0 {
        return Err(Error::Domain("horizon must be positive".into()));
    }
    Ok(((k as f64).ln() / horizon as f64).sqrt().min(0.5))
}

/// Regret bound of the update when tuned to the realized loss scale:
/// sqrt(|L| * ln K) + ln K for cumulative absolute loss |L|.
pub fn adaptive_regret_bound(cum_abs_loss: f64, k: usize) -> f64 {
    let lnk = (k as f64).ln();
    (cum_abs_loss.max(0.0) * lnk).sqrt() + lnk
}

/// A probability vector over arms together with its step size.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
    eta: f64,
}

impl WeightVector {
    pub fn uniform(n: usize, eta: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("weight vector needs at least one arm".into()));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::Domain(format!("step size {eta} must be positive")));
        }
        Ok(WeightVector {
            weights: vec![1.0 / n as f64; n],
            eta,
        })
    }

    pub fn from_weights(weights: Vec<f64>, eta: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Domain("weight vector needs at least one arm".into()));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::Domain(format!("step size {eta} must be positive")));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::Domain("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightVector { weights, eta })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Probability-weighted average of a loss row.
    pub fn expected_loss(&self, losses: &[f64]) -> f64 {
        self.weights.iter().zip(losses).map(|(w, l)| w * l).sum()
    }

    /// One multiplicative step on centered losses. Errors instead of
    /// producing a non-positive weight when eta times the largest centered
    /// loss reaches one.
    pub fn update(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.weights.len() {
            return Err(Error::Domain(format!(
                "{} losses for {} arms",
                losses.len(),
                self.weights.len()
            )));
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Domain("losses must be finite".into()));
        }
        let mean = self.expected_loss(losses);
        let max_abs = losses
            .iter()
            .map(|l| (l - mean).abs())
            .fold(0.0, f64::max);
        if self.eta * max_abs >= 1.0 {
            return Err(Error::StepSize {
                eta: self.eta,
                max_abs_loss: max_abs,
            });
        }
        for (w, &l) in self.weights.iter_mut().zip(losses) {
            *w *= 1.0 - self.eta * (l - mean);
        }
        // Centering preserves the total exactly in real arithmetic; keep
        // float drift from compounding over many arms and rounds.
        let sum: f64 = self.weights.iter().sum();
        assert!(
            (sum - 1.0).abs() <= 1e-9,
            "weight sum drifted to {sum} in one update"
        );
        if (sum - 1.0).abs() > 1e-13 {
            for w in &mut self.weights {
                *w /= sum;
            }
        }
        Ok(())
    }

    /// Samples an arm by inverse cdf in index order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            cum += w;
            if u < cum {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// Samples among the arms where `allowed` is true, with probabilities
    /// renormalized to the allowed mass. Falls back to a uniform choice in
    /// the measure-zero case where that mass has underflowed.
    pub fn sample_excluding<R: Rng + ?Sized>(&self, allowed: &[bool], rng: &mut R) -> usize {
        debug_assert_eq!(allowed.len(), self.weights.len());
        let total: f64 = self
            .weights
            .iter()
            .zip(allowed)
            .filter(|&(_, &a)| a)
            .map(|(w, _)| w)
            .sum();
        let count = allowed.iter().filter(|&&a| a).count();
        assert!(count > 0, "no arm left to sample");
        if total <= 0.0 {
            let pick = rng.random_range(0..count);
            return allowed
                .iter()
                .enumerate()
                .filter(|&(_, &a)| a)
                .nth(pick)
                .unwrap()
                .0;
        }
        let u: f64 = rng.random::<f64>() * total;
        let mut cum = 0.0;
        let mut last = 0;
        for (i, (&w, &a)) in self.weights.iter().zip(allowed).enumerate() {
            if !a {
                continue;
            }
            cum += w;
            if u < cum {
                return i;
            }
            last = i;
        }
        last
    }
}

/// C(n, r) in u128, saturating at u128::MAX on overflow.
pub fn binomial(n: u64, r: u64) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 1..=r {
        // Multiply before dividing; the running value is always an exact
        // binomial coefficient so the division is exact.
        match acc.checked_mul((n - r + i) as u128) {
            Some(v) => acc = v / i as u128,
            None => return u128::MAX,
        }
    }
    acc
}

/// Colexicographic indexing of the m-subsets of {0, ..., k-1}: subsets are
/// ordered by largest member, then next largest, and so on. The rank of a
/// sorted subset is the sum of C(member_i, i+1) over positions i.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubsetIndex {
    k: usize,
    m: usize,
    count: usize,
}

impl SubsetIndex {
    pub fn new(k: usize, m: usize) -> Result<Self> {
        if m == 0 || m > k {
            return Err(Error::Domain(format!(
                "cannot choose m = {m} from k = {k} experts"
            )));
        }
        let count = binomial(k as u64, m as u64);
        if count > SUBSET_CAP {
            return Err(Error::CombinatorialBlowup {
                subsets: count,
                cap: SUBSET_CAP,
            });
        }
        Ok(SubsetIndex {
            k,
            m,
            count: count as usize,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Rank of a sorted, distinct member list.
    pub fn rank(&self, members: &[usize]) -> usize {
        debug_assert_eq!(members.len(), self.m);
        debug_assert!(members.windows(2).all(|w| w[0] < w[1]));
        members
            .iter()
            .enumerate()
            .map(|(i, &s)| binomial(s as u64, i as u64 + 1) as usize)
            .sum()
    }

    /// Member list of a rank, by greedily peeling the largest position.
    pub fn unrank(&self, rank: usize) -> Vec<usize> {
        debug_assert!(rank < self.count);
        let mut members = vec![0; self.m];
        let mut rem = rank as u128;
        let mut upper = self.k;
        for i in (0..self.m).rev() {
            let mut s = upper - 1;
            while binomial(s as u64, i as u64 + 1) > rem {
                s -= 1;
            }
            rem -= binomial(s as u64, i as u64 + 1);
            members[i] = s;
            upper = s;
        }
        members
    }

    /// Visits every subset in rank order, reusing one member buffer.
    pub fn for_each_subset<F: FnMut(usize, &[usize])>(&self, mut f: F) {
        let mut members: Vec<usize> = (0..self.m).collect();
        let mut rank = 0;
        loop {
            f(rank, &members);
            rank += 1;
            if !self.advance(&mut members) {
                break;
            }
        }
        debug_assert_eq!(rank, self.count);
    }

    /// In-place colex successor; false once the last subset has been seen.
    fn advance(&self, members: &mut [usize]) -> bool {
        for i in 0..self.m {
            let next = members[i] + 1;
            let limit = if i + 1 < self.m {
                members[i + 1]
            } else {
                self.k
            };
            if next < limit {
                members[i] = next;
                for (j, slot) in members[..i].iter_mut().enumerate() {
                    *slot = j;
                }
                return true;
            }
        }
        false
    }
}

/// The m-subset learner: one weight per subset, updated with the members'
/// average loss.
#[derive(Debug, Clone)]
pub struct MetaWsu {
    index: SubsetIndex,
    weights: WeightVector,
    meta_losses: Vec<f64>,
}

impl MetaWsu {
    pub fn new(k: usize, m: usize, eta: f64) -> Result<Self> {
        let index = SubsetIndex::new(k, m)?;
        let weights = WeightVector::uniform(index.count(), eta)?;
        Ok(MetaWsu {
            index,
            weights,
            meta_losses: vec![0.0; index.count()],
        })
    }

    /// Builds with the horizon-tuned step size from [`meta_default_eta`].
    pub fn with_default_eta(k: usize, m: usize, horizon: usize) -> Result<Self> {
        let eta = meta_default_eta(k, m, horizon)?;
        Self::new(k, m, eta)
    }

    pub fn index(&self) -> &SubsetIndex {
        &self.index
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn eta(&self) -> f64 {
        self.weights.eta()
    }

    /// Probability that the sampled subset contains expert `j`.
    pub fn inclusion_probability(&self, j: usize) -> f64 {
        let mut p = 0.0;
        let w = self.weights.weights();
        self.index.for_each_subset(|rank, members| {
            if members.contains(&j) {
                p += w[rank];
            }
        });
        p
    }

    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> ExpertSet {
        let rank = self.weights.sample(rng);
        ExpertSet::from_sorted(self.index.unrank(rank))
    }

    /// Updates every subset's weight using its members' average loss.
    pub fn observe(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.index.k() {
            return Err(Error::Domain(format!(
                "{} losses for {} experts",
                row.len(),
                self.index.k()
            )));
        }
        if row.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Domain("losses must lie in [0,1]".into()));
        }
        let m = self.index.m() as f64;
        let meta = &mut self.meta_losses;
        self.index.for_each_subset(|rank, members| {
            meta[rank] = members.iter().map(|&j| row[j]).sum::<f64>() / m;
        });
        self.weights.update(meta)
    }
}

/// Step size sqrt(m * ln(K e / m) / T) for the subset learner, defined once
/// the horizon is long enough (T at least 4 m ln(K e / m)) for the final
/// regret bound to be meaningful.
pub fn meta_default_eta(k: usize, m: usize, horizon: usize) -> Result<f64> {
    if m == 0 || m > k {
        return Err(Error::Domain(format!(
            "cannot choose m = {m} from k = {k} experts"
        )));
    }
    let log_term = (k as f64 * std::f64::consts::E / m as f64).ln();
    let needed = 4.0 * m as f64 * log_term;
    if (horizon as f64) < needed {
        return Err(Error::HorizonTooShort {
            needed,
            got: horizon as f64,
            what: "subset learner default step size".into(),
        });
    }
    Ok((m as f64 * log_term / horizon as f64).sqrt())
}
