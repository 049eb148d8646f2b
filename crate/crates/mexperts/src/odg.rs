//! Online distorted greedy: m weighted-score instances chained so that the
//! i-th instance learns to extend the prefix chosen by the first i-1.
//!
//! Instance i values expert j by the discounted residual plus the modular
//! anchor,
//!
//! ```text
//! reward_i(j) = (1 - 1/m)^(m-i) * g(j | prefix) + h(j)
//!             = (1 - loss_j) * (d * P + (1 - d) * Q_j)
//! ```
//!
//! where P is the product of the prefix's losses and Q_j the product of every
//! loss but j's. The factored form shows the reward is affine in expert j's
//! own loss with coefficients outside j's control, which is exactly why
//! truthful reporting stays optimal per instance. Rewards live in [0,1] and
//! are fed to the weighted-score update as losses via loss = 1 - reward.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{products_excluding_each, UtilityKind};
use crate::wsu::WeightVector;

/// The discount (1 - 1/m)^(m-i) applied to instance i's residual term,
/// with i counted from 1; the last instance is undiscounted.
pub fn discount_factor(m: usize, i: usize) -> Result<f64> {
    if i == 0 || i > m {
        return Err(Error::Domain(format!(
            "instance index {i} outside 1..={m}"
        )));
    }
    if i == m {
        // Also covers m = 1, where the base 1 - 1/m would be 0.
        return Ok(1.0);
    }
    Ok((1.0 - 1.0 / m as f64).powi((m - i) as i32))
}

/// The m chained learners. The utility kind decides the reward shape:
/// submodular rounds use the discounted-residual rewards above, modular
/// rounds reduce to g = 0 with every instance rewarded (1 - loss_j)/m.
#[derive(Debug, Clone)]
pub struct OdgState {
    instances: Vec<WeightVector>,
    kind: UtilityKind,
    k: usize,
}

impl OdgState {
    pub fn new(k: usize, m: usize, kind: UtilityKind, eta: f64) -> Result<Self> {
        if m == 0 || m > k {
            return Err(Error::Domain(format!(
                "cannot select m = {m} of k = {k} experts"
            )));
        }
        if let UtilityKind::Modular { m: budget } = kind {
            if budget != m {
                return Err(Error::Config(format!(
                    "modular budget {budget} disagrees with m = {m} instances"
                )));
            }
        }
        let instances = (0..m)
            .map(|_| WeightVector::uniform(k, eta))
            .collect::<Result<Vec<_>>>()?;
        Ok(OdgState { instances, kind, k })
    }

    /// Builds with the single-expert default step size for the horizon.
    pub fn with_default_eta(
        k: usize,
        m: usize,
        kind: UtilityKind,
        horizon: usize,
    ) -> Result<Self> {
        let eta = crate::wsu::default_eta(k, horizon)?;
        Self::new(k, m, kind, eta)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.instances.len()
    }

    pub fn kind(&self) -> UtilityKind {
        self.kind
    }

    pub fn instances(&self) -> &[WeightVector] {
        &self.instances
    }

    /// Ordered per-instance picks; each instance samples its weights
    /// conditioned on the experts its predecessors left available, so the
    /// round's set always has m distinct members.
    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut allowed = vec![true; self.k];
        let mut picks = Vec::with_capacity(self.m());
        for (i, inst) in self.instances.iter().enumerate() {
            let v = if i == 0 {
                inst.sample(rng)
            } else {
                inst.sample_excluding(&allowed, rng)
            };
            picks.push(v);
            allowed[v] = false;
        }
        picks
    }

    /// Updates every instance with its reward-derived loss row for the
    /// round. `picks` must be the ordered output of [`OdgState::select`].
    pub fn feedback(&mut self, row: &[f64], picks: &[usize]) -> Result<()> {
        if picks.len() != self.m() {
            return Err(Error::Domain(format!(
                "{} picks for {} instances",
                picks.len(),
                self.m()
            )));
        }
        if row.len() != self.k {
            return Err(Error::Domain(format!(
                "{} losses for {} experts",
                row.len(),
                self.k
            )));
        }
        let rows = instance_loss_rows(self.kind, row, picks)?;
        for (inst, loss_row) in self.instances.iter_mut().zip(&rows) {
            inst.update(loss_row)?;
        }
        Ok(())
    }
}

/// The loss row each instance sees for one round: entry j of row i is
/// 1 - reward_i(j) with the reward defined at the top of this module.
/// Experts already inside instance i's prefix keep their anchor reward h(j),
/// since their residual marginal is zero.
///
/// Exposed as a pure function so the incentive auditor can recompute rows
/// for hypothetical reports without touching learner state.
pub fn instance_loss_rows(
    kind: UtilityKind,
    row: &[f64],
    picks: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let k = row.len();
    let m = picks.len();
    if m == 0 || m > k {
        return Err(Error::Domain(format!("{m} picks for {k} experts")));
    }
    let mut seen = vec![false; k];
    for &v in picks {
        if v >= k {
            return Err(Error::Domain(format!("pick {v} out of range for {k} experts")));
        }
        if seen[v] {
            return Err(Error::Domain(format!("duplicate pick {v}")));
        }
        seen[v] = true;
    }
    if row.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::Domain("losses must lie in [0,1]".into()));
    }
    if let UtilityKind::Modular { m: budget } = kind {
        if budget != m {
            return Err(Error::Config(format!(
                "modular budget {budget} disagrees with {m} picks"
            )));
        }
    }
    // A single instance's reward telescopes to the whole round utility, so
    // its loss row is the raw one; returning it verbatim keeps the reduction
    // to the plain single-expert update exact to the last bit.
    if m == 1 {
        return Ok(vec![row.to_vec()]);
    }
    match kind {
        UtilityKind::Modular { .. } => {
            let shared: Vec<f64> = row.iter().map(|&l| 1.0 - (1.0 - l) / m as f64).collect();
            Ok(vec![shared; m])
        }
        UtilityKind::Submodular => {
            let excl = products_excluding_each(row);
            let mut in_prefix = vec![false; k];
            let mut prefix_product = 1.0;
            let mut rows = Vec::with_capacity(m);
            for i in 1..=m {
                let d = discount_factor(m, i)?;
                let mut loss_row = Vec::with_capacity(k);
                for j in 0..k {
                    let blend = if in_prefix[j] {
                        excl[j]
                    } else {
                        d * prefix_product + (1.0 - d) * excl[j]
                    };
                    let reward = (1.0 - row[j]) * blend;
                    debug_assert!(
                        (-1e-9..=1.0 + 1e-9).contains(&reward),
                        "instance {i} reward {reward} for expert {j} left [0,1]"
                    );
                    loss_row.push(1.0 - reward.clamp(0.0, 1.0));
                }
                rows.push(loss_row);
                let v = picks[i - 1];
                in_prefix[v] = true;
                prefix_product *= row[v];
            }
            Ok(rows)
        }
    }
}

/// Sum of the instance rewards at the experts actually picked. This is the
/// round's total absolute feedback magnitude; it never exceeds the round
/// utility of the selected set, which never exceeds one.
pub fn round_reward_sum(kind: UtilityKind, row: &[f64], picks: &[usize]) -> Result<f64> {
    let rows = instance_loss_rows(kind, row, picks)?;
    Ok(rows
        .iter()
        .zip(picks)
        .map(|(loss_row, &v)| 1.0 - loss_row[v])
        .sum())
}
