//! Quadratic scoring of probability reports and the set utilities built on it.
//!
//! A round assigns each expert a loss in [0,1]. For a selected set S of at
//! most m experts the learner earns one of two utilities:
//!
//! - modular:    f(S) = |S|/m - (1/m) * sum of losses in S,
//! - submodular: f(S) = 1 - product of losses in S,
//!
//! both normalized to [0,1]. The submodular utility admits a modular lower
//! bound h(S) that sums each member's marginal value into the set of all
//! other experts; the residual g = f - h is again monotone submodular and is
//! what the distorted-greedy learner discounts.

use std::fmt;

use crate::error::{Error, Result};

/// Quadratic loss of reporting probability `p` for a binary outcome:
/// (p - 1)^2 when the event happened, p^2 otherwise.
pub fn quadratic_loss(p: f64, outcome: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "report {p} outside [0,1] cannot be scored"
        )));
    }
    let d = if outcome { p - 1.0 } else { p };
    Ok(d * d)
}

/// Which of the two round utilities is in play. The modular variant carries
/// its own selection budget m because the normalization depends on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilityKind {
    Modular { m: usize },
    Submodular,
}

impl fmt::Display for UtilityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtilityKind::Modular { .. } => f.write_str("modular"),
            UtilityKind::Submodular => f.write_str("submodular"),
        }
    }
}

/// A set of expert indices, kept sorted and distinct. Indices are zero-based
/// in code; the text form used in CSV files and on the command line is
/// one-based with `|` separators, e.g. `1|4|7`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertSet {
    members: Vec<usize>,
}

impl ExpertSet {
    pub fn new(mut members: Vec<usize>) -> Result<Self> {
        members.sort_unstable();
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain("expert set contains a duplicate index".into()));
        }
        Ok(ExpertSet { members })
    }

    pub fn empty() -> Self {
        ExpertSet {
            members: Vec::new(),
        }
    }

    /// Construction from members already known to be sorted and distinct.
    pub(crate) fn from_sorted(members: Vec<usize>) -> Self {
        debug_assert!(members.windows(2).all(|w| w[0] < w[1]));
        ExpertSet { members }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.members.binary_search(&j).is_ok()
    }

    /// Parses the one-based `|`-separated text form.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(ExpertSet::empty());
        }
        let mut members = Vec::new();
        for part in s.split('|') {
            let id: usize = part
                .trim()
                .parse()
                .map_err(|_| Error::Domain(format!("bad expert id '{part}' in set '{s}'")))?;
            if id == 0 {
                return Err(Error::Domain(format!(
                    "expert ids in '{s}' are one-based; 0 is not valid"
                )));
            }
            members.push(id - 1);
        }
        ExpertSet::new(members)
    }
}

impl fmt::Display for ExpertSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &j) in self.members.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{}", j + 1)?;
        }
        Ok(())
    }
}

/// Losses for a whole run: `horizon` rows of `experts` entries, each in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    data: Vec<f64>,
    horizon: usize,
    experts: usize,
}

impl LossMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let horizon = rows.len();
        if horizon == 0 {
            return Err(Error::Domain("loss matrix needs at least one round".into()));
        }
        let experts = rows[0].len();
        if experts == 0 {
            return Err(Error::Domain("loss matrix needs at least one expert".into()));
        }
        let mut data = Vec::with_capacity(horizon * experts);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != experts {
                return Err(Error::Domain(format!(
                    "round {t} has {} losses, expected {experts}",
                    row.len()
                )));
            }
            for (j, &x) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Domain(format!(
                        "loss {x} for expert {j} in round {t} outside [0,1]"
                    )));
                }
            }
            data.extend_from_slice(row);
        }
        Ok(LossMatrix {
            data,
            horizon,
            experts,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.experts..(t + 1) * self.experts]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.experts)
    }

    /// Column sums, i.e. each expert's cumulative loss over the horizon.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.experts];
        for row in self.rows() {
            for (t, &x) in totals.iter_mut().zip(row) {
                *t += x;
            }
        }
        totals
    }
}

/// Round utility of a selected set. Panics on out-of-range indices or, for
/// the modular kind, on a set larger than its budget; those are caller bugs,
/// not data conditions.
pub fn utility(kind: UtilityKind, set: &ExpertSet, row: &[f64]) -> f64 {
    match kind {
        UtilityKind::Modular { m } => {
            assert!(m >= 1, "modular utility needs m >= 1");
            assert!(set.len() <= m, "set of {} exceeds budget m = {m}", set.len());
            let mut sum = 0.0;
            for &j in set.members() {
                sum += row[j];
            }
            (set.len() as f64 - sum) / m as f64
        }
        UtilityKind::Submodular => 1.0 - set_product(row, set.members()),
    }
}

/// Gain from adding expert `j` to `set`. For the modular utility this is
/// (1 - loss_j)/m independent of the set; for the submodular one it shrinks
/// as the set grows.
pub fn marginal_gain(kind: UtilityKind, j: usize, set: &ExpertSet, row: &[f64]) -> Result<f64> {
    if j >= row.len() {
        return Err(Error::Domain(format!(
            "expert {j} out of range for {} experts",
            row.len()
        )));
    }
    if set.contains(j) {
        return Err(Error::Domain(format!(
            "marginal gain of expert {j} already in the set"
        )));
    }
    match kind {
        UtilityKind::Modular { m } => {
            if set.len() + 1 > m {
                return Err(Error::Domain(format!(
                    "adding to a set of {} exceeds budget m = {m}",
                    set.len()
                )));
            }
            Ok((1.0 - row[j]) / m as f64)
        }
        UtilityKind::Submodular => Ok(set_product(row, set.members()) * (1.0 - row[j])),
    }
}

/// Per-expert values h(j) = (1 - loss_j) * product of all other losses, the
/// marginal of j into the set of everyone else. Summing them over any set
/// gives a modular function that never exceeds the submodular utility.
pub fn per_expert_lower_bound(row: &[f64]) -> Vec<f64> {
    products_excluding_each(row)
        .into_iter()
        .zip(row)
        .map(|(excl, &loss)| (1.0 - loss) * excl)
        .collect()
}

/// The modular lower bound h(S) of the submodular round utility.
pub fn modular_lower_bound(row: &[f64], set: &ExpertSet) -> f64 {
    let per = per_expert_lower_bound(row);
    set.members().iter().map(|&j| per[j]).sum()
}

/// Residual g(S) = f(S) - h(S) under the submodular utility; monotone
/// submodular and zero on the empty set, which is what the distorted-greedy
/// discounting needs.
pub fn residual(row: &[f64], set: &ExpertSet) -> f64 {
    utility(UtilityKind::Submodular, set, row) - modular_lower_bound(row, set)
}

/// Curvature of the cumulative submodular utility F = sum of rounds:
/// 1 - min_j F(j | everyone else) / F({j}), skipping experts with F({j}) = 0.
/// Errors when every expert is skipped, because then the ratio is undefined
/// everywhere.
pub fn curvature(losses: &LossMatrix) -> Result<f64> {
    let k = losses.experts();
    let mut singleton = vec![0.0; k];
    let mut into_rest = vec![0.0; k];
    for row in losses.rows() {
        let excl = products_excluding_each(row);
        for j in 0..k {
            singleton[j] += 1.0 - row[j];
            into_rest[j] += (1.0 - row[j]) * excl[j];
        }
    }
    let mut min_ratio = f64::INFINITY;
    for j in 0..k {
        if singleton[j] > 0.0 {
            min_ratio = min_ratio.min(into_rest[j] / singleton[j]);
        }
    }
    if !min_ratio.is_finite() {
        return Err(Error::Degenerate(
            "every expert has zero cumulative value; curvature is undefined".into(),
        ));
    }
    Ok((1.0 - min_ratio).clamp(0.0, 1.0))
}

/// Approximation ratio the regret is measured against: 1 for the modular
/// utility, 1 - c/e for the submodular one with curvature c.
pub fn alpha_for(kind: UtilityKind, losses: &LossMatrix) -> Result<f64> {
    match kind {
        UtilityKind::Modular { .. } => Ok(1.0),
        UtilityKind::Submodular => {
            let c = curvature(losses)?;
            Ok(1.0 - c / std::f64::consts::E)
        }
    }
}

/// Product of the selected losses. Above 30 factors the accumulation moves
/// to the log domain, short-circuiting on exact zeros, so long products do
/// not underflow pairwise.
pub(crate) fn set_product(row: &[f64], members: &[usize]) -> f64 {
    if members.len() <= 30 {
        members.iter().map(|&j| row[j]).product()
    } else {
        let mut log_sum = 0.0;
        for &j in members {
            if row[j] == 0.0 {
                return 0.0;
            }
            log_sum += row[j].ln();
        }
        log_sum.exp()
    }
}

/// For each j, the product of every loss except j's, without dividing.
pub(crate) fn products_excluding_each(row: &[f64]) -> Vec<f64> {
    let k = row.len();
    if k <= 30 {
        // Prefix/suffix products; exact zeros fall out naturally.
        let mut pre = vec![1.0; k + 1];
        for i in 0..k {
            pre[i + 1] = pre[i] * row[i];
        }
        let mut suf = 1.0;
        let mut out = vec![0.0; k];
        for i in (0..k).rev() {
            out[i] = pre[i] * suf;
            suf *= row[i];
        }
        out
    } else {
        let zeros = row.iter().filter(|&&x| x == 0.0).count();
        match zeros {
            0 => {
                let log_sum: f64 = row.iter().map(|x| x.ln()).sum();
                row.iter().map(|x| (log_sum - x.ln()).exp()).collect()
            }
            1 => {
                let log_sum: f64 = row.iter().filter(|&&x| x > 0.0).map(|x| x.ln()).sum();
                row.iter()
                    .map(|&x| if x == 0.0 { log_sum.exp() } else { 0.0 })
                    .collect()
            }
            _ => vec![0.0; k],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subsets(k: usize) -> Vec<Vec<usize>> {
        (0..1u32 << k)
            .map(|mask| (0..k).filter(|&j| mask >> j & 1 == 1).collect())
            .collect()
    }

    #[test]
    fn quadratic_loss_values() {
        assert!((quadratic_loss(0.7, true).unwrap() - 0.09).abs() < 1e-15);
        assert!((quadratic_loss(0.7, false).unwrap() - 0.49).abs() < 1e-15);
        assert_eq!(quadratic_loss(0.0, false).unwrap(), 0.0);
        assert_eq!(quadratic_loss(0.0, true).unwrap(), 1.0);
        assert!(matches!(quadratic_loss(1.2, true), Err(Error::Domain(_))));
        assert!(matches!(quadratic_loss(-0.1, false), Err(Error::Domain(_))));
    }

    #[test]
    fn modular_utility_example() {
        let set = ExpertSet::new(vec![0, 2]).unwrap();
        let row = [0.1, 0.5, 0.3];
        let f = utility(UtilityKind::Modular { m: 2 }, &set, &row);
        assert!((f - 0.8).abs() < 1e-15);
        assert_eq!(utility(UtilityKind::Modular { m: 2 }, &ExpertSet::empty(), &row), 0.0);
    }

    #[test]
    fn submodular_utility_example() {
        let set = ExpertSet::new(vec![0, 1]).unwrap();
        let f = utility(UtilityKind::Submodular, &set, &[0.2, 0.5]);
        assert!((f - 0.9).abs() < 1e-15);
        assert_eq!(utility(UtilityKind::Submodular, &ExpertSet::empty(), &[0.2, 0.5]), 0.0);
    }

    #[test]
    fn modular_gain_ignores_the_set() {
        let row = [0.3, 0.6, 0.9, 0.2];
        let kind = UtilityKind::Modular { m: 3 };
        let empty = ExpertSet::empty();
        let some = ExpertSet::new(vec![1, 3]).unwrap();
        let a = marginal_gain(kind, 0, &empty, &row).unwrap();
        let b = marginal_gain(kind, 0, &some, &row).unwrap();
        assert_eq!(a, b);
        assert!((a - 0.7 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn marginal_gain_rejects_members_and_bad_indices() {
        let set = ExpertSet::new(vec![1]).unwrap();
        let row = [0.5, 0.5];
        assert!(matches!(
            marginal_gain(UtilityKind::Submodular, 1, &set, &row),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            marginal_gain(UtilityKind::Submodular, 5, &set, &row),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn submodular_gains_diminish() {
        // Exhaustive check on a fixed row: the gain of j into S is at least
        // its gain into any superset of S.
        let row = [0.15, 0.4, 0.65, 0.8, 0.95];
        let k = row.len();
        for s in subsets(k) {
            for t in subsets(k) {
                if !s.iter().all(|j| t.contains(j)) {
                    continue;
                }
                for j in 0..k {
                    if t.contains(&j) {
                        continue;
                    }
                    let gs = marginal_gain(
                        UtilityKind::Submodular,
                        j,
                        &ExpertSet::new(s.clone()).unwrap(),
                        &row,
                    )
                    .unwrap();
                    let gt = marginal_gain(
                        UtilityKind::Submodular,
                        j,
                        &ExpertSet::new(t.clone()).unwrap(),
                        &row,
                    )
                    .unwrap();
                    assert!(gs >= gt - 1e-12, "gain grew from {gs} to {gt}");
                }
            }
        }
    }

    #[test]
    fn lower_bound_stays_below_utility() {
        let row = [0.25, 0.5, 0.7, 0.9];
        for s in subsets(row.len()) {
            let set = ExpertSet::new(s).unwrap();
            let h = modular_lower_bound(&row, &set);
            let f = utility(UtilityKind::Submodular, &set, &row);
            assert!(h <= f + 1e-12, "h = {h} above f = {f} for {set}");
        }
        // Exact on singletons of a two-expert row where each marginal is the
        // whole story: h({0}) = (1-a) * b = f(0 | {1}).
        let h = modular_lower_bound(&[0.2, 0.5], &ExpertSet::new(vec![0]).unwrap());
        assert!((h - 0.4).abs() < 1e-15);
    }

    #[test]
    fn residual_is_monotone_and_zero_on_empty() {
        let row = [0.3, 0.55, 0.8];
        assert_eq!(residual(&row, &ExpertSet::empty()), 0.0);
        for s in subsets(row.len()) {
            let set = ExpertSet::new(s.clone()).unwrap();
            let g = residual(&row, &set);
            assert!(g >= -1e-12);
            for j in 0..row.len() {
                if set.contains(j) {
                    continue;
                }
                let mut bigger = s.clone();
                bigger.push(j);
                let g2 = residual(&row, &ExpertSet::new(bigger).unwrap());
                assert!(g2 >= g - 1e-12, "residual shrank when adding {j}");
            }
        }
    }

    #[test]
    fn curvature_example() {
        let m = LossMatrix::from_rows(vec![vec![0.2, 0.5]]).unwrap();
        let c = curvature(&m).unwrap();
        assert!((c - 0.8).abs() < 1e-12, "c = {c}");
    }

    #[test]
    fn curvature_skips_worthless_experts() {
        // Expert 1 always has loss 1 and contributes nothing; only expert 0
        // enters the minimum. Ratio for expert 0: (0.5 * 1.0) / 0.5 = 1.
        let m = LossMatrix::from_rows(vec![vec![0.5, 1.0]]).unwrap();
        let c = curvature(&m).unwrap();
        assert!(c.abs() < 1e-12, "c = {c}");
    }

    #[test]
    fn curvature_of_all_ones_is_degenerate() {
        let m = LossMatrix::from_rows(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(curvature(&m), Err(Error::Degenerate(_))));
    }

    #[test]
    fn alpha_for_both_kinds() {
        let m = LossMatrix::from_rows(vec![vec![0.2, 0.5]]).unwrap();
        assert_eq!(alpha_for(UtilityKind::Modular { m: 1 }, &m).unwrap(), 1.0);
        let a = alpha_for(UtilityKind::Submodular, &m).unwrap();
        assert!((a - (1.0 - 0.8 / std::f64::consts::E)).abs() < 1e-12);
    }

    #[test]
    fn long_products_agree_with_direct_evaluation() {
        // 40 experts forces the log-domain path; compare against the naive
        // product, which is still well inside f64 range here.
        let row: Vec<f64> = (0..40).map(|i| 0.55 + 0.01 * (i % 10) as f64).collect();
        let direct: f64 = row.iter().product();
        let via = set_product(&row, &(0..40).collect::<Vec<_>>());
        assert!((via - direct).abs() < 1e-12 * direct);

        let excl = products_excluding_each(&row);
        for j in 0..row.len() {
            let naive: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(_, &x)| x)
                .product();
            assert!((excl[j] - naive).abs() < 1e-12 * naive, "expert {j}");
        }
    }

    #[test]
    fn exclusion_products_handle_exact_zeros() {
        let mut row = vec![0.5; 35];
        row[7] = 0.0;
        let excl = products_excluding_each(&row);
        for (j, &p) in excl.iter().enumerate() {
            if j == 7 {
                // Log-domain round trip costs a few ulp of relative accuracy.
                assert!((p - 0.5f64.powi(34)).abs() < 1e-12 * p);
            } else {
                assert_eq!(p, 0.0);
            }
        }
        row[20] = 0.0;
        assert!(products_excluding_each(&row).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn expert_set_text_form_is_one_based() {
        let set = ExpertSet::new(vec![6, 0, 3]).unwrap();
        assert_eq!(set.to_string(), "1|4|7");
        assert_eq!(ExpertSet::parse("1|4|7").unwrap(), set);
        assert_eq!(ExpertSet::parse("").unwrap(), ExpertSet::empty());
        assert!(ExpertSet::parse("0|2").is_err());
        assert!(ExpertSet::parse("2|x").is_err());
        assert!(ExpertSet::new(vec![1, 1]).is_err());
    }

    #[test]
    fn loss_matrix_validation() {
        assert!(LossMatrix::from_rows(vec![]).is_err());
        assert!(LossMatrix::from_rows(vec![vec![0.1], vec![0.1, 0.2]]).is_err());
        assert!(LossMatrix::from_rows(vec![vec![1.5]]).is_err());
        let m = LossMatrix::from_rows(vec![vec![0.1, 0.9], vec![0.3, 0.4]]).unwrap();
        assert_eq!(m.horizon(), 2);
        assert_eq!(m.experts(), 2);
        assert_eq!(m.row(1), &[0.3, 0.4]);
        let totals = m.cumulative();
        assert!((totals[0] - 0.4).abs() < 1e-15);
        assert!((totals[1] - 1.3).abs() < 1e-15);
    }
}
