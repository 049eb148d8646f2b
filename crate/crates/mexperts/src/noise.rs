//! Perturbation distributions for follow-the-perturbed-leader.
//!
//! Every model here has density proportional to exp(-nu(z)) for a potential
//! nu, at unit scale; the learner multiplies draws by its step size instead of
//! reparameterizing the distribution. The incentive analysis needs two facts
//! about a model: whether |nu'| stays below a bound B, and whether the hazard
//! rate pdf/survival stays below the same B. The four kinds cover the three
//! regimes of interest:
//!
//! - Laplace: nu(z) = |z|, both bounds hold with B = 1.
//! - Hyperbolic: nu(z) = sqrt(1 + z^2), a smooth potential with the same B = 1.
//! - Gaussian: nu(z) = z^2 / 2, |nu'| unbounded; the negative control.
//! - Gumbel: nu(z) = z + exp(-z), hazard bounded by 1 yet |nu'| unbounded on
//!   the left tail, so a bounded hazard alone is not enough for the
//!   incentive guarantee.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::quad::adaptive_simpson;

/// Integration window for the hyperbolic normalizer and cdf. The density at
/// the window edge is below 2e-22, which is far under every tolerance used in
/// this crate.
const HYPERBOLIC_WINDOW: f64 = 50.0;

/// The perturbation distributions the learner knows how to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Laplace,
    Hyperbolic,
    Gaussian,
    Gumbel,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            NoiseKind::Laplace => "laplace",
            NoiseKind::Hyperbolic => "hyperbolic",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Gumbel => "gumbel",
        };
        f.write_str(name)
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "laplace" => Ok(NoiseKind::Laplace),
            "hyperbolic" => Ok(NoiseKind::Hyperbolic),
            "gaussian" | "normal" => Ok(NoiseKind::Gaussian),
            "gumbel" => Ok(NoiseKind::Gumbel),
            other => Err(Error::Config(format!(
                "unknown noise model '{other}' (expected laplace, hyperbolic, gaussian, or gumbel)"
            ))),
        }
    }
}

/// Result of scanning |nu'| over a grid.
#[derive(Debug, Clone, Copy)]
pub struct Condition1Report {
    /// Largest |nu'(z)| seen on the grid.
    pub max_abs_nu_prime: f64,
    /// True when the model advertises a bound B and the scan stayed below it.
    pub bounded: bool,
}

/// A perturbation distribution at unit scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    kind: NoiseKind,
    condition1_bound: Option<f64>,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind) -> Self {
        // B is the supremum of |nu'| where one exists; the unbounded kinds
        // advertise none and are rejected by the step-size rules downstream.
        let condition1_bound = match kind {
            NoiseKind::Laplace | NoiseKind::Hyperbolic => Some(1.0),
            NoiseKind::Gaussian | NoiseKind::Gumbel => None,
        };
        NoiseModel {
            kind,
            condition1_bound,
        }
    }

    pub fn laplace() -> Self {
        Self::new(NoiseKind::Laplace)
    }

    pub fn hyperbolic() -> Self {
        Self::new(NoiseKind::Hyperbolic)
    }

    pub fn gaussian() -> Self {
        Self::new(NoiseKind::Gaussian)
    }

    pub fn gumbel() -> Self {
        Self::new(NoiseKind::Gumbel)
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    /// The bound B with |nu'| <= B everywhere, if the model has one.
    pub fn condition1_bound(&self) -> Option<f64> {
        self.condition1_bound
    }

    /// The potential nu(z), with density proportional to exp(-nu(z)).
    pub fn nu(&self, z: f64) -> f64 {
        match self.kind {
            NoiseKind::Laplace => z.abs(),
            NoiseKind::Hyperbolic => z.hypot(1.0),
            NoiseKind::Gaussian => 0.5 * z * z,
            NoiseKind::Gumbel => z + (-z).exp(),
        }
    }

    /// Derivative of the potential. The Laplace potential has no derivative
    /// at 0; we take the symmetric subgradient 0 there.
    pub fn nu_prime(&self, z: f64) -> f64 {
        match self.kind {
            NoiseKind::Laplace => {
                if z == 0.0 {
                    0.0
                } else {
                    z.signum()
                }
            }
            NoiseKind::Hyperbolic => z / z.hypot(1.0),
            NoiseKind::Gaussian => z,
            NoiseKind::Gumbel => 1.0 - (-z).exp(),
        }
    }

    /// Normalizing constant Z with pdf(z) = exp(-nu(z)) / Z.
    pub fn normalizer(&self) -> f64 {
        match self.kind {
            NoiseKind::Laplace => 2.0,
            NoiseKind::Hyperbolic => hyperbolic_normalizer(),
            NoiseKind::Gaussian => (2.0 * std::f64::consts::PI).sqrt(),
            NoiseKind::Gumbel => 1.0,
        }
    }

    pub fn pdf(&self, z: f64) -> f64 {
        (-self.nu(z)).exp() / self.normalizer()
    }

    pub fn cdf(&self, z: f64) -> f64 {
        match self.kind {
            NoiseKind::Laplace => {
                if z < 0.0 {
                    0.5 * z.exp()
                } else {
                    1.0 - 0.5 * (-z).exp()
                }
            }
            NoiseKind::Hyperbolic => {
                if z <= 0.0 {
                    hyperbolic_mass_below(z)
                } else {
                    1.0 - hyperbolic_mass_below(-z)
                }
            }
            NoiseKind::Gaussian => 0.5 * erfc(-z / std::f64::consts::SQRT_2),
            NoiseKind::Gumbel => (-(-z).exp()).exp(),
        }
    }

    /// P(Z > z), computed tail-first so large z does not cancel.
    pub fn survival(&self, z: f64) -> f64 {
        match self.kind {
            NoiseKind::Laplace => {
                if z < 0.0 {
                    1.0 - 0.5 * z.exp()
                } else {
                    0.5 * (-z).exp()
                }
            }
            NoiseKind::Hyperbolic => self.cdf(-z),
            NoiseKind::Gaussian => 0.5 * erfc(z / std::f64::consts::SQRT_2),
            NoiseKind::Gumbel => -(-(-z).exp()).exp_m1(),
        }
    }

    /// Hazard rate pdf(z) / P(Z > z). Errors when the survival probability
    /// underflows and the ratio would be meaningless.
    pub fn hazard_rate(&self, z: f64) -> Result<f64> {
        match self.kind {
            // On the right half-line both pdf and survival are 0.5 exp(-z),
            // so the ratio is exactly one.
            NoiseKind::Laplace if z >= 0.0 => Ok(1.0),
            NoiseKind::Gumbel => {
                // With u = exp(-z), the ratio collapses to u / (exp(u) - 1),
                // which increases to 1 as z grows and never reaches it.
                let u = (-z).exp();
                Ok(u / u.exp_m1())
            }
            _ => {
                let s = self.survival(z);
                if !(s > 1e-300) {
                    return Err(Error::Overflow(format!(
                        "survival underflow at z = {z} for {} noise",
                        self.kind
                    )));
                }
                Ok(self.pdf(z) / s)
            }
        }
    }

    /// Hazard rate at each point of a strictly ascending grid.
    ///
    /// For the hyperbolic model the survival values come from one backward
    /// sweep that accumulates segment masses with a composite Simpson rule,
    /// which keeps the error proportional to the local tail mass instead of
    /// re-running an adaptive integral per grid point.
    pub fn hazard_on_grid(&self, grid: &[f64]) -> Result<Vec<f64>> {
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(
                "hazard grid must be strictly ascending".into(),
            ));
        }
        if self.kind != NoiseKind::Hyperbolic {
            return grid.iter().map(|&z| self.hazard_rate(z)).collect();
        }
        let n = grid.len();
        let mut out = vec![0.0; n];
        let mut survival = self.survival(grid[n - 1]);
        for i in (0..n).rev() {
            if i + 1 < n {
                survival += segment_mass(|z| self.pdf(z), grid[i], grid[i + 1]);
            }
            if !(survival > 1e-300) {
                return Err(Error::Overflow(format!(
                    "survival underflow at z = {} for hyperbolic noise",
                    grid[i]
                )));
            }
            out[i] = self.pdf(grid[i]) / survival;
        }
        Ok(out)
    }

    /// One draw at unit scale.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            NoiseKind::Laplace => sample_laplace(rng),
            NoiseKind::Hyperbolic => {
                // Rejection from the Laplace envelope exp(-|z|): accept with
                // probability exp(|z| - sqrt(1 + z^2)), which is at least
                // exp(-1), for an overall acceptance rate around 0.60.
                loop {
                    let z = sample_laplace(rng);
                    let u = open_unit(rng);
                    if u.ln() < z.abs() - z.hypot(1.0) {
                        return z;
                    }
                }
            }
            NoiseKind::Gaussian => StandardNormal.sample(rng),
            NoiseKind::Gumbel => -(-open_unit(rng).ln()).ln(),
        }
    }

    /// Scans |nu'| over a grid and compares against the advertised bound.
    /// Models without a bound report `bounded: false` regardless of the scan,
    /// since no finite grid can certify a supremum.
    pub fn check_condition1(&self, grid: &[f64]) -> Condition1Report {
        let max_abs_nu_prime = grid
            .iter()
            .map(|&z| self.nu_prime(z).abs())
            .fold(0.0, f64::max);
        let bounded = match self.condition1_bound {
            Some(b) => max_abs_nu_prime <= b * (1.0 + 1e-12),
            None => false,
        };
        Condition1Report {
            max_abs_nu_prime,
            bounded,
        }
    }

    /// Checks hazard <= bound on a grid, with a looser tolerance for the
    /// hyperbolic model whose survival comes from quadrature.
    pub fn verify_hazard_bound(&self, bound: f64, grid: &[f64]) -> Result<bool> {
        let tol = match self.kind {
            NoiseKind::Hyperbolic => 1e-6,
            _ => 1e-9,
        };
        let hazards = self.hazard_on_grid(grid)?;
        Ok(hazards.iter().all(|&h| h <= bound * (1.0 + tol)))
    }
}

fn sample_laplace<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = open_unit(rng);
    if u < 0.5 {
        (2.0 * u).ln()
    } else {
        -(2.0 * (1.0 - u)).ln()
    }
}

/// Uniform draw from the open interval (0, 1); inverse-cdf transforms take
/// logs of both u and 1 - u, so the endpoints must be excluded.
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// 2 K_1(1), the mass of exp(-sqrt(1 + z^2)) over the line. Computed once by
/// quadrature over the window plus an exponential bound on the two tails.
fn hyperbolic_normalizer() -> f64 {
    static Z: OnceLock<f64> = OnceLock::new();
    *Z.get_or_init(|| {
        let w = HYPERBOLIC_WINDOW;
        adaptive_simpson(&|z: f64| (-z.hypot(1.0)).exp(), -w, w, 1e-10) + 2.0 * (-w).exp()
    })
}

/// Unnormalized-then-normalized lower tail mass of the hyperbolic density for
/// z <= 0. The quadrature tolerance scales with exp(z) so the result keeps
/// relative accuracy deep into the tail.
fn hyperbolic_mass_below(z: f64) -> f64 {
    debug_assert!(z <= 0.0);
    let w = HYPERBOLIC_WINDOW;
    if z <= -w {
        // Below the window the Laplace envelope is tight to within 2e-24.
        return z.exp() / hyperbolic_normalizer();
    }
    let tol = 1e-12 * z.exp().max(1e-60);
    let mass = adaptive_simpson(&|t: f64| (-t.hypot(1.0)).exp(), -w, z, tol) + (-w).exp();
    mass / hyperbolic_normalizer()
}

/// Composite Simpson mass of `pdf` over one grid segment, with panels no
/// wider than 0.005 so the error stays a tiny multiple of the local mass.
fn segment_mass<F: Fn(f64) -> f64>(pdf: F, a: f64, b: f64) -> f64 {
    let panels = ((b - a) / 0.005).ceil().max(1.0) as usize;
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let hi = lo + h;
        let mid = 0.5 * (lo + hi);
        total += h / 6.0 * (pdf(lo) + 4.0 * pdf(mid) + pdf(hi));
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let n = ((hi - lo) / step).round() as usize;
        (0..=n).map(|i| lo + i as f64 * step).collect()
    }

    #[test]
    fn potentials_at_reference_points() {
        assert_eq!(NoiseModel::laplace().nu(-3.0), 3.0);
        assert!((NoiseModel::hyperbolic().nu(2.0) - 5.0f64.sqrt()).abs() < 1e-15);
        assert_eq!(NoiseModel::gaussian().nu(2.0), 2.0);
        assert_eq!(NoiseModel::gumbel().nu(0.0), 1.0);
    }

    #[test]
    fn nu_prime_matches_central_differences() {
        // Independent check of every closed-form derivative away from the
        // Laplace kink.
        let h = 1e-6;
        for model in [
            NoiseModel::laplace(),
            NoiseModel::hyperbolic(),
            NoiseModel::gaussian(),
            NoiseModel::gumbel(),
        ] {
            for &z in &[-3.2, -1.0, -0.4, 0.7, 1.0, 2.9] {
                let numeric = (model.nu(z + h) - model.nu(z - h)) / (2.0 * h);
                let exact = model.nu_prime(z);
                assert!(
                    (numeric - exact).abs() < 1e-6,
                    "{:?} at z = {z}: numeric {numeric}, exact {exact}",
                    model.kind()
                );
            }
        }
        assert_eq!(NoiseModel::laplace().nu_prime(0.0), 0.0);
    }

    #[test]
    fn condition1_bounds() {
        let zs = grid(-10.0, 10.0, 0.01);
        let laplace = NoiseModel::laplace().check_condition1(&zs);
        assert!(laplace.bounded);
        assert!((laplace.max_abs_nu_prime - 1.0).abs() < 1e-12);

        let hyper = NoiseModel::hyperbolic().check_condition1(&zs);
        assert!(hyper.bounded);
        assert!(hyper.max_abs_nu_prime < 1.0);

        let gauss = NoiseModel::gaussian().check_condition1(&zs);
        assert!(!gauss.bounded);
        assert!((gauss.max_abs_nu_prime - 10.0).abs() < 1e-12);

        // The Gumbel left tail blows up like exp(-z).
        let left = grid(-10.0, 0.0, 0.01);
        let gumbel = NoiseModel::gumbel().check_condition1(&left);
        assert!(!gumbel.bounded);
        assert!(gumbel.max_abs_nu_prime > 1e3);
    }

    #[test]
    fn hyperbolic_normalizer_value() {
        // 2 K_1(1) for the modified Bessel function of the second kind.
        let z = NoiseModel::hyperbolic().normalizer();
        assert!((z - 1.2038144603944692).abs() < 1e-9, "Z = {z}");
    }

    #[test]
    fn densities_integrate_to_one() {
        for model in [
            NoiseModel::laplace(),
            NoiseModel::hyperbolic(),
            NoiseModel::gaussian(),
            NoiseModel::gumbel(),
        ] {
            let mass = adaptive_simpson(&|z| model.pdf(z), -40.0, 40.0, 1e-10);
            assert!(
                (mass - 1.0).abs() < 1e-8,
                "{:?} total mass {mass}",
                model.kind()
            );
        }
    }

    #[test]
    fn cdf_reference_values() {
        assert_eq!(NoiseModel::laplace().cdf(0.0), 0.5);
        assert!((NoiseModel::laplace().cdf(1.0) - (1.0 - 0.5 * (-1.0f64).exp())).abs() < 1e-15);
        // Standard normal at 1.0; statrs's erfc is good to about 1e-11.
        assert!((NoiseModel::gaussian().cdf(1.0) - 0.8413447460685429).abs() < 1e-9);
        // Gumbel at its location parameter.
        assert!((NoiseModel::gumbel().cdf(0.0) - (-1.0f64).exp()).abs() < 1e-15);
        let h = NoiseModel::hyperbolic();
        assert!((h.cdf(0.0) - 0.5).abs() < 1e-10);
        assert!((h.cdf(30.0) + h.cdf(-30.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hyperbolic_cdf_matches_trapezoid_oracle() {
        // Re-integrate the density with a plain trapezoid rule as an
        // implementation-independent oracle.
        let model = NoiseModel::hyperbolic();
        let step = 1e-3;
        let zs = grid(-30.0, 5.0, step);
        let mut cum = 0.0;
        let mut prev = model.pdf(zs[0]);
        let mut worst: f64 = 0.0;
        for (i, &z) in zs.iter().enumerate().skip(1) {
            let cur = model.pdf(z);
            cum += 0.5 * (prev + cur) * step;
            prev = cur;
            if i % 500 == 0 {
                worst = worst.max((model.cdf(z) - cum).abs());
            }
        }
        // Trapezoid error over this range is O(step^2) ~ 1e-7.
        assert!(worst < 1e-6, "worst gap {worst}");
    }

    #[test]
    fn survival_is_complementary_and_positive() {
        for model in [
            NoiseModel::laplace(),
            NoiseModel::hyperbolic(),
            NoiseModel::gaussian(),
            NoiseModel::gumbel(),
        ] {
            for &z in &[-8.0, -1.5, 0.0, 1.5, 8.0] {
                let c = model.cdf(z);
                let s = model.survival(z);
                assert!(s > 0.0);
                assert!(
                    (c + s - 1.0).abs() < 1e-9,
                    "{:?} at {z}: cdf {c} + survival {s}",
                    model.kind()
                );
            }
        }
    }

    #[test]
    fn laplace_hazard_is_one_on_right_half_line() {
        let model = NoiseModel::laplace();
        for &z in &[0.0, 0.3, 1.0, 7.5, 20.0] {
            assert_eq!(model.hazard_rate(z).unwrap(), 1.0);
        }
        // Left of zero the hazard is strictly below one and increasing.
        let h = model.hazard_rate(-1.0).unwrap();
        let expect = 0.5 * (-1.0f64).exp() / (1.0 - 0.5 * (-1.0f64).exp());
        assert!((h - expect).abs() < 1e-15);
        assert!(h < 1.0);
    }

    #[test]
    fn gaussian_hazard_grows_without_bound() {
        let model = NoiseModel::gaussian();
        let mut last = 0.0;
        for &z in &[1.0, 2.0, 4.0, 8.0, 16.0] {
            let h = model.hazard_rate(z).unwrap();
            assert!(h > last);
            last = h;
        }
        // For large z the hazard tracks z itself.
        assert!(last > 16.0);
        assert!(!model.verify_hazard_bound(1.0, &grid(0.0, 5.0, 0.1)).unwrap());
    }

    #[test]
    fn gumbel_hazard_stays_below_one() {
        let model = NoiseModel::gumbel();
        let zs = grid(-20.0, 20.0, 0.01);
        let hazards = model.hazard_on_grid(&zs).unwrap();
        // Far into the left tail the ratio underflows to an honest zero.
        assert!(hazards.iter().all(|&h| (0.0..1.0).contains(&h)));
        // Approaches one from below as z grows.
        assert!(*hazards.last().unwrap() > 1.0 - 1e-6);
        assert!(model.verify_hazard_bound(1.0, &zs).unwrap());
    }

    #[test]
    fn bounded_models_pass_hazard_check() {
        let zs = grid(-20.0, 20.0, 0.01);
        assert!(NoiseModel::laplace().verify_hazard_bound(1.0, &zs).unwrap());
        assert!(NoiseModel::hyperbolic()
            .verify_hazard_bound(1.0, &zs)
            .unwrap());
    }

    #[test]
    fn hyperbolic_grid_hazard_matches_pointwise() {
        let model = NoiseModel::hyperbolic();
        let zs = grid(-5.0, 5.0, 0.25);
        let swept = model.hazard_on_grid(&zs).unwrap();
        for (&z, &h) in zs.iter().zip(&swept) {
            let direct = model.pdf(z) / model.survival(z);
            assert!(
                (h - direct).abs() < 1e-8 * direct.max(1.0),
                "z = {z}: sweep {h}, direct {direct}"
            );
        }
    }

    #[test]
    fn hazard_grid_rejects_unsorted_input() {
        let err = NoiseModel::laplace().hazard_on_grid(&[0.0, 0.0, 1.0]);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn hazard_survival_underflow_is_an_error() {
        let err = NoiseModel::gaussian().hazard_rate(60.0);
        assert!(matches!(err, Err(Error::Overflow(_))));
    }

    #[test]
    fn sampling_is_deterministic_under_a_seed() {
        for model in [
            NoiseModel::laplace(),
            NoiseModel::hyperbolic(),
            NoiseModel::gaussian(),
            NoiseModel::gumbel(),
        ] {
            let mut a = StdRng::seed_from_u64(7);
            let mut b = StdRng::seed_from_u64(7);
            let xs: Vec<f64> = (0..64).map(|_| model.sample(&mut a)).collect();
            let ys: Vec<f64> = (0..64).map(|_| model.sample(&mut b)).collect();
            assert_eq!(xs, ys);
        }
    }

    #[test]
    fn samples_match_cdf() {
        // Kolmogorov-Smirnov style check: empirical cdf against the model
        // cdf at a handful of probe points, 200k draws each.
        let n = 200_000;
        for model in [
            NoiseModel::laplace(),
            NoiseModel::hyperbolic(),
            NoiseModel::gaussian(),
            NoiseModel::gumbel(),
        ] {
            let mut rng = StdRng::seed_from_u64(0x5eed);
            let mut draws: Vec<f64> = (0..n).map(|_| model.sample(&mut rng)).collect();
            draws.sort_by(f64::total_cmp);
            for &q in &[-2.0, -0.5, 0.0, 0.5, 2.0] {
                let below = draws.partition_point(|&x| x <= q) as f64 / n as f64;
                let want = model.cdf(q);
                // Binomial standard error is about 0.0011; allow 4 sigma.
                assert!(
                    (below - want).abs() < 0.0045,
                    "{:?} at {q}: empirical {below}, cdf {want}",
                    model.kind()
                );
            }
        }
    }

    #[test]
    fn kind_round_trips_through_strings() {
        for kind in [
            NoiseKind::Laplace,
            NoiseKind::Hyperbolic,
            NoiseKind::Gaussian,
            NoiseKind::Gumbel,
        ] {
            let parsed: NoiseKind = kind.to_string().parse().unwrap();
            assert_eq!(parsed, kind);
        }
        assert!("cauchy".parse::<NoiseKind>().is_err());
    }
}
