//! Continuous-time absorbing diffusion over the code alphabet.
//!
//! The forward process runs a continuous-time Markov chain that moves all
//! probability mass towards the mask state. Under the log-linear schedule
//! adopted here (horizon `T`, rate `sigma(t) = 1/(T - t)`), the absorption
//! probability is exactly `lambda(t) = t / T`, and the single-position
//! marginal has the closed form `(1 - lambda) * p0` on real codes with the
//! remainder on the mask.
//!
//! Besides the corruption used in training, this module carries two exact
//! small-alphabet oracles: a fixed-step integrator for the Kolmogorov
//! forward equation and the reverse transition rate matrix construction.
//! Both exist to validate the closed forms and the sampler, not to scale.

use rand::Rng as _;
use thiserror::Error;

use crate::grid::CodeGrid;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("time {t} too close to the horizon {horizon}: the absorbing rate diverges")]
    RateDiverges { t: f64, horizon: f64 },
    #[error("reverse rate singular: state {state} has zero mass but nonzero forward rate")]
    Singularity { state: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// Log-linear absorbing noise schedule with horizon `T`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSchedule {
    horizon: f64,
}

impl NoiseSchedule {
    pub fn new(horizon: f64) -> Self {
        assert!(horizon > 0.0 && horizon.is_finite());
        NoiseSchedule { horizon }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Instantaneous absorption rate `1/(T - t)`; diverges at the horizon.
    pub fn sigma(&self, t: f64) -> f64 {
        1.0 / (self.horizon - t)
    }

    /// Probability that a position has been absorbed by time `t`.
    pub fn lambda_at(&self, t: f64) -> Result<f64, DiffusionError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(DiffusionError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(t / self.horizon)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::new(1.0)
    }
}

/// Probability vector over the K real codes plus the mask (last entry).
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DiffusionError> {
        if probs.len() < 2 {
            return Err(DiffusionError::InvalidDistribution(format!(
                "need at least 2 states, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DiffusionError::InvalidDistribution(
                "negative or non-finite entry".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(DiffusionError::InvalidDistribution(format!(
                "sums to {sum}, expected 1"
            )));
        }
        Ok(Distribution { probs })
    }

    /// Point mass on the mask state for an alphabet of `k` real codes.
    pub fn delta_mask(k: usize) -> Self {
        let mut probs = vec![0.0; k + 1];
        probs[k] = 1.0;
        Distribution { probs }
    }

    /// Number of real codes (mask excluded).
    pub fn num_codes(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mask_mass(&self) -> f64 {
        *self.probs.last().unwrap()
    }
}

/// Independently replace each position by the mask with probability `lam`.
/// Positions consume randomness in row-major (frame, depth) order.
pub fn forward_corrupt(codes: &CodeGrid, lam: f64, rng: &mut Rng) -> CodeGrid {
    assert!((0.0..=1.0).contains(&lam), "lam outside [0, 1]");
    assert!(!codes.contains_mask(), "forward_corrupt input must be mask-free");
    let mut out = codes.clone();
    let mask = out.mask_value();
    for i in 0..out.frames() {
        for j in 0..out.depths() {
            if rng.gen::<f64>() < lam {
                out.set(i, j, mask);
            }
        }
    }
    out
}

/// The absorbing transition rate matrix over K real codes plus mask:
/// -1 on the first K diagonal entries, +1 in the mask row below them,
/// zeros elsewhere. Stored row-major, `q[row][col]` = rate into `row`
/// from `col`; all column sums are zero.
pub fn absorbing_rate_matrix(k: usize) -> Vec<Vec<f64>> {
    assert!(k >= 1);
    let n = k + 1;
    let mut q = vec![vec![0.0; n]; n];
    for c in 0..k {
        q[c][c] = -1.0;
        q[k][c] = 1.0;
    }
    q
}

/// Step floor for the forward-equation integrator, as a fraction of the
/// horizon.
pub const FORWARD_ODE_STEP_FRACTION: f64 = 1e-4;

/// Largest integration target, as a fraction of the horizon. The absorbing
/// rate diverges at the horizon itself, so the oracle refuses to integrate
/// into the singular endpoint.
pub const FORWARD_ODE_MAX_TIME_FRACTION: f64 = 0.999;

/// Integrate the Kolmogorov forward equation `dp/dt = sigma(t) Q p` from 0
/// to `t` with a classical 4th-order fixed-step method. Exactness oracle
/// for small alphabets.
pub fn solve_forward_exact(
    p0: &Distribution,
    sched: &NoiseSchedule,
    t: f64,
) -> Result<Distribution, DiffusionError> {
    if !(0.0..=sched.horizon()).contains(&t) {
        return Err(DiffusionError::TimeOutOfRange {
            t,
            horizon: sched.horizon(),
        });
    }
    if t > FORWARD_ODE_MAX_TIME_FRACTION * sched.horizon() {
        return Err(DiffusionError::RateDiverges {
            t,
            horizon: sched.horizon(),
        });
    }
    if t == 0.0 {
        return Ok(p0.clone());
    }

    let k = p0.num_codes();
    let q = absorbing_rate_matrix(k);
    let deriv = |time: f64, p: &[f64], out: &mut [f64]| {
        let sigma = sched.sigma(time);
        for (row, qr) in q.iter().enumerate() {
            out[row] = sigma * qr.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
        }
    };

    let h_max = FORWARD_ODE_STEP_FRACTION * sched.horizon();
    let steps = (t / h_max).ceil() as usize;
    let h = t / steps as f64;
    let n = k + 1;
    let mut p = p0.probs().to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for step in 0..steps {
        let t0 = step as f64 * h;
        deriv(t0, &p, &mut k1);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * h * k1[i];
        }
        deriv(t0 + 0.5 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * h * k2[i];
        }
        deriv(t0 + 0.5 * h, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = p[i] + h * k3[i];
        }
        deriv(t0 + h, &tmp, &mut k4);
        for i in 0..n {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }

    // Guard against integration drift before revalidating.
    let sum: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v = (*v / sum).max(0.0);
    }
    Distribution::new(p)
}

/// Closed-form marginal of the absorbing process for a mask-free-or-not
/// initial distribution: real codes decay by `(1 - lambda)`, the mask
/// absorbs the rest.
pub fn closed_form_marginal(p0: &Distribution, lam: f64) -> Distribution {
    let k = p0.num_codes();
    let mut probs = Vec::with_capacity(k + 1);
    for c in 0..k {
        probs.push((1.0 - lam) * p0.probs()[c]);
    }
    probs.push(1.0 - (1.0 - lam) * (1.0 - p0.mask_mass()));
    Distribution { probs }
}

/// Reverse transition rate matrix at time `t` given the forward marginal
/// `p_t`: off-diagonal entries `(p_t[m] / p_t[n]) * Q_t[n][m]`, diagonal
/// set to the negative column sums. States with zero mass and zero inbound
/// forward rate get outgoing reverse rate zero; zero mass with nonzero
/// forward rate is a genuine singularity.
pub fn reverse_rate_matrix(
    p_t: &Distribution,
    sched: &NoiseSchedule,
    t: f64,
) -> Result<Vec<Vec<f64>>, DiffusionError> {
    if !(0.0..sched.horizon()).contains(&t) {
        return Err(DiffusionError::TimeOutOfRange {
            t,
            horizon: sched.horizon(),
        });
    }
    let k = p_t.num_codes();
    let n = k + 1;
    let sigma = sched.sigma(t);
    let q_absorb = absorbing_rate_matrix(k);
    let p = p_t.probs();

    let mut rev = vec![vec![0.0; n]; n];
    for from in 0..n {
        for to in 0..n {
            if from == to {
                continue;
            }
            // rev[to][from] = (p[to] / p[from]) * Q_t[from][to].
            let fwd = sigma * q_absorb[from][to];
            if fwd == 0.0 {
                continue;
            }
            if p[from] == 0.0 {
                if p[to] == 0.0 {
                    continue; // unreachable under the reverse process
                }
                return Err(DiffusionError::Singularity { state: from });
            }
            rev[to][from] = p[to] / p[from] * fwd;
        }
    }
    for col in 0..n {
        let col_sum: f64 = (0..n).filter(|&r| r != col).map(|r| rev[r][col]).sum();
        rev[col][col] = -col_sum;
    }
    Ok(rev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn random_code_distribution(k: usize, rng: &mut crate::rng::Rng) -> Distribution {
        // No initial mask mass.
        let mut probs: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let sum: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= sum;
        }
        probs.push(0.0);
        Distribution::new(probs).unwrap()
    }

    #[test]
    fn lambda_endpoints_and_midpoint() {
        let sched = NoiseSchedule::default();
        assert_eq!(sched.lambda_at(0.0).unwrap(), 0.0);
        assert_eq!(sched.lambda_at(1.0).unwrap(), 1.0);
        assert_eq!(sched.lambda_at(0.5).unwrap(), 0.5);
        assert!(sched.lambda_at(1.5).is_err());
        assert!(sched.lambda_at(-0.1).is_err());
    }

    #[test]
    fn lambda_strictly_increasing() {
        let sched = NoiseSchedule::new(2.0);
        let mut prev = -1.0;
        for i in 0..=100 {
            let t = 2.0 * i as f64 / 100.0;
            let lam = sched.lambda_at(t).unwrap();
            assert!(lam > prev);
            prev = lam;
        }
    }

    #[test]
    fn corrupt_extremes() {
        let grid = CodeGrid::filled(5, 3, 4, 2);
        let mut rng = rng_from_seed(0);
        let same = forward_corrupt(&grid, 0.0, &mut rng);
        assert_eq!(same, grid);
        let gone = forward_corrupt(&grid, 1.0, &mut rng);
        assert_eq!(gone.mask_count(), 15);
    }

    #[test]
    fn corrupt_matches_binomial_concentration() {
        let grid = CodeGrid::filled(100, 100, 4, 1);
        let mut rng = rng_from_seed(99);
        let lam = 0.3;
        let corrupted = forward_corrupt(&grid, lam, &mut rng);
        let frac = corrupted.mask_count() as f64 / 10_000.0;
        let sigma = (lam * (1.0 - lam) / 10_000.0_f64).sqrt();
        assert!(
            (frac - lam).abs() < 3.0 * sigma,
            "empirical {frac} vs {lam} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn rate_matrix_k1_pattern() {
        let q = absorbing_rate_matrix(1);
        assert_eq!(q, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn rate_matrix_mask_row_and_conservation() {
        let q = absorbing_rate_matrix(3);
        assert_eq!(q[3], vec![1.0, 1.0, 1.0, 0.0]);
        for col in 0..4 {
            let sum: f64 = (0..4).map(|row| q[row][col]).sum();
            assert_eq!(sum, 0.0);
        }
        // Off-diagonal entries non-negative.
        for (r, row) in q.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if r != c {
                    assert!(v >= 0.0);
                }
            }
        }
    }

    #[test]
    fn integrator_identity_at_zero() {
        let sched = NoiseSchedule::default();
        let p0 = Distribution::new(vec![0.25, 0.75, 0.0]).unwrap();
        assert_eq!(solve_forward_exact(&p0, &sched, 0.0).unwrap(), p0);
    }

    #[test]
    fn integrator_matches_closed_form() {
        let sched = NoiseSchedule::default();
        let mut rng = rng_from_seed(4);
        for k in [2usize, 4, 8] {
            for _ in 0..20 {
                let p0 = random_code_distribution(k, &mut rng);
                let t = rng.gen_range(0.0..0.95);
                let numeric = solve_forward_exact(&p0, &sched, t).unwrap();
                let lam = sched.lambda_at(t).unwrap();
                let analytic = closed_form_marginal(&p0, lam);
                for (a, b) in numeric.probs().iter().zip(analytic.probs()) {
                    assert!(
                        (a - b).abs() < 1e-8,
                        "K={k} t={t}: integrator {a} vs closed form {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn mask_point_mass_is_fixed() {
        let sched = NoiseSchedule::default();
        let p0 = Distribution::delta_mask(3);
        for t in [0.1, 0.5, 0.9] {
            let p = solve_forward_exact(&p0, &sched, t).unwrap();
            assert!((p.mask_mass() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn integrator_rejects_singular_endpoint() {
        let sched = NoiseSchedule::default();
        let p0 = Distribution::delta_mask(2);
        assert!(matches!(
            solve_forward_exact(&p0, &sched, 1.0),
            Err(DiffusionError::RateDiverges { .. })
        ));
    }

    #[test]
    fn reverse_rates_uniform_case() {
        // Uniform over K real codes scaled by (1 - lambda), mask mass
        // lambda: the mask->k rate is sigma * (1 - lambda) / (K * lambda).
        let sched = NoiseSchedule::default();
        let k = 4;
        let t = 0.4;
        let lam = 0.4;
        let mut probs = vec![(1.0 - lam) / k as f64; k];
        probs.push(lam);
        let p_t = Distribution::new(probs).unwrap();
        let rev = reverse_rate_matrix(&p_t, &sched, t).unwrap();
        let expected = sched.sigma(t) * (1.0 - lam) / (k as f64 * lam);
        for code in 0..k {
            assert!(
                (rev[code][k] - expected).abs() < 1e-12,
                "mask->{code} rate {} vs {expected}",
                rev[code][k]
            );
        }
    }

    #[test]
    fn reverse_rates_conserve_and_only_unabsorb() {
        let sched = NoiseSchedule::default();
        let p_t = Distribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let t = 0.3;
        let rev = reverse_rate_matrix(&p_t, &sched, t).unwrap();
        let n = 4;
        for col in 0..n {
            let sum: f64 = (0..n).map(|row| rev[row][col]).sum();
            assert!(sum.abs() < 1e-12, "column {col} sums to {sum}");
        }
        for (r, row) in rev.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if r != c {
                    assert!(v >= 0.0);
                    // Transitions only leave the mask column.
                    if c != n - 1 {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn reverse_rate_singularity_named() {
        let sched = NoiseSchedule::default();
        // Mask mass zero while real codes still carry mass at t > 0.
        let p_t = Distribution::new(vec![0.5, 0.5, 0.0]).unwrap();
        match reverse_rate_matrix(&p_t, &sched, 0.25) {
            Err(DiffusionError::Singularity { state }) => assert_eq!(state, 2),
            other => panic!("expected singularity, got {other:?}"),
        }
    }

    #[test]
    fn reverse_rate_zero_mass_zero_numerator_is_zero() {
        let sched = NoiseSchedule::default();
        // All mass on the mask: rates out of the mask have zero numerators.
        let p_t = Distribution::delta_mask(2);
        let rev = reverse_rate_matrix(&p_t, &sched, 0.5).unwrap();
        for row in &rev {
            for &v in row {
                assert_eq!(v, 0.0);
            }
        }
    }
}
