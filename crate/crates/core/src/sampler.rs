//! Reverse-time generation from the fully absorbed grid.
//!
//! Each reverse step over the interval (s, t] treats positions
//! independently: an unmasked position keeps its code, a masked position
//! unmasks with probability `(t - s) / t` and then draws a clean code from
//! the model's predicted row, and the final step (s = 0) unmasks
//! everything. Because the model's prediction depends only on the current
//! grid and the conditioning, a step that unmasked nothing leaves the
//! prediction valid, so the sampler reuses it and counts fewer function
//! evaluations (NFE) than steps.

use rand::Rng as _;
use serde::Serialize;
use thiserror::Error;

use crate::grid::CodeGrid;
use crate::models::{grid_from_index, ConditionalModel, ConditionalProbs, ModelError};
use crate::rng::{rng_from_seed, Rng};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("conditioning grid has {masked} masked position(s); noisy codes must be mask-free")]
    MaskedConditioning { masked: usize },
    #[error("invalid step times: need 0 <= s < t <= horizon, got s={s}, t={t}")]
    InvalidTimes { t: f64, s: f64 },
    #[error("model output row at (frame {frame}, depth {depth}) invalid: {detail}")]
    ModelOutput {
        frame: usize,
        depth: usize,
        detail: String,
    },
    #[error("model evaluation failed at step {step}: {source}")]
    Model {
        step: usize,
        #[source]
        source: ModelError,
    },
    #[error("instance too large to enumerate: {needed} grids exceeds limit {limit}")]
    Capacity { needed: u128, limit: u128 },
}

/// How a masked position picks its code once the step decides to unmask it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// Draw from the predicted row (the transition probability itself).
    #[default]
    Categorical,
    /// Take the row argmax; ablation only, excluded from exactness checks.
    Argmax,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub decode_mode: DecodeMode,
    /// Reuse the previous prediction when the previous step unmasked
    /// nothing. Disabling forces one evaluation per step; outputs are
    /// identical for a deterministic model and the same seed.
    pub cache_enabled: bool,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(n_steps: usize, seed: u64) -> Self {
        assert!(n_steps >= 1);
        SamplerConfig {
            n_steps,
            decode_mode: DecodeMode::Categorical,
            cache_enabled: true,
            seed,
        }
    }
}

/// One reverse step in a trace.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub s: f64,
    pub unmask_count: usize,
    pub evaluated: bool,
}

/// Complete record of a sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub steps: Vec<StepRecord>,
    pub nfe: usize,
    pub n_steps: usize,
    pub frames: usize,
    pub depths: usize,
    pub final_mask_count: usize,
}

impl SampleTrace {
    /// JSON lines: one record per step, then a summary record.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Summary {
            nfe: usize,
            n_steps: usize,
            l: usize,
            d: usize,
            final_mask_count: usize,
        }
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).expect("step record"));
            out.push('\n');
        }
        out.push_str(
            &serde_json::to_string(&Summary {
                nfe: self.nfe,
                n_steps: self.n_steps,
                l: self.frames,
                d: self.depths,
                final_mask_count: self.final_mask_count,
            })
            .expect("summary record"),
        );
        out.push('\n');
        out
    }

    /// Traces are equal up to evaluation bookkeeping: same steps, times,
    /// and unmask counts, ignoring `evaluated` flags and NFE.
    pub fn same_path(&self, other: &SampleTrace) -> bool {
        self.n_steps == other.n_steps
            && self.steps.len() == other.steps.len()
            && self
                .steps
                .iter()
                .zip(&other.steps)
                .all(|(a, b)| {
                    a.step == b.step && a.t == b.t && a.s == b.s && a.unmask_count == b.unmask_count
                })
    }
}

/// Uniform reverse-time grid: pairs (t_n, s_n) with t_n = T(1 - n/N),
/// s_n = t_{n+1}, ending exactly at s = 0.
pub fn step_grid(n_steps: usize, horizon: f64) -> Vec<(f64, f64)> {
    assert!(n_steps >= 1);
    let n = n_steps as f64;
    (0..n_steps)
        .map(|i| {
            let t = horizon * (1.0 - i as f64 / n);
            let s = if i + 1 == n_steps {
                0.0
            } else {
                horizon * (1.0 - (i + 1) as f64 / n)
            };
            (t, s)
        })
        .collect()
}

fn check_row(row: &[f64], frame: usize, depth: usize) -> Result<(), SamplerError> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(SamplerError::ModelOutput {
            frame,
            depth,
            detail: "negative or non-finite probability".into(),
        });
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(SamplerError::ModelOutput {
            frame,
            depth,
            detail: format!("row sums to {sum}"),
        });
    }
    Ok(())
}

fn draw_code(row: &[f64], mode: DecodeMode, rng: &mut Rng) -> u16 {
    match mode {
        DecodeMode::Categorical => {
            let total: f64 = row.iter().sum();
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            for (k, &p) in row.iter().enumerate() {
                acc += p;
                if target < acc {
                    return k as u16;
                }
            }
            (row.len() - 1) as u16
        }
        DecodeMode::Argmax => {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = k;
                }
            }
            best as u16
        }
    }
}

/// Apply one reverse transition over (s, t] to every position
/// independently. Positions consume randomness in row-major (frame, depth)
/// order. Rows at unmasked positions are never read or validated.
pub fn reverse_step(
    grid: &CodeGrid,
    probs: &ConditionalProbs,
    t: f64,
    s: f64,
    rng: &mut Rng,
    mode: DecodeMode,
) -> Result<CodeGrid, SamplerError> {
    if !(0.0 <= s && s < t) {
        return Err(SamplerError::InvalidTimes { t, s });
    }
    let p_unmask = (t - s) / t;
    let mut out = grid.clone();
    for i in 0..grid.frames() {
        for j in 0..grid.depths() {
            if !grid.is_masked(i, j) {
                continue; // Kronecker delta branch: keep the code
            }
            let u = rng.gen::<f64>();
            if s == 0.0 || u < p_unmask {
                let row = probs.row(i, j);
                check_row(row, i, j)?;
                out.set(i, j, draw_code(row, mode, rng));
            }
        }
    }
    Ok(out)
}

/// Run the full reverse process conditioned on the noisy grid, starting
/// from the all-mask state, with prediction caching and NFE accounting.
pub fn sample<M: ConditionalModel>(
    model: &M,
    noisy: &CodeGrid,
    cfg: &SamplerConfig,
) -> Result<(CodeGrid, SampleTrace), SamplerError> {
    if noisy.contains_mask() {
        return Err(SamplerError::MaskedConditioning {
            masked: noisy.mask_count(),
        });
    }
    let mut grid = CodeGrid::all_masked(noisy.frames(), noisy.depths(), noisy.codebook_size());
    let mut rng = rng_from_seed(cfg.seed);
    let mut trace = SampleTrace {
        steps: Vec::with_capacity(cfg.n_steps),
        nfe: 0,
        n_steps: cfg.n_steps,
        frames: noisy.frames(),
        depths: noisy.depths(),
        final_mask_count: 0,
    };

    let mut cached: Option<ConditionalProbs> = None;
    let mut last_unmasked = 0usize;
    for (step, (t, s)) in step_grid(cfg.n_steps, 1.0).into_iter().enumerate() {
        let evaluate = !cfg.cache_enabled || cached.is_none() || last_unmasked > 0;
        if evaluate {
            let probs = model
                .predict(&grid, noisy)
                .map_err(|source| SamplerError::Model { step, source })?;
            cached = Some(probs);
            trace.nfe += 1;
        }
        let probs = cached.as_ref().expect("prediction present");
        let before = grid.mask_count();
        grid = reverse_step(&grid, probs, t, s, &mut rng, cfg.decode_mode)?;
        let after = grid.mask_count();
        debug_assert!(after <= before, "re-masking is impossible under the reverse step");
        last_unmasked = before - after;
        trace.steps.push(StepRecord {
            step,
            t,
            s,
            unmask_count: last_unmasked,
            evaluated: evaluate,
        });
    }

    trace.final_mask_count = grid.mask_count();
    debug_assert_eq!(trace.final_mask_count, 0);
    Ok((grid, trace))
}

/// Exact product distribution over grids for the single-step sampler:
/// every position draws independently from the model's all-masked
/// prediction. Enumeration oracle for tiny instances.
pub struct GridDistribution {
    pub frames: usize,
    pub depths: usize,
    pub codes: usize,
    /// Probability per grid index (see [`grid_from_index`]).
    pub probs: Vec<f64>,
}

impl GridDistribution {
    pub fn grid(&self, index: usize) -> CodeGrid {
        grid_from_index(index, self.frames, self.depths, self.codes)
    }
}

/// Enumeration ceiling for [`expected_distribution_one_step`].
pub const ONE_STEP_ENUM_CAPACITY: u128 = 1 << 20;

pub fn expected_distribution_one_step<M: ConditionalModel>(
    model: &M,
    noisy: &CodeGrid,
) -> Result<GridDistribution, SamplerError> {
    let (l, d, k) = (noisy.frames(), noisy.depths(), noisy.codebook_size());
    let mut states: u128 = 1;
    for _ in 0..l * d {
        states = states.saturating_mul(k as u128);
    }
    if states > ONE_STEP_ENUM_CAPACITY {
        return Err(SamplerError::Capacity {
            needed: states,
            limit: ONE_STEP_ENUM_CAPACITY,
        });
    }
    let all_masked = CodeGrid::all_masked(l, d, k);
    let probs = model
        .predict(&all_masked, noisy)
        .map_err(|source| SamplerError::Model { step: 0, source })?;
    for i in 0..l {
        for j in 0..d {
            check_row(probs.row(i, j), i, j)?;
        }
    }

    let states = states as usize;
    let mut out = vec![0.0f64; states];
    for (idx, slot) in out.iter_mut().enumerate() {
        let mut rem = idx;
        let mut p = 1.0;
        for pos in (0..l * d).rev() {
            let code = rem % k;
            rem /= k;
            p *= probs.row(pos / d, pos % d)[code];
        }
        *slot = p;
    }
    Ok(GridDistribution {
        frames: l,
        depths: d,
        codes: k,
        probs: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        exact_posterior, grid_to_index, ExactOracleModel, JointTable, UniformModel,
    };

    #[test]
    fn step_grid_shapes() {
        assert_eq!(step_grid(1, 1.0), vec![(1.0, 0.0)]);
        assert_eq!(step_grid(2, 1.0), vec![(1.0, 0.5), (0.5, 0.0)]);
        let four = step_grid(4, 1.0);
        assert_eq!(four.len(), 4);
        assert_eq!(four[0].0, 1.0);
        assert_eq!(four[3].1, 0.0);
        for (t, s) in &four {
            assert!((t - s - 0.25).abs() < 1e-12);
        }
        // Strictly decreasing and contiguous.
        for w in four.windows(2) {
            assert_eq!(w[0].1, w[1].0);
            assert!(w[1].0 < w[0].0);
        }
    }

    #[test]
    fn unmasked_positions_are_kept_regardless_of_rows() {
        let mut grid = CodeGrid::all_masked(2, 2, 3);
        grid.set(0, 0, 2);
        grid.set(1, 1, 0);
        // Garbage rows everywhere, including invalid ones at unmasked
        // positions: they must never be read.
        let mut probs = ConditionalProbs::uniform(2, 2, 3);
        probs.row_mut(0, 0).copy_from_slice(&[5.0, -1.0, f64::NAN]);
        probs.row_mut(1, 1).copy_from_slice(&[9.0, 9.0, 9.0]);
        let mut rng = rng_from_seed(8);
        let out = reverse_step(&grid, &probs, 0.5, 0.25, &mut rng, DecodeMode::Categorical)
            .unwrap();
        assert_eq!(out.get(0, 0), 2);
        assert_eq!(out.get(1, 1), 0);
    }

    #[test]
    fn final_step_unmasks_everything() {
        let grid = CodeGrid::all_masked(4, 3, 5);
        let probs = ConditionalProbs::uniform(4, 3, 5);
        let mut rng = rng_from_seed(1);
        let out = reverse_step(&grid, &probs, 0.25, 0.0, &mut rng, DecodeMode::Categorical)
            .unwrap();
        assert_eq!(out.mask_count(), 0);
    }

    #[test]
    fn invalid_masked_row_is_model_output_error() {
        let grid = CodeGrid::all_masked(1, 1, 2);
        let mut probs = ConditionalProbs::uniform(1, 1, 2);
        probs.row_mut(0, 0).copy_from_slice(&[0.7, 0.7]);
        let mut rng = rng_from_seed(1);
        match reverse_step(&grid, &probs, 1.0, 0.0, &mut rng, DecodeMode::Categorical) {
            Err(SamplerError::ModelOutput { frame: 0, depth: 0, .. }) => {}
            other => panic!("expected model-output error, got {other:?}"),
        }
    }

    #[test]
    fn branch_probabilities_match_tau_leaping_coefficients() {
        // t=1, s=0.75: unmask probability 0.25; codes drawn (0.2, 0.8).
        let n = 100_000usize;
        let grid = CodeGrid::all_masked(n, 1, 2);
        let mut probs = ConditionalProbs::uniform(n, 1, 2);
        for i in 0..n {
            probs.row_mut(i, 0).copy_from_slice(&[0.2, 0.8]);
        }
        let mut rng = rng_from_seed(42);
        let out = reverse_step(&grid, &probs, 1.0, 0.75, &mut rng, DecodeMode::Categorical)
            .unwrap();
        let unmasked = n - out.mask_count();
        let frac = unmasked as f64 / n as f64;
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        assert!(
            (frac - 0.25).abs() < 4.0 * sigma,
            "unmask fraction {frac} vs 0.25"
        );
        let zeros = (0..n)
            .filter(|&i| !out.is_masked(i, 0) && out.get(i, 0) == 0)
            .count();
        let zero_share = zeros as f64 / unmasked as f64;
        let sigma2 = (0.2 * 0.8 / unmasked as f64).sqrt();
        assert!(
            (zero_share - 0.2).abs() < 4.0 * sigma2,
            "code-0 share {zero_share} vs 0.2"
        );
    }

    #[test]
    fn single_step_uses_one_evaluation() {
        let model = UniformModel { codes: 4 };
        let noisy = CodeGrid::filled(3, 2, 4, 1);
        let (grid, trace) = sample(&model, &noisy, &SamplerConfig::new(1, 3)).unwrap();
        assert_eq!(trace.nfe, 1);
        assert_eq!(grid.mask_count(), 0);
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].unmask_count, 6);
    }

    #[test]
    fn nfe_bounded_by_steps_and_positions() {
        let model = UniformModel { codes: 3 };
        let noisy = CodeGrid::filled(10, 4, 3, 0);
        for seed in 0..50 {
            for n_steps in [1usize, 7, 64, 200] {
                let (grid, trace) =
                    sample(&model, &noisy, &SamplerConfig::new(n_steps, seed)).unwrap();
                assert_eq!(grid.mask_count(), 0);
                assert!(trace.nfe <= n_steps.min(41), "nfe {} too high", trace.nfe);
                let total: usize = trace.steps.iter().map(|s| s.unmask_count).sum();
                assert_eq!(total, 40);
            }
        }
    }

    #[test]
    fn caching_on_off_same_output() {
        let table = JointTable::random_correlated(2, 2, 3, 1.5, 77).unwrap();
        let model = ExactOracleModel::new(table);
        let noisy = CodeGrid::filled(2, 2, 3, 1);
        for seed in 0..20 {
            let mut on = SamplerConfig::new(33, seed);
            on.cache_enabled = true;
            let mut off = on.clone();
            off.cache_enabled = false;
            let (grid_on, trace_on) = sample(&model, &noisy, &on).unwrap();
            let (grid_off, trace_off) = sample(&model, &noisy, &off).unwrap();
            assert_eq!(grid_on, grid_off);
            assert!(trace_on.same_path(&trace_off));
            assert_eq!(trace_off.nfe, 33);
            assert!(trace_on.nfe <= trace_off.nfe);
        }
    }

    #[test]
    fn sampler_ignores_unmasked_rows() {
        // Wrap the oracle and corrupt rows at unmasked positions: with the
        // same seed the output grid must be identical.
        struct Perturbed<'a>(&'a ExactOracleModel);
        impl ConditionalModel for Perturbed<'_> {
            fn predict(
                &self,
                masked: &CodeGrid,
                noisy: &CodeGrid,
            ) -> Result<ConditionalProbs, ModelError> {
                let mut probs = self.0.predict(masked, noisy)?;
                for i in 0..masked.frames() {
                    for j in 0..masked.depths() {
                        if !masked.is_masked(i, j) {
                            probs.row_mut(i, j).copy_from_slice(&[7.0, -3.0, 0.1]);
                        }
                    }
                }
                Ok(probs)
            }
        }

        let table = JointTable::random_correlated(2, 2, 3, 1.5, 77).unwrap();
        let model = ExactOracleModel::new(table.clone());
        let perturbed = Perturbed(&model);
        let noisy = CodeGrid::filled(2, 2, 3, 2);
        for seed in 0..20 {
            let cfg = SamplerConfig::new(16, seed);
            let (a, _) = sample(&model, &noisy, &cfg).unwrap();
            let (b, _) = sample(&perturbed, &noisy, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn one_step_distribution_single_position() {
        let table = JointTable::random_correlated(1, 1, 3, 1.0, 5).unwrap();
        let model = ExactOracleModel::new(table.clone());
        let noisy = CodeGrid::filled(1, 1, 3, 1);
        let dist = expected_distribution_one_step(&model, &noisy).unwrap();
        let all_masked = CodeGrid::all_masked(1, 1, 3);
        let row = exact_posterior(&table, &all_masked, &noisy).unwrap().probs;
        for k in 0..3 {
            assert!((dist.probs[k] - row.row(0, 0)[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn one_step_distribution_product_law() {
        struct HalfHalf;
        impl ConditionalModel for HalfHalf {
            fn predict(
                &self,
                masked: &CodeGrid,
                _noisy: &CodeGrid,
            ) -> Result<ConditionalProbs, ModelError> {
                Ok(ConditionalProbs::uniform(
                    masked.frames(),
                    masked.depths(),
                    2,
                ))
            }
        }
        let noisy = CodeGrid::filled(2, 1, 2, 0);
        let dist = expected_distribution_one_step(&HalfHalf, &noisy).unwrap();
        assert_eq!(dist.probs.len(), 4);
        for &p in &dist.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn one_step_samples_match_expected_distribution() {
        let table = JointTable::random_correlated(2, 1, 3, 1.5, 21).unwrap();
        let model = ExactOracleModel::new(table);
        let noisy = CodeGrid::filled(2, 1, 3, 1);
        let expected = expected_distribution_one_step(&model, &noisy).unwrap();
        let runs = 200_000usize;
        let mut hist = vec![0usize; expected.probs.len()];
        for seed in 0..runs {
            let (grid, _) = sample(&model, &noisy, &SamplerConfig::new(1, seed as u64)).unwrap();
            hist[grid_to_index(&grid)] += 1;
        }
        let tv: f64 = hist
            .iter()
            .zip(&expected.probs)
            .map(|(&h, &p)| (h as f64 / runs as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "TV {tv}");
    }

    #[test]
    fn trace_jsonl_has_step_and_summary_lines() {
        let model = UniformModel { codes: 2 };
        let noisy = CodeGrid::filled(1, 2, 2, 1);
        let (_, trace) = sample(&model, &noisy, &SamplerConfig::new(3, 0)).unwrap();
        let text = trace.to_jsonl();
        let lines: Vec<&str> = text.trim().lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("\"step\":0"));
        assert!(lines[3].contains("\"nfe\""));
    }

    #[test]
    fn masked_conditioning_rejected() {
        let model = UniformModel { codes: 2 };
        let noisy = CodeGrid::all_masked(1, 1, 2);
        assert!(matches!(
            sample(&model, &noisy, &SamplerConfig::new(1, 0)),
            Err(SamplerError::MaskedConditioning { masked: 1 })
        ));
    }
}
