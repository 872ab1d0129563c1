//! Conditional denoiser models.
//!
//! Everything the sampler needs from a denoiser is one call: given a
//! partially absorbed grid and the noisy conditioning grid, produce a
//! probability row over the K real codes for every position (mask excluded
//! by construction). Two reference implementations live here alongside the
//! trait: an exact brute-force posterior over an explicit joint table, and
//! a trainable tabular softmax model. Both exist to validate the sampler
//! and the training objective independently of the neural denoiser.

use rand::Rng as _;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

use crate::grid::CodeGrid;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: model covers {expected:?} (frames, depths, codes), input is {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("instance too large: {needed} states exceeds the capacity limit {limit}")]
    Capacity { needed: u128, limit: u128 },
    #[error("training diverged: {0}")]
    Training(String),
}

/// Per-position probability rows over the K real codes, L×D×K row-major.
/// The mask is structurally excluded: rows have length K.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalProbs {
    frames: usize,
    depths: usize,
    codes: usize,
    probs: Vec<f64>,
}

impl ConditionalProbs {
    pub fn new(frames: usize, depths: usize, codes: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), frames * depths * codes);
        ConditionalProbs {
            frames,
            depths,
            codes,
            probs,
        }
    }

    pub fn uniform(frames: usize, depths: usize, codes: usize) -> Self {
        let p = 1.0 / codes as f64;
        Self::new(frames, depths, codes, vec![p; frames * depths * codes])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn depths(&self) -> usize {
        self.depths
    }

    pub fn codes(&self) -> usize {
        self.codes
    }

    pub fn row(&self, frame: usize, depth: usize) -> &[f64] {
        let base = (frame * self.depths + depth) * self.codes;
        &self.probs[base..base + self.codes]
    }

    pub fn row_mut(&mut self, frame: usize, depth: usize) -> &mut [f64] {
        let base = (frame * self.depths + depth) * self.codes;
        &mut self.probs[base..base + self.codes]
    }

    /// Check every row is a probability vector: finite, non-negative,
    /// summing to 1 within `tol`.
    pub fn validate(&self, tol: f64) -> Result<(), String> {
        for i in 0..self.frames {
            for j in 0..self.depths {
                let row = self.row(i, j);
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(format!(
                        "row ({i}, {j}) has a negative or non-finite entry"
                    ));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > tol {
                    return Err(format!("row ({i}, {j}) sums to {sum}"));
                }
            }
        }
        Ok(())
    }
}

/// A denoiser the sampler can drive: predict per-position distributions
/// over clean codes given the partially absorbed grid and the noisy grid.
/// Rows at unmasked positions must be valid but their content is a don't-
/// care; the sampler never reads them.
pub trait ConditionalModel {
    fn predict(&self, masked: &CodeGrid, noisy: &CodeGrid) -> Result<ConditionalProbs, ModelError>;
}

/// Maximum-entropy baseline: every row is 1/K.
#[derive(Debug, Clone)]
pub struct UniformModel {
    pub codes: usize,
}

impl ConditionalModel for UniformModel {
    fn predict(&self, masked: &CodeGrid, _noisy: &CodeGrid) -> Result<ConditionalProbs, ModelError> {
        Ok(ConditionalProbs::uniform(
            masked.frames(),
            masked.depths(),
            self.codes,
        ))
    }
}

/// Mixed-radix index of a mask-free grid: positions in row-major order,
/// most significant first, base K.
pub fn grid_to_index(grid: &CodeGrid) -> usize {
    let k = grid.codebook_size();
    let mut idx = 0usize;
    for &c in grid.codes() {
        debug_assert!((c as usize) < k, "masked grid has no table index");
        idx = idx * k + c as usize;
    }
    idx
}

/// Inverse of [`grid_to_index`].
pub fn grid_from_index(
    mut index: usize,
    frames: usize,
    depths: usize,
    codes: usize,
) -> CodeGrid {
    let n = frames * depths;
    let mut raw = vec![0u16; n];
    for slot in (0..n).rev() {
        raw[slot] = (index % codes) as u16;
        index /= codes;
    }
    CodeGrid::from_codes(frames, depths, codes, raw).expect("in-range codes")
}

/// Hard ceiling on enumerable state counts for the explicit-table oracles.
pub const TABLE_CAPACITY: u128 = 1 << 24;

/// Explicit probability table over (clean grid, noisy grid) pairs for tiny
/// instances. Ground truth for the exactness oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    frames: usize,
    depths: usize,
    codes: usize,
    /// probs[clean_index * states + noisy_index]
    probs: Vec<f64>,
    /// Cumulative sums for pair sampling.
    cdf: Vec<f64>,
}

impl JointTable {
    pub fn states(frames: usize, depths: usize, codes: usize) -> Result<usize, ModelError> {
        let mut states: u128 = 1;
        for _ in 0..frames * depths {
            states = states.saturating_mul(codes as u128);
        }
        if states.saturating_mul(states) > TABLE_CAPACITY {
            return Err(ModelError::Capacity {
                needed: states * states,
                limit: TABLE_CAPACITY,
            });
        }
        Ok(states as usize)
    }

    pub fn new(
        frames: usize,
        depths: usize,
        codes: usize,
        probs: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let states = Self::states(frames, depths, codes)?;
        assert_eq!(probs.len(), states * states);
        assert!(probs.iter().all(|p| p.is_finite() && *p >= 0.0));
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "table sums to {sum}");
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in &probs {
            acc += p;
            cdf.push(acc);
        }
        Ok(JointTable {
            frames,
            depths,
            codes,
            probs,
            cdf,
        })
    }

    /// Generic correlated table: unnormalized mass `exp(scale * g)` with
    /// `g` drawn from a seeded standard normal. Couples all positions of
    /// both grids, so conditionals carry structure worth testing against.
    pub fn random_correlated(
        frames: usize,
        depths: usize,
        codes: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let states = Self::states(frames, depths, codes)?;
        let mut rng = crate::rng::rng_from_seed(seed);
        let mut probs: Vec<f64> = (0..states * states)
            .map(|_| (scale * crate::rng::standard_normal(&mut rng)).exp())
            .collect();
        let sum: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= sum;
        }
        // Renormalize residue into the last cell so the total is exact.
        let resid: f64 = 1.0 - probs.iter().sum::<f64>();
        if let Some(last) = probs.last_mut() {
            *last += resid;
        }
        Self::new(frames, depths, codes, probs)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn depths(&self) -> usize {
        self.depths
    }

    pub fn codes(&self) -> usize {
        self.codes
    }

    pub fn num_states(&self) -> usize {
        Self::states(self.frames, self.depths, self.codes).expect("validated at construction")
    }

    pub fn prob(&self, clean_index: usize, noisy_index: usize) -> f64 {
        self.probs[clean_index * self.num_states() + noisy_index]
    }

    /// Marginal over noisy grids.
    pub fn noisy_marginal(&self) -> Vec<f64> {
        let states = self.num_states();
        let mut out = vec![0.0; states];
        for clean in 0..states {
            for (noisy, o) in out.iter_mut().enumerate() {
                *o += self.prob(clean, noisy);
            }
        }
        out
    }

    /// True conditional p(clean | noisy) as a vector over clean indices.
    pub fn conditional_clean(&self, noisy_index: usize) -> Vec<f64> {
        let states = self.num_states();
        let mut out: Vec<f64> = (0..states).map(|c| self.prob(c, noisy_index)).collect();
        let mass: f64 = out.iter().sum();
        if mass > 0.0 {
            for v in out.iter_mut() {
                *v /= mass;
            }
        }
        out
    }

    /// Draw a (clean, noisy) pair.
    pub fn sample_pair(&self, rng: &mut Rng) -> (CodeGrid, CodeGrid) {
        let u = rng.gen::<f64>() * self.cdf.last().unwrap();
        let cell = match self
            .cdf
            .binary_search_by(|probe| probe.partial_cmp(&u).unwrap())
        {
            Ok(i) => i + 1,
            Err(i) => i,
        }
        .min(self.probs.len() - 1);
        let states = self.num_states();
        let clean = grid_from_index(cell / states, self.frames, self.depths, self.codes);
        let noisy = grid_from_index(cell % states, self.frames, self.depths, self.codes);
        (clean, noisy)
    }

    pub fn to_json(&self) -> String {
        #[derive(serde::Serialize)]
        struct TableFile<'a> {
            version: u32,
            l: usize,
            d: usize,
            k: usize,
            probs: &'a [f64],
        }
        serde_json::to_string(&TableFile {
            version: 1,
            l: self.frames,
            d: self.depths,
            k: self.codes,
            probs: &self.probs,
        })
        .expect("table serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        #[derive(serde::Deserialize)]
        struct TableFile {
            version: u32,
            l: usize,
            d: usize,
            k: usize,
            probs: Vec<f64>,
        }
        let file: TableFile = serde_json::from_str(text)
            .map_err(|e| ModelError::Training(format!("table parse: {e}")))?;
        assert_eq!(file.version, 1, "unsupported table version");
        Self::new(file.l, file.d, file.k, file.probs)
    }

    fn check_shape(&self, grid: &CodeGrid) -> Result<(), ModelError> {
        let expected = (self.frames, self.depths, self.codes);
        let actual = (grid.frames(), grid.depths(), grid.codebook_size());
        if expected != actual {
            return Err(ModelError::ShapeMismatch { expected, actual });
        }
        Ok(())
    }
}

/// Result of an exact posterior evaluation.
pub struct PosteriorOutput {
    pub probs: ConditionalProbs,
    /// Positions whose conditioning event had zero table mass and were
    /// given the uniform sentinel row.
    pub zero_mass_rows: usize,
}

/// Brute-force posterior over a joint table: for each masked position,
/// sum table mass over all clean grids that agree with the unmasked
/// positions, split by the code at that position, and renormalize.
/// Unmasked positions get a one-hot row on their observed code. Zero
/// conditioning mass yields the uniform sentinel row.
pub fn exact_posterior(
    table: &JointTable,
    masked: &CodeGrid,
    noisy: &CodeGrid,
) -> Result<PosteriorOutput, ModelError> {
    table.check_shape(noisy)?;
    if masked.frames() != table.frames
        || masked.depths() != table.depths
        || masked.codebook_size() != table.codes
    {
        return Err(ModelError::ShapeMismatch {
            expected: (table.frames, table.depths, table.codes),
            actual: (masked.frames(), masked.depths(), masked.codebook_size()),
        });
    }

    let states = table.num_states();
    let noisy_idx = grid_to_index(noisy);
    let positions = table.frames * table.depths;
    let mut accum = vec![0.0f64; positions * table.codes];

    for clean_idx in 0..states {
        let weight = table.prob(clean_idx, noisy_idx);
        if weight == 0.0 {
            continue;
        }
        // Decode digits on the fly, most significant position first.
        let mut rem = clean_idx;
        let mut digits = vec![0usize; positions];
        for slot in (0..positions).rev() {
            digits[slot] = rem % table.codes;
            rem /= table.codes;
        }
        let agrees = masked
            .codes()
            .iter()
            .zip(&digits)
            .all(|(&m, &g)| m as usize == table.codes || m as usize == g);
        if !agrees {
            continue;
        }
        for (pos, &g) in digits.iter().enumerate() {
            accum[pos * table.codes + g] += weight;
        }
    }

    let mut probs = ConditionalProbs::uniform(table.frames, table.depths, table.codes);
    let mut zero_mass_rows = 0;
    for i in 0..table.frames {
        for j in 0..table.depths {
            let pos = i * table.depths + j;
            let row = probs.row_mut(i, j);
            if !masked.is_masked(i, j) {
                row.fill(0.0);
                row[masked.get(i, j) as usize] = 1.0;
                continue;
            }
            let acc = &accum[pos * table.codes..(pos + 1) * table.codes];
            let mass: f64 = acc.iter().sum();
            if mass == 0.0 {
                zero_mass_rows += 1; // uniform sentinel already in place
                continue;
            }
            for (r, a) in row.iter_mut().zip(acc) {
                *r = a / mass;
            }
        }
    }
    Ok(PosteriorOutput {
        probs,
        zero_mass_rows,
    })
}

/// [`ConditionalModel`] view of a joint table via [`exact_posterior`].
pub struct ExactOracleModel {
    table: JointTable,
    zero_mass_events: AtomicU64,
}

impl ExactOracleModel {
    pub fn new(table: JointTable) -> Self {
        ExactOracleModel {
            table,
            zero_mass_events: AtomicU64::new(0),
        }
    }

    pub fn table(&self) -> &JointTable {
        &self.table
    }

    /// Diagnostics: number of uniform sentinel rows handed out so far.
    pub fn zero_mass_events(&self) -> u64 {
        self.zero_mass_events.load(Ordering::Relaxed)
    }
}

impl ConditionalModel for ExactOracleModel {
    fn predict(&self, masked: &CodeGrid, noisy: &CodeGrid) -> Result<ConditionalProbs, ModelError> {
        let out = exact_posterior(&self.table, masked, noisy)?;
        if out.zero_mass_rows > 0 {
            self.zero_mass_events
                .fetch_add(out.zero_mass_rows as u64, Ordering::Relaxed);
        }
        Ok(out.probs)
    }
}

/// Ceiling on (configuration, position) logit rows a tabular model may hold.
pub const TABULAR_ROW_CAPACITY: usize = 1_000_000;

/// Lookup-table softmax model: one K-logit row per (noisy grid, masked
/// grid) configuration and position. Rows materialize lazily at zero
/// (uniform) and are trained by gradient descent on the denoising
/// cross-entropy.
#[derive(Debug, Clone)]
pub struct TabularModel {
    frames: usize,
    depths: usize,
    codes: usize,
    rows: HashMap<(u64, u64), Vec<f64>>,
}

fn masked_key(grid: &CodeGrid) -> u64 {
    let base = grid.codebook_size() as u64 + 1;
    let mut key = 0u64;
    for &c in grid.codes() {
        key = key * base + c as u64;
    }
    key
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl TabularModel {
    pub fn new(frames: usize, depths: usize, codes: usize) -> Self {
        TabularModel {
            frames,
            depths,
            codes,
            rows: HashMap::new(),
        }
    }

    pub fn num_configs(&self) -> usize {
        self.rows.len()
    }

    fn config_logits(&mut self, masked: &CodeGrid, noisy: &CodeGrid) -> Result<&mut Vec<f64>, ModelError> {
        let key = (masked_key(masked), grid_to_index(noisy) as u64);
        let positions = self.frames * self.depths;
        if !self.rows.contains_key(&key)
            && (self.rows.len() + 1) * positions > TABULAR_ROW_CAPACITY
        {
            return Err(ModelError::Capacity {
                needed: ((self.rows.len() + 1) * positions) as u128,
                limit: TABULAR_ROW_CAPACITY as u128,
            });
        }
        Ok(self
            .rows
            .entry(key)
            .or_insert_with(|| vec![0.0; positions * self.codes]))
    }

    /// Deterministically ordered JSON dump with an explicit shape header.
    pub fn to_json(&self) -> String {
        #[derive(serde::Serialize)]
        struct ModelFile {
            version: u32,
            l: usize,
            d: usize,
            k: usize,
            rows: Vec<(u64, u64, Vec<f64>)>,
        }
        let mut rows: Vec<(u64, u64, Vec<f64>)> = self
            .rows
            .iter()
            .map(|(&(m, n), v)| (m, n, v.clone()))
            .collect();
        rows.sort_by_key(|r| (r.0, r.1));
        serde_json::to_string(&ModelFile {
            version: 1,
            l: self.frames,
            d: self.depths,
            k: self.codes,
            rows,
        })
        .expect("model serialization")
    }
}

impl ConditionalModel for TabularModel {
    fn predict(&self, masked: &CodeGrid, noisy: &CodeGrid) -> Result<ConditionalProbs, ModelError> {
        let expected = (self.frames, self.depths, self.codes);
        let actual = (masked.frames(), masked.depths(), masked.codebook_size());
        if expected != actual {
            return Err(ModelError::ShapeMismatch { expected, actual });
        }
        let key = (masked_key(masked), grid_to_index(noisy) as u64);
        let mut probs = ConditionalProbs::uniform(self.frames, self.depths, self.codes);
        if let Some(logits) = self.rows.get(&key) {
            for i in 0..self.frames {
                for j in 0..self.depths {
                    if masked.is_masked(i, j) {
                        let pos = i * self.depths + j;
                        softmax_into(
                            &logits[pos * self.codes..(pos + 1) * self.codes],
                            probs.row_mut(i, j),
                        );
                    }
                }
            }
        }
        Ok(probs)
    }
}

/// Stats from a tabular training run.
#[derive(Debug, Clone)]
pub struct TabularTrainStats {
    pub steps: usize,
    pub final_loss: f64,
}

/// Stochastic gradient descent on the conditional denoising cross-entropy,
/// drawing (clean, noisy) pairs from the table and corrupting at
/// `lambda ~ U[lambda_min, 1]`.
pub fn tabular_train_sgd(
    model: &mut TabularModel,
    table: &JointTable,
    steps: usize,
    lr: f64,
    lambda_min: f64,
    rng: &mut Rng,
) -> Result<TabularTrainStats, ModelError> {
    assert!(lr > 0.0);
    assert!(lambda_min > 0.0 && lambda_min < 1.0);
    let positions = table.frames() * table.depths();
    let codes = table.codes();
    let mut probs = vec![0.0; codes];
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    for step in 0..steps {
        let (clean, noisy) = table.sample_pair(rng);
        let lam = lambda_min + (1.0 - lambda_min) * rng.gen::<f64>();
        let masked = crate::diffusion::forward_corrupt(&clean, lam, rng);
        if masked.mask_count() == 0 {
            continue;
        }
        let weight = 1.0 / (lam * positions as f64);
        let depths = masked.depths();
        let logits = model.config_logits(&masked, &noisy)?;
        let mut step_loss = 0.0;
        for i in 0..clean.frames() {
            for j in 0..depths {
                if !masked.is_masked(i, j) {
                    continue;
                }
                let pos = i * depths + j;
                let row = &mut logits[pos * codes..(pos + 1) * codes];
                softmax_into(row, &mut probs);
                let truth = clean.get(i, j) as usize;
                step_loss += -probs[truth].ln() * weight;
                for (c, z) in row.iter_mut().enumerate() {
                    let indicator = if c == truth { 1.0 } else { 0.0 };
                    *z -= lr * weight * (probs[c] - indicator);
                }
            }
        }
        if !step_loss.is_finite() {
            return Err(ModelError::Training(format!(
                "non-finite loss at step {step}"
            )));
        }
        loss_acc += step_loss;
        loss_n += 1;
    }
    Ok(TabularTrainStats {
        steps,
        final_loss: if loss_n > 0 {
            loss_acc / loss_n as f64
        } else {
            0.0
        },
    })
}

/// Exact-expectation fit: enumerate every reachable (configuration,
/// position) row, compute its denoising-cross-entropy target (which is the
/// exact posterior row; the 1/lambda weights scale rows relative to one
/// another but never move a row's minimizer), then descend each row to its
/// target. Deterministic; no sampling noise.
pub fn tabular_fit_exact(
    model: &mut TabularModel,
    table: &JointTable,
    steps: usize,
    lr: f64,
) -> Result<TabularTrainStats, ModelError> {
    assert!(lr > 0.0);
    let states = table.num_states();
    let frames = table.frames();
    let depths = table.depths();
    let codes = table.codes();
    let positions = frames * depths;

    // Enumerate reachable configurations: every (noisy with mass, mask
    // pattern, consistent unmasked values) combination.
    let mut targets: HashMap<(u64, u64), ConditionalProbs> = HashMap::new();
    let noisy_marginal = table.noisy_marginal();
    for (noisy_idx, &nm) in noisy_marginal.iter().enumerate() {
        if nm == 0.0 {
            continue;
        }
        let noisy = grid_from_index(noisy_idx, frames, depths, codes);
        for clean_idx in 0..states {
            if table.prob(clean_idx, noisy_idx) == 0.0 {
                continue;
            }
            let clean = grid_from_index(clean_idx, frames, depths, codes);
            for pattern in 1u32..(1 << positions) {
                let mut masked = clean.clone();
                for pos in 0..positions {
                    if pattern & (1 << pos) != 0 {
                        masked.set(pos / depths, pos % depths, masked.mask_value());
                    }
                }
                let key = (masked_key(&masked), noisy_idx as u64);
                if targets.contains_key(&key) {
                    continue;
                }
                let post = exact_posterior(table, &masked, &noisy)?;
                targets.insert(key, post.probs);
            }
        }
    }

    // Row-wise descent to the target distribution.
    let mut final_loss = 0.0;
    let mut rows_done = 0usize;
    let mut probs = vec![0.0; codes];
    let mut keys: Vec<(u64, u64)> = targets.keys().cloned().collect();
    keys.sort_unstable();
    for key in keys {
        let target = &targets[&key];
        let noisy = grid_from_index(key.1 as usize, frames, depths, codes);
        let masked = masked_grid_from_key(key.0, frames, depths, codes);
        let logits = model.config_logits(&masked, &noisy)?;
        for i in 0..frames {
            for j in 0..depths {
                if !masked.is_masked(i, j) {
                    continue;
                }
                let pos = i * depths + j;
                let row = &mut logits[pos * codes..(pos + 1) * codes];
                let t = target.row(i, j);
                for _ in 0..steps {
                    softmax_into(row, &mut probs);
                    for c in 0..codes {
                        row[c] -= lr * (probs[c] - t[c]);
                    }
                }
                softmax_into(row, &mut probs);
                final_loss += t
                    .iter()
                    .zip(&probs)
                    .filter(|(ti, _)| **ti > 0.0)
                    .map(|(ti, pi)| -ti * pi.ln())
                    .sum::<f64>();
                rows_done += 1;
            }
        }
    }
    Ok(TabularTrainStats {
        steps,
        final_loss: if rows_done > 0 {
            final_loss / rows_done as f64
        } else {
            0.0
        },
    })
}

fn masked_grid_from_key(mut key: u64, frames: usize, depths: usize, codes: usize) -> CodeGrid {
    let base = codes as u64 + 1;
    let n = frames * depths;
    let mut raw = vec![0u16; n];
    for slot in (0..n).rev() {
        raw[slot] = (key % base) as u16;
        key /= base;
    }
    CodeGrid::from_codes(frames, depths, codes, raw).expect("in-range codes")
}
