//! Toy-scale hierarchical diffusion transformer over RVQ codes.
//!
//! Two stacks of pre-norm transformer blocks factorize the L×D code grid:
//! a frame stack attends across time over the depth-summed hidden states,
//! and a depth stack attends across codebook depths within each frame.
//! Conditioning on the noisy codes enters through adaptive layer
//! normalization: each block derives per-token shift/scale/gate vectors
//! from the noisy-path hidden state, with the gate projection
//! zero-initialized so every block is the identity map at initialization.
//! Codes embed through the frozen codec codebook entries, the mask through
//! the zero vector, and rotary position embeddings encode frame and depth
//! positions in the respective stacks.
//!
//! Everything is explicit `f64` tensor code with a hand-written backward
//! pass; `finite_difference_check` validates every parameter gradient
//! against central differences.

mod adamw;
mod net;

pub use adamw::{adamw_step, AdamWState};
pub use net::{
    finite_difference_check, forward_from_embeddings, rope_apply, ForwardCache, ForwardHooks,
    GradCheckReport, GradCheckTensor,
};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::codec::CodebookSet;
use crate::grid::CodeGrid;
use crate::models::{ConditionalModel, ConditionalProbs, ModelError};
use crate::rng::{rng_from_seed, standard_normal};

#[derive(Debug, Error)]
pub enum RqditError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite activations after layer {layer}")]
    NonFinite { layer: String },
    #[error("codebooks incompatible with model: model (K={model_k}, D={model_d}, H={model_h}), codebooks (K={books_k}, D={books_d}, H={books_h})")]
    BookMismatch {
        model_k: usize,
        model_d: usize,
        model_h: usize,
        books_k: usize,
        books_d: usize,
        books_h: usize,
    },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters. Desk defaults are intentionally small.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RQDiTConfig {
    pub hidden_dim: usize,
    /// Blocks per stack (frame and depth stacks are equally deep).
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Codebook entries per depth (K).
    pub codes: usize,
    /// Codebook depths (D).
    pub depths: usize,
    /// Codec latent dimension (H).
    pub latent_dim: usize,
}

impl RQDiTConfig {
    pub fn desk_default(codes: usize, depths: usize, latent_dim: usize) -> Self {
        RQDiTConfig {
            hidden_dim: 32,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 4,
            codes,
            depths,
            latent_dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<(), RqditError> {
        if self.hidden_dim == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(RqditError::Config("zero-sized dimension".into()));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(RqditError::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(RqditError::Config(format!(
                "head dimension {} must be even for rotary embedding",
                self.head_dim()
            )));
        }
        if self.codes < 2 || self.depths == 0 || self.latent_dim == 0 {
            return Err(RqditError::Config("invalid code geometry".into()));
        }
        Ok(())
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the flat vector.
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Name → location map for the flat parameter vector; fixed by the config.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &RQDiTConfig) -> Self {
        let e = cfg.hidden_dim;
        let h = cfg.latent_dim;
        let m = cfg.mlp_ratio * e;
        let mut layout = ParamLayout {
            specs: Vec::new(),
            by_name: HashMap::new(),
            total: 0,
        };
        let mut linear = |l: &mut ParamLayout, name: &str, out: usize, inp: usize| {
            l.push(&format!("{name}.weight"), vec![out, inp]);
            l.push(&format!("{name}.bias"), vec![out]);
        };
        linear(&mut layout, "clean_in.fc1", e, h);
        linear(&mut layout, "clean_in.fc2", e, e);
        linear(&mut layout, "noisy_in.fc1", e, h);
        linear(&mut layout, "noisy_in.fc2", e, e);
        for stack in ["frame", "depth"] {
            for l in 0..cfg.n_layers {
                for proj in ["wq", "wk", "wv", "wo"] {
                    linear(&mut layout, &format!("{stack}.{l}.attn.{proj}"), e, e);
                }
                linear(&mut layout, &format!("{stack}.{l}.mlp.fc1"), m, e);
                linear(&mut layout, &format!("{stack}.{l}.mlp.fc2"), e, m);
                linear(&mut layout, &format!("{stack}.{l}.mod"), 6 * e, e);
            }
        }
        linear(&mut layout, "head", cfg.codes, e);
        layout
    }

    fn push(&mut self, name: &str, shape: Vec<usize>) {
        let len: usize = shape.iter().product();
        self.by_name.insert(name.to_string(), self.specs.len());
        self.specs.push(TensorSpec {
            name: name.to_string(),
            shape,
            offset: self.total,
        });
        self.total += len;
    }

    pub fn total_params(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.by_name.get(name).map(|&i| &self.specs[i])
    }
}

/// Flat parameter vector plus its layout.
#[derive(Debug, Clone)]
pub struct RQDiTParams {
    pub cfg: RQDiTConfig,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl RQDiTParams {
    /// Xavier-normal weights, zero biases; the adaLN modulation projections
    /// and the output head start at zero, so the blocks are identities and
    /// the initial prediction is uniform.
    pub fn init(cfg: RQDiTConfig, seed: u64) -> Result<Self, RqditError> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        let mut data = vec![0.0; layout.total_params()];
        let mut rng = rng_from_seed(seed);
        for spec in layout.specs() {
            let zero_init = spec.name.ends_with("bias")
                || spec.name.starts_with("head")
                || spec.name.contains(".mod.");
            if zero_init {
                continue;
            }
            let (out, inp) = (spec.shape[0], spec.shape[1]);
            let std = (2.0 / (out + inp) as f64).sqrt();
            for v in data[spec.offset..spec.offset + spec.len()].iter_mut() {
                *v = std * standard_normal(&mut rng);
            }
        }
        Ok(RQDiTParams { cfg, layout, data })
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .spec(name)
            .map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    /// Tensor name owning the flat index, for gradient-check reporting.
    pub fn tensor_of_index(&self, index: usize) -> &str {
        let mut owner = &self.layout.specs()[0];
        for spec in self.layout.specs() {
            if spec.offset <= index {
                owner = spec;
            } else {
                break;
            }
        }
        &owner.name
    }
}

/// Embed a (possibly masked) grid through the codec codebooks: position
/// (i, j) maps to entry `e(c; j)`, the mask to the zero vector. Output is
/// L×D×H row-major.
pub fn embed_codes(grid: &CodeGrid, books: &CodebookSet) -> Vec<f64> {
    let h = books.dim();
    let mut out = vec![0.0; grid.frames() * grid.depths() * h];
    for i in 0..grid.frames() {
        for j in 0..grid.depths() {
            let code = grid.get(i, j);
            if code == grid.mask_value() {
                continue; // zero embedding
            }
            let base = (i * grid.depths() + j) * h;
            out[base..base + h].copy_from_slice(books.entry(j, code as usize));
        }
    }
    out
}

/// The denoiser: parameters plus the frozen codebooks used for embedding.
#[derive(Debug, Clone)]
pub struct RQDiT {
    params: RQDiTParams,
    books: CodebookSet,
}

impl RQDiT {
    pub fn new(params: RQDiTParams, books: CodebookSet) -> Result<Self, RqditError> {
        let cfg = &params.cfg;
        if books.size() != cfg.codes || books.depths() != cfg.depths || books.dim() != cfg.latent_dim
        {
            return Err(RqditError::BookMismatch {
                model_k: cfg.codes,
                model_d: cfg.depths,
                model_h: cfg.latent_dim,
                books_k: books.size(),
                books_d: books.depths(),
                books_h: books.dim(),
            });
        }
        Ok(RQDiT { params, books })
    }

    pub fn config(&self) -> &RQDiTConfig {
        &self.params.cfg
    }

    pub fn params(&self) -> &RQDiTParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut RQDiTParams {
        &mut self.params
    }

    pub fn books(&self) -> &CodebookSet {
        &self.books
    }

    /// Forward pass returning probabilities and the activation cache
    /// needed by [`RQDiT::backward`].
    pub fn forward(
        &self,
        masked: &CodeGrid,
        noisy: &CodeGrid,
        hooks: &ForwardHooks,
    ) -> Result<(ConditionalProbs, ForwardCache), RqditError> {
        net::forward(&self.params, &self.books, masked, noisy, hooks)
    }

    /// Reverse-mode gradients for every parameter given the loss gradient
    /// with respect to the output logits (L×D×K row-major; zero rows at
    /// positions excluded from the loss). Codebook entries are frozen and
    /// receive no gradient.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Vec<f64> {
        net::backward(&self.params, cache, dlogits)
    }

    /// Save as a flat little-endian f32 payload plus a JSON manifest.
    /// `json_path` must end in `.json`; the payload lands next to it with
    /// the `.bin` extension.
    pub fn save(&self, json_path: &Path) -> Result<(), RqditError> {
        let bin_path = json_path.with_extension("bin");
        let manifest = CheckpointManifest {
            version: 1,
            dtype: "f32le".into(),
            config: self.params.cfg,
            payload: bin_path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("params.bin")
                .to_string(),
            tensors: self
                .params
                .layout
                .specs()
                .iter()
                .map(|s| TensorSpec {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    offset: s.offset * 4, // byte offset in the payload
                })
                .collect(),
        };
        let mut bin = Vec::with_capacity(self.params.data.len() * 4);
        for &v in &self.params.data {
            bin.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::File::create(&bin_path)?.write_all(&bin)?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
        std::fs::File::create(json_path)?.write_all(text.as_bytes())?;
        Ok(())
    }

    /// Load a checkpoint saved by [`RQDiT::save`]; parameters come back as
    /// the exact f64 image of the stored f32 values.
    pub fn load(json_path: &Path, books: CodebookSet) -> Result<Self, RqditError> {
        let err = |detail: String| RqditError::Checkpoint {
            path: json_path.to_path_buf(),
            detail,
        };
        let text = std::fs::read_to_string(json_path)?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| err(format!("manifest parse: {e}")))?;
        if manifest.version != 1 {
            return Err(err(format!("unsupported version {}", manifest.version)));
        }
        if manifest.dtype != "f32le" {
            return Err(err(format!("unsupported dtype {}", manifest.dtype)));
        }
        manifest.config.validate()?;
        let layout = ParamLayout::new(&manifest.config);
        // The manifest must describe exactly the layout this config implies.
        if manifest.tensors.len() != layout.specs().len() {
            return Err(err(format!(
                "expected {} tensors, manifest has {}",
                layout.specs().len(),
                manifest.tensors.len()
            )));
        }
        for (expect, got) in layout.specs().iter().zip(&manifest.tensors) {
            if expect.name != got.name
                || expect.shape != got.shape
                || expect.offset * 4 != got.offset
            {
                return Err(err(format!("tensor {} does not match layout", got.name)));
            }
        }
        let bin_path = json_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.payload);
        let bin = std::fs::read(&bin_path)?;
        if bin.len() != layout.total_params() * 4 {
            return Err(err(format!(
                "payload {} has {} bytes, expected {}",
                bin_path.display(),
                bin.len(),
                layout.total_params() * 4
            )));
        }
        let data: Vec<f64> = bin
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let params = RQDiTParams {
            cfg: manifest.config,
            layout,
            data,
        };
        RQDiT::new(params, books)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    dtype: String,
    config: RQDiTConfig,
    payload: String,
    tensors: Vec<TensorSpec>,
}

impl ConditionalModel for RQDiT {
    fn predict(&self, masked: &CodeGrid, noisy: &CodeGrid) -> Result<ConditionalProbs, ModelError> {
        let (probs, _) = self
            .forward(masked, noisy, &ForwardHooks::default())
            .map_err(|e| ModelError::Training(e.to_string()))?;
        Ok(probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    pub(crate) fn random_books(
        codes: usize,
        depths: usize,
        dim: usize,
        seed: u64,
    ) -> CodebookSet {
        let mut rng = rng_from_seed(seed);
        let entries: Vec<f64> = (0..codes * depths * dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        CodebookSet::new(depths, codes, dim, entries)
    }

    #[test]
    fn layout_is_dense_and_named() {
        let cfg = RQDiTConfig::desk_default(16, 2, 8);
        let layout = ParamLayout::new(&cfg);
        let mut expected_offset = 0;
        for spec in layout.specs() {
            assert_eq!(spec.offset, expected_offset, "hole before {}", spec.name);
            expected_offset += spec.len();
        }
        assert_eq!(layout.total_params(), expected_offset);
        assert!(layout.spec("clean_in.fc1.weight").is_some());
        assert!(layout.spec("frame.1.mod.bias").is_some());
        assert!(layout.spec("head.weight").is_some());
    }

    #[test]
    fn init_zeroes_modulation_and_head() {
        let cfg = RQDiTConfig::desk_default(8, 2, 4);
        let params = RQDiTParams::init(cfg, 1).unwrap();
        for name in ["frame.0.mod.weight", "depth.1.mod.weight", "head.weight", "head.bias"] {
            assert!(
                params.tensor(name).unwrap().iter().all(|v| *v == 0.0),
                "{name} not zero-initialized"
            );
        }
        assert!(params
            .tensor("clean_in.fc1.weight")
            .unwrap()
            .iter()
            .any(|v| *v != 0.0));
    }

    #[test]
    fn odd_head_dim_rejected() {
        let mut cfg = RQDiTConfig::desk_default(8, 2, 4);
        cfg.hidden_dim = 6;
        cfg.n_heads = 2; // head dim 3
        assert!(matches!(cfg.validate(), Err(RqditError::Config(_))));
    }

    #[test]
    fn embed_mask_is_zero_and_codes_look_up() {
        let books = random_books(4, 2, 3, 9);
        let mut grid = CodeGrid::all_masked(2, 2, 4);
        grid.set(0, 1, 2);
        let emb = embed_codes(&grid, &books);
        assert!(emb[0..3].iter().all(|v| *v == 0.0)); // (0,0) masked
        assert_eq!(&emb[3..6], books.entry(1, 2)); // (0,1) code 2 depth 1
        assert!(emb[6..12].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embed_matches_gather_loop() {
        let books = random_books(5, 3, 4, 3);
        let mut rng = rng_from_seed(4);
        let mut grid = CodeGrid::all_masked(4, 3, 5);
        for i in 0..4 {
            for j in 0..3 {
                if rng.gen::<f64>() < 0.5 {
                    grid.set(i, j, rng.gen_range(0..5) as u16);
                }
            }
        }
        let emb = embed_codes(&grid, &books);
        for i in 0..4 {
            for j in 0..3 {
                for h in 0..4 {
                    let expect = if grid.is_masked(i, j) {
                        0.0
                    } else {
                        books.entry(j, grid.get(i, j) as usize)[h]
                    };
                    assert_eq!(emb[(i * 3 + j) * 4 + h], expect);
                }
            }
        }
    }

    #[test]
    fn book_mismatch_is_detected() {
        let cfg = RQDiTConfig::desk_default(8, 2, 4);
        let params = RQDiTParams::init(cfg, 0).unwrap();
        let books = random_books(9, 2, 4, 0);
        assert!(matches!(
            RQDiT::new(params, books),
            Err(RqditError::BookMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let dir = std::env::temp_dir().join("addse-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = RQDiTConfig::desk_default(8, 2, 4);
        let books = random_books(8, 2, 4, 5);
        let model = RQDiT::new(RQDiTParams::init(cfg, 7).unwrap(), books.clone()).unwrap();
        let json_path = dir.join("model.json");
        model.save(&json_path).unwrap();
        let loaded = RQDiT::load(&json_path, books).unwrap();
        // Save the loaded model again: files must match byte for byte
        // (f32 -> f64 -> f32 is exact).
        let json2 = dir.join("model2.json");
        loaded.save(&json2).unwrap();
        let a = std::fs::read(json_path.with_extension("bin")).unwrap();
        let b = std::fs::read(json2.with_extension("bin")).unwrap();
        assert_eq!(a, b);
    }
}
