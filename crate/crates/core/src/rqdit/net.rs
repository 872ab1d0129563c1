//! Forward and reverse-mode passes of the hierarchical denoiser.
//!
//! All activations are flat `f64` buffers with explicit shapes. The
//! backward pass consumes the caches produced by the forward pass and
//! writes parameter gradients into a flat vector aligned with the
//! parameter layout.

use super::{embed_codes, ParamLayout, RQDiTParams, RqditError};
use crate::codec::CodebookSet;
use crate::grid::CodeGrid;
use crate::models::ConditionalProbs;

const LN_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

/// Test instrumentation for the forward pass. Defaults run the real model.
#[derive(Debug, Clone)]
pub struct ForwardHooks {
    /// Disable rotary position encoding in both stacks.
    pub rope_enabled: bool,
    /// Replace the frame-stack output with a fixed L×E buffer, freezing the
    /// cross-frame path.
    pub frame_out_override: Option<Vec<f64>>,
}

impl Default for ForwardHooks {
    fn default() -> Self {
        ForwardHooks {
            rope_enabled: true,
            frame_out_override: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

/// Offsets of one linear layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

impl Lin {
    fn new(layout: &ParamLayout, name: &str) -> Lin {
        let w = layout
            .spec(&format!("{name}.weight"))
            .unwrap_or_else(|| panic!("missing tensor {name}.weight"));
        let b = layout
            .spec(&format!("{name}.bias"))
            .unwrap_or_else(|| panic!("missing tensor {name}.bias"));
        Lin {
            w: w.offset,
            b: b.offset,
            inp: w.shape[1],
            out: w.shape[0],
        }
    }

    fn fwd(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len() % self.inp, 0);
        let n = x.len() / self.inp;
        let w = &p[self.w..self.w + self.out * self.inp];
        let b = &p[self.b..self.b + self.out];
        let mut y = vec![0.0; n * self.out];
        for t in 0..n {
            let xt = &x[t * self.inp..(t + 1) * self.inp];
            let yt = &mut y[t * self.out..(t + 1) * self.out];
            for (o, slot) in yt.iter_mut().enumerate() {
                let row = &w[o * self.inp..(o + 1) * self.inp];
                let mut acc = b[o];
                for (wv, xv) in row.iter().zip(xt) {
                    acc += wv * xv;
                }
                *slot = acc;
            }
        }
        y
    }

    /// Accumulates dW/db into `g`, returns dX.
    fn bwd(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64]) -> Vec<f64> {
        let n = x.len() / self.inp;
        debug_assert_eq!(dy.len(), n * self.out);
        let mut dx = vec![0.0; x.len()];
        for t in 0..n {
            let xt = &x[t * self.inp..(t + 1) * self.inp];
            let dyt = &dy[t * self.out..(t + 1) * self.out];
            let dxt = &mut dx[t * self.inp..(t + 1) * self.inp];
            for (o, &c) in dyt.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let wrow = &p[self.w + o * self.inp..self.w + (o + 1) * self.inp];
                for (dxe, wv) in dxt.iter_mut().zip(wrow) {
                    *dxe += c * wv;
                }
                let grow = &mut g[self.w + o * self.inp..self.w + (o + 1) * self.inp];
                for (gv, xv) in grow.iter_mut().zip(xt) {
                    *gv += c * xv;
                }
                g[self.b + o] += c;
            }
        }
        dx
    }
}

fn silu_fwd(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let s = 1.0 / (1.0 + (-v).exp());
            v * s
        })
        .collect()
}

fn silu_bwd(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = 1.0 / (1.0 + (-v).exp());
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

struct LnCache {
    y: Vec<f64>,
    rstd: Vec<f64>,
}

fn ln_fwd(x: &[f64], dim: usize) -> LnCache {
    let n = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for t in 0..n {
        let xt = &x[t * dim..(t + 1) * dim];
        let mean = xt.iter().sum::<f64>() / dim as f64;
        let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for (o, v) in y[t * dim..(t + 1) * dim].iter_mut().zip(xt) {
            *o = (v - mean) * r;
        }
    }
    LnCache { y, rstd }
}

fn ln_bwd(cache: &LnCache, dy: &[f64], dim: usize) -> Vec<f64> {
    let n = dy.len() / dim;
    let mut dx = vec![0.0; dy.len()];
    for t in 0..n {
        let yt = &cache.y[t * dim..(t + 1) * dim];
        let dyt = &dy[t * dim..(t + 1) * dim];
        let m1 = dyt.iter().sum::<f64>() / dim as f64;
        let m2 = dyt.iter().zip(yt).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
        let r = cache.rstd[t];
        for ((o, &d), &yv) in dx[t * dim..(t + 1) * dim].iter_mut().zip(dyt).zip(yt) {
            *o = r * (d - m1 - yv * m2);
        }
    }
    dx
}

fn rope_angle(pos: usize, pair: usize, head_dim: usize) -> f64 {
    pos as f64 * ROPE_BASE.powf(-2.0 * pair as f64 / head_dim as f64)
}

/// Rotate multi-head q/k buffers in place. Tokens are chunked into
/// sequences of length `seq`; the position is the index within the chunk.
/// `sign = -1.0` applies the inverse rotation (used by the backward pass).
fn rope_multihead(x: &mut [f64], seq: usize, heads: usize, head_dim: usize, sign: f64) {
    let e = heads * head_dim;
    let n = x.len() / e;
    for t in 0..n {
        let pos = t % seq;
        if pos == 0 {
            continue; // identity rotation
        }
        let tok = &mut x[t * e..(t + 1) * e];
        for h in 0..heads {
            let hv = &mut tok[h * head_dim..(h + 1) * head_dim];
            for pair in 0..head_dim / 2 {
                let angle = sign * rope_angle(pos, pair, head_dim);
                let (sin, cos) = angle.sin_cos();
                let a = hv[2 * pair];
                let b = hv[2 * pair + 1];
                hv[2 * pair] = a * cos - b * sin;
                hv[2 * pair + 1] = a * sin + b * cos;
            }
        }
    }
}

/// Rotary position embedding on per-head vectors: `vectors` holds one
/// `head_dim`-sized vector per entry of `positions`. Norm-preserving
/// pairwise rotation by `position * base^(-2d/head_dim)`.
pub fn rope_apply(
    vectors: &mut [f64],
    positions: &[usize],
    head_dim: usize,
) -> Result<(), RqditError> {
    if head_dim % 2 != 0 {
        return Err(RqditError::Config(format!(
            "rope requires an even head dimension, got {head_dim}"
        )));
    }
    if vectors.len() != positions.len() * head_dim {
        return Err(RqditError::Config(format!(
            "rope shape mismatch: {} values for {} positions of dim {head_dim}",
            vectors.len(),
            positions.len()
        )));
    }
    for (row, &pos) in positions.iter().enumerate() {
        let hv = &mut vectors[row * head_dim..(row + 1) * head_dim];
        for pair in 0..head_dim / 2 {
            let (sin, cos) = rope_angle(pos, pair, head_dim).sin_cos();
            let a = hv[2 * pair];
            let b = hv[2 * pair + 1];
            hv[2 * pair] = a * cos - b * sin;
            hv[2 * pair + 1] = a * sin + b * cos;
        }
    }
    Ok(())
}

fn softmax_rows(x: &mut [f64], row: usize) {
    for chunk in x.chunks_exact_mut(row) {
        let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in chunk.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in chunk.iter_mut() {
            *v /= sum;
        }
    }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention rows, [n_seqs * heads * seq * seq].
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

struct AttnRefs {
    wq: Lin,
    wk: Lin,
    wv: Lin,
    wo: Lin,
}

impl AttnRefs {
    /// Bidirectional multi-head self-attention within each `seq`-sized
    /// chunk of tokens, rotary-encoded positions inside the chunk.
    fn fwd(
        &self,
        p: &[f64],
        x: &[f64],
        seq: usize,
        heads: usize,
        rope: bool,
    ) -> (Vec<f64>, AttnCache) {
        let e = self.wq.out;
        let hd = e / heads;
        let n = x.len() / e;
        let n_seqs = n / seq;
        let mut q = self.wq.fwd(p, x);
        let mut k = self.wk.fwd(p, x);
        let v = self.wv.fwd(p, x);
        if rope {
            rope_multihead(&mut q, seq, heads, hd, 1.0);
            rope_multihead(&mut k, seq, heads, hd, 1.0);
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; n_seqs * heads * seq * seq];
        let mut ctx = vec![0.0; n * e];
        for s in 0..n_seqs {
            let tok0 = s * seq;
            for h in 0..heads {
                let pbase = (s * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &q[(tok0 + i) * e + h * hd..(tok0 + i) * e + (h + 1) * hd];
                    let row = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let kj = &k[(tok0 + j) * e + h * hd..(tok0 + j) * e + (h + 1) * hd];
                        *slot = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                softmax_rows(
                    &mut probs[pbase..pbase + seq * seq],
                    seq,
                );
                for i in 0..seq {
                    let row = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                    // ctx accumulation needs a disjoint borrow of ctx.
                    let (ci0, ci1) = ((tok0 + i) * e + h * hd, (tok0 + i) * e + (h + 1) * hd);
                    for (j, &a) in row.iter().enumerate() {
                        let vj = &v[(tok0 + j) * e + h * hd..(tok0 + j) * e + (h + 1) * hd];
                        for (c, vv) in ctx[ci0..ci1].iter_mut().zip(vj) {
                            *c += a * vv;
                        }
                    }
                }
            }
        }
        let out = self.wo.fwd(p, &ctx);
        (out, AttnCache { q, k, v, probs, ctx })
    }

    fn bwd(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &[f64],
        cache: &AttnCache,
        dout: &[f64],
        seq: usize,
        heads: usize,
        rope: bool,
    ) -> Vec<f64> {
        let e = self.wq.out;
        let hd = e / heads;
        let n = x.len() / e;
        let n_seqs = n / seq;
        let scale = 1.0 / (hd as f64).sqrt();

        let dctx = self.wo.bwd(p, g, &cache.ctx, dout);
        let mut dq = vec![0.0; n * e];
        let mut dk = vec![0.0; n * e];
        let mut dv = vec![0.0; n * e];
        let mut da = vec![0.0; seq];
        let mut ds = vec![0.0; seq];
        for s in 0..n_seqs {
            let tok0 = s * seq;
            for h in 0..heads {
                let pbase = (s * heads + h) * seq * seq;
                for i in 0..seq {
                    let arow = &cache.probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let dctx_i =
                        &dctx[(tok0 + i) * e + h * hd..(tok0 + i) * e + (h + 1) * hd];
                    // da[j] = dctx_i . v_j;  dv_j += a[j] * dctx_i
                    for j in 0..seq {
                        let vj = &cache.v[(tok0 + j) * e + h * hd..(tok0 + j) * e + (h + 1) * hd];
                        da[j] = dctx_i.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let dvj =
                            &mut dv[(tok0 + j) * e + h * hd..(tok0 + j) * e + (h + 1) * hd];
                        for (dvv, dcv) in dvj.iter_mut().zip(dctx_i) {
                            *dvv += arow[j] * dcv;
                        }
                    }
                    // Softmax backward on the row.
                    let dot: f64 = da.iter().zip(arow).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        ds[j] = arow[j] * (da[j] - dot);
                    }
                    // dq_i += scale * sum_j ds[j] k_j ; dk_j += scale * ds[j] q_i
                    let qi = &cache.q[(tok0 + i) * e + h * hd..(tok0 + i) * e + (h + 1) * hd];
                    let dqi_range = (tok0 + i) * e + h * hd..(tok0 + i) * e + (h + 1) * hd;
                    for j in 0..seq {
                        let c = scale * ds[j];
                        if c == 0.0 {
                            continue;
                        }
                        let kj = &cache.k[(tok0 + j) * e + h * hd..(tok0 + j) * e + (h + 1) * hd];
                        for (dqv, kv) in dq[dqi_range.clone()].iter_mut().zip(kj) {
                            *dqv += c * kv;
                        }
                        let dkj =
                            &mut dk[(tok0 + j) * e + h * hd..(tok0 + j) * e + (h + 1) * hd];
                        for (dkv, qv) in dkj.iter_mut().zip(qi) {
                            *dkv += c * qv;
                        }
                    }
                }
            }
        }
        if rope {
            rope_multihead(&mut dq, seq, heads, hd, -1.0);
            rope_multihead(&mut dk, seq, heads, hd, -1.0);
        }
        let mut dx = self.wq.bwd(p, g, x, &dq);
        for (o, v) in dx.iter_mut().zip(self.wk.bwd(p, g, x, &dk)) {
            *o += v;
        }
        for (o, v) in dx.iter_mut().zip(self.wv.bwd(p, g, x, &dv)) {
            *o += v;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Transformer block with adaptive layer norm conditioning
// ---------------------------------------------------------------------------

struct BlockRefs {
    attn: AttnRefs,
    fc1: Lin,
    fc2: Lin,
    modl: Lin,
}

impl BlockRefs {
    fn new(layout: &ParamLayout, prefix: &str) -> BlockRefs {
        BlockRefs {
            attn: AttnRefs {
                wq: Lin::new(layout, &format!("{prefix}.attn.wq")),
                wk: Lin::new(layout, &format!("{prefix}.attn.wk")),
                wv: Lin::new(layout, &format!("{prefix}.attn.wv")),
                wo: Lin::new(layout, &format!("{prefix}.attn.wo")),
            },
            fc1: Lin::new(layout, &format!("{prefix}.mlp.fc1")),
            fc2: Lin::new(layout, &format!("{prefix}.mlp.fc2")),
            modl: Lin::new(layout, &format!("{prefix}.mod")),
        }
    }
}

pub(super) struct BlockCache {
    x_in: Vec<f64>,
    cond: Vec<f64>,
    mvec: Vec<f64>,
    mod6: Vec<f64>,
    ln1: LnCache,
    a_in: Vec<f64>,
    attn: AttnCache,
    attn_out: Vec<f64>,
    x2: Vec<f64>,
    ln2: LnCache,
    m_in: Vec<f64>,
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    mlp_out: Vec<f64>,
}

/// y[t][c] = x_norm[t][c] * (1 + scale[t][c]) + shift[t][c] with the six
/// modulation vectors packed per token as (sh1, sc1, g1, sh2, sc2, g2).
fn modulate(xn: &[f64], mod6: &[f64], e: usize, shift_slot: usize, scale_slot: usize) -> Vec<f64> {
    let n = xn.len() / e;
    let mut out = vec![0.0; xn.len()];
    for t in 0..n {
        let m = &mod6[t * 6 * e..(t + 1) * 6 * e];
        let sh = &m[shift_slot * e..(shift_slot + 1) * e];
        let sc = &m[scale_slot * e..(scale_slot + 1) * e];
        for c in 0..e {
            out[t * e + c] = xn[t * e + c] * (1.0 + sc[c]) + sh[c];
        }
    }
    out
}

fn gate_add(x: &[f64], branch: &[f64], mod6: &[f64], e: usize, gate_slot: usize) -> Vec<f64> {
    let n = x.len() / e;
    let mut out = vec![0.0; x.len()];
    for t in 0..n {
        let gate = &mod6[t * 6 * e + gate_slot * e..t * 6 * e + (gate_slot + 1) * e];
        for c in 0..e {
            out[t * e + c] = x[t * e + c] + gate[c] * branch[t * e + c];
        }
    }
    out
}

impl BlockRefs {
    fn fwd(
        &self,
        p: &[f64],
        x: &[f64],
        cond: &[f64],
        seq: usize,
        heads: usize,
        rope: bool,
    ) -> (Vec<f64>, BlockCache) {
        let e = self.fc1.inp;
        let mvec = silu_fwd(cond);
        let mod6 = self.modl.fwd(p, &mvec);

        let ln1 = ln_fwd(x, e);
        let a_in = modulate(&ln1.y, &mod6, e, 0, 1);
        let (attn_out, attn) = self.attn.fwd(p, &a_in, seq, heads, rope);
        let x2 = gate_add(x, &attn_out, &mod6, e, 2);

        let ln2 = ln_fwd(&x2, e);
        let m_in = modulate(&ln2.y, &mod6, e, 3, 4);
        let h1_pre = self.fc1.fwd(p, &m_in);
        let h1 = silu_fwd(&h1_pre);
        let mlp_out = self.fc2.fwd(p, &h1);
        let x3 = gate_add(&x2, &mlp_out, &mod6, e, 5);

        (
            x3,
            BlockCache {
                x_in: x.to_vec(),
                cond: cond.to_vec(),
                mvec,
                mod6,
                ln1,
                a_in,
                attn,
                attn_out,
                x2,
                ln2,
                m_in,
                h1_pre,
                h1,
                mlp_out,
            },
        )
    }

    /// Returns (dx, dcond).
    fn bwd(
        &self,
        p: &[f64],
        g: &mut [f64],
        cache: &BlockCache,
        dx3: &[f64],
        seq: usize,
        heads: usize,
        rope: bool,
    ) -> (Vec<f64>, Vec<f64>) {
        let e = self.fc1.inp;
        let n = dx3.len() / e;
        let mut dmod6 = vec![0.0; n * 6 * e];

        // x3 = x2 + g2 .* mlp_out
        let mut dmlp = vec![0.0; n * e];
        let mut dx2 = dx3.to_vec();
        for t in 0..n {
            let m = &cache.mod6[t * 6 * e..(t + 1) * 6 * e];
            let dm = &mut dmod6[t * 6 * e..(t + 1) * 6 * e];
            for c in 0..e {
                let d = dx3[t * e + c];
                dmlp[t * e + c] = d * m[5 * e + c];
                dm[5 * e + c] += d * cache.mlp_out[t * e + c];
            }
        }
        // MLP branch
        let dh1 = self.fc2.bwd(p, g, &cache.h1, &dmlp);
        let dh1_pre = silu_bwd(&cache.h1_pre, &dh1);
        let dm_in = self.fc1.bwd(p, g, &cache.m_in, &dh1_pre);
        let mut dln2y = vec![0.0; n * e];
        for t in 0..n {
            let m = &cache.mod6[t * 6 * e..(t + 1) * 6 * e];
            let dm = &mut dmod6[t * 6 * e..(t + 1) * 6 * e];
            for c in 0..e {
                let d = dm_in[t * e + c];
                dln2y[t * e + c] = d * (1.0 + m[4 * e + c]);
                dm[4 * e + c] += d * cache.ln2.y[t * e + c];
                dm[3 * e + c] += d;
            }
        }
        for (o, v) in dx2.iter_mut().zip(ln_bwd(&cache.ln2, &dln2y, e)) {
            *o += v;
        }

        // x2 = x + g1 .* attn_out
        let mut dattn = vec![0.0; n * e];
        let mut dx = dx2.clone();
        for t in 0..n {
            let m = &cache.mod6[t * 6 * e..(t + 1) * 6 * e];
            let dm = &mut dmod6[t * 6 * e..(t + 1) * 6 * e];
            for c in 0..e {
                let d = dx2[t * e + c];
                dattn[t * e + c] = d * m[2 * e + c];
                dm[2 * e + c] += d * cache.attn_out[t * e + c];
            }
        }
        let da_in = self
            .attn
            .bwd(p, g, &cache.a_in, &cache.attn, &dattn, seq, heads, rope);
        let mut dln1y = vec![0.0; n * e];
        for t in 0..n {
            let m = &cache.mod6[t * 6 * e..(t + 1) * 6 * e];
            let dm = &mut dmod6[t * 6 * e..(t + 1) * 6 * e];
            for c in 0..e {
                let d = da_in[t * e + c];
                dln1y[t * e + c] = d * (1.0 + m[e + c]);
                dm[e + c] += d * cache.ln1.y[t * e + c];
                dm[c] += d;
            }
        }
        for (o, v) in dx.iter_mut().zip(ln_bwd(&cache.ln1, &dln1y, e)) {
            *o += v;
        }

        // Conditioning path.
        let dmvec = self.modl.bwd(p, g, &cache.mvec, &dmod6);
        let dcond = silu_bwd(&cache.cond, &dmvec);
        (dx, dcond)
    }
}

// ---------------------------------------------------------------------------
// Full network
// ---------------------------------------------------------------------------

struct NetRefs {
    clean_fc1: Lin,
    clean_fc2: Lin,
    noisy_fc1: Lin,
    noisy_fc2: Lin,
    frame: Vec<BlockRefs>,
    depth: Vec<BlockRefs>,
    head: Lin,
}

impl NetRefs {
    fn new(params: &RQDiTParams) -> NetRefs {
        let layout = &params.layout;
        NetRefs {
            clean_fc1: Lin::new(layout, "clean_in.fc1"),
            clean_fc2: Lin::new(layout, "clean_in.fc2"),
            noisy_fc1: Lin::new(layout, "noisy_in.fc1"),
            noisy_fc2: Lin::new(layout, "noisy_in.fc2"),
            frame: (0..params.cfg.n_layers)
                .map(|l| BlockRefs::new(layout, &format!("frame.{l}")))
                .collect(),
            depth: (0..params.cfg.n_layers)
                .map(|l| BlockRefs::new(layout, &format!("depth.{l}")))
                .collect(),
            head: Lin::new(layout, "head"),
        }
    }
}

/// Activations retained for the backward pass.
pub struct ForwardCache {
    frames: usize,
    depths: usize,
    rope_enabled: bool,
    frame_overridden: bool,
    clean_emb: Vec<f64>,
    noisy_emb: Vec<f64>,
    c1_pre: Vec<f64>,
    c1: Vec<f64>,
    c_hid: Vec<f64>,
    n1_pre: Vec<f64>,
    n1: Vec<f64>,
    frame_blocks: Vec<BlockCache>,
    depth_blocks: Vec<BlockCache>,
    ln_head: LnCache,
    /// Raw output logits, L×D×K row-major.
    pub logits: Vec<f64>,
}

fn check_finite(xs: &[f64], layer: &str) -> Result<(), RqditError> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(RqditError::NonFinite {
            layer: layer.to_string(),
        });
    }
    Ok(())
}

/// Forward pass from raw embeddings. Exposed so the mask-zero contract can
/// be probed directly; normal callers go through [`super::RQDiT::forward`].
pub fn forward_from_embeddings(
    params: &RQDiTParams,
    clean_emb: Vec<f64>,
    noisy_emb: Vec<f64>,
    frames: usize,
    depths: usize,
    hooks: &ForwardHooks,
) -> Result<(ConditionalProbs, ForwardCache), RqditError> {
    let cfg = &params.cfg;
    let e = cfg.hidden_dim;
    let refs = NetRefs::new(params);
    let p = &params.data;
    let n_tokens = frames * depths;
    debug_assert_eq!(clean_emb.len(), n_tokens * cfg.latent_dim);

    // Input MLPs.
    let c1_pre = refs.clean_fc1.fwd(p, &clean_emb);
    let c1 = silu_fwd(&c1_pre);
    let c_hid = refs.clean_fc2.fwd(p, &c1);
    check_finite(&c_hid, "clean_in")?;
    let n1_pre = refs.noisy_fc1.fwd(p, &noisy_emb);
    let n1 = silu_fwd(&n1_pre);
    let n_hid = refs.noisy_fc2.fwd(p, &n1);
    check_finite(&n_hid, "noisy_in")?;

    // Depth sums feed the frame stack.
    let mut frame_x = vec![0.0; frames * e];
    let mut frame_cond = vec![0.0; frames * e];
    for i in 0..frames {
        for j in 0..depths {
            let tok = (i * depths + j) * e;
            for c in 0..e {
                frame_x[i * e + c] += c_hid[tok + c];
                frame_cond[i * e + c] += n_hid[tok + c];
            }
        }
    }

    let mut frame_blocks = Vec::with_capacity(refs.frame.len());
    for (l, block) in refs.frame.iter().enumerate() {
        let (next, cache) = block.fwd(
            p,
            &frame_x,
            &frame_cond,
            frames,
            cfg.n_heads,
            hooks.rope_enabled,
        );
        check_finite(&next, &format!("frame.{l}"))?;
        frame_blocks.push(cache);
        frame_x = next;
    }

    let frame_overridden = hooks.frame_out_override.is_some();
    let frame_out = match &hooks.frame_out_override {
        Some(ov) => {
            assert_eq!(ov.len(), frames * e, "frame override has wrong shape");
            ov.clone()
        }
        None => frame_x,
    };

    // Broadcast the frame output onto every depth of the clean path.
    let mut z = vec![0.0; n_tokens * e];
    for i in 0..frames {
        for j in 0..depths {
            let tok = (i * depths + j) * e;
            for c in 0..e {
                z[tok + c] = c_hid[tok + c] + frame_out[i * e + c];
            }
        }
    }

    let mut depth_blocks = Vec::with_capacity(refs.depth.len());
    for (l, block) in refs.depth.iter().enumerate() {
        let (next, cache) = block.fwd(p, &z, &n_hid, depths, cfg.n_heads, hooks.rope_enabled);
        check_finite(&next, &format!("depth.{l}"))?;
        depth_blocks.push(cache);
        z = next;
    }

    let ln_head = ln_fwd(&z, e);
    let logits = refs.head.fwd(p, &ln_head.y);
    check_finite(&logits, "head")?;

    let mut probs_data = logits.clone();
    softmax_rows(&mut probs_data, cfg.codes);
    let probs = ConditionalProbs::new(frames, depths, cfg.codes, probs_data);

    Ok((
        probs,
        ForwardCache {
            frames,
            depths,
            rope_enabled: hooks.rope_enabled,
            frame_overridden,
            clean_emb,
            noisy_emb,
            c1_pre,
            c1,
            c_hid,
            n1_pre,
            n1,
            frame_blocks,
            depth_blocks,
            ln_head,
            logits,
        },
    ))
}

pub(super) fn forward(
    params: &RQDiTParams,
    books: &CodebookSet,
    masked: &CodeGrid,
    noisy: &CodeGrid,
    hooks: &ForwardHooks,
) -> Result<(ConditionalProbs, ForwardCache), RqditError> {
    let clean_emb = embed_codes(masked, books);
    let noisy_emb = embed_codes(noisy, books);
    forward_from_embeddings(
        params,
        clean_emb,
        noisy_emb,
        masked.frames(),
        masked.depths(),
        hooks,
    )
}

/// Reverse-mode pass: gradients of a scalar loss with respect to every
/// parameter, given the loss gradient at the logits.
pub(super) fn backward(params: &RQDiTParams, cache: &ForwardCache, dlogits: &[f64]) -> Vec<f64> {
    let cfg = &params.cfg;
    let e = cfg.hidden_dim;
    let (frames, depths) = (cache.frames, cache.depths);
    let refs = NetRefs::new(params);
    let p = &params.data;
    let mut g = vec![0.0; params.layout.total_params()];
    debug_assert_eq!(dlogits.len(), frames * depths * cfg.codes);

    // Head.
    let dy = refs.head.bwd(p, &mut g, &cache.ln_head.y, dlogits);
    let mut dz = ln_bwd(&cache.ln_head, &dy, e);

    // Depth stack, in reverse; conditioning gradients accumulate on the
    // per-token noisy hidden state.
    let mut dn_hid = vec![0.0; frames * depths * e];
    for (block, bc) in refs.depth.iter().zip(&cache.depth_blocks).rev() {
        let (dx, dcond) = block.bwd(p, &mut g, bc, &dz, depths, cfg.n_heads, cache.rope_enabled);
        dz = dx;
        for (o, v) in dn_hid.iter_mut().zip(dcond) {
            *o += v;
        }
    }

    // z[i][j] = c_hid[i][j] + frame_out[i]
    let mut dc_hid = dz.clone();
    let mut dframe = vec![0.0; frames * e];
    for i in 0..frames {
        for j in 0..depths {
            let tok = (i * depths + j) * e;
            for c in 0..e {
                dframe[i * e + c] += dz[tok + c];
            }
        }
    }

    // Frame stack, unless its output was pinned by the test hook.
    let mut dframe_cond = vec![0.0; frames * e];
    if !cache.frame_overridden {
        for (block, bc) in refs.frame.iter().zip(&cache.frame_blocks).rev() {
            let (dx, dcond) =
                block.bwd(p, &mut g, bc, &dframe, frames, cfg.n_heads, cache.rope_enabled);
            dframe = dx;
            for (o, v) in dframe_cond.iter_mut().zip(dcond) {
                *o += v;
            }
        }
        // frame_x0[i] = sum_j c_hid[i][j]; frame_cond[i] = sum_j n_hid[i][j]
        for i in 0..frames {
            for j in 0..depths {
                let tok = (i * depths + j) * e;
                for c in 0..e {
                    dc_hid[tok + c] += dframe[i * e + c];
                    dn_hid[tok + c] += dframe_cond[i * e + c];
                }
            }
        }
    }

    // Input MLPs; embedding gradients are dropped (frozen codebooks).
    let dc1 = refs.clean_fc2.bwd(p, &mut g, &cache.c1, &dc_hid);
    let dc1_pre = silu_bwd(&cache.c1_pre, &dc1);
    let _ = refs.clean_fc1.bwd(p, &mut g, &cache.clean_emb, &dc1_pre);
    let dn1 = refs.noisy_fc2.bwd(p, &mut g, &cache.n1, &dn_hid);
    let dn1_pre = silu_bwd(&cache.n1_pre, &dn1);
    let _ = refs.noisy_fc1.bwd(p, &mut g, &cache.noisy_emb, &dn1_pre);

    g
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

/// Per-tensor result of the central finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckTensor {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<GradCheckTensor>,
    pub max_rel_err: f64,
    pub worst_tensor: String,
}

/// Denoising cross-entropy of one example for checking purposes: weighted
/// negative log-probability of the clean code at masked positions.
fn check_loss(probs: &ConditionalProbs, masked: &CodeGrid, clean: &CodeGrid, weight: f64) -> f64 {
    let mut loss = 0.0;
    for i in 0..masked.frames() {
        for j in 0..masked.depths() {
            if masked.is_masked(i, j) {
                loss -= weight * probs.row(i, j)[clean.get(i, j) as usize].ln();
            }
        }
    }
    loss
}

/// Compare the analytic gradient of every parameter against central finite
/// differences of the loss at the given step size. The loss is the masked
/// cross-entropy (weight 1/(lambda * L * D)) summed over the batch, so the
/// check covers the network, the output softmax, and the loss gradient in
/// one pass.
pub fn finite_difference_check(
    params: &RQDiTParams,
    books: &CodebookSet,
    batch: &[(CodeGrid, CodeGrid, CodeGrid)],
    lambda: f64,
    step: f64,
) -> Result<GradCheckReport, RqditError> {
    let hooks = ForwardHooks::default();
    let positions = batch[0].0.len() as f64;
    let weight = 1.0 / (lambda * positions);

    // Analytic gradient.
    let mut analytic = vec![0.0; params.layout.total_params()];
    for (masked, noisy, clean) in batch {
        let (probs, cache) = forward(params, books, masked, noisy, &hooks)?;
        let k = params.cfg.codes;
        let mut dlogits = vec![0.0; masked.len() * k];
        for i in 0..masked.frames() {
            for j in 0..masked.depths() {
                if !masked.is_masked(i, j) {
                    continue;
                }
                let pos = i * masked.depths() + j;
                let row = probs.row(i, j);
                let truth = clean.get(i, j) as usize;
                for c in 0..k {
                    let indicator = if c == truth { 1.0 } else { 0.0 };
                    dlogits[pos * k + c] = weight * (row[c] - indicator);
                }
            }
        }
        for (o, v) in analytic.iter_mut().zip(backward(params, &cache, &dlogits)) {
            *o += v;
        }
    }

    // Numeric gradient, one parameter at a time.
    let mut perturbed = params.clone();
    let loss_at = |ps: &RQDiTParams| -> Result<f64, RqditError> {
        let mut total = 0.0;
        for (masked, noisy, clean) in batch {
            let (probs, _) = forward(ps, books, masked, noisy, &hooks)?;
            total += check_loss(&probs, masked, clean, weight);
        }
        Ok(total)
    };

    let mut tensors: Vec<GradCheckTensor> = params
        .layout
        .specs()
        .iter()
        .map(|s| GradCheckTensor {
            name: s.name.clone(),
            max_rel_err: 0.0,
        })
        .collect();
    for (ti, spec) in params.layout.specs().iter().enumerate() {
        for idx in spec.offset..spec.offset + spec.len() {
            let orig = perturbed.data[idx];
            perturbed.data[idx] = orig + step;
            let up = loss_at(&perturbed)?;
            perturbed.data[idx] = orig - step;
            let down = loss_at(&perturbed)?;
            perturbed.data[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let denom = analytic[idx].abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic[idx] - numeric).abs() / denom;
            if rel > tensors[ti].max_rel_err {
                tensors[ti].max_rel_err = rel;
            }
        }
    }

    let (mut worst, mut worst_name) = (0.0, String::new());
    for t in &tensors {
        if t.max_rel_err >= worst {
            worst = t.max_rel_err;
            worst_name = t.name.clone();
        }
    }
    Ok(GradCheckReport {
        tensors,
        max_rel_err: worst,
        worst_tensor: worst_name,
    })
}
