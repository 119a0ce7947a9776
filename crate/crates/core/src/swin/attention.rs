//! (Shifted) window multi-head self-attention and the Swin block.

use std::sync::Arc;

use rand::Rng;

use super::layers::{LayerNorm, Linear, Mlp, INIT_STD};
use super::FeatureMap;
use crate::error::{Error, Result};
use crate::numerics::{trunc_normal, AttnMask, Graph, ParamId, ParamStore, Real, Var};

/// Destination-to-source row map that cyclically rolls each image by
/// `(-shift, -shift)` and then partitions it into `window x window` tiles.
///
/// Output rows are ordered `(batch, window_row, window_col, ty, tx)`.
pub fn window_partition_index(batch: usize, h: usize, w: usize, window: usize, shift: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for wy in 0..h / window {
            for wx in 0..w / window {
                for ty in 0..window {
                    for tx in 0..window {
                        let y = (wy * window + ty + shift) % h;
                        let x = (wx * window + tx + shift) % w;
                        idx.push(b * h * w + y * w + x);
                    }
                }
            }
        }
    }
    idx
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Index into the `(2w-1)^2` relative-position table for every
/// (query, key) pair of one window.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for q in 0..t {
        let (qy, qx) = (q / window, q % window);
        for k in 0..t {
            let (ky, kx) = (k / window, k % window);
            let dy = qy + window - 1 - ky;
            let dx = qx + window - 1 - kx;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Allowed-pair table for shifted windows: after the roll, tokens that came
/// from different image regions may not attend to each other.
pub fn shifted_window_mask(h: usize, w: usize, window: usize, shift: usize) -> AttnMask {
    let region = |pos: usize, len: usize| -> usize {
        if shift == 0 || pos < len - window {
            0
        } else if pos < len - shift {
            1
        } else {
            2
        }
    };
    let (nwy, nwx) = (h / window, w / window);
    let t = window * window;
    let mut allowed = Vec::with_capacity(nwy * nwx * t * t);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let labels: Vec<usize> = (0..t)
                .map(|i| {
                    let y = wy * window + i / window;
                    let x = wx * window + i % window;
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            for &li in &labels {
                for &lj in &labels {
                    allowed.push(li == lj);
                }
            }
        }
    }
    AttnMask::new(nwy * nwx, 1, t, allowed)
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    rel_index: Arc<Vec<usize>>,
}

impl WindowAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "channels {dim} not divisible by heads {heads}");
        let span = 2 * window - 1;
        WindowAttention {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true),
            bias_table: store.add(format!("{name}.rel_bias"), trunc_normal(rng, &[span * span, heads], INIT_STD)),
            dim,
            heads,
            window,
            rel_index: Arc::new(relative_position_index(window)),
        }
    }

    /// Attention inside windows for tokens already laid out as
    /// `(windows_total * window^2, dim)`.
    pub fn forward_windows<T: Real>(&self, g: &mut Graph<T>, x: Var, mask: Option<&AttnMask>) -> Var {
        let t = self.window * self.window;
        let rows = g.shape(x)[0];
        let nw = rows / t;
        let (heads, d) = (self.heads, self.dim / self.heads);

        let qkv = self.qkv.forward(g, x);
        let qkv = g.reshape(qkv, &[nw, t, 3, heads, d]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
        let split = |g: &mut Graph<T>, i: usize| {
            let part = g.narrow0(qkv, i, 1);
            g.reshape(part, &[nw * heads, t, d])
        };
        let q = split(g, 0);
        let k = split(g, 1);
        let v = split(g, 2);
        let q = g.scale(q, T::lit(1.0 / (d as f64).sqrt()));
        let logits = g.bmm(q, k, false, true);

        let table = g.param(self.bias_table);
        let bias = g.gather_rows(table, self.rel_index.clone(), heads, &[t * t, heads]);
        let bias = g.permute(bias, &[1, 0]);
        let bias = g.reshape(bias, &[heads * t * t]);
        let logits = g.reshape(logits, &[nw, heads * t * t]);
        let logits = g.add_row(logits, bias);
        let logits = g.reshape(logits, &[nw * heads, t, t]);

        let mask = mask.map(|m| m.with_heads(heads));
        let attn = g.softmax_masked(logits, mask.as_ref());
        let out = g.bmm(attn, v, false, false);
        let out = g.reshape(out, &[nw, heads, t, d]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[nw * t, self.dim]);
        self.proj.forward(g, out)
    }
}

/// Pre-norm transformer block: window attention then MLP, both residual.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub shift: usize,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: usize,
    ) -> Self {
        SwinBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(store, rng, &format!("{name}.attn"), dim, heads, window),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio),
            shift,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, fm: FeatureMap) -> Result<FeatureMap> {
        window_attention(g, self, fm, self.shift)
    }
}

/// One Swin block applied with an explicit shift.
pub fn window_attention<T: Real>(g: &mut Graph<T>, block: &SwinBlock, fm: FeatureMap, shift: usize) -> Result<FeatureMap> {
    let ws = block.attn.window;
    if !fm.h.is_multiple_of(ws) || !fm.w.is_multiple_of(ws) {
        return Err(Error::Shape(format!("grid {}x{} not divisible by window {ws}", fm.h, fm.w)));
    }
    if shift != 0 && shift != ws / 2 {
        return Err(Error::Config(format!("shift {shift} must be 0 or {}", ws / 2)));
    }
    if fm.c != block.attn.dim {
        return Err(Error::Shape(format!("block expects {} channels, got {}", block.attn.dim, fm.c)));
    }
    let part = window_partition_index(fm.batch, fm.h, fm.w, ws, shift);
    let unpart = Arc::new(invert_permutation(&part));
    let part = Arc::new(part);
    let rows = fm.batch * fm.h * fm.w;

    let xn = block.norm1.forward(g, fm.tokens);
    let xw = g.gather_rows(xn, part, fm.c, &[rows, fm.c]);
    let mask = (shift > 0).then(|| shifted_window_mask(fm.h, fm.w, ws, shift));
    let aw = block.attn.forward_windows(g, xw, mask.as_ref());
    let a = g.gather_rows(aw, unpart, fm.c, &[rows, fm.c]);
    let x = g.add(fm.tokens, a);

    let xn = block.norm2.forward(g, x);
    let m = block.mlp.forward(g, xn);
    let x = g.add(x, m);
    Ok(FeatureMap { tokens: x, ..fm })
}
