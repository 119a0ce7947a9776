//! Resolution-changing token operations: patch embedding, merging (2x down),
//! expansion (2x up) and the final 4x expansion to pixels.

use std::sync::Arc;

use rand::Rng;

use super::layers::{LayerNorm, Linear};
use super::FeatureMap;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Var};

/// Pixel rows of a `(batch, h*p, w*p)` image grouped patch by patch:
/// output order `(batch, i, j, py, px)`.
pub fn patch_index(batch: usize, h: usize, w: usize, patch: usize) -> Vec<usize> {
    let (hh, ww) = (h * patch, w * patch);
    let mut idx = Vec::with_capacity(batch * hh * ww);
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                for py in 0..patch {
                    for px in 0..patch {
                        idx.push((b * hh + i * patch + py) * ww + j * patch + px);
                    }
                }
            }
        }
    }
    idx
}

/// Source rows for 2x2 merging, neighbourhood order
/// `(2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1)`.
pub fn merge_index(batch: usize, h: usize, w: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    idx.push((b * h + 2 * i + di) * w + 2 * j + dj);
                }
            }
        }
    }
    idx
}

/// Channel-to-space rearrange: token `(b,i,j)` with `f*f*c` channels laid
/// out as `(p1, p2, c)` becomes the `f x f` block at `(f*i + p1, f*j + p2)`.
/// Rows index `c`-wide sub-vectors of the input.
pub fn expand_index(batch: usize, h: usize, w: usize, factor: usize) -> Vec<usize> {
    let (hh, ww) = (h * factor, w * factor);
    let mut idx = Vec::with_capacity(batch * hh * ww);
    for b in 0..batch {
        for y in 0..hh {
            for x in 0..ww {
                let (i, p1) = (y / factor, y % factor);
                let (j, p2) = (x / factor, x % factor);
                idx.push(((b * h + i) * w + j) * factor * factor + p1 * factor + p2);
            }
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub patch: usize,
    pub in_chans: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        patch: usize,
        in_chans: usize,
        dim: usize,
    ) -> Self {
        PatchEmbed {
            proj: Linear::new(store, rng, &format!("{name}.proj"), patch * patch * in_chans, dim, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            patch,
            in_chans,
            dim,
        }
    }

    /// `image` has shape `(batch, H, W, in_chans)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: Var) -> Result<FeatureMap> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[3] != self.in_chans {
            return Err(Error::Shape(format!("expected (batch, H, W, {}), got {s:?}", self.in_chans)));
        }
        let (batch, hh, ww) = (s[0], s[1], s[2]);
        let p = self.patch;
        if hh % p != 0 || ww % p != 0 {
            return Err(Error::Shape(format!("image {hh}x{ww} not divisible by patch size {p}")));
        }
        let (h, w) = (hh / p, ww / p);
        let idx = Arc::new(patch_index(batch, h, w, p));
        let n = batch * h * w;
        let patches = g.gather_rows(image, idx, self.in_chans, &[n, p * p * self.in_chans]);
        let x = self.proj.forward(g, patches);
        let x = self.norm.forward(g, x);
        Ok(FeatureMap { tokens: x, batch, h, w, c: self.dim })
    }
}

#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub dim: usize,
}

impl PatchMerge {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize) -> Self {
        PatchMerge {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(store, rng, &format!("{name}.reduction"), 4 * dim, 2 * dim, false),
            dim,
        }
    }

    /// Concatenated 2x2 neighbourhoods before normalization and projection.
    pub fn gather<T: Real>(&self, g: &mut Graph<T>, fm: FeatureMap) -> Result<Var> {
        if !fm.h.is_multiple_of(2) || !fm.w.is_multiple_of(2) {
            return Err(Error::Shape(format!("patch merge needs even grid, got {}x{}", fm.h, fm.w)));
        }
        if fm.c != self.dim {
            return Err(Error::Shape(format!("patch merge expects {} channels, got {}", self.dim, fm.c)));
        }
        let idx = Arc::new(merge_index(fm.batch, fm.h, fm.w));
        let n = fm.batch * fm.h * fm.w / 4;
        Ok(g.gather_rows(fm.tokens, idx, fm.c, &[n, 4 * fm.c]))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, fm: FeatureMap) -> Result<FeatureMap> {
        let x = self.gather(g, fm)?;
        let x = self.norm.forward(g, x);
        let x = self.reduction.forward(g, x);
        Ok(FeatureMap { tokens: x, batch: fm.batch, h: fm.h / 2, w: fm.w / 2, c: 2 * fm.c })
    }
}

/// Channel-to-space rearrange of `fm` (already carrying `factor^2 * c_out`
/// channels) into a grid `factor` times larger.
pub fn rearrange_up<T: Real>(g: &mut Graph<T>, fm: FeatureMap, factor: usize) -> Result<FeatureMap> {
    let f2 = factor * factor;
    if !fm.c.is_multiple_of(f2) {
        return Err(Error::Shape(format!("{} channels cannot be spread over {factor}x{factor}", fm.c)));
    }
    let c_out = fm.c / f2;
    let idx = Arc::new(expand_index(fm.batch, fm.h, fm.w, factor));
    let (h, w) = (fm.h * factor, fm.w * factor);
    let tokens = g.gather_rows(fm.tokens, idx, c_out, &[fm.batch * h * w, c_out]);
    Ok(FeatureMap { tokens, batch: fm.batch, h, w, c: c_out })
}

/// `(h, w, C) -> (h, w, 2C) -> (2h, 2w, C/2)`.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl PatchExpand {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize) -> Self {
        assert!(dim.is_multiple_of(2), "patch expand needs an even channel count");
        PatchExpand {
            expand: Linear::new(store, rng, &format!("{name}.expand"), dim, 2 * dim, false),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim / 2),
            dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, fm: FeatureMap) -> Result<FeatureMap> {
        if fm.c != self.dim || !fm.c.is_multiple_of(2) {
            return Err(Error::Shape(format!("patch expand expects {} (even) channels, got {}", self.dim, fm.c)));
        }
        let x = self.expand.forward(g, fm.tokens);
        let up = rearrange_up(g, FeatureMap { tokens: x, c: 2 * fm.c, ..fm }, 2)?;
        let x = self.norm.forward(g, up.tokens);
        Ok(FeatureMap { tokens: x, ..up })
    }
}

/// 4x expansion back to pixel resolution followed by a per-pixel head.
#[derive(Clone, Debug)]
pub struct FinalExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub head: Linear,
    pub dim: usize,
    pub factor: usize,
}

impl FinalExpand {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        factor: usize,
        out_chans: usize,
    ) -> Self {
        FinalExpand {
            expand: Linear::new(store, rng, &format!("{name}.expand"), dim, factor * factor * dim, false),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            head: Linear::new(store, rng, &format!("{name}.head"), dim, out_chans, true),
            dim,
            factor,
        }
    }

    /// Returns per-pixel outputs of shape `(batch, H, W, out_chans)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, fm: FeatureMap) -> Result<Var> {
        if fm.c != self.dim {
            return Err(Error::Shape(format!("final expand expects {} channels, got {}", self.dim, fm.c)));
        }
        let x = self.expand.forward(g, fm.tokens);
        let up = rearrange_up(g, FeatureMap { tokens: x, c: self.factor * self.factor * fm.c, ..fm }, self.factor)?;
        let x = self.norm.forward(g, up.tokens);
        let y = self.head.forward(g, x);
        Ok(g.reshape(y, &[fm.batch, up.h, up.w, self.head.out_dim]))
    }
}
