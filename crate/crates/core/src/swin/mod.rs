//! Hierarchical window-attention building blocks.

pub mod attention;
pub mod layers;
pub mod patch;

use rand::Rng;

pub use attention::{window_attention, SwinBlock, WindowAttention};
pub use layers::{LayerNorm, Linear, Mlp};
pub use patch::{FinalExpand, PatchEmbed, PatchExpand, PatchMerge};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Var};

/// Token grid: `tokens` has shape `(batch * h * w, c)` in raster order per image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub tokens: Var,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
}

impl StageConfig {
    /// Window clipped to the grid side; errors when it does not tile the grid.
    pub fn for_grid(depth: usize, dim: usize, head_dim: usize, window: usize, grid: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("stage depth must be at least 1".into()));
        }
        let heads = (dim / head_dim).max(1);
        if !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{dim} channels not divisible by {heads} heads")));
        }
        let window = window.min(grid);
        if !grid.is_multiple_of(window) {
            return Err(Error::Config(format!("window {window} does not tile a {grid}x{grid} grid")));
        }
        Ok(StageConfig { depth, heads, window })
    }

    /// Shift for block `i`: alternating 0 and window/2, and always 0 when
    /// one window covers the grid.
    pub fn shift(&self, i: usize, grid: usize) -> usize {
        if i % 2 == 1 && self.window < grid {
            self.window / 2
        } else {
            0
        }
    }
}

/// A run of Swin blocks at one resolution.
#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    pub cfg: StageConfig,
}

impl Stage {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        grid: usize,
        cfg: StageConfig,
        mlp_ratio: usize,
    ) -> Self {
        let blocks = (0..cfg.depth)
            .map(|i| {
                let name = format!("{name}.block{i}");
                SwinBlock::new(store, rng, &name, dim, cfg.heads, cfg.window, cfg.shift(i, grid), mlp_ratio)
            })
            .collect();
        Stage { blocks, cfg }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, mut fm: FeatureMap) -> Result<FeatureMap> {
        for b in &self.blocks {
            fm = b.forward(g, fm)?;
        }
        Ok(fm)
    }
}
