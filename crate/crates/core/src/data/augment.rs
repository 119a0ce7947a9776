//! Two geometric augmentations, each applied with probability 1/2:
//! a quarter-turn rotation followed by a horizontal or vertical flip, and a
//! small-angle rotation in [-20, 20] degrees. Image and mask always receive
//! the same transform.

use rand::Rng;

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    /// Counter-clockwise quarter turns and the flip applied after them.
    pub dihedral: Option<(u8, Flip)>,
    /// Small rotation in degrees.
    pub angle: Option<f64>,
}

pub const MAX_ANGLE: f64 = 20.0;

impl AugmentPlan {
    pub const IDENTITY: AugmentPlan = AugmentPlan { dihedral: None, angle: None };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let dihedral = rng.random_bool(0.5).then(|| {
            let k = rng.random_range(0..4u8);
            let flip = if rng.random_bool(0.5) { Flip::Horizontal } else { Flip::Vertical };
            (k, flip)
        });
        let angle = rng.random_bool(0.5).then(|| rng.random_range(-MAX_ANGLE..=MAX_ANGLE));
        AugmentPlan { dihedral, angle }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// A single-channel `h x w` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Grid {
    fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    /// Counter-clockwise quarter turns.
    pub fn rot90(&self, k: u8) -> Grid {
        let mut g = self.clone();
        for _ in 0..k % 4 {
            let (h, w) = (g.h, g.w);
            let mut out = vec![0.0; h * w];
            // new (y, x) takes old (x, w - 1 - y); new shape (w, h)
            for y in 0..w {
                for x in 0..h {
                    out[y * h + x] = g.at(x, w - 1 - y);
                }
            }
            g = Grid { h: w, w: h, data: out };
        }
        g
    }

    pub fn flip(&self, f: Flip) -> Grid {
        let mut out = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                let (sy, sx) = match f {
                    Flip::Horizontal => (y, self.w - 1 - x),
                    Flip::Vertical => (self.h - 1 - y, x),
                };
                out[y * self.w + x] = self.at(sy, sx);
            }
        }
        Grid { data: out, ..*self }
    }
}

/// Mirror an out-of-range index back inside `[0, n)` without repeating the
/// edge pixel.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Rotates counter-clockwise by `degrees` about the image center with
/// reflect padding.
pub fn rotate(g: &Grid, degrees: f64, interp: Interp) -> Grid {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (g.h as f64 - 1.0) / 2.0;
    let cx = (g.w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; g.h * g.w];
    for y in 0..g.h {
        for x in 0..g.w {
            // inverse map: output pixel back into the source
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = cy + c * dy - s * dx;
            let sx = cx + s * dy + c * dx;
            out[y * g.w + x] = match interp {
                Interp::Nearest => {
                    let iy = reflect(sy.round() as isize, g.h);
                    let ix = reflect(sx.round() as isize, g.w);
                    g.at(iy, ix)
                }
                Interp::Bilinear => {
                    let (y0, x0) = (sy.floor(), sx.floor());
                    let (ty, tx) = ((sy - y0) as f32, (sx - x0) as f32);
                    let (y0, x0) = (y0 as isize, x0 as isize);
                    let p = |yy: isize, xx: isize| g.at(reflect(yy, g.h), reflect(xx, g.w));
                    let top = p(y0, x0) * (1.0 - tx) + p(y0, x0 + 1) * tx;
                    let bot = p(y0 + 1, x0) * (1.0 - tx) + p(y0 + 1, x0 + 1) * tx;
                    top * (1.0 - ty) + bot * ty
                }
            };
        }
    }
    Grid { data: out, ..*g }
}

fn apply_grid(g: &Grid, plan: &AugmentPlan, interp: Interp) -> Grid {
    let mut g = g.clone();
    if let Some((k, f)) = plan.dihedral {
        g = g.rot90(k).flip(f);
    }
    if let Some(a) = plan.angle {
        g = rotate(&g, a, interp);
    }
    g
}

/// Applies `plan` to an `(H, W, 1)` image and optional `(H, W)` mask.
pub fn apply(plan: &AugmentPlan, image: &Tensor<f32>, mask: Option<&Tensor<f32>>) -> (Tensor<f32>, Option<Tensor<f32>>) {
    if *plan == AugmentPlan::IDENTITY {
        return (image.clone(), mask.cloned());
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let gi = Grid { h, w, data: image.data().to_vec() };
    let oi = apply_grid(&gi, plan, Interp::Bilinear);
    let img = Tensor::raw(vec![oi.h, oi.w, 1], oi.data);
    let m = mask.map(|m| {
        let gm = Grid { h, w, data: m.data().to_vec() };
        let om = apply_grid(&gm, plan, Interp::Nearest);
        Tensor::raw(vec![om.h, om.w], om.data)
    });
    (img, m)
}

/// Samples a plan and applies it.
pub fn augment<R: Rng + ?Sized>(
    rng: &mut R,
    image: &Tensor<f32>,
    mask: Option<&Tensor<f32>>,
) -> (Tensor<f32>, Option<Tensor<f32>>) {
    let plan = AugmentPlan::sample(rng);
    apply(&plan, image, mask)
}
