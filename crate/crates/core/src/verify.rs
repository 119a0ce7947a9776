//! Finite-difference suite over every differentiable primitive, the token
//! operations and the full loss paths of a toy model.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::arch::{ModelConfig, MtlSwinUnet};
use crate::error::Result;
use crate::losses::{dice_loss, SegTargets, TaskWeights, Tasks};
use crate::numerics::rng::{seeded, Rng as ChaRng};
use crate::numerics::{gradcheck, gradcheck_params, AttnMask, Graph, ParamStore, Tensor, Var};
use crate::swin::{FeatureMap, FinalExpand, PatchEmbed, PatchExpand, PatchMerge, SwinBlock};
use crate::train::batch_loss;

pub const TOLERANCE: f64 = 1e-5;
pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub case: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        write!(f, "{:<22} {:<18} {:>10.3e}  {verdict}", self.name, self.case, self.max_rel_error)
    }
}

fn randn(rng: &mut ChaRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Values kept at least 0.1 away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaRng, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// `sum(y * r)` with fixed random `r`, so every output component carries a
/// distinct upstream gradient.
fn probe_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = seeded(seed);
    let r = randn(&mut rng, g.shape(y));
    let r = g.constant(r);
    let p = g.mul(y, r);
    g.sum(p)
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

type Op = Box<dyn Fn(&mut Graph<f64>, Var) -> Var>;

fn check(out: &mut Vec<CheckResult>, name: &str, x: &Tensor<f64>, f: Op) -> Result<()> {
    let err = gradcheck(|g, v| f(g, v), x, EPS)?;
    out.push(CheckResult { name: name.into(), case: shape_str(x.shape()), max_rel_error: err });
    Ok(())
}

/// Elementwise, matrix, normalization, reduction and indexing primitives,
/// each on three shapes.
pub fn primitive_checks() -> Result<Vec<CheckResult>> {
    let mut rng = seeded(7);
    let mut out = Vec::new();
    let mats = [[3usize, 4], [5, 2], [2, 7]];

    for (k, s) in mats.iter().enumerate() {
        let x = randn(&mut rng, s);
        let b = randn(&mut rng, &[s[1]]);
        check(
            &mut out,
            "add_row",
            &x,
            Box::new(move |g, v| {
                let b = g.constant(b.clone());
                let y = g.add_row(v, b);
                probe_sum(g, y, 1)
            }),
        )?;
        check(
            &mut out,
            "mul_div",
            &x,
            Box::new(|g, v| {
                let sq = g.mul(v, v);
                let den = g.add_scalar(sq, 1.0);
                let y = g.div(v, den);
                let y = g.sub(y, v);
                probe_sum(g, y, 2)
            }),
        )?;
        let w = randn(&mut rng, &[s[1], 3]);
        let bias = randn(&mut rng, &[3]);
        check(
            &mut out,
            "linear",
            &x,
            Box::new(move |g, v| {
                let w = g.constant(w.clone());
                let b = g.constant(bias.clone());
                let y = g.linear(v, w, Some(b));
                probe_sum(g, y, 3)
            }),
        )?;
        let other = randn(&mut rng, &[s[1], 2 + k]);
        check(
            &mut out,
            "matmul",
            &x,
            Box::new(move |g, v| {
                let o = g.constant(other.clone());
                let y = g.matmul(v, o);
                probe_sum(g, y, 4)
            }),
        )?;
        check(
            &mut out,
            "softmax",
            &x,
            Box::new(|g, v| {
                let y = g.softmax(v);
                probe_sum(g, y, 5)
            }),
        )?;
        let gamma = randn(&mut rng, &[s[1]]);
        let beta = randn(&mut rng, &[s[1]]);
        check(
            &mut out,
            "layer_norm",
            &x,
            Box::new(move |g, v| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let y = g.layer_norm(v, ga, be, 1e-5);
                probe_sum(g, y, 6)
            }),
        )?;
        check(
            &mut out,
            "gelu",
            &x,
            Box::new(|g, v| {
                let y = g.gelu(v);
                probe_sum(g, y, 7)
            }),
        )?;
        let xr = away_from_zero(&mut rng, s);
        check(
            &mut out,
            "relu",
            &xr,
            Box::new(|g, v| {
                let y = g.relu(v);
                probe_sum(g, y, 8)
            }),
        )?;
        let xp = randn(&mut rng, s).map(|v| v.abs() + 0.2);
        check(
            &mut out,
            "log_clamp",
            &xp,
            Box::new(|g, v| {
                let y = g.log_clamp(v, 1e-12);
                probe_sum(g, y, 9)
            }),
        )?;
        check(
            &mut out,
            "sum_mean_axis",
            &x,
            Box::new(|g, v| {
                let a = g.sum_axis(v, 0);
                let b = g.mean_axis(v, 1);
                let a = probe_sum(g, a, 10);
                let b = probe_sum(g, b, 11);
                let m = g.mean(v);
                let t = g.add(a, b);
                g.add(t, m)
            }),
        )?;
        let other = randn(&mut rng, &[s[0], 3]);
        check(
            &mut out,
            "concat_cols",
            &x,
            Box::new(move |g, v| {
                let o = g.constant(other.clone());
                let y = g.concat_cols(o, v);
                probe_sum(g, y, 12)
            }),
        )?;
        let rows = s[0];
        check(
            &mut out,
            "narrow0",
            &x,
            Box::new(move |g, v| {
                let y = g.narrow0(v, 1, rows - 1);
                probe_sum(g, y, 13)
            }),
        )?;
        let cols = s[1];
        check(
            &mut out,
            "pick_cols",
            &x,
            Box::new(move |g, v| {
                let idx: Vec<usize> = (0..rows).map(|r| (r * 3 + 1) % cols).collect();
                let y = g.pick_cols(v, Arc::new(idx));
                probe_sum(g, y, 14)
            }),
        )?;
        check(
            &mut out,
            "gather_rows",
            &x,
            Box::new(move |g, v| {
                // repeats and drops rows so the backward scatter-add is exercised
                let idx: Vec<usize> = (0..rows + 2).map(|r| (r * 2) % rows).collect();
                let n = idx.len();
                let y = g.gather_rows(v, Arc::new(idx), cols, &[n, cols]);
                probe_sum(g, y, 15)
            }),
        )?;
    }

    for s in [[2usize, 3, 4], [3, 2, 5], [1, 4, 2]] {
        let x = randn(&mut rng, &s);
        check(
            &mut out,
            "reshape_permute",
            &x,
            Box::new(move |g, v| {
                let y = g.permute(v, &[2, 0, 1]);
                let y = g.reshape(y, &[s[2] * s[0], s[1]]);
                probe_sum(g, y, 16)
            }),
        )?;
        let other = randn(&mut rng, &[s[0], s[2], 3]);
        check(
            &mut out,
            "bmm",
            &x,
            Box::new(move |g, v| {
                let o = g.constant(other.clone());
                let y = g.bmm(v, o, false, false);
                let z = g.bmm(v, v, false, true);
                let w = g.bmm(v, v, true, false);
                let a = probe_sum(g, y, 17);
                let b = probe_sum(g, z, 18);
                let c = probe_sum(g, w, 19);
                let t = g.add(a, b);
                g.add(t, c)
            }),
        )?;
    }

    for (windows, heads, t) in [(2usize, 1usize, 3usize), (1, 2, 4), (3, 2, 2)] {
        let x = randn(&mut rng, &[windows * heads * t, t]);
        let mut mrng = seeded(windows as u64 * 31 + t as u64);
        let allowed: Vec<bool> = (0..windows * t * t).map(|i| i % (t + 1) == 0 || mrng.random_bool(0.6)).collect();
        let mask = AttnMask::new(windows, heads, t, allowed);
        check(
            &mut out,
            "softmax_masked",
            &x,
            Box::new(move |g, v| {
                let y = g.softmax_masked(v, Some(&mask));
                probe_sum(g, y, 20)
            }),
        )?;
    }

    for n in [4usize, 9, 16] {
        let x = randn(&mut rng, &[2, n]);
        let truth = Tensor::from_fn(&[2, n], |i| ((i * 7) % 3 == 0) as u8 as f64);
        check(
            &mut out,
            "dice_soft",
            &x,
            Box::new(move |g, v| {
                let t = g.constant(truth.clone());
                let z = g.scale(v, -1.0);
                let e = g.concat_cols(v, z);
                let e = g.reshape(e, &[2, 2, n]);
                let e = g.permute(e, &[0, 2, 1]);
                let e = g.reshape(e, &[2 * n, 2]);
                let p = g.softmax(e);
                let q = g.pick_cols(p, Arc::new(vec![1; 2 * n]));
                let q = g.reshape(q, &[2, n]);
                dice_loss(g, t, q)
            }),
        )?;
    }
    Ok(out)
}

/// Parameterized token operations, checked jointly over their input and
/// weights by registering the input as a parameter.
pub fn module_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let record = |out: &mut Vec<CheckResult>, name: &str, case: String, err: f64| {
        out.push(CheckResult { name: name.into(), case, max_rel_error: err });
    };

    for (b, grid, c) in [(1usize, 2usize, 4usize), (2, 2, 2), (1, 4, 2)] {
        let mut rng = seeded(100 + grid as u64);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("input", randn(&mut rng, &[b, grid * 4, grid * 4, 1]));
        let pe = PatchEmbed::new(&mut store, &mut rng, "pe", 4, 1, c);
        let rep = gradcheck_params(
            &store,
            |g| {
                let xv = g.param(x);
                let fm = pe.forward(g, xv).expect("patch embed");
                probe_sum(g, fm.tokens, 30)
            },
            EPS,
            Some(12),
        )?;
        record(&mut out, "patch_embed", format!("{b}x{0}x{0}", grid * 4), rep.max_rel_error);
    }

    for (b, h, w, c) in [(1usize, 2usize, 2usize, 3usize), (2, 4, 2, 2), (1, 4, 4, 2)] {
        let mut rng = seeded(200 + h as u64 * w as u64);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("input", randn(&mut rng, &[b * h * w, c]));
        let pm = PatchMerge::new(&mut store, &mut rng, "pm", c);
        let rep = gradcheck_params(
            &store,
            |g| {
                let xv = g.param(x);
                let y = pm.forward(g, FeatureMap { tokens: xv, batch: b, h, w, c }).expect("merge");
                probe_sum(g, y.tokens, 31)
            },
            EPS,
            Some(12),
        )?;
        record(&mut out, "patch_merge", format!("{b}x{h}x{w}x{c}"), rep.max_rel_error);
    }

    for (b, h, w, c) in [(1usize, 1usize, 1usize, 4usize), (2, 2, 1, 2), (1, 2, 2, 6)] {
        let mut rng = seeded(300 + c as u64);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("input", randn(&mut rng, &[b * h * w, c]));
        let px = PatchExpand::new(&mut store, &mut rng, "px", c);
        let fe = FinalExpand::new(&mut store, &mut rng, "fe", c, 4, 2);
        let rep = gradcheck_params(
            &store,
            |g| {
                let xv = g.param(x);
                let fm = FeatureMap { tokens: xv, batch: b, h, w, c };
                let up = px.forward(g, fm).expect("expand");
                let a = probe_sum(g, up.tokens, 32);
                let px_out = fe.forward(g, fm).expect("final expand");
                let p = probe_sum(g, px_out, 33);
                g.add(a, p)
            },
            EPS,
            Some(12),
        )?;
        record(&mut out, "patch_expand", format!("{b}x{h}x{w}x{c}"), rep.max_rel_error);
    }

    for (grid, window, shift, heads) in [(2usize, 2usize, 0usize, 1usize), (4, 2, 1, 2), (4, 4, 2, 2)] {
        let mut rng = seeded(400 + grid as u64 * 10 + shift as u64);
        let c = 4;
        let mut store = ParamStore::<f64>::new();
        let x = store.add("input", randn(&mut rng, &[grid * grid, c]));
        let blk = SwinBlock::new(&mut store, &mut rng, "blk", c, heads, window, shift, 2);
        let rep = gradcheck_params(
            &store,
            |g| {
                let xv = g.param(x);
                let y = blk.forward(g, FeatureMap { tokens: xv, batch: 1, h: grid, w: grid, c }).expect("block");
                probe_sum(g, y.tokens, 34)
            },
            EPS,
            Some(10),
        )?;
        record(&mut out, "window_attention", format!("g{grid} w{window} s{shift} h{heads}"), rep.max_rel_error);
    }
    Ok(out)
}

/// Deterministic two-sample toy batch: images, labels and one masked sample.
pub fn toy_batch(size: usize) -> (Tensor<f64>, Vec<usize>, SegTargets<f64>) {
    let mut rng = seeded(11);
    let images = Tensor::from_fn(&[2, size, size, 1], |_| rng.random::<f64>());
    let masks = Tensor::from_fn(&[2, size * size], |i| {
        let (y, x) = ((i % (size * size)) / size, i % size);
        ((y as isize - size as isize / 2).abs() < 4 && (x as isize - size as isize / 3).abs() < 5) as u8 as f64
    });
    (images, vec![1, 0], SegTargets { masks, present: vec![true, false] })
}

/// Each loss (classification, segmentation, reconstruction and the weighted
/// total) differentiated through every parameter of the toy model.
pub fn loss_path_checks(per_param: Option<usize>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, tasks, weights) in [
        ("loss_cls", Tasks::CLS, TaskWeights::for_tasks(Tasks::CLS)),
        ("loss_cls_seg", Tasks::CLS_SEG, TaskWeights::for_tasks(Tasks::CLS_SEG)),
        ("loss_cls_rec", Tasks::CLS_REC, TaskWeights::for_tasks(Tasks::CLS_REC)),
        ("loss_total", Tasks::ALL, TaskWeights::for_tasks(Tasks::ALL)),
    ] {
        let cfg = ModelConfig::toy(tasks);
        let mut store = ParamStore::<f64>::new();
        let model = MtlSwinUnet::new(&cfg, &mut store, &mut seeded(5))?;
        let (images, labels, seg) = toy_batch(cfg.image_size);
        let rep = gradcheck_params(
            &store,
            |g| batch_loss(g, &model, &images, &labels, &seg, &weights).expect("toy loss").1,
            EPS,
            per_param,
        )?;
        out.push(CheckResult {
            name: name.into(),
            case: format!("toy {} params", store.count_elements("")),
            max_rel_error: rep.max_rel_error,
        });
    }
    Ok(out)
}

/// Everything above, in order.
pub fn full_suite(per_param: Option<usize>) -> Result<Vec<CheckResult>> {
    let mut all = primitive_checks()?;
    all.extend(module_checks()?);
    all.extend(loss_path_checks(per_param)?);
    Ok(all)
}
