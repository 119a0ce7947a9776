//! Classification, segmentation and reconstruction losses and their
//! weighted multi-task combination.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Floor applied to probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Additive smoothing in both Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

/// Which heads are attached to the shared encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Tasks {
    pub cls: bool,
    pub seg: bool,
    pub rec: bool,
}

impl Tasks {
    pub const CLS: Tasks = Tasks { cls: true, seg: false, rec: false };
    pub const SEG: Tasks = Tasks { cls: false, seg: true, rec: false };
    pub const CLS_SEG: Tasks = Tasks { cls: true, seg: true, rec: false };
    pub const CLS_REC: Tasks = Tasks { cls: true, seg: false, rec: true };
    pub const ALL: Tasks = Tasks { cls: true, seg: true, rec: true };

    pub fn count(&self) -> usize {
        usize::from(self.cls) + usize::from(self.seg) + usize::from(self.rec)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut t = Tasks::default();
        for part in s.split('+').map(str::trim) {
            let slot = match part {
                "cls" => &mut t.cls,
                "seg" => &mut t.seg,
                "rec" => &mut t.rec,
                other => return Err(Error::Config(format!("unknown task `{other}` (expected cls, seg, rec)"))),
            };
            if *slot {
                return Err(Error::Config(format!("task `{part}` listed twice")));
            }
            *slot = true;
        }
        Ok(t)
    }
}

impl fmt::Display for Tasks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> =
            [(self.cls, "cls"), (self.seg, "seg"), (self.rec, "rec")].iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect();
        f.write_str(&names.join("+"))
    }
}

/// Task weights of the total loss plus the CE/Dice split inside the
/// segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskWeights {
    pub cls: Option<f64>,
    pub seg: Option<f64>,
    pub rec: Option<f64>,
    pub ce: f64,
    pub dice: f64,
}

impl TaskWeights {
    pub const LAMBDA_CE: f64 = 0.4;
    pub const LAMBDA_DICE: f64 = 0.6;

    /// Reference weights for a task combination: (0.3, 0.4, 0.4) for three
    /// tasks, (0.4, 0.6) for either two-task pairing, 1 for a single task.
    pub fn for_tasks(tasks: Tasks) -> Self {
        let (cls, seg, rec) = match (tasks.cls, tasks.seg, tasks.rec) {
            (true, true, true) => (Some(0.3), Some(0.4), Some(0.4)),
            (true, true, false) => (Some(0.4), Some(0.6), None),
            (true, false, true) => (Some(0.4), None, Some(0.6)),
            (c, s, r) => (c.then_some(1.0), s.then_some(1.0), r.then_some(1.0)),
        };
        TaskWeights { cls, seg, rec, ce: Self::LAMBDA_CE, dice: Self::LAMBDA_DICE }
    }

    /// Weights listed in task order (cls, seg, rec) for the active tasks only.
    pub fn from_list(tasks: Tasks, list: &[f64]) -> Result<Self> {
        if list.len() != tasks.count() {
            return Err(Error::Config(format!("{} weights given for {} active tasks ({tasks})", list.len(), tasks.count())));
        }
        let mut it = list.iter().copied();
        let w = TaskWeights {
            cls: tasks.cls.then(|| it.next().unwrap()),
            seg: tasks.seg.then(|| it.next().unwrap()),
            rec: tasks.rec.then(|| it.next().unwrap()),
            ce: Self::LAMBDA_CE,
            dice: Self::LAMBDA_DICE,
        };
        w.validate(tasks)?;
        Ok(w)
    }

    pub fn validate(&self, tasks: Tasks) -> Result<()> {
        for (name, active, w) in [("cls", tasks.cls, self.cls), ("seg", tasks.seg, self.seg), ("rec", tasks.rec, self.rec)] {
            match (active, w) {
                (true, None) => return Err(Error::Config(format!("no weight for active task {name}"))),
                (false, Some(_)) => return Err(Error::Config(format!("weight supplied for inactive task {name}"))),
                (true, Some(v)) if !(v > 0.0 && v.is_finite()) => {
                    return Err(Error::Config(format!("weight for {name} must be positive, got {v}")))
                }
                _ => {}
            }
        }
        if !(self.ce >= 0.0 && self.dice >= 0.0) {
            return Err(Error::Config("segmentation CE/Dice weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn list(&self) -> Vec<f64> {
        [self.cls, self.seg, self.rec].into_iter().flatten().collect()
    }
}

/// Mean over rows of `-ln q[row, label[row]]`, `probs` shaped `(rows, classes)`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Var {
    let logq = g.log_clamp(probs, PROB_FLOOR);
    let picked = g.pick_cols(logq, Arc::new(labels.to_vec()));
    let m = g.mean(picked);
    g.scale(m, -T::one())
}

/// Cross entropy from unnormalized scores.
pub fn cross_entropy_logits<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Var {
    let p = g.softmax(logits);
    cross_entropy(g, p, labels)
}

/// `1 - (2 sum(p q) + eps) / (sum(p + q) + eps)` over each row of `(batch, n)`
/// operands; `truth` is typically a constant mask.
pub fn dice_per_sample<T: Real>(g: &mut Graph<T>, truth: Var, pred: Var) -> Var {
    let pq = g.mul(truth, pred);
    let inter = g.sum_axis(pq, 1);
    let sp = g.sum_axis(truth, 1);
    let sq = g.sum_axis(pred, 1);
    let num = g.scale(inter, T::lit(2.0));
    let num = g.add_scalar(num, T::lit(DICE_EPS));
    let den = g.add(sp, sq);
    let den = g.add_scalar(den, T::lit(DICE_EPS));
    let ratio = g.div(num, den);
    let neg = g.scale(ratio, -T::one());
    g.add_scalar(neg, T::one())
}

/// Dice loss of a single flattened image.
pub fn dice_loss<T: Real>(g: &mut Graph<T>, truth: Var, pred: Var) -> Var {
    let n = g.value(truth).len();
    let t = g.reshape(truth, &[1, n]);
    let p = g.reshape(pred, &[1, n]);
    let d = dice_per_sample(g, t, p);
    g.reshape(d, &[])
}

pub fn mse_loss<T: Real>(g: &mut Graph<T>, target: Var, output: Var) -> Var {
    let d = g.sub(output, target);
    let sq = g.mul(d, d);
    g.mean(sq)
}

/// Segmentation targets for a batch: flattened binary masks `(batch, H*W)`
/// and a per-sample presence flag. Rows with `present == false` are never read.
#[derive(Clone, Debug)]
pub struct SegTargets<T: Real> {
    pub masks: Tensor<T>,
    pub present: Vec<bool>,
}

/// Masked segmentation loss: mean over samples that carry a mask of
/// `ce * CE + dice * Dice`; exactly 0 (no graph dependency) when no sample has
/// a mask.
pub fn seg_loss<T: Real>(g: &mut Graph<T>, seg_logits: Var, targets: &SegTargets<T>, w: &TaskWeights) -> Var {
    let s = g.shape(seg_logits).to_vec();
    assert_eq!(s.len(), 4, "seg logits are (batch, H, W, classes)");
    let (batch, pixels, classes) = (s[0], s[1] * s[2], s[3]);
    assert_eq!(targets.present.len(), batch, "one presence flag per sample");
    assert_eq!(targets.masks.len(), batch * pixels, "mask tensor size");
    let kept: Vec<usize> = (0..batch).filter(|&b| targets.present[b]).collect();
    if kept.is_empty() {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let m = kept.len();
    let flat = g.reshape(seg_logits, &[batch, pixels * classes]);
    let sel = g.gather_rows(flat, Arc::new(kept.clone()), pixels * classes, &[m * pixels, classes]);
    let probs = g.softmax(sel);

    let mut mask_vals = Vec::with_capacity(m * pixels);
    let mut labels = Vec::with_capacity(m * pixels);
    for &b in &kept {
        for &v in &targets.masks.data()[b * pixels..(b + 1) * pixels] {
            let fg = v > T::lit(0.5);
            labels.push(usize::from(fg));
            mask_vals.push(if fg { T::one() } else { T::zero() });
        }
    }

    let logq = g.log_clamp(probs, PROB_FLOOR);
    let picked = g.pick_cols(logq, Arc::new(labels));
    let picked = g.reshape(picked, &[m, pixels]);
    let ce = g.mean_axis(picked, 1);
    let ce = g.scale(ce, -T::one());

    let fg = g.pick_cols(probs, Arc::new(vec![1; m * pixels]));
    let fg = g.reshape(fg, &[m, pixels]);
    let truth = g.constant(Tensor::raw(vec![m, pixels], mask_vals));
    let dice = dice_per_sample(g, truth, fg);

    let ce = g.scale(ce, T::lit(w.ce));
    let dice = g.scale(dice, T::lit(w.dice));
    let per_sample = g.add(ce, dice);
    g.mean(per_sample)
}

/// Graph handles of the per-task losses entering the weighted total.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaskLossVars {
    pub cls: Option<Var>,
    pub seg: Option<Var>,
    pub rec: Option<Var>,
}

/// `cls * L_cls + seg * L_seg + rec * L_rec` without renormalizing weights.
pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: TaskLossVars, w: &TaskWeights) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (name, part, weight) in [("cls", parts.cls, w.cls), ("seg", parts.seg, w.seg), ("rec", parts.rec, w.rec)] {
        match (part, weight) {
            (Some(v), Some(lambda)) => {
                let term = g.scale(v, T::lit(lambda));
                total = Some(match total {
                    Some(t) => g.add(t, term),
                    None => term,
                });
            }
            (None, Some(_)) => return Err(Error::Config(format!("weight supplied for inactive task {name}"))),
            (Some(_), None) => return Err(Error::Config(format!("no weight for active task {name}"))),
            (None, None) => {}
        }
    }
    total.ok_or_else(|| Error::Config("no active task losses".into()))
}

/// Scalar per-task losses of one step or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskLosses {
    pub cls: Option<f64>,
    pub seg: Option<f64>,
    pub rec: Option<f64>,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_hand_values() {
        let mut g = Graph::<f64>::new();
        let one_hot = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = cross_entropy(&mut g, one_hot, &[0]);
        assert_eq!(g.value(l).item(), 0.0);
        let uni = g.constant(t(&[1, 2], &[0.5, 0.5]));
        let l = cross_entropy(&mut g, uni, &[1]);
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let q = g.constant(t(&[1, 2], &[0.9, 0.1]));
        let l = cross_entropy(&mut g, q, &[0]);
        assert!((g.value(l).item() - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_exact_zero() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = cross_entropy(&mut g, q, &[1]);
        assert!((g.value(l).item() - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn dice_hand_values() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[4], &[1.0, 1.0, 0.0, 0.0]));
        let q = g.constant(t(&[4], &[1.0, 0.0, 1.0, 0.0]));
        let d = dice_loss(&mut g, p, q);
        let expect = 1.0 - (2.0 + DICE_EPS) / (4.0 + DICE_EPS);
        assert!((g.value(d).item() - expect).abs() < 1e-12);
        assert!((g.value(d).item() - 0.5).abs() < 1e-5);

        let d = dice_loss(&mut g, p, p);
        assert!(g.value(d).item().abs() < 1e-12);

        let ones = g.constant(t(&[4], &[1.0; 4]));
        let zeros = g.constant(t(&[4], &[0.0; 4]));
        let d = dice_loss(&mut g, ones, zeros);
        assert!((g.value(d).item() - (1.0 - DICE_EPS / (4.0 + DICE_EPS))).abs() < 1e-12);

        let d = dice_loss(&mut g, zeros, zeros);
        assert_eq!(g.value(d).item(), 0.0);
    }

    #[test]
    fn mse_hand_values() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[2], &[0.0, 2.0]));
        let q = g.constant(t(&[2], &[0.0, 0.0]));
        let l = mse_loss(&mut g, p, q);
        assert_eq!(g.value(l).item(), 2.0);
        let l = mse_loss(&mut g, p, p);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn total_loss_does_not_renormalize() {
        let mut g = Graph::<f64>::new();
        let one = || Tensor::scalar(1.0);
        let parts = TaskLossVars { cls: Some(g.constant(one())), seg: Some(g.constant(one())), rec: Some(g.constant(one())) };
        let l = total_loss(&mut g, parts, &TaskWeights::for_tasks(Tasks::ALL)).unwrap();
        assert_eq!(g.value(l).item(), 0.3 + 0.4 + 0.4);
    }

    #[test]
    fn total_loss_rejects_weight_for_inactive_task() {
        let mut g = Graph::<f64>::new();
        let parts = TaskLossVars { cls: Some(g.constant(Tensor::scalar(1.0))), seg: None, rec: None };
        let w = TaskWeights::for_tasks(Tasks::CLS_SEG);
        assert!(total_loss(&mut g, parts, &w).is_err());
    }

    #[test]
    fn weights_from_list_match_task_count() {
        assert!(TaskWeights::from_list(Tasks::ALL, &[0.4, 0.6]).is_err());
        let w = TaskWeights::from_list(Tasks::CLS_REC, &[0.4, 0.6]).unwrap();
        assert_eq!((w.cls, w.seg, w.rec), (Some(0.4), None, Some(0.6)));
        assert!(TaskWeights::from_list(Tasks::CLS_SEG, &[0.4, 0.0]).is_err());
    }

    #[test]
    fn tasks_parse_and_display() {
        assert_eq!(Tasks::parse("cls+seg+rec").unwrap(), Tasks::ALL);
        assert_eq!(Tasks::CLS_REC.to_string(), "cls+rec");
        assert!(Tasks::parse("cls+cls").is_err());
        assert!(Tasks::parse("cls+depth").is_err());
    }

    #[test]
    fn seg_loss_without_masks_is_constant_zero() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64 * 0.1), true);
        let targets = SegTargets { masks: Tensor::zeros(&[2, 4]), present: vec![false, false] };
        let l = seg_loss(&mut g, logits, &targets, &TaskWeights::for_tasks(Tasks::CLS_SEG));
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(logits).is_none());
    }
}
