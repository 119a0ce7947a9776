//! Classification and segmentation metrics, batch prediction, and Grad-CAM.

use std::fmt;
use std::path::Path;

use crate::arch::TaskModel;
use crate::data::{batch_of, Sample};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor};

/// Probability above which a sample is called positive.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub prec: f64,
    pub rec: f64,
    pub f1: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub iou_seg: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "split,n,acc,prec,rec,f1,auc,iou_seg,tp,fp,tn,fn";

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn csv_row(&self, split: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{split},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{}",
            self.n(),
            self.acc,
            self.prec,
            self.rec,
            self.f1,
            opt(self.auc),
            opt(self.iou_seg),
            self.tp,
            self.fp,
            self.tn,
            self.fn_
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        write!(
            f,
            "acc {:.3}  prec {:.3}  rec {:.3}  f1 {:.3}  auc {}  iou {}",
            self.acc,
            self.prec,
            self.rec,
            self.f1,
            opt(self.auc),
            opt(self.iou_seg)
        )
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Hard metrics at [`THRESHOLD`] plus Mann-Whitney AUC.
pub fn classification_metrics(scores: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("classification scores".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > THRESHOLD, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let prec = ratio(tp, tp + fp);
    let rec = ratio(tp, tp + fn_);
    // harmonic mean of prec and rec, written on counts
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    Ok(MetricsReport {
        acc: ratio(tp + tn, scores.len()),
        prec,
        rec,
        f1,
        auc: auc(scores, labels),
        iou_seg: None,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept integral
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean (i + j + 2) / 2
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank2_pos += pos_in_group * (i + j + 2) as u64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    let u2 = rank2_pos - np * (np + 1);
    Some(u2 as f64 / (2 * np * nn) as f64)
}

/// Intersection over union of two binary masks; two empty masks score 1.
pub fn iou(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "mask sizes differ");
    let inter = pred.iter().zip(truth).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(truth).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-sample model outputs on a list of samples.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    /// Positive-class probabilities, when the model classifies.
    pub scores: Option<Vec<f64>>,
    /// Foreground masks (argmax of the two segmentation logits).
    pub seg: Option<Vec<Vec<bool>>>,
}

/// Runs the model in inference batches.
pub fn predict<M: TaskModel>(model: &M, store: &ParamStore<f32>, samples: &[&Sample], batch: usize) -> Result<Predictions> {
    let mut scores: Option<Vec<f64>> = None;
    let mut seg: Option<Vec<Vec<bool>>> = None;
    for chunk in samples.chunks(batch.max(1)) {
        let b = batch_of(chunk)?;
        let mut g = Graph::with_params(store);
        let x = g.constant(b.images);
        let heads = model.heads(&mut g, x)?;
        if let Some(l) = heads.cls {
            let p = g.softmax(l);
            let v = g.value(p);
            if !v.is_finite() {
                return Err(Error::NonFinite("classification probabilities".into()));
            }
            let out = scores.get_or_insert_with(Vec::new);
            out.extend(v.data().chunks(2).map(|r| r[1] as f64));
        }
        if let Some(s) = heads.seg {
            let v = g.value(s);
            let pixels = v.len() / (2 * chunk.len());
            let out = seg.get_or_insert_with(Vec::new);
            for i in 0..chunk.len() {
                let rows = &v.data()[i * pixels * 2..(i + 1) * pixels * 2];
                out.push(rows.chunks(2).map(|r| r[1] > r[0]).collect());
            }
        }
    }
    Ok(Predictions { scores, seg })
}

/// Mean IoU over samples that carry a mask.
pub fn mean_iou(samples: &[&Sample], seg: &[Vec<bool>]) -> Option<f64> {
    let vals: Vec<f64> = samples
        .iter()
        .zip(seg)
        .filter_map(|(s, p)| {
            s.mask.as_ref().map(|m| {
                let truth: Vec<bool> = m.data().iter().map(|&v| v > 0.5).collect();
                iou(p, &truth)
            })
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Full metric battery on one split.
pub fn evaluate<M: TaskModel>(model: &M, store: &ParamStore<f32>, samples: &[&Sample], batch: usize) -> Result<MetricsReport> {
    let preds = predict(model, store, samples, batch)?;
    let mut report = match &preds.scores {
        Some(s) => {
            let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
            classification_metrics(s, &labels)?
        }
        None => MetricsReport::default(),
    };
    report.iou_seg = preds.seg.as_ref().and_then(|p| mean_iou(samples, p));
    Ok(report)
}

/// Rows of a plain-text results table.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let mut s =
        format!("{:<12} {:>5} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n", "split", "n", "acc", "prec", "rec", "f1", "auc", "iou");
    for (name, r) in rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<12} {:>5} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6} {:>6}\n",
            name,
            r.n(),
            r.acc,
            r.prec,
            r.rec,
            r.f1,
            opt(r.auc),
            opt(r.iou_seg)
        ));
    }
    s
}

/// A `(h, w)` map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Heatmap {
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.w, best % self.w)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn upsample_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = (fx - x0 as f64) as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[y * ow + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Grad-CAM from one image's stage activations and their gradients, both
/// `(h*w, C)`: channel weights are the spatial mean gradient, the map is the
/// ReLU of the weighted channel sum, upsampled to `out x out` and min-max
/// normalized. An all-zero map stays all zero.
pub fn cam_from_activations(features: &[f32], grads: &[f32], h: usize, w: usize, c: usize, out: usize) -> Heatmap {
    assert_eq!(features.len(), h * w * c);
    assert_eq!(grads.len(), h * w * c);
    let mut weights = vec![0f64; c];
    for row in grads.chunks(c) {
        for (wk, &g) in weights.iter_mut().zip(row) {
            *wk += g as f64;
        }
    }
    let hw = (h * w) as f64;
    weights.iter_mut().for_each(|v| *v /= hw);
    let coarse: Vec<f32> = features
        .chunks(c)
        .map(|row| row.iter().zip(&weights).map(|(&f, &wk)| f as f64 * wk).sum::<f64>().max(0.0) as f32)
        .collect();
    let mut data = upsample_bilinear(&coarse, h, w, out, out);
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi <= 0.0 {
        data.iter_mut().for_each(|v| *v = 0.0);
    } else if hi == lo {
        data.iter_mut().for_each(|v| *v = 1.0);
    } else {
        data.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
    Heatmap { h: out, w: out, data }
}

/// Grad-CAM of `target_class` for a single `(H, W, 1)` image at encoder
/// stage `stage`.
pub fn grad_cam<M: TaskModel>(
    model: &M,
    store: &ParamStore<f32>,
    image: &Tensor<f32>,
    target_class: usize,
    stage: usize,
) -> Result<Heatmap> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected one (H, W, C) image, got {s:?}")));
    }
    let size = s[0];
    let x = image.reshape(&[1, s[0], s[1], s[2]])?;
    let mut g = Graph::with_params(store).track_all(true);
    let xv = g.constant(x);
    let (logits, fm) = model.stage_features(&mut g, xv, stage)?;
    let logits = logits.ok_or_else(|| Error::Config("Grad-CAM needs a classification head".into()))?;
    let classes = g.shape(logits)[1];
    if target_class >= classes {
        return Err(Error::Config(format!("target class {target_class} >= {classes}")));
    }
    if !g.value(logits).is_finite() || !g.value(fm.tokens).is_finite() {
        return Err(Error::NonFinite("model outputs".into()));
    }
    let picked = g.pick_cols(logits, std::sync::Arc::new(vec![target_class]));
    let root = g.sum(picked);
    let grads = g.backward(root)?;
    let feat = g.value(fm.tokens);
    let zeros;
    let grad = match grads.get(fm.tokens) {
        Some(t) => t,
        None => {
            zeros = Tensor::zeros(feat.shape());
            &zeros
        }
    };
    Ok(cam_from_activations(feat.data(), grad.data(), fm.h, fm.w, fm.c, size))
}

pub fn heatmap_pgm(map: &Heatmap) -> Vec<u8> {
    let px: Vec<u8> = map.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    crate::data::io::encode_pgm(map.w, map.h, &px)
}

/// Blue-to-red ramp through green.
fn colormap(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Writes the heatmap blended over the grayscale image as an RGB PNG.
pub fn save_overlay_png(image: &Tensor<f32>, map: &Heatmap, path: &Path, alpha: f32) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if (h, w) != (map.h, map.w) {
        return Err(Error::Shape("heatmap and image sizes differ".into()));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for (i, &m) in map.data.iter().enumerate() {
        let gray = image.data()[i * image.shape()[2]];
        for ch in colormap(m) {
            let v = (1.0 - alpha) * gray + alpha * ch;
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).ok_or_else(|| Error::Image("buffer size".into()))?;
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
