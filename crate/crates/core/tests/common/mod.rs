//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use mtlswin::numerics::rng::seeded;
use mtlswin::numerics::ParamStore;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = seeded(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

pub fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub struct Dense {
    pub vals: Vec<Vec<f64>>,
}

impl Dense {
    pub fn capture(store: &ParamStore<f64>) -> (Dense, Vec<String>) {
        let names = store.iter().map(|(_, p)| p.name.clone()).collect();
        (Dense { vals: store.iter().map(|(_, p)| p.value.data().to_vec()).collect() }, names)
    }
}

pub fn param<'a>(d: &'a Dense, names: &[String], suffix: &str) -> &'a [f64] {
    let i = names.iter().position(|n| n.ends_with(suffix)).unwrap_or_else(|| panic!("no param {suffix}"));
    &d.vals[i]
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    x.iter().zip(g).zip(b).map(|((a, g), b)| (a - m) / (v + 1e-5).sqrt() * g + b).collect()
}

pub fn dense(x: &[f64], w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    (0..out).map(|o| x.iter().enumerate().map(|(i, xi)| xi * w[i * out + o]).sum::<f64>() + b.map_or(0.0, |b| b[o])).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// One Swin block over an `h x w` grid computed token by token. A token
/// attends to every token in the same window of the rolled grid whose
/// original position did not wrap differently along either axis.
pub fn block_oracle(
    p: &Dense,
    names: &[String],
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    heads: usize,
    ws: usize,
    shift: usize,
) -> Vec<f64> {
    let d = c / heads;
    let span = 2 * ws - 1;
    let n = h * w;
    let (g1, b1) = (param(p, names, "norm1.gamma"), param(p, names, "norm1.beta"));
    let qkv_w = param(p, names, "attn.qkv.weight");
    let qkv_b = param(p, names, "attn.qkv.bias");
    let table = param(p, names, "attn.rel_bias");
    let xn: Vec<Vec<f64>> = (0..n).map(|t| layer_norm(&x[t * c..(t + 1) * c], g1, b1)).collect();
    let qkv: Vec<Vec<f64>> = xn.iter().map(|r| dense(r, qkv_w, Some(qkv_b), 3 * c)).collect();
    // position of each token in the rolled grid
    let rolled = |t: usize| (((t / w) + h - shift) % h, ((t % w) + w - shift) % w);
    let wrapped = |p: usize, len: usize| shift > 0 && p >= len - shift;

    let mut attn_out = vec![vec![0.0; c]; n];
    for qt in 0..n {
        let (qy, qx) = rolled(qt);
        let keys: Vec<usize> = (0..n)
            .filter(|&kt| {
                let (ky, kx) = rolled(kt);
                ky / ws == qy / ws && kx / ws == qx / ws && wrapped(ky, h) == wrapped(qy, h) && wrapped(kx, w) == wrapped(qx, w)
            })
            .collect();
        for hd in 0..heads {
            let logits: Vec<f64> = keys
                .iter()
                .map(|&kt| {
                    let (ky, kx) = rolled(kt);
                    let dot: f64 = (0..d).map(|j| qkv[qt][hd * d + j] * qkv[kt][c + hd * d + j]).sum();
                    let dy = (qy % ws) as isize - (ky % ws) as isize + ws as isize - 1;
                    let dx = (qx % ws) as isize - (kx % ws) as isize + ws as isize - 1;
                    dot / (d as f64).sqrt() + table[(dy as usize * span + dx as usize) * heads + hd]
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (a, &kt) in e.iter().zip(&keys) {
                for j in 0..d {
                    attn_out[qt][hd * d + j] += a / z * qkv[kt][2 * c + hd * d + j];
                }
            }
        }
    }
    let (pw, pb) = (param(p, names, "attn.proj.weight"), param(p, names, "attn.proj.bias"));
    let (g2, b2) = (param(p, names, "norm2.gamma"), param(p, names, "norm2.beta"));
    let (f1w, f1b) = (param(p, names, "mlp.fc1.weight"), param(p, names, "mlp.fc1.bias"));
    let (f2w, f2b) = (param(p, names, "mlp.fc2.weight"), param(p, names, "mlp.fc2.bias"));
    let hidden = f1b.len();
    let mut out = Vec::with_capacity(n * c);
    for t in 0..n {
        let a = dense(&attn_out[t], pw, Some(pb), c);
        let r: Vec<f64> = x[t * c..(t + 1) * c].iter().zip(&a).map(|(u, v)| u + v).collect();
        let hmid: Vec<f64> = dense(&layer_norm(&r, g2, b2), f1w, Some(f1b), hidden).into_iter().map(gelu).collect();
        let m = dense(&hmid, f2w, Some(f2b), c);
        out.extend(r.iter().zip(&m).map(|(u, v)| u + v));
    }
    out
}

const CE_W: f64 = 0.4;
const DICE_W: f64 = 0.6;

/// Per-sample segmentation loss written out with plain loops.
pub fn seg_oracle(logits: &[f64], mask: &[f64], pixels: usize) -> f64 {
    let mut ce = 0.0;
    let (mut inter, mut sp, mut sq) = (0.0, 0.0, 0.0);
    for i in 0..pixels {
        let (a, b) = (logits[2 * i], logits[2 * i + 1]);
        let m = a.max(b);
        let z = (a - m).exp() + (b - m).exp();
        let q = [(a - m).exp() / z, (b - m).exp() / z];
        let fg = mask[i] > 0.5;
        ce -= q[usize::from(fg)].max(1e-12).ln();
        let p = if fg { 1.0 } else { 0.0 };
        inter += p * q[1];
        sp += p;
        sq += q[1];
    }
    let dice = 1.0 - (2.0 * inter + 1e-5) / (sp + sq + 1e-5);
    CE_W * ce / pixels as f64 + DICE_W * dice
}

/// Concordant-pair AUC straight from the definition.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

pub fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}
