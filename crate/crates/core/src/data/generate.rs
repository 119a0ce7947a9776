//! Synthetic head-CT analog with a label-correlated confounder.
//!
//! Every image shows a bright elliptical "skull" ring around a darker brain.
//! Positives carry an elliptical bright lesion with a darker core; half the
//! negatives carry a uniform lesion, the rest none. The ring is drawn thick
//! or thin depending on a binary cue equal to the label with probability
//! `rho` and an independent coin otherwise, so in training hospitals the
//! ring predicts the label while in shifted hospitals it does not.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{BBox, Dataset, Sample, Split};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, seeded};
use crate::numerics::Tensor;

pub const HOSPITALS: u8 = 11;
/// Hospitals whose images come with lesion annotations.
pub const ANNOTATED: std::ops::RangeInclusive<u8> = 1..=4;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Size of each of the two test sets.
    pub n_test: usize,
    /// Share of the training set drawn from hospital 1 (the rest from 2-4).
    pub train_h1_fraction: f64,
    pub rho_train: f64,
    pub rho_shift: f64,
    pub pos_rate: f64,
    /// Share of negatives that still carry a (uniform) lesion.
    pub neg_lesion_rate: f64,
    pub slices_per_patient: usize,
    pub noise: f64,
    /// Additive intensity offset per hospital (index 0 is hospital 1).
    pub brightness: [f64; HOSPITALS as usize],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            n_train: 2000,
            n_val: 200,
            n_test: 179,
            train_h1_fraction: 0.25,
            rho_train: 0.9,
            rho_shift: 0.0,
            pos_rate: 0.5,
            neg_lesion_rate: 0.5,
            slices_per_patient: 4,
            noise: 0.03,
            brightness: [0.0; HOSPITALS as usize],
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("rho_train", self.rho_train)?;
        unit("rho_shift", self.rho_shift)?;
        unit("pos_rate", self.pos_rate)?;
        unit("neg_lesion_rate", self.neg_lesion_rate)?;
        unit("train_h1_fraction", self.train_h1_fraction)?;
        if self.pos_rate == 0.0 || self.pos_rate == 1.0 {
            return Err(Error::Config("pos_rate must leave both classes present".into()));
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 32", self.image_size)));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test < 2 {
            return Err(Error::Config("need n_train, n_val >= 1 and n_test >= 2".into()));
        }
        if self.slices_per_patient == 0 {
            return Err(Error::Config("slices_per_patient must be at least 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a nonnegative number".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = GenConfig::default();
        let mut brightness = d.brightness;
        for (h, b) in brightness.iter_mut().enumerate() {
            *b = kv.get_or(&format!("brightness.{}", h + 1), 0.0)?;
        }
        let cfg = GenConfig {
            image_size: kv.get_or("image_size", d.image_size)?,
            n_train: kv.get_or("n_train", d.n_train)?,
            n_val: kv.get_or("n_val", d.n_val)?,
            n_test: kv.get_or("n_test", d.n_test)?,
            train_h1_fraction: kv.get_or("train_h1_fraction", d.train_h1_fraction)?,
            rho_train: kv.get_or("rho_train", d.rho_train)?,
            rho_shift: kv.get_or("rho_shift", d.rho_shift)?,
            pos_rate: kv.get_or("pos_rate", d.pos_rate)?,
            neg_lesion_rate: kv.get_or("neg_lesion_rate", d.neg_lesion_rate)?,
            slices_per_patient: kv.get_or("slices_per_patient", d.slices_per_patient)?,
            noise: kv.get_or("noise", d.noise)?,
            brightness,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("image_size", self.image_size);
        kv.set("n_train", self.n_train);
        kv.set("n_val", self.n_val);
        kv.set("n_test", self.n_test);
        kv.set("train_h1_fraction", self.train_h1_fraction);
        kv.set("rho_train", self.rho_train);
        kv.set("rho_shift", self.rho_shift);
        kv.set("pos_rate", self.pos_rate);
        kv.set("neg_lesion_rate", self.neg_lesion_rate);
        kv.set("slices_per_patient", self.slices_per_patient);
        kv.set("noise", self.noise);
        for (h, b) in self.brightness.iter().enumerate() {
            kv.set(&format!("brightness.{}", h + 1), b);
        }
        kv.set("seed", self.seed);
        kv
    }
}

#[derive(Clone, Copy, Debug)]
struct Lesion {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    /// Darker core (label 1) versus uniform intensity.
    core: bool,
}

impl Lesion {
    fn level(&self, y: f64, x: f64, scale: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = (dy * c + dx * s) / self.a;
        let v = (-dy * s + dx * c) / self.b;
        (u * u + v * v).sqrt() / scale
    }
}

#[derive(Clone, Copy, Debug)]
struct Patient {
    id: u32,
    hospital: u8,
    label: u8,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    lesion: Option<Lesion>,
}

const SKULL: f64 = 0.95;
const BRAIN: f64 = 0.30;
const LESION: f64 = 0.75;
const CORE: f64 = 0.35;
const CORE_SCALE: f64 = 0.55;

struct Generator<'a> {
    cfg: &'a GenConfig,
    next_patient: u32,
}

impl Generator<'_> {
    fn patient<R: Rng + ?Sized>(&mut self, rng: &mut R, hospital: u8, label: u8) -> Patient {
        let s = self.cfg.image_size as f64;
        let k = s / 64.0;
        let mid = (s - 1.0) / 2.0;
        let cy = mid + rng.random_range(-2.0..=2.0) * k;
        let cx = mid + rng.random_range(-2.0..=2.0) * k;
        let ry = s * rng.random_range(0.42..=0.46);
        let rx = s * rng.random_range(0.38..=0.42);
        let has_lesion = label == 1 || rng.random_bool(self.cfg.neg_lesion_rate);
        let lesion = has_lesion.then(|| {
            let r = rng.random_range(0.0..=0.18) * s;
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            Lesion {
                cy: cy + r * phi.sin(),
                cx: cx + r * phi.cos(),
                a: rng.random_range(6.0..=12.0) * k,
                b: rng.random_range(4.5..=9.0) * k,
                theta: rng.random_range(0.0..std::f64::consts::PI),
                core: label == 1,
            }
        });
        let id = self.next_patient;
        self.next_patient += 1;
        Patient { id, hospital, label, cy, cx, ry, rx, lesion }
    }

    fn slice<R: Rng + ?Sized>(&self, rng: &mut R, p: &Patient, rho: f64) -> Sample {
        let n = self.cfg.image_size;
        let k = n as f64 / 64.0;
        let cue = if rng.random_bool(rho) { p.label } else { u8::from(rng.random_bool(0.5)) };
        // one pixel apart at 64x64: learnable, yet subtler than the lesion core
        let thickness = if cue == 1 { 3.0 } else { 2.0 } * k;
        let head_scale = rng.random_range(0.97..=1.0);
        let (ry, rx) = (p.ry * head_scale, p.rx * head_scale);
        let lesion = p.lesion.map(|l| {
            let f = rng.random_range(0.8..=1.0);
            Lesion {
                cy: l.cy + rng.random_range(-1.0..=1.0),
                cx: l.cx + rng.random_range(-1.0..=1.0),
                a: l.a * f,
                b: l.b * f,
                ..l
            }
        });
        let offset = self.cfg.brightness[p.hospital as usize - 1];
        let annotated = ANNOTATED.contains(&p.hospital) && lesion.is_some();

        let mut img = vec![0f32; n * n];
        let mut mask = vec![0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = (y as f64, x as f64);
                let (dy, dx) = (fy - p.cy, fx - p.cx);
                let outer = (dy / ry).powi(2) + (dx / rx).powi(2);
                let inner = (dy / (ry - thickness)).powi(2) + (dx / (rx - thickness)).powi(2);
                let mut v = if outer > 1.0 {
                    0.0
                } else if inner > 1.0 {
                    SKULL
                } else {
                    BRAIN + offset
                };
                if let Some(l) = &lesion {
                    if l.level(fy, fx, 1.0) <= 1.0 {
                        mask[y * n + x] = 1.0;
                        v = if l.core && l.level(fy, fx, CORE_SCALE) <= 1.0 { CORE } else { LESION } + offset;
                    }
                }
                let noise: f64 = rng.sample(StandardNormal);
                v += self.cfg.noise * noise;
                img[y * n + x] = quantize(v);
            }
        }
        let mask = Tensor::raw(vec![n, n], mask);
        let lesion_box = lesion.and_then(|_| BBox::of_mask(&mask));
        Sample {
            id: String::new(),
            image: Tensor::raw(vec![n, n, 1], img),
            label: p.label,
            mask: annotated.then_some(mask),
            hospital: p.hospital,
            patient: p.id,
            split: Split::Train,
            cue: Some(cue),
            lesion: lesion_box,
        }
    }

    /// Whole patients (several slices each) until `count` slices exist; the
    /// last patient may be truncated.
    fn pool<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        count: usize,
        rho: f64,
        hospital: impl Fn(&mut R) -> u8,
        label: impl Fn(&mut R) -> u8,
    ) -> Vec<Sample> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let h = hospital(rng);
            let l = label(rng);
            let p = self.patient(rng, h, l);
            let take = self.cfg.slices_per_patient.min(count - out.len());
            for _ in 0..take {
                out.push(self.slice(rng, &p, rho));
            }
        }
        out
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Generates the four splits. Ids are assigned in split order
/// (train, val, test_in, test_shift).
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut gen = Generator { cfg, next_patient: 0 };
    let pos = cfg.pos_rate;

    // Hospital 1: shared pool for train/val/test_in (slices of one patient may
    // land in different splits, as in the reference protocol).
    let h1_train = ((cfg.n_train as f64) * cfg.train_h1_fraction).round() as usize;
    let h1_count = h1_train + cfg.n_val + cfg.n_test;
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    let mut h1 = gen.pool(&mut rng, h1_count, cfg.rho_train, |_| 1, |r| u8::from(r.random_bool(pos)));
    h1.shuffle(&mut rng);
    let h1_train = h1.split_off(cfg.n_test + cfg.n_val);
    let mut val = h1.split_off(cfg.n_test);
    let mut test_in = h1;

    let positives = test_in.iter().filter(|s| s.label == 1).count();
    if positives == 0 || positives == test_in.len() {
        return Err(Error::Config(format!("test_in of {} samples has a single class; increase n_test", cfg.n_test)));
    }

    let mut rng = seeded(derive_seed(cfg.seed, 2));
    let others = gen.pool(
        &mut rng,
        cfg.n_train - h1_train.len(),
        cfg.rho_train,
        |r| r.random_range(2..=4),
        |r| u8::from(r.random_bool(pos)),
    );
    let mut train = h1_train;
    train.extend(others);
    train.shuffle(&mut rng);

    // Shifted hospitals: fresh patients, positive count matched to test_in.
    let mut rng = seeded(derive_seed(cfg.seed, 3));
    let mut shift = gen.pool(&mut rng, positives, cfg.rho_shift, |r| r.random_range(5..=HOSPITALS), |_| 1);
    shift.extend(gen.pool(&mut rng, cfg.n_test - positives, cfg.rho_shift, |r| r.random_range(5..=HOSPITALS), |_| 0));
    shift.shuffle(&mut rng);

    let mut samples = Vec::with_capacity(cfg.n_train + cfg.n_val + 2 * cfg.n_test);
    for (split, part) in
        [(Split::Train, &mut train), (Split::Val, &mut val), (Split::TestIn, &mut test_in), (Split::TestShift, &mut shift)]
    {
        for mut s in part.drain(..) {
            s.split = split;
            s.id = format!("{:06}", samples.len());
            samples.push(s);
        }
    }
    Ok(Dataset { samples })
}

/// Pearson correlation between two equally long 0/1 sequences.
pub fn binary_correlation(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig { n_train: 60, n_val: 10, n_test: 12, ..GenConfig::default() }
    }

    #[test]
    fn split_sizes_and_matched_positives() {
        let d = generate_dataset(&small()).unwrap();
        assert_eq!(d.count(Split::Train), 60);
        assert_eq!(d.count(Split::Val), 10);
        assert_eq!(d.count(Split::TestIn), 12);
        assert_eq!(d.count(Split::TestShift), 12);
        let pos = |s: Split| d.split(s).iter().filter(|x| x.label == 1).count();
        assert_eq!(pos(Split::TestIn), pos(Split::TestShift));
        for s in d.split(Split::Val).iter().chain(&d.split(Split::TestIn)) {
            assert_eq!(s.hospital, 1);
        }
        for s in d.split(Split::TestShift) {
            assert!((5..=11).contains(&s.hospital));
            assert!(s.mask.is_none());
        }
    }

    #[test]
    fn masks_only_on_annotated_lesions() {
        let d = generate_dataset(&small()).unwrap();
        for s in &d.samples {
            if s.mask.is_some() {
                assert!(ANNOTATED.contains(&s.hospital));
                assert!(s.lesion.is_some());
            }
            if s.label == 1 {
                assert!(s.lesion.is_some());
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_dataset(&GenConfig { rho_train: 1.5, ..small() }).is_err());
        assert!(generate_dataset(&GenConfig { n_test: 1, ..small() }).is_err());
        assert!(generate_dataset(&GenConfig { image_size: 48, ..small() }).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = GenConfig { rho_shift: 0.2, seed: 9, ..GenConfig::default() };
        let kv = cfg.to_kv();
        assert_eq!(GenConfig::from_kv(&kv).unwrap(), cfg);
        kv.finish().unwrap();
    }
}
