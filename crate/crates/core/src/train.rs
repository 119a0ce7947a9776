//! SGD with momentum and coupled L2, poly learning-rate decay, and the
//! training loops for the multi-task and joint models.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::arch::{AnyModel, Arch, JointSwin, ModelConfig, MtlSwinUnet, TaskModel, Variant};
use crate::config::KvConfig;
use crate::data::{augment, make_batch, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::losses::{cross_entropy_logits, mse_loss, seg_loss, total_loss, SegTargets, TaskLossVars, TaskLosses, TaskWeights};
use crate::numerics::rng::{derive_seed, seeded};
use crate::numerics::{save_checkpoint, Checkpoint, Graph, ParamStore, Real, Tensor, Var};

pub const POLY_POWER: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_base: f64,
    pub iter_max: usize,
    pub power: f64,
}

impl LrSchedule {
    pub fn poly(lr_base: f64, iter_max: usize) -> Self {
        LrSchedule { lr_base, iter_max, power: POLY_POWER }
    }

    /// `lr_base * (1 - iter / iter_max)^power`.
    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        if iter > self.iter_max {
            return Err(Error::Schedule { iter, iter_max: self.iter_max });
        }
        if self.iter_max == 0 {
            return Ok(self.lr_base);
        }
        Ok(self.lr_base * (1.0 - iter as f64 / self.iter_max as f64).powf(self.power))
    }
}

pub fn lr_at(iter: usize, sched: &LrSchedule) -> Result<f64> {
    sched.lr_at(iter)
}

/// Momentum SGD with L2 folded into the gradient:
/// `v <- m v + (g + wd w)`, `w <- w - lr v`. Frozen parameters are skipped and
/// their velocity never allocated.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (m, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            if p.grad.shape() != p.value.shape() {
                return Err(Error::Shape(format!("{}: grad {:?} vs value {:?}", p.name, p.grad.shape(), p.value.shape())));
            }
            let v = self.velocity[i].get_or_insert_with(|| vec![T::zero(); p.value.len()]);
            let grads = p.grad.data().to_vec();
            for ((w, g), vk) in p.value.data_mut().iter_mut().zip(grads).zip(v.iter_mut()) {
                *vk = m * *vk + (g + wd * *w);
                *w = *w - lr * *vk;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub batch: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub eval_batch: usize,
}

impl TrainConfig {
    /// Batch size and learning rate of the reference recipe for each model,
    /// with desk-scale epoch counts.
    pub fn defaults_for(cfg: &ModelConfig) -> Self {
        let (batch, lr_base, epochs) = match cfg.arch {
            Arch::Joint => (128, 0.004, 30),
            Arch::SwinUnet => (32, 0.01, 10),
            Arch::Mtl if cfg.variant == Variant::Tiny && cfg.tasks.count() == 3 => (32, 0.01, 30),
            Arch::Mtl => (64, 0.01, 30),
        };
        TrainConfig { lr_base, batch, epochs, momentum: 0.9, weight_decay: 1e-4, seed: 0, augment: true, eval_batch: 64 }
    }

    pub fn iters_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch)
    }

    pub fn iter_max(&self, n_train: usize) -> usize {
        self.epochs * self.iters_per_epoch(n_train)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch, epochs and eval_batch must be positive".into()));
        }
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(Error::Config(format!("lr_base {} must be positive", self.lr_base)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        Ok(())
    }

    /// Reads `lr`, `batch`, `epochs`, `momentum`, `weight_decay`, `augment`
    /// and `eval_batch`, falling back to `base`.
    pub fn from_kv(kv: &KvConfig, base: TrainConfig, seed: u64) -> Result<Self> {
        let t = TrainConfig {
            lr_base: kv.get_or("lr", base.lr_base)?,
            batch: kv.get_or("batch", base.batch)?,
            epochs: kv.get_or("epochs", base.epochs)?,
            momentum: kv.get_or("momentum", base.momentum)?,
            weight_decay: kv.get_or("weight_decay", base.weight_decay)?,
            augment: kv.get_or("augment", base.augment)?,
            eval_batch: kv.get_or("eval_batch", base.eval_batch)?,
            seed,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        [
            ("lr", self.lr_base.to_string()),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("augment", self.augment.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Builds per-task losses and the weighted total for one batch.
pub fn batch_loss<T: Real, M: TaskModel>(
    g: &mut Graph<T>,
    model: &M,
    images: &Tensor<T>,
    labels: &[usize],
    seg: &SegTargets<T>,
    w: &TaskWeights,
) -> Result<(TaskLossVars, Var)> {
    let x = g.constant(images.clone());
    let heads = model.heads(g, x)?;
    let parts = TaskLossVars {
        cls: heads.cls.map(|l| cross_entropy_logits(g, l, labels)),
        seg: heads.seg.map(|s| seg_loss(g, s, seg, w)),
        rec: heads.rec.map(|r| mse_loss(g, x, r)),
    };
    let total = total_loss(g, parts, w)?;
    Ok((parts, total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: TaskLosses,
    pub val_acc: Option<f64>,
    pub val_auc: Option<f64>,
    pub val_iou: Option<f64>,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,L_cls,L_seg,L_rec,L_total,val_acc,val_auc,lr,val_iou";

pub fn format_log(log: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.8},{},{},{:.8},{}",
            e.epoch,
            opt(e.losses.cls),
            opt(e.losses.seg),
            opt(e.losses.rec),
            e.losses.total,
            opt(e.val_acc),
            opt(e.val_auc),
            e.lr,
            opt(e.val_iou)
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub iterations: usize,
    /// Validation metrics of the selected (best) parameters.
    pub val: MetricsReport,
}

/// Selection score: validation AUC for classifiers (accuracy when AUC is
/// undefined), mean IoU for the segmentation-only model.
fn selection_score(m: &MetricsReport, classifies: bool) -> f64 {
    if classifies {
        m.auc.unwrap_or(m.acc)
    } else {
        m.iou_seg.unwrap_or(0.0)
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    sum / n.max(1) as f64
}

/// Generic loop: shuffles, augments, steps, validates every epoch and leaves
/// the best-by-validation parameters in `store`.
pub fn fit<M: TaskModel>(
    model: &M,
    store: &mut ParamStore<f32>,
    train: &[&Sample],
    val: &[&Sample],
    tcfg: &TrainConfig,
) -> Result<TrainReport> {
    tcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    let cfg = model.config();
    let w = cfg.weights;
    let classifies = cfg.tasks.cls;
    let per_epoch = tcfg.iters_per_epoch(train.len());
    let sched = LrSchedule::poly(tcfg.lr_base, tcfg.iter_max(train.len()));
    let mut opt = Sgd::new(tcfg.momentum, tcfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor<f32>>, MetricsReport)> = None;
    let mut iter = 0;

    for epoch in 0..tcfg.epochs {
        let mut rng = seeded(derive_seed(tcfg.seed, 0x1000 + epoch as u64));
        order.shuffle(&mut rng);
        let (mut s_cls, mut s_seg, mut s_rec, mut s_tot) = (0.0, 0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for chunk in order.chunks(tcfg.batch) {
            let items: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let s = train[i];
                    if tcfg.augment {
                        let (im, m) = augment(&mut rng, &s.image, s.mask.as_ref());
                        (im, m, s.label)
                    } else {
                        (s.image.clone(), s.mask.clone(), s.label)
                    }
                })
                .collect();
            let batch = make_batch(&items)?;
            lr = sched.lr_at(iter)?;
            store.zero_grad();
            let grads = {
                let mut g = Graph::with_params(store);
                let (parts, total) = batch_loss(&mut g, model, &batch.images, &batch.labels, &batch.seg, &w)?;
                let loss = g.value(total).item() as f64;
                if !loss.is_finite() {
                    return Err(Error::Diverged { iter, loss });
                }
                let item = |v: Option<Var>| v.map(|v| g.value(v).item() as f64).unwrap_or(0.0);
                s_cls += item(parts.cls);
                s_seg += item(parts.seg);
                s_rec += item(parts.rec);
                s_tot += loss;
                g.backward(total).map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { iter, loss: f64::NAN },
                    e => e,
                })?
            };
            store.accumulate(&grads);
            opt.step(store, lr)?;
            iter += 1;
        }

        let report = evaluate(model, store, val, tcfg.eval_batch)?;
        let score = selection_score(&report, classifies);
        log.push(EpochLog {
            epoch: epoch + 1,
            losses: TaskLosses {
                cls: cfg.tasks.cls.then(|| mean(s_cls, per_epoch)),
                seg: cfg.tasks.seg.then(|| mean(s_seg, per_epoch)),
                rec: cfg.tasks.rec.then(|| mean(s_rec, per_epoch)),
                total: mean(s_tot, per_epoch),
            },
            val_acc: classifies.then_some(report.acc),
            val_auc: report.auc,
            val_iou: report.iou_seg,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _, _, _)| score > *b) {
            let snapshot = store.iter().map(|(_, p)| p.value.clone()).collect();
            best = Some((score, epoch + 1, snapshot, report));
        }
    }

    let (best_score, best_epoch, snapshot, val_report) = best.expect("at least one epoch");
    for (p, v) in store.iter_mut().zip(snapshot) {
        p.value = v;
    }
    Ok(TrainReport { log, best_epoch, best_score, iterations: iter, val: val_report })
}

/// Everything produced by a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AnyModel,
    pub store: ParamStore<f32>,
    pub report: TrainReport,
    pub meta: BTreeMap<String, String>,
}

impl TrainOutcome {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        crate::numerics::encode_checkpoint(&self.store, &self.meta)
    }

    /// Writes `best.ckpt` and `log.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&self.store, &self.meta, &dir.join("best.ckpt"))?;
        let p = dir.join("log.csv");
        std::fs::write(&p, format_log(&self.report.log)).map_err(|e| Error::io(&p, e))
    }
}

fn checkpoint_meta(cfg: &ModelConfig, tcfg: &TrainConfig, report: &TrainReport) -> BTreeMap<String, String> {
    let mut meta = cfg.to_meta();
    for (k, v) in tcfg.to_meta() {
        meta.insert(format!("train.{k}"), v);
    }
    meta.insert("best_epoch".into(), report.best_epoch.to_string());
    meta
}

/// Training samples for a model: the segmentation-only model sees annotated
/// samples only, since unannotated ones contribute no loss.
pub fn training_pool<'a>(cfg: &ModelConfig, data: &'a Dataset, split: Split) -> Vec<&'a Sample> {
    let all = data.split(split);
    if cfg.tasks.cls {
        all
    } else {
        all.into_iter().filter(|s| s.mask.is_some()).collect()
    }
}

/// Trains the multi-task model (or the segmentation-only Swin-Unet when
/// `cfg.arch` is `SwinUnet`).
pub fn train_mtl(cfg: &ModelConfig, tcfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.arch == Arch::Joint {
        return Err(Error::Config("use train_joint for the joint architecture".into()));
    }
    check_image_size(cfg, data)?;
    let mut store = ParamStore::new();
    let model = MtlSwinUnet::new(cfg, &mut store, &mut seeded(derive_seed(tcfg.seed, 0)))?;
    let train = training_pool(cfg, data, Split::Train);
    let val = training_pool(cfg, data, Split::Val);
    let report = fit(&model, &mut store, &train, &val, tcfg)?;
    let meta = checkpoint_meta(cfg, tcfg, &report);
    Ok(TrainOutcome { model: AnyModel::Mtl(model), store, report, meta })
}

/// Second joint-learning phase: freeze the encoder of a trained
/// segmentation checkpoint and train a fresh encoder plus the widened head.
pub fn train_joint(seg_ckpt: &Checkpoint<f32>, tcfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let seg_cfg = ModelConfig::from_meta(&seg_ckpt.meta)?;
    if seg_cfg.arch != Arch::SwinUnet {
        return Err(Error::Config(format!("joint training needs a swin-unet checkpoint, got {}", seg_cfg.arch)));
    }
    let cfg = seg_cfg.with_arch(Arch::Joint);
    check_image_size(&cfg, data)?;
    let mut store = ParamStore::new();
    let model = JointSwin::new(&cfg, &mut store, &mut seeded(derive_seed(tcfg.seed, 0)))?;
    model.load_frozen(&mut store, seg_ckpt)?;
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    let report = fit(&model, &mut store, &train, &val, tcfg)?;
    let mut meta = checkpoint_meta(&cfg, tcfg, &report);
    meta.insert("frozen_fingerprint".into(), store.fingerprint(crate::arch::FROZEN_PREFIX));
    Ok(TrainOutcome { model: AnyModel::Joint(model), store, report, meta })
}

fn check_image_size(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    match data.image_size() {
        Some(s) if s == cfg.image_size => Ok(()),
        Some(s) => Err(Error::Config(format!("dataset images are {s}px but model expects {}px", cfg.image_size))),
        None => Err(Error::Dataset("empty dataset".into())),
    }
}
