//! End-to-end acceptance run. Prints one verdict line per criterion; the
//! lines are the result. Set `ACCEPTANCE_STRICT=1` to also exit non-zero when
//! any criterion fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{block_oracle, frac, pairwise_auc, randn, randomize, seg_oracle, Dense};
use mtlswin::arch::{Arch, ModelConfig, MtlSwinUnet, ENCODER_PREFIX, FROZEN_PREFIX};
use mtlswin::data::generate::{generate_dataset, GenConfig};
use mtlswin::data::io::save_dataset;
use mtlswin::data::{make_batch, Dataset, Sample, Split};
use mtlswin::eval::{auc, cam_from_activations, classification_metrics, evaluate, grad_cam, iou};
use mtlswin::losses::{
    cross_entropy, dice_loss, mse_loss, seg_loss, total_loss, SegTargets, TaskLossVars, TaskWeights, Tasks, DICE_EPS,
};
use mtlswin::numerics::rng::seeded;
use mtlswin::numerics::{decode_checkpoint, Graph, ParamStore, Tensor};
use mtlswin::swin::{window_attention, FeatureMap, PatchExpand, PatchMerge, SwinBlock};
use mtlswin::train::{batch_loss, format_log, train_joint, train_mtl, LrSchedule, Sgd, TrainConfig, TrainOutcome};
use mtlswin::verify::full_suite;
use mtlswin::Result;
use rand::Rng;

/// Epoch budget of each trend-table model.
const TREND_EPOCHS: usize = 10;
const TREND_SEEDS: u64 = 5;
/// Encoder stage whose activations feed the Grad-CAM check.
const CAM_STAGE: usize = 1;
/// Constant step size of the full-batch overfit loop.
const OVERFIT_LR: f64 = 0.03;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn small_data(seed: u64) -> Result<Dataset> {
    generate_dataset(&GenConfig { image_size: 32, n_train: 48, n_val: 12, n_test: 12, seed, ..GenConfig::default() })
}

fn one_epoch(tcfg: &mut TrainConfig) {
    tcfg.epochs = 1;
    tcfg.batch = 16;
}

fn gradient_fidelity() -> Result<Verdict> {
    let t = Instant::now();
    let results = full_suite(Some(8))?;
    let elapsed = t.elapsed();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("checks exist");
    let failed = results.iter().filter(|r| !r.passed()).count();
    let pass = failed == 0 && worst.max_rel_error < 1e-5 && elapsed < Duration::from_secs(300);
    Ok(verdict(
        pass,
        format!(
            "{} checks, {failed} failed, worst {} {} at {:.2e}, {:.1}s",
            results.len(),
            worst.name,
            worst.case,
            worst.max_rel_error,
            elapsed.as_secs_f64()
        ),
    ))
}

fn scalar_of(build: impl FnOnce(&mut Graph<f64>) -> mtlswin::numerics::Var) -> f64 {
    let mut g = Graph::<f64>::new();
    let v = build(&mut g);
    g.value(v).item()
}

fn formula_exactness() -> Result<Verdict> {
    let mut rng = seeded(1234);
    let mut worst_lr = 0.0f64;
    for _ in 0..1000 {
        let lr_base = rng.random_range(1e-4..1.0);
        let iter_max = rng.random_range(1..100_000usize);
        let iter = rng.random_range(0..=iter_max);
        let want = if iter == iter_max { 0.0 } else { lr_base * (0.9 * (1.0 - iter as f64 / iter_max as f64).ln()).exp() };
        let got = LrSchedule::poly(lr_base, iter_max).lr_at(iter)?;
        worst_lr = worst_lr.max((got - want).abs());
    }

    let total = {
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::scalar(1.0));
        let parts = TaskLossVars { cls: Some(one), seg: Some(one), rec: Some(one) };
        let t = total_loss(&mut g, parts, &TaskWeights::for_tasks(Tasks::ALL))?;
        g.value(t).item()
    };

    let ce = |probs: Vec<f64>, label: usize| {
        scalar_of(|g| {
            let q = g.constant(Tensor::new(vec![1, probs.len()], probs).unwrap());
            cross_entropy(g, q, &[label])
        })
    };
    let vec_loss = |f: fn(&mut Graph<f64>, _, _) -> _, p: &[f64], q: &[f64]| {
        scalar_of(|g| {
            let pv = g.constant(Tensor::new(vec![p.len()], p.to_vec()).unwrap());
            let qv = g.constant(Tensor::new(vec![q.len()], q.to_vec()).unwrap());
            f(g, pv, qv)
        })
    };
    // hand values; the dice reference keeps the smoothing term
    let cases = [
        ("ce one-hot", ce(vec![1.0, 0.0], 0), 0.0),
        ("ce uniform", ce(vec![0.5, 0.5], 1), std::f64::consts::LN_2),
        ("ce 0.9", ce(vec![0.9, 0.1], 0), -(0.9f64.ln())),
        (
            "dice half",
            vec_loss(dice_loss, &[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0]),
            1.0 - (2.0 + DICE_EPS) / (4.0 + DICE_EPS),
        ),
        ("dice equal", vec_loss(dice_loss, &[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]), 0.0),
        ("dice miss", vec_loss(dice_loss, &[1.0; 4], &[0.0; 4]), 1.0 - DICE_EPS / (4.0 + DICE_EPS)),
        ("mse", vec_loss(mse_loss, &[0.0, 2.0], &[0.0, 0.0]), 2.0),
        ("mse equal", vec_loss(mse_loss, &[0.3, 0.7], &[0.3, 0.7]), 0.0),
    ];
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() >= 1e-9)
        .map(|(n, got, want)| format!("{n} {got} vs {want}"))
        .collect();
    let pass = worst_lr <= 1e-12 && total == 1.1 && bad.is_empty();
    Ok(verdict(
        pass,
        format!(
            "lr max diff {worst_lr:.1e}, total {total}, hand examples off: {}",
            if bad.is_empty() { "none".into() } else { bad.join("; ") }
        ),
    ))
}

fn frozen_params(store: &ParamStore<f32>, prefix: &str) -> BTreeMap<String, Vec<u32>> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| (p.name[prefix.len()..].to_string(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn structural_invariants() -> Result<Verdict> {
    let mut notes = Vec::new();
    let mut pass = true;

    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(1);
    let merge = PatchMerge::new(&mut store, &mut rng, "m", 8);
    let expand = PatchExpand::new(&mut store, &mut rng, "e", 16);
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::from_fn(&[2 * 8 * 8, 8], |i| (i as f64 * 0.37).sin()));
    let merged = merge.forward(&mut g, FeatureMap { tokens: x, batch: 2, h: 8, w: 8, c: 8 })?;
    let back = expand.forward(&mut g, merged)?;
    let shape_ok = g.shape(back.tokens) == g.shape(x) && (back.h, back.w, back.c) == (8, 8, 8);
    pass &= shape_ok;
    notes.push(format!("merge/expand shape {}", if shape_ok { "ok" } else { "broken" }));

    let cfg = ModelConfig::toy(Tasks::ALL);
    let mut store = ParamStore::<f64>::new();
    let model = MtlSwinUnet::new(&cfg, &mut store, &mut seeded(2))?;
    let mut g = Graph::with_params(&store);
    let images = Tensor::<f64>::from_fn(&[2, 32, 32, 1], |i| (i % 7) as f64 / 7.0);
    let xv = g.constant(images.clone());
    let out = model.forward(&mut g, xv)?;
    let rec_ok = out.rec_image.is_some_and(|r| g.shape(r) == images.shape());
    pass &= rec_ok;
    notes.push(format!("rec shape {}", if rec_ok { "ok" } else { "broken" }));

    let mut worst = 0.0f64;
    for (seed, h, c, heads) in [(3u64, 4usize, 8usize, 2usize), (4, 7, 6, 3), (5, 8, 16, 4)] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(seed);
        let block = SwinBlock::new(&mut store, &mut rng, "blk", c, heads, h, 0, 4);
        randomize(&mut store, seed + 10);
        let x = randn(&mut rng, h * h * c);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(Tensor::new(vec![h * h, c], x.clone())?);
        let y = window_attention(&mut g, &block, FeatureMap { tokens: xv, batch: 1, h, w: h, c }, 0)?;
        let (d, names) = Dense::capture(&store);
        let want = block_oracle(&d, &names, &x, h, h, c, heads, h, 0);
        worst = worst.max(max_abs_diff(g.value(y.tokens).data(), &want));
    }
    pass &= worst < 1e-5;
    notes.push(format!("dense attention max diff {worst:.1e}"));

    let data = small_data(5)?;
    let seg_cfg = ModelConfig::toy(Tasks::SEG).with_arch(Arch::SwinUnet);
    let mut tcfg = TrainConfig::defaults_for(&seg_cfg);
    one_epoch(&mut tcfg);
    let seg = train_mtl(&seg_cfg, &tcfg, &data)?;
    let seg_ckpt = decode_checkpoint::<f32>(&seg.checkpoint_bytes())?;
    let mut jcfg = TrainConfig::defaults_for(&seg_cfg.clone().with_arch(Arch::Joint));
    one_epoch(&mut jcfg);
    let joint = train_joint(&seg_ckpt, &jcfg, &data)?;
    let source = frozen_params(&seg.store, ENCODER_PREFIX);
    let after = frozen_params(&joint.store, FROZEN_PREFIX);
    let reloaded = decode_checkpoint::<f32>(&joint.checkpoint_bytes())?;
    let reloaded: BTreeMap<String, Vec<u32>> = reloaded
        .tensors
        .iter()
        .filter(|(n, _, _)| n.starts_with(FROZEN_PREFIX))
        .map(|(n, t, _)| (n[FROZEN_PREFIX.len()..].to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    let trainable_moved = frozen_params(&joint.store, ENCODER_PREFIX) != frozen_params(&seg.store, ENCODER_PREFIX);
    let frozen_ok = !source.is_empty() && source == after && source == reloaded;
    pass &= frozen_ok && trainable_moved;
    notes.push(format!(
        "frozen encoder {} ({} tensors), trainable encoder {}",
        if frozen_ok { "bit-identical" } else { "CHANGED" },
        source.len(),
        if trainable_moved { "updated" } else { "did not move" }
    ));
    Ok(verdict(pass, notes.join(", ")))
}

fn masking_rule() -> Result<Verdict> {
    let mut rng = seeded(99);
    let w = TaskWeights::for_tasks(Tasks::CLS_SEG);
    let (mut worst, mut zero_rounds) = (0.0f64, 0);
    let mut zero_ok = true;
    for round in 0..100 {
        let batch = rng.random_range(1..=6);
        let (h, wd) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let pixels = h * wd;
        let logits: Vec<f64> = (0..batch * pixels * 2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let masks: Vec<f64> = (0..batch * pixels).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let present: Vec<bool> = (0..batch).map(|_| round % 10 != 0 && rng.random_bool(0.5)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![batch, h, wd, 2], logits.clone())?, true);
        let targets = SegTargets { masks: Tensor::new(vec![batch, pixels], masks.clone())?, present: present.clone() };
        let l = seg_loss(&mut g, x, &targets, &w);
        let got = g.value(l).item();
        let kept: Vec<usize> = (0..batch).filter(|&b| present[b]).collect();
        let want = if kept.is_empty() {
            0.0
        } else {
            kept.iter()
                .map(|&b| seg_oracle(&logits[b * pixels * 2..(b + 1) * pixels * 2], &masks[b * pixels..(b + 1) * pixels], pixels))
                .sum::<f64>()
                / kept.len() as f64
        };
        worst = worst.max((got - want).abs());
        if kept.is_empty() {
            zero_rounds += 1;
            let grads = g.backward(l)?;
            zero_ok &= got == 0.0 && grads.get(x).is_none_or(|t| t.data().iter().all(|&v| v == 0.0));
        }
    }
    let pass = worst < 1e-9 && zero_ok && zero_rounds >= 10;
    Ok(verdict(pass, format!("max diff {worst:.1e} over 100 batches, {zero_rounds} unmasked batches exactly zero: {zero_ok}")))
}

fn overfit_sanity() -> Result<Verdict> {
    let t = Instant::now();
    let data = small_data(21)?;
    let train = data.split(Split::Train);
    let pos = train.iter().filter(|s| s.mask.is_some() && s.label == 1).take(4);
    let neg = train.iter().filter(|s| s.mask.is_some() && s.label == 0).take(4);
    let picked: Vec<&Sample> = pos.chain(neg).copied().collect();
    let cfg = ModelConfig::toy(Tasks::CLS_SEG);
    let mut store = ParamStore::<f32>::new();
    let model = MtlSwinUnet::new(&cfg, &mut store, &mut seeded(3))?;
    let items: Vec<_> = picked.iter().map(|s| (s.image.clone(), s.mask.clone(), s.label)).collect();
    let batch = make_batch(&items)?;
    let mut opt = Sgd::new(0.9, 0.0);
    let (mut cls_loss, mut iters) = (f64::INFINITY, 0);
    let mut iou_seg = 0.0;
    for it in 1..=200 {
        store.zero_grad();
        let grads = {
            let mut g = Graph::with_params(&store);
            let (_, total) = batch_loss(&mut g, &model, &batch.images, &batch.labels, &batch.seg, &cfg.weights)?;
            g.backward(total)?
        };
        store.accumulate(&grads);
        opt.step(&mut store, OVERFIT_LR)?;
        if it % 20 == 0 {
            let mut g = Graph::with_params(&store);
            let (parts, _) = batch_loss(&mut g, &model, &batch.images, &batch.labels, &batch.seg, &cfg.weights)?;
            cls_loss = f64::from(g.value(parts.cls.expect("classifier")).item());
            iou_seg = evaluate(&model, &store, &picked, 8)?.iou_seg.unwrap_or(0.0);
            iters = it;
            if cls_loss < 0.05 && iou_seg > 0.9 {
                break;
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = cls_loss < 0.05 && iou_seg > 0.9 && elapsed < Duration::from_secs(600);
    Ok(verdict(
        pass,
        format!("after {iters} iterations: cls loss {cls_loss:.4}, IoU {iou_seg:.3}, {:.1}s", elapsed.as_secs_f64()),
    ))
}

struct TrendRun {
    tasks: Tasks,
    seed: u64,
    shift_auc: f64,
    secs: f64,
    outcome: TrainOutcome,
}

fn trend_tcfg(cfg: &ModelConfig, seed: u64) -> TrainConfig {
    TrainConfig { epochs: TREND_EPOCHS, batch: 32, lr_base: 0.01, seed, ..TrainConfig::defaults_for(cfg) }
}

fn trend_run(data: &Dataset, tasks: Tasks, seed: u64) -> Result<TrendRun> {
    let cfg = ModelConfig::desk(tasks);
    let t = Instant::now();
    let outcome = train_mtl(&cfg, &trend_tcfg(&cfg, seed), data)?;
    let secs = t.elapsed().as_secs_f64();
    let shift = evaluate(&outcome.model, &outcome.store, &data.split(Split::TestShift), 64)?;
    Ok(TrendRun { tasks, seed, shift_auc: shift.auc.unwrap_or(0.5), secs, outcome })
}

fn task_label(t: Tasks) -> &'static str {
    match (t.seg, t.rec) {
        (false, false) => "cls",
        (true, false) => "cls+seg",
        (false, true) => "cls+rec",
        (true, true) => "cls+seg+rec",
    }
}

const TREND_TASKS: [Tasks; 4] = [Tasks::CLS, Tasks::CLS_SEG, Tasks::CLS_REC, Tasks::ALL];

fn trend_table(runs: &[TrendRun]) -> Verdict {
    let mean = |t: Tasks| {
        let v: Vec<f64> = runs.iter().filter(|r| r.tasks == t).map(|r| r.shift_auc).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    println!("shifted-test AUC, {TREND_EPOCHS} epochs per model");
    print!("{:<12}", "tasks");
    for s in 0..TREND_SEEDS {
        print!(" {:>7}", format!("seed{s}"));
    }
    println!(" {:>7} {:>9}", "mean", "max_secs");
    for t in TREND_TASKS {
        print!("{:<12}", task_label(t));
        for r in runs.iter().filter(|r| r.tasks == t) {
            print!(" {:>7.4}", r.shift_auc);
        }
        let slowest = runs.iter().filter(|r| r.tasks == t).map(|r| r.secs).fold(0.0, f64::max);
        println!(" {:>7.4} {:>9.0}", mean(t), slowest);
    }
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let (seg, cls, all, rec) = (mean(Tasks::CLS_SEG), mean(Tasks::CLS), mean(Tasks::ALL), mean(Tasks::CLS_REC));
    let pass = seg >= cls && all >= rec && slowest < 3600.0;
    verdict(
        pass,
        format!("cls+seg {seg:.4} vs cls {cls:.4}, cls+seg+rec {all:.4} vs cls+rec {rec:.4}, slowest model {slowest:.0}s"),
    )
}

fn metric_oracle() -> Result<Verdict> {
    let mut rng = seeded(77);
    let mut mismatches = 0;
    for pattern in 0u32..256 {
        let labels: Vec<u8> = (0..8).map(|i| ((pattern >> i) & 1) as u8).collect();
        let scores: Vec<f64> = (0..8).map(|_| f64::from(rng.random_range(0..=20u8)) / 20.0).collect();
        let r = classification_metrics(&scores, &labels)?;
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (s, l) in scores.iter().zip(&labels) {
            match (*s > 0.5, *l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let ok = (r.tp, r.fp, r.tn, r.fn_) == (tp, fp, tn, fn_)
            && r.acc == frac(tp + tn, 8)
            && r.prec == frac(tp, tp + fp)
            && r.rec == frac(tp, tp + fn_)
            && r.f1 == frac(2 * tp, 2 * tp + fp + fn_)
            && r.auc == pairwise_auc(&scores, &labels);
        mismatches += usize::from(!ok);
    }
    let hand = auc(&[0.8, 0.3, 0.5, 0.1], &[1, 1, 0, 0]);
    let iou_ok = iou(&[true, true, false], &[true, false, true]) == 1.0 / 3.0;
    let pass = mismatches == 0 && hand == Some(0.75) && iou_ok;
    Ok(verdict(pass, format!("{mismatches} of 256 patterns differ, hand AUC {hand:?}, IoU case ok: {iou_ok}")))
}

fn grad_cam_sanity(model_run: &TrendRun, data: &Dataset) -> Result<Verdict> {
    let zero = cam_from_activations(&[0.5; 4 * 4 * 3], &[0.0; 4 * 4 * 3], 4, 4, 3, 16);
    let positives: Vec<&Sample> = data.split(Split::TestIn).into_iter().filter(|s| s.label == 1).take(50).collect();
    let mut hits = [0usize; 3];
    for (stage, h) in hits.iter_mut().enumerate() {
        for s in &positives {
            let map = grad_cam(&model_run.outcome.model, &model_run.outcome.store, &s.image, 1, stage)?;
            let (y, x) = map.argmax();
            *h += usize::from(s.lesion.as_ref().is_some_and(|b| b.contains(y, x)));
        }
    }
    let n = positives.len();
    let rate = hits[CAM_STAGE] as f64 / n as f64;
    let pass = zero.is_zero() && n == 50 && rate >= 0.8;
    let per_stage: Vec<String> = hits.iter().enumerate().map(|(i, h)| format!("stage {i} {h}/{n}")).collect();
    Ok(verdict(
        pass,
        format!(
            "zero-gradient map all zero: {}, {} seed {} model, stage {CAM_STAGE} hit rate {rate:.2} ({})",
            zero.is_zero(),
            task_label(model_run.tasks),
            model_run.seed,
            per_stage.join(", ")
        ),
    ))
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Result<Verdict> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut trees = Vec::new();
    let mut runs = Vec::new();
    for k in 0..2 {
        let data = small_data(1)?;
        let dir = tmp.path().join(format!("data{k}"));
        save_dataset(&data, &dir)?;
        trees.push(read_tree(&dir));
        let cfg = ModelConfig::toy(Tasks::ALL);
        let mut tcfg = TrainConfig { seed: 4, ..TrainConfig::defaults_for(&cfg) };
        one_epoch(&mut tcfg);
        tcfg.epochs = 2;
        let out = train_mtl(&cfg, &tcfg, &data)?;
        let run_dir = tmp.path().join(format!("run{k}"));
        out.save(&run_dir)?;
        runs.push((format_log(&out.report.log), out.checkpoint_bytes(), read_tree(&run_dir)));
    }
    let data_same = trees[0] == trees[1];
    let log_same = runs[0].0 == runs[1].0;
    let ckpt_same = runs[0].1 == runs[1].1;
    let files_same = runs[0].2 == runs[1].2;
    let pass = data_same && log_same && ckpt_same && files_same;
    Ok(verdict(
        pass,
        format!("dataset files {data_same}, logs {log_same}, checkpoints {ckpt_same}, saved run files {files_same} ({} dataset files)", trees[0].len()),
    ))
}

fn error(e: impl std::fmt::Display) -> Verdict {
    verdict(false, format!("error: {e}"))
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut failures = 0;
    let mut record = |n: usize, name: &str, v: Verdict| {
        failures += usize::from(!v.pass);
        println!("criterion {n} ({name}): {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };

    if run(1) {
        record(1, "gradient fidelity", gradient_fidelity().unwrap_or_else(error));
    }
    if run(2) {
        record(2, "formula exactness", formula_exactness().unwrap_or_else(error));
    }
    if run(3) {
        record(3, "structural invariants", structural_invariants().unwrap_or_else(error));
    }
    if run(4) {
        record(4, "masking rule", masking_rule().unwrap_or_else(error));
    }
    if run(5) {
        record(5, "overfit sanity", overfit_sanity().unwrap_or_else(error));
    }
    // the Grad-CAM check reuses the cls+seg seed-0 model of the trend table
    let trend = (run(6) || run(8)).then(|| -> Result<(Dataset, Vec<TrendRun>)> {
        let data = generate_dataset(&GenConfig::default())?;
        let (seeds, tasks): (u64, &[Tasks]) = if run(6) { (TREND_SEEDS, &TREND_TASKS) } else { (1, &[Tasks::CLS_SEG]) };
        let mut runs = Vec::new();
        for seed in 0..seeds {
            for &t in tasks {
                let r = trend_run(&data, t, seed)?;
                println!("  trained {} seed {seed}: shifted AUC {:.4} in {:.0}s", task_label(t), r.shift_auc, r.secs);
                runs.push(r);
            }
        }
        Ok((data, runs))
    });
    if run(6) {
        let v = match &trend {
            Some(Ok((_, runs))) => trend_table(runs),
            Some(Err(e)) => error(e),
            None => unreachable!(),
        };
        record(6, "covariate-shift trend", v);
    }
    if run(7) {
        record(7, "metric oracle", metric_oracle().unwrap_or_else(error));
    }
    if run(8) {
        let v = match &trend {
            Some(Ok((data, runs))) => {
                let model = runs.iter().find(|r| r.tasks == Tasks::CLS_SEG && r.seed == 0).expect("cls+seg seed 0 run");
                grad_cam_sanity(model, data).unwrap_or_else(error)
            }
            Some(Err(e)) => error(e),
            None => unreachable!(),
        };
        record(8, "grad-cam sanity", v);
    }
    if run(9) {
        record(9, "reproducibility", reproducibility().unwrap_or_else(error));
    }
    if failures == 0 {
        println!("all selected criteria passed");
        return ExitCode::SUCCESS;
    }
    println!("{failures} criteria failed");
    if std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v != "0") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
