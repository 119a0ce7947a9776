use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mtlswin::arch::{AnyModel, Arch, ModelConfig, TaskModel, Variant};
use mtlswin::config::KvConfig;
use mtlswin::data::{generate_dataset, load_dataset, save_dataset, GenConfig, Split};
use mtlswin::eval::{evaluate, format_table, grad_cam, heatmap_pgm, save_overlay_png, MetricsReport};
use mtlswin::losses::{TaskWeights, Tasks};
use mtlswin::numerics::{read_checkpoint, Checkpoint};
use mtlswin::train::{train_joint, train_mtl, TrainConfig};
use mtlswin::verify;

#[derive(Parser, Debug)]
#[command(name = "mtlswin", version, about = "Multi-task shifted-window U-Net on synthetic covariate-shift data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset
    GenData(Common),
    /// Train a model (mtl, swin-unet or joint)
    Train(Common),
    /// Evaluate a checkpoint on dataset splits
    Eval(Common),
    /// Write Grad-CAM heatmaps for a checkpoint
    Gradcam(Common),
    /// Run the finite-difference gradient suite
    Gradcheck(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Override a config key (repeatable)
    #[arg(long = "set", value_name = "K=V")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<(KvConfig, u64)> {
        let mut kv = match &self.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        for pair in &self.set {
            kv.set_pair(pair)?;
        }
        let seed = match self.seed {
            Some(s) => s,
            None => kv.get_or("seed", 0u64)?,
        };
        kv.set("seed", seed);
        // marks the key as consumed for commands that take the seed separately
        let _ = kv.raw("seed");
        Ok((kv, seed))
    }
}

fn threads() -> Result<usize> {
    match std::env::var("MTLSWIN_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("MTLSWIN_THREADS=`{v}` is not a count"))?;
            if n == 0 {
                bail!(mtlswin::Error::Config("MTLSWIN_THREADS must be at least 1".into()));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn write_run_meta(out: &Path, command: &str, seed: u64, resolved: &BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut s = format!("command = {command}\nseed = {seed}\nthreads = {}\n", threads()?);
    for (k, v) in resolved {
        if k != "seed" {
            s.push_str(&format!("{k} = {v}\n"));
        }
    }
    let p = out.join("run.meta");
    fs::write(&p, s).with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

fn kv_map(kv: &KvConfig) -> BTreeMap<String, String> {
    kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn required_path(kv: &KvConfig, key: &str) -> Result<PathBuf> {
    kv.raw(key).map(PathBuf::from).ok_or_else(|| mtlswin::Error::Config(format!("missing required key `{key}`")).into())
}

fn gen_data(c: &Common) -> Result<()> {
    let (kv, seed) = c.resolve()?;
    let cfg = GenConfig::from_kv(&kv)?;
    kv.finish()?;
    let ds = generate_dataset(&cfg)?;
    save_dataset(&ds, &c.out)?;
    write_run_meta(&c.out, "gen-data", seed, &kv_map(&cfg.to_kv()))?;
    for s in Split::ALL {
        println!("{:<10} {}", s.to_string(), ds.count(s));
    }
    Ok(())
}

/// Model configuration from `model` (preset) plus explicit overrides.
fn model_config(kv: &KvConfig, image_size: Option<usize>) -> Result<ModelConfig> {
    let arch = Arch::parse(kv.raw("arch").unwrap_or("mtl"))?;
    let tasks = match kv.raw("tasks") {
        Some(t) => Tasks::parse(t)?,
        None => match arch {
            Arch::SwinUnet => Tasks::SEG,
            Arch::Joint => Tasks::CLS,
            Arch::Mtl => Tasks::ALL,
        },
    };
    let mut cfg = match kv.raw("model").unwrap_or("desk") {
        "desk" => ModelConfig::desk(tasks),
        "toy" => ModelConfig::toy(tasks),
        preset => ModelConfig::preset(Variant::parse(preset)?, tasks),
    };
    cfg.arch = arch;
    if let Some(s) = kv.get("image_size")?.or(image_size) {
        cfg.image_size = s;
    }
    if let Some(v) = kv.get("channels")? {
        cfg.channels = v;
        cfg.variant = Variant::Custom;
    }
    if let Some(d) = kv.get_list("depths")? {
        cfg.depths = d;
        cfg.variant = Variant::Custom;
    }
    cfg.window = kv.get_or("window", cfg.window)?;
    cfg.head_dim = kv.get_or("head_dim", cfg.head_dim)?;
    cfg.mlp_ratio = kv.get_or("mlp_ratio", cfg.mlp_ratio)?;
    cfg.weights = match kv.get_list::<f64>("weights")? {
        Some(w) => TaskWeights::from_list(tasks, &w)?,
        None => TaskWeights::for_tasks(tasks),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train(c: &Common) -> Result<()> {
    let (kv, seed) = c.resolve()?;
    let data_dir = required_path(&kv, "data")?;
    let arch = Arch::parse(kv.raw("arch").unwrap_or("mtl"))?;
    let seg_ckpt: Option<Checkpoint<f32>> =
        if arch == Arch::Joint { Some(read_checkpoint(&required_path(&kv, "seg_checkpoint")?)?) } else { None };
    // everything is validated before the dataset is read
    let cfg = match &seg_ckpt {
        Some(ck) => ModelConfig::from_meta(&ck.meta)?.with_arch(Arch::Joint),
        None => model_config(&kv, kv.get("image_size")?)?,
    };
    let tcfg = TrainConfig::from_kv(&kv, TrainConfig::defaults_for(&cfg), seed)?;
    if seg_ckpt.is_some() {
        // the joint model inherits its shape from the checkpoint
        for k in ["model", "tasks", "depths", "channels", "window", "head_dim", "mlp_ratio", "weights", "image_size"] {
            let _ = kv.raw(k);
        }
    }
    kv.finish()?;

    let data = load_dataset(&data_dir)?;
    let cfg = match data.image_size() {
        Some(s) if seg_ckpt.is_none() && !kv.contains("image_size") => ModelConfig { image_size: s, ..cfg },
        _ => cfg,
    };
    cfg.validate()?;
    let outcome = match &seg_ckpt {
        Some(ck) => train_joint(ck, &tcfg, &data)?,
        None => train_mtl(&cfg, &tcfg, &data)?,
    };
    outcome.save(&c.out)?;
    let mut resolved = outcome.meta.clone();
    resolved.insert("data".into(), data_dir.display().to_string());
    write_run_meta(&c.out, "train", seed, &resolved)?;
    println!(
        "trained {} ({}) for {} iterations; best epoch {} (score {:.4})",
        cfg.arch, cfg.tasks, outcome.report.iterations, outcome.report.best_epoch, outcome.report.best_score
    );
    Ok(())
}

fn load_model(kv: &KvConfig) -> Result<(AnyModel, mtlswin::numerics::ParamStore<f32>)> {
    let ck: Checkpoint<f32> = read_checkpoint(&required_path(kv, "checkpoint")?)?;
    Ok(AnyModel::from_checkpoint(&ck)?)
}

fn eval(c: &Common) -> Result<()> {
    let (kv, seed) = c.resolve()?;
    let data_dir = required_path(&kv, "data")?;
    let splits: Vec<Split> = kv
        .get_list::<String>("splits")?
        .unwrap_or_else(|| vec!["val".into(), "test_in".into(), "test_shift".into()])
        .iter()
        .map(|s| Split::parse(s))
        .collect::<mtlswin::Result<_>>()?;
    let batch = kv.get_or("eval_batch", 64usize)?;
    let (model, store) = load_model(&kv)?;
    kv.finish()?;
    let data = load_dataset(&data_dir)?;
    if data.image_size() != Some(model.config().image_size) {
        bail!(mtlswin::Error::Config("dataset image size does not match the checkpoint".into()));
    }
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    for s in splits {
        let samples = data.split(s);
        if samples.is_empty() {
            continue;
        }
        rows.push((s.to_string(), evaluate(&model, &store, &samples, batch)?));
    }
    fs::create_dir_all(&c.out)?;
    let mut csv = format!("{}\n", MetricsReport::CSV_HEADER);
    for (name, r) in &rows {
        csv.push_str(&r.csv_row(name));
        csv.push('\n');
    }
    fs::write(c.out.join("metrics.csv"), csv)?;
    let table = format_table(&rows);
    fs::write(c.out.join("metrics.txt"), &table)?;
    write_run_meta(&c.out, "eval", seed, &kv_map(&kv))?;
    print!("{table}");
    Ok(())
}

fn gradcam(c: &Common) -> Result<()> {
    let (kv, seed) = c.resolve()?;
    let data_dir = required_path(&kv, "data")?;
    let split = Split::parse(kv.raw("split").unwrap_or("test_in"))?;
    let count = kv.get_or("count", 50usize)?;
    let class = kv.get_or("class", 1usize)?;
    let (model, store) = load_model(&kv)?;
    let stage = kv.get_or("stage", model.config().stages() - 1)?;
    kv.finish()?;
    let data = load_dataset(&data_dir)?;
    let picked: Vec<_> = data.split(split).into_iter().filter(|s| s.label == 1).take(count).collect();
    for d in ["heatmaps", "overlays"] {
        fs::create_dir_all(c.out.join(d))?;
    }
    let mut csv = String::from("file,argmax_y,argmax_x,inside_lesion_box\n");
    let (mut hits, mut scored) = (0, 0);
    for s in &picked {
        let map = grad_cam(&model, &store, &s.image, class, stage)?;
        fs::write(c.out.join(format!("heatmaps/{}.pgm", s.id)), heatmap_pgm(&map))?;
        save_overlay_png(&s.image, &map, &c.out.join(format!("overlays/{}.png", s.id)), 0.45)?;
        let (y, x) = map.argmax();
        let inside = s.lesion.map(|b| b.contains(y, x));
        if let Some(h) = inside {
            scored += 1;
            hits += usize::from(h);
        }
        let flag = inside.map(|h| u8::from(h).to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{y},{x},{flag}\n", s.id));
    }
    fs::write(c.out.join("gradcam.csv"), csv)?;
    write_run_meta(&c.out, "gradcam", seed, &kv_map(&kv))?;
    println!("{} heatmaps; argmax inside lesion box for {hits}/{scored}", picked.len());
    Ok(())
}

fn gradcheck(c: &Common) -> Result<()> {
    let (kv, seed) = c.resolve()?;
    let per_param = kv.get::<usize>("per_param")?.or(Some(4));
    kv.finish()?;
    let results = verify::full_suite(per_param)?;
    fs::create_dir_all(&c.out)?;
    let mut csv = String::from("check,case,max_rel_error,passed\n");
    let mut failed = 0;
    for r in &results {
        println!("{r}");
        csv.push_str(&format!("{},{},{:e},{}\n", r.name, r.case, r.max_rel_error, r.passed()));
        failed += usize::from(!r.passed());
    }
    fs::write(c.out.join("gradcheck.csv"), csv)?;
    write_run_meta(&c.out, "gradcheck", seed, &kv_map(&kv))?;
    if failed > 0 {
        bail!(mtlswin::Error::NonFinite(format!("{failed} of {} gradient checks above {:e}", results.len(), verify::TOLERANCE)));
    }
    println!("all {} checks below {:e}", results.len(), verify::TOLERANCE);
    Ok(())
}

/// Exit status per error category.
fn exit_code(e: &anyhow::Error) -> u8 {
    use mtlswin::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Config(_) | E::Schedule { .. }) => 2,
        Some(E::Io { .. }) => 3,
        Some(E::Dataset(_) | E::Checkpoint(_) | E::Image(_)) => 4,
        Some(E::Shape(_) | E::NonScalarRoot(_)) => 5,
        Some(E::NonFinite(_) | E::Diverged { .. } | E::NonDeterministic(..)) => 6,
        None if e.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::Gradcam(c) => gradcam(c),
        Command::Gradcheck(c) => gradcheck(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
