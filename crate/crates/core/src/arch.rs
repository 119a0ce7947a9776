//! MTL-Swin-Unet (shared encoder, segmentation/reconstruction decoders,
//! classification head) and the joint frozen + trainable encoder classifier.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{TaskWeights, Tasks};
use crate::numerics::{Checkpoint, Graph, ParamStore, Real, Tensor, Var};
use crate::swin::{FeatureMap, FinalExpand, LayerNorm, Linear, PatchEmbed, PatchExpand, PatchMerge, Stage, StageConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Depths (2,2,2,2), 96 channels.
    Default,
    /// Depths (2,2,6,2), 96 channels.
    Tiny,
    /// Depths (2,2,18,2), 128 channels.
    Base,
    /// Anything else (desk-scale and toy models).
    Custom,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Variant::Default),
            "tiny" => Ok(Variant::Tiny),
            "base" => Ok(Variant::Base),
            "custom" => Ok(Variant::Custom),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Default => "default",
            Variant::Tiny => "tiny",
            Variant::Base => "base",
            Variant::Custom => "custom",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Shared encoder with a classification head and optional seg/rec decoders.
    Mtl,
    /// Segmentation-only encoder-decoder used as the first joint-learning phase.
    SwinUnet,
    /// Frozen segmentation encoder concatenated with a trainable encoder.
    Joint,
}

impl Arch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mtl" => Ok(Arch::Mtl),
            "swin-unet" => Ok(Arch::SwinUnet),
            "joint" => Ok(Arch::Joint),
            other => Err(Error::Config(format!("unknown arch `{other}` (mtl, swin-unet, joint)"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mtl => "mtl",
            Arch::SwinUnet => "swin-unet",
            Arch::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub variant: Variant,
    pub image_size: usize,
    pub in_chans: usize,
    pub patch: usize,
    pub channels: usize,
    pub depths: Vec<usize>,
    pub window: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub tasks: Tasks,
    pub weights: TaskWeights,
    pub num_classes: usize,
    pub seg_classes: usize,
}

impl ModelConfig {
    /// Full-size preset at 224x224 with window 7.
    pub fn preset(variant: Variant, tasks: Tasks) -> Self {
        let (depths, channels) = match variant {
            Variant::Tiny => (vec![2, 2, 6, 2], 96),
            Variant::Base => (vec![2, 2, 18, 2], 128),
            Variant::Default | Variant::Custom => (vec![2, 2, 2, 2], 96),
        };
        ModelConfig {
            arch: Arch::Mtl,
            variant,
            image_size: 224,
            in_chans: 1,
            patch: 4,
            channels,
            depths,
            window: 7,
            head_dim: 32,
            mlp_ratio: 4,
            tasks,
            weights: TaskWeights::for_tasks(tasks),
            num_classes: 2,
            seg_classes: 2,
        }
    }

    /// Two stages of one block, 16 channels, 32x32 input.
    pub fn toy(tasks: Tasks) -> Self {
        ModelConfig {
            variant: Variant::Custom,
            image_size: 32,
            channels: 16,
            depths: vec![1, 1],
            window: 4,
            head_dim: 8,
            ..Self::preset(Variant::Default, tasks)
        }
    }

    /// CPU-feasible configuration for 64x64 synthetic data.
    pub fn desk(tasks: Tasks) -> Self {
        ModelConfig {
            variant: Variant::Custom,
            image_size: 64,
            channels: 16,
            depths: vec![1, 1, 1],
            window: 4,
            head_dim: 8,
            ..Self::preset(Variant::Default, tasks)
        }
    }

    pub fn with_arch(mut self, arch: Arch) -> Self {
        self.arch = arch;
        match arch {
            Arch::SwinUnet => self.tasks = Tasks::SEG,
            Arch::Joint => self.tasks = Tasks::CLS,
            Arch::Mtl => {}
        }
        self.weights = TaskWeights::for_tasks(self.tasks);
        self
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, i: usize) -> usize {
        self.channels << i
    }

    pub fn stage_grid(&self, i: usize) -> usize {
        (self.image_size / self.patch) >> i
    }

    pub fn final_dim(&self) -> usize {
        self.stage_dim(self.stages() - 1)
    }

    pub fn stage_config(&self, i: usize) -> Result<StageConfig> {
        StageConfig::for_grid(self.depths[i], self.stage_dim(i), self.head_dim, self.window, self.stage_grid(i))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() {
            return Err(Error::Config("at least one stage required".into()));
        }
        if self.patch == 0 || self.channels == 0 || self.head_dim == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("patch, channels, head_dim, window and mlp_ratio must be positive".into()));
        }
        let down = self.patch << (self.stages() - 1);
        if !self.image_size.is_multiple_of(down) {
            return Err(Error::Config(format!(
                "image size {} not divisible by {down} (patch {} x 2^{})",
                self.image_size,
                self.patch,
                self.stages() - 1
            )));
        }
        if !self.channels.is_multiple_of(2) {
            return Err(Error::Config("channel count must be even for patch expansion".into()));
        }
        for i in 0..self.stages() {
            self.stage_config(i)?;
        }
        match self.arch {
            Arch::Mtl if !self.tasks.cls => return Err(Error::Config("classification must be an active task".into())),
            Arch::SwinUnet if self.tasks != Tasks::SEG => {
                return Err(Error::Config("swin-unet pretraining uses tasks = seg".into()))
            }
            Arch::Joint if self.tasks != Tasks::CLS => return Err(Error::Config("joint model uses tasks = cls".into())),
            _ => {}
        }
        self.weights.validate(self.tasks)?;
        if self.num_classes != 2 || self.seg_classes != 2 {
            return Err(Error::Config("binary classification and segmentation only".into()));
        }
        Ok(())
    }

    /// Key=value description stored in checkpoint metadata.
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let depths: Vec<String> = self.depths.iter().map(|d| d.to_string()).collect();
        let weights: Vec<String> = self.weights.list().iter().map(|w| w.to_string()).collect();
        [
            ("arch", self.arch.to_string()),
            ("variant", self.variant.to_string()),
            ("image_size", self.image_size.to_string()),
            ("in_chans", self.in_chans.to_string()),
            ("patch", self.patch.to_string()),
            ("channels", self.channels.to_string()),
            ("depths", depths.join(",")),
            ("window", self.window.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("tasks", self.tasks.to_string()),
            ("weights", weights.join(",")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
        };
        let depths = get("depths")?
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::Checkpoint("bad depths".into())))
            .collect::<Result<Vec<usize>>>()?;
        let tasks = Tasks::parse(get("tasks")?)?;
        let wl = get("weights")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|w| w.parse().map_err(|_| Error::Checkpoint("bad weights".into())))
            .collect::<Result<Vec<f64>>>()?;
        let cfg = ModelConfig {
            arch: Arch::parse(get("arch")?)?,
            variant: Variant::parse(get("variant")?)?,
            image_size: num("image_size")?,
            in_chans: num("in_chans")?,
            patch: num("patch")?,
            channels: num("channels")?,
            depths,
            window: num("window")?,
            head_dim: num("head_dim")?,
            mlp_ratio: num("mlp_ratio")?,
            tasks,
            weights: TaskWeights::from_list(tasks, &wl)?,
            num_classes: 2,
            seg_classes: 2,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-stage encoder outputs: `stages[i]` is the block output of stage `i`
/// before merging; `bottleneck` is the normalized final-stage output.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub stages: Vec<FeatureMap>,
    pub bottleneck: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct SwinEncoder {
    pub prefix: String,
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub merges: Vec<PatchMerge>,
    pub norm: LayerNorm,
    pub depths: Vec<usize>,
}

impl SwinEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let embed = PatchEmbed::new(store, rng, &format!("{prefix}.embed"), cfg.patch, cfg.in_chans, cfg.channels);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for i in 0..cfg.stages() {
            let sc = cfg.stage_config(i)?;
            let name = format!("{prefix}.stage{i}");
            stages.push(Stage::new(store, rng, &name, cfg.stage_dim(i), cfg.stage_grid(i), sc, cfg.mlp_ratio));
            if i + 1 < cfg.stages() {
                merges.push(PatchMerge::new(store, rng, &format!("{prefix}.merge{i}"), cfg.stage_dim(i)));
            }
        }
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), cfg.final_dim());
        Ok(SwinEncoder { prefix: prefix.to_string(), embed, stages, merges, norm, depths: cfg.depths.clone() })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, images: Var) -> Result<EncoderOutput> {
        let mut fm = self.embed.forward(g, images)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            fm = stage.forward(g, fm)?;
            outs.push(fm);
            if let Some(m) = self.merges.get(i) {
                fm = m.forward(g, fm)?;
            }
        }
        let tokens = self.norm.forward(g, fm.tokens);
        Ok(EncoderOutput { stages: outs, bottleneck: FeatureMap { tokens, ..fm } })
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    expand: PatchExpand,
    fuse: Linear,
    stage: Stage,
    level: usize,
}

/// Encoder-symmetric decoder: at each level, expand, concatenate the
/// matching encoder stage, project `2C -> C`, then run Swin blocks.
#[derive(Clone, Debug)]
pub struct SwinDecoder {
    levels: Vec<DecoderStage>,
    pub norm: LayerNorm,
    pub head: FinalExpand,
}

impl SwinDecoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: &ModelConfig,
        out_chans: usize,
    ) -> Result<Self> {
        let mut levels = Vec::new();
        for level in (0..cfg.stages() - 1).rev() {
            let dim = cfg.stage_dim(level);
            let name = format!("{prefix}.level{level}");
            levels.push(DecoderStage {
                expand: PatchExpand::new(store, rng, &format!("{name}.up"), cfg.stage_dim(level + 1)),
                fuse: Linear::new(store, rng, &format!("{name}.fuse"), 2 * dim, dim, true),
                stage: Stage::new(store, rng, &name, dim, cfg.stage_grid(level), cfg.stage_config(level)?, cfg.mlp_ratio),
                level,
            });
        }
        Ok(SwinDecoder {
            levels,
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), cfg.channels),
            head: FinalExpand::new(store, rng, &format!("{prefix}.final"), cfg.channels, cfg.patch, out_chans),
        })
    }

    /// Per-pixel output `(batch, H, W, out_chans)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, enc: &EncoderOutput) -> Result<Var> {
        let mut fm = enc.bottleneck;
        for lvl in &self.levels {
            let up = lvl.expand.forward(g, fm)?;
            let skip = enc.stages[lvl.level];
            if (skip.h, skip.w, skip.c) != (up.h, up.w, up.c) {
                return Err(Error::Shape(format!(
                    "skip {}x{}x{} does not match upsampled {}x{}x{}",
                    skip.h, skip.w, skip.c, up.h, up.w, up.c
                )));
            }
            let cat = g.concat_cols(up.tokens, skip.tokens);
            let fused = lvl.fuse.forward(g, cat);
            fm = lvl.stage.forward(g, FeatureMap { tokens: fused, ..up })?;
        }
        let x = self.norm.forward(g, fm.tokens);
        self.head.forward(g, FeatureMap { tokens: x, ..fm })
    }
}

/// Global average pooling over tokens followed by one linear layer.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    pub fc: Linear,
}

impl ClassificationHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        classes: usize,
    ) -> Self {
        ClassificationHead { fc: Linear::new(store, rng, &format!("{name}.fc"), in_dim, classes, true) }
    }

    pub fn pool<T: Real>(&self, g: &mut Graph<T>, fm: FeatureMap) -> Var {
        let x = g.reshape(fm.tokens, &[fm.batch, fm.h * fm.w, fm.c]);
        g.mean_axis(x, 1)
    }

    /// Logits `(batch, classes)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, fm: FeatureMap) -> Result<Var> {
        if fm.c != self.fc.in_dim {
            return Err(Error::Shape(format!("head expects {} channels, got {}", self.fc.in_dim, fm.c)));
        }
        let pooled = self.pool(g, fm);
        Ok(self.fc.forward(g, pooled))
    }
}

/// Outputs present exactly for the configured tasks.
#[derive(Clone, Debug)]
pub struct MtlOutputs {
    pub cls_logits: Option<Var>,
    pub seg_logits: Option<Var>,
    pub rec_image: Option<Var>,
    pub encoder: EncoderOutput,
}

pub const ENCODER_PREFIX: &str = "encoder.";
pub const FROZEN_PREFIX: &str = "frozen_encoder.";

#[derive(Clone, Debug)]
pub struct MtlSwinUnet {
    pub cfg: ModelConfig,
    pub encoder: SwinEncoder,
    pub seg_decoder: Option<SwinDecoder>,
    pub rec_decoder: Option<SwinDecoder>,
    pub cls_head: Option<ClassificationHead>,
}

impl MtlSwinUnet {
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if cfg.arch == Arch::Joint {
            return Err(Error::Config("use JointSwin for the joint architecture".into()));
        }
        let encoder = SwinEncoder::new(store, rng, "encoder", cfg)?;
        let seg_decoder =
            if cfg.tasks.seg { Some(SwinDecoder::new(store, rng, "seg_decoder", cfg, cfg.seg_classes)?) } else { None };
        let rec_decoder =
            if cfg.tasks.rec { Some(SwinDecoder::new(store, rng, "rec_decoder", cfg, cfg.in_chans)?) } else { None };
        let cls_head = cfg.tasks.cls.then(|| ClassificationHead::new(store, rng, "cls_head", cfg.final_dim(), cfg.num_classes));
        Ok(MtlSwinUnet { cfg: cfg.clone(), encoder, seg_decoder, rec_decoder, cls_head })
    }

    /// `images` has shape `(batch, H, W, in_chans)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, images: Var) -> Result<MtlOutputs> {
        check_image_shape(g.shape(images), &self.cfg)?;
        let enc = self.encoder.forward(g, images)?;
        let cls_logits = match &self.cls_head {
            Some(h) => Some(h.forward(g, enc.bottleneck)?),
            None => None,
        };
        let seg_logits = match &self.seg_decoder {
            Some(d) => Some(d.forward(g, &enc)?),
            None => None,
        };
        let rec_image = match &self.rec_decoder {
            Some(d) => Some(d.forward(g, &enc)?),
            None => None,
        };
        Ok(MtlOutputs { cls_logits, seg_logits, rec_image, encoder: enc })
    }
}

fn check_image_shape(s: &[usize], cfg: &ModelConfig) -> Result<()> {
    if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != cfg.in_chans {
        return Err(Error::Shape(format!("expected images (batch, {0}, {0}, {1}), got {s:?}", cfg.image_size, cfg.in_chans)));
    }
    Ok(())
}

/// Output of [`JointSwin::forward`].
#[derive(Clone, Debug)]
pub struct JointOutputs {
    pub cls_logits: Var,
    pub frozen: EncoderOutput,
    pub trainable: EncoderOutput,
    /// Channel concatenation of both bottlenecks.
    pub joint_features: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct JointSwin {
    pub cfg: ModelConfig,
    pub frozen: SwinEncoder,
    pub trainable: SwinEncoder,
    pub head: ClassificationHead,
}

impl JointSwin {
    /// Builds both encoders, marks the frozen one non-trainable, and sizes the
    /// head for the concatenated width.
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let cfg = cfg.clone().with_arch(Arch::Joint);
        cfg.validate()?;
        let frozen = SwinEncoder::new(store, rng, "frozen_encoder", &cfg)?;
        let trainable = SwinEncoder::new(store, rng, "encoder", &cfg)?;
        store.set_trainable(FROZEN_PREFIX, false);
        let head = ClassificationHead::new(store, rng, "cls_head", 2 * cfg.final_dim(), cfg.num_classes);
        Ok(JointSwin { cfg, frozen, trainable, head })
    }

    /// Copies the encoder of a segmentation checkpoint into the frozen slot.
    pub fn load_frozen<T: Real>(&self, store: &mut ParamStore<T>, ckpt: &Checkpoint<T>) -> Result<()> {
        let seg_cfg = ModelConfig::from_meta(&ckpt.meta)?;
        if seg_cfg.depths != self.frozen.depths {
            return Err(Error::Config(format!(
                "stage-depth mismatch: checkpoint {:?} vs joint encoder {:?}",
                seg_cfg.depths, self.frozen.depths
            )));
        }
        if seg_cfg.channels != self.cfg.channels || seg_cfg.image_size != self.cfg.image_size {
            return Err(Error::Config("checkpoint channels/image size differ from joint model".into()));
        }
        ckpt.load_into(store, ENCODER_PREFIX, FROZEN_PREFIX)?;
        store.set_trainable(FROZEN_PREFIX, false);
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, images: Var) -> Result<JointOutputs> {
        check_image_shape(g.shape(images), &self.cfg)?;
        if self.frozen.depths != self.trainable.depths {
            return Err(Error::Config("stage-depth mismatch between encoders".into()));
        }
        let frozen = self.frozen.forward(g, images)?;
        let trainable = self.trainable.forward(g, images)?;
        let joint_features = concat_features(g, trainable.bottleneck, frozen.bottleneck)?;
        let cls_logits = self.head.forward(g, joint_features)?;
        Ok(JointOutputs { cls_logits, frozen, trainable, joint_features })
    }
}

/// Channel concatenation of two feature maps on the same grid.
pub fn concat_features<T: Real>(g: &mut Graph<T>, a: FeatureMap, b: FeatureMap) -> Result<FeatureMap> {
    if (a.batch, a.h, a.w) != (b.batch, b.h, b.w) {
        return Err(Error::Shape(format!("cannot concatenate {}x{} with {}x{} grids", a.h, a.w, b.h, b.w)));
    }
    let tokens = g.concat_cols(a.tokens, b.tokens);
    Ok(FeatureMap { tokens, c: a.c + b.c, ..a })
}

/// Task outputs of any model, absent where the task is not configured.
#[derive(Clone, Copy, Debug, Default)]
pub struct Heads {
    pub cls: Option<Var>,
    pub seg: Option<Var>,
    pub rec: Option<Var>,
}

/// Common surface of the trainable architectures.
pub trait TaskModel {
    fn config(&self) -> &ModelConfig;

    fn heads<T: Real>(&self, g: &mut Graph<T>, images: Var) -> Result<Heads>;

    /// Classification logits together with the output of encoder stage
    /// `stage` (the trainable encoder for the joint model).
    fn stage_features<T: Real>(&self, g: &mut Graph<T>, images: Var, stage: usize) -> Result<(Option<Var>, FeatureMap)>;
}

fn pick_stage(enc: &EncoderOutput, stage: usize) -> Result<FeatureMap> {
    enc.stages
        .get(stage)
        .copied()
        .ok_or_else(|| Error::Config(format!("stage {stage} out of range (encoder has {})", enc.stages.len())))
}

impl TaskModel for MtlSwinUnet {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn heads<T: Real>(&self, g: &mut Graph<T>, images: Var) -> Result<Heads> {
        let o = self.forward(g, images)?;
        Ok(Heads { cls: o.cls_logits, seg: o.seg_logits, rec: o.rec_image })
    }

    fn stage_features<T: Real>(&self, g: &mut Graph<T>, images: Var, stage: usize) -> Result<(Option<Var>, FeatureMap)> {
        let o = self.forward(g, images)?;
        Ok((o.cls_logits, pick_stage(&o.encoder, stage)?))
    }
}

impl TaskModel for JointSwin {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn heads<T: Real>(&self, g: &mut Graph<T>, images: Var) -> Result<Heads> {
        let o = self.forward(g, images)?;
        Ok(Heads { cls: Some(o.cls_logits), ..Heads::default() })
    }

    fn stage_features<T: Real>(&self, g: &mut Graph<T>, images: Var, stage: usize) -> Result<(Option<Var>, FeatureMap)> {
        let o = self.forward(g, images)?;
        Ok((Some(o.cls_logits), pick_stage(&o.trainable, stage)?))
    }
}

/// Either architecture, chosen by `cfg.arch`.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Mtl(MtlSwinUnet),
    Joint(JointSwin),
}

impl AnyModel {
    pub fn build<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        Ok(match cfg.arch {
            Arch::Joint => AnyModel::Joint(JointSwin::new(cfg, store, rng)?),
            Arch::Mtl | Arch::SwinUnet => AnyModel::Mtl(MtlSwinUnet::new(cfg, store, rng)?),
        })
    }

    /// Rebuilds the model described by a checkpoint's metadata and loads
    /// every parameter from it.
    pub fn from_checkpoint<T: Real>(ckpt: &Checkpoint<T>) -> Result<(Self, ParamStore<T>)> {
        let cfg = ModelConfig::from_meta(&ckpt.meta)?;
        let mut store = ParamStore::new();
        // values are overwritten below; the seed only fixes construction order
        let model = Self::build(&cfg, &mut store, &mut crate::numerics::rng::seeded(0))?;
        let n = ckpt.load_into(&mut store, "", "")?;
        if n != store.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {n} of {} parameters", store.len())));
        }
        if cfg.arch == Arch::Joint {
            store.set_trainable(FROZEN_PREFIX, false);
        }
        Ok((model, store))
    }
}

impl TaskModel for AnyModel {
    fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Mtl(m) => m.config(),
            AnyModel::Joint(m) => m.config(),
        }
    }

    fn heads<T: Real>(&self, g: &mut Graph<T>, images: Var) -> Result<Heads> {
        match self {
            AnyModel::Mtl(m) => m.heads(g, images),
            AnyModel::Joint(m) => m.heads(g, images),
        }
    }

    fn stage_features<T: Real>(&self, g: &mut Graph<T>, images: Var, stage: usize) -> Result<(Option<Var>, FeatureMap)> {
        match self {
            AnyModel::Mtl(m) => m.stage_features(g, images, stage),
            AnyModel::Joint(m) => m.stage_features(g, images, stage),
        }
    }
}

/// Stacks `(H, W, C)` images into a `(batch, H, W, C)` tensor.
pub fn stack_images<T: Real>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != s.as_slice() {
            return Err(Error::Shape(format!("batch mixes shapes {s:?} and {:?}", im.shape())));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend(s);
    Tensor::new(shape, data)
}
