//! Synthetic spurious-correlation CT analog: generation, augmentation,
//! on-disk format and batching.

pub mod augment;
pub mod generate;
pub mod io;

use std::fmt;

pub use augment::{augment, rotate, AugmentPlan};
pub use generate::{generate_dataset, GenConfig};
pub use io::{load_dataset, read_pgm, save_dataset, write_pgm};

use crate::error::{Error, Result};
use crate::losses::SegTargets;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    TestIn,
    TestShift,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestIn, Split::TestShift];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test_in" => Ok(Split::TestIn),
            "test_shift" => Ok(Split::TestShift),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestIn => "test_in",
            Split::TestShift => "test_shift",
        })
    }
}

/// Inclusive pixel bounding box `(y0, x0, y1, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }

    /// Bounding box of the nonzero pixels of an `(H, W)` mask.
    pub fn of_mask(mask: &Tensor<f32>) -> Option<BBox> {
        let w = mask.shape()[1];
        let mut b: Option<BBox> = None;
        for (i, &v) in mask.data().iter().enumerate() {
            if v > 0.5 {
                let (y, x) = (i / w, i % w);
                b = Some(match b {
                    None => BBox { y0: y, x0: x, y1: y, x1: x },
                    Some(b) => BBox { y0: b.y0.min(y), x0: b.x0.min(x), y1: b.y1.max(y), x1: b.x1.max(x) },
                });
            }
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stem used for file names, unique within a dataset.
    pub id: String,
    /// `(H, W, 1)` intensities in `[0, 1]`, multiples of 1/255.
    pub image: Tensor<f32>,
    pub label: u8,
    /// `(H, W)` binary lesion mask, when annotated.
    pub mask: Option<Tensor<f32>>,
    pub hospital: u8,
    pub patient: u32,
    pub split: Split,
    /// Spurious cue value (thick skull ring); known only for generated data.
    pub cue: Option<u8>,
    /// Lesion extent, from the generator or recovered from the mask.
    pub lesion: Option<BBox>,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(Sample::size)
    }
}

/// Stacked network inputs for one mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B, H, W, 1)`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub seg: SegTargets<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Builds a batch from `(image, mask)` pairs (possibly augmented) and labels.
pub fn make_batch(items: &[(Tensor<f32>, Option<Tensor<f32>>, u8)]) -> Result<Batch> {
    let first = items.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let s = first.0.shape().to_vec();
    let (h, w) = (s[0], s[1]);
    let mut images = Vec::with_capacity(items.len() * h * w);
    let mut masks = Vec::with_capacity(items.len() * h * w);
    let mut present = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for (im, m, l) in items {
        if im.shape() != s.as_slice() {
            return Err(Error::Dataset(format!("batch mixes image shapes {s:?} and {:?}", im.shape())));
        }
        images.extend_from_slice(im.data());
        match m {
            Some(m) => {
                if m.shape() != [h, w] {
                    return Err(Error::Dataset("mask does not match image size".into()));
                }
                masks.extend_from_slice(m.data());
                present.push(true);
            }
            None => {
                masks.extend(std::iter::repeat_n(0.0, h * w));
                present.push(false);
            }
        }
        labels.push(*l as usize);
    }
    let b = items.len();
    Ok(Batch {
        images: Tensor::new(vec![b, h, w, 1], images)?,
        labels,
        seg: SegTargets { masks: Tensor::new(vec![b, h * w], masks)?, present },
    })
}

/// Batch of un-augmented samples.
pub fn batch_of(samples: &[&Sample]) -> Result<Batch> {
    let items: Vec<_> = samples.iter().map(|s| (s.image.clone(), s.mask.clone(), s.label)).collect();
    make_batch(&items)
}
