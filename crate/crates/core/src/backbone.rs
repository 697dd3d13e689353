//! The feature extractor: a four-stage convolutional backbone with the
//! 4/8/16/32 stride schedule, exposing per-level feature pyramids, pooled
//! vectors for the contrastive heads, and locally aggregated patch features
//! for the memory bank.
//!
//! The full-scale configuration mirrors a WideResNet-50-class extractor and
//! needs externally supplied pretrained weights; the `desk` architecture is
//! a reduced-width network with the same stride schedule so the whole
//! pipeline runs CPU-only.
//!
//! Level sets intentionally differ downstream: the contrastive fine-tune
//! reads levels {3, 4} while the memory bank aggregates levels {2, 3}.

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::imgops;
use crate::nn::{Conv2d, ParamSet};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::{self, Var};
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Architecture identifier recorded in checkpoints.
    pub arch: String,
    /// Channel width after each of the four stages.
    pub channels: [usize; 4],
    /// Per-channel input normalization; `None` is identity (desk default).
    pub input_mean: Option<[f64; 3]>,
    pub input_std: Option<[f64; 3]>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            arch: "desk".into(),
            channels: [16, 32, 48, 64],
            input_mean: None,
            input_std: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        Ok(())
    }
}

/// Which backbone stages accumulate gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneMode {
    pub trainable: [bool; 4],
}

impl BackboneMode {
    pub fn frozen() -> Self {
        BackboneMode {
            trainable: [false; 4],
        }
    }

    pub fn all_trainable() -> Self {
        BackboneMode {
            trainable: [true; 4],
        }
    }
}

/// Per-level feature maps from one forward pass, keyed by level 1–4.
pub struct FeaturePyramid<S: Scalar> {
    pub layers: BTreeMap<u8, Var<S>>,
    pub source_dims: (usize, usize),
}

impl<S: Scalar> FeaturePyramid<S> {
    pub fn level(&self, level: u8) -> Result<&Var<S>> {
        self.layers
            .get(&level)
            .ok_or_else(|| Error::argument("pyramid", format!("level {level} missing")))
    }

    pub fn is_complete(&self) -> bool {
        (1..=4u8).all(|l| self.layers.contains_key(&l))
    }
}

/// Locally aggregated patch features for one image.
#[derive(Debug, Clone)]
pub struct PatchFeatureSet<S: Scalar> {
    /// `(h·w, d)` row-major patch vectors.
    pub features: Array2<S>,
    pub grid: (usize, usize),
    pub provenance: PathBuf,
}

struct Stage<S: Scalar> {
    convs: Vec<Conv2d<S>>,
}

impl<S: Scalar> Stage<S> {
    fn forward(&self, x: &Var<S>) -> Var<S> {
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = tensor::relu(&conv.forward(&cur));
        }
        cur
    }
}

pub struct Backbone<S: Scalar> {
    stages: Vec<Stage<S>>,
    pub config: BackboneConfig,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ch = config.channels;
        let mut stages = Vec::with_capacity(4);
        let mut layer = 0u64;
        let mut next_seed = || {
            layer += 1;
            derive_seed(seed, "backbone", layer)
        };
        // stage 1 reaches stride 4 with two stride-2 convs
        stages.push(Stage {
            convs: vec![
                Conv2d::new(3, ch[0], 3, 2, 1, next_seed()),
                Conv2d::new(ch[0], ch[0], 3, 2, 1, next_seed()),
            ],
        });
        for i in 1..4 {
            stages.push(Stage {
                convs: vec![
                    Conv2d::new(ch[i - 1], ch[i], 3, 2, 1, next_seed()),
                    Conv2d::new(ch[i], ch[i], 3, 1, 1, next_seed()),
                ],
            });
        }
        Ok(Backbone { stages, config })
    }

    pub fn named_params(&self) -> ParamSet<S> {
        let mut set = ParamSet::new();
        for (si, stage) in self.stages.iter().enumerate() {
            for (ci, conv) in stage.convs.iter().enumerate() {
                set.push(format!("stage{}.conv{}.weight", si + 1, ci), &conv.weight);
                set.push(format!("stage{}.conv{}.bias", si + 1, ci), &conv.bias);
            }
        }
        set
    }

    pub fn set_mode(&self, mode: BackboneMode) {
        for (si, stage) in self.stages.iter().enumerate() {
            for conv in &stage.convs {
                conv.weight.set_trainable(mode.trainable[si]);
                conv.bias.set_trainable(mode.trainable[si]);
            }
        }
    }

    fn normalize(&self, batch: &Array4<S>) -> Array4<S> {
        match (&self.config.input_mean, &self.config.input_std) {
            (Some(mean), Some(std)) => {
                let mut out = batch.clone();
                for c in 0..3.min(batch.dim().1) {
                    let m = S::from_f64(mean[c]);
                    let s = S::from_f64(std[c]);
                    out.index_axis_mut(Axis(1), c).mapv_inplace(|v| (v - m) / s);
                }
                out
            }
            _ => batch.clone(),
        }
    }

    /// Forward a `(n, 3, h, w)` batch, producing all four pyramid levels.
    /// Gradients flow into stages marked trainable by the current mode.
    pub fn extract_pyramid_batch(&self, batch: &Array4<S>) -> FeaturePyramid<S> {
        let (_, _, h, w) = batch.dim();
        let input = Var::constant(self.normalize(batch).into_dyn());
        let mut layers = BTreeMap::new();
        let mut cur = input;
        for (si, stage) in self.stages.iter().enumerate() {
            cur = stage.forward(&cur);
            layers.insert((si + 1) as u8, cur.clone());
        }
        FeaturePyramid {
            layers,
            source_dims: (h, w),
        }
    }

    /// Forward one preprocessed sample.
    pub fn extract_pyramid(&self, image: &ImageSample<S>) -> FeaturePyramid<S> {
        self.extract_pyramid_batch(&nchw_batch(std::slice::from_ref(image)))
    }

    /// Plain-array snapshot for concurrent, gradient-free extraction.
    pub fn snapshot(&self) -> InferenceExtractor<S> {
        InferenceExtractor {
            stages: self
                .stages
                .iter()
                .map(|stage| {
                    stage
                        .convs
                        .iter()
                        .map(|c| {
                            (
                                c.weight
                                    .to_array()
                                    .into_dimensionality::<ndarray::Ix4>()
                                    .unwrap(),
                                c.bias
                                    .to_array()
                                    .into_dimensionality::<ndarray::Ix1>()
                                    .unwrap(),
                                c.stride,
                                c.pad,
                            )
                        })
                        .collect()
                })
                .collect(),
            input_mean: self.config.input_mean,
            input_std: self.config.input_std,
        }
    }
}

/// Stack samples into a `(n, c, h, w)` batch.
pub fn nchw_batch<S: Scalar>(samples: &[ImageSample<S>]) -> Array4<S> {
    assert!(!samples.is_empty());
    let (h, w, c) = samples[0].pixels.dim();
    let mut out = Array4::<S>::zeros((samples.len(), c, h, w));
    for (n, s) in samples.iter().enumerate() {
        assert_eq!(s.pixels.dim(), (h, w, c), "inconsistent batch dims");
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    out[(n, ch, i, j)] = s.pixels[(i, j, ch)];
                }
            }
        }
    }
    out
}

/// Stack raw `(h, w, c)` images into a `(n, c, h, w)` batch.
pub fn nchw_from_images<S: Scalar>(images: &[Array3<S>]) -> Array4<S> {
    assert!(!images.is_empty());
    let (h, w, c) = images[0].dim();
    let mut out = Array4::<S>::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (h, w, c), "inconsistent batch dims");
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    out[(n, ch, i, j)] = img[(i, j, ch)];
                }
            }
        }
    }
    out
}

/// One global-average-pooled vector per selected level; no cross-level
/// concatenation.
pub fn pooled_views<S: Scalar>(
    pyramid: &FeaturePyramid<S>,
    levels: &[u8],
) -> Result<Vec<Var<S>>> {
    if levels.is_empty() {
        return Err(Error::argument("levels", "level set must be nonempty"));
    }
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        if !(1..=4).contains(&level) {
            return Err(Error::argument("levels", format!("level {level} out of range")));
        }
        out.push(tensor::global_avg_pool(pyramid.level(level)?));
    }
    Ok(out)
}

/// Weight-snapshot extractor: `Send + Sync`, no gradients, used for bank
/// construction and scoring.
pub struct InferenceExtractor<S: Scalar> {
    stages: Vec<Vec<(Array4<S>, Array1<S>, usize, usize)>>,
    input_mean: Option<[f64; 3]>,
    input_std: Option<[f64; 3]>,
}

impl<S: Scalar> InferenceExtractor<S> {
    /// Forward a `(n, 3, h, w)` batch to plain-array pyramid levels 1–4.
    pub fn pyramid_arrays(&self, batch: &Array4<S>) -> Vec<Array4<S>> {
        let mut cur = match (&self.input_mean, &self.input_std) {
            (Some(mean), Some(std)) => {
                let mut out = batch.clone();
                for c in 0..3.min(batch.dim().1) {
                    let m = S::from_f64(mean[c]);
                    let s = S::from_f64(std[c]);
                    out.index_axis_mut(Axis(1), c).mapv_inplace(|v| (v - m) / s);
                }
                out
            }
            _ => batch.clone(),
        };
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for (w, b, stride, pad) in stage {
                cur = tensor::conv2d_raw(&cur, w, b, *stride, *pad);
                cur.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
            }
            levels.push(cur.clone());
        }
        levels
    }

    /// Aggregated patch features for one preprocessed sample: the level-3
    /// map is upsampled to the level-2 grid, channels concatenated, and each
    /// location averaged over its `neighborhood × neighborhood` window.
    pub fn aggregate_patches(
        &self,
        image: &ImageSample<S>,
        levels: (u8, u8),
        neighborhood: usize,
    ) -> Result<PatchFeatureSet<S>> {
        if neighborhood == 0 || neighborhood % 2 == 0 {
            return Err(Error::argument(
                "neighborhood",
                "window must be odd and at least 1",
            ));
        }
        let batch = nchw_batch(std::slice::from_ref(image));
        let pyramid = self.pyramid_arrays(&batch);
        let get = |level: u8| -> Result<Array3<S>> {
            if !(1..=4).contains(&level) {
                return Err(Error::argument("levels", format!("level {level} out of range")));
            }
            Ok(pyramid[(level - 1) as usize]
                .index_axis(Axis(0), 0)
                .to_owned())
        };
        let fine = get(levels.0)?;
        let coarse = get(levels.1)?;
        let (_, h2, w2) = fine.dim();
        let coarse_up = resize_chw_bilinear(&coarse, h2, w2);
        let stacked = ndarray::concatenate(Axis(0), &[fine.view(), coarse_up.view()])
            .expect("channel concat");
        let pooled = local_average_pool(&stacked, neighborhood);
        let (d, _, _) = pooled.dim();
        let mut features = Array2::<S>::zeros((h2 * w2, d));
        for i in 0..h2 {
            for j in 0..w2 {
                for ch in 0..d {
                    features[(i * w2 + j, ch)] = pooled[(ch, i, j)];
                }
            }
        }
        Ok(PatchFeatureSet {
            features,
            grid: (h2, w2),
            provenance: image.path.clone(),
        })
    }
}

/// Bilinear resize of a `(c, h, w)` map.
fn resize_chw_bilinear<S: Scalar>(x: &Array3<S>, out_h: usize, out_w: usize) -> Array3<S> {
    let hwc = x.view().permuted_axes([1, 2, 0]).to_owned();
    let resized = imgops::resize_bilinear(&hwc.view(), out_h, out_w);
    resized.permuted_axes([2, 0, 1]).to_owned()
}

/// Edge-aware box filter over each channel of a `(c, h, w)` map.
fn local_average_pool<S: Scalar>(x: &Array3<S>, window: usize) -> Array3<S> {
    if window == 1 {
        return x.clone();
    }
    let (c, h, w) = x.dim();
    let r = (window / 2) as isize;
    let mut out = Array3::<S>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = S::zero();
                let mut count = 0usize;
                for di in -r..=r {
                    for dj in -r..=r {
                        let ii = i as isize + di;
                        let jj = j as isize + dj;
                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            acc = acc + x[(ch, ii as usize, jj as usize)];
                            count += 1;
                        }
                    }
                }
                out[(ch, i, j)] = acc / S::from_usize(count);
            }
        }
    }
    out
}
