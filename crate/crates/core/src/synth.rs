//! The anomaly generator: pseudo-defect images plus ground-truth masks built
//! from normal samples, via thresholded lattice noise (default), patch
//! relocation, or gradient-domain blending.

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::imgops;
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub mod cutpaste;
pub mod nsa;
pub mod perlin;

pub use perlin::{binarize, perlin_field, NoiseField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Perlin,
    Cutpaste,
    Nsa,
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GeneratorKind::Perlin => write!(f, "perlin"),
            GeneratorKind::Cutpaste => write!(f, "cutpaste"),
            GeneratorKind::Nsa => write!(f, "nsa"),
        }
    }
}

/// Where the Perlin generator takes its texture content from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureSource {
    /// A different training image of the same category.
    SelfCorpus,
    /// An external texture directory.
    External,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    /// Threshold on `|noise|` for the defect mask.
    pub perlin_threshold: f64,
    /// Lattice period is `2^k` pixels with `k` uniform in this inclusive range.
    pub period_exponent_range: (u32, u32),
    /// Blend opacity range, within (0, 1].
    pub opacity_range: (f64, f64),
    /// Slight rotation sampled uniformly from `[-a, a]` degrees.
    pub slight_angle_degrees: f64,
    /// Additionally rotate by a random quarter turn.
    pub right_angles: bool,
    pub texture_source: TextureSource,
    /// Attempts before an empty mask becomes a synthesis error.
    pub retry_cap: u32,
    /// Patch area as a fraction of the image, for cutpaste and nsa.
    pub patch_area_range: (f64, f64),
    /// Patch aspect ratio range (log-uniform).
    pub patch_aspect_range: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            kind: GeneratorKind::Perlin,
            perlin_threshold: 0.5,
            period_exponent_range: (2, 5),
            opacity_range: (0.15, 1.0),
            slight_angle_degrees: 5.0,
            right_angles: true,
            texture_source: TextureSource::SelfCorpus,
            retry_cap: 10,
            patch_area_range: (0.02, 0.15),
            patch_aspect_range: (0.3, 3.3),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perlin_threshold > 0.0 && self.perlin_threshold < 1.0) {
            return Err(Error::Config(format!(
                "perlin_threshold must lie in (0, 1), got {}",
                self.perlin_threshold
            )));
        }
        let (lo, hi) = self.opacity_range;
        if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "opacity_range must be within (0, 1], got ({lo}, {hi})"
            )));
        }
        if self.period_exponent_range.0 > self.period_exponent_range.1 {
            return Err(Error::Config("period_exponent_range is reversed".into()));
        }
        if self.retry_cap == 0 {
            return Err(Error::Config("retry_cap must be at least 1".into()));
        }
        let (alo, ahi) = self.patch_area_range;
        if !(alo > 0.0 && ahi < 1.0 && alo <= ahi) {
            return Err(Error::Config("patch_area_range must be within (0, 1)".into()));
        }
        if !(self.patch_aspect_range.0 > 0.0
            && self.patch_aspect_range.0 <= self.patch_aspect_range.1)
        {
            return Err(Error::Config("patch_aspect_range is invalid".into()));
        }
        Ok(())
    }
}

/// A synthesized defect image with its ground-truth mask.
#[derive(Debug, Clone)]
pub struct SyntheticAnomaly<S: Scalar> {
    pub image: Array3<S>,
    pub mask: Array2<u8>,
    pub generator: GeneratorKind,
    pub source: PathBuf,
}

impl<S: Scalar> SyntheticAnomaly<S> {
    pub fn validate(&self) -> Result<()> {
        if self.mask.iter().all(|&v| v == 0) {
            return Err(Error::Synthesis("synthetic mask is empty".into()));
        }
        if self.mask.iter().any(|&v| v > 1) {
            return Err(Error::Synthesis("synthetic mask is not binary".into()));
        }
        Ok(())
    }
}

/// Apply the configured rotation pipeline: slight angle, then an optional
/// quarter turn.
fn rotate_base<S: Scalar, R: Rng>(
    base: &ImageSample<S>,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Array3<S> {
    let a = cfg.slight_angle_degrees;
    let angle = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    let mut rotated = imgops::rotate(&base.pixels.view(), angle);
    if cfg.right_angles {
        let turns = rng.random_range(0..4u8);
        rotated = imgops::rotate_right_angle(&rotated.view(), turns);
    }
    rotated
}

/// Fuse masked texture into the rotated image at opacity `beta`:
/// `out = (1 - beta*mask) * rotated + beta*mask * texture`.
pub fn fuse<S: Scalar>(
    rotated: &Array3<S>,
    texture: &Array3<S>,
    mask: &Array2<u8>,
    beta: S,
) -> Array3<S> {
    let (h, w, c) = rotated.dim();
    assert_eq!(texture.dim(), (h, w, c), "texture dims");
    assert_eq!(mask.dim(), (h, w), "mask dims");
    let mut out = rotated.clone();
    for i in 0..h {
        for j in 0..w {
            if mask[(i, j)] == 1 {
                for ch in 0..c {
                    out[(i, j, ch)] =
                        (S::one() - beta) * rotated[(i, j, ch)] + beta * texture[(i, j, ch)];
                }
            }
        }
    }
    out
}

/// Perlin-noise synthesis: rotate the base, threshold a seeded noise field
/// into a mask (retrying on empty masks), and blend the texture in.
pub fn synthesize_perlin<S: Scalar>(
    base: &ImageSample<S>,
    texture: &Array3<S>,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<SyntheticAnomaly<S>> {
    if base.label != 0 {
        return Err(Error::argument("base", "synthesis requires a normal sample"));
    }
    let (h, w) = base.dims();
    let texture = if texture.dim() == base.pixels.dim() {
        texture.clone()
    } else {
        imgops::resize_bilinear(&texture.view(), h, w)
    };
    let mut rot_rng = rng_from(derive_seed(seed, "rotate", 0));
    let rotated = rotate_base(base, cfg, &mut rot_rng);

    let mut mask = None;
    for attempt in 0..cfg.retry_cap {
        let mut attempt_rng = rng_from(derive_seed(seed, "noise", attempt as u64));
        let kx = attempt_rng.random_range(cfg.period_exponent_range.0..=cfg.period_exponent_range.1);
        let ky = attempt_rng.random_range(cfg.period_exponent_range.0..=cfg.period_exponent_range.1);
        let field_seed = attempt_rng.random::<u64>();
        let field = perlin_field::<S>(h, w, 1 << kx, 1 << ky, field_seed)?;
        let candidate = binarize(&field, cfg.perlin_threshold)?;
        if candidate.iter().any(|&v| v == 1) {
            mask = Some(candidate);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::Synthesis(format!(
            "no nonempty mask after {} attempts (threshold {} too high?)",
            cfg.retry_cap, cfg.perlin_threshold
        ))
    })?;

    let mut beta_rng = rng_from(derive_seed(seed, "beta", 0));
    let beta = S::from_f64(beta_rng.random_range(cfg.opacity_range.0..=cfg.opacity_range.1));
    let image = fuse(&rotated, &texture, &mask, beta);
    let out = SyntheticAnomaly {
        image,
        mask,
        generator: GeneratorKind::Perlin,
        source: base.path.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// Patch-relocation synthesis.
pub fn synthesize_cutpaste<S: Scalar>(
    base: &ImageSample<S>,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<SyntheticAnomaly<S>> {
    if base.label != 0 {
        return Err(Error::argument("base", "synthesis requires a normal sample"));
    }
    let (h, w) = base.dims();
    let mut rng = rng_from(derive_seed(seed, "cutpaste", 0));
    let (ph, pw) =
        cutpaste::sample_patch_shape(&mut rng, h, w, cfg.patch_area_range, cfg.patch_aspect_range);
    let src = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
    let dst = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
    let (image, mask) = cutpaste::cutpaste_rect(&base.pixels, src, dst, (ph, pw))?;
    let out = SyntheticAnomaly {
        image,
        mask,
        generator: GeneratorKind::Cutpaste,
        source: base.path.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// Seamless-blend synthesis from a donor sample.
pub fn synthesize_nsa<S: Scalar>(
    base: &ImageSample<S>,
    donor: &ImageSample<S>,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<SyntheticAnomaly<S>> {
    if base.label != 0 || donor.label != 0 {
        return Err(Error::argument("base", "synthesis requires normal samples"));
    }
    if base.pixels.dim() != donor.pixels.dim() {
        return Err(Error::argument("donor", "donor dims must match base dims"));
    }
    let (h, w) = base.dims();
    let mut rng = rng_from(derive_seed(seed, "nsa", 0));
    let (ph, pw) =
        cutpaste::sample_patch_shape(&mut rng, h, w, cfg.patch_area_range, cfg.patch_aspect_range);
    let off = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
    let dst = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
    let (image, mask) = nsa::poisson_blend(&base.pixels, &donor.pixels, off, dst, (ph, pw))?;
    let out = SyntheticAnomaly {
        image,
        mask,
        generator: GeneratorKind::Nsa,
        source: base.path.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// Resolves texture/donor content for the configured generator and
/// dispatches. `pool` is the training split the base sample came from;
/// `base_idx` indexes into it.
pub struct SynthesisSource<'a, S: Scalar> {
    pub train: &'a [ImageSample<S>],
    pub textures: Option<&'a [Array3<S>]>,
}

impl<'a, S: Scalar> SynthesisSource<'a, S> {
    pub fn synthesize(
        &self,
        base_idx: usize,
        cfg: &GeneratorConfig,
        seed: u64,
    ) -> Result<SyntheticAnomaly<S>> {
        let base = &self.train[base_idx];
        match cfg.kind {
            GeneratorKind::Perlin => {
                let texture = self.pick_texture(base_idx, cfg, seed)?;
                synthesize_perlin(base, texture, cfg, seed)
            }
            GeneratorKind::Cutpaste => synthesize_cutpaste(base, cfg, seed),
            GeneratorKind::Nsa => {
                let donor_idx = self.pick_other_index(base_idx, seed);
                synthesize_nsa(base, &self.train[donor_idx], cfg, seed)
            }
        }
    }

    fn pick_texture(
        &self,
        base_idx: usize,
        cfg: &GeneratorConfig,
        seed: u64,
    ) -> Result<&Array3<S>> {
        match cfg.texture_source {
            TextureSource::External => {
                let textures = self.textures.ok_or_else(|| {
                    Error::Config("texture_source = external but no corpus configured".into())
                })?;
                if textures.is_empty() {
                    return Err(Error::Config("texture corpus is empty".into()));
                }
                let mut rng = rng_from(derive_seed(seed, "texture", 0));
                Ok(&textures[rng.random_range(0..textures.len())])
            }
            TextureSource::SelfCorpus => {
                let idx = self.pick_other_index(base_idx, seed);
                Ok(&self.train[idx].pixels)
            }
        }
    }

    /// A training index different from `base_idx` when possible.
    fn pick_other_index(&self, base_idx: usize, seed: u64) -> usize {
        let n = self.train.len();
        if n <= 1 {
            return base_idx;
        }
        let mut rng = rng_from(derive_seed(seed, "donor", 0));
        let offset = rng.random_range(1..n);
        (base_idx + offset) % n
    }
}
