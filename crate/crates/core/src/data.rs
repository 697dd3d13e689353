//! Dataset loading: the directory layout is the MVTec AD convention
//! (`<category>/train/good`, `<category>/test/<defect_type>`,
//! `<category>/ground_truth/<defect_type>`), with converters that rewrite
//! other public layouts into it.

use crate::error::{Error, Result};
use crate::imgops;
use crate::scalar::Scalar;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use std::fs;
use std::path::{Path, PathBuf};

pub mod convert;

/// Decoded image with optional ground-truth mask.
#[derive(Debug, Clone)]
pub struct ImageSample<S: Scalar> {
    /// `(h, w, c)` color values in `[0, 1]`.
    pub pixels: Array3<S>,
    /// 0 normal, 1 anomalous.
    pub label: u8,
    /// `(h, w)` binary mask, 1 = anomalous pixel. Present on test samples.
    pub mask: Option<Array2<u8>>,
    pub category: String,
    pub path: PathBuf,
}

impl<S: Scalar> ImageSample<S> {
    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Integrity(format!(
                "label must be binary, got {} at {}",
                self.label,
                self.path.display()
            )));
        }
        if let Some(mask) = &self.mask {
            let (h, w, _) = self.pixels.dim();
            if mask.dim() != (h, w) {
                return Err(Error::Integrity(format!(
                    "mask dims {:?} differ from image dims {:?} at {}",
                    mask.dim(),
                    (h, w),
                    self.path.display()
                )));
            }
            if mask.iter().any(|&v| v > 1) {
                return Err(Error::Integrity(format!(
                    "mask must be binary at {}",
                    self.path.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit<S: Scalar> {
    pub samples: Vec<ImageSample<S>>,
    pub split: Split,
    pub category: String,
}

impl<S: Scalar> DatasetSplit<S> {
    /// Hex digest over paths, labels, and pixel data; recorded in run
    /// manifests so reruns can prove they saw the same bytes.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for s in &self.samples {
            hasher.update(s.path.to_string_lossy().as_bytes());
            hasher.update([s.label]);
            for v in s.pixels.iter() {
                hasher.update(v.to_f64_lossy().to_le_bytes());
            }
            if let Some(mask) = &s.mask {
                hasher.update(mask.as_slice().unwrap());
            }
        }
        hex::encode(&hasher.finalize()[..16])
    }
}

/// Flat directory of texture images used by the Perlin generator.
#[derive(Debug, Clone)]
pub struct TextureCorpus<S: Scalar> {
    pub images: Vec<Array3<S>>,
    pub source: PathBuf,
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Lexicographically sorted image files directly under `dir`.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

fn list_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Decode an image file to `(h, w, 3)` floating color in `[0, 1]`.
pub fn load_image<S: Scalar>(path: &Path) -> Result<Array3<S>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<S>::zeros((h as usize, w as usize, 3));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = S::from_f64(pixel.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Decode a mask file: any nonzero pixel counts as anomalous.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = u8::from(pixel.0[0] > 0);
    }
    Ok(out)
}

/// Locate the ground-truth mask for a test image. MVTec names masks
/// `<stem>_mask.png`; converted datasets may use `<stem>.png`.
fn find_mask_path(gt_dir: &Path, stem: &str) -> Option<PathBuf> {
    let with_suffix = gt_dir.join(format!("{stem}_mask.png"));
    if with_suffix.is_file() {
        return Some(with_suffix);
    }
    let plain = gt_dir.join(format!("{stem}.png"));
    if plain.is_file() {
        return Some(plain);
    }
    None
}

/// Load one category split. Ordering is deterministic: defect types
/// lexicographic, file names lexicographic within each type. Decoding runs
/// on parallel workers; the delivered order is the single-worker order.
pub fn load_category<S: Scalar>(root: &Path, category: &str, split: Split) -> Result<DatasetSplit<S>> {
    let cat_dir = root.join(category);
    if !cat_dir.is_dir() {
        return Err(Error::DatasetLayout {
            path: cat_dir,
            msg: "category directory missing".into(),
        });
    }
    let split_dir = cat_dir.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::DatasetLayout {
            path: split_dir,
            msg: "split directory missing".into(),
        });
    }

    // (image path, defect type, mask path)
    let mut jobs: Vec<(PathBuf, String, Option<PathBuf>)> = Vec::new();
    match split {
        Split::Train => {
            let good = split_dir.join("good");
            if !good.is_dir() {
                return Err(Error::DatasetLayout {
                    path: good,
                    msg: "train/good directory missing".into(),
                });
            }
            for file in list_images(&good)? {
                jobs.push((file, "good".into(), None));
            }
        }
        Split::Test => {
            for defect_dir in list_subdirs(&split_dir)? {
                let defect = defect_dir
                    .file_name()
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                let files = list_images(&defect_dir)?;
                if defect == "good" {
                    for file in files {
                        jobs.push((file, defect.clone(), None));
                    }
                } else {
                    let gt_dir = cat_dir.join("ground_truth").join(&defect);
                    if !gt_dir.is_dir() {
                        return Err(Error::DatasetLayout {
                            path: gt_dir,
                            msg: format!("ground_truth directory missing for defect `{defect}`"),
                        });
                    }
                    for file in files {
                        let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
                        let mask = find_mask_path(&gt_dir, &stem).ok_or_else(|| {
                            Error::Integrity(format!(
                                "no mask for test image {} in {}",
                                file.display(),
                                gt_dir.display()
                            ))
                        })?;
                        jobs.push((file, defect.clone(), Some(mask)));
                    }
                }
            }
        }
    }

    let category_owned = category.to_string();
    let samples: Result<Vec<ImageSample<S>>> = jobs
        .par_iter()
        .map(|(file, defect, mask_path)| {
            let pixels = load_image::<S>(file)?;
            let (h, w, _) = pixels.dim();
            let (label, mask) = match (split, mask_path) {
                (Split::Train, _) => (0u8, None),
                (Split::Test, None) => (0u8, Some(Array2::<u8>::zeros((h, w)))),
                (Split::Test, Some(mp)) => {
                    let mask = load_mask(mp)?;
                    if mask.dim() != (h, w) {
                        return Err(Error::Integrity(format!(
                            "mask dims {:?} do not match image dims {:?} for {}",
                            mask.dim(),
                            (h, w),
                            file.display()
                        )));
                    }
                    if mask.iter().all(|&v| v == 0) {
                        return Err(Error::Integrity(format!(
                            "anomalous sample {} (defect `{defect}`) has an all-zero mask",
                            file.display()
                        )));
                    }
                    (1u8, Some(mask))
                }
            };
            let sample = ImageSample {
                pixels,
                label,
                mask,
                category: category_owned.clone(),
                path: file.clone(),
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect();

    Ok(DatasetSplit {
        samples: samples?,
        split,
        category: category.to_string(),
    })
}

/// Discover categories (immediate subdirectories that look like a dataset).
pub fn discover_categories(root: &Path) -> Result<Vec<String>> {
    let mut cats = Vec::new();
    for dir in list_subdirs(root)? {
        if dir.join("train").join("good").is_dir() {
            cats.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    if cats.is_empty() {
        return Err(Error::DatasetLayout {
            path: root.to_path_buf(),
            msg: "no category with train/good found".into(),
        });
    }
    Ok(cats)
}

pub fn load_texture_corpus<S: Scalar>(dir: &Path) -> Result<TextureCorpus<S>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::DatasetLayout {
            path: dir.to_path_buf(),
            msg: "texture corpus directory contains no images".into(),
        });
    }
    let images: Result<Vec<Array3<S>>> = files.par_iter().map(|f| load_image::<S>(f)).collect();
    Ok(TextureCorpus {
        images: images?,
        source: dir.to_path_buf(),
    })
}

/// Resize to `resize` square, then center-crop to `crop`. Masks travel with
/// nearest-neighbor so they stay binary. Already-preprocessed samples pass
/// through unchanged, making the op idempotent.
pub fn preprocess<S: Scalar>(
    sample: &ImageSample<S>,
    resize: usize,
    crop: usize,
) -> Result<ImageSample<S>> {
    if resize == 0 || crop == 0 {
        return Err(Error::Config("resize and crop must be positive".into()));
    }
    if crop > resize {
        return Err(Error::Config(format!(
            "crop {crop} exceeds resize {resize}"
        )));
    }
    let (h, w) = sample.dims();
    if (h, w) == (crop, crop) {
        return Ok(sample.clone());
    }
    let resized = imgops::resize_bilinear(&sample.pixels.view(), resize, resize);
    let pixels = imgops::center_crop(&resized.view(), crop, crop);
    let mask = sample
        .mask
        .as_ref()
        .map(|m| {
            let rm = imgops::resize_mask_nearest(&m.view(), resize, resize);
            imgops::center_crop_mask(&rm.view(), crop, crop)
        });
    Ok(ImageSample {
        pixels,
        label: sample.label,
        mask,
        category: sample.category.clone(),
        path: sample.path.clone(),
    })
}

pub fn preprocess_split<S: Scalar>(
    split: &DatasetSplit<S>,
    resize: usize,
    crop: usize,
) -> Result<DatasetSplit<S>> {
    let samples: Result<Vec<_>> = split
        .samples
        .par_iter()
        .map(|s| preprocess(s, resize, crop))
        .collect();
    Ok(DatasetSplit {
        samples: samples?,
        split: split.split,
        category: split.category.clone(),
    })
}

/// Encode `(h, w, c)` color in `[0, 1]` as an 8-bit PNG.
pub fn save_image<S: Scalar>(pixels: &Array3<S>, path: &Path) -> Result<()> {
    let (h, w, c) = pixels.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let v = if ch < c {
                    pixels[(i, j, ch)].to_f64_lossy()
                } else {
                    pixels[(i, j, c - 1)].to_f64_lossy()
                };
                px[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            buf.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn save_mask(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            buf.put_pixel(j as u32, i as u32, image::Luma([mask[(i, j)] * 255]));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::TempDir;

    type S = f32;

    fn write_png(path: &Path, h: usize, w: usize, shade: f64) {
        let img = Array3::<S>::from_elem((h, w, 3), shade as f32);
        save_image(&img, path).unwrap();
    }

    fn write_mask_png(path: &Path, h: usize, w: usize, on: bool) {
        let mut mask = Array2::<u8>::zeros((h, w));
        if on {
            mask[(h / 2, w / 2)] = 1;
        }
        save_mask(&mask, path).unwrap();
    }

    fn make_dataset(root: &Path) {
        let cat = root.join("widget");
        fs::create_dir_all(cat.join("train/good")).unwrap();
        fs::create_dir_all(cat.join("test/good")).unwrap();
        fs::create_dir_all(cat.join("test/crack")).unwrap();
        fs::create_dir_all(cat.join("ground_truth/crack")).unwrap();
        for i in 0..3 {
            write_png(&cat.join(format!("train/good/{i:03}.png")), 32, 32, 0.5);
        }
        for i in 0..2 {
            write_png(&cat.join(format!("test/good/{i:03}.png")), 32, 32, 0.5);
        }
        write_png(&cat.join("test/crack/000.png"), 32, 32, 0.2);
        write_mask_png(&cat.join("ground_truth/crack/000_mask.png"), 32, 32, true);
    }

    #[test]
    fn train_split_loads_with_zero_labels() {
        let dir = TempDir::new().unwrap();
        make_dataset(dir.path());
        let split = load_category::<S>(dir.path(), "widget", Split::Train).unwrap();
        assert_eq!(split.samples.len(), 3);
        assert!(split.samples.iter().all(|s| s.label == 0));
    }

    #[test]
    fn test_split_pairs_masks_and_labels() {
        let dir = TempDir::new().unwrap();
        make_dataset(dir.path());
        let split = load_category::<S>(dir.path(), "widget", Split::Test).unwrap();
        assert_eq!(split.samples.len(), 3);
        let labels: Vec<u8> = split.samples.iter().map(|s| s.label).collect();
        // crack sorts before good
        assert_eq!(labels, vec![1, 0, 0]);
        for s in &split.samples {
            let mask = s.mask.as_ref().unwrap();
            let nonzero = mask.iter().filter(|&&v| v > 0).count();
            if s.label == 1 {
                assert!(nonzero > 0);
            } else {
                assert_eq!(nonzero, 0);
            }
        }
    }

    #[test]
    fn missing_directory_is_a_layout_error() {
        let dir = TempDir::new().unwrap();
        let err = load_category::<S>(dir.path(), "nope", Split::Train).unwrap_err();
        assert!(matches!(err, Error::DatasetLayout { .. }));
    }

    #[test]
    fn missing_mask_is_an_integrity_error() {
        let dir = TempDir::new().unwrap();
        make_dataset(dir.path());
        fs::remove_file(dir.path().join("widget/ground_truth/crack/000_mask.png")).unwrap();
        let err = load_category::<S>(dir.path(), "widget", Split::Test).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn reload_is_deterministic() {
        let dir = TempDir::new().unwrap();
        make_dataset(dir.path());
        let a = load_category::<S>(dir.path(), "widget", Split::Test).unwrap();
        let b = load_category::<S>(dir.path(), "widget", Split::Test).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let paths_a: Vec<_> = a.samples.iter().map(|s| s.path.clone()).collect();
        let paths_b: Vec<_> = b.samples.iter().map(|s| s.path.clone()).collect();
        assert_eq!(paths_a, paths_b);
    }

    #[test]
    fn preprocess_resizes_and_crops() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("big.png");
        write_png(&path, 90, 90, 0.3);
        let sample = ImageSample::<S> {
            pixels: load_image(&path).unwrap(),
            label: 0,
            mask: Some(Array2::zeros((90, 90))),
            category: "t".into(),
            path,
        };
        let out = preprocess(&sample, 32, 28).unwrap();
        assert_eq!(out.pixels.dim(), (28, 28, 3));
        assert_eq!(out.mask.as_ref().unwrap().dim(), (28, 28));
    }

    #[test]
    fn preprocess_is_idempotent() {
        let pixels = Array3::<S>::from_shape_fn((28, 28, 3), |(i, j, c)| {
            ((i + 2 * j + c) % 11) as f32 / 11.0
        });
        let sample = ImageSample::<S> {
            pixels,
            label: 0,
            mask: None,
            category: "t".into(),
            path: PathBuf::from("x"),
        };
        let once = preprocess(&sample, 32, 28).unwrap();
        let twice = preprocess(&once, 32, 28).unwrap();
        assert_eq!(once.pixels, twice.pixels);
    }

    #[test]
    fn preprocess_rejects_crop_above_resize() {
        let sample = ImageSample::<S> {
            pixels: Array3::zeros((16, 16, 3)),
            label: 0,
            mask: None,
            category: "t".into(),
            path: PathBuf::from("x"),
        };
        assert!(matches!(
            preprocess(&sample, 16, 24).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn mask_stays_binary_through_preprocess() {
        let mut mask = Array2::<u8>::zeros((50, 50));
        for i in 20..30 {
            for j in 20..30 {
                mask[(i, j)] = 1;
            }
        }
        let sample = ImageSample::<S> {
            pixels: Array3::zeros((50, 50, 3)),
            label: 1,
            mask: Some(mask),
            category: "t".into(),
            path: PathBuf::from("x"),
        };
        let out = preprocess(&sample, 32, 24).unwrap();
        let m = out.mask.unwrap();
        assert!(m.iter().all(|&v| v == 0 || v == 1));
        assert!(m.iter().any(|&v| v == 1));
    }
}
