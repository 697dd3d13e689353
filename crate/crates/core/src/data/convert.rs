//! Rewriters that lay out VisA and BTAD trees in the MVTec AD convention so
//! one loader serves all three datasets.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

fn copy_into(src: &Path, dst_dir: &Path, dst_name: &str) -> Result<()> {
    fs::create_dir_all(dst_dir).map_err(|e| Error::io(dst_dir, e))?;
    let dst = dst_dir.join(dst_name);
    fs::copy(src, &dst).map_err(|e| Error::io(&dst, e))?;
    Ok(())
}

/// Convert a VisA-layout tree into the MVTec layout under `dst`.
///
/// Expects the official structure: `<root>/split_csv/1cls.csv` with columns
/// `object,split,label,image,mask`, and per-category
/// `Data/Images/{Normal,Anomaly}` plus `Data/Masks/Anomaly`.
pub fn convert_visa(src: &Path, dst: &Path) -> Result<usize> {
    let csv_path = src.join("split_csv").join("1cls.csv");
    if !csv_path.is_file() {
        return Err(Error::DatasetLayout {
            path: csv_path,
            msg: "VisA split file split_csv/1cls.csv not found".into(),
        });
    }
    let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut count = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue; // header
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(Error::Integrity(format!(
                "malformed VisA split row {}: `{line}`",
                lineno + 1
            )));
        }
        let (object, split, label) = (fields[0], fields[1], fields[2]);
        let image_rel = fields[3];
        let mask_rel = fields.get(4).copied().unwrap_or("");
        let image_src = src.join(image_rel);
        if !image_src.is_file() {
            return Err(Error::Integrity(format!(
                "VisA image listed in split csv is missing: {}",
                image_src.display()
            )));
        }
        let stem = image_src.file_stem().unwrap().to_string_lossy().into_owned();
        match (split, label) {
            ("train", "normal") => {
                copy_into(
                    &image_src,
                    &dst.join(object).join("train").join("good"),
                    &format!("{stem}.{}", ext_of(&image_src)),
                )?;
            }
            ("test", "normal") => {
                copy_into(
                    &image_src,
                    &dst.join(object).join("test").join("good"),
                    &format!("{stem}.{}", ext_of(&image_src)),
                )?;
            }
            ("test", "anomaly") => {
                copy_into(
                    &image_src,
                    &dst.join(object).join("test").join("anomaly"),
                    &format!("{stem}.{}", ext_of(&image_src)),
                )?;
                if mask_rel.is_empty() {
                    return Err(Error::Integrity(format!(
                        "VisA anomalous row without mask: `{line}`"
                    )));
                }
                let mask_src = src.join(mask_rel);
                if !mask_src.is_file() {
                    return Err(Error::Integrity(format!(
                        "VisA mask missing: {}",
                        mask_src.display()
                    )));
                }
                copy_into(
                    &mask_src,
                    &dst.join(object).join("ground_truth").join("anomaly"),
                    &format!("{stem}.png"),
                )?;
            }
            other => {
                return Err(Error::Integrity(format!(
                    "unrecognized VisA split/label pair {other:?} in row `{line}`"
                )));
            }
        }
        count += 1;
    }
    Ok(count)
}

fn ext_of(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("png")
        .to_ascii_lowercase()
}

/// Convert a BTAD-layout tree (`<cat>/{train,test}/{ok,ko}` plus
/// `ground_truth/ko`) into the MVTec layout under `dst`.
pub fn convert_btad(src: &Path, dst: &Path) -> Result<usize> {
    let mut categories: Vec<_> = fs::read_dir(src)
        .map_err(|e| Error::io(src, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    categories.sort();
    if categories.is_empty() {
        return Err(Error::DatasetLayout {
            path: src.to_path_buf(),
            msg: "BTAD root has no category directories".into(),
        });
    }
    let mut count = 0usize;
    for cat_dir in categories {
        let cat = cat_dir.file_name().unwrap().to_string_lossy().into_owned();
        let train_ok = cat_dir.join("train").join("ok");
        if !train_ok.is_dir() {
            return Err(Error::DatasetLayout {
                path: train_ok,
                msg: "BTAD category missing train/ok".into(),
            });
        }
        count += copy_dir_images(&train_ok, &dst.join(&cat).join("train").join("good"))?;
        let test_ok = cat_dir.join("test").join("ok");
        if test_ok.is_dir() {
            count += copy_dir_images(&test_ok, &dst.join(&cat).join("test").join("good"))?;
        }
        let test_ko = cat_dir.join("test").join("ko");
        if test_ko.is_dir() {
            count += copy_dir_images(&test_ko, &dst.join(&cat).join("test").join("ko"))?;
            let gt = cat_dir.join("ground_truth").join("ko");
            if !gt.is_dir() {
                return Err(Error::DatasetLayout {
                    path: gt,
                    msg: "BTAD category has test/ko but no ground_truth/ko".into(),
                });
            }
            copy_dir_images(&gt, &dst.join(&cat).join("ground_truth").join("ko"))?;
        }
    }
    Ok(count)
}

fn copy_dir_images(src: &Path, dst: &Path) -> Result<usize> {
    let mut files: Vec<_> = fs::read_dir(src)
        .map_err(|e| Error::io(src, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut count = 0;
    for f in files {
        let name = f.file_name().unwrap().to_string_lossy().into_owned();
        copy_into(&f, dst, &name)?;
        count += 1;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_category, Split};
    use ndarray::{Array2, Array3};
    use tempfile::TempDir;

    fn png(path: &Path, shade: f32) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        let img = Array3::<f32>::from_elem((16, 16, 3), shade);
        crate::data::save_image(&img, path).unwrap();
    }

    fn mask_png(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        let mut m = Array2::<u8>::zeros((16, 16));
        m[(8, 8)] = 1;
        crate::data::save_mask(&m, path).unwrap();
    }

    #[test]
    fn visa_tree_converts_and_loads() {
        let src = TempDir::new().unwrap();
        let dst = TempDir::new().unwrap();
        png(&src.path().join("candle/Data/Images/Normal/0000.png"), 0.4);
        png(&src.path().join("candle/Data/Images/Normal/0001.png"), 0.4);
        png(&src.path().join("candle/Data/Images/Anomaly/0002.png"), 0.8);
        mask_png(&src.path().join("candle/Data/Masks/Anomaly/0002.png"));
        fs::create_dir_all(src.path().join("split_csv")).unwrap();
        fs::write(
            src.path().join("split_csv/1cls.csv"),
            "object,split,label,image,mask\n\
             candle,train,normal,candle/Data/Images/Normal/0000.png,\n\
             candle,test,normal,candle/Data/Images/Normal/0001.png,\n\
             candle,test,anomaly,candle/Data/Images/Anomaly/0002.png,candle/Data/Masks/Anomaly/0002.png\n",
        )
        .unwrap();
        let n = convert_visa(src.path(), dst.path()).unwrap();
        assert_eq!(n, 3);
        let train = load_category::<f32>(dst.path(), "candle", Split::Train).unwrap();
        assert_eq!(train.samples.len(), 1);
        let test = load_category::<f32>(dst.path(), "candle", Split::Test).unwrap();
        assert_eq!(test.samples.len(), 2);
        assert_eq!(test.samples.iter().filter(|s| s.label == 1).count(), 1);
    }

    #[test]
    fn btad_tree_converts_and_loads() {
        let src = TempDir::new().unwrap();
        let dst = TempDir::new().unwrap();
        png(&src.path().join("01/train/ok/000.png"), 0.5);
        png(&src.path().join("01/train/ok/001.png"), 0.5);
        png(&src.path().join("01/test/ok/000.png"), 0.5);
        png(&src.path().join("01/test/ko/000.png"), 0.9);
        mask_png(&src.path().join("01/ground_truth/ko/000.png"));
        convert_btad(src.path(), dst.path()).unwrap();
        let train = load_category::<f32>(dst.path(), "01", Split::Train).unwrap();
        assert_eq!(train.samples.len(), 2);
        let test = load_category::<f32>(dst.path(), "01", Split::Test).unwrap();
        assert_eq!(test.samples.len(), 2);
    }

    #[test]
    fn visa_without_split_csv_is_a_layout_error() {
        let src = TempDir::new().unwrap();
        let dst = TempDir::new().unwrap();
        assert!(matches!(
            convert_visa(src.path(), dst.path()).unwrap_err(),
            Error::DatasetLayout { .. }
        ));
    }
}
