use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetSplit, ImageSample, Label, Origin, GOOD};
use crate::error::{CpcError, Result};
use crate::raster::{self, Interpolation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub image_side: usize,
    pub interpolation: Interpolation,
}

fn layout_error(path: &Path, reason: impl Into<String>) -> CpcError {
    CpcError::DatasetLayout {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| layout_error(dir, format!("cannot list directory: {e}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

/// Reads `<root>/<class>/{train,test,ground_truth}` into a split, converting
/// to grayscale and resizing everything to `image_side` squared.
pub fn load_mvtec_class(root: &Path, class_name: &str, opts: LoadOptions) -> Result<DatasetSplit> {
    let class_dir = root.join(class_name);
    if !class_dir.is_dir() {
        return Err(layout_error(&class_dir, "class directory not found"));
    }
    let side = opts.image_side;
    let load_image = |path: &Path| -> Result<raster::GrayImage> {
        let img = raster::read_gray(path)?;
        Ok(raster::resize(&img, side, side, opts.interpolation))
    };

    let train_dir = class_dir.join("train").join(GOOD);
    if !train_dir.is_dir() {
        return Err(layout_error(&train_dir, "missing train/good"));
    }
    let mut train = Vec::new();
    for path in png_files(&train_dir)? {
        train.push(ImageSample {
            pixels: load_image(&path)?,
            label: Label::Normal,
            gt_mask: None,
            source_id: format!("{class_name}/train/{GOOD}/{}", stem(&path)),
            category: GOOD.to_string(),
            origin: Origin::Train,
        });
    }

    let test_dir = class_dir.join("test");
    if !test_dir.is_dir() {
        return Err(layout_error(&test_dir, "missing test directory"));
    }
    let mut test = Vec::new();
    for category_dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
        let category = category_dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        for path in png_files(&category_dir)? {
            let name = stem(&path);
            let (label, gt_mask) = if category == GOOD {
                (Label::Normal, None)
            } else {
                let mask_path = class_dir
                    .join("ground_truth")
                    .join(&category)
                    .join(format!("{name}_mask.png"));
                if !mask_path.is_file() {
                    return Err(CpcError::MissingMask {
                        image: path.clone(),
                        expected: mask_path,
                    });
                }
                let mask = raster::read_mask(&mask_path)?;
                (Label::Anomalous, Some(raster::resize_mask(&mask, side, side)))
            };
            test.push(ImageSample {
                pixels: load_image(&path)?,
                label,
                gt_mask,
                source_id: format!("{class_name}/test/{category}/{name}"),
                category: category.clone(),
                origin: Origin::Test,
            });
        }
    }

    Ok(DatasetSplit {
        class_name: class_name.to_string(),
        train,
        test,
    })
}

/// Writes a split as 8-bit PNGs under `<root>/<class>/`.
pub fn write_mvtec_layout(split: &DatasetSplit, root: &Path) -> Result<PathBuf> {
    let class_dir = root.join(&split.class_name);
    for s in &split.train {
        raster::write_gray_png(
            &s.pixels,
            &class_dir.join("train").join(GOOD).join(format!("{}.png", s.stem())),
        )?;
    }
    for s in &split.test {
        raster::write_gray_png(
            &s.pixels,
            &class_dir.join("test").join(&s.category).join(format!("{}.png", s.stem())),
        )?;
        if let Some(mask) = &s.gt_mask {
            raster::write_mask_png(
                mask,
                &class_dir
                    .join("ground_truth")
                    .join(&s.category)
                    .join(format!("{}_mask.png", s.stem())),
            )?;
        }
    }
    // Keep empty categories visible so the layout is always complete.
    for dir in [class_dir.join("train").join(GOOD), class_dir.join("test").join(GOOD)] {
        fs::create_dir_all(&dir).map_err(|e| CpcError::io(&dir, e))?;
    }
    Ok(class_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{BinaryMask, GrayImage};

    fn opts(side: usize) -> LoadOptions {
        LoadOptions {
            image_side: side,
            interpolation: Interpolation::Bilinear,
        }
    }

    fn write(path: &Path, img: &GrayImage) {
        raster::write_gray_png(img, path).unwrap();
    }

    #[test]
    fn mini_layout_counts() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("widget");
        for i in 0..3 {
            write(&c.join(format!("train/good/{i:03}.png")), &GrayImage::filled(20, 20, 0.5));
        }
        write(&c.join("test/good/000.png"), &GrayImage::filled(20, 20, 0.5));
        write(&c.join("test/crack/000.png"), &GrayImage::filled(20, 20, 0.1));
        let mut m = BinaryMask::zeros(20, 20);
        m.set(3, 4, true);
        raster::write_mask_png(&m, &c.join("ground_truth/crack/000_mask.png")).unwrap();

        let split = load_mvtec_class(dir.path(), "widget", opts(16)).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (3, 2));
        assert_eq!(split.test.iter().filter(|s| s.gt_mask.is_some()).count(), 1);
        assert_eq!(split.anomalous_count(), 1);
        assert!(split.train.iter().all(|s| s.pixels.height() == 16 && s.pixels.width() == 16));
        split.validate().unwrap();
        let anomalous = split.test.iter().find(|s| s.label == Label::Anomalous).unwrap();
        assert_eq!(anomalous.image_id(), "widget/crack/000");
    }

    #[test]
    fn good_only_class_has_no_masks() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("plain");
        write(&c.join("train/good/a.png"), &GrayImage::filled(8, 8, 0.2));
        write(&c.join("test/good/b.png"), &GrayImage::filled(8, 8, 0.2));
        let split = load_mvtec_class(dir.path(), "plain", opts(8)).unwrap();
        assert_eq!(split.anomalous_count(), 0);
        assert!(split.test.iter().all(|s| s.gt_mask.is_none()));
    }

    #[test]
    fn layout_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_mvtec_class(dir.path(), "absent", opts(8)),
            Err(CpcError::DatasetLayout { .. })
        ));
        let c = dir.path().join("nomask");
        write(&c.join("train/good/a.png"), &GrayImage::filled(8, 8, 0.2));
        write(&c.join("test/hole/a.png"), &GrayImage::filled(8, 8, 0.2));
        assert!(matches!(
            load_mvtec_class(dir.path(), "nomask", opts(8)),
            Err(CpcError::MissingMask { .. })
        ));
        let c = dir.path().join("broken");
        fs::create_dir_all(c.join("test/good")).unwrap();
        fs::create_dir_all(c.join("train/good")).unwrap();
        fs::write(c.join("train/good/x.png"), b"not a png").unwrap();
        assert!(matches!(
            load_mvtec_class(dir.path(), "broken", opts(8)),
            Err(CpcError::ImageDecode { .. })
        ));
    }

    #[test]
    fn masks_are_resized_nearest_and_binary() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("m");
        write(&c.join("train/good/a.png"), &GrayImage::filled(40, 40, 0.2));
        write(&c.join("test/dent/a.png"), &GrayImage::filled(40, 40, 0.2));
        let mut m = BinaryMask::zeros(40, 40);
        for y in 10..30 {
            for x in 0..20 {
                m.set(y, x, true);
            }
        }
        raster::write_mask_png(&m, &c.join("ground_truth/dent/a_mask.png")).unwrap();
        let split = load_mvtec_class(dir.path(), "m", opts(20)).unwrap();
        let mask = split.test[0].gt_mask.as_ref().unwrap();
        assert_eq!(mask.count_positive(), 100);
        assert!(mask.data().iter().all(|&v| v <= 1));
    }
}
