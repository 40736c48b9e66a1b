//! Image/mask directories: `<root>/images/<id>.<ext>` paired with
//! `<root>/masks/<id>.<ext>` by file stem. Images and masks are 8-bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if stem.starts_with('.') {
            continue;
        }
        if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
            return Err(Error::InvalidArgument(format!(
                "{} and {} share the basename {stem:?}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Resamples `[C,H,W]` planes with bilinear interpolation on half-pixel
/// centres.
pub fn resample_bilinear(data: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let taps = |len: usize, out: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(len - 1);
                let hi = (lo + 1).min(len - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Nearest-neighbour resampling of one `[H,W]` plane: output pixel `o`
/// reads source `floor((o + 0.5) * len / out)`.
pub fn resample_nearest(data: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let pick = |o: usize, len: usize, out: usize| (((o as f64 + 0.5) * len as f64 / out as f64) as usize).min(len - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = pick(y, h, oh);
        for x in 0..ow {
            out.push(data[sy * w + pick(x, w, ow)]);
        }
    }
    out
}

fn image_planes(img: &DynamicImage) -> (usize, Vec<f64>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let mut planes = vec![0.0; 3 * h * w];
        for (i, px) in rgb.pixels().enumerate() {
            for ch in 0..3 {
                planes[ch * h * w + i] = px[ch] as f64 / 255.0;
            }
        }
        (3, planes)
    } else {
        (1, img.to_luma8().pixels().map(|p| p[0] as f64 / 255.0).collect())
    }
}

/// Loads paired images and masks sorted by basename. With `target_size`
/// `(height, width)`, images are resampled bilinearly and masks by nearest
/// neighbour; masks are thresholded at 0.5 after rescaling to `[0,1]`.
pub fn load_image_dir<T: Scalar>(
    images_path: &Path,
    masks_path: &Path,
    target_size: Option<(usize, usize)>,
) -> Result<Vec<Sample<T>>> {
    let images = list_by_stem(images_path)?;
    let masks = list_by_stem(masks_path)?;
    let orphans: Vec<String> = images
        .iter()
        .filter(|(k, _)| !masks.contains_key(*k))
        .chain(masks.iter().filter(|(k, _)| !images.contains_key(*k)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::InvalidArgument(format!("unpaired files: {}", orphans.join(", "))));
    }

    let mut out = Vec::with_capacity(images.len());
    for (id, image_path) in &images {
        let img = open(image_path)?;
        let mask_img = open(&masks[id])?;
        let (h, w) = (img.height() as usize, img.width() as usize);
        if (mask_img.height() as usize, mask_img.width() as usize) != (h, w) {
            return Err(Error::Incompatible(format!(
                "{id}: image is {h}x{w} but mask is {}x{}",
                mask_img.height(),
                mask_img.width()
            )));
        }
        let (c, planes) = image_planes(&img);
        let mask: Vec<f64> = mask_img.to_luma8().pixels().map(|p| p[0] as f64 / 255.0).collect();
        let (oh, ow) = target_size.unwrap_or((h, w));
        let (planes, mask) = if (oh, ow) == (h, w) {
            (planes, mask)
        } else {
            (resample_bilinear(&planes, c, h, w, oh, ow), resample_nearest(&mask, h, w, oh, ow))
        };
        let image = Tensor::new(vec![c, oh, ow], planes.into_iter().map(T::lit).collect())?;
        let mask = Tensor::new(
            vec![1, oh, ow],
            mask.into_iter().map(|v| if v >= 0.5 { T::one() } else { T::zero() }).collect(),
        )?;
        out.push(Sample::new(image, mask, id.clone())?);
    }
    if let Some(first) = out.first() {
        let c = first.channels();
        if let Some(odd) = out.iter().find(|s| s.channels() != c) {
            return Err(Error::Incompatible(format!(
                "{} has {} channels, {} has {c}",
                odd.id,
                odd.channels(),
                first.id
            )));
        }
    }
    Ok(out)
}

/// [`load_image_dir`] on `<root>/images` and `<root>/masks`.
pub fn load_dataset_dir<T: Scalar>(root: &Path, target_size: Option<(usize, usize)>) -> Result<Vec<Sample<T>>> {
    load_image_dir(&root.join("images"), &root.join("masks"), target_size)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one `[H,W]` plane of values in `[0,1]` as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape(
            "save_gray_png",
            format!("{} values for a {height}x{width} image", values.len()),
        ));
    }
    let img: GrayImage = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        Luma([to_byte(values[y as usize * width + x as usize])])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes samples as PNGs under `<root>/images` and `<root>/masks`.
pub fn export_dataset<T: Scalar>(samples: &[Sample<T>], root: &Path) -> Result<()> {
    let (images_dir, masks_dir) = (root.join("images"), root.join("masks"));
    for dir in [&images_dir, &masks_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in samples {
        let (c, h, w) = (s.channels(), s.height(), s.width());
        let px = |ch: usize, y: usize, x: usize| to_byte(s.image.data()[(ch * h + y) * w + x].as_f64());
        let image_path = images_dir.join(format!("{}.png", s.id));
        let saved = if c == 3 {
            let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])
            });
            img.save(&image_path)
        } else if c == 1 {
            let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([px(0, y as usize, x as usize)]));
            img.save(&image_path)
        } else {
            return Err(Error::Incompatible(format!(
                "{}: only 1- or 3-channel images can be exported, got {c}",
                s.id
            )));
        };
        saved.map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?;
        let mask_path = masks_dir.join(format!("{}.png", s.id));
        let mask: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([to_byte(s.mask.data()[y as usize * w + x as usize].as_f64())])
        });
        mask.save(&mask_path).map_err(|source| Error::Image {
            path: mask_path.clone(),
            source,
        })?;
    }
    Ok(())
}
