//! Boxes, labeled images, label files, split schedules and dataset loading.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Normalized object rectangle. Centers and extents are fractions of the image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { class_id, cx, cy, w, h }
    }

    /// Builds a box from corner coordinates `(x0, y0, x1, y1)`.
    pub fn from_corners(class_id: u32, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { class_id, cx: 0.5 * (x0 + x1), cy: 0.5 * (y0 + y1), w: x1 - x0, h: y1 - y0 }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation("box", "non-finite coordinate"));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(Error::validation("box", format!("center ({}, {}) outside [0,1]", self.cx, self.cy)));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(Error::validation("box", format!("extent ({}, {}) outside (0,1]", self.w, self.h)));
        }
        Ok(())
    }

    /// Mirror across the vertical image axis.
    pub fn flipped_horizontal(&self) -> Self {
        Self { cx: 1.0 - self.cx, ..*self }
    }

    /// Clips to the unit square. Returns `None` when nothing of the box remains.
    pub fn clipped(&self) -> Option<Self> {
        let (x0, y0, x1, y1) = self.corners();
        let (x0, y0) = (x0.clamp(0.0, 1.0), y0.clamp(0.0, 1.0));
        let (x1, y1) = (x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        (x1 > x0 && y1 > y0).then(|| Self::from_corners(self.class_id, x0, y0, x1, y1))
    }
}

/// Image in model space (`[3, H, W]`, values in `[-1, 1]`) with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage<T> {
    /// Stable identifier, normally the file stem.
    pub id: String,
    pub pixels: Tensor<T>,
    /// `None` for unlabeled images; `Some(vec![])` for labeled images without objects.
    pub boxes: Option<Vec<BoundingBox>>,
    pub domain: String,
}

impl<T: Scalar> LabeledImage<T> {
    pub fn labeled(&self) -> bool {
        self.boxes.is_some()
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn boxes_or_empty(&self) -> &[BoundingBox] {
        self.boxes.as_deref().unwrap_or(&[])
    }

    pub fn without_labels(&self) -> Self {
        Self { boxes: None, ..self.clone() }
    }

    /// Mirrored image and boxes.
    pub fn flipped_horizontal(&self) -> Self {
        let c = self.pixels.shape()[0];
        let (h, w) = (self.pixels.shape()[1], self.pixels.shape()[2]);
        let src = self.pixels.data();
        let mut data = Vec::with_capacity(src.len());
        for ci in 0..c {
            for y in 0..h {
                let row = &src[(ci * h + y) * w..(ci * h + y + 1) * w];
                data.extend(row.iter().rev());
            }
        }
        Self {
            id: self.id.clone(),
            pixels: Tensor::from_vec(self.pixels.shape(), data),
            boxes: self.boxes.as_ref().map(|b| b.iter().map(BoundingBox::flipped_horizontal).collect()),
            domain: self.domain.clone(),
        }
    }

    /// Quantizes to 8-bit RGB.
    pub fn to_rgb8(&self) -> image::RgbImage {
        pixels_to_rgb8(&self.pixels)
    }
}

/// `[3, H, W]` (or `[1, 3, H, W]`) model-space tensor to 8-bit RGB.
pub fn pixels_to_rgb8<T: Scalar>(pixels: &Tensor<T>) -> image::RgbImage {
    let shape = pixels.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let d = pixels.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = d[(c * h + y as usize) * w + x as usize].to_f64_lossy();
            (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// 8-bit RGB to a `[3, H, W]` tensor with `v -> 2 v / 255 - 1`.
pub fn rgb8_to_pixels<T: Scalar>(img: &image::RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = cast(2.0 * (p.0[c] as f64 / 255.0) - 1.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Parses a label file: one `class cx cy w h` line per object.
pub fn parse_label_file(text: &str) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(Error::LabelParse { line: line_no, reason: format!("expected 5 fields, found {}", fields.len()) });
        }
        let class_id: u32 = fields[0]
            .parse()
            .map_err(|_| Error::LabelParse { line: line_no, reason: format!("bad class id `{}`", fields[0]) })?;
        let mut vals = [0.0f64; 4];
        for (v, tok) in vals.iter_mut().zip(&fields[1..]) {
            *v = tok
                .parse()
                .map_err(|_| Error::LabelParse { line: line_no, reason: format!("non-numeric token `{tok}`") })?;
        }
        let b = BoundingBox::new(class_id, vals[0], vals[1], vals[2], vals[3]);
        b.validate().map_err(|e| Error::LabelParse { line: line_no, reason: e.to_string() })?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn serialize_labels(boxes: &[BoundingBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        writeln!(out, "{} {:.8} {:.8} {:.8} {:.8}", b.class_id, b.cx, b.cy, b.w, b.h).unwrap();
    }
    out
}

/// Train/valid split of `k` labeled target images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSchedule {
    pub k: usize,
    pub a: usize,
    pub b: usize,
}

/// Published `(a, b, k)` rows used verbatim.
pub const PUBLISHED_SCHEDULE: [(usize, usize, usize); 8] =
    [(1, 1, 2), (4, 1, 5), (8, 1, 9), (12, 2, 14), (16, 3, 19), (24, 6, 30), (32, 8, 40), (40, 10, 50)];

pub fn split_schedule(k: usize) -> Result<SplitSchedule> {
    if k < 2 {
        return Err(Error::validation("k", format!("need at least 2 labeled images, got {k}")));
    }
    if let Some(&(a, b, _)) = PUBLISHED_SCHEDULE.iter().find(|r| r.2 == k) {
        return Ok(SplitSchedule { k, a, b });
    }
    let mut a = ((0.8 * k as f64).floor() as usize).max(1);
    if k - a < 1 {
        a -= 1;
    }
    Ok(SplitSchedule { k, a, b: k - a })
}

/// Default k values, one per published row.
pub fn default_k_list() -> Vec<usize> {
    PUBLISHED_SCHEDULE.iter().map(|r| r.2).collect()
}

/// Lists `images/*.png` stems in lexicographic order.
pub fn list_image_stems(dir: &Path) -> Result<Vec<String>> {
    let images = dir.join("images");
    let rd = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut stems = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(&images, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn read_rgb8(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

/// Loads a dataset directory (`images/*.png`, `labels/*.txt`).
pub fn load_domain<T: Scalar>(dir: &Path, labeled: bool) -> Result<Vec<LabeledImage<T>>> {
    let domain = read_manifest_style(dir).unwrap_or_else(|| {
        dir.file_name().and_then(|s| s.to_str()).unwrap_or("unknown").to_string()
    });
    let mut out = Vec::new();
    let mut size = None;
    for stem in list_image_stems(dir)? {
        let img_path = dir.join("images").join(format!("{stem}.png"));
        let rgb = read_rgb8(&img_path)?;
        if rgb.width() != rgb.height() {
            return Err(Error::validation("image", format!("{} is not square", img_path.display())));
        }
        match size {
            None => size = Some(rgb.width()),
            Some(s) if s != rgb.width() => {
                return Err(Error::validation("image", format!("{} has size {}, expected {s}", img_path.display(), rgb.width())))
            }
            _ => {}
        }
        let boxes = if labeled {
            let lp = dir.join("labels").join(format!("{stem}.txt"));
            let text = fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
            Some(parse_label_file(&text).map_err(|e| match e {
                Error::LabelParse { line, reason } => {
                    Error::LabelParse { line, reason: format!("{}: {reason}", lp.display()) }
                }
                other => other,
            })?)
        } else {
            None
        };
        out.push(LabeledImage { id: stem, pixels: rgb8_to_pixels(&rgb), boxes, domain: domain.clone() });
    }
    Ok(out)
}

fn read_manifest_style(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join("manifest.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("style")?.as_str().map(str::to_string)
}
