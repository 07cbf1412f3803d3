//! Procedural vineyard-like scenes in three visual styles.
//!
//! A scene is a layered background texture with leaf blobs, over which
//! clusters of purple "berries" are painted. Every cluster is grown from
//! overlapping discs, so its pixels form one connected region whose tight
//! bounds become the label. Rendering is a pure function of [`SceneSpec`].

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{rgb8_to_pixels, serialize_labels, BoundingBox, LabeledImage};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleName {
    Synthetic,
    DayLike,
    NightLike,
}

impl StyleName {
    pub fn as_str(&self) -> &'static str {
        match self {
            StyleName::Synthetic => "synthetic",
            StyleName::DayLike => "day_like",
            StyleName::NightLike => "night_like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(StyleName::Synthetic),
            "day_like" | "day" => Ok(StyleName::DayLike),
            "night_like" | "night" => Ok(StyleName::NightLike),
            other => Err(Error::validation("style", format!("unknown style `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: StyleName,
    /// Background colors, RGB in `[0, 1]`, blended along the texture value.
    pub background_palette: Vec<[f64; 3]>,
    pub brightness: f64,
    /// Per-channel Gaussian noise std in intensity units (`[0, 1]` scale).
    pub noise_sigma: f64,
    pub vignette_strength: f64,
    /// Texture cycles per image side.
    pub texture_frequency: f64,
}

impl DomainStyle {
    pub fn preset(name: StyleName) -> Self {
        match name {
            StyleName::Synthetic => Self {
                name,
                background_palette: vec![[0.36, 0.62, 0.26], [0.48, 0.72, 0.32], [0.60, 0.52, 0.32]],
                brightness: 0.85,
                noise_sigma: 0.0,
                vignette_strength: 0.0,
                texture_frequency: 2.0,
            },
            StyleName::DayLike => Self {
                name,
                background_palette: vec![[0.30, 0.45, 0.16], [0.62, 0.66, 0.30], [0.82, 0.76, 0.50]],
                brightness: 0.95,
                noise_sigma: 0.03,
                vignette_strength: 0.1,
                texture_frequency: 5.0,
            },
            StyleName::NightLike => Self {
                name,
                background_palette: vec![[0.04, 0.10, 0.10], [0.10, 0.20, 0.17], [0.22, 0.26, 0.20]],
                brightness: 0.35,
                noise_sigma: 0.04,
                vignette_strength: 0.6,
                texture_frequency: 7.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.background_palette.is_empty() {
            return Err(Error::validation("style.background_palette", "empty palette"));
        }
        if self.background_palette.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::validation("style.background_palette", "channel values must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.brightness) {
            return Err(Error::validation("style.brightness", "must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation("style.noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.vignette_strength) {
            return Err(Error::validation("style.vignette_strength", "must lie in [0, 1]"));
        }
        if !(self.texture_frequency > 0.0 && self.texture_frequency.is_finite()) {
            return Err(Error::validation("style.texture_frequency", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas_size: usize,
    pub cluster_count_range: [usize; 2],
    /// Cluster radius as a fraction of the canvas side.
    pub cluster_radius_range: [f64; 2],
    pub berries_per_cluster_range: [usize; 2],
    pub style: DomainStyle,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(style: StyleName, seed: u64) -> Self {
        Self {
            canvas_size: 64,
            cluster_count_range: [1, 4],
            cluster_radius_range: [0.07, 0.14],
            berries_per_cluster_range: [8, 20],
            style: DomainStyle::preset(style),
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_size < 8 || !self.canvas_size.is_power_of_two() {
            return Err(Error::validation("canvas_size", format!("{} is not a power of two >= 8", self.canvas_size)));
        }
        let [lo, hi] = self.cluster_count_range;
        if lo > hi {
            return Err(Error::validation("cluster_count_range", format!("[{lo}, {hi}] is empty")));
        }
        let [rlo, rhi] = self.cluster_radius_range;
        if !(rlo > 0.0 && rlo <= rhi && rhi <= 0.5) {
            return Err(Error::validation("cluster_radius_range", format!("[{rlo}, {rhi}] must satisfy 0 < lo <= hi <= 0.5")));
        }
        let [blo, bhi] = self.berries_per_cluster_range;
        if blo > bhi {
            return Err(Error::validation("berries_per_cluster_range", format!("[{blo}, {bhi}] is empty")));
        }
        self.style.validate()
    }
}

/// Generator-side record of one cluster, for auditing labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlacement {
    /// Center and radius in pixels.
    pub center: [f64; 2],
    pub radius: f64,
    /// Berry discs `(x, y, r)` in pixels.
    pub berries: Vec<[f64; 3]>,
    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of painted pixels inside the canvas.
    pub pixel_bounds: Option<[usize; 4]>,
    pub visible_pixels: usize,
    pub emitted: bool,
}

#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub image: image::RgbImage,
    pub boxes: Vec<BoundingBox>,
    pub placements: Vec<ClusterPlacement>,
}

impl RenderedScene {
    pub fn to_labeled<T: Scalar>(&self, id: impl Into<String>, domain: impl Into<String>) -> LabeledImage<T> {
        LabeledImage {
            id: id.into(),
            pixels: rgb8_to_pixels(&self.image),
            boxes: Some(self.boxes.clone()),
            domain: domain.into(),
        }
    }
}

/// Clusters with fewer visible pixels than this emit no label.
pub const MIN_VISIBLE_PIXELS: usize = 4;

const BERRY_BASE: [f64; 3] = [0.44, 0.13, 0.50];
const BERRY_HIGHLIGHT: [f64; 3] = [0.66, 0.40, 0.74];

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn palette_at(palette: &[[f64; 3]], t: f64) -> [f64; 3] {
    if palette.len() == 1 {
        return palette[0];
    }
    let pos = t.clamp(0.0, 1.0) * (palette.len() - 1) as f64;
    let i = (pos.floor() as usize).min(palette.len() - 2);
    lerp3(palette[i], palette[i + 1], pos - i as f64)
}

fn grow_cluster(rng: &mut ChaCha8Rng, center: [f64; 2], radius: f64, count: usize) -> Vec<[f64; 3]> {
    let berry_r = (0.34 * radius).max(1.3);
    let mut berries: Vec<[f64; 3]> = Vec::with_capacity(count);
    if count == 0 {
        return berries;
    }
    berries.push([center[0], center[1] - 0.3 * radius, berry_r]);
    while berries.len() < count {
        let parent = berries[rng.random_range(0..berries.len())];
        // bunches hang downward
        let angle = rng.random_range(0.1..std::f64::consts::PI - 0.1) + rng.random_range(-0.9..0.9);
        let dist = berry_r * rng.random_range(0.8..1.3);
        let r = berry_r * rng.random_range(0.8..1.1);
        let (x, y) = (parent[0] + dist * angle.cos(), parent[1] + dist * angle.sin());
        let off = ((x - center[0]).powi(2) + (y - center[1]).powi(2)).sqrt();
        if off + r <= radius * 1.25 {
            berries.push([x, y, r]);
        } else {
            // reject, but keep the RNG stream consumption bounded
            berries.push([parent[0], parent[1], r.min(parent[2])]);
        }
    }
    berries
}

/// Renders one scene. Pure in `spec`.
pub fn render_scene(spec: &SceneSpec) -> Result<RenderedScene> {
    spec.validate()?;
    let n = spec.canvas_size;
    let nf = n as f64;
    let style = &spec.style;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // background texture: two oriented sinusoids blended through the palette
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|i| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = style.texture_frequency * if i == 0 { 1.0 } else { 1.7 };
            (theta.cos(), theta.sin(), phase, freq)
        })
        .collect();
    let mut buf = vec![[0.0f64; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / nf, (y as f64 + 0.5) / nf);
            let t = 0.5
                + waves
                    .iter()
                    .map(|&(c, s, ph, f)| 0.25 * (std::f64::consts::TAU * f * (u * c + v * s) + ph).sin())
                    .sum::<f64>();
            buf[y * n + x] = palette_at(&style.background_palette, t);
        }
    }

    // leaf blobs
    let leaves = rng.random_range(3..=7);
    for _ in 0..leaves {
        let (cx, cy) = (rng.random_range(0.0..nf), rng.random_range(0.0..nf));
        let (rx, ry) = (rng.random_range(0.06..0.16) * nf, rng.random_range(0.04..0.10) * nf);
        let rot = rng.random_range(0.0..std::f64::consts::PI);
        let color = palette_at(&style.background_palette, rng.random_range(0.0..1.0));
        let gain = rng.random_range(0.75..1.2);
        let (cr, sr) = (rot.cos(), rot.sin());
        let reach = rx.max(ry).ceil() as i64 + 1;
        for py in (cy as i64 - reach).max(0)..(cy as i64 + reach).min(n as i64) {
            for px in (cx as i64 - reach).max(0)..(cx as i64 + reach).min(n as i64) {
                let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
                let (a, b) = (dx * cr + dy * sr, -dx * sr + dy * cr);
                if (a / rx).powi(2) + (b / ry).powi(2) <= 1.0 {
                    buf[py as usize * n + px as usize] = color.map(|c| (c * gain).min(1.0));
                }
            }
        }
    }

    // lighting on background
    let vignette = |x: usize, y: usize, strength: f64| {
        let (dx, dy) = ((x as f64 + 0.5) / nf - 0.5, (y as f64 + 0.5) / nf - 0.5);
        1.0 - strength * (dx * dx + dy * dy) / 0.5
    };
    for y in 0..n {
        for x in 0..n {
            let g = style.brightness * vignette(x, y, style.vignette_strength);
            buf[y * n + x] = buf[y * n + x].map(|c| c * g);
        }
    }

    // clusters
    let [clo, chi] = spec.cluster_count_range;
    let clusters = rng.random_range(clo..=chi);
    let berry_gain = 0.55 + 0.45 * style.brightness;
    let mut placements = Vec::with_capacity(clusters);
    let mut boxes = Vec::new();
    for _ in 0..clusters {
        let radius = rng.random_range(spec.cluster_radius_range[0]..=spec.cluster_radius_range[1]) * nf;
        let center = [rng.random_range(0.0..nf), rng.random_range(0.0..nf)];
        let count = rng.random_range(spec.berries_per_cluster_range[0]..=spec.berries_per_cluster_range[1]);
        let berries = grow_cluster(&mut rng, center, radius, count);
        let mut bounds: Option<[usize; 4]> = None;
        let mut painted = vec![false; n * n];
        for b in &berries {
            let shade = rng.random_range(0.85..1.1);
            let [bx, by, br] = *b;
            for py in ((by - br).floor().max(0.0) as usize)..((by + br).ceil().min(nf) as usize) {
                for px in ((bx - br).floor().max(0.0) as usize)..((bx + br).ceil().min(nf) as usize) {
                    let (dx, dy) = (px as f64 + 0.5 - bx, py as f64 + 0.5 - by);
                    let d2 = (dx * dx + dy * dy) / (br * br);
                    if d2 > 1.0 {
                        continue;
                    }
                    // highlight toward the upper-left, darker rim
                    let hl = (1.0 - ((dx + 0.35 * br).powi(2) + (dy + 0.35 * br).powi(2)) / (0.5 * br * br)).max(0.0);
                    let rim = 1.0 - 0.3 * d2;
                    let base = lerp3(BERRY_BASE, BERRY_HIGHLIGHT, 0.7 * hl);
                    let light = berry_gain * shade * rim * vignette(px, py, 0.5 * style.vignette_strength);
                    buf[py * n + px] = base.map(|c| (c * light).clamp(0.0, 1.0));
                    painted[py * n + px] = true;
                    bounds = Some(match bounds {
                        None => [px, py, px, py],
                        Some([x0, y0, x1, y1]) => [x0.min(px), y0.min(py), x1.max(px), y1.max(py)],
                    });
                }
            }
        }
        let visible = painted.iter().filter(|p| **p).count();
        let emitted = visible >= MIN_VISIBLE_PIXELS;
        if let (true, Some([x0, y0, x1, y1])) = (emitted, bounds) {
            boxes.push(BoundingBox::from_corners(
                0,
                x0 as f64 / nf,
                y0 as f64 / nf,
                (x1 + 1) as f64 / nf,
                (y1 + 1) as f64 / nf,
            ));
        }
        placements.push(ClusterPlacement { center, radius, berries, pixel_bounds: bounds, visible_pixels: visible, emitted });
    }

    let noise = Normal::new(0.0, style.noise_sigma.max(1e-12)).unwrap();
    let image = image::RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let c = buf[y as usize * n + x as usize];
        let px = c.map(|v| {
            let v = if style.noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { v };
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        });
        image::Rgb(px)
    });
    Ok(RenderedScene { image, boxes, placements })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub labels: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub style: String,
    pub canvas_size: usize,
    pub entries: Vec<ManifestEntry>,
}

pub fn image_stem(index: usize) -> String {
    format!("img_{index:05}")
}

/// Writes `count` rendered scenes (image `i` uses seed `spec.seed + i`) with
/// label files and a manifest.
pub fn generate_dataset(spec: &SceneSpec, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::validation("count", "must be positive"));
    }
    spec.validate()?;
    let images = out_dir.join("images");
    let labels = out_dir.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let seed = spec.seed.wrapping_add(i as u64);
        let scene = render_scene(&spec.with_seed(seed))?;
        let stem = image_stem(i);
        let img_path = images.join(format!("{stem}.png"));
        scene.image.save(&img_path).map_err(|source| Error::Image { path: img_path.clone(), source })?;
        let lbl_path = labels.join(format!("{stem}.txt"));
        fs::write(&lbl_path, serialize_labels(&scene.boxes)).map_err(|e| Error::io(&lbl_path, e))?;
        entries.push(ManifestEntry { image: format!("images/{stem}.png"), labels: format!("labels/{stem}.txt"), seed });
    }
    let manifest = DatasetManifest { style: spec.style.name.as_str().to_string(), canvas_size: spec.canvas_size, entries };
    let mpath = out_dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Renders `count` scenes in memory, ids matching [`generate_dataset`] stems.
pub fn render_dataset<T: Scalar>(spec: &SceneSpec, count: usize) -> Result<Vec<LabeledImage<T>>> {
    (0..count)
        .map(|i| {
            let scene = render_scene(&spec.with_seed(spec.seed.wrapping_add(i as u64)))?;
            Ok(scene.to_labeled(image_stem(i), spec.style.name.as_str()))
        })
        .collect()
}
