use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semgan::eval::{semantic_consistency_score, HueBand};
use semgan::scenegen::{generate_dataset, render_scene, DomainStyle, SceneSpec, StyleName};
use semgan::Error;

fn files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "labels"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        out.extend(names.into_iter().map(|p| (p.display().to_string(), std::fs::read(&p).unwrap())));
    }
    out.push(("manifest".into(), std::fs::read(dir.join("manifest.json")).unwrap()));
    out
}

#[test]
fn rendering_is_a_pure_function_of_the_spec() {
    let spec = SceneSpec::new(StyleName::NightLike, 77);
    let (a, b) = (render_scene(&spec).unwrap(), render_scene(&spec).unwrap());
    assert_eq!(a.image.as_raw(), b.image.as_raw());
    assert_eq!(a.boxes, b.boxes);
    assert_ne!(render_scene(&spec.with_seed(78)).unwrap().image.as_raw(), a.image.as_raw());
}

#[test]
fn cluster_count_controls_box_count() {
    let mut spec = SceneSpec::new(StyleName::Synthetic, 5);
    spec.cluster_count_range = [0, 0];
    assert!(render_scene(&spec).unwrap().boxes.is_empty());

    spec.cluster_count_range = [3, 3];
    for seed in 0..20 {
        let scene = render_scene(&spec.with_seed(seed)).unwrap();
        let emitted: Vec<_> = scene.placements.iter().filter(|p| p.emitted).collect();
        assert_eq!(scene.placements.len(), 3);
        assert_eq!(scene.boxes.len(), emitted.len());
        let inside = scene.placements.iter().all(|p| {
            p.center[0] - p.radius >= 0.0 && p.center[0] + p.radius <= 1.0 && p.center[1] - p.radius >= 0.0 && p.center[1] + p.radius <= 1.0
        });
        if inside {
            assert_eq!(scene.boxes.len(), 3, "seed {seed}");
        }
        for b in &scene.boxes {
            assert!(b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0);
            b.validate().unwrap();
        }
    }
}

#[test]
fn boxes_are_tight_around_cluster_pixels() {
    let band = HueBand::default();
    for seed in 0..10 {
        let scene = render_scene(&SceneSpec::new(StyleName::Synthetic, seed)).unwrap();
        let side = scene.image.width() as f64;
        for b in &scene.boxes {
            let (x0, y0, x1, y1) = b.corners();
            let (px0, py0) = ((x0 * side).round() as u32, (y0 * side).round() as u32);
            let (px1, py1) = ((x1 * side).round() as u32 - 1, (y1 * side).round() as u32 - 1);
            let hit = |x: u32, y: u32| {
                let xs = x.saturating_sub(1)..=(x + 1).min(px1);
                xs.clone().any(|xx| (y.saturating_sub(1)..=(y + 1).min(py1)).any(|yy| band.contains(scene.image.get_pixel(xx, yy).0)))
            };
            assert!((px0..=px1).any(|x| hit(x, py0)), "top edge, seed {seed}");
            assert!((px0..=px1).any(|x| hit(x, py1)), "bottom edge, seed {seed}");
            assert!((py0..=py1).any(|y| hit(px0, y)), "left edge, seed {seed}");
            assert!((py0..=py1).any(|y| hit(px1, y)), "right edge, seed {seed}");
        }
    }
}

#[test]
fn night_renders_are_darker_than_day_renders() {
    let mean = |style, seed| {
        let s = render_scene(&SceneSpec::new(style, seed)).unwrap();
        s.image.as_raw().iter().map(|&v| v as f64).sum::<f64>() / s.image.as_raw().len() as f64
    };
    for seed in 0..20 {
        assert!(mean(StyleName::NightLike, seed) < mean(StyleName::DayLike, seed));
    }
    assert!(DomainStyle::preset(StyleName::NightLike).brightness < DomainStyle::preset(StyleName::DayLike).brightness);
}

#[test]
fn invalid_specs_name_the_field() {
    let mut spec = SceneSpec::new(StyleName::Synthetic, 0);
    spec.canvas_size = 48;
    assert!(matches!(render_scene(&spec), Err(Error::Validation { field, .. }) if field.contains("canvas_size")));
    let mut spec = SceneSpec::new(StyleName::Synthetic, 0);
    spec.cluster_radius_range = [0.2, 0.6];
    assert!(matches!(render_scene(&spec), Err(Error::Validation { field, .. }) if field.contains("radius")));
    let mut spec = SceneSpec::new(StyleName::Synthetic, 0);
    spec.cluster_count_range = [3, 1];
    assert!(matches!(render_scene(&spec), Err(Error::Validation { field, .. }) if field.contains("cluster_count")));
}

#[test]
fn datasets_regenerate_byte_identically() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = SceneSpec::new(StyleName::Synthetic, 100);
    let m = generate_dataset(&spec, 5, d1.path()).unwrap();
    generate_dataset(&spec, 5, d2.path()).unwrap();
    assert_eq!(m.entries.len(), 5);
    assert_eq!(m.entries[3].seed, 103);
    let (f1, f2) = (files(d1.path()), files(d2.path()));
    assert_eq!(f1.len(), 11);
    assert!(f1.iter().zip(&f2).all(|(a, b)| a.1 == b.1));
    assert!(matches!(generate_dataset(&spec, 0, d1.path()), Err(Error::Validation { .. })));
}

#[test]
fn consistency_oracle_separates_faithful_from_broken_translations() {
    let band = HueBand::default();
    let scenes: Vec<_> = (0..20).map(|s| render_scene(&SceneSpec::new(StyleName::Synthetic, 500 + s)).unwrap()).collect();
    let labels: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
    let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
    assert!(semantic_consistency_score(&images, &labels, &band).unwrap() >= 0.9);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise: Vec<_> = images
        .iter()
        .map(|i| image::RgbImage::from_fn(i.width(), i.height(), |_, _| image::Rgb([rng.random(), rng.random(), rng.random()])))
        .collect();
    assert!(semantic_consistency_score(&noise, &labels, &band).unwrap() < 0.1);

    let shifted: Vec<_> = images
        .iter()
        .map(|i| {
            let (w, h) = (i.width(), i.height());
            image::RgbImage::from_fn(w, h, |x, y| *i.get_pixel((x + w / 2) % w, (y + h / 2) % h))
        })
        .collect();
    assert!(semantic_consistency_score(&shifted, &labels, &band).unwrap() < 0.1);
}
