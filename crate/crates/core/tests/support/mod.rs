//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semgan::gradcheck::{check_gradients, Evaluation, GradCheckOptions, GradCheckReport};
use semgan::losses::{adversarial_on_tape, l1_on_tape, task_on_tape, AdvForm, AdvRole, TaskLossWeights};
use semgan::nets::Detection;
use semgan::{
    ArchConfig, BoundingBox, DetectorConfig, DiscriminatorConfig, GeneratorConfig, NetworkHandle, Tape, Tensor, Var,
};

pub const SIDE: usize = 8;

pub fn small_generator(seed: u64) -> NetworkHandle<f64> {
    NetworkHandle::init(ArchConfig::Generator(GeneratorConfig { width: 4, res_blocks: 1 }), seed)
}

pub fn small_discriminator(seed: u64) -> NetworkHandle<f64> {
    NetworkHandle::init(ArchConfig::Discriminator(DiscriminatorConfig { width: 4, downsamples: 1 }), seed)
}

pub fn small_detector(seed: u64) -> NetworkHandle<f64> {
    NetworkHandle::init(ArchConfig::Detector(DetectorConfig { width: 4, stem_downsamples: 1, ..Default::default() }), seed)
}

pub fn random_images(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * SIDE * SIDE).map(|_| rng.random_range(-0.9..0.9)).collect();
    Tensor::from_vec(&[n, 3, SIDE, SIDE], data)
}

fn targets() -> Vec<Vec<BoundingBox>> {
    vec![
        vec![BoundingBox::new(0, 0.3, 0.35, 0.25, 0.3), BoundingBox::new(0, 0.7, 0.6, 0.35, 0.4)],
        vec![BoundingBox::new(0, 0.55, 0.45, 0.15, 0.2)],
    ]
}

/// Networks whose parameters are checked, in order, plus fixed helpers.
type Builder = Box<dyn Fn(&mut Tape<f64>, &[Vec<Var>]) -> semgan::Result<Var>>;

struct Scenario {
    checked: Vec<NetworkHandle<f64>>,
    build: Builder,
}

fn run(name: &str, s: Scenario, seed: u64) -> (String, GradCheckReport) {
    let shapes: Vec<usize> = s.checked.iter().map(|n| n.params.len()).collect();
    let mut params: Vec<Tensor<f64>> = s.checked.iter().flat_map(|n| n.params.clone()).collect();
    let opts = GradCheckOptions { samples: 120, seed, ..Default::default() };
    let report = check_gradients(&mut params, opts, |p, want| {
        let mut tape = Tape::new();
        let mut bound = Vec::new();
        let mut off = 0;
        for &n in &shapes {
            bound.push(p[off..off + n].iter().map(|t| tape.leaf(t.clone(), want)).collect::<Vec<_>>());
            off += n;
        }
        let loss = (s.build)(&mut tape, &bound)?;
        let value = tape.value(loss).item();
        let kinks = tape.kink_signature();
        let grads = want.then(|| {
            let g = tape.backward(loss);
            bound
                .iter()
                .flatten()
                .map(|&v| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
                .collect()
        });
        Ok(Evaluation { loss: value, kinks, grads })
    })
    .expect("objective evaluates");
    (name.to_string(), report)
}

/// Places a network's parameters on the tape as constants.
fn constants(net: &NetworkHandle<f64>, tape: &mut Tape<f64>) -> Vec<Var> {
    net.params.iter().map(|p| tape.leaf(p.clone(), false)).collect()
}

macro_rules! fwd {
    ($net:expr, $kind:ident, $tape:expr, $vars:expr, $x:expr) => {{
        let b = semgan::nets::Bound::from_vars($vars);
        $net.$kind($tape, &b, $x)?
    }};
}

/// Every gradient check: adversarial (both forms, both roles), cycle,
/// identity, detection task (detector and generator side) and the total
/// generator objective. Each report covers at least 100 coordinates.
pub fn gradient_reports() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    let xa = random_images(2, 11);
    let xb = random_images(2, 12);

    for form in [AdvForm::LeastSquares, AdvForm::LogForm] {
        let d = small_discriminator(3);
        let (real, fake) = (xb.clone(), random_images(2, 13));
        let dd = d.clone();
        out.push(run(
            &format!("adversarial/{form:?}/discriminator"),
            Scenario {
                checked: vec![d],
                build: Box::new(move |t, v| {
                    let r = t.leaf(real.clone(), false);
                    let f = t.leaf(fake.clone(), false);
                    let sr = fwd!(dd, discriminator_forward, t, &v[0], r);
                    let sf = fwd!(dd, discriminator_forward, t, &v[0], f);
                    adversarial_on_tape(t, Some(sr), sf, AdvRole::Discriminator, form)
                }),
            },
            1,
        ));

        let g = small_generator(4);
        let d = small_discriminator(5);
        let (gg, x) = (g.clone(), xa.clone());
        out.push(run(
            &format!("adversarial/{form:?}/generator"),
            Scenario {
                checked: vec![g],
                build: Box::new(move |t, v| {
                    let a = t.leaf(x.clone(), false);
                    let fake = fwd!(gg, generator_forward, t, &v[0], a);
                    let pd = constants(&d, t);
                    let s = fwd!(d, discriminator_forward, t, &pd, fake);
                    adversarial_on_tape(t, None, s, AdvRole::Generator, form)
                }),
            },
            2,
        ));
    }

    let (ga, gb) = (small_generator(6), small_generator(7));
    let (ga2, gb2, x_a, x_b) = (ga.clone(), gb.clone(), xa.clone(), xb.clone());
    out.push(run(
        "cycle",
        Scenario {
            checked: vec![ga.clone(), gb.clone()],
            build: Box::new(move |t, v| {
                let a = t.leaf(x_a.clone(), false);
                let b = t.leaf(x_b.clone(), false);
                let fb = fwd!(ga2, generator_forward, t, &v[0], a);
                let ra = fwd!(gb2, generator_forward, t, &v[1], fb);
                let fa = fwd!(gb2, generator_forward, t, &v[1], b);
                let rb = fwd!(ga2, generator_forward, t, &v[0], fa);
                let ca = l1_on_tape(t, a, ra)?;
                let cb = l1_on_tape(t, b, rb)?;
                Ok(t.lincomb(&[(ca, 1.0), (cb, 1.0)]))
            }),
        },
        3,
    ));

    let (ga2, gb2, x_a, x_b) = (ga.clone(), gb.clone(), xa.clone(), xb.clone());
    out.push(run(
        "identity",
        Scenario {
            checked: vec![ga.clone(), gb.clone()],
            build: Box::new(move |t, v| {
                let a = t.leaf(x_a.clone(), false);
                let b = t.leaf(x_b.clone(), false);
                let ib = fwd!(ga2, generator_forward, t, &v[0], b);
                let ia = fwd!(gb2, generator_forward, t, &v[1], a);
                let lb = l1_on_tape(t, ib, b)?;
                let la = l1_on_tape(t, ia, a)?;
                Ok(t.lincomb(&[(lb, 1.0), (la, 1.0)]))
            }),
        },
        4,
    ));

    let det = small_detector(8);
    let (det2, x) = (det.clone(), xa.clone());
    let cfg = match &det.arch {
        ArchConfig::Detector(c) => c.clone(),
        _ => unreachable!(),
    };
    let cfg2 = cfg.clone();
    out.push(run(
        "task/detector",
        Scenario {
            checked: vec![det.clone()],
            build: Box::new(move |t, v| {
                let a = t.leaf(x.clone(), false);
                let outs = fwd!(det2, detector_forward, t, &v[0], a);
                task_on_tape(t, outs, &cfg2, &targets(), &TaskLossWeights::default())
            }),
        },
        5,
    ));

    let frozen = det.clone().frozen();
    let (ga2, x, cfg2) = (ga.clone(), xa.clone(), cfg.clone());
    out.push(run(
        "task/generator",
        Scenario {
            checked: vec![ga.clone()],
            build: Box::new(move |t, v| {
                let a = t.leaf(x.clone(), false);
                let fb = fwd!(ga2, generator_forward, t, &v[0], a);
                let pd = constants(&frozen, t);
                let outs = fwd!(frozen, detector_forward, t, &pd, fb);
                task_on_tape(t, outs, &cfg2, &targets(), &TaskLossWeights::default())
            }),
        },
        6,
    ));

    let (da, db) = (small_discriminator(9), small_discriminator(10));
    let frozen = det.frozen();
    let (ga2, gb2) = (ga.clone(), gb.clone());
    out.push(run(
        "total",
        Scenario {
            checked: vec![ga, gb],
            build: Box::new(move |t, v| {
                let a = t.leaf(xa.clone(), false);
                let b = t.leaf(xb.clone(), false);
                let fb = fwd!(ga2, generator_forward, t, &v[0], a);
                let ra = fwd!(gb2, generator_forward, t, &v[1], fb);
                let fa = fwd!(gb2, generator_forward, t, &v[1], b);
                let rb = fwd!(ga2, generator_forward, t, &v[0], fa);
                let pdb = constants(&db, t);
                let pda = constants(&da, t);
                let sb = fwd!(db, discriminator_forward, t, &pdb, fb);
                let sa = fwd!(da, discriminator_forward, t, &pda, fa);
                let adv_ab = adversarial_on_tape(t, None, sb, AdvRole::Generator, AdvForm::LeastSquares)?;
                let adv_ba = adversarial_on_tape(t, None, sa, AdvRole::Generator, AdvForm::LeastSquares)?;
                let ca = l1_on_tape(t, a, ra)?;
                let cb = l1_on_tape(t, b, rb)?;
                let ib = fwd!(ga2, generator_forward, t, &v[0], b);
                let ia = fwd!(gb2, generator_forward, t, &v[1], a);
                let lb = l1_on_tape(t, ib, b)?;
                let la = l1_on_tape(t, ia, a)?;
                let pd = constants(&frozen, t);
                let outs = fwd!(frozen, detector_forward, t, &pd, fb);
                let task = task_on_tape(t, outs, &cfg, &targets(), &TaskLossWeights::default())?;
                Ok(t.lincomb(&[
                    (adv_ab, 1.0),
                    (adv_ba, 1.0),
                    (ca, 10.0),
                    (cb, 10.0),
                    (lb, 5.0),
                    (la, 5.0),
                    (task, 1.0),
                ]))
            }),
        },
        7,
    ));
    out
}

/// Exhaustive AP reference: re-matches every confidence prefix from scratch
/// and integrates the best precision reachable at each recall increment.
pub fn oracle_ap(dets: &[(usize, Detection)], gts: &[(usize, BoundingBox)], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<usize> = (0..dets.len()).collect();
    ranked.sort_by(|&a, &b| dets[b].1.confidence.partial_cmp(&dets[a].1.confidence).unwrap().then(a.cmp(&b)));
    let overlap = |p: &BoundingBox, q: &BoundingBox| {
        let (px0, py0) = (p.cx - p.w / 2.0, p.cy - p.h / 2.0);
        let (qx0, qy0) = (q.cx - q.w / 2.0, q.cy - q.h / 2.0);
        let iw = ((px0 + p.w).min(qx0 + q.w) - px0.max(qx0)).max(0.0);
        let ih = ((py0 + p.h).min(qy0 + q.h) - py0.max(qy0)).max(0.0);
        let inter = iw * ih;
        let union = p.w * p.h + q.w * q.h - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    };
    // (recall, precision) after keeping the top `r` detections
    let points: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|r| {
            let mut used = vec![false; gts.len()];
            let mut tp = 0;
            for &d in &ranked[..r] {
                let (img, det) = &dets[d];
                let best = gts
                    .iter()
                    .enumerate()
                    .filter(|(j, (gi, g))| gi == img && !used[*j] && g.class_id == det.bbox.class_id)
                    .map(|(j, (_, g))| (j, overlap(&det.bbox, g)))
                    .fold(None::<(usize, f64)>, |acc, c| match acc {
                        Some(a) if a.1 >= c.1 => Some(a),
                        _ => Some(c),
                    });
                if let Some((j, v)) = best {
                    if v >= thr {
                        used[j] = true;
                        tp += 1;
                    }
                }
            }
            (tp as f64 / gts.len() as f64, tp as f64 / r as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(r, _) in &points {
        if r > prev {
            let best = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
    }
    ap
}

/// Random AP instance: up to 5 images, 4 boxes and 8 detections, some of
/// them jittered copies of ground truth.
/// Image-tagged detections and ground truth for one AP computation.
pub type ApInstance = (Vec<(usize, Detection)>, Vec<(usize, BoundingBox)>);

pub fn random_ap_instance(rng: &mut ChaCha8Rng) -> ApInstance {
    let images = rng.random_range(1..=5);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let w = rng.random_range(0.1..0.5);
        let h = rng.random_range(0.1..0.5);
        BoundingBox::new(0, rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h)
    };
    let gts: Vec<(usize, BoundingBox)> =
        (0..rng.random_range(0..=4)).map(|_| (rng.random_range(0..images), rand_box(rng))).collect();
    let dets = (0..rng.random_range(0..=8))
        .map(|_| {
            let (img, bbox) = if !gts.is_empty() && rng.random_bool(0.6) {
                let (img, g) = gts[rng.random_range(0..gts.len())];
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.08..0.08);
                (img, BoundingBox { cx: g.cx + j(rng), cy: g.cy + j(rng), w: g.w * (1.0 + j(rng)), h: g.h * (1.0 + j(rng)), ..g })
            } else {
                (rng.random_range(0..images), rand_box(rng))
            };
            // coarse confidences so that ties occur
            (img, Detection { bbox, confidence: (rng.random_range(1..=6) as f64) / 6.0 })
        })
        .collect();
    (dets, gts)
}

/// Small, fast stage settings for pipeline tests on 32 px scenes.
pub fn tiny_train_config() -> semgan::pipeline::TrainConfig {
    let mut cfg = semgan::pipeline::TrainConfig::default();
    cfg.detector.width = 4;
    for (stage, steps) in [(&mut cfg.pretrain, 30), (&mut cfg.embed, 10), (&mut cfg.finetune, 10)] {
        stage.steps = steps;
        stage.eval_every = 5;
        stage.batch_size = 4;
    }
    cfg.gan.steps = 6;
    cfg.gan.sample_every = 3;
    cfg.gan.pool_size = 4;
    cfg.gan.generator = GeneratorConfig { width: 4, res_blocks: 1 };
    cfg.gan.discriminator = DiscriminatorConfig { width: 4, downsamples: 2 };
    cfg
}

pub fn tiny_domain(style: semgan::scenegen::StyleName, seed: u64, count: usize) -> Vec<semgan::LabeledImage<f64>> {
    let mut spec = semgan::scenegen::SceneSpec::new(style, seed);
    spec.canvas_size = 32;
    semgan::scenegen::render_dataset(&spec, count).unwrap()
}

/// Fraction of post-fill queries that hand back a buffered image instead of
/// the new one.
pub fn pool_return_old_fraction(capacity: usize, trials: usize, seed: u64) -> f64 {
    let mut pool = semgan::pipeline::ImagePool::new(capacity, seed);
    for i in 0..capacity {
        assert_eq!(pool.query(i), i);
    }
    let old = (0..trials).filter(|&t| pool.query(capacity + t) != capacity + t).count();
    old as f64 / trials as f64
}
