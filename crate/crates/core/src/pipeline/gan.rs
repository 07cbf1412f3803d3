//! Cycle-consistent translation training with a frozen detector constraint,
//! and dataset translation with label passthrough.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pixels_to_rgb8, rgb8_to_pixels, serialize_labels, BoundingBox, LabeledImage};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_on_tape, l1_on_tape, task_on_tape, total_objective, AdvRole, LossBreakdown, LossComponents,
};
use crate::nets::{
    discriminator_output_side, save_checkpoint, ArchConfig, Bound, NetworkHandle, ProvenanceRecord, RngState,
};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::config::{config_hash, GanStageConfig};
use super::detector::STAGE_TRAIN_GAN;
use super::optim::{linear_decay_lr, Adam};
use super::pool::ImagePool;

/// `g_a` maps A to B, `g_b` maps B to A; `d_a` judges domain A, `d_b` domain B.
#[derive(Clone, Debug)]
pub struct GanNets<T> {
    pub g_a: NetworkHandle<T>,
    pub g_b: NetworkHandle<T>,
    pub d_a: NetworkHandle<T>,
    pub d_b: NetworkHandle<T>,
}

impl<T: Scalar> GanNets<T> {
    pub fn init(cfg: &GanStageConfig, seed: u64) -> Self {
        let g = || ArchConfig::Generator(cfg.generator.clone());
        let d = || ArchConfig::Discriminator(cfg.discriminator.clone());
        Self {
            g_a: NetworkHandle::init(g(), seed.wrapping_mul(4)),
            g_b: NetworkHandle::init(g(), seed.wrapping_mul(4).wrapping_add(1)),
            d_a: NetworkHandle::init(d(), seed.wrapping_mul(4).wrapping_add(2)),
            d_b: NetworkHandle::init(d(), seed.wrapping_mul(4).wrapping_add(3)),
        }
    }

    fn named(&self) -> [(&'static str, &NetworkHandle<T>); 4] {
        [("g_a", &self.g_a), ("g_b", &self.g_b), ("d_a", &self.d_a), ("d_b", &self.d_b)]
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub loss_d_a: f64,
    pub loss_d_b: f64,
}

#[derive(Clone, Debug)]
pub struct GanOutput<T> {
    pub nets: GanNets<T>,
    pub log: Vec<StepLog>,
}

fn take_grads<T: Scalar>(grads: &mut crate::tape::Grads<T>, bound: &Bound, net: &NetworkHandle<T>) -> Vec<Tensor<T>> {
    bound
        .vars()
        .iter()
        .zip(&net.params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().to_f64_lossy()
}

/// Side-by-side source | translation | reconstruction.
pub fn triptych<T: Scalar>(source: &Tensor<T>, translated: &Tensor<T>, reconstructed: &Tensor<T>) -> image::RgbImage {
    let parts = [source, translated, reconstructed].map(pixels_to_rgb8);
    let (w, h) = (parts[0].width(), parts[0].height());
    let mut out = image::RgbImage::new(3 * w, h);
    for (i, p) in parts.iter().enumerate() {
        image::imageops::replace(&mut out, p, i as i64 * w as i64, 0);
    }
    out
}

fn check_sizes<T: Scalar>(source: &[LabeledImage<T>], target: &[LabeledImage<T>], cfg: &GanStageConfig) -> Result<usize> {
    if source.is_empty() {
        return Err(Error::validation("source", "empty dataset"));
    }
    if target.is_empty() {
        return Err(Error::validation("target", "empty dataset"));
    }
    if let Some(i) = source.iter().find(|i| !i.labeled()) {
        return Err(Error::validation("source", format!("image `{}` has no labels", i.id)));
    }
    let size = source[0].size();
    if let Some(i) = source.iter().chain(target).find(|i| i.size() != size) {
        return Err(Error::validation("image", format!("`{}` has side {}, expected {size}", i.id, i.size())));
    }
    if !size.is_multiple_of(4) || discriminator_output_side(&cfg.discriminator, size).is_none() {
        return Err(Error::validation("image", format!("side {size} is incompatible with the networks")));
    }
    Ok(size)
}

/// Trains both generators and discriminators. Generators minimize
/// `adv_AB + adv_BA + λc·cycle + λi·identity + λt·task`, where the task term is
/// the frozen detector `t_b`'s loss on `G_A(a)` against the source labels.
///
/// With `out_dir`, writes `train_log.jsonl`, sample triptychs under `samples/`
/// and checkpoints under `checkpoints/`.
pub fn train_semgan<T: Scalar>(
    source: &[LabeledImage<T>],
    target: &[LabeledImage<T>],
    t_b: &NetworkHandle<T>,
    cfg: &GanStageConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<GanOutput<T>> {
    if t_b.trainable {
        return Err(Error::Contract("the task detector must be frozen before generator training".into()));
    }
    let det_cfg = t_b.detector_config()?.clone();
    cfg.validate()?;
    check_sizes(source, target, cfg)?;
    let t_b_hash = t_b.params_hash();
    let w = cfg.weights;

    let mut nets = GanNets::<T>::init(cfg, seed);
    let mut opt_g = [Adam::new(&nets.g_a.params, cfg.beta1, 0.999), Adam::new(&nets.g_b.params, cfg.beta1, 0.999)];
    let mut opt_d = [Adam::new(&nets.d_a.params, cfg.beta1, 0.999), Adam::new(&nets.d_b.params, cfg.beta1, 0.999)];
    let mut pool_a = ImagePool::new(cfg.pool_size, seed ^ 0xa11c_e000);
    let mut pool_b = ImagePool::new(cfg.pool_size, seed ^ 0xb0b0_0000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut log_file = match out_dir {
        Some(dir) => {
            for sub in ["samples", "checkpoints"] {
                let d = dir.join(sub);
                fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
            let p = dir.join("train_log.jsonl");
            Some((BufWriter::new(fs::File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };

    let batch = cfg.batch_size;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let lr = linear_decay_lr(cfg.lr, step - 1, cfg.steps);
        let a_items: Vec<&LabeledImage<T>> = (0..batch).map(|_| &source[rng.random_range(0..source.len())]).collect();
        let b_items: Vec<&LabeledImage<T>> = (0..batch).map(|_| &target[rng.random_range(0..target.len())]).collect();
        let xa = Tensor::stack(&a_items.iter().map(|i| &i.pixels).collect::<Vec<_>>());
        let xb = Tensor::stack(&b_items.iter().map(|i| &i.pixels).collect::<Vec<_>>());
        let boxes: Vec<Vec<BoundingBox>> = a_items.iter().map(|i| i.boxes_or_empty().to_vec()).collect();

        // generator update
        let mut tape = Tape::new();
        let pga = nets.g_a.bind(&mut tape, true)?;
        let pgb = nets.g_b.bind(&mut tape, true)?;
        let pda = nets.d_a.bind(&mut tape, false)?;
        let pdb = nets.d_b.bind(&mut tape, false)?;
        let a = tape.leaf(xa.clone(), false);
        let b = tape.leaf(xb.clone(), false);
        let fake_b = nets.g_a.generator_forward(&mut tape, &pga, a)?;
        let rec_a = nets.g_b.generator_forward(&mut tape, &pgb, fake_b)?;
        let fake_a = nets.g_b.generator_forward(&mut tape, &pgb, b)?;
        let rec_b = nets.g_a.generator_forward(&mut tape, &pga, fake_a)?;
        let score_b = nets.d_b.discriminator_forward(&mut tape, &pdb, fake_b)?;
        let score_a = nets.d_a.discriminator_forward(&mut tape, &pda, fake_a)?;
        let adv_ab = adversarial_on_tape(&mut tape, None, score_b, AdvRole::Generator, w.adv_form)?;
        let adv_ba = adversarial_on_tape(&mut tape, None, score_a, AdvRole::Generator, w.adv_form)?;
        let cyc_a = l1_on_tape(&mut tape, a, rec_a)?;
        let cyc_b = l1_on_tape(&mut tape, b, rec_b)?;
        let cycle = tape.lincomb(&[(cyc_a, 1.0), (cyc_b, 1.0)]);
        let mut terms = vec![(adv_ab, 1.0), (adv_ba, 1.0), (cycle, w.lambda_c)];
        let mut comp = LossComponents {
            adv_ab: scalar_of(&tape, adv_ab),
            adv_ba: scalar_of(&tape, adv_ba),
            cycle: scalar_of(&tape, cycle),
            ..LossComponents::default()
        };
        if w.lambda_i > 0.0 {
            let id_b = nets.g_a.generator_forward(&mut tape, &pga, b)?;
            let id_a = nets.g_b.generator_forward(&mut tape, &pgb, a)?;
            let ib = l1_on_tape(&mut tape, id_b, b)?;
            let ia = l1_on_tape(&mut tape, id_a, a)?;
            let identity = tape.lincomb(&[(ib, 1.0), (ia, 1.0)]);
            comp.identity = scalar_of(&tape, identity);
            terms.push((identity, w.lambda_i));
        }
        if w.lambda_t > 0.0 {
            let ptb = t_b.bind(&mut tape, false)?;
            let outs = t_b.detector_forward(&mut tape, &ptb, fake_b)?;
            let task = task_on_tape(&mut tape, outs, &det_cfg, &boxes, &cfg.task)?;
            comp.task = scalar_of(&tape, task);
            terms.push((task, w.lambda_t));
        }
        let total = tape.lincomb(&terms);
        let mut grads = tape.backward(total);
        let ga = take_grads(&mut grads, &pga, &nets.g_a);
        let gb = take_grads(&mut grads, &pgb, &nets.g_b);
        opt_g[0].step(&mut nets.g_a.params, &ga, lr);
        opt_g[1].step(&mut nets.g_b.params, &gb, lr);
        let fake_b_val = tape.value(fake_b).clone();
        let fake_a_val = tape.value(fake_a).clone();
        drop(tape);

        // discriminator update on pooled fakes
        let pooled = |pool: &mut ImagePool<Tensor<T>>, fakes: &Tensor<T>| {
            let items: Vec<Tensor<T>> = (0..fakes.dims4().0).map(|n| pool.query(fakes.batch_item(n))).collect();
            Tensor::stack(&items.iter().collect::<Vec<_>>())
        };
        let fb = pooled(&mut pool_b, &fake_b_val);
        let fa = pooled(&mut pool_a, &fake_a_val);
        let mut tape = Tape::new();
        let pda = nets.d_a.bind(&mut tape, true)?;
        let pdb = nets.d_b.bind(&mut tape, true)?;
        let real_a = tape.leaf(xa, false);
        let real_b = tape.leaf(xb, false);
        let fa = tape.leaf(fa, false);
        let fb = tape.leaf(fb, false);
        let sra = nets.d_a.discriminator_forward(&mut tape, &pda, real_a)?;
        let sfa = nets.d_a.discriminator_forward(&mut tape, &pda, fa)?;
        let srb = nets.d_b.discriminator_forward(&mut tape, &pdb, real_b)?;
        let sfb = nets.d_b.discriminator_forward(&mut tape, &pdb, fb)?;
        let la = adversarial_on_tape(&mut tape, Some(sra), sfa, AdvRole::Discriminator, w.adv_form)?;
        let lb = adversarial_on_tape(&mut tape, Some(srb), sfb, AdvRole::Discriminator, w.adv_form)?;
        let ld = tape.lincomb(&[(la, 0.5), (lb, 0.5)]);
        let mut grads = tape.backward(ld);
        let gda = take_grads(&mut grads, &pda, &nets.d_a);
        let gdb = take_grads(&mut grads, &pdb, &nets.d_b);
        opt_d[0].step(&mut nets.d_a.params, &gda, lr);
        opt_d[1].step(&mut nets.d_b.params, &gdb, lr);

        let entry = StepLog {
            step,
            losses: total_objective(&comp, &w)?,
            loss_d_a: scalar_of(&tape, la),
            loss_d_b: scalar_of(&tape, lb),
        };
        if step % 50 == 0 || step == 1 {
            log::info!(
                "gan step {step}/{}: total {:.4} cycle {:.4} task {:.4} d {:.4}/{:.4}",
                cfg.steps,
                entry.losses.total,
                entry.losses.cycle,
                entry.losses.task,
                entry.loss_d_a,
                entry.loss_d_b
            );
        }
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(entry);

        if let Some(dir) = out_dir {
            let last = step == cfg.steps;
            if last || (cfg.sample_every > 0 && step % cfg.sample_every == 0) {
                write_sample(&nets, &source[0].pixels, &dir.join("samples").join(format!("step_{step:06}.png")))?;
            }
            if last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
                for (name, net) in nets.named() {
                    let p = dir.join("checkpoints").join(format!("{name}.json"));
                    save_checkpoint(&p, net, Some(RngState::capture(&rng)))?;
                }
            }
        }
    }
    if let Some((mut f, p)) = log_file {
        f.flush().map_err(|e| Error::io(&p, e))?;
    }

    if t_b.params_hash() != t_b_hash {
        return Err(Error::Contract("task detector parameters changed during generator training".into()));
    }
    let record = ProvenanceRecord {
        stage: STAGE_TRAIN_GAN.to_string(),
        parent_hash: Some(t_b_hash),
        config_hash: config_hash(&(cfg, seed)),
    };
    for net in [&mut nets.g_a, &mut nets.g_b, &mut nets.d_a, &mut nets.d_b] {
        net.provenance.push(record.clone());
    }
    Ok(GanOutput { nets, log })
}

fn write_sample<T: Scalar>(nets: &GanNets<T>, source: &Tensor<T>, path: &Path) -> Result<()> {
    let x = Tensor::stack(&[source]);
    let fake = nets.g_a.generate(&x)?;
    let rec = nets.g_b.generate(&fake)?;
    let img = triptych(&x, &fake, &rec);
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

const TRANSLATE_BATCH: usize = 8;

/// Applies `g_a` to every source image. Labels are reused verbatim; pixels
/// are quantized to 8 bits so in-memory and on-disk copies agree.
pub fn translate_dataset<T: Scalar>(g_a: &NetworkHandle<T>, source: &[LabeledImage<T>]) -> Result<Vec<LabeledImage<T>>> {
    if g_a.kind() != crate::nets::NetKind::Generator {
        return Err(Error::validation("generator", "not a generator checkpoint"));
    }
    let mut out = Vec::with_capacity(source.len());
    for chunk in source.chunks(TRANSLATE_BATCH) {
        let x = Tensor::stack(&chunk.iter().map(|i| &i.pixels).collect::<Vec<_>>());
        let y = g_a.generate(&x)?;
        for (n, src) in chunk.iter().enumerate() {
            let rgb = pixels_to_rgb8(&y.batch_item(n));
            out.push(LabeledImage {
                id: src.id.clone(),
                pixels: rgb8_to_pixels(&rgb),
                boxes: src.boxes.clone(),
                domain: "translated".into(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatedEntry {
    pub image: String,
    pub labels: String,
    pub source_image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatedManifest {
    pub style: String,
    pub generator_hash: String,
    pub generator_provenance: Vec<ProvenanceRecord>,
    pub source_dir: Option<String>,
    pub entries: Vec<TranslatedEntry>,
}

/// Writes translated images. With `source_dir`, label files are copied from
/// the source dataset byte for byte; otherwise they are serialized.
pub fn write_translated<T: Scalar>(
    out_dir: &Path,
    images: &[LabeledImage<T>],
    g_a: &NetworkHandle<T>,
    source_dir: Option<&Path>,
) -> Result<TranslatedManifest> {
    let img_dir = out_dir.join("images");
    let lbl_dir = out_dir.join("labels");
    for d in [&img_dir, &lbl_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(images.len());
    for img in images {
        let ip = img_dir.join(format!("{}.png", img.id));
        img.to_rgb8().save(&ip).map_err(|source| Error::Image { path: ip.clone(), source })?;
        let lp = lbl_dir.join(format!("{}.txt", img.id));
        match source_dir {
            Some(src) => {
                let from = src.join("labels").join(format!("{}.txt", img.id));
                fs::copy(&from, &lp).map_err(|e| Error::io(&from, e))?;
            }
            None => fs::write(&lp, serialize_labels(img.boxes_or_empty())).map_err(|e| Error::io(&lp, e))?,
        }
        entries.push(TranslatedEntry {
            image: format!("images/{}.png", img.id),
            labels: format!("labels/{}.txt", img.id),
            source_image: format!("images/{}.png", img.id),
        });
    }
    let manifest = TranslatedManifest {
        style: "translated".into(),
        generator_hash: g_a.params_hash(),
        generator_provenance: g_a.provenance.clone(),
        source_dir: source_dir.map(|p| p.display().to_string()),
        entries,
    };
    let mp = out_dir.join("manifest.json");
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}
