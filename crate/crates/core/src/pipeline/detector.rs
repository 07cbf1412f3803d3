//! Detector stages: pretraining on the source domain, domain knowledge
//! embedding on a few labeled target images, and fine-tuning on translated
//! images.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::losses::{detection_task_loss, task_on_tape, TaskLossWeights};
use crate::nets::{ArchConfig, NetworkHandle, ProvenanceRecord};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::config::{config_hash, DetectorStageConfig, TrainConfig};
use super::optim::Adam;

pub const STAGE_PRETRAIN: &str = "pretrain";
pub const STAGE_EMBED: &str = "embed";
pub const STAGE_FINETUNE: &str = "finetune";
pub const STAGE_TRAIN_GAN: &str = "train_gan";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean training loss since the previous point; absent at step 0.
    pub train_loss: Option<f64>,
    pub valid_loss: f64,
}

/// A trained detector together with its training curve.
#[derive(Clone, Debug)]
pub struct StageOutput<T> {
    pub net: NetworkHandle<T>,
    pub curve: Vec<CurvePoint>,
    /// Step whose parameters were selected.
    pub best_step: usize,
}

const VALID_BATCH: usize = 16;

fn stack_images<T: Scalar>(items: &[&LabeledImage<T>]) -> Tensor<T> {
    Tensor::stack(&items.iter().map(|i| &i.pixels).collect::<Vec<_>>())
}

/// Mean detection loss of `net` over `images`.
pub fn detection_loss_on<T: Scalar>(net: &NetworkHandle<T>, images: &[LabeledImage<T>], w: &TaskLossWeights) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::validation("valid", "empty validation set"));
    }
    let mut total = 0.0;
    for chunk in images.chunks(VALID_BATCH) {
        let refs: Vec<&LabeledImage<T>> = chunk.iter().collect();
        let grid = net.detect_grid(&stack_images(&refs))?;
        let targets: Vec<Vec<_>> = chunk.iter().map(|i| i.boxes_or_empty().to_vec()).collect();
        total += detection_task_loss(&grid, &targets, w)?.value * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

fn require_labeled<T>(images: &[LabeledImage<T>], field: &str) -> Result<()> {
    if images.is_empty() {
        return Err(Error::validation(field, "empty dataset"));
    }
    if let Some(i) = images.iter().find(|i| i.boxes.is_none()) {
        return Err(Error::validation(field, format!("image `{}` has no labels", i.id)));
    }
    Ok(())
}

/// Trains a detector with Adam and keeps the parameters with the lowest
/// validation loss (step 0 included). Zero steps return `init` unchanged.
pub fn train_detector<T: Scalar>(
    init: &NetworkHandle<T>,
    train: &[LabeledImage<T>],
    valid: &[LabeledImage<T>],
    cfg: &DetectorStageConfig,
    seed: u64,
) -> Result<StageOutput<T>> {
    cfg.validate("detector_stage")?;
    require_labeled(train, "train")?;
    require_labeled(valid, "valid")?;
    init.detector_config()?;
    if !init.trainable {
        return Err(Error::Contract("cannot train a frozen detector".into()));
    }
    let w = TaskLossWeights::default();
    let mut net = init.clone();
    let mut best = net.params.clone();
    let mut best_loss = detection_loss_on(&net, valid, &w)?;
    let mut best_step = 0;
    let mut curve = vec![CurvePoint { step: 0, train_loss: None, valid_loss: best_loss }];
    if cfg.steps == 0 {
        return Ok(StageOutput { net, curve, best_step });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(&net.params, cfg.beta1, 0.999);
    let batch = cfg.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let (mut running, mut running_n) = (0.0, 0usize);
    let mut stale = 0;
    for step in 1..=cfg.steps {
        let mut items = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let img = &train[order[cursor]];
            cursor += 1;
            items.push(if rng.random_bool(cfg.flip_prob) { img.flipped_horizontal() } else { img.clone() });
        }
        let refs: Vec<&LabeledImage<T>> = items.iter().collect();
        let targets: Vec<Vec<_>> = items.iter().map(|i| i.boxes_or_empty().to_vec()).collect();

        let mut tape = Tape::new();
        let p = net.bind(&mut tape, true)?;
        let x = tape.leaf(stack_images(&refs), false);
        let outs = net.detector_forward(&mut tape, &p, x)?;
        let loss = task_on_tape(&mut tape, outs, net.detector_config()?, &targets, &w)?;
        running += tape.value(loss).item().to_f64_lossy();
        running_n += 1;
        let mut grads = tape.backward(loss);
        let g: Vec<Tensor<T>> = p
            .vars()
            .iter()
            .zip(&net.params)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        opt.step(&mut net.params, &g, cfg.lr);

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let vl = detection_loss_on(&net, valid, &w)?;
            curve.push(CurvePoint { step, train_loss: Some(running / running_n as f64), valid_loss: vl });
            log::debug!("detector step {step}: train {:.4} valid {vl:.4}", running / running_n as f64);
            (running, running_n) = (0.0, 0);
            if vl < best_loss {
                best_loss = vl;
                best = net.params.clone();
                best_step = step;
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    net.params = best;
    Ok(StageOutput { net, curve, best_step })
}

fn push_stage<T: Scalar, C: Serialize>(net: &mut NetworkHandle<T>, parent: Option<&NetworkHandle<T>>, stage: &str, cfg: &C) {
    if let Some(p) = parent {
        net.provenance = p.provenance.clone();
    }
    net.provenance.push(ProvenanceRecord {
        stage: stage.to_string(),
        parent_hash: parent.map(NetworkHandle::params_hash),
        config_hash: config_hash(cfg),
    });
}

/// Fails unless `net`'s lineage contains `expected`.
pub fn require_predecessor<T>(net: &NetworkHandle<T>, stage: &str, expected: &str) -> Result<()> {
    if net.provenance.iter().any(|r| r.stage == expected) {
        Ok(())
    } else {
        Err(Error::StageOrder { stage: stage.to_string(), expected: expected.to_string() })
    }
}

/// Deterministic train/valid split of `n` items. A zero fraction validates on
/// the training items.
pub fn split_indices(n: usize, valid_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if valid_fraction <= 0.0 || n < 2 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = ((n as f64 * valid_fraction).round() as usize).clamp(1, n - 1);
    let valid = idx[..n_valid].to_vec();
    let train = idx[n_valid..].to_vec();
    (train, valid)
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Stage 1: trains the initial task model on the labeled source domain.
pub fn pretrain_detector<T: Scalar>(source: &[LabeledImage<T>], cfg: &TrainConfig) -> Result<StageOutput<T>> {
    cfg.validate()?;
    require_labeled(source, "source")?;
    let (tr, va) = split_indices(source.len(), cfg.valid_fraction, cfg.seed);
    let init = NetworkHandle::init(ArchConfig::Detector(cfg.detector.clone()), cfg.seed);
    let mut out = train_detector(&init, &pick(source, &tr), &pick(source, &va), &cfg.pretrain, cfg.seed ^ 0x5eed_0001)?;
    push_stage(&mut out.net, None, STAGE_PRETRAIN, &(&cfg.detector, &cfg.pretrain, cfg.valid_fraction, cfg.seed));
    Ok(out)
}

/// Stage 2: fine-tunes T^A on `a` labeled target images, selecting on `b`
/// others. The result is frozen, ready to constrain the generator.
pub fn embed_domain_knowledge<T: Scalar>(
    t_a: &NetworkHandle<T>,
    train: &[LabeledImage<T>],
    valid: &[LabeledImage<T>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StageOutput<T>> {
    require_predecessor(t_a, STAGE_EMBED, STAGE_PRETRAIN)?;
    require_labeled(train, "target_train")?;
    require_labeled(valid, "target_valid")?;
    let mut init = t_a.clone();
    init.trainable = true;
    let mut out = train_detector(&init, train, valid, &cfg.embed, seed)?;
    push_stage(&mut out.net, Some(t_a), STAGE_EMBED, &(&cfg.embed, seed));
    out.net.trainable = false;
    Ok(out)
}

/// Stage 4: trains a detector further on translated images. With no real
/// validation images, 20% of the generated set is held out for selection.
pub fn finetune_on_generated<T: Scalar>(
    t_b: &NetworkHandle<T>,
    generated: &[LabeledImage<T>],
    target_valid: &[LabeledImage<T>],
    extra_train: &[LabeledImage<T>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StageOutput<T>> {
    require_predecessor(t_b, STAGE_FINETUNE, STAGE_PRETRAIN)?;
    require_labeled(generated, "generated")?;
    let (mut train, valid) = if target_valid.is_empty() {
        let (tr, va) = split_indices(generated.len(), 0.2, seed);
        (pick(generated, &tr), pick(generated, &va))
    } else {
        (generated.to_vec(), target_valid.to_vec())
    };
    train.extend_from_slice(extra_train);
    let mut init = t_b.clone();
    init.trainable = true;
    let mut out = train_detector(&init, &train, &valid, &cfg.finetune, seed)?;
    push_stage(&mut out.net, Some(t_b), STAGE_FINETUNE, &(&cfg.finetune, seed, target_valid.len()));
    Ok(out)
}
