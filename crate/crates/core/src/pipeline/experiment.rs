//! Incremental-label experiment: for every seed and labeled-target budget `k`,
//! trains the compared methods and evaluates them on a fixed test set.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{split_schedule, LabeledImage};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_THRESHOLD};
use crate::nets::{hex_digest, save_checkpoint, NetworkHandle};
use crate::scalar::Scalar;

use super::config::TrainConfig;
use super::detector::{embed_domain_knowledge, finetune_on_generated, pretrain_detector};
use super::gan::{train_semgan, translate_dataset};

/// `(k, a, b, reports)` for one labeled budget.
type KResult = (usize, usize, usize, HashMap<Method, EvalReport>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pretrained,
    Cyclegan,
    FineTuned,
    SemganFineTuned,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pretrained, Method::Cyclegan, Method::FineTuned, Method::SemganFineTuned];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pretrained => "pretrained",
            Method::Cyclegan => "cyclegan",
            Method::FineTuned => "fine_tuned",
            Method::SemganFineTuned => "semgan_fine_tuned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::validation("methods", format!("unknown method `{s}`")))
    }

    /// Methods that use no labeled target images; they report `k = a = b = 0`.
    pub fn label_free(&self) -> bool {
        matches!(self, Method::Pretrained | Method::Cyclegan)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub k_list: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    /// Seeds processed concurrently.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k_list: crate::data::default_k_list(),
            methods: Method::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            train: TrainConfig::default(),
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            jobs: 1,
        }
    }
}

/// Borrowed datasets of one experiment.
#[derive(Clone, Copy, Debug)]
pub struct ExperimentData<'a, T> {
    pub source: &'a [LabeledImage<T>],
    pub target_unlabeled: &'a [LabeledImage<T>],
    /// Pool from which the `k` labeled target images are drawn.
    pub target_labeled: &'a [LabeledImage<T>],
    pub test: &'a [LabeledImage<T>],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub k: usize,
    pub a: usize,
    pub b: usize,
    pub method: Method,
    pub seed: u64,
    /// Percent.
    pub ap30: f64,
    pub ap50: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<ExperimentRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub k: usize,
    pub a: usize,
    pub b: usize,
    pub method: Method,
    pub seeds: usize,
    pub ap30: f64,
    pub ap50: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ExperimentResult {
    pub const CSV_HEADER: &'static str = "k,a,b,method,seed,ap30,ap50";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{},{:.1},{:.1}\n", r.k, r.a, r.b, r.method.as_str(), r.seed, r.ap30, r.ap50));
        }
        s
    }

    /// Median AP over seeds for each `(k, method)`, in first-appearance order.
    pub fn medians(&self) -> Vec<MedianRow> {
        let mut order: Vec<(usize, Method)> = Vec::new();
        let mut groups: HashMap<(usize, Method), Vec<&ExperimentRow>> = HashMap::new();
        for r in &self.rows {
            let key = (r.k, r.method);
            let g = groups.entry(key).or_default();
            // label-free rows repeat once per k; count each seed once
            if g.iter().any(|x| x.seed == r.seed) {
                continue;
            }
            if g.is_empty() {
                order.push(key);
            }
            g.push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let g = &groups[&key];
                MedianRow {
                    k: key.0,
                    a: g[0].a,
                    b: g[0].b,
                    method: key.1,
                    seeds: g.len(),
                    ap30: median(g.iter().map(|r| r.ap30).collect()),
                    ap50: median(g.iter().map(|r| r.ap50).collect()),
                }
            })
            .collect()
    }

    pub fn median_ap30(&self, k: usize, method: Method) -> Option<f64> {
        self.medians().into_iter().find(|m| m.k == k && m.method == method).map(|m| m.ap30)
    }

    /// Per-seed rows followed by seed medians, as Markdown tables.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| a | b | k | method | seed | AP@0.3 | AP@0.5 |\n|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.1} | {:.1} |\n",
                r.a,
                r.b,
                r.k,
                r.method.as_str(),
                r.seed,
                r.ap30,
                r.ap50
            ));
        }
        s.push_str("\nMedian over seeds:\n\n| a | b | k | method | seeds | AP@0.3 | AP@0.5 |\n|---|---|---|---|---|---|---|\n");
        for m in self.medians() {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.1} | {:.1} |\n",
                m.a,
                m.b,
                m.k,
                m.method.as_str(),
                m.seeds,
                m.ap30,
                m.ap50
            ));
        }
        s
    }

    /// Writes `results.csv`, `results.json` and `summary.md`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("results.csv", self.to_csv()),
            ("results.json", serde_json::to_string_pretty(self)?),
            ("summary.md", self.to_markdown()),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn image_hash<T: Scalar>(img: &LabeledImage<T>) -> String {
    let rgb = img.to_rgb8();
    let mut h = Sha256::new();
    h.update(rgb.width().to_le_bytes());
    h.update(rgb.height().to_le_bytes());
    h.update(rgb.as_raw());
    hex_digest(h)
}

/// Refuses test images whose pixel content appears in any training pool.
pub fn audit_test_overlap<T: Scalar>(data: &ExperimentData<'_, T>) -> Result<()> {
    let test: HashMap<String, &str> = data.test.iter().map(|i| (image_hash(i), i.id.as_str())).collect();
    let pools = [("source", data.source), ("target_unlabeled", data.target_unlabeled), ("target_labeled", data.target_labeled)];
    for (name, pool) in pools {
        for img in pool {
            if let Some(t) = test.get(&image_hash(img)) {
                return Err(Error::DataIntegrity(format!("test image `{t}` also appears in {name} as `{}`", img.id)));
            }
        }
    }
    Ok(())
}

fn leg_seed(seed: u64, leg: u64, k: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(leg.wrapping_mul(10_007)).wrapping_add(k as u64)
}

struct SeedRun<'a, T> {
    data: &'a ExperimentData<'a, T>,
    cfg: &'a ExperimentConfig,
    seed: u64,
    dir: Option<PathBuf>,
}

impl<T: Scalar> SeedRun<'_, T> {
    fn sub(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn record(&self, sub: &str, net: &NetworkHandle<T>, report: &EvalReport) -> Result<()> {
        if let Some(d) = self.sub(sub) {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            save_checkpoint(&d.join("detector.json"), net, None)?;
            let p = d.join("eval.json");
            fs::write(&p, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn eval(&self, net: &NetworkHandle<T>) -> Result<EvalReport> {
        evaluate_model(net, self.data.test, self.cfg.conf_threshold, self.cfg.nms_threshold)
    }

    fn run(&self) -> Result<Vec<ExperimentRow>> {
        let (cfg, data, seed) = (self.cfg, self.data, self.seed);
        let needs_k = cfg.methods.iter().any(|m| !m.label_free()) && !cfg.k_list.is_empty();
        let mut train = cfg.train.clone();
        train.seed = leg_seed(seed, 0, 0);
        log::info!("seed {seed}: pretraining on {} source images", data.source.len());
        let t_a = pretrain_detector(data.source, &train)?.net;

        let mut label_free: HashMap<Method, EvalReport> = HashMap::new();
        if cfg.methods.contains(&Method::Pretrained) {
            let r = self.eval(&t_a)?;
            self.record("pretrained", &t_a, &r)?;
            label_free.insert(Method::Pretrained, r);
        }
        if cfg.methods.contains(&Method::Cyclegan) {
            log::info!("seed {seed}: cyclegan leg");
            let mut gan_cfg = train.gan.clone();
            gan_cfg.weights.lambda_t = 0.0;
            let gan = train_semgan(
                data.source,
                data.target_unlabeled,
                &t_a.clone().frozen(),
                &gan_cfg,
                leg_seed(seed, 1, 0),
                self.sub("cyclegan/gan").as_deref(),
            )?;
            let generated = translate_dataset(&gan.nets.g_a, data.source)?;
            let ft = finetune_on_generated(&t_a, &generated, &[], &[], &train, leg_seed(seed, 2, 0))?.net;
            let r = self.eval(&ft)?;
            self.record("cyclegan", &ft, &r)?;
            label_free.insert(Method::Cyclegan, r);
        }

        let mut per_k: Vec<KResult> = Vec::new();
        if needs_k {
            let mut perm: Vec<usize> = (0..data.target_labeled.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(leg_seed(seed, 3, 0)));
            for &k in &cfg.k_list {
                let sched = split_schedule(k)?;
                if k > perm.len() {
                    return Err(Error::validation(
                        "target_labeled",
                        format!("k = {k} exceeds the {} labeled target images", perm.len()),
                    ));
                }
                let pick = |r: std::ops::Range<usize>| -> Vec<LabeledImage<T>> {
                    perm[r].iter().map(|&i| data.target_labeled[i].clone()).collect()
                };
                let (tr, va) = (pick(0..sched.a), pick(sched.a..k));
                log::info!("seed {seed}, k {k}: embedding domain knowledge (a={}, b={})", sched.a, sched.b);
                let t_b = embed_domain_knowledge(&t_a, &tr, &va, &train, leg_seed(seed, 4, k))?.net;
                let mut reports = HashMap::new();
                if cfg.methods.contains(&Method::FineTuned) {
                    let r = self.eval(&t_b)?;
                    self.record(&format!("k{k}/fine_tuned"), &t_b, &r)?;
                    reports.insert(Method::FineTuned, r);
                }
                if cfg.methods.contains(&Method::SemganFineTuned) {
                    log::info!("seed {seed}, k {k}: semantically constrained gan leg");
                    let gan = train_semgan(
                        data.source,
                        data.target_unlabeled,
                        &t_b,
                        &train.gan,
                        leg_seed(seed, 5, k),
                        self.sub(&format!("k{k}/gan")).as_deref(),
                    )?;
                    let generated = translate_dataset(&gan.nets.g_a, data.source)?;
                    let extra = if train.finetune_include_real { tr.clone() } else { Vec::new() };
                    let ft = finetune_on_generated(&t_b, &generated, &va, &extra, &train, leg_seed(seed, 6, k))?.net;
                    let r = self.eval(&ft)?;
                    self.record(&format!("k{k}/semgan_fine_tuned"), &ft, &r)?;
                    reports.insert(Method::SemganFineTuned, r);
                }
                per_k.push((k, sched.a, sched.b, reports));
            }
        }

        let mut rows = Vec::new();
        let row = |k, a, b, method, r: &EvalReport| ExperimentRow { k, a, b, method, seed, ap30: r.ap30, ap50: r.ap50 };
        let slots: Vec<Option<&KResult>> = if cfg.k_list.is_empty() {
            vec![None]
        } else if needs_k {
            per_k.iter().map(Some).collect()
        } else {
            cfg.k_list.iter().map(|_| None).collect()
        };
        for slot in slots {
            for m in &cfg.methods {
                if let Some(r) = label_free.get(m) {
                    rows.push(row(0, 0, 0, *m, r));
                } else if let Some((k, a, b, reports)) = slot {
                    rows.push(row(*k, *a, *b, *m, &reports[m]));
                }
            }
        }
        Ok(rows)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(Error::validation("methods", "at least one method is required"));
        }
        for &k in &self.k_list {
            split_schedule(k)?;
        }
        if self.jobs == 0 {
            return Err(Error::validation("jobs", "must be positive"));
        }
        self.train.validate()
    }
}

/// Runs every requested method for every seed and `k`. Each method yields one
/// row per `(seed, k)`; label-free methods are trained once per seed and
/// report `k = a = b = 0`. With no `k`, only label-free methods produce rows.
pub fn run_incremental_experiment<T: Scalar>(
    data: &ExperimentData<'_, T>,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    audit_test_overlap(data)?;
    for (name, pool) in [("source", data.source), ("test", data.test)] {
        if pool.is_empty() {
            return Err(Error::validation(name, "empty dataset"));
        }
    }
    let needs_gan = cfg.methods.iter().any(|m| matches!(m, Method::Cyclegan | Method::SemganFineTuned));
    if needs_gan && data.target_unlabeled.is_empty() {
        return Err(Error::validation("target_unlabeled", "empty dataset"));
    }

    let results: Vec<Mutex<Option<Result<Vec<ExperimentRow>>>>> = cfg.seeds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= cfg.seeds.len() {
            break;
        }
        let seed = cfg.seeds[i];
        let run = SeedRun { data, cfg, seed, dir: out_dir.map(|d| d.join(format!("seed_{seed}"))) };
        *results[i].lock().unwrap() = Some(run.run());
    };
    let jobs = cfg.jobs.min(cfg.seeds.len()).max(1);
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }

    let mut rows = Vec::new();
    for r in results {
        rows.extend(r.into_inner().unwrap().expect("every seed was processed")?);
    }
    let result = ExperimentResult { rows };
    if let Some(dir) = out_dir {
        result.write_to(dir)?;
    }
    Ok(result)
}
