use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use semgan::data::{load_domain, split_schedule, LabeledImage};
use semgan::eval::evaluate_model;
use semgan::nets::{load_checkpoint, save_checkpoint, NetKind, NetworkHandle};
use semgan::pipeline::{
    config_hash, embed_domain_knowledge, finetune_on_generated, pretrain_detector, run_incremental_experiment,
    train_semgan, translate_dataset, write_translated, ExperimentData, Method, STAGE_EMBED, STAGE_TRAIN_GAN,
};
use semgan::scenegen::{generate_dataset, StyleName};
use semgan::Error;

use crate::config::RunConfig;
use crate::{version_string, Cli, CliError, Command, FinetuneStage};

type Net = NetworkHandle<f32>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io { path: path.to_path_buf(), source: e })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

#[derive(Serialize)]
struct RunInfo<'a> {
    version: String,
    command: &'a str,
    invocation: &'a serde_json::Value,
    seed: u64,
    experiment_seeds: &'a [u64],
}

#[derive(Serialize, serde::Deserialize)]
struct StageMarker {
    stage: String,
    invocation_hash: String,
    outputs: BTreeMap<String, String>,
}

/// A run directory with its audit files written.
struct RunDir {
    dir: PathBuf,
    stage: String,
    invocation_hash: String,
}

impl RunDir {
    /// Creates the directory and writes the resolved config and run info.
    /// Returns `None` when `--resume` finds a matching completion marker.
    fn prepare(
        cfg: &RunConfig,
        name: Option<&str>,
        stage: &str,
        invocation: serde_json::Value,
        resume: bool,
    ) -> Result<Option<Self>, CliError> {
        let dir = cfg.output_dir.join(name.unwrap_or(stage));
        let invocation_hash = config_hash(&(cfg, &invocation));
        let marker = dir.join("stage.json");
        if resume {
            if let Ok(text) = fs::read_to_string(&marker) {
                if let Ok(m) = serde_json::from_str::<StageMarker>(&text) {
                    if m.invocation_hash == invocation_hash {
                        println!("{stage}: up to date in {}", dir.display());
                        return Ok(None);
                    }
                }
            }
        }
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let _ = fs::remove_file(&marker);
        let cpath = dir.join("config.resolved.toml");
        fs::write(&cpath, cfg.to_toml()).map_err(|e| io_err(&cpath, e))?;
        let info = RunInfo {
            version: version_string(),
            command: stage,
            invocation: &invocation,
            seed: cfg.seeds.seed,
            experiment_seeds: &cfg.seeds.experiment,
        };
        write_json(&dir.join("run.json"), &info)?;
        Ok(Some(Self { dir, stage: stage.to_string(), invocation_hash }))
    }

    fn finish(&self, outputs: BTreeMap<String, String>) -> Result<(), CliError> {
        let m = StageMarker { stage: self.stage.clone(), invocation_hash: self.invocation_hash.clone(), outputs };
        write_json(&self.dir.join("stage.json"), &m)
    }
}

fn required(flag: Option<&PathBuf>, section: Option<&PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    let p = flag.or(section).cloned().ok_or_else(|| CliError::MissingInput(format!("`--{name}` (or data.{}) is required", name.replace('-', "_"))))?;
    if !p.exists() {
        return Err(CliError::MissingInput(format!("{} does not exist", p.display())));
    }
    Ok(p)
}

fn load_labeled(dir: &Path) -> Result<Vec<LabeledImage<f32>>, CliError> {
    Ok(load_domain(dir, true)?)
}

fn load_net(path: &Path, kind: NetKind) -> Result<Net, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(format!("checkpoint {} does not exist", path.display())));
    }
    let (net, _) = load_checkpoint::<f32>(path, None)?;
    if net.kind() != kind {
        return Err(Error::validation("checkpoint", format!("{} holds a {:?}, expected a {kind:?}", path.display(), net.kind())).into());
    }
    Ok(net)
}

fn outputs(items: &[(&str, &Net)]) -> BTreeMap<String, String> {
    items.iter().map(|(k, n)| (k.to_string(), n.params_hash())).collect()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    init_logging(cli.global.verbose);
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    cfg.resolve_output_root(cli.global.output_dir.as_deref());
    if let Some(s) = cli.global.seed {
        cfg.seeds.seed = s;
    }
    let name = cli.global.run_name.as_deref();
    let resume = cli.global.resume;

    match cli.command {
        Command::Gen(a) => {
            if let Some(s) = a.canvas_size {
                cfg.scenegen.canvas_size = s;
            }
            let style = StyleName::parse(&a.style)?;
            let spec = cfg.scenegen.spec(style, cfg.seeds.seed);
            let m = generate_dataset(&spec, a.count, &a.out)?;
            println!("wrote {} {} images to {}", m.entries.len(), m.style, a.out.display());
            Ok(())
        }
        Command::Pretrain(a) => {
            if let Some(s) = a.steps {
                cfg.pipeline.pretrain.steps = s;
            }
            cfg.validate()?;
            let source = required(a.source.as_ref(), cfg.data.source.as_ref(), "source")?;
            let inv = serde_json::json!({ "source": source });
            let Some(run) = RunDir::prepare(&cfg, name, "pretrain", inv, resume)? else { return Ok(()) };
            let data = load_labeled(&source)?;
            let out = pretrain_detector(&data, &cfg.train_config(cfg.seeds.seed))?;
            save_checkpoint(&run.dir.join("detector.json"), &out.net, None)?;
            write_json(&run.dir.join("curve.json"), &out.curve)?;
            run.finish(outputs(&[("detector", &out.net)]))?;
            println!("pretrained detector (best step {}) -> {}", out.best_step, run.dir.join("detector.json").display());
            Ok(())
        }
        Command::Finetune(a) => {
            if let Some(s) = a.steps {
                match a.stage {
                    FinetuneStage::Embed => cfg.pipeline.embed.steps = s,
                    FinetuneStage::Generated => cfg.pipeline.finetune.steps = s,
                }
            }
            cfg.validate()?;
            let parent = load_net(&a.detector, NetKind::Detector)?;
            let train_cfg = cfg.train_config(cfg.seeds.seed);
            let stage_name = match a.stage {
                FinetuneStage::Embed => "embed",
                FinetuneStage::Generated => "finetune",
            };
            let inv = serde_json::json!({
                "stage": stage_name, "detector": a.detector, "detector_hash": parent.params_hash(),
                "labeled": a.labeled, "k": a.k, "generated": a.generated, "valid": a.valid,
            });
            let out = match a.stage {
                FinetuneStage::Embed => {
                    let labeled = required(a.labeled.as_ref(), cfg.data.target_labeled.as_ref(), "labeled")?;
                    let k = a.k.ok_or_else(|| CliError::MissingInput("`--k` is required for the embed stage".into()))?;
                    let sched = split_schedule(k)?;
                    let Some(run) = RunDir::prepare(&cfg, name, stage_name, inv, resume)? else { return Ok(()) };
                    let pool = load_labeled(&labeled)?;
                    if k > pool.len() {
                        return Err(Error::validation("k", format!("{k} exceeds the {} labeled images", pool.len())).into());
                    }
                    let mut perm: Vec<usize> = (0..pool.len()).collect();
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seeds.seed));
                    let pick = |r: std::ops::Range<usize>| perm[r].iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
                    let out = embed_domain_knowledge(&parent, &pick(0..sched.a), &pick(sched.a..k), &train_cfg, cfg.seeds.seed)?;
                    (run, out)
                }
                FinetuneStage::Generated => {
                    let generated = required(a.generated.as_ref(), None, "generated")?;
                    let valid = match &a.valid {
                        Some(v) => load_labeled(&required(Some(v), None, "valid")?)?,
                        None => Vec::new(),
                    };
                    let Some(run) = RunDir::prepare(&cfg, name, stage_name, inv, resume)? else { return Ok(()) };
                    let gen = load_labeled(&generated)?;
                    let out = finetune_on_generated(&parent, &gen, &valid, &[], &train_cfg, cfg.seeds.seed)?;
                    (run, out)
                }
            };
            let (run, out) = out;
            save_checkpoint(&run.dir.join("detector.json"), &out.net, None)?;
            write_json(&run.dir.join("curve.json"), &out.curve)?;
            run.finish(outputs(&[("detector", &out.net)]))?;
            println!("{stage_name} detector (best step {}) -> {}", out.best_step, run.dir.join("detector.json").display());
            Ok(())
        }
        Command::TrainGan(a) => {
            if let Some(s) = a.steps {
                cfg.pipeline.gan.steps = s;
            }
            if let Some(l) = a.lambda_t {
                cfg.losses.lambda_t = l;
            }
            cfg.validate()?;
            let detector = load_net(&a.detector, NetKind::Detector)?;
            if detector.trainable {
                return Err(Error::StageOrder { stage: STAGE_TRAIN_GAN.into(), expected: STAGE_EMBED.into() }.into());
            }
            let source = required(a.source.as_ref(), cfg.data.source.as_ref(), "source")?;
            let target = required(a.target.as_ref(), cfg.data.target_unlabeled.as_ref(), "target")?;
            let inv = serde_json::json!({
                "detector": a.detector, "detector_hash": detector.params_hash(), "source": source, "target": target,
            });
            let Some(run) = RunDir::prepare(&cfg, name, "train_gan", inv, resume)? else { return Ok(()) };
            let src = load_labeled(&source)?;
            let tgt: Vec<LabeledImage<f32>> = load_domain(&target, false)?;
            let train_cfg = cfg.train_config(cfg.seeds.seed);
            let out = train_semgan(&src, &tgt, &detector, &train_cfg.gan, cfg.seeds.seed, Some(&run.dir))?;
            let n = &out.nets;
            for (file, net) in [("g_a", &n.g_a), ("g_b", &n.g_b), ("d_a", &n.d_a), ("d_b", &n.d_b)] {
                save_checkpoint(&run.dir.join("checkpoints").join(format!("{file}.json")), net, None)?;
            }
            run.finish(outputs(&[("g_a", &n.g_a), ("g_b", &n.g_b), ("d_a", &n.d_a), ("d_b", &n.d_b), ("detector", &detector)]))?;
            println!("generators -> {}", run.dir.join("checkpoints").display());
            Ok(())
        }
        Command::Translate(a) => {
            let g_a = load_net(&a.generator, NetKind::Generator)?;
            let source = required(Some(&a.source), None, "source")?;
            let inv = serde_json::json!({ "generator": a.generator, "generator_hash": g_a.params_hash(), "source": source, "out": a.out });
            let Some(run) = RunDir::prepare(&cfg, name, "translate", inv, resume)? else { return Ok(()) };
            let out_dir = a.out.clone().unwrap_or_else(|| run.dir.join("translated"));
            let src = load_labeled(&source)?;
            let images = translate_dataset(&g_a, &src)?;
            let manifest = write_translated(&out_dir, &images, &g_a, Some(&source))?;
            run.finish(outputs(&[("generator", &g_a)]))?;
            println!("translated {} images -> {}", manifest.entries.len(), out_dir.display());
            Ok(())
        }
        Command::Eval(a) => {
            if let Some(c) = a.conf_threshold {
                cfg.eval.conf_threshold = c;
            }
            if let Some(n) = a.nms_threshold {
                cfg.eval.nms_threshold = n;
            }
            cfg.validate()?;
            let net = load_net(&a.checkpoint, NetKind::Detector)?;
            let test = required(a.test.as_ref(), cfg.data.test.as_ref(), "test")?;
            let inv = serde_json::json!({ "checkpoint": a.checkpoint, "checkpoint_hash": net.params_hash(), "test": test });
            let Some(run) = RunDir::prepare(&cfg, name, "eval", inv, resume)? else { return Ok(()) };
            let data = load_labeled(&test)?;
            let report = evaluate_model(&net, &data, cfg.eval.conf_threshold, cfg.eval.nms_threshold)?;
            write_json(&run.dir.join("report.json"), &report)?;
            for thr in [0.3, 0.5] {
                if let Some(csv) = report.pr_csv(thr) {
                    let p = run.dir.join(format!("pr_{}.csv", (thr * 100.0).round() as u32));
                    fs::write(&p, csv).map_err(|e| io_err(&p, e))?;
                }
            }
            run.finish(outputs(&[("detector", &net)]))?;
            let summary = serde_json::json!({ "ap30": report.ap30, "ap50": report.ap50, "images": report.images });
            println!("{summary}");
            Ok(())
        }
        Command::Experiment(a) => {
            if let Some(k) = a.k_list {
                cfg.experiment.k_list = k;
            }
            if let Some(m) = a.methods {
                cfg.experiment.methods = m.iter().map(|s| Method::parse(s)).collect::<Result<_, _>>()?;
            }
            if let Some(s) = a.seeds {
                cfg.seeds.experiment = s;
            }
            if let Some(j) = a.jobs {
                cfg.experiment.jobs = j;
            }
            cfg.validate()?;
            let exp = cfg.experiment_config();
            exp.validate()?;
            let needs_gan = exp.methods.iter().any(|m| matches!(m, Method::Cyclegan | Method::SemganFineTuned));
            let needs_k = exp.methods.iter().any(|m| !m.label_free()) && !exp.k_list.is_empty();
            let source = required(a.source.as_ref(), cfg.data.source.as_ref(), "source")?;
            let test = required(a.test.as_ref(), cfg.data.test.as_ref(), "test")?;
            let target_u = if needs_gan {
                Some(required(a.target_unlabeled.as_ref(), cfg.data.target_unlabeled.as_ref(), "target-unlabeled")?)
            } else {
                None
            };
            let target_l = if needs_k {
                Some(required(a.target_labeled.as_ref(), cfg.data.target_labeled.as_ref(), "target-labeled")?)
            } else {
                None
            };
            let inv = serde_json::json!({ "source": source, "test": test, "target_unlabeled": target_u, "target_labeled": target_l });
            let Some(run) = RunDir::prepare(&cfg, name, "experiment", inv, resume)? else {
                return Ok(());
            };
            let src = load_labeled(&source)?;
            let tst = load_labeled(&test)?;
            let tu: Vec<LabeledImage<f32>> = match &target_u {
                Some(p) => load_domain(p, false)?,
                None => Vec::new(),
            };
            let tl = match &target_l {
                Some(p) => load_labeled(p)?,
                None => Vec::new(),
            };
            let data = ExperimentData { source: &src, target_unlabeled: &tu, target_labeled: &tl, test: &tst };
            let result = run_incremental_experiment(&data, &exp, Some(&run.dir))?;
            run.finish(BTreeMap::from([("results_csv".to_string(), config_hash(&result.to_csv()))]))?;
            println!("{}", result.to_markdown());
            Ok(())
        }
    }
}
