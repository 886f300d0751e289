//! Pipeline stages. Each stage is skipped when the ledger already holds a
//! record with the same stage hash and its artifacts exist, unless forced.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::ledger::{unix_now, Ledger, RunRecord};
use super::{ExperimentConfig, Method, Report};
use crate::contrastive::{embed_corpus, pretrain, random_checkpoint, write_loss_curve, PretrainData};
use crate::detect::{evaluate, finetune, write_detections, Detector};
use crate::metrics::{domain_probe, embed_project, write_projection_csv, EvalReport, ProbeResult};
use crate::nn::Checkpoint;
use crate::pairing::{count_possible_positives, MapperBank};
use crate::synthgen::{build_dataset, Dataset, Image, Split, StyleId};
use crate::{Error, Result};

/// Environment variable setting how many runs `run_all` executes at once.
pub const THREADS_ENV: &str = "MSVCL_THREADS";

pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub seen_styles: Vec<StyleId>,
    pub unseen_styles: Vec<StyleId>,
    pub images: usize,
    pub pretrain_images: usize,
    /// Same-source style pairs available to MSCL: `N * C(M, 2)`.
    pub possible_positives: u64,
}

pub struct Runner {
    cfg: ExperimentConfig,
    root: PathBuf,
    ledger: Ledger,
    force: bool,
}

fn run_name(method: Method, seed: u64) -> String {
    format!("{method}-s{seed}")
}

impl Runner {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Self {
        let root = cfg.output_dir.clone();
        Self {
            ledger: Ledger::new(&root),
            cfg,
            root,
            force,
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }

    fn done(&self, stage: &str, run: &str, hash: &str) -> Result<Option<RunRecord>> {
        let hit = if self.force {
            None
        } else {
            self.ledger.completed(stage, hash)?
        };
        if hit.is_some() {
            log::info!("{stage} {run}: up to date");
        } else {
            log::info!("{stage} {run}: running");
        }
        Ok(hit)
    }

    fn record(&self, stage: &str, method: Option<Method>, seed: Option<u64>, hash: String, started: u64, artifacts: &[&Path], summary: serde_json::Value) -> Result<()> {
        self.ledger.append(&RunRecord {
            stage: stage.into(),
            method: method.map(|m| m.to_string()).unwrap_or_default(),
            seed,
            config_hash: hash,
            started_unix: started,
            finished_unix: unix_now(),
            artifacts: artifacts.iter().map(|p| self.rel(p)).collect(),
            summary,
        })
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn checkpoint_path(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join("pretrain").join(run_name(method, seed)).join("encoder.ckpt")
    }

    pub fn detector_path(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join("finetune").join(run_name(method, seed)).join("detector.ckpt")
    }

    pub fn eval_path(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join("eval").join(run_name(method, seed)).join("eval.json")
    }

    pub fn probe_path(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join("probe").join(run_name(method, seed)).join("probe.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    fn summary(&self) -> Result<DataSummary> {
        let m = &self.cfg.dataset;
        let n_seen = m.seen_styles.len();
        let pretrain_images: usize = m.seen_styles.iter().map(|&s| m.expected_images(s, Split::Pretrain)).sum();
        let images = m
            .all_styles()
            .map(|s| Split::ALL.iter().map(|&sp| m.expected_images(s, sp)).sum::<usize>())
            .sum();
        Ok(DataSummary {
            seen_styles: m.seen_styles.clone(),
            unseen_styles: m.unseen_styles.clone(),
            images,
            pretrain_images,
            possible_positives: count_possible_positives(pretrain_images as u64, n_seen as u64)?,
        })
    }

    pub fn gen_data(&self) -> Result<DataSummary> {
        let hash = self.cfg.dataset_hash();
        let summary = self.summary()?;
        if self.done("gen-data", "dataset", &hash)?.is_some() {
            return Ok(summary);
        }
        let started = unix_now();
        let dir = self.dataset_dir();
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        build_dataset(&self.cfg.dataset, &dir)?;
        self.record(
            "gen-data",
            None,
            None,
            hash,
            started,
            &[&dir.join("index.jsonl"), &dir.join("manifest.json")],
            serde_json::to_value(&summary)?,
        )?;
        Ok(summary)
    }

    fn open_dataset(&self) -> Result<Dataset> {
        let dir = self.dataset_dir();
        if !dir.join("index.jsonl").exists() {
            return Err(Error::MissingArtifact(dir.join("index.jsonl")));
        }
        let ds = Dataset::open(&dir)?;
        if ds.manifest != self.cfg.dataset {
            return Err(Error::Config(format!(
                "dataset at {} was built from a different manifest; rerun gen-data",
                dir.display()
            )));
        }
        Ok(ds)
    }

    fn load_checked(&self, path: &Path, expected_hash: &str) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.provenance.config_hash != expected_hash {
            return Err(Error::Checkpoint(format!(
                "{} was produced by a different configuration; rerun the stage that creates it",
                path.display()
            )));
        }
        Ok(ckpt)
    }

    pub fn pretrain(&self, method: Method, seed: u64) -> Result<PathBuf> {
        let hash = self.cfg.pretrain_hash(method, seed);
        let path = self.checkpoint_path(method, seed);
        if self.done("pretrain", &run_name(method, seed), &hash)?.is_some() {
            return Ok(path);
        }
        let started = unix_now();
        std::fs::create_dir_all(path.parent().expect("run dir"))?;
        let mut artifacts = vec![path.clone()];
        let summary = match method {
            Method::Random => {
                random_checkpoint(&self.cfg.pretrain.encoder, seed, &hash)?.save(&path)?;
                json!({ "steps": 0 })
            }
            Method::Pretrained(scheme) => {
                let ds = self.open_dataset()?;
                let subjects = ds.pretrain_subjects()?;
                let seen = &self.cfg.dataset.seen_styles;
                let mut mappers = Vec::new();
                for &a in seen {
                    for &b in seen {
                        if a != b {
                            mappers.push(ds.mapper(a, b)?);
                        }
                    }
                }
                let bank = MapperBank::new(mappers);
                let data = PretrainData {
                    subjects: &subjects,
                    mappers: &bank,
                    seen_styles: seen,
                };
                let out = pretrain(&self.cfg.pretrain.for_run(scheme, seed), &data, &hash)?;
                out.checkpoint.save(&path)?;
                let curve = path.with_file_name("loss.csv");
                write_loss_curve(&curve, &out.loss_curve)?;
                artifacts.push(curve);
                let c = &out.loss_curve;
                json!({
                    "steps": c.len(),
                    "first_loss": c.first(),
                    "last_loss": c.last(),
                })
            }
        };
        let refs: Vec<&Path> = artifacts.iter().map(|p| p.as_path()).collect();
        self.record("pretrain", Some(method), Some(seed), hash, started, &refs, summary)?;
        Ok(path)
    }

    fn seen_split(&self, ds: &Dataset, split: Split) -> Result<Vec<crate::synthgen::LabeledImage>> {
        let mut out = Vec::new();
        for &s in &self.cfg.dataset.seen_styles {
            out.extend(ds.labeled(s, split)?);
        }
        Ok(out)
    }

    pub fn finetune(&self, method: Method, seed: u64) -> Result<PathBuf> {
        let hash = self.cfg.finetune_hash(method, seed);
        let path = self.detector_path(method, seed);
        if self.done("finetune", &run_name(method, seed), &hash)?.is_some() {
            return Ok(path);
        }
        let started = unix_now();
        let ckpt_path = self.checkpoint_path(method, seed);
        if !ckpt_path.exists() {
            return Err(Error::MissingArtifact(ckpt_path));
        }
        let ckpt = self.load_checked(&ckpt_path, &self.cfg.pretrain_hash(method, seed))?;
        let ds = self.open_dataset()?;
        let train = self.seen_split(&ds, Split::DetectTrain)?;
        let val = self.seen_split(&ds, Split::DetectVal)?;
        let out = finetune(&ckpt, &train, &val, &self.cfg.detect, seed)?;

        std::fs::create_dir_all(path.parent().expect("run dir"))?;
        let mut prov = ckpt.provenance.clone();
        prov.config_hash = hash.clone();
        prov.extra.insert("best_epoch".into(), json!(out.best_epoch));
        out.detector.to_checkpoint(prov).save(&path)?;
        let curve = path.with_file_name("val_curve.csv");
        let mut text = String::from("epoch,train_loss,val_map\n");
        for (e, (l, m)) in out.train_loss.iter().zip(&out.val_map).enumerate() {
            text.push_str(&format!("{e},{l},{m}\n"));
        }
        std::fs::write(&curve, text)?;
        self.record(
            "finetune",
            Some(method),
            Some(seed),
            hash,
            started,
            &[&path, &curve],
            json!({ "best_epoch": out.best_epoch, "best_val_map": out.val_map[out.best_epoch] }),
        )?;
        Ok(path)
    }

    pub fn eval(&self, method: Method, seed: u64) -> Result<EvalReport> {
        let hash = self.cfg.eval_hash(method, seed);
        let path = self.eval_path(method, seed);
        if self.done("eval", &run_name(method, seed), &hash)?.is_some() {
            return self.load_eval(method, seed);
        }
        let started = unix_now();
        let det_path = self.detector_path(method, seed);
        if !det_path.exists() {
            return Err(Error::MissingArtifact(det_path));
        }
        let det = Detector::from_checkpoint(&self.load_checked(&det_path, &self.cfg.finetune_hash(method, seed))?)?;
        let ds = self.open_dataset()?;
        let dir = path.parent().expect("run dir");
        std::fs::create_dir_all(dir)?;
        let mut per_style = std::collections::BTreeMap::new();
        let mut artifacts = vec![path.clone()];
        for s in self.cfg.dataset.all_styles() {
            let test = ds.labeled(s, Split::DetectTest)?;
            if test.is_empty() {
                continue;
            }
            let (aps, dets) = evaluate(&det, &test, &self.cfg.detect.infer(), self.cfg.eval.iou_thresh)?;
            let dpath = dir.join(format!("detections_{s}.jsonl"));
            write_detections(&dpath, &dets)?;
            artifacts.push(dpath);
            per_style.insert(s, aps);
        }
        let report = EvalReport {
            method: method.to_string(),
            per_style,
            seen: self.cfg.dataset.seen_styles.clone(),
            unseen: self.cfg.dataset.unseen_styles.clone(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        let refs: Vec<&Path> = artifacts.iter().map(|p| p.as_path()).collect();
        self.record(
            "eval",
            Some(method),
            Some(seed),
            hash,
            started,
            &refs,
            json!({ "seen_avg": report.seen_avg(), "unseen_avg": report.unseen_avg() }),
        )?;
        Ok(report)
    }

    fn load_eval(&self, method: Method, seed: u64) -> Result<EvalReport> {
        let path = self.eval_path(method, seed);
        let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn probe_corpus(&self, ds: &Dataset) -> Result<(Vec<Image>, Vec<usize>, Vec<StyleId>, Vec<u64>)> {
        let (mut images, mut labels, mut styles, mut subjects) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (k, s) in self.cfg.dataset.all_styles().enumerate() {
            for r in ds.records_for(s, Split::DetectTest) {
                images.push(ds.read_image(r)?);
                labels.push(k);
                styles.push(s);
                subjects.push(r.subject_id);
            }
        }
        Ok((images, labels, styles, subjects))
    }

    /// Domain probe and 2-D projection of backbone features on the test
    /// images of every style.
    pub fn probe(&self, method: Method, seed: u64) -> Result<ProbeResult> {
        let hash = self.cfg.probe_hash(method, seed);
        let path = self.probe_path(method, seed);
        if self.done("probe", &run_name(method, seed), &hash)?.is_some() {
            return self.load_probe(method, seed);
        }
        let started = unix_now();
        let ckpt_path = self.checkpoint_path(method, seed);
        if !ckpt_path.exists() {
            return Err(Error::MissingArtifact(ckpt_path));
        }
        let ckpt = self.load_checked(&ckpt_path, &self.cfg.pretrain_hash(method, seed))?;
        let ds = self.open_dataset()?;
        let (images, labels, styles, subjects) = self.probe_corpus(&ds)?;
        let feats = embed_corpus(&ckpt, &images)?;
        let probe_cfg = crate::metrics::ProbeConfig {
            seed,
            ..self.cfg.eval.probe.clone()
        };
        let result = domain_probe(&feats, &labels, &probe_cfg)?;
        std::fs::create_dir_all(path.parent().expect("run dir"))?;
        std::fs::write(&path, serde_json::to_string_pretty(&result)?)?;
        let proj = embed_project(&feats)?;
        let proj_path = path.with_file_name("projection.csv");
        write_projection_csv(&proj_path, &proj, &styles, &subjects)?;
        self.record(
            "probe",
            Some(method),
            Some(seed),
            hash,
            started,
            &[&path, &proj_path],
            json!({ "accuracy": result.accuracy, "explained_variance": proj.explained }),
        )?;
        Ok(result)
    }

    fn load_probe(&self, method: Method, seed: u64) -> Result<ProbeResult> {
        let path = self.probe_path(method, seed);
        let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Assembles every configured (method, seed) into the report files.
    pub fn report(&self) -> Result<Report> {
        let mut evals = Vec::new();
        let mut probes = Vec::new();
        for &m in &self.cfg.methods {
            let mut e = Vec::new();
            let mut p = Vec::new();
            for &s in &self.cfg.seeds {
                let r = self.load_eval(m, s)?;
                if r.method != m.as_str() {
                    return Err(Error::Eval(format!("{} holds results of {}", self.eval_path(m, s).display(), r.method)));
                }
                e.push(r);
                p.push(self.load_probe(m, s)?);
            }
            evals.push(e);
            probes.push(p);
        }
        let report = Report::assemble(
            &self.cfg.methods,
            &self.cfg.seeds,
            &self.cfg.dataset.seen_styles,
            &self.cfg.dataset.unseen_styles,
            &evals,
            &probes,
        );
        let dir = self.report_dir();
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("report.csv"), report.mean_csv())?;
        std::fs::write(dir.join("report_range.csv"), report.range_csv())?;
        std::fs::write(dir.join("probe.csv"), report.probe_csv())?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    }

    /// pretrain, finetune, eval and probe for one (method, seed).
    pub fn run_one(&self, method: Method, seed: u64) -> Result<()> {
        self.pretrain(method, seed)?;
        self.finetune(method, seed)?;
        self.eval(method, seed)?;
        self.probe(method, seed)?;
        Ok(())
    }

    /// The full matrix. Independent runs execute on up to `threads` threads;
    /// results do not depend on the thread count.
    pub fn run_all(&self, threads: usize) -> Result<Report> {
        self.gen_data()?;
        let jobs: Vec<(Method, u64)> = self
            .cfg
            .methods
            .iter()
            .flat_map(|&m| self.cfg.seeds.iter().map(move |&s| (m, s)))
            .collect();
        let next = AtomicUsize::new(0);
        let first_error: Mutex<Option<(usize, Error)>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..threads.clamp(1, jobs.len().max(1)) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&(m, s)) = jobs.get(i) else { break };
                    if let Err(e) = self.run_one(m, s) {
                        let mut slot = first_error.lock().expect("error slot");
                        if slot.as_ref().is_none_or(|(j, _)| i < *j) {
                            *slot = Some((i, e));
                        }
                    }
                });
            }
        });
        if let Some((_, e)) = first_error.into_inner().expect("error slot") {
            return Err(e);
        }
        self.report()
    }
}
