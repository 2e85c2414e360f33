//! Implementations of the `sketch-refine` verbs. Each command takes an
//! already-loaded [`RunConfig`] plus explicit paths, writes its artifacts
//! and returns what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::config::{Provenance, RunConfig};
use crate::error::{Error, Result};
use crate::eval::AgreementMap;
use crate::manifest::{DatasetManifest, ManifestEntry};
use crate::phantom::generate_cohort;
use crate::plots;
use crate::report::{self, EvaluationReport};
use crate::train::{self, FoldReport};
use crate::volume::{load_volume, save_volume};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SKETCHER_CHECKPOINT: &str = "sketcher.ckpt";
pub const REFINER_CHECKPOINT: &str = "refiner.ckpt";
pub const PREDICTION_FILE: &str = "dvr_pred.mvol";
pub const SKETCH_FILE: &str = "sketch.mvol";
pub const REPORT_FILE: &str = "report.txt";
const LOCK_FILE: &str = ".sketch-refine.lock";
const LOG_COLUMNS: &str =
    "# epoch\td_loss\tg_adversarial\tl1\tl1_lesion\tl1_nawm\tl1_other\twall_s";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the phantom cohort (one directory per subject) and its manifest.
pub fn cmd_phantom_gen(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(out)?;
    let cohort = generate_cohort(&cfg.phantom, cfg.cohort.patients, cfg.cohort.controls)?;
    let mut entries = Vec::with_capacity(cohort.len());
    for s in &cohort {
        let e = ManifestEntry::standard(&s.id, s.is_patient);
        fs::create_dir_all(out.join(&s.id)).map_err(|err| Error::io(out.join(&s.id), err))?;
        for (v, p) in s.stack.channels().iter().zip(&e.channels) {
            save_volume(v, out.join(p))?;
        }
        save_volume(&s.dvr, out.join(&e.dvr))?;
        save_volume(&s.masks.lesion, out.join(&e.lesion))?;
        save_volume(&s.masks.nawm, out.join(&e.nawm))?;
        save_volume(&s.demyelination_truth, out.join(&e.demyelination))?;
        entries.push(e);
    }
    let manifest = DatasetManifest {
        provenance: Some(Provenance::of(cfg)),
        entries,
        base_dir: out.to_path_buf(),
    };
    let path = out.join(MANIFEST_FILE);
    write(&path, manifest.to_text())?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Sketcher,
    Refiner,
    Both,
}

impl FromStr for TrainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sketcher" => Ok(Self::Sketcher),
            "refiner" => Ok(Self::Refiner),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!(
                "stage must be sketcher, refiner or both, got `{s}`"
            ))),
        }
    }
}

fn log_text(prov: &Provenance, lines: &[String]) -> String {
    let mut out = format!(
        "# config_hash {}\n# seed {}\n{LOG_COLUMNS}\n",
        prov.config_hash, prov.seed
    );
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    out
}

/// Checkpoints written by [`cmd_train`], in the order they were produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainArtifacts {
    pub sketcher: Option<PathBuf>,
    pub refiner: Option<PathBuf>,
}

/// Trains the requested stage(s). The refiner stage reads
/// `out/sketcher.ckpt`, which `stage = both` writes first.
pub fn cmd_train(
    cfg: &RunConfig,
    manifest: &Path,
    out: &Path,
    stage: TrainStage,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let sketcher_path = out.join(SKETCHER_CHECKPOINT);
    if stage == TrainStage::Refiner && !sketcher_path.exists() {
        return Err(Error::Missing(format!(
            "sketcher checkpoint {} not found; train the sketcher stage first",
            sketcher_path.display()
        )));
    }
    let subjects = DatasetManifest::load(manifest)?.load_subjects()?;
    let _lock = OutputLock::acquire(out)?;
    let prov = Provenance::of(cfg);
    let text = cfg.canonical_text();
    let mut artifacts = TrainArtifacts::default();
    if stage != TrainStage::Refiner {
        let run = train::train_sketcher(&subjects, &cfg.train, &text)?;
        run.checkpoint.save(&sketcher_path)?;
        write(&out.join("sketcher.log"), log_text(&prov, &run.log))?;
        artifacts.sketcher = Some(sketcher_path.clone());
    }
    if stage != TrainStage::Sketcher {
        let sketcher = Checkpoint::load(&sketcher_path)?;
        let run = train::train_refiner(&subjects, &sketcher, &cfg.train, &text)?;
        let path = out.join(REFINER_CHECKPOINT);
        run.checkpoint.save(&path)?;
        write(&out.join("refiner.log"), log_text(&prov, &run.log))?;
        artifacts.refiner = Some(path);
    }
    Ok(artifacts)
}

fn checkpoint_provenance(ckpt: &Checkpoint) -> Result<Provenance> {
    let cfg = RunConfig::from_toml_str(&ckpt.config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded configuration is invalid: {e}")))?;
    Ok(Provenance::of(&cfg))
}

/// Writes `out/<id>/dvr_pred.mvol` and `out/<id>/sketch.mvol` for every
/// manifest subject, plus an index with provenance.
pub fn cmd_predict(checkpoints: &Path, manifest: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let load = |name: &str| -> Result<Checkpoint> {
        let p = checkpoints.join(name);
        Checkpoint::load(&p).map_err(|e| match e {
            Error::MissingFile(_) => {
                Error::Missing(format!("checkpoint {} not found", p.display()))
            }
            e => e,
        })
    };
    let sketcher = load(SKETCHER_CHECKPOINT)?;
    let refiner = load(REFINER_CHECKPOINT)?;
    let (s, r) = (sketcher.generator()?, refiner.generator()?);
    let m = DatasetManifest::load(manifest)?;
    let subjects = m.load_subjects()?;
    let prov = checkpoint_provenance(&refiner)?;
    let _lock = OutputLock::acquire(out)?;
    let mut written = Vec::with_capacity(subjects.len());
    let mut index = format!(
        "# config_hash {}\n# seed {}\nid\tprediction\tsketch\n",
        prov.config_hash, prov.seed
    );
    for subj in &subjects {
        let p = train::predict_with(&s, &r, &subj.stack)?;
        let dir = out.join(&subj.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_volume(&p.refined, dir.join(PREDICTION_FILE))?;
        save_volume(&p.sketch, dir.join(SKETCH_FILE))?;
        index.push_str(&format!(
            "{0}\t{0}/{PREDICTION_FILE}\t{0}/{SKETCH_FILE}\n",
            subj.id
        ));
        written.push(dir.join(PREDICTION_FILE));
    }
    write(&out.join("predictions.tsv"), index)?;
    Ok(written)
}

fn write_report(
    report: &EvaluationReport,
    agreements: &[(String, AgreementMap)],
    out: &Path,
) -> Result<()> {
    write(&out.join(REPORT_FILE), report.to_text())?;
    write(&out.join("roi_boxplot.svg"), plots::roi_box_plot(report))?;
    write(&out.join("subject_lines.svg"), plots::subject_lines(report))?;
    write(
        &out.join("demyelination_bars.svg"),
        plots::demyelination_bars(report),
    )?;
    for (id, map) in agreements {
        let z = plots::busiest_slice(map);
        write(
            &out.join("agreement").join(format!("{id}.svg")),
            plots::agreement_slice(map, z, id, &report.provenance),
        )?;
    }
    Ok(())
}

/// Evaluates `predictions/<id>/dvr_pred.mvol` against each subject's
/// reference DVR and writes the report and figures.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    manifest: &Path,
    predictions: &Path,
    out: &Path,
) -> Result<EvaluationReport> {
    cfg.validate()?;
    let m = DatasetManifest::load(manifest)?;
    let subjects = m.load_subjects()?;
    let preds = subjects
        .iter()
        .map(|s| {
            let p = predictions.join(&s.id).join(PREDICTION_FILE);
            load_volume(&p).map_err(|e| match e {
                Error::MissingFile(_) => Error::Missing(format!(
                    "prediction for subject {} not found at {}",
                    s.id,
                    p.display()
                )),
                e => e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let _lock = OutputLock::acquire(out)?;
    let mut evals = Vec::with_capacity(subjects.len());
    let mut agreements = Vec::new();
    for (s, p) in subjects.iter().zip(&preds) {
        let (e, a) =
            report::evaluate_subject(&s.id, s.is_patient, &s.masks, &s.dvr, p, &cfg.demyelination)?;
        evals.push(e);
        if let Some(a) = a {
            agreements.push((s.id.clone(), a));
        }
    }
    let report = EvaluationReport::new(Provenance::of(cfg), evals);
    write_report(&report, &agreements, out)?;
    Ok(report)
}

/// Per-fold results and the report over all held-out predictions.
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldReport>,
    pub aggregate: EvaluationReport,
}

/// Fold-level error summary, one line per fold.
pub fn fold_summary(prov: &Provenance, folds: &[FoldReport]) -> String {
    let mut out = format!(
        "# config_hash {}\n# seed {}\nfold\tn_train\tn_test\tmae_sketch\tmae_refined\tmae_baseline\tlesion_mae_sketch\tlesion_mae_refined\tmean_dice\n",
        prov.config_hash, prov.seed
    );
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    for f in folds {
        let dice = train::mean_dice(&f.subjects);
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\n",
            f.fold,
            f.train.len(),
            f.test.len(),
            f.mean_mae_sketch(),
            f.mean_mae_refined(),
            f.mean_mae_baseline(),
            opt(f.lesion_mae_sketch()),
            opt(f.lesion_mae_refined()),
            opt(dice)
        ));
    }
    out
}

/// Runs k-fold cross-validation (`k` defaults to the config value) and
/// writes one report per fold, the aggregate report with figures and a
/// fold summary.
pub fn cmd_cross_validate(
    cfg: &RunConfig,
    manifest: &Path,
    out: &Path,
    k: Option<usize>,
) -> Result<CrossValidation> {
    cfg.validate()?;
    let k = k.unwrap_or(cfg.cross_validation.k);
    let subjects = DatasetManifest::load(manifest)?.load_subjects()?;
    let _lock = OutputLock::acquire(out)?;
    let prov = Provenance::of(cfg);
    let folds = train::cross_validate(
        &subjects,
        &cfg.train,
        k,
        &cfg.demyelination,
        &cfg.canonical_text(),
    )?;
    for f in &folds {
        let dir = out.join(format!("fold_{}", f.fold));
        let fold_report = EvaluationReport::new(
            prov.clone(),
            f.subjects.iter().map(|s| s.eval.clone()).collect(),
        );
        write(&dir.join(REPORT_FILE), fold_report.to_text())?;
        write(&dir.join("sketcher.log"), log_text(&prov, &f.sketcher_log))?;
        write(&dir.join("refiner.log"), log_text(&prov, &f.refiner_log))?;
    }
    let aggregate = train::aggregate_report(prov.clone(), &folds);
    write_report(&aggregate, &[], out)?;
    write(&out.join("folds.tsv"), fold_summary(&prov, &folds))?;
    Ok(CrossValidation { folds, aggregate })
}
