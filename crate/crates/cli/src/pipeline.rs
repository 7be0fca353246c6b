//! The subcommands as library functions, so tests can drive them directly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flipflop_core::datagen::{self, make_pressure_set, make_split, Dataset};
use flipflop_core::lang::Split;
use flipflop_core::model::{self, ParamSet};
use flipflop_core::probes::{self, EvalReport, ModelPredictor, Policy, Predictor, ProbeReport};
use flipflop_core::train::{self, TrainOutputs};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::manifest::{digest_file, write_atomic, RunManifest};
use crate::plot;

/// A config bound to its run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

pub const DATASETS: [&str; 3] = ["train", "id_test", "ood_test"];

impl Run {
    pub fn new(config: ExperimentConfig, dir: PathBuf) -> Result<Self, CliError> {
        config.validate()?;
        Ok(Self { config, dir })
    }

    pub fn data_path(&self, name: &str) -> PathBuf {
        self.dir.join("data").join(format!("{name}.jsonl"))
    }

    pub fn train_dir(&self) -> PathBuf {
        self.dir.join("train")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.train_dir().join("final.json")
    }

    fn subject_dir(&self, stage: &str, subject: &Subject) -> PathBuf {
        match subject {
            Subject::Checkpoint(_) => self.dir.join(stage),
            Subject::Policy(p) => self.dir.join(stage).join(format!("policy-{}", p.name().replace(':', "-"))),
        }
    }

    fn manifest(&self) -> RunManifest {
        RunManifest::load_or_new(&self.dir, &self.config)
    }

    fn write_config_snapshot(&self) -> Result<(), CliError> {
        write_atomic(&self.dir.join("config.toml"), self.config.to_toml().as_bytes())
    }

    fn read_dataset(&self, name: &str, manifest: &RunManifest) -> Result<Dataset, CliError> {
        let path = self.data_path(name);
        if !path.exists() {
            return Err(CliError::MissingData(path));
        }
        if let Some(expected) = manifest.datasets.get(name) {
            let actual = digest_file(&self.dir, &path)?;
            if actual.sha256 != expected.sha256 {
                return Err(CliError::Config(format!(
                    "{} changed since generation (sha256 {} != {})",
                    path.display(),
                    actual.sha256,
                    expected.sha256
                )));
            }
        }
        Ok(datagen::read_jsonl(&path)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports always serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub files: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
}

/// Writes the train, ID-test and OOD-test splits (and optionally the
/// pressure set) and records their digests.
pub fn cmd_generate(run: &Run, with_pressure: bool) -> Result<GenerateSummary, CliError> {
    let start = Instant::now();
    let cfg = &run.config;
    let seeds = cfg.seeds();
    let gen = cfg.gen_config();
    let mut sets = vec![
        ("train", make_split(&gen, cfg.data.train_size, Split::Id, seeds.train_data)?),
        ("id_test", make_split(&gen, cfg.data.id_test_size, Split::Id, seeds.id_test_data)?),
        ("ood_test", make_split(&gen, cfg.data.ood_test_size, Split::Ood, seeds.ood_test_data)?),
    ];
    if with_pressure {
        sets.push(("pressure", make_pressure_set(&cfg.pressure, seeds.pressure)?));
    }
    let mut manifest = RunManifest::new(cfg);
    let mut summary = GenerateSummary { files: BTreeMap::new(), counts: BTreeMap::new() };
    for (name, ds) in &sets {
        let path = run.data_path(name);
        write_atomic(&path, datagen::to_jsonl(ds).as_bytes())?;
        let digest = digest_file(&run.dir, &path)?;
        summary.files.insert(name.to_string(), digest.sha256.clone());
        summary.counts.insert(name.to_string(), ds.len());
        manifest.datasets.insert(name.to_string(), digest);
    }
    run.write_config_snapshot()?;
    manifest.wall_clock.insert("generate".into(), start.elapsed().as_secs_f64());
    manifest.save(&run.dir)?;
    Ok(summary)
}

/// Deterministic record of a finished training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub converged: bool,
    pub epochs: usize,
    pub max_epochs: usize,
    pub steps: usize,
    pub sequences_consumed: usize,
    pub skipped_batches: usize,
    pub non_finite_steps: usize,
    pub final_id_exact_match: f64,
    pub best_id_exact_match: f64,
    pub eval_points: usize,
}

pub fn cmd_train(run: &Run) -> Result<TrainSummary, CliError> {
    let start = Instant::now();
    let cfg = &run.config;
    let mut manifest = run.manifest();
    let train_set = run.read_dataset("train", &manifest)?;
    let eval_set = run.read_dataset("id_test", &manifest)?.head(cfg.data.eval_subset);
    let outputs = TrainOutputs { dir: run.train_dir() };
    let outcome = train::train(&cfg.model_config(), &cfg.train_config(), &train_set, &eval_set, Some(&outputs))?;
    let summary = TrainSummary {
        converged: outcome.converged,
        epochs: outcome.epochs,
        max_epochs: cfg.train.max_epochs,
        steps: outcome.steps,
        sequences_consumed: outcome.sequences_consumed,
        skipped_batches: outcome.skipped_batches,
        non_finite_steps: outcome.non_finite_steps,
        final_id_exact_match: outcome.final_id_exact_match(),
        best_id_exact_match: outcome.best_id_exact_match,
        eval_points: outcome.log.records.len(),
    };
    let dir = run.train_dir();
    write_json(&dir.join("summary.json"), &summary)?;
    let points = outcome.log.records.iter().map(|r| (r.step as f64, r.id_exact_match)).collect();
    let svg = plot::line_chart(
        &format!("Training convergence: {}", run.config.run_name()),
        "optimizer step",
        "ID exact match (eval subset)",
        &[(format!("{}-layer", cfg.model.n_layers), points)],
    );
    write_atomic(&dir.join("convergence.svg"), svg.as_bytes())?;
    run.write_config_snapshot()?;
    // The CSV carries wall-clock seconds, so it is not digested.
    for name in ["summary.json", "convergence.svg", "best.json", "final.json"] {
        manifest.artifacts.insert(format!("train/{name}"), digest_file(&run.dir, &dir.join(name))?);
    }
    manifest.metrics.insert("train".into(), serde_json::to_value(&summary).expect("serializable"));
    manifest.wall_clock.insert("train".into(), start.elapsed().as_secs_f64());
    manifest.save(&run.dir)?;
    Ok(summary)
}

/// What is being evaluated.
#[derive(Debug, Clone)]
pub enum Subject {
    Checkpoint(PathBuf),
    Policy(Policy),
}

impl Subject {
    fn predictor(&self, run: &Run) -> Result<Box<dyn Predictor>, CliError> {
        match self {
            Subject::Policy(p) => Ok(Box::new(p.clone())),
            Subject::Checkpoint(path) => {
                if !path.exists() {
                    return Err(CliError::MissingCheckpoint(path.clone()));
                }
                let params: ParamSet<f32> = model::load_checkpoint(path)?;
                let mut p = ModelPredictor::new(params);
                p.mode = run.config.probe.prediction_mode;
                Ok(Box::new(p))
            }
        }
    }

    pub fn default_for(run: &Run) -> Subject {
        Subject::Checkpoint(run.final_checkpoint())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub predictor: String,
    pub train: EvalReport,
    pub id: EvalReport,
    pub ood: EvalReport,
}

pub fn cmd_eval(run: &Run, subject: &Subject) -> Result<EvalBundle, CliError> {
    let start = Instant::now();
    let mut manifest = run.manifest();
    let predictor = subject.predictor(run)?;
    let train_set = run.read_dataset("train", &manifest)?;
    let id = run.read_dataset("id_test", &manifest)?;
    let ood = run.read_dataset("ood_test", &manifest)?;
    let bundle = EvalBundle {
        predictor: predictor.name(),
        train: probes::exact_match(predictor.as_ref(), &train_set)?,
        id: probes::exact_match(predictor.as_ref(), &id)?,
        ood: probes::exact_match(predictor.as_ref(), &ood)?,
    };
    let dir = run.subject_dir("eval", subject);
    write_json(&dir.join("eval_report.json"), &bundle)?;
    let svg = plot::grouped_bars(
        &format!("ID vs OOD exact match: {}", run.config.run_name()),
        "exact match",
        &["ID", "OOD"],
        &[(bundle.predictor.clone(), vec![bundle.id.exact_match, bundle.ood.exact_match])],
    );
    write_atomic(&dir.join("generalisation.svg"), svg.as_bytes())?;
    if let Subject::Checkpoint(_) = subject {
        for name in ["eval_report.json", "generalisation.svg"] {
            manifest.artifacts.insert(format!("eval/{name}"), digest_file(&run.dir, &dir.join(name))?);
        }
        manifest.metrics.insert(
            "eval".into(),
            json!({
                "train_exact_match": bundle.train.exact_match,
                "id_exact_match": bundle.id.exact_match,
                "ood_exact_match": bundle.ood.exact_match,
            }),
        );
        manifest.wall_clock.insert("eval".into(), start.elapsed().as_secs_f64());
        manifest.save(&run.dir)?;
    }
    Ok(bundle)
}

pub fn cmd_probe(run: &Run, subject: &Subject) -> Result<ProbeReport, CliError> {
    let start = Instant::now();
    let mut manifest = run.manifest();
    let predictor = subject.predictor(run)?;
    let cfg = &run.config;
    let full = probes::probe(predictor.as_ref(), &cfg.pressure, cfg.seeds().pressure, cfg.probe.toggle_target)?;
    let decomposition = probes::behavioural_decomposition(&full);
    let dir = run.subject_dir("probe", subject);
    let mut verdicts = String::new();
    for v in &full.verdicts {
        verdicts.push_str(&serde_json::to_string(v).expect("serializable"));
        verdicts.push('\n');
    }
    write_atomic(&dir.join("verdicts.jsonl"), verdicts.as_bytes())?;
    let report = ProbeReport { verdicts: Vec::new(), ..full };
    write_json(&dir.join("probe_report.json"), &json!({ "report": report, "decomposition": decomposition }))?;
    let props = decomposition.proportions();
    let names: Vec<&str> = props.iter().map(|(n, _)| *n).collect();
    let svg = plot::grouped_bars(
        &format!("Behavioural decomposition (D={}): {}", cfg.pressure.rollback_depth, report.predictor),
        "share of pressure sequences",
        &names,
        &[(report.predictor.clone(), props.iter().map(|(_, p)| *p).collect())],
    );
    write_atomic(&dir.join("decomposition.svg"), svg.as_bytes())?;
    if let Subject::Checkpoint(_) = subject {
        for name in ["probe_report.json", "verdicts.jsonl", "decomposition.svg"] {
            manifest.artifacts.insert(format!("probe/{name}"), digest_file(&run.dir, &dir.join(name))?);
        }
        manifest.metrics.insert(
            "probe".into(),
            json!({
                "pressure_accuracy": report.pressure_accuracy,
                "n_correct": report.n_correct,
                "toggle_rate": report.toggle_rate,
                "history_loss_rate": report.history_loss_rate,
            }),
        );
        manifest.wall_clock.insert("probe".into(), start.elapsed().as_secs_f64());
        manifest.save(&run.dir)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RunResults {
    pub generate: GenerateSummary,
    pub train: TrainSummary,
    pub eval: EvalBundle,
    pub probe: ProbeReport,
}

/// generate, train, eval and probe in sequence.
pub fn cmd_run(run: &Run) -> Result<RunResults, CliError> {
    let generate = cmd_generate(run, true)?;
    let train = cmd_train(run)?;
    let subject = Subject::default_for(run);
    let eval = cmd_eval(run, &subject)?;
    let probe = cmd_probe(run, &subject)?;
    Ok(RunResults { generate, train, eval, probe })
}
