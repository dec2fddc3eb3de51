//! Experiment harness behind the command-line tool: dataset synthesis,
//! training, sampling, sweeps, plots and the self-check battery.

mod metrics;
mod plot;
mod selfcheck;

pub use metrics::{paired_sign_test, read_rows, MetricsRow, PairedTest};
pub use plot::cmd_plot;
pub use selfcheck::{cmd_selfcheck, selfcheck_with, CheckItem, SelfcheckReport};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::MlpSpec;
use crate::checkpoint::{self, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{self, Observation};
use crate::error::{Error, Result};
use crate::flow::{make_schedule, sample, Schedule, Trajectory};
use crate::gito::{annotate_alignment, rectified_sample};
use crate::oracle::{train_oracle, Classification, Decoder, Instruction, Oracle, OracleReport};
use crate::rectify::{GuidanceConfig, GuidanceModels};
use crate::rng;
use crate::velocity::{
    train_velocity, CfgField, ConditioningSpec, LabeledSample, TrainReport, VelocityField,
};

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const INVARIANT: i32 = 2;
    pub const IO: i32 = 3;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::MalformedCsv { .. } | Error::Checkpoint(_) => exit::IO,
            Error::Csv(e) if e.is_io_error() => exit::IO,
            Error::InvalidConfig(_) | Error::UnknownLabel(_) => exit::USAGE,
            _ => exit::INVARIANT,
        }
    }
}

/// Output layout under `run.output_dir`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn generator_csv(&self) -> PathBuf {
        self.data_dir().join("generator.csv")
    }

    pub fn oracle_csv(&self) -> PathBuf {
        self.data_dir().join("oracle.csv")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn velocity_ckpt(&self) -> PathBuf {
        self.models_dir().join("velocity.json")
    }

    pub fn oracle_ckpt(&self) -> PathBuf {
        self.models_dir().join("oracle.json")
    }

    pub fn decoder_ckpt(&self) -> PathBuf {
        self.models_dir().join("decoder.json")
    }

    pub fn sample_dir(&self, guided: bool) -> PathBuf {
        self.root.join(if guided {
            "sample_guided"
        } else {
            "sample_unguided"
        })
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Spec of the uniform-pair dataset the oracle is trained on.
pub fn oracle_dataset_spec(cfg: &ExperimentConfig) -> data::DatasetSpec {
    data::DatasetSpec {
        sample_count: cfg.oracle.sample_count,
        seed: rng::derive_seed(cfg.dataset.seed, 1),
        ..cfg.dataset.uniform_pairs()
    }
}

#[derive(Debug, Clone)]
pub struct DataFiles {
    pub generator: PathBuf,
    pub oracle: PathBuf,
    pub manifest: PathBuf,
}

/// Writes the biased generator dataset, the uniform-pair oracle dataset and
/// a manifest of the exact generation parameters.
pub fn cmd_make_data(cfg: &ExperimentConfig) -> Result<DataFiles> {
    let layout = Layout::new(&cfg.run.output_dir);
    create_dir(&layout.data_dir())?;
    let gen_spec = cfg.dataset.clone();
    let orc_spec = oracle_dataset_spec(cfg);
    data::write_csv(&layout.generator_csv(), &data::generate(&gen_spec)?)?;
    data::write_csv(&layout.oracle_csv(), &data::generate(&orc_spec)?)?;
    let manifest = layout.data_dir().join("manifest.json");
    write_json(
        &manifest,
        &json!({ "generator": gen_spec, "oracle": orc_spec }),
    )?;
    Ok(DataFiles {
        generator: layout.generator_csv(),
        oracle: layout.oracle_csv(),
        manifest,
    })
}

/// Trained or loaded models used by sampling.
#[derive(Debug, Clone)]
pub struct Models {
    pub field: VelocityField,
    pub oracle: Oracle,
    pub decoder: Decoder,
}

impl Models {
    pub fn guidance_models<'a>(&'a self, cfg: &'a CfgField<'a>) -> GuidanceModels<'a> {
        GuidanceModels {
            field: cfg,
            decoder: &self.decoder,
            oracle: &self.oracle,
        }
    }

    pub fn load(layout: &Layout) -> Result<Self> {
        Ok(Self {
            field: checkpoint::velocity_from_checkpoint(&Checkpoint::load(
                &layout.velocity_ckpt(),
            )?)?,
            oracle: checkpoint::oracle_from_checkpoint(&Checkpoint::load(&layout.oracle_ckpt())?)?,
            decoder: checkpoint::decoder_from_checkpoint(&Checkpoint::load(
                &layout.decoder_ckpt(),
            )?)?,
        })
    }

    pub fn save(
        &self,
        layout: &Layout,
        cfg: &ExperimentConfig,
        velocity: &TrainReport,
        oracle: &OracleReport,
    ) -> Result<()> {
        create_dir(&layout.models_dir())?;
        let vmeta = json!({ "report": velocity, "train": cfg.velocity.train });
        checkpoint::velocity_checkpoint(&self.field, cfg.velocity.seed, vmeta)?
            .save(&layout.velocity_ckpt())?;
        let ometa = json!({ "report": oracle, "train": cfg.oracle.train });
        checkpoint::oracle_checkpoint(&self.oracle, cfg.oracle.arch.seed, ometa)?
            .save(&layout.oracle_ckpt())?;
        checkpoint::decoder_checkpoint(&self.decoder, cfg.decoder.seed).save(&layout.decoder_ckpt())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub velocity: TrainReport,
    pub oracle: OracleReport,
}

pub fn build_decoder(cfg: &ExperimentConfig) -> Result<Decoder> {
    if cfg.decoder.random {
        Decoder::random(cfg.dataset.dims, cfg.decoder.seed)
    } else {
        Ok(Decoder::identity(cfg.dataset.dims))
    }
}

/// Trains generator and oracle from in-memory datasets.
pub fn train_models(
    cfg: &ExperimentConfig,
    generator_data: &[Observation],
    oracle_data: &[Observation],
) -> Result<(Models, TrainSummary)> {
    let decoder = build_decoder(cfg)?;
    let latents = generator_data
        .iter()
        .map(|o| {
            Ok(LabeledSample {
                z: decoder.encode(&o.x)?,
                object: o.object,
                attribute: o.attribute,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let d = cfg.dataset.dims;
    let v = &cfg.velocity;
    let conditioning = ConditioningSpec {
        embedding_dim: v.embedding_dim,
        num_objects: cfg.dataset.num_object_labels,
        num_attributes: cfg.dataset.num_attribute_labels,
    };
    let mut widths = vec![d + 1 + 2 * v.embedding_dim];
    widths.extend_from_slice(&v.hidden_widths);
    widths.push(d);
    let spec = MlpSpec::new(widths, v.activation, v.seed);
    let (field, vreport) = train_velocity(&latents, &spec, &conditioning, &v.train)?;
    log::info!(
        "velocity: held-out fm loss {:.4} (zero-field {:.4})",
        vreport.heldout_loss,
        vreport.zero_field_loss
    );
    let (oracle, oreport) = train_oracle(
        oracle_data,
        cfg.dataset.num_object_labels,
        cfg.dataset.num_attribute_labels,
        &cfg.oracle.arch,
        &cfg.oracle.train,
    )?;
    log::info!(
        "oracle: held-out accuracy {:.4}, similarity gap {:.3}",
        oreport.heldout_accuracy,
        oreport.similarity_gap
    );
    Ok((
        Models {
            field,
            oracle,
            decoder,
        },
        TrainSummary {
            velocity: vreport,
            oracle: oreport,
        },
    ))
}

/// Reads the datasets written by [`cmd_make_data`], trains, and writes
/// checkpoints. Fails when the oracle misses its accuracy threshold.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let layout = Layout::new(&cfg.run.output_dir);
    let gen = data::read_csv(&layout.generator_csv())?;
    let orc = data::read_csv(&layout.oracle_csv())?;
    let (models, summary) = train_models(cfg, &gen, &orc)?;
    models.save(&layout, cfg, &summary.velocity, &summary.oracle)?;
    write_json(&layout.models_dir().join("train_report.json"), &summary)?;
    Ok(summary)
}

/// Outcome of one trajectory judged by the oracle classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub instruction: Instruction,
    pub final_observation: Vec<f64>,
    pub judged: Classification,
    pub success: bool,
    /// Alignment of the final sample with the instruction.
    pub final_alignment: f64,
    /// Mean first-iterate gradient norm over rectified steps.
    pub mean_grad_norm: Option<f64>,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
}

/// One trajectory, guided or not, judged against `instr`.
pub fn run_one(
    models: &Models,
    schedule: &Schedule,
    guidance: &GuidanceConfig,
    instr: &Instruction,
    seed: u64,
    guided: bool,
) -> Result<RunOutcome> {
    let cfg_field = CfgField::new(&models.field, guidance.w_cfg);
    let gm = models.guidance_models(&cfg_field);
    let traj = if guided {
        rectified_sample(
            &models.field,
            &models.decoder,
            &models.oracle,
            instr,
            schedule,
            guidance,
            seed,
        )?
    } else {
        let mut t = sample(&cfg_field, instr, schedule, seed)?;
        annotate_alignment(&mut t, &gm, instr)?;
        t
    };
    let x = models.decoder.decode(&traj.final_state().z)?;
    let judged = models.oracle.classify(&x)?;
    let success = judged.object_id == instr.object_id.unwrap_or(judged.object_id)
        && judged.attribute_id == instr.attribute_id.unwrap_or(judged.attribute_id);
    let grads: Vec<f64> = traj
        .diagnostics
        .iter()
        .filter_map(|d| d.grad_norm)
        .collect();
    Ok(RunOutcome {
        seed,
        instruction: *instr,
        final_observation: x,
        judged,
        success,
        final_alignment: traj
            .diagnostics
            .last()
            .and_then(|d| d.alignment_score)
            .unwrap_or(f64::NAN),
        mean_grad_norm: if grads.is_empty() {
            None
        } else {
            Some(grads.iter().sum::<f64>() / grads.len() as f64)
        },
        trajectory: Some(traj),
    })
}

/// Seeds `seed_base..seed_base + n`, shared by every cell and instruction.
pub fn run_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.run.num_seeds as u64)
        .map(|i| cfg.run.seed_base + i)
        .collect()
}

/// Runs every seed for one instruction in parallel; results are in seed order.
pub fn run_instruction(
    models: &Models,
    schedule: &Schedule,
    guidance: &GuidanceConfig,
    instr: &Instruction,
    seeds: &[u64],
    guided: bool,
) -> Result<Vec<RunOutcome>> {
    seeds
        .par_iter()
        .map(|&s| run_one(models, schedule, guidance, instr, s, guided))
        .collect()
}

fn summarize(
    run_id: String,
    guided: bool,
    guidance: &GuidanceConfig,
    instr: &Instruction,
    runs: &[RunOutcome],
) -> MetricsRow {
    let n = runs.len().max(1) as f64;
    let grads: Vec<f64> = runs.iter().filter_map(|r| r.mean_grad_norm).collect();
    MetricsRow {
        run_id,
        instruction: instr.to_string(),
        guided,
        k: guidance.k,
        window: format!("[{},{}]", guidance.window[0], guidance.window[1]),
        eta: guidance.eta,
        delta: guidance.delta,
        num_runs: runs.len(),
        target_accuracy: runs.iter().filter(|r| r.success).count() as f64 / n,
        mean_alignment: runs.iter().map(|r| r.final_alignment).sum::<f64>() / n,
        mean_grad_norm: if grads.is_empty() {
            None
        } else {
            Some(grads.iter().sum::<f64>() / grads.len() as f64)
        },
    }
}

#[derive(Debug, Clone)]
pub struct SampleSummary {
    pub metrics_csv: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub outcomes: Vec<Vec<RunOutcome>>,
}

/// Samples `num_seeds` trajectories per instruction, judges each final
/// observation and writes `metrics.csv`, per-run records and per-trajectory
/// alignment CSVs. Loads checkpoints from the output directory.
pub fn cmd_sample(cfg: &ExperimentConfig, guided: bool) -> Result<SampleSummary> {
    let layout = Layout::new(&cfg.run.output_dir);
    let models = Models::load(&layout)?;
    sample_with_models(cfg, &models, guided)
}

pub fn sample_with_models(
    cfg: &ExperimentConfig,
    models: &Models,
    guided: bool,
) -> Result<SampleSummary> {
    let started = Instant::now();
    let layout = Layout::new(&cfg.run.output_dir);
    let dir = layout.sample_dir(guided);
    create_dir(&dir)?;
    let schedule = make_schedule(cfg.schedule.num_steps)?;
    let instrs = cfg
        .run
        .instructions
        .resolve(models.oracle.num_objects(), models.oracle.num_attributes())?;
    let seeds = run_seeds(cfg);
    let label = if guided { "guided" } else { "unguided" };
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    let mut records = String::new();
    if cfg.run.write_trajectories {
        create_dir(&dir.join("trajectories"))?;
    }
    for instr in &instrs {
        let runs = run_instruction(models, &schedule, &cfg.guidance, instr, &seeds, guided)?;
        let tag = format!(
            "o{}a{}",
            instr.object_id.unwrap_or(0),
            instr.attribute_id.unwrap_or(0)
        );
        for r in &runs {
            let traj_path = if cfg.run.write_trajectories {
                let p = dir
                    .join("trajectories")
                    .join(format!("{tag}_seed{}.csv", r.seed));
                r.trajectory.as_ref().expect("kept").write_csv(&p)?;
                Some(
                    p.strip_prefix(&dir)
                        .unwrap_or(&p)
                        .to_string_lossy()
                        .into_owned(),
                )
            } else {
                None
            };
            let rec = json!({
                "seed": r.seed,
                "instruction": instr.text(),
                "config": cfg.guidance,
                "guided": guided,
                "final_observation": r.final_observation,
                "judged_labels": [r.judged.object_id, r.judged.attribute_id],
                "confidence": r.judged.confidence,
                "success": r.success,
                "per_step_diagnostics_path": traj_path,
            });
            records.push_str(&rec.to_string());
            records.push('\n');
        }
        rows.push(summarize(
            format!("{label}-{tag}"),
            guided,
            &cfg.guidance,
            instr,
            &runs,
        ));
        outcomes.push(
            runs.into_iter()
                .map(|mut r| {
                    r.trajectory = None;
                    r
                })
                .collect(),
        );
    }
    let metrics_csv = dir.join("metrics.csv");
    metrics::write_rows(&metrics_csv, &rows)?;
    let runs_path = dir.join("runs.jsonl");
    std::fs::write(&runs_path, records).map_err(|e| Error::io(&runs_path, e))?;
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "guided": guided,
            "config": cfg,
            "wall_ms": started.elapsed().as_millis() as u64,
        }),
    )?;
    Ok(SampleSummary {
        metrics_csv,
        rows,
        outcomes,
    })
}

/// One sweep cell: a named override of the guidance configuration.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub axis: &'static str,
    pub value: String,
    pub guidance: GuidanceConfig,
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<SweepCell> {
    let base = &cfg.guidance;
    let mut cells = Vec::new();
    for &k in &cfg.sweep.k {
        cells.push(SweepCell {
            axis: "K",
            value: k.to_string(),
            guidance: GuidanceConfig { k, ..base.clone() },
        });
    }
    for &window in &cfg.sweep.window {
        cells.push(SweepCell {
            axis: "window",
            value: format!("[{},{}]", window[0], window[1]),
            guidance: GuidanceConfig {
                window,
                ..base.clone()
            },
        });
    }
    for &eta in &cfg.sweep.eta {
        cells.push(SweepCell {
            axis: "eta",
            value: eta.to_string(),
            guidance: GuidanceConfig {
                eta,
                ..base.clone()
            },
        });
    }
    cells
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub sweep_csv: PathBuf,
    pub rows: Vec<MetricsRow>,
    /// Per cell, per instruction, per seed success flags.
    pub successes: Vec<Vec<Vec<bool>>>,
    pub cells: Vec<SweepCell>,
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepSummary> {
    let layout = Layout::new(&cfg.run.output_dir);
    let models = Models::load(&layout)?;
    sweep_with_models(cfg, &models)
}

/// Runs every grid cell on the same seeds. Cells run in parallel; rows are
/// written in grid order.
pub fn sweep_with_models(cfg: &ExperimentConfig, models: &Models) -> Result<SweepSummary> {
    let started = Instant::now();
    let layout = Layout::new(&cfg.run.output_dir);
    let dir = layout.sweep_dir();
    create_dir(&dir)?;
    let schedule = make_schedule(cfg.schedule.num_steps)?;
    let instrs = cfg
        .run
        .instructions
        .resolve(models.oracle.num_objects(), models.oracle.num_attributes())?;
    let seeds = run_seeds(cfg);
    let cells = sweep_cells(cfg);
    for c in &cells {
        c.guidance.validate(schedule.num_steps())?;
    }
    let results: Vec<Vec<(MetricsRow, Vec<bool>)>> = cells
        .par_iter()
        .map(|cell| {
            instrs
                .iter()
                .map(|instr| {
                    let runs =
                        run_instruction(models, &schedule, &cell.guidance, instr, &seeds, true)?;
                    let id = format!("{}={} {}", cell.axis, cell.value, instr);
                    Ok((
                        summarize(id, true, &cell.guidance, instr, &runs),
                        runs.iter().map(|r| r.success).collect(),
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut successes = Vec::new();
    for cell in results {
        let mut per_instr = Vec::new();
        for (row, s) in cell {
            rows.push(row);
            per_instr.push(s);
        }
        successes.push(per_instr);
    }
    let sweep_csv = dir.join("sweep.csv");
    metrics::write_rows(&sweep_csv, &rows)?;
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "config": cfg,
            "cells": cells.len(),
            "instructions": instrs.len(),
            "wall_ms": started.elapsed().as_millis() as u64,
        }),
    )?;
    Ok(SweepSummary {
        sweep_csv,
        rows,
        successes,
        cells,
    })
}
