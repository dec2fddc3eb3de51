use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

/// Aggregate over all seeds of one instruction under one guidance setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub instruction: String,
    pub guided: bool,
    #[serde(rename = "K")]
    pub k: usize,
    pub window: String,
    pub eta: f64,
    pub delta: f64,
    pub num_runs: usize,
    pub target_accuracy: f64,
    pub mean_alignment: f64,
    pub mean_grad_norm: Option<f64>,
}

pub(crate) fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    // header written explicitly so an empty table still has one
    w.write_record([
        "run_id",
        "instruction",
        "guided",
        "K",
        "window",
        "eta",
        "delta",
        "num_runs",
        "target_accuracy",
        "mean_alignment",
        "mean_grad_norm",
    ])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// One-sided exact sign test on paired binary outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub pairs: usize,
    /// Pairs where only the treatment succeeded.
    pub treatment_only: usize,
    /// Pairs where only the control succeeded.
    pub control_only: usize,
    /// Treatment minus control success rate.
    pub margin: f64,
    /// `P(X >= treatment_only)` for `X ~ Binomial(discordant, 1/2)`.
    pub p_value: f64,
}

pub fn paired_sign_test(treatment: &[bool], control: &[bool]) -> PairedTest {
    assert_eq!(treatment.len(), control.len(), "paired outcomes must align");
    let b = treatment
        .iter()
        .zip(control)
        .filter(|(t, c)| **t && !**c)
        .count();
    let c = treatment
        .iter()
        .zip(control)
        .filter(|(t, c)| !**t && **c)
        .count();
    let n = treatment.len().max(1) as f64;
    PairedTest {
        pairs: treatment.len(),
        treatment_only: b,
        control_only: c,
        margin: (b as f64 - c as f64) / n,
        p_value: binomial_upper_tail(b + c, b),
    }
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n as u64).expect("p = 1/2 is valid");
    b.sf(k as u64 - 1)
}
