use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Oracle, OracleMode};
use crate::autodiff::{Activation, DifferentiableMap, Mlp, MlpSpec};
use crate::data::Observation;
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::optim::{Adam, AdamHyper};
use crate::rng;

/// Held-out classifier accuracy required before the oracle may be used.
pub const MIN_ORACLE_ACCURACY: f64 = 0.98;
/// Required mean gap between matched and mismatched similarities.
pub const MIN_SIMILARITY_GAP: f64 = 0.2;
/// Upper bound on the cosine between two distinct instruction embeddings.
pub const MAX_TABLE_COSINE: f64 = 0.9;

const GRAD_SHARDS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleArch {
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub embedding_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Inverse temperature of the contrastive softmax over instructions.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for OracleArch {
    fn default() -> Self {
        Self {
            hidden_widths: vec![32],
            activation: Activation::Tanh,
            embedding_dim: 8,
            seed: 3,
        }
    }
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-3,
            temperature: 10.0,
            seed: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub heldout_accuracy: f64,
    pub matched_similarity: f64,
    pub mismatched_similarity: f64,
    pub similarity_gap: f64,
    pub max_table_cosine: f64,
    pub adam: AdamHyper,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Trains classifier and joint embedding on uniformly paired observations.
///
/// Fails with [`Error::Threshold`] when held-out accuracy, the matched vs
/// mismatched similarity gap, or table separation miss their bounds.
pub fn train_oracle(
    dataset: &[Observation],
    num_objects: usize,
    num_attributes: usize,
    arch: &OracleArch,
    cfg: &OracleTrainConfig,
) -> Result<(Oracle, OracleReport)> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty oracle dataset".into()))?;
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(
            "invalid oracle training config".into(),
        ));
    }
    let obs_dim = first.x.len();
    let n_pairs = num_objects * num_attributes;
    let mut seen = vec![false; n_pairs];
    for s in dataset {
        check_dim("oracle sample", obs_dim, s.x.len())?;
        if s.object >= num_objects || s.attribute >= num_attributes {
            return Err(Error::UnknownLabel(format!(
                "sample labels ({}, {}) outside label ranges",
                s.object, s.attribute
            )));
        }
        seen[s.object * num_attributes + s.attribute] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidConfig(format!(
            "oracle dataset does not cover pair ({}, {})",
            missing / num_attributes,
            missing % num_attributes
        )));
    }

    let m = arch.embedding_dim;
    let mut embedder = Mlp::new(&MlpSpec::new(
        widths(obs_dim, &arch.hidden_widths, m),
        arch.activation,
        rng::derive_seed(arch.seed, 0),
    ))?;
    let mut classifier = Mlp::new(&MlpSpec::new(
        widths(obs_dim, &arch.hidden_widths, n_pairs),
        arch.activation,
        rng::derive_seed(arch.seed, 1),
    ))?;
    let mut table = rng::normal_vec(
        &mut rng::seeded(rng::derive_seed(arch.seed, 2)),
        n_pairs * m,
    );

    let mut rng = rng::seeded(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng::shuffle(&mut rng, &mut order);
    let n_held = (dataset.len() / 5).max(1).min(dataset.len() - 1);
    let (held, train) = order.split_at(n_held);
    let (held, mut train) = (held.to_vec(), train.to_vec());

    let hyper = AdamHyper::with_learning_rate(cfg.learning_rate);
    let n_emb = embedder.parameter_count();
    let mut adam_cls = Adam::new(hyper, classifier.parameter_count());
    let mut adam_emb = Adam::new(hyper, n_emb + table.len());
    let mut flat = Vec::with_capacity(n_emb + table.len());

    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut rng, &mut train);
        let mut epoch_loss = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            let step = BatchStep {
                num_attributes,
                embedder: &embedder,
                classifier: &classifier,
                table: &table,
                m,
                temperature: cfg.temperature,
            };
            let (loss, g_cls, g_emb) = step.gradient(dataset, batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "oracle loss non-finite at epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            adam_cls.step(classifier.parameters_mut(), &g_cls);
            flat.clear();
            flat.extend_from_slice(embedder.parameters());
            flat.extend_from_slice(&table);
            adam_emb.step(&mut flat, &g_emb);
            embedder.parameters_mut().copy_from_slice(&flat[..n_emb]);
            table.copy_from_slice(&flat[n_emb..]);
        }
        log::debug!("oracle epoch {epoch}: loss {epoch_loss:.4}");
    }

    let table_rows: Vec<Vec<f64>> = table.chunks_exact(m).map(|r| r.to_vec()).collect();
    let oracle = Oracle::new(
        embedder,
        table_rows,
        classifier,
        num_objects,
        num_attributes,
        OracleMode::Introspective,
    )?;
    let report = evaluate(&oracle, dataset, &held, hyper)?;
    if report.heldout_accuracy < MIN_ORACLE_ACCURACY {
        return Err(Error::Threshold(format!(
            "oracle held-out accuracy {:.4} below {MIN_ORACLE_ACCURACY}",
            report.heldout_accuracy
        )));
    }
    if report.similarity_gap < MIN_SIMILARITY_GAP {
        return Err(Error::Threshold(format!(
            "matched/mismatched similarity gap {:.4} below {MIN_SIMILARITY_GAP}",
            report.similarity_gap
        )));
    }
    if report.max_table_cosine >= MAX_TABLE_COSINE {
        return Err(Error::Threshold(format!(
            "instruction embeddings too close (max cosine {:.4})",
            report.max_table_cosine
        )));
    }
    Ok((oracle, report))
}

struct BatchStep<'a> {
    num_attributes: usize,
    embedder: &'a Mlp,
    classifier: &'a Mlp,
    table: &'a [f64],
    m: usize,
    temperature: f64,
}

impl BatchStep<'_> {
    /// Mean cross-entropy of both heads and their gradients.
    fn gradient(&self, data: &[Observation], batch: &[usize]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let n_cls = self.classifier.parameter_count();
        let n_emb = self.embedder.parameter_count();
        let n_tab = self.table.len();
        let inv_b = 1.0 / batch.len() as f64;
        let shard_len = batch.len().div_ceil(GRAD_SHARDS).max(1);
        let units: Vec<Vec<f64>> = self
            .table
            .chunks_exact(self.m)
            .map(linalg::normalize)
            .collect();
        let norms: Vec<f64> = self.table.chunks_exact(self.m).map(linalg::norm).collect();

        let shards: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = batch
            .par_chunks(shard_len)
            .map(|shard| {
                let mut g_cls = vec![0.0; n_cls];
                let mut g_emb = vec![0.0; n_emb + n_tab];
                let mut loss = 0.0;
                for &i in shard {
                    let s = &data[i];
                    let label = s.object * self.num_attributes + s.attribute;
                    // classifier head
                    self.classifier
                        .forward_backward(&s.x, &mut g_cls, |logits| {
                            let p = softmax(logits);
                            loss -= p[label].max(1e-300).ln();
                            p.iter()
                                .enumerate()
                                .map(|(c, pc)| inv_b * (pc - if c == label { 1.0 } else { 0.0 }))
                                .collect()
                        })?;
                    // contrastive head
                    let (emb_grad, tab_grad) = g_emb.split_at_mut(n_emb);
                    let mut tab_updates = Vec::new();
                    self.embedder.forward_backward(&s.x, emb_grad, |u| {
                        let nu = linalg::norm(u).max(1e-12);
                        let e: Vec<f64> = u.iter().map(|v| v / nu).collect();
                        let logits: Vec<f64> = units
                            .iter()
                            .map(|t| self.temperature * linalg::dot(&e, t))
                            .collect();
                        let p = softmax(&logits);
                        loss -= p[label].max(1e-300).ln();
                        let mut de = vec![0.0; self.m];
                        for (c, (pc, t)) in p.iter().zip(&units).enumerate() {
                            let coef = inv_b
                                * self.temperature
                                * (pc - if c == label { 1.0 } else { 0.0 });
                            for (d, tv) in de.iter_mut().zip(t) {
                                *d += coef * tv;
                            }
                            tab_updates.push((c, coef));
                        }
                        project_out(&de, &e, nu)
                    })?;
                    // table rows: d/dr (t . e) through t = r / |r|
                    let u = self.embedder.forward(&s.x)?;
                    let e = linalg::normalize(&u);
                    for (c, coef) in tab_updates {
                        let dt: Vec<f64> = e.iter().map(|v| coef * v).collect();
                        let dr = project_out(&dt, &units[c], norms[c].max(1e-12));
                        for (g, v) in tab_grad[c * self.m..(c + 1) * self.m].iter_mut().zip(&dr) {
                            *g += v;
                        }
                    }
                }
                Ok((loss, g_cls, g_emb))
            })
            .collect();

        let mut loss = 0.0;
        let mut g_cls = vec![0.0; n_cls];
        let mut g_emb = vec![0.0; n_emb + n_tab];
        for shard in shards {
            let (l, c, e) = shard?;
            loss += l;
            for (a, b) in g_cls.iter_mut().zip(&c) {
                *a += b;
            }
            for (a, b) in g_emb.iter_mut().zip(&e) {
                *a += b;
            }
        }
        Ok((loss * inv_b, g_cls, g_emb))
    }
}

/// `(I - y y^T) g / n`: gradient through `u -> u / |u|` at `y = u / |u|`.
fn project_out(g: &[f64], y: &[f64], n: f64) -> Vec<f64> {
    let gy = linalg::dot(g, y);
    g.iter().zip(y).map(|(gi, yi)| (gi - yi * gy) / n).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn evaluate(
    oracle: &Oracle,
    data: &[Observation],
    held: &[usize],
    adam: AdamHyper,
) -> Result<OracleReport> {
    let mut correct = 0usize;
    let (mut matched, mut mismatched) = (0.0, 0.0);
    let (mut n_match, mut n_mismatch) = (0usize, 0usize);
    for &i in held {
        let s = &data[i];
        let c = oracle.classify(&s.x)?;
        if c.object_id == s.object && c.attribute_id == s.attribute {
            correct += 1;
        }
        let e = oracle.embed_image(&s.x)?;
        for instr in oracle.instructions() {
            let sim = super::similarity(&e, oracle.embed_instruction(&instr)?);
            if instr.object_id == Some(s.object) && instr.attribute_id == Some(s.attribute) {
                matched += sim;
                n_match += 1;
            } else {
                mismatched += sim;
                n_mismatch += 1;
            }
        }
    }
    let table = oracle.instruction_table();
    let mut max_cos = f64::NEG_INFINITY;
    for a in 0..table.len() {
        for b in a + 1..table.len() {
            max_cos = max_cos.max(linalg::dot(&table[a], &table[b]));
        }
    }
    let matched = matched / n_match.max(1) as f64;
    let mismatched = mismatched / n_mismatch.max(1) as f64;
    Ok(OracleReport {
        heldout_accuracy: correct as f64 / held.len() as f64,
        matched_similarity: matched,
        mismatched_similarity: mismatched,
        similarity_gap: matched - mismatched,
        max_table_cosine: if table.len() > 1 { max_cos } else { -1.0 },
        adam,
    })
}
