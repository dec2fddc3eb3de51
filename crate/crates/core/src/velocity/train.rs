use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MlpVelocity, VelocityField};
use crate::autodiff::{Mlp, MlpSpec};
use crate::error::{check_dim, Error, Result};
use crate::flow::{interpolate, VectorField};
use crate::optim::{Adam, AdamHyper};
use crate::oracle::Instruction;
use crate::rng;

/// Number of fixed gradient shards per batch. Shards are summed in order so
/// results do not depend on the thread count.
const GRAD_SHARDS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub z: Vec<f64>,
    pub object: usize,
    pub attribute: usize,
}

impl LabeledSample {
    pub fn instruction(&self) -> Instruction {
        Instruction::new(self.object, self.attribute)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningSpec {
    pub embedding_dim: usize,
    pub num_objects: usize,
    pub num_attributes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub condition_dropout_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            learning_rate: 2e-3,
            condition_dropout_prob: 0.1,
            seed: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout_prob) {
            return Err(Error::InvalidConfig(
                "condition_dropout_prob must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_train_loss: f64,
    pub heldout_loss: f64,
    pub zero_field_loss: f64,
    pub adam: AdamHyper,
}

/// `||(eps - z0) - v(z_t, t, c)||^2` at `z_t = (1 - t) z0 + t eps`.
pub fn fm_loss(
    field: &dyn VectorField,
    z0: &[f64],
    eps: &[f64],
    t: f64,
    cond: &Instruction,
) -> Result<f64> {
    check_dim("fm_loss latent", field.dim(), z0.len())?;
    let zt = interpolate(z0, eps, t)?;
    let v = field.velocity(&zt, t, cond)?;
    Ok(eps
        .iter()
        .zip(z0)
        .zip(&v)
        .map(|((e, a), vi)| {
            let r = (e - a) - vi;
            r * r
        })
        .sum())
}

/// One stochastic training draw.
struct Draw {
    index: usize,
    t: f64,
    eps: Vec<f64>,
    dropped: bool,
}

/// Fits a conditional MLP velocity by stochastic minimization of the
/// flow-matching loss with `t ~ U[0, 1]` and `eps ~ N(0, I)`.
pub fn train_velocity(
    dataset: &[LabeledSample],
    spec: &MlpSpec,
    conditioning: &ConditioningSpec,
    cfg: &TrainConfig,
) -> Result<(VelocityField, TrainReport)> {
    cfg.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty training dataset".into()))?;
    let d = first.z.len();
    let e = conditioning.embedding_dim;
    spec.validate()?;
    check_dim(
        "velocity net input width",
        d + 1 + 2 * e,
        spec.layer_widths[0],
    )?;
    check_dim(
        "velocity net output width",
        d,
        *spec.layer_widths.last().expect("validated"),
    )?;
    for s in dataset {
        check_dim("training sample", d, s.z.len())?;
        if s.object >= conditioning.num_objects || s.attribute >= conditioning.num_attributes {
            return Err(Error::UnknownLabel(format!(
                "sample labels ({}, {}) outside label ranges",
                s.object, s.attribute
            )));
        }
    }

    let mut rng = rng::seeded(cfg.seed);
    let net = Mlp::new(spec)?;
    let emb_rng = &mut rng::seeded(rng::derive_seed(cfg.seed, 1));
    let object_embeddings = rng::normal_vec(emb_rng, (conditioning.num_objects + 1) * e);
    let attribute_embeddings = rng::normal_vec(emb_rng, (conditioning.num_attributes + 1) * e);
    let mut model = MlpVelocity::new(
        net,
        d,
        *conditioning,
        object_embeddings,
        attribute_embeddings,
    )?;

    // held-out split
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng::shuffle(&mut rng, &mut order);
    let n_held = if dataset.len() >= 20 {
        dataset.len() / 10
    } else {
        0
    };
    let (held, train_idx) = order.split_at(n_held);
    let held: Vec<usize> = if held.is_empty() {
        train_idx.to_vec()
    } else {
        held.to_vec()
    };
    let mut train_idx = train_idx.to_vec();

    let n_net = model.net.parameter_count();
    let n_obj = model.object_embeddings.len();
    let n_total = n_net + n_obj + model.attribute_embeddings.len();
    let adam_hyper = AdamHyper::with_learning_rate(cfg.learning_rate);
    let mut adam = Adam::new(adam_hyper, n_total);
    let mut flat = Vec::with_capacity(n_total);

    let mut steps = 0;
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut rng, &mut train_idx);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let draws: Vec<Draw> = batch
                .iter()
                .map(|&index| Draw {
                    index,
                    t: rng::uniform(&mut rng),
                    eps: rng::normal_vec(&mut rng, d),
                    dropped: rng::uniform(&mut rng) < cfg.condition_dropout_prob,
                })
                .collect();
            let (loss, grad) = batch_gradient(&model, dataset, &draws)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, step {steps}"
                )));
            }
            flat.clear();
            flat.extend_from_slice(model.net.parameters());
            flat.extend_from_slice(&model.object_embeddings);
            flat.extend_from_slice(&model.attribute_embeddings);
            adam.step(&mut flat, &grad);
            model.net.parameters_mut().copy_from_slice(&flat[..n_net]);
            model
                .object_embeddings
                .copy_from_slice(&flat[n_net..n_net + n_obj]);
            model
                .attribute_embeddings
                .copy_from_slice(&flat[n_net + n_obj..]);
            steps += 1;
            epoch_loss += loss * draws.len() as f64;
            epoch_count += draws.len();
        }
        last_loss = epoch_loss / epoch_count.max(1) as f64;
        log::debug!("velocity epoch {epoch}: loss {last_loss:.5}");
    }

    let field = VelocityField::Mlp(model);
    let (heldout_loss, zero_field_loss) = heldout_losses(&field, dataset, &held, cfg.seed)?;
    if !(heldout_loss < zero_field_loss) {
        return Err(Error::Threshold(format!(
            "held-out flow-matching loss {heldout_loss:.4} not below zero-field baseline {zero_field_loss:.4}"
        )));
    }
    Ok((
        field,
        TrainReport {
            steps,
            final_train_loss: last_loss,
            heldout_loss,
            zero_field_loss,
            adam: adam_hyper,
        },
    ))
}

/// Mean loss and gradient over all trainable parameters (network, object
/// embeddings, attribute embeddings, in that order).
fn batch_gradient(
    model: &MlpVelocity,
    dataset: &[LabeledSample],
    draws: &[Draw],
) -> Result<(f64, Vec<f64>)> {
    let d = model.latent_dim;
    let e = model.conditioning.embedding_dim;
    let n_net = model.net.parameter_count();
    let n_obj = model.object_embeddings.len();
    let n_total = n_net + n_obj + model.attribute_embeddings.len();
    let scale = 2.0 / draws.len() as f64;
    let shard_len = draws.len().div_ceil(GRAD_SHARDS).max(1);

    let shards: Vec<Result<(f64, Vec<f64>)>> = draws
        .par_chunks(shard_len)
        .map(|shard| {
            let mut grad = vec![0.0; n_total];
            let mut loss = 0.0;
            for draw in shard {
                let sample = &dataset[draw.index];
                let cond = if draw.dropped {
                    Instruction::unconditional()
                } else {
                    sample.instruction()
                };
                let rows = model.embedding_rows(&cond)?;
                let zt = interpolate(&sample.z, &draw.eps, draw.t)?;
                let x = model.input_for_rows(&zt, draw.t, rows);
                let target: Vec<f64> = draw.eps.iter().zip(&sample.z).map(|(a, b)| a - b).collect();
                let (net_grad, emb_grad) = grad.split_at_mut(n_net);
                let (_, gx) = model.net.forward_backward(&x, net_grad, |v| {
                    v.iter()
                        .zip(&target)
                        .map(|(vi, ti)| {
                            let r = vi - ti;
                            loss += r * r;
                            scale * r
                        })
                        .collect()
                })?;
                let (obj_grad, attr_grad) = emb_grad.split_at_mut(n_obj);
                for (g, v) in obj_grad[rows.0 * e..(rows.0 + 1) * e]
                    .iter_mut()
                    .zip(&gx[d + 1..d + 1 + e])
                {
                    *g += v;
                }
                for (g, v) in attr_grad[rows.1 * e..(rows.1 + 1) * e]
                    .iter_mut()
                    .zip(&gx[d + 1 + e..])
                {
                    *g += v;
                }
            }
            Ok((loss, grad))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut total = vec![0.0; n_total];
    for shard in shards {
        let (l, g) = shard?;
        total_loss += l;
        for (a, b) in total.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total_loss / draws.len() as f64, total))
}

/// Mean conditional loss of `field` and of the zero field on fresh draws.
fn heldout_losses(
    field: &VelocityField,
    dataset: &[LabeledSample],
    held: &[usize],
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = rng::seeded(rng::derive_seed(seed, 2));
    let draws = 4 * held.len().max(500);
    let (mut model_loss, mut zero_loss) = (0.0, 0.0);
    for k in 0..draws {
        let s = &dataset[held[k % held.len()]];
        let t = rng::uniform_range(&mut rng, 1e-3, 1.0);
        let eps = rng::normal_vec(&mut rng, s.z.len());
        model_loss += fm_loss(field, &s.z, &eps, t, &s.instruction())?;
        zero_loss += eps
            .iter()
            .zip(&s.z)
            .map(|(e, a)| (e - a) * (e - a))
            .sum::<f64>();
    }
    Ok((model_loss / draws as f64, zero_loss / draws as f64))
}
