//! Invariant battery run by `reflow selfcheck`, on small seeded models.

use std::fmt;

use crate::autodiff::{check_vjp, Activation, Mlp, MlpSpec};
use crate::error::Result;
use crate::flow::{look_ahead, make_schedule, sample, LatentState};
use crate::gito::rectified_sample;
use crate::linalg;
use crate::oracle::{Decoder, Instruction, Oracle, OracleMode};
use crate::rectify::{clip_grad, csa_grad, CsaObjective, GuidanceConfig, GuidanceModels};
use crate::rng;
use crate::velocity::{CfgField, ConditioningSpec, FieldAtTime, MlpVelocity, VelocityField};

use super::exit;

const VJP_TOL: f64 = 1e-4;
const VJP_PROBES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfcheckReport {
    pub items: Vec<CheckItem>,
}

impl SelfcheckReport {
    pub fn all_passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_passed() {
            exit::SUCCESS
        } else {
            exit::INVARIANT
        }
    }

    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

impl fmt::Display for SelfcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.items {
            writeln!(
                f,
                "[{}] {}: {}",
                if i.passed { "PASS" } else { "FAIL" },
                i.name,
                i.detail
            )?;
        }
        Ok(())
    }
}

pub fn cmd_selfcheck() -> Result<SelfcheckReport> {
    selfcheck_with(clip_grad)
}

struct Fixture {
    field: VelocityField,
    decoder: Decoder,
    oracle: Oracle,
}

fn fixture() -> Result<Fixture> {
    let d = 4;
    let cond = ConditioningSpec {
        embedding_dim: 3,
        num_objects: 2,
        num_attributes: 2,
    };
    let net = Mlp::new(&MlpSpec::new(
        vec![d + 1 + 6, 24, 24, d],
        Activation::Silu,
        11,
    ))?;
    let mut r = rng::seeded(12);
    let oe = rng::normal_vec(&mut r, 9);
    let ae = rng::normal_vec(&mut r, 9);
    let field = VelocityField::Mlp(MlpVelocity::new(net, d, cond, oe, ae)?);
    let emb = Mlp::new(&MlpSpec::new(vec![d, 16, 6], Activation::Tanh, 13))?;
    let cls = Mlp::new(&MlpSpec::new(vec![d, 16, 4], Activation::Tanh, 14))?;
    let table = (0..4).map(|_| rng::normal_vec(&mut r, 6)).collect();
    Ok(Fixture {
        field,
        decoder: Decoder::random(d, 15)?,
        oracle: Oracle::new(emb, table, cls, 2, 2, OracleMode::Introspective)?,
    })
}

fn item(name: &'static str, passed: bool, detail: String) -> CheckItem {
    CheckItem {
        name,
        passed,
        detail,
    }
}

/// Runs the battery with a substitutable clipping function so a faulty
/// implementation can be shown to fail.
pub fn selfcheck_with(clip: fn(&[f64], f64) -> Vec<f64>) -> Result<SelfcheckReport> {
    let fx = fixture()?;
    let mut items = Vec::new();
    let c = Instruction::new(0, 1);

    let vjp = |name, rep: crate::autodiff::VjpReport| {
        item(
            name,
            rep.pass,
            format!(
                "max rel err {:.2e} over {} probes",
                rep.max_rel_err, rep.trials
            ),
        )
    };
    items.push(vjp(
        "vjp velocity field",
        check_vjp(
            &FieldAtTime {
                field: &fx.field,
                t: 0.7,
                cond: c,
            },
            VJP_PROBES,
            VJP_TOL,
        ),
    ));
    items.push(vjp(
        "vjp decoder",
        check_vjp(fx.decoder.as_map(), VJP_PROBES, VJP_TOL),
    ));
    items.push(vjp(
        "vjp image embedder",
        check_vjp(fx.oracle.image_embedder(), VJP_PROBES, VJP_TOL),
    ));
    let models = GuidanceModels {
        field: &fx.field,
        decoder: &fx.decoder,
        oracle: &fx.oracle,
    };
    items.push(vjp(
        "vjp csa gradient",
        check_vjp(
            &CsaObjective {
                models,
                t: 0.8,
                c_ideal: c,
                cond: c,
                full_vjp: true,
            },
            VJP_PROBES,
            VJP_TOL,
        ),
    ));

    // analytic delta field
    let a = vec![0.5, -1.0, 0.25, 2.0];
    let delta = VelocityField::analytic_delta(a.clone());
    let mut r = rng::seeded(21);
    let mut worst: f64 = 0.0;
    let mut grad_max: f64 = 0.0;
    let dm = GuidanceModels {
        field: &delta,
        ..models
    };
    for _ in 0..20 {
        let z = rng::normal_vec(&mut r, 4);
        let t = rng::uniform_range(&mut r, 0.01, 1.0);
        let zhat = look_ahead(&delta, &LatentState { z: z.clone(), t }, &c)?;
        worst = worst.max(linalg::max_abs(&linalg::sub(&zhat, &a)));
        grad_max = grad_max.max(linalg::max_abs(&csa_grad(&z, t, &dm, &c, &c, true)?));
    }
    items.push(item(
        "analytic look-ahead",
        worst <= 1e-12,
        format!("max error {worst:.2e}"),
    ));
    items.push(item(
        "delta-field zero gradient",
        grad_max <= 1e-10,
        format!("max |g| {grad_max:.2e}"),
    ));

    // clipping
    let dlt = 1e-3;
    let mut violations = 0;
    for i in 0..10_000 {
        let dir = rng::normal_vec(&mut r, 4);
        let g = match i % 6 {
            0 => vec![0.0; 4],
            1 => linalg::scale(&linalg::normalize(&dir), dlt / 2.0),
            2 => linalg::scale(&linalg::normalize(&dir), dlt),
            3 => linalg::scale(&linalg::normalize(&dir), 2.0 * dlt),
            4 => linalg::scale(&linalg::normalize(&dir), 1e6 * dlt),
            _ => linalg::scale(&dir, 10f64.powf(rng::uniform_range(&mut r, -6.0, 3.0))),
        };
        let out = clip(&g, dlt);
        let n = linalg::norm(&g);
        let ok = linalg::norm(&out) <= dlt
            && if n == 0.0 {
                out.iter().all(|v| *v == 0.0)
            } else {
                let cos = linalg::dot(&out, &g) / (linalg::norm(&out) * n);
                (cos - 1.0).abs() <= 1e-12 && (n > dlt || out == g)
            };
        if !ok {
            violations += 1;
        }
    }
    items.push(item(
        "clipping",
        violations == 0,
        format!("{violations} violations in 10000 gradients"),
    ));

    // no-op equivalence and never-worse selection
    let sched = make_schedule(20)?;
    let cfg_field = CfgField::new(&fx.field, 1.0);
    let active = GuidanceConfig {
        window: [2, 8],
        k: 3,
        eta: 5.0,
        delta: 0.05,
        ..GuidanceConfig::default()
    };
    let mut mismatched = 0;
    let mut worse = 0;
    let mut delta_mismatch = 0;
    for seed in 0..10 {
        let base = sample(&cfg_field, &c, &sched, seed)?;
        for g in [
            GuidanceConfig {
                eta: 0.0,
                ..active.clone()
            },
            GuidanceConfig {
                k: 0,
                ..active.clone()
            },
            GuidanceConfig {
                window: [20, 20],
                ..active.clone()
            },
        ] {
            let guided =
                rectified_sample(&fx.field, &fx.decoder, &fx.oracle, &c, &sched, &g, seed)?;
            if !guided.same_path(&base) {
                mismatched += 1;
            }
        }
        let guided = rectified_sample(
            &fx.field,
            &fx.decoder,
            &fx.oracle,
            &c,
            &sched,
            &active,
            seed,
        )?;
        for d in &guided.diagnostics {
            if let Some(sel) = d.selected_candidate {
                if d.candidate_scores[sel] < d.candidate_scores[0] {
                    worse += 1;
                }
            }
        }
        let dbase = sample(&CfgField::new(&delta, 1.0), &c, &sched, seed)?;
        let dguided = rectified_sample(&delta, &fx.decoder, &fx.oracle, &c, &sched, &active, seed)?;
        if !dguided.same_path(&dbase) {
            delta_mismatch += 1;
        }
    }
    items.push(item(
        "no-op equivalence",
        mismatched == 0,
        format!("{mismatched} of 30 no-op runs differ from the unguided sampler"),
    ));
    items.push(item(
        "never-worse selection",
        worse == 0,
        format!("{worse} violations"),
    ));
    items.push(item(
        "delta-field bit identity",
        delta_mismatch == 0,
        format!("{delta_mismatch} of 10 runs differ"),
    ));
    Ok(SelfcheckReport { items })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes() {
        let rep = cmd_selfcheck().unwrap();
        assert!(rep.all_passed(), "{rep}");
        assert_eq!(rep.exit_code(), 0);
    }

    #[test]
    fn faulty_clip_is_caught() {
        fn no_clip(g: &[f64], _delta: f64) -> Vec<f64> {
            g.to_vec()
        }
        let rep = selfcheck_with(no_clip).unwrap();
        assert!(!rep.item("clipping").unwrap().passed);
        assert_eq!(rep.exit_code(), 2);
    }
}
