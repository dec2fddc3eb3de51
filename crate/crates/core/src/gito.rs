//! Greedy trajectory optimization: candidate exploration by repeated
//! injection, look-ahead scoring against the user instruction, and greedy
//! selection inside the rectification window.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    euler_step_to, initial_noise, LatentState, Schedule, StepDiagnostics, Trajectory, VectorField,
};
use crate::linalg;
use crate::oracle::{Decoder, Instruction, Oracle};
use crate::rectify::{clip_grad, csa_eval, inject, CIdealRefresh, GuidanceConfig, GuidanceModels};
use crate::velocity::{CfgField, VelocityField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub t: f64,
    /// `candidates[0]` is the unmodified state.
    pub candidates: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub selected: usize,
    /// Unclipped gradient norm at each exploration iterate.
    pub grad_norms: Vec<f64>,
    /// Target instruction used for each exploration iterate.
    pub c_ideal: Vec<Instruction>,
}

impl CandidateSet {
    pub fn selected_latent(&self) -> &[f64] {
        &self.candidates[self.selected]
    }
}

/// Everything a rectified step needs besides the state itself.
#[derive(Clone, Copy)]
pub struct GuidanceContext<'a> {
    pub models: GuidanceModels<'a>,
    pub schedule: &'a Schedule,
    pub guidance: &'a GuidanceConfig,
}

impl GuidanceContext<'_> {
    fn target_for(&self, z: &[f64], t: f64, c_user: &Instruction) -> Result<Instruction> {
        let state = LatentState { z: z.to_vec(), t };
        let x = self.models.look_ahead_observation(&state, c_user)?;
        self.models.oracle.extract_ideal(&x, c_user)
    }
}

/// Builds `K + 1` candidates by clipped gradient injection. Scores are left
/// empty.
pub fn explore(
    z: &[f64],
    t: f64,
    c_user: &Instruction,
    ctx: &GuidanceContext<'_>,
) -> Result<CandidateSet> {
    let g = ctx.guidance;
    let mut candidates = Vec::with_capacity(g.k + 1);
    let mut grad_norms = Vec::with_capacity(g.k);
    let mut targets = Vec::with_capacity(g.k);
    candidates.push(z.to_vec());
    let mut c_ideal = if g.k > 0 {
        Some(ctx.target_for(z, t, c_user)?)
    } else {
        None
    };
    for k in 0..g.k {
        let current = &candidates[k];
        if g.c_ideal_refresh == CIdealRefresh::PerIteration && k > 0 {
            c_ideal = Some(ctx.target_for(current, t, c_user)?);
        }
        let target = c_ideal.expect("set before the loop");
        let ev = csa_eval(current, t, &ctx.models, &target, c_user, g.full_vjp)?;
        grad_norms.push(linalg::norm(&ev.grad));
        targets.push(target);
        let next = inject(current, &clip_grad(&ev.grad, g.delta), g.eta)?;
        candidates.push(next);
    }
    Ok(CandidateSet {
        t,
        candidates,
        scores: Vec::new(),
        selected: 0,
        grad_norms,
        c_ideal: targets,
    })
}

/// Similarity of the decoded look-ahead with `c_user` after advancing
/// `dt_steps` scheduler steps from `step` with the baseline velocity.
pub fn score_candidate(
    z: &[f64],
    step: usize,
    models: &GuidanceModels<'_>,
    schedule: &Schedule,
    c_user: &Instruction,
    dt_steps: usize,
) -> Result<f64> {
    let n = schedule.num_steps();
    if step + dt_steps > n {
        return Err(Error::StepTooLarge {
            dt: dt_steps as f64 / n as f64,
            t: schedule.time(step.min(n)),
        });
    }
    let mut state = LatentState {
        z: z.to_vec(),
        t: schedule.time(step),
    };
    for i in step + 1..=step + dt_steps {
        state = euler_step_to(models.field, &state, schedule.time(i), c_user)?;
    }
    models.alignment(&state, c_user, c_user)
}

/// Argmax with the lowest index winning ties; NaN never wins.
pub fn select(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] || scores[best].is_nan() && !s.is_nan() {
            best = i;
        }
    }
    best
}

/// Explore, score and select at one step of the schedule.
pub fn rectify_step(
    z: &[f64],
    step: usize,
    c_user: &Instruction,
    ctx: &GuidanceContext<'_>,
) -> Result<CandidateSet> {
    let mut set = explore(z, ctx.schedule.time(step), c_user, ctx)?;
    set.scores = set
        .candidates
        .par_iter()
        .map(|c| {
            score_candidate(
                c,
                step,
                &ctx.models,
                ctx.schedule,
                c_user,
                ctx.guidance.dt_lookahead,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    set.selected = select(&set.scores);
    Ok(set)
}

/// Guided sampler. Outside the window it is step-for-step the unguided
/// sampler on the CFG field; inside, each step integrates from the selected
/// candidate with a fresh velocity evaluation.
pub fn rectified_sample(
    field: &VelocityField,
    decoder: &Decoder,
    oracle: &Oracle,
    c_user: &Instruction,
    schedule: &Schedule,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Trajectory> {
    let n = schedule.num_steps();
    guidance.validate(n)?;
    let cfg = CfgField::new(field, guidance.w_cfg);
    let ctx = GuidanceContext {
        models: GuidanceModels {
            field: &cfg,
            decoder,
            oracle,
        },
        schedule,
        guidance,
    };
    let mut state = LatentState::new(initial_noise(cfg.dim(), seed), schedule.time(0))?;
    let mut states = Vec::with_capacity(n + 1);
    let mut diagnostics = Vec::with_capacity(n + 1);
    for i in 0..n {
        let mut diag = StepDiagnostics::default();
        if guidance.in_window(i, n) {
            let mut set = rectify_step(&state.z, i, c_user, &ctx)?;
            diag.grad_norm = set.grad_norms.first().copied();
            diag.c_ideal = set.c_ideal.first().copied();
            diag.selected_candidate = Some(set.selected);
            if set.selected != 0 {
                state.z = set.candidates.swap_remove(set.selected);
            }
            diag.candidate_scores = set.scores;
        }
        let next = euler_step_to(&cfg, &state, schedule.time(i + 1), c_user)?;
        states.push(std::mem::replace(&mut state, next));
        diagnostics.push(diag);
    }
    states.push(state);
    diagnostics.push(StepDiagnostics::default());
    let mut traj = Trajectory {
        states,
        diagnostics,
    };
    annotate_alignment(&mut traj, &ctx.models, c_user)?;
    Ok(traj)
}

/// Fills `alignment_score` for every state: similarity of the decoded
/// look-ahead with `c_user`.
pub fn annotate_alignment(
    traj: &mut Trajectory,
    models: &GuidanceModels<'_>,
    c_user: &Instruction,
) -> Result<()> {
    let scores = traj
        .states
        .par_iter()
        .map(|s| models.alignment(s, c_user, c_user))
        .collect::<Result<Vec<_>>>()?;
    for (d, s) in traj.diagnostics.iter_mut().zip(scores) {
        d.alignment_score = Some(s);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, Mlp, MlpSpec};
    use crate::flow::{make_schedule, sample};
    use crate::oracle::OracleMode;
    use crate::rectify::tests::mlp_field;
    use crate::rng;

    fn oracle(dim: usize, seed: u64) -> Oracle {
        let emb = Mlp::new(&MlpSpec::new(vec![dim, 8, 3], Activation::Tanh, seed)).unwrap();
        let cls = Mlp::new(&MlpSpec::new(vec![dim, 8, 4], Activation::Tanh, seed + 1)).unwrap();
        let mut r = rng::seeded(seed + 2);
        let table = (0..4).map(|_| rng::normal_vec(&mut r, 3)).collect();
        Oracle::new(emb, table, cls, 2, 2, OracleMode::Introspective).unwrap()
    }

    fn guidance(k: usize, eta: f64) -> GuidanceConfig {
        GuidanceConfig {
            k,
            eta,
            delta: 0.05,
            window: [2, 6],
            ..GuidanceConfig::default()
        }
    }

    #[test]
    fn select_examples() {
        assert_eq!(select(&[0.1, 0.5, 0.3]), 1);
        assert_eq!(select(&[0.2, 0.2, 0.2]), 0);
        assert_eq!(select(&[0.7]), 0);
        assert_eq!(select(&[f64::NAN, 0.1]), 1);
    }

    #[test]
    fn explore_counts_and_zero_gradient() {
        let field = mlp_field(3, 2);
        let dec = Decoder::random(3, 1).unwrap();
        let o = oracle(3, 4);
        let sched = make_schedule(10).unwrap();
        for k in [0, 3] {
            let g = guidance(k, 1.0);
            let ctx = GuidanceContext {
                models: GuidanceModels {
                    field: &field,
                    decoder: &dec,
                    oracle: &o,
                },
                schedule: &sched,
                guidance: &g,
            };
            let set = explore(&[0.1, 0.2, 0.3], 0.8, &Instruction::new(0, 1), &ctx).unwrap();
            assert_eq!(set.candidates.len(), k + 1);
            assert_eq!(set.candidates[0], vec![0.1, 0.2, 0.3]);
        }
        let delta = VelocityField::analytic_delta(vec![1.0, 0.0, -1.0]);
        let g = guidance(3, 10.0);
        let ctx = GuidanceContext {
            models: GuidanceModels {
                field: &delta,
                decoder: &dec,
                oracle: &o,
            },
            schedule: &sched,
            guidance: &g,
        };
        let set = explore(&[0.1, 0.2, 0.3], 0.8, &Instruction::new(0, 1), &ctx).unwrap();
        assert!(set.candidates.iter().all(|c| c == &set.candidates[0]));
    }

    #[test]
    fn score_rejects_crossing_zero() {
        let field = mlp_field(3, 2);
        let dec = Decoder::random(3, 1).unwrap();
        let o = oracle(3, 4);
        let sched = make_schedule(10).unwrap();
        let m = GuidanceModels {
            field: &field,
            decoder: &dec,
            oracle: &o,
        };
        let c = Instruction::new(1, 1);
        assert!(score_candidate(&[0.0; 3], 9, &m, &sched, &c, 1).is_ok());
        assert!(score_candidate(&[0.0; 3], 9, &m, &sched, &c, 2).is_err());
        let s = score_candidate(&[0.3, 0.1, 0.0], 4, &m, &sched, &c, 1).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn zero_dt_score_is_one_minus_loss() {
        let field = mlp_field(3, 5);
        let dec = Decoder::random(3, 1).unwrap();
        let o = oracle(3, 4);
        let sched = make_schedule(10).unwrap();
        let m = GuidanceModels {
            field: &field,
            decoder: &dec,
            oracle: &o,
        };
        let c = Instruction::new(0, 0);
        let z = [0.4, -0.2, 0.9];
        let s = score_candidate(&z, 3, &m, &sched, &c, 0).unwrap();
        let l = crate::rectify::csa_loss(&z, sched.time(3), &m, &c, &c).unwrap();
        assert!((s - (1.0 - l)).abs() < 1e-12);
    }

    #[test]
    fn no_op_configurations_match_unguided() {
        let field = mlp_field(3, 9);
        let dec = Decoder::random(3, 3).unwrap();
        let o = oracle(3, 2);
        let sched = make_schedule(12).unwrap();
        let c = Instruction::new(1, 0);
        let cfg = CfgField::new(&field, 1.0);
        for g in [
            guidance(3, 0.0),
            guidance(0, 5.0),
            GuidanceConfig {
                window: [12, 12],
                ..guidance(3, 5.0)
            },
        ] {
            for seed in 0..5 {
                let base = sample(&cfg, &c, &sched, seed).unwrap();
                let guided = rectified_sample(&field, &dec, &o, &c, &sched, &g, seed).unwrap();
                assert!(guided.same_path(&base));
            }
        }
    }

    #[test]
    fn delta_field_is_bit_identical() {
        let field = VelocityField::analytic_delta(vec![0.5, -0.5, 0.25]);
        let dec = Decoder::random(3, 3).unwrap();
        let o = oracle(3, 2);
        let sched = make_schedule(12).unwrap();
        let c = Instruction::new(0, 1);
        let g = GuidanceConfig {
            window: [0, 10],
            ..guidance(3, 50.0)
        };
        for seed in 0..10 {
            let base = sample(&CfgField::new(&field, 1.0), &c, &sched, seed).unwrap();
            let guided = rectified_sample(&field, &dec, &o, &c, &sched, &g, seed).unwrap();
            assert!(guided.same_path(&base));
            assert!(guided.diagnostics[..11]
                .iter()
                .all(|d| d.selected_candidate == Some(0)));
        }
    }

    #[test]
    fn never_worse_and_diagnostics_complete() {
        let field = mlp_field(3, 13);
        let dec = Decoder::random(3, 7).unwrap();
        let o = oracle(3, 5);
        let sched = make_schedule(12).unwrap();
        let g = guidance(3, 2.0);
        for seed in 0..10 {
            let traj =
                rectified_sample(&field, &dec, &o, &Instruction::new(1, 1), &sched, &g, seed)
                    .unwrap();
            assert_eq!(traj.diagnostics.len(), 13);
            for (i, d) in traj.diagnostics.iter().enumerate() {
                assert!(d.alignment_score.is_some());
                if g.in_window(i, 12) {
                    assert_eq!(d.candidate_scores.len(), 4);
                    let sel = d.selected_candidate.unwrap();
                    assert!(d.candidate_scores[sel] >= d.candidate_scores[0]);
                } else {
                    assert!(d.selected_candidate.is_none());
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let field = mlp_field(3, 13);
        let dec = Decoder::random(3, 7).unwrap();
        let o = oracle(3, 5);
        let sched = make_schedule(12).unwrap();
        let g = guidance(2, 2.0);
        let a = rectified_sample(&field, &dec, &o, &Instruction::new(0, 1), &sched, &g, 4).unwrap();
        let b = rectified_sample(&field, &dec, &o, &Instruction::new(0, 1), &sched, &g, 4).unwrap();
        assert!(a.same_path(&b));
        assert_eq!(a.diagnostics, b.diagnostics);
    }
}
