//! Latent rectification: alignment loss between the look-ahead decode and a
//! target instruction, its gradient through the look-ahead, L2 clipping and
//! injection.

use serde::{Deserialize, Serialize};

use crate::autodiff::DifferentiableMap;
use crate::error::{check_dim, check_finite, Error, Result};
use crate::flow::{LatentState, VectorField};
use crate::linalg;
use crate::oracle::{similarity, Decoder, Instruction, Oracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CIdealRefresh {
    /// Once per timestep, from the unmodified state.
    PerStep,
    /// Before every exploration iteration, from the current candidate.
    PerIteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Inclusive step-index interval `[start, end]`. A window starting at the
    /// final index `N` contains no steps.
    pub window: [usize; 2],
    #[serde(rename = "K")]
    pub k: usize,
    pub eta: f64,
    pub delta: f64,
    /// Selection advance, in scheduler steps.
    pub dt_lookahead: usize,
    pub gamma: f64,
    pub w_cfg: f64,
    pub full_vjp: bool,
    pub c_ideal_refresh: CIdealRefresh,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            window: [5, 10],
            k: 3,
            eta: 300.0,
            delta: 0.001,
            dt_lookahead: 1,
            gamma: 0.0,
            w_cfg: 1.0,
            full_vjp: true,
            c_ideal_refresh: CIdealRefresh::PerStep,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        let [start, end] = self.window;
        if start > end || end > num_steps {
            return Err(Error::InvalidConfig(format!(
                "window [{start}, {end}] not within 0..={num_steps}"
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eta must be >= 0, got {}",
                self.eta
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "delta must be > 0, got {}",
                self.delta
            )));
        }
        if self.dt_lookahead < 1 {
            return Err(Error::InvalidConfig("dt_lookahead must be >= 1".into()));
        }
        if !self.w_cfg.is_finite() || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(
                "w_cfg and gamma must be finite".into(),
            ));
        }
        if let Some(last) = self.active_steps(num_steps).last() {
            if last + self.dt_lookahead > num_steps {
                return Err(Error::InvalidConfig(format!(
                    "selection advance of {} steps from step {last} passes t = 0",
                    self.dt_lookahead
                )));
            }
        }
        Ok(())
    }

    /// Step indices that are rectified for an `N`-step schedule.
    pub fn active_steps(&self, num_steps: usize) -> std::ops::Range<usize> {
        let [start, end] = self.window;
        start.min(num_steps)..(end + 1).min(num_steps).max(start.min(num_steps))
    }

    pub fn in_window(&self, step: usize, num_steps: usize) -> bool {
        self.active_steps(num_steps).contains(&step)
    }
}

/// Models the rectification gradient is taken through.
#[derive(Clone, Copy)]
pub struct GuidanceModels<'a> {
    pub field: &'a dyn VectorField,
    pub decoder: &'a Decoder,
    pub oracle: &'a Oracle,
}

/// Loss and gradient at one latent.
#[derive(Debug, Clone, PartialEq)]
pub struct CsaEval {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl GuidanceModels<'_> {
    /// Decoded look-ahead `D(z - t v(z, t, c))`.
    pub fn look_ahead_observation(
        &self,
        state: &LatentState,
        cond: &Instruction,
    ) -> Result<Vec<f64>> {
        let zhat = crate::flow::look_ahead(self.field, state, cond)?;
        self.decoder.decode(&zhat)
    }

    /// `sim(E_img(D(z_hat)), E_txt(target))`.
    pub fn alignment(
        &self,
        state: &LatentState,
        cond: &Instruction,
        target: &Instruction,
    ) -> Result<f64> {
        let x = self.look_ahead_observation(state, cond)?;
        let e = self.oracle.embed_image(&x)?;
        Ok(similarity(&e, self.oracle.embed_instruction(target)?))
    }
}

fn require_time(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTime {
            context: "rectification",
            t,
        })
    }
}

/// `1 - sim(E_img(D(z_hat)), E_txt(c_ideal))`, in `[0, 2]`.
pub fn csa_loss(
    z: &[f64],
    t: f64,
    models: &GuidanceModels<'_>,
    c_ideal: &Instruction,
    cond: &Instruction,
) -> Result<f64> {
    require_time(t)?;
    let state = LatentState { z: z.to_vec(), t };
    let loss = 1.0 - models.alignment(&state, cond, c_ideal)?;
    check_finite("csa loss", &[loss])?;
    Ok(loss)
}

/// Gradient of [`csa_loss`] in `z`:
/// `(I - t dv/dz)^T A^T (dE_img/dx)^T (-e_txt)`.
///
/// With `full_vjp = false` the look-ahead factor is the identity.
pub fn csa_grad(
    z: &[f64],
    t: f64,
    models: &GuidanceModels<'_>,
    c_ideal: &Instruction,
    cond: &Instruction,
    full_vjp: bool,
) -> Result<Vec<f64>> {
    csa_eval(z, t, models, c_ideal, cond, full_vjp).map(|e| e.grad)
}

/// Loss and gradient sharing one forward pass.
pub fn csa_eval(
    z: &[f64],
    t: f64,
    models: &GuidanceModels<'_>,
    c_ideal: &Instruction,
    cond: &Instruction,
    full_vjp: bool,
) -> Result<CsaEval> {
    require_time(t)?;
    check_dim("csa latent", models.field.dim(), z.len())?;
    let v = models.field.velocity(z, t, cond)?;
    check_finite("velocity", &v)?;
    let zhat = linalg::sub_scaled(z, t, &v);
    let x = models.decoder.decode(&zhat)?;
    let e = models.oracle.embed_image(&x)?;
    let target = models.oracle.embed_instruction(c_ideal)?;
    let loss = 1.0 - similarity(&e, target);
    check_finite("csa loss", &[loss])?;

    let d_e: Vec<f64> = target.iter().map(|v| -v).collect();
    let d_x = models.oracle.embed_image_vjp(&x, &d_e)?;
    let d_zhat = models.decoder.decode_vjp(&d_x)?;
    if !full_vjp {
        check_finite("csa gradient", &d_zhat)?;
        return Ok(CsaEval { loss, grad: d_zhat });
    }
    let u = models.field.vjp_z(z, t, cond, &d_zhat)?;
    let tu = linalg::scale(&u, t);
    let mut grad = linalg::sub(&d_zhat, &tu);
    check_finite("csa gradient", &grad)?;
    // When the two factors cancel to within rounding, the look-ahead does not
    // depend on z and the residual is noise.
    let floor = 8.0 * f64::EPSILON * (linalg::norm(&d_zhat) + linalg::norm(&tu));
    if linalg::norm(&grad) <= floor {
        grad.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(CsaEval { loss, grad })
}

/// Rescales `g` onto the ball of radius `delta`; shorter gradients pass
/// through unchanged.
pub fn clip_grad(g: &[f64], delta: f64) -> Vec<f64> {
    let n = linalg::norm(g);
    if n <= delta {
        return g.to_vec();
    }
    let mut s = delta / n;
    let mut out = linalg::scale(g, s);
    while linalg::norm(&out) > delta {
        s *= 1.0 - f64::EPSILON;
        out = linalg::scale(g, s);
    }
    out
}

/// `z - eta * g_hat`; `eta = 0` returns `z` bit for bit.
pub fn inject(z: &[f64], g_hat: &[f64], eta: f64) -> Result<Vec<f64>> {
    check_dim("inject", z.len(), g_hat.len())?;
    if eta == 0.0 {
        return Ok(z.to_vec());
    }
    Ok(linalg::sub_scaled(z, eta, g_hat))
}

/// Velocity-space guidance `v + gamma * grad L`.
pub fn guided_velocity(
    field: &dyn VectorField,
    z: &[f64],
    t: f64,
    cond: &Instruction,
    loss_grad: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    check_dim("guided velocity", z.len(), loss_grad.len())?;
    let v = field.velocity(z, t, cond)?;
    if gamma == 0.0 {
        return Ok(v);
    }
    Ok(v.iter()
        .zip(loss_grad)
        .map(|(vi, gi)| vi + gamma * gi)
        .collect())
}

/// `z -> [csa_loss(z)]` as a differentiable map, for derivative checks.
pub struct CsaObjective<'a> {
    pub models: GuidanceModels<'a>,
    pub t: f64,
    pub c_ideal: Instruction,
    pub cond: Instruction,
    pub full_vjp: bool,
}

impl DifferentiableMap for CsaObjective<'_> {
    fn input_dim(&self) -> usize {
        self.models.field.dim()
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![csa_loss(
            x,
            self.t,
            &self.models,
            &self.c_ideal,
            &self.cond,
        )?])
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        check_dim("csa cotangent", 1, w.len())?;
        let g = csa_grad(
            x,
            self.t,
            &self.models,
            &self.c_ideal,
            &self.cond,
            self.full_vjp,
        )?;
        Ok(linalg::scale(&g, w[0]))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::{check_vjp, Activation, Mlp, MlpSpec};
    use crate::oracle::{Oracle, OracleMode};
    use crate::rng;
    use crate::velocity::{ConditioningSpec, MlpVelocity, VelocityField};

    /// Oracle with a linear, bias-free image embedder and one-hot table rows.
    pub(crate) fn linear_oracle(dim: usize, weights: Vec<f64>) -> Oracle {
        let emb = Mlp::from_parameters(
            vec![dim, dim],
            Activation::Tanh,
            weights.into_iter().chain(vec![0.0; dim]).collect(),
        )
        .unwrap();
        let cls = Mlp::new(&MlpSpec::new(vec![dim, 4], Activation::Tanh, 3)).unwrap();
        let mut table = Vec::new();
        for i in 0..4 {
            let mut row = vec![0.05; dim];
            row[i % dim] = 1.0;
            if i >= dim {
                row[(i + 1) % dim] = -1.0;
            }
            table.push(row);
        }
        Oracle::new(emb, table, cls, 2, 2, OracleMode::Echo).unwrap()
    }

    pub(crate) fn mlp_field(dim: usize, seed: u64) -> VelocityField {
        let cond = ConditioningSpec {
            embedding_dim: 2,
            num_objects: 2,
            num_attributes: 2,
        };
        let net = Mlp::new(&MlpSpec::new(
            vec![dim + 1 + 4, 16, dim],
            Activation::Tanh,
            seed,
        ))
        .unwrap();
        let mut r = rng::seeded(seed + 7);
        let oe = rng::normal_vec(&mut r, 6);
        let ae = rng::normal_vec(&mut r, 6);
        VelocityField::Mlp(MlpVelocity::new(net, dim, cond, oe, ae).unwrap())
    }

    fn random_oracle(dim: usize, seed: u64) -> Oracle {
        let emb = Mlp::new(&MlpSpec::new(vec![dim, 8, 3], Activation::Tanh, seed)).unwrap();
        let cls = Mlp::new(&MlpSpec::new(vec![dim, 4], Activation::Tanh, seed + 1)).unwrap();
        let mut r = rng::seeded(seed + 2);
        let table = (0..4).map(|_| rng::normal_vec(&mut r, 3)).collect();
        Oracle::new(emb, table, cls, 2, 2, OracleMode::Echo).unwrap()
    }

    #[test]
    fn defaults_and_serialized_names() {
        let g = GuidanceConfig::default();
        assert_eq!(g.window, [5, 10]);
        assert_eq!(g.k, 3);
        assert_eq!(g.eta, 300.0);
        assert_eq!(g.delta, 0.001);
        assert_eq!(g.dt_lookahead, 1);
        let json = serde_json::to_value(&g).unwrap();
        for key in [
            "window",
            "K",
            "eta",
            "delta",
            "dt_lookahead",
            "gamma",
            "w_cfg",
            "full_vjp",
            "c_ideal_refresh",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["c_ideal_refresh"], "per_step");
        let bad = serde_json::json!({"window": [5, 10], "k": 3});
        assert!(serde_json::from_value::<GuidanceConfig>(bad).is_err());
    }

    #[test]
    fn validation() {
        let mut g = GuidanceConfig::default();
        assert!(g.validate(50).is_ok());
        g.window = [10, 5];
        assert!(g.validate(50).is_err());
        g.window = [45, 60];
        assert!(g.validate(50).is_err());
        g.window = [45, 50];
        g.dt_lookahead = 2;
        assert!(g.validate(50).is_err());
        g.dt_lookahead = 1;
        assert!(g.validate(50).is_ok());
        g.window = [50, 50];
        assert!(g.validate(50).is_ok());
        assert_eq!(g.active_steps(50).len(), 0);
        g.delta = 0.0;
        assert!(g.validate(50).is_err());
    }

    #[test]
    fn window_is_inclusive() {
        let g = GuidanceConfig::default();
        let steps: Vec<usize> = g.active_steps(50).collect();
        assert_eq!(steps, (5..=10).collect::<Vec<_>>());
        assert!(
            !g.in_window(4, 50)
                && g.in_window(5, 50)
                && g.in_window(10, 50)
                && !g.in_window(11, 50)
        );
    }

    #[test]
    fn clip_examples() {
        let d = 1e-3;
        let g = [2e-3, 0.0];
        let c = clip_grad(&g, d);
        assert!(linalg::norm(&c) <= d);
        assert!((c[0] - 1e-3).abs() < 1e-15 && c[1] == 0.0);
        assert_eq!(clip_grad(&[5e-4, 0.0], d), vec![5e-4, 0.0]);
        assert_eq!(clip_grad(&[0.0, 0.0], d), vec![0.0, 0.0]);
    }

    #[test]
    fn inject_examples() {
        assert_eq!(
            inject(&[1.0, 1.0], &[0.001, 0.0], 0.0).unwrap(),
            vec![1.0, 1.0]
        );
        let z = inject(&[1.0, 1.0], &[0.001, 0.0], 300.0).unwrap();
        assert!((z[0] - 0.7).abs() < 1e-12 && z[1] == 1.0);
        assert!(inject(&[1.0], &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn loss_range_examples() {
        // identity decoder, identity embedder; table row 0 is along e_0
        let mut w = vec![0.0; 4];
        w[0] = 1.0;
        w[3] = 1.0;
        let oracle = linear_oracle(2, w);
        let field = VelocityField::analytic_delta(vec![0.0, 0.0]);
        let dec = Decoder::identity(2);
        let models = GuidanceModels {
            field: &field,
            decoder: &dec,
            oracle: &oracle,
        };
        let target = oracle
            .embed_instruction(&Instruction::new(0, 0))
            .unwrap()
            .to_vec();
        // delta field at a: look-ahead is a, so pick a along / against / across target
        for (a, expect) in [
            (target.clone(), 0.0),
            (linalg::scale(&target, -1.0), 2.0),
            (vec![-target[1], target[0]], 1.0),
        ] {
            let f = VelocityField::analytic_delta(a);
            let m = GuidanceModels {
                field: &f,
                ..models
            };
            let l = csa_loss(
                &[0.3, 0.4],
                0.5,
                &m,
                &Instruction::new(0, 0),
                &Instruction::new(0, 0),
            )
            .unwrap();
            assert!((l - expect).abs() < 1e-12, "{l} vs {expect}");
        }
    }

    #[test]
    fn delta_field_gradient_vanishes() {
        let field = VelocityField::analytic_delta(vec![0.4, -0.3, 1.1]);
        let dec = Decoder::random(3, 5).unwrap();
        let oracle = random_oracle(3, 9);
        let models = GuidanceModels {
            field: &field,
            decoder: &dec,
            oracle: &oracle,
        };
        let mut r = rng::seeded(1);
        for _ in 0..50 {
            let z = rng::normal_vec(&mut r, 3);
            let t = rng::uniform_range(&mut r, 0.02, 1.0);
            let c = Instruction::new(1, 0);
            let g = csa_grad(&z, t, &models, &c, &c, true).unwrap();
            assert!(g.iter().all(|x| *x == 0.0));
            let g_sg = csa_grad(&z, t, &models, &c, &c, false).unwrap();
            assert!(linalg::norm(&g_sg) > 0.0);
        }
    }

    #[test]
    fn stop_gradient_closed_form() {
        // identity decoder, linear embedder W: grad = -W^T (I - e e^T) target / |Wx|
        let w = vec![1.0, 0.5, -0.3, 2.0];
        let oracle = linear_oracle(2, w.clone());
        let field = mlp_field(2, 4);
        let dec = Decoder::identity(2);
        let models = GuidanceModels {
            field: &field,
            decoder: &dec,
            oracle: &oracle,
        };
        let c = Instruction::new(1, 1);
        let z = [0.3, -0.8];
        let t = 0.6;
        let v = field.velocity(&z, t, &c).unwrap();
        let x = linalg::sub_scaled(&z, t, &v);
        let u = linalg::matvec(&w, 2, 2, &x);
        let n = linalg::norm(&u);
        let e = linalg::scale(&u, 1.0 / n);
        let tgt = oracle.embed_instruction(&c).unwrap();
        let te = linalg::dot(tgt, &e);
        let de: Vec<f64> = tgt.iter().zip(&e).map(|(a, b)| -(a - te * b) / n).collect();
        let expect = linalg::matvec_t(&w, 2, 2, &de);
        let g = csa_grad(&z, t, &models, &c, &c, false).unwrap();
        for (a, b) in g.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let field = mlp_field(3, 21);
        let dec = Decoder::random(3, 2).unwrap();
        let oracle = random_oracle(3, 17);
        for (t, c) in [
            (0.9, Instruction::new(0, 1)),
            (0.35, Instruction::new(1, 0)),
        ] {
            let obj = CsaObjective {
                models: GuidanceModels {
                    field: &field,
                    decoder: &dec,
                    oracle: &oracle,
                },
                t,
                c_ideal: c,
                cond: c,
                full_vjp: true,
            };
            let rep = check_vjp(&obj, 50, 1e-4);
            assert!(rep.pass, "{rep:?}");
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let field = mlp_field(3, 8);
        let dec = Decoder::random(3, 4).unwrap();
        let oracle = random_oracle(3, 6);
        let models = GuidanceModels {
            field: &field,
            decoder: &dec,
            oracle: &oracle,
        };
        let c = Instruction::new(0, 0);
        let mut r = rng::seeded(2);
        for _ in 0..20 {
            let z = rng::normal_vec(&mut r, 3);
            let ev = csa_eval(&z, 0.7, &models, &c, &c, true).unwrap();
            assert!(linalg::norm(&ev.grad) > 0.0);
            let mut eta = 1.0;
            let mut decreased = false;
            for _ in 0..20 {
                let z2 = inject(&z, &ev.grad, eta).unwrap();
                if csa_loss(&z2, 0.7, &models, &c, &c).unwrap() < ev.loss {
                    decreased = true;
                    break;
                }
                eta *= 0.5;
            }
            assert!(decreased);
        }
    }

    #[test]
    fn guided_velocity_examples() {
        let field = mlp_field(2, 1);
        let c = Instruction::new(0, 1);
        let z = [0.1, 0.2];
        let v = field.velocity(&z, 0.5, &c).unwrap();
        assert_eq!(
            guided_velocity(&field, &z, 0.5, &c, &[1.0, -1.0], 0.0).unwrap(),
            v
        );
        assert_eq!(
            guided_velocity(&field, &z, 0.5, &c, &[0.0, 0.0], 3.0).unwrap(),
            v
        );
        let g = [0.5, -2.0];
        let at = |gamma| guided_velocity(&field, &z, 0.5, &c, &g, gamma).unwrap();
        let (a, b, m) = (at(-1.0), at(3.0), at(1.0));
        for i in 0..2 {
            assert!(((a[i] + b[i]) / 2.0 - m[i]).abs() < 1e-12);
        }
    }
}
