//! Velocity fields: closed-form analytic fields used as oracles, the
//! conditional MLP field, and classifier-free guidance.

mod train;

pub use train::{
    fm_loss, train_velocity, ConditioningSpec, LabeledSample, TrainConfig, TrainReport,
};

use crate::autodiff::{DifferentiableMap, Mlp};
use crate::error::{check_dim, Error, Result};
use crate::flow::VectorField;
use crate::linalg;
use crate::oracle::Instruction;

#[derive(Debug, Clone, PartialEq)]
pub enum VelocityField {
    /// All data at a single point `a`: `v(z, t) = (z - a) / t`.
    AnalyticDelta {
        target: Vec<f64>,
    },
    /// Data `z0 ~ N(0, sigma0^2 I)`: `v(z, t) = c(t) z`.
    AnalyticGaussian {
        sigma0: f64,
        dim: usize,
    },
    Mlp(MlpVelocity),
}

impl VelocityField {
    pub fn analytic_delta(target: Vec<f64>) -> Self {
        VelocityField::AnalyticDelta { target }
    }

    pub fn analytic_gaussian(sigma0: f64, dim: usize) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma0 must be positive, got {sigma0}"
            )));
        }
        Ok(VelocityField::AnalyticGaussian { sigma0, dim })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            VelocityField::AnalyticDelta { .. } => "analytic_delta",
            VelocityField::AnalyticGaussian { .. } => "analytic_gaussian",
            VelocityField::Mlp(_) => "mlp",
        }
    }

    pub fn as_mlp(&self) -> Option<&MlpVelocity> {
        match self {
            VelocityField::Mlp(m) => Some(m),
            _ => None,
        }
    }
}

/// Coefficient of the marginal-optimal velocity for Gaussian data,
/// `E[eps - z0 | z_t = z] = c(t) z`.
///
/// With `z_t = (1 - t) z0 + t eps`, `Cov(eps - z0, z_t) = t - (1 - t) sigma0^2`
/// and `Var(z_t) = (1 - t)^2 sigma0^2 + t^2` per coordinate.
pub fn gaussian_coefficient(sigma0: f64, t: f64) -> f64 {
    let s2 = sigma0 * sigma0;
    (t - (1.0 - t) * s2) / ((1.0 - t).powi(2) * s2 + t * t)
}

fn require_positive_time(kind: &'static str, t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTime { context: kind, t })
    }
}

impl VectorField for VelocityField {
    fn dim(&self) -> usize {
        match self {
            VelocityField::AnalyticDelta { target } => target.len(),
            VelocityField::AnalyticGaussian { dim, .. } => *dim,
            VelocityField::Mlp(m) => m.latent_dim(),
        }
    }

    fn velocity(&self, z: &[f64], t: f64, cond: &Instruction) -> Result<Vec<f64>> {
        check_dim("velocity latent", self.dim(), z.len())?;
        match self {
            VelocityField::AnalyticDelta { target } => {
                require_positive_time("analytic delta field", t)?;
                Ok(z.iter().zip(target).map(|(zi, a)| (zi - a) / t).collect())
            }
            VelocityField::AnalyticGaussian { sigma0, .. } => {
                require_positive_time("analytic gaussian field", t)?;
                Ok(linalg::scale(z, gaussian_coefficient(*sigma0, t)))
            }
            VelocityField::Mlp(m) => m.velocity(z, t, cond),
        }
    }

    fn vjp_z(&self, z: &[f64], t: f64, cond: &Instruction, w: &[f64]) -> Result<Vec<f64>> {
        check_dim("velocity latent", self.dim(), z.len())?;
        check_dim("velocity cotangent", self.dim(), w.len())?;
        match self {
            VelocityField::AnalyticDelta { .. } => {
                require_positive_time("analytic delta field", t)?;
                Ok(w.iter().map(|wi| wi / t).collect())
            }
            VelocityField::AnalyticGaussian { sigma0, .. } => {
                require_positive_time("analytic gaussian field", t)?;
                Ok(linalg::scale(w, gaussian_coefficient(*sigma0, t)))
            }
            VelocityField::Mlp(m) => m.vjp_z(z, t, cond, w),
        }
    }
}

/// MLP over `[z, t, object embedding, attribute embedding]`.
///
/// Each label slot has one learned embedding per label plus a trailing null
/// embedding, used when the slot is unspecified or dropped for guidance-free
/// training.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpVelocity {
    pub(crate) net: Mlp,
    pub(crate) latent_dim: usize,
    pub(crate) conditioning: ConditioningSpec,
    /// `(num_objects + 1) x embedding_dim`, row-major; last row is null.
    pub(crate) object_embeddings: Vec<f64>,
    /// `(num_attributes + 1) x embedding_dim`, row-major; last row is null.
    pub(crate) attribute_embeddings: Vec<f64>,
}

impl MlpVelocity {
    pub fn new(
        net: Mlp,
        latent_dim: usize,
        conditioning: ConditioningSpec,
        object_embeddings: Vec<f64>,
        attribute_embeddings: Vec<f64>,
    ) -> Result<Self> {
        let e = conditioning.embedding_dim;
        check_dim(
            "velocity net input",
            latent_dim + 1 + 2 * e,
            net.input_dim(),
        )?;
        check_dim("velocity net output", latent_dim, net.output_dim())?;
        check_dim(
            "object embeddings",
            (conditioning.num_objects + 1) * e,
            object_embeddings.len(),
        )?;
        check_dim(
            "attribute embeddings",
            (conditioning.num_attributes + 1) * e,
            attribute_embeddings.len(),
        )?;
        Ok(Self {
            net,
            latent_dim,
            conditioning,
            object_embeddings,
            attribute_embeddings,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn conditioning(&self) -> &ConditioningSpec {
        &self.conditioning
    }

    pub fn object_embeddings(&self) -> &[f64] {
        &self.object_embeddings
    }

    pub fn attribute_embeddings(&self) -> &[f64] {
        &self.attribute_embeddings
    }

    /// Row indices into the two embedding tables.
    pub(crate) fn embedding_rows(&self, cond: &Instruction) -> Result<(usize, usize)> {
        let c = &self.conditioning;
        let obj = match cond.object_id {
            Some(k) if k < c.num_objects => k,
            Some(k) => return Err(Error::UnknownLabel(format!("object {k}"))),
            None => c.num_objects,
        };
        let attr = match cond.attribute_id {
            Some(j) if j < c.num_attributes => j,
            Some(j) => return Err(Error::UnknownLabel(format!("attribute {j}"))),
            None => c.num_attributes,
        };
        Ok((obj, attr))
    }

    pub(crate) fn input_for_rows(&self, z: &[f64], t: f64, rows: (usize, usize)) -> Vec<f64> {
        let e = self.conditioning.embedding_dim;
        let mut x = Vec::with_capacity(self.net.input_dim());
        x.extend_from_slice(z);
        x.push(t);
        x.extend_from_slice(&self.object_embeddings[rows.0 * e..(rows.0 + 1) * e]);
        x.extend_from_slice(&self.attribute_embeddings[rows.1 * e..(rows.1 + 1) * e]);
        x
    }

    fn input(&self, z: &[f64], t: f64, cond: &Instruction) -> Result<Vec<f64>> {
        let rows = self.embedding_rows(cond)?;
        Ok(self.input_for_rows(z, t, rows))
    }

    fn velocity(&self, z: &[f64], t: f64, cond: &Instruction) -> Result<Vec<f64>> {
        let x = self.input(z, t, cond)?;
        self.net.forward(&x)
    }

    fn vjp_z(&self, z: &[f64], t: f64, cond: &Instruction, w: &[f64]) -> Result<Vec<f64>> {
        let x = self.input(z, t, cond)?;
        let mut g = self.net.vjp(&x, w)?;
        g.truncate(self.latent_dim);
        Ok(g)
    }
}

/// Classifier-free guidance `v_u + w (v_c - v_u)` over an underlying field.
#[derive(Debug, Clone, Copy)]
pub struct CfgField<'a> {
    pub field: &'a VelocityField,
    pub w_cfg: f64,
}

impl<'a> CfgField<'a> {
    pub fn new(field: &'a VelocityField, w_cfg: f64) -> Self {
        Self { field, w_cfg }
    }
}

/// Affine combination of conditional and unconditional velocities.
/// `w_cfg = 1` returns `v_cond` and `w_cfg = 0` returns `v_uncond` exactly.
pub fn cfg_velocity(
    field: &dyn VectorField,
    z: &[f64],
    t: f64,
    cond: &Instruction,
    w_cfg: f64,
) -> Result<Vec<f64>> {
    let uncond = Instruction::unconditional();
    if w_cfg == 1.0 || *cond == uncond {
        return field.velocity(z, t, cond);
    }
    let vu = field.velocity(z, t, &uncond)?;
    if w_cfg == 0.0 {
        return Ok(vu);
    }
    let vc = field.velocity(z, t, cond)?;
    Ok(vu
        .iter()
        .zip(&vc)
        .map(|(u, c)| u + w_cfg * (c - u))
        .collect())
}

impl VectorField for CfgField<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn velocity(&self, z: &[f64], t: f64, cond: &Instruction) -> Result<Vec<f64>> {
        cfg_velocity(self.field, z, t, cond, self.w_cfg)
    }

    fn vjp_z(&self, z: &[f64], t: f64, cond: &Instruction, w: &[f64]) -> Result<Vec<f64>> {
        let uncond = Instruction::unconditional();
        if self.w_cfg == 1.0 || *cond == uncond {
            return self.field.vjp_z(z, t, cond, w);
        }
        let gu = self.field.vjp_z(z, t, &uncond, w)?;
        if self.w_cfg == 0.0 {
            return Ok(gu);
        }
        let gc = self.field.vjp_z(z, t, cond, w)?;
        Ok(gu
            .iter()
            .zip(&gc)
            .map(|(u, c)| u + self.w_cfg * (c - u))
            .collect())
    }
}

/// Adapter exposing `z -> v(z, t, cond)` at fixed `(t, cond)` as a
/// [`DifferentiableMap`].
pub struct FieldAtTime<'a> {
    pub field: &'a dyn VectorField,
    pub t: f64,
    pub cond: Instruction,
}

impl DifferentiableMap for FieldAtTime<'_> {
    fn input_dim(&self) -> usize {
        self.field.dim()
    }

    fn output_dim(&self) -> usize {
        self.field.dim()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.field.velocity(x, self.t, &self.cond)
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.field.vjp_z(x, self.t, &self.cond, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_vjp, Activation, MlpSpec};
    use crate::flow::{look_ahead, make_schedule, sample, LatentState};
    use crate::rng;

    fn none() -> Instruction {
        Instruction::unconditional()
    }

    fn small_mlp_field(seed: u64) -> VelocityField {
        let cond = ConditioningSpec {
            embedding_dim: 2,
            num_objects: 2,
            num_attributes: 2,
        };
        let net = Mlp::new(&MlpSpec::new(
            vec![2 + 1 + 4, 16, 2],
            Activation::Tanh,
            seed,
        ))
        .unwrap();
        let mut r = rng::seeded(seed + 1);
        let oe = rng::normal_vec(&mut r, 6);
        let ae = rng::normal_vec(&mut r, 6);
        VelocityField::Mlp(MlpVelocity::new(net, 2, cond, oe, ae).unwrap())
    }

    #[test]
    fn delta_field_values() {
        let f = VelocityField::analytic_delta(vec![0.0, 0.0]);
        assert_eq!(
            f.velocity(&[1.0, 0.0], 0.5, &none()).unwrap(),
            vec![2.0, 0.0]
        );
        assert!(matches!(
            f.velocity(&[1.0, 0.0], 0.0, &none()),
            Err(Error::InvalidTime { .. })
        ));
    }

    #[test]
    fn delta_look_ahead_is_exact() {
        let a = vec![0.7, -1.3, 2.1];
        let f = VelocityField::analytic_delta(a.clone());
        let mut r = rng::seeded(5);
        for _ in 0..200 {
            let z = rng::normal_vec(&mut r, 3);
            let t = rng::uniform_range(&mut r, 1e-3, 1.0);
            let est = look_ahead(&f, &LatentState::new(z, t).unwrap(), &none()).unwrap();
            for (e, ai) in est.iter().zip(&a) {
                assert!((e - ai).abs() <= 1e-12, "{e} vs {ai} at t={t}");
            }
        }
    }

    #[test]
    fn delta_sampling_hits_target() {
        let a = vec![1.5, -0.25];
        let f = VelocityField::analytic_delta(a.clone());
        let tr = sample(&f, &none(), &make_schedule(50).unwrap(), 9).unwrap();
        for (z, ai) in tr.final_state().z.iter().zip(&a) {
            assert!((z - ai).abs() < 1e-9);
        }
    }

    #[test]
    fn gaussian_coefficient_checkpoints() {
        assert_eq!(gaussian_coefficient(1.0, 0.5), 0.0);
        assert_eq!(gaussian_coefficient(1.0, 1.0), 1.0);
        assert_eq!(gaussian_coefficient(0.37, 1.0), 1.0);
    }

    /// Monte-Carlo regression of `eps - z0` on `z_t` recovers c(t).
    #[test]
    fn gaussian_coefficient_matches_monte_carlo() {
        let mut r = rng::seeded(77);
        for &(sigma0, t) in &[(0.5, 0.3), (0.5, 0.8), (2.0, 0.5), (1.0, 0.2)] {
            let n = 200_000;
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for _ in 0..n {
                let z0 = sigma0 * rng::standard_normal(&mut r);
                let eps = rng::standard_normal(&mut r);
                let zt = (1.0 - t) * z0 + t * eps;
                sxy += zt * (eps - z0);
                sxx += zt * zt;
            }
            let mc = sxy / sxx;
            let c = gaussian_coefficient(sigma0, t);
            assert!(
                (mc - c).abs() < 0.02,
                "sigma0={sigma0} t={t}: mc {mc} vs {c}"
            );
        }
    }

    #[test]
    fn unit_gaussian_marginal_variance_follows_path() {
        // sigma0 = 1: both endpoints are N(0, 1), while the interpolant has
        // variance (1 - t)^2 + t^2 in between
        let f = VelocityField::analytic_gaussian(1.0, 1).unwrap();
        let sched = make_schedule(100).unwrap();
        let n = 10_000;
        let mut sums = vec![0.0; sched.times().len()];
        for seed in 0..n {
            let tr = sample(&f, &none(), &sched, seed).unwrap();
            for (s, st) in sums.iter_mut().zip(&tr.states) {
                *s += st.z[0] * st.z[0];
            }
        }
        for (i, s) in sums.iter().enumerate() {
            let t = sched.time(i);
            let expect = (1.0 - t).powi(2) + t * t;
            let var = s / n as f64;
            assert!(
                (var - expect).abs() < 0.05,
                "step {i}: var {var}, expected {expect}"
            );
        }
        let end = sums.last().unwrap() / n as f64;
        assert!((end - 1.0).abs() < 0.05);
    }

    #[test]
    fn cfg_reduces_to_endpoints() {
        let f = small_mlp_field(3);
        let z = [0.4, -0.9];
        let c = Instruction::new(1, 0);
        let vc = f.velocity(&z, 0.6, &c).unwrap();
        let vu = f.velocity(&z, 0.6, &none()).unwrap();
        assert_eq!(cfg_velocity(&f, &z, 0.6, &c, 1.0).unwrap(), vc);
        assert_eq!(cfg_velocity(&f, &z, 0.6, &c, 0.0).unwrap(), vu);
        // affine in w: check three points lie on one line
        let v2 = cfg_velocity(&f, &z, 0.6, &c, 2.0).unwrap();
        let v3 = cfg_velocity(&f, &z, 0.6, &c, 3.0).unwrap();
        for i in 0..2 {
            let slope = vc[i] - vu[i];
            assert!((v2[i] - (vu[i] + 2.0 * slope)).abs() < 1e-12);
            assert!((v3[i] - (vu[i] + 3.0 * slope)).abs() < 1e-12);
        }
    }

    #[test]
    fn cfg_of_condition_free_field_is_identity() {
        let f = VelocityField::analytic_gaussian(0.5, 2).unwrap();
        let c = Instruction::new(0, 1);
        let v = f.velocity(&[1.0, 2.0], 0.4, &c).unwrap();
        for w in [0.0, 1.0, 4.5] {
            assert_eq!(cfg_velocity(&f, &[1.0, 2.0], 0.4, &c, w).unwrap(), v);
        }
    }

    #[test]
    fn mlp_field_vjp_passes_check() {
        let f = small_mlp_field(8);
        for (t, c) in [(0.3, Instruction::new(0, 1)), (0.9, none())] {
            let m = FieldAtTime {
                field: &f,
                t,
                cond: c,
            };
            let r = check_vjp(&m, 50, 1e-4);
            assert!(r.pass, "{r:?}");
            let cfg = CfgField::new(&f, 2.5);
            let m = FieldAtTime {
                field: &cfg,
                t,
                cond: c,
            };
            assert!(check_vjp(&m, 50, 1e-4).pass);
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        let f = small_mlp_field(1);
        assert!(matches!(
            f.velocity(&[0.0, 0.0], 0.5, &Instruction::new(5, 0)),
            Err(Error::UnknownLabel(_))
        ));
    }
}
