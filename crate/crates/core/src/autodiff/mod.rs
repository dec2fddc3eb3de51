//! Forward evaluation and vector-Jacobian products for the small, closed set
//! of differentiable maps used by the guidance gradient.
//!
//! There is no tape: each map type hand-writes its backward pass.

mod check;
mod mlp;

pub use check::{central_difference_vjp, check_vjp, check_vjp_seeded, VjpReport};
pub use mlp::{Activation, Mlp, MlpSpec};

use crate::error::{check_dim, check_finite, Result};
use crate::linalg;

/// A map `R^n -> R^m` with a vector-Jacobian product.
///
/// Implementations are immutable after construction and must be safe to share
/// across threads.
pub trait DifferentiableMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Evaluates the map. Implementations validate length and finiteness of `x`.
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Returns `J(x)^T w`, where `J` is the Jacobian of [`forward`] at `x`.
    ///
    /// [`forward`]: DifferentiableMap::forward
    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>>;
}

pub(crate) fn check_input(map: &dyn DifferentiableMap, x: &[f64]) -> Result<()> {
    check_dim("map input", map.input_dim(), x.len())?;
    check_finite("map input", x)
}

pub(crate) fn check_cotangent(map: &dyn DifferentiableMap, x: &[f64], w: &[f64]) -> Result<()> {
    check_dim("map input", map.input_dim(), x.len())?;
    check_dim("vjp cotangent", map.output_dim(), w.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Identity {
    pub dim: usize,
}

impl Identity {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl DifferentiableMap for Identity {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(self, x)?;
        Ok(x.to_vec())
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        check_cotangent(self, x, w)?;
        Ok(w.to_vec())
    }
}

/// Fixed affine map `x -> A x + b` with `A` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
    bias: Vec<f64>,
}

impl Affine {
    pub fn new(rows: usize, cols: usize, matrix: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_dim("affine matrix", rows * cols, matrix.len())?;
        check_dim("affine bias", rows, bias.len())?;
        check_finite("affine matrix", &matrix)?;
        check_finite("affine bias", &bias)?;
        Ok(Self {
            rows,
            cols,
            matrix,
            bias,
        })
    }

    pub fn linear(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self> {
        Self::new(rows, cols, matrix, vec![0.0; rows])
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

impl DifferentiableMap for Affine {
    fn input_dim(&self) -> usize {
        self.cols
    }

    fn output_dim(&self) -> usize {
        self.rows
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(self, x)?;
        let ax = linalg::matvec(&self.matrix, self.rows, self.cols, x);
        Ok(linalg::add(&ax, &self.bias))
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        check_cotangent(self, x, w)?;
        Ok(linalg::matvec_t(&self.matrix, self.rows, self.cols, w))
    }
}

/// Composition `x -> u(x) / ||u(x)||` projecting an inner map onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized<M> {
    inner: M,
}

impl<M: DifferentiableMap> Normalized<M> {
    pub fn new(inner: M) -> Self {
        Self { inner }
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: DifferentiableMap> DifferentiableMap for Normalized<M> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.inner.forward(x)?;
        Ok(linalg::normalize(&u))
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        check_cotangent(self, x, w)?;
        let u = self.inner.forward(x)?;
        let n = linalg::norm(&u);
        if n == 0.0 {
            return Ok(vec![0.0; self.input_dim()]);
        }
        // d(u/|u|) = (I - y y^T) du / |u|
        let y: Vec<f64> = u.iter().map(|v| v / n).collect();
        let yw = linalg::dot(&y, w);
        let wu: Vec<f64> = w
            .iter()
            .zip(&y)
            .map(|(wi, yi)| (wi - yi * yw) / n)
            .collect();
        self.inner.vjp(x, &wu)
    }
}

impl<M: DifferentiableMap + ?Sized> DifferentiableMap for &M {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }

    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).forward(x)
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        (**self).vjp(x, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn identity_forward_and_vjp() {
        let id = Identity::new(2);
        assert_eq!(id.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(id.vjp(&[1.0, 2.0], &[3.0, -4.0]).unwrap(), vec![3.0, -4.0]);
    }

    #[test]
    fn linear_forward_and_vjp() {
        let a = Affine::linear(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(a.forward(&[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
        // A^T w with a non-symmetric A
        let b = Affine::linear(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(b.vjp(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let id = Identity::new(2);
        assert!(matches!(
            id.forward(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            id.forward(&[f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            id.vjp(&[1.0, 2.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalized_output_is_unit() {
        let m = Normalized::new(Affine::linear(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.0]).unwrap());
        let y = m.forward(&[0.7, -1.3]).unwrap();
        assert!((linalg::norm(&y) - 1.0).abs() < 1e-12);
        let report = check_vjp(&m, 50, 1e-6);
        assert!(report.pass, "{report:?}");
    }
}
