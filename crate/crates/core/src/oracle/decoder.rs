use crate::autodiff::{Affine, DifferentiableMap};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng;

/// Minimum `|det A|` accepted for a decoder matrix.
const MIN_ABS_DET: f64 = 1e-6;

/// Fixed invertible affine decoder `z -> A z + b`. The encoder used for
/// dataset preparation is its exact inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    map: Affine,
    inverse: Vec<f64>,
    dim: usize,
}

impl Decoder {
    pub fn new(dim: usize, matrix: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let map = Affine::new(dim, dim, matrix, bias)?;
        let (inverse, det) = invert(map.matrix(), dim)?;
        if det.abs() <= MIN_ABS_DET {
            return Err(Error::InvalidConfig(format!(
                "decoder matrix is near-singular (det = {det:e})"
            )));
        }
        Ok(Self { map, inverse, dim })
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        Self::new(dim, m, vec![0.0; dim]).expect("identity is invertible")
    }

    /// Random rotation times a diagonal scaling, with `|det A|` in `[0.5, 2]`,
    /// plus a small random offset.
    pub fn random(dim: usize, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let q = random_orthogonal(dim, &mut r);
        let scales = loop {
            let s: Vec<f64> = (0..dim)
                .map(|_| rng::uniform_range(&mut r, 0.8, 1.25))
                .collect();
            let det: f64 = s.iter().product();
            if (0.5..=2.0).contains(&det) {
                break s;
            }
        };
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                m[i * dim + j] = q[i * dim + j] * scales[j];
            }
        }
        let bias: Vec<f64> = rng::normal_vec(&mut r, dim)
            .iter()
            .map(|b| 0.1 * b)
            .collect();
        Self::new(dim, m, bias)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        self.map.matrix()
    }

    pub fn bias(&self) -> &[f64] {
        self.map.bias()
    }

    pub fn inverse_matrix(&self) -> &[f64] {
        &self.inverse
    }

    pub fn determinant(&self) -> f64 {
        invert(self.map.matrix(), self.dim)
            .map(|(_, d)| d)
            .unwrap_or(0.0)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.map.forward(z)
    }

    /// `A^T w`
    pub fn decode_vjp(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_dim("decoder cotangent", self.dim, w.len())?;
        Ok(linalg::matvec_t(self.map.matrix(), self.dim, self.dim, w))
    }

    /// `A^{-1} (x - b)`
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("encoder input", self.dim, x.len())?;
        let centered = linalg::sub(x, self.map.bias());
        Ok(linalg::matvec(&self.inverse, self.dim, self.dim, &centered))
    }

    pub fn as_map(&self) -> &Affine {
        &self.map
    }
}

fn random_orthogonal(dim: usize, r: &mut rng::SeededRng) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
        let mut ok = true;
        for _ in 0..dim {
            let mut v = rng::normal_vec(r, dim);
            // two Gram-Schmidt passes for numerical orthogonality
            for _ in 0..2 {
                for c in &cols {
                    let p = linalg::dot(&v, c);
                    for (vi, ci) in v.iter_mut().zip(c) {
                        *vi -= p * ci;
                    }
                }
            }
            let n = linalg::norm(&v);
            if n < 1e-8 {
                ok = false;
                break;
            }
            cols.push(v.iter().map(|x| x / n).collect());
        }
        if ok {
            let mut m = vec![0.0; dim * dim];
            for (j, c) in cols.iter().enumerate() {
                for (i, v) in c.iter().enumerate() {
                    m[i * dim + j] = *v;
                }
            }
            return m;
        }
    }
}

/// Gauss-Jordan inverse with partial pivoting; returns `(inverse, det)`.
fn invert(m: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
            .expect("non-empty range");
        let p = a[pivot * n + col];
        if p == 0.0 {
            return Err(Error::InvalidConfig("decoder matrix is singular".into()));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
                inv.swap(pivot * n + k, col * n + k);
            }
            det = -det;
        }
        det *= p;
        for k in 0..n {
            a[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for row in 0..n {
            if row != col {
                let f = a[row * n + col];
                if f != 0.0 {
                    for k in 0..n {
                        a[row * n + k] -= f * a[col * n + k];
                        inv[row * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
    }
    Ok((inv, det))
}
