//! Synthetic labeled datasets and their CSV form.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub object: usize,
    pub attribute: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Every row is `point`.
    Point,
    /// Isotropic `N(0, sigma0^2 I)`.
    Gaussian,
    /// One cluster per object label on a circle in dims 0-1.
    Modes,
    /// Object cluster in dims 0-1, attribute cluster in dims 2-3.
    ObjectAttribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub dims: usize,
    pub num_object_labels: usize,
    pub num_attribute_labels: usize,
    /// Probability that a row takes its object's dominant attribute.
    pub bias_ratio: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub point: Vec<f64>,
    pub sigma0: f64,
    pub center_radius: f64,
    pub cluster_std: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::ObjectAttribute,
            dims: 4,
            num_object_labels: 2,
            num_attribute_labels: 2,
            bias_ratio: 0.95,
            sample_count: 4000,
            seed: 0,
            point: Vec::new(),
            sigma0: 1.0,
            center_radius: 1.5,
            cluster_std: 0.25,
        }
    }
}

/// Attribute most often paired with `object` in biased datasets.
pub fn dominant_attribute(object: usize, num_attributes: usize) -> usize {
    object % num_attributes
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.bias_ratio) {
            return bad(format!("bias_ratio {} outside [0, 1]", self.bias_ratio));
        }
        if self.dims == 0 || self.sample_count == 0 {
            return bad("dims and sample_count must be positive".into());
        }
        if self.num_object_labels == 0 || self.num_attribute_labels == 0 {
            return bad("label counts must be positive".into());
        }
        match self.kind {
            DatasetKind::Point if self.point.len() != self.dims => bad(format!(
                "point has {} coordinates, dims is {}",
                self.point.len(),
                self.dims
            )),
            DatasetKind::Gaussian if !(self.sigma0 > 0.0) => bad("sigma0 must be positive".into()),
            DatasetKind::Modes if self.dims < 2 => bad("modes needs dims >= 2".into()),
            DatasetKind::ObjectAttribute if self.dims < 4 => {
                bad("object_attribute needs dims >= 4".into())
            }
            _ => Ok(()),
        }
    }

    /// Same spec with pairs drawn uniformly over all (object, attribute).
    pub fn uniform_pairs(&self) -> Self {
        Self {
            bias_ratio: 1.0 / self.num_attribute_labels as f64,
            ..self.clone()
        }
    }

    pub fn object_center(&self, object: usize) -> [f64; 2] {
        ring_point(self.center_radius, object, self.num_object_labels, 0.0)
    }

    pub fn attribute_center(&self, attribute: usize) -> [f64; 2] {
        ring_point(
            self.center_radius,
            attribute,
            self.num_attribute_labels,
            PI / 4.0,
        )
    }

    /// Noise-free observation for a label pair.
    pub fn center(&self, object: usize, attribute: usize) -> Vec<f64> {
        match self.kind {
            DatasetKind::Point => self.point.clone(),
            DatasetKind::Gaussian => vec![0.0; self.dims],
            DatasetKind::Modes => {
                let mut x = vec![0.0; self.dims];
                x[..2].copy_from_slice(&self.object_center(object));
                x
            }
            DatasetKind::ObjectAttribute => {
                let mut x = vec![0.0; self.dims];
                x[..2].copy_from_slice(&self.object_center(object));
                x[2..4].copy_from_slice(&self.attribute_center(attribute));
                x
            }
        }
    }

    /// Draws a label pair: object uniform, attribute dominant with
    /// probability `bias_ratio`, otherwise uniform over the rest.
    fn draw_pair(&self, r: &mut rng::SeededRng) -> (usize, usize) {
        let object = rng::index(r, self.num_object_labels);
        let n_attr = self.num_attribute_labels;
        let dom = dominant_attribute(object, n_attr);
        if n_attr == 1 || rng::uniform(r) < self.bias_ratio {
            return (object, dom);
        }
        let k = rng::index(r, n_attr - 1);
        (object, if k >= dom { k + 1 } else { k })
    }
}

fn ring_point(radius: f64, i: usize, n: usize, phase: f64) -> [f64; 2] {
    let a = phase + 2.0 * PI * i as f64 / n as f64;
    [radius * a.cos(), radius * a.sin()]
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<Observation>> {
    spec.validate()?;
    let mut r = rng::seeded(spec.seed);
    let mut out = Vec::with_capacity(spec.sample_count);
    for _ in 0..spec.sample_count {
        let obs = match spec.kind {
            DatasetKind::Point => Observation {
                x: spec.point.clone(),
                object: 0,
                attribute: 0,
            },
            DatasetKind::Gaussian => Observation {
                x: rng::normal_vec(&mut r, spec.dims)
                    .iter()
                    .map(|v| spec.sigma0 * v)
                    .collect(),
                object: 0,
                attribute: 0,
            },
            DatasetKind::Modes => {
                let object = rng::index(&mut r, spec.num_object_labels);
                Observation {
                    x: jitter(spec.center(object, 0), spec.cluster_std, &mut r),
                    object,
                    attribute: 0,
                }
            }
            DatasetKind::ObjectAttribute => {
                let (object, attribute) = spec.draw_pair(&mut r);
                Observation {
                    x: jitter(spec.center(object, attribute), spec.cluster_std, &mut r),
                    object,
                    attribute,
                }
            }
        };
        out.push(obs);
    }
    Ok(out)
}

fn jitter(mut x: Vec<f64>, std: f64, r: &mut rng::SeededRng) -> Vec<f64> {
    for v in &mut x {
        *v += std * rng::standard_normal(r);
    }
    x
}

/// Columns `x_0..x_{d-1},label_object,label_attribute`.
pub fn write_csv(path: &Path, data: &[Observation]) -> Result<()> {
    let dims = data.first().map_or(0, |o| o.x.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = (0..dims).map(|i| format!("x_{i}")).collect();
    header.push("label_object".into());
    header.push("label_attribute".into());
    w.write_record(&header)?;
    for o in data {
        let mut rec: Vec<String> = o.x.iter().map(|v| v.to_string()).collect();
        rec.push(o.object.to_string());
        rec.push(o.attribute.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::MalformedCsv {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<Observation>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let malformed = |reason: String| Error::MalformedCsv {
        path: path.to_path_buf(),
        reason,
    };
    let header = rd.headers()?.clone();
    let n = header.len();
    if n < 3 || &header[n - 2] != "label_object" || &header[n - 1] != "label_attribute" {
        return Err(malformed(
            "expected x_* columns followed by label_object,label_attribute".into(),
        ));
    }
    let dims = n - 2;
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| malformed(format!("row {}: {e}", line + 1)))
        };
        let label = |i: usize| -> Result<usize> {
            rec[i]
                .parse::<usize>()
                .map_err(|e| malformed(format!("row {}: {e}", line + 1)))
        };
        let x = (0..dims).map(num).collect::<Result<Vec<_>>>()?;
        out.push(Observation {
            x,
            object: label(dims)?,
            attribute: label(dims + 1)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_rows_are_equal() {
        let spec = DatasetSpec {
            kind: DatasetKind::Point,
            dims: 2,
            point: vec![1.0, -1.0],
            sample_count: 50,
            ..DatasetSpec::default()
        };
        assert!(generate(&spec)
            .unwrap()
            .iter()
            .all(|o| o.x == vec![1.0, -1.0]));
    }

    #[test]
    fn rare_pair_frequency() {
        let spec = DatasetSpec {
            sample_count: 10_000,
            seed: 3,
            ..DatasetSpec::default()
        };
        let data = generate(&spec).unwrap();
        let rare = data
            .iter()
            .filter(|o| o.attribute != dominant_attribute(o.object, 2))
            .count() as f64
            / data.len() as f64;
        assert!((rare - 0.05).abs() <= 0.01, "{rare}");
        let uniform = generate(&spec.uniform_pairs()).unwrap();
        let rare_u = uniform
            .iter()
            .filter(|o| o.attribute != dominant_attribute(o.object, 2))
            .count() as f64
            / uniform.len() as f64;
        assert!((rare_u - 0.5).abs() < 0.02);
    }

    #[test]
    fn three_attributes_rare_split_evenly() {
        let spec = DatasetSpec {
            num_attribute_labels: 3,
            bias_ratio: 0.7,
            sample_count: 9000,
            ..DatasetSpec::default()
        };
        let data = generate(&spec).unwrap();
        let mut counts = [0usize; 3];
        for o in data.iter().filter(|o| o.object == 0) {
            counts[o.attribute] += 1;
        }
        let total: usize = counts.iter().sum();
        assert!((counts[0] as f64 / total as f64 - 0.7).abs() < 0.03);
        assert!((counts[1] as f64 - counts[2] as f64).abs() / (total as f64) < 0.04);
    }

    #[test]
    fn csv_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            sample_count: 200,
            ..DatasetSpec::default()
        };
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_csv(&a, &generate(&spec).unwrap()).unwrap();
        write_csv(&b, &generate(&spec).unwrap()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_csv(&a).unwrap(), generate(&spec).unwrap());
        let header = std::fs::read_to_string(&a).unwrap();
        assert!(header.starts_with("x_0,x_1,x_2,x_3,label_object,label_attribute\n"));
    }

    #[test]
    fn malformed_csv_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x_0,label_object,label_attribute\nabc,0,0\n").unwrap();
        assert!(matches!(read_csv(&p), Err(Error::MalformedCsv { .. })));
        std::fs::write(&p, "x_0,y\n1,2\n").unwrap();
        assert!(matches!(read_csv(&p), Err(Error::MalformedCsv { .. })));
    }

    #[test]
    fn invalid_specs() {
        let mut s = DatasetSpec::default();
        s.bias_ratio = 1.5;
        assert!(s.validate().is_err());
        s = DatasetSpec {
            dims: 3,
            ..DatasetSpec::default()
        };
        assert!(s.validate().is_err());
    }
}
