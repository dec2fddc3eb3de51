//! Toy understanding branch: a fixed affine decoder, a joint embedding of
//! observations and instructions, a classifier, and target-instruction
//! synthesis.

mod decoder;
mod train;

pub use decoder::Decoder;
pub use train::{train_oracle, OracleArch, OracleReport, OracleTrainConfig};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DifferentiableMap, Mlp, Normalized};
use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Confidence below which introspection falls back to the user instruction.
pub const INTROSPECTION_MIN_CONFIDENCE: f64 = 0.5;

/// An (object, attribute) request. `None` leaves a slot unspecified.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct Instruction {
    pub object_id: Option<usize>,
    pub attribute_id: Option<usize>,
}

impl Instruction {
    pub fn new(object_id: usize, attribute_id: usize) -> Self {
        Self {
            object_id: Some(object_id),
            attribute_id: Some(attribute_id),
        }
    }

    /// Both slots unspecified; selects the null condition.
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn object_only(object_id: usize) -> Self {
        Self {
            object_id: Some(object_id),
            attribute_id: None,
        }
    }

    pub fn attribute_only(attribute_id: usize) -> Self {
        Self {
            object_id: None,
            attribute_id: Some(attribute_id),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.object_id.is_some() && self.attribute_id.is_some()
    }

    /// Display string, used only for logs and result records.
    pub fn text(&self) -> String {
        match (self.object_id, self.attribute_id) {
            (Some(k), Some(j)) => format!("a sample of object {k} with attribute {j}"),
            (Some(k), None) => format!("a sample of object {k}"),
            (None, Some(j)) => format!("a sample with attribute {j}"),
            (None, None) => "a sample".to_string(),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let slot = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "*".into());
        write!(f, "({},{})", slot(self.object_id), slot(self.attribute_id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    /// `c_ideal = c_user`.
    Echo,
    /// `c_ideal` fills the user's unspecified slots from the classifier verdict.
    Introspective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub object_id: usize,
    pub attribute_id: usize,
    pub confidence: f64,
}

impl Classification {
    pub fn instruction(&self) -> Instruction {
        Instruction::new(self.object_id, self.attribute_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub(crate) image_embedder: Normalized<Mlp>,
    /// Unit vectors indexed by `object * num_attributes + attribute`.
    pub(crate) instruction_table: Vec<Vec<f64>>,
    pub(crate) classifier: Mlp,
    pub(crate) num_objects: usize,
    pub(crate) num_attributes: usize,
    pub mode: OracleMode,
}

impl Oracle {
    /// Assembles an oracle, normalizing the table rows.
    pub fn new(
        image_embedder: Mlp,
        instruction_table: Vec<Vec<f64>>,
        classifier: Mlp,
        num_objects: usize,
        num_attributes: usize,
        mode: OracleMode,
    ) -> Result<Self> {
        let n_pairs = num_objects * num_attributes;
        check_dim("instruction table rows", n_pairs, instruction_table.len())?;
        check_dim("classifier logits", n_pairs, classifier.output_dim())?;
        check_dim(
            "classifier input",
            image_embedder.input_dim(),
            classifier.input_dim(),
        )?;
        let m = image_embedder.output_dim();
        let mut table = Vec::with_capacity(n_pairs);
        for row in instruction_table {
            check_dim("instruction embedding", m, row.len())?;
            if linalg::norm(&row) == 0.0 {
                return Err(Error::InvalidConfig("zero instruction embedding".into()));
            }
            table.push(linalg::normalize(&row));
        }
        Ok(Self {
            image_embedder: Normalized::new(image_embedder),
            instruction_table: table,
            classifier,
            num_objects,
            num_attributes,
            mode,
        })
    }

    pub fn observation_dim(&self) -> usize {
        self.image_embedder.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.image_embedder.output_dim()
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    pub fn image_embedder(&self) -> &Normalized<Mlp> {
        &self.image_embedder
    }

    pub fn classifier(&self) -> &Mlp {
        &self.classifier
    }

    pub fn instruction_table(&self) -> &[Vec<f64>] {
        &self.instruction_table
    }

    pub fn with_mode(mut self, mode: OracleMode) -> Self {
        self.mode = mode;
        self
    }

    /// Every complete instruction the oracle knows, in index order.
    pub fn instructions(&self) -> impl Iterator<Item = Instruction> + '_ {
        (0..self.num_objects)
            .flat_map(move |k| (0..self.num_attributes).map(move |j| Instruction::new(k, j)))
    }

    /// Unit-norm observation embedding.
    pub fn embed_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.image_embedder.forward(x)
    }

    /// `(d embed_image / dx)^T w`, including the normalization Jacobian.
    pub fn embed_image_vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.image_embedder.vjp(x, w)
    }

    pub fn embed_instruction(&self, instr: &Instruction) -> Result<&[f64]> {
        let idx = self.pair_index(instr)?;
        Ok(&self.instruction_table[idx])
    }

    fn pair_index(&self, instr: &Instruction) -> Result<usize> {
        match (instr.object_id, instr.attribute_id) {
            (Some(k), Some(j)) if k < self.num_objects && j < self.num_attributes => {
                Ok(k * self.num_attributes + j)
            }
            _ => Err(Error::UnknownLabel(format!(
                "no embedding for instruction {instr}"
            ))),
        }
    }

    /// Argmax over the joint logits (lowest index wins ties) with its softmax
    /// probability.
    pub fn classify(&self, x: &[f64]) -> Result<Classification> {
        let logits = self.classifier.forward(x)?;
        let (best, &max) =
            logits
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| {
                    if *v > *acc.1 {
                        (i, v)
                    } else {
                        acc
                    }
                });
        let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        Ok(Classification {
            object_id: best / self.num_attributes,
            attribute_id: best % self.num_attributes,
            confidence: 1.0 / denom,
        })
    }

    /// Target instruction for an observation under the user's request.
    pub fn extract_ideal(&self, x: &[f64], c_user: &Instruction) -> Result<Instruction> {
        match self.mode {
            OracleMode::Echo => Ok(*c_user),
            OracleMode::Introspective => {
                let verdict = self.classify(x)?;
                Ok(merge_ideal(c_user, &verdict))
            }
        }
    }
}

/// User-specified slots override detected ones; low-confidence verdicts are
/// ignored entirely.
pub fn merge_ideal(c_user: &Instruction, verdict: &Classification) -> Instruction {
    if verdict.confidence < INTROSPECTION_MIN_CONFIDENCE {
        return *c_user;
    }
    Instruction {
        object_id: c_user.object_id.or(Some(verdict.object_id)),
        attribute_id: c_user.attribute_id.or(Some(verdict.attribute_id)),
    }
}

/// Cosine similarity of two unit vectors.
pub fn similarity(e1: &[f64], e2: &[f64]) -> f64 {
    linalg::dot(e1, e2)
}
