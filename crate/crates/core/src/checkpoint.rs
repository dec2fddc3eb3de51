//! JSON checkpoints for velocity fields, oracles and decoders.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::autodiff::{Activation, Mlp};
use crate::error::{Error, Result};
use crate::oracle::{Decoder, Oracle, OracleMode};
use crate::velocity::{ConditioningSpec, MlpVelocity, VelocityField};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub layer_widths: Vec<usize>,
    pub activation: Option<Activation>,
    pub parameters: Vec<f64>,
    pub seed: u64,
    pub training_meta: Value,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Checkpoint {
    fn new(kind: &str, seed: u64, training_meta: Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            layer_widths: Vec::new(),
            activation: None,
            parameters: Vec::new(),
            seed,
            training_meta,
            extra: Map::new(),
        }
    }

    fn with_mlp(mut self, net: &Mlp) -> Self {
        self.layer_widths = net.layer_widths().to_vec();
        self.activation = Some(net.activation());
        self.parameters = net.parameters().to_vec();
        self
    }

    fn mlp(&self) -> Result<Mlp> {
        let act = self.activation.ok_or_else(|| {
            Error::Checkpoint(format!("{} checkpoint has no activation", self.kind))
        })?;
        Mlp::from_parameters(self.layer_widths.clone(), act, self.parameters.clone())
    }

    fn put(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.extra
            .insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.extra.get(key).ok_or_else(|| {
            Error::Checkpoint(format!("{} checkpoint missing field {key}", self.kind))
        })?;
        Ok(serde_json::from_value(v.clone())?)
    }

    fn expect_kind(&self, kinds: &[&str]) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if kinds.contains(&self.kind.as_str()) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected kind {}, found {}",
                kinds.join(" or "),
                self.kind
            )))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub fn velocity_checkpoint(
    field: &VelocityField,
    seed: u64,
    training_meta: Value,
) -> Result<Checkpoint> {
    Ok(match field {
        VelocityField::AnalyticDelta { target } => {
            let mut c = Checkpoint::new("analytic_delta", seed, training_meta);
            c.parameters = target.clone();
            c
        }
        VelocityField::AnalyticGaussian { sigma0, dim } => {
            let mut c = Checkpoint::new("analytic_gaussian", seed, training_meta);
            c.parameters = vec![*sigma0];
            c.put("dim", dim)?;
            c
        }
        VelocityField::Mlp(m) => {
            let mut c = Checkpoint::new("velocity_mlp", seed, training_meta).with_mlp(m.net());
            c.put("latent_dim", m.latent_dim())?;
            c.put("conditioning", m.conditioning())?;
            c.put("object_embeddings", m.object_embeddings())?;
            c.put("attribute_embeddings", m.attribute_embeddings())?;
            c
        }
    })
}

pub fn velocity_from_checkpoint(c: &Checkpoint) -> Result<VelocityField> {
    c.expect_kind(&["analytic_delta", "analytic_gaussian", "velocity_mlp"])?;
    match c.kind.as_str() {
        "analytic_delta" => Ok(VelocityField::analytic_delta(c.parameters.clone())),
        "analytic_gaussian" => {
            let sigma0 = *c
                .parameters
                .first()
                .ok_or_else(|| Error::Checkpoint("analytic_gaussian needs sigma0".into()))?;
            VelocityField::analytic_gaussian(sigma0, c.get("dim")?)
        }
        _ => {
            let conditioning: ConditioningSpec = c.get("conditioning")?;
            Ok(VelocityField::Mlp(MlpVelocity::new(
                c.mlp()?,
                c.get("latent_dim")?,
                conditioning,
                c.get("object_embeddings")?,
                c.get("attribute_embeddings")?,
            )?))
        }
    }
}

pub fn oracle_checkpoint(oracle: &Oracle, seed: u64, training_meta: Value) -> Result<Checkpoint> {
    let mut c =
        Checkpoint::new("oracle", seed, training_meta).with_mlp(oracle.image_embedder().inner());
    let cls = oracle.classifier();
    c.put(
        "classifier",
        json!({
            "layer_widths": cls.layer_widths(),
            "activation": cls.activation(),
            "parameters": cls.parameters(),
        }),
    )?;
    c.put("instruction_table", oracle.instruction_table())?;
    c.put("num_objects", oracle.num_objects())?;
    c.put("num_attributes", oracle.num_attributes())?;
    c.put("mode", oracle.mode)?;
    Ok(c)
}

#[derive(Deserialize)]
struct MlpRecord {
    layer_widths: Vec<usize>,
    activation: Activation,
    parameters: Vec<f64>,
}

pub fn oracle_from_checkpoint(c: &Checkpoint) -> Result<Oracle> {
    c.expect_kind(&["oracle"])?;
    let cls: MlpRecord = c.get("classifier")?;
    let classifier = Mlp::from_parameters(cls.layer_widths, cls.activation, cls.parameters)?;
    let mode: OracleMode = c.get("mode")?;
    Oracle::new(
        c.mlp()?,
        c.get("instruction_table")?,
        classifier,
        c.get("num_objects")?,
        c.get("num_attributes")?,
        mode,
    )
}

pub fn decoder_checkpoint(decoder: &Decoder, seed: u64) -> Checkpoint {
    let mut c = Checkpoint::new("decoder", seed, Value::Null);
    let d = decoder.dim();
    c.layer_widths = vec![d, d];
    c.parameters = decoder
        .matrix()
        .iter()
        .chain(decoder.bias())
        .copied()
        .collect();
    c
}

pub fn decoder_from_checkpoint(c: &Checkpoint) -> Result<Decoder> {
    c.expect_kind(&["decoder"])?;
    let d = *c
        .layer_widths
        .first()
        .ok_or_else(|| Error::Checkpoint("decoder needs layer_widths".into()))?;
    if c.parameters.len() != d * d + d {
        return Err(Error::Checkpoint(format!(
            "decoder of dim {d} needs {} parameters, found {}",
            d * d + d,
            c.parameters.len()
        )));
    }
    let (m, b) = c.parameters.split_at(d * d);
    Decoder::new(d, m.to_vec(), b.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::MlpSpec;
    use crate::flow::VectorField;
    use crate::oracle::Instruction;
    use crate::rectify::tests::mlp_field;

    #[test]
    fn velocity_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        for field in [
            mlp_field(3, 4),
            VelocityField::analytic_delta(vec![0.1, 1.0 / 3.0]),
            VelocityField::analytic_gaussian(0.7, 5).unwrap(),
        ] {
            velocity_checkpoint(&field, 9, json!({"epochs": 2}))
                .unwrap()
                .save(&p)
                .unwrap();
            let back = velocity_from_checkpoint(&Checkpoint::load(&p).unwrap()).unwrap();
            assert_eq!(back, field);
        }
        let field = mlp_field(3, 4);
        let back = {
            velocity_checkpoint(&field, 1, Value::Null)
                .unwrap()
                .save(&p)
                .unwrap();
            velocity_from_checkpoint(&Checkpoint::load(&p).unwrap()).unwrap()
        };
        let c = Instruction::new(1, 0);
        assert_eq!(
            field.velocity(&[0.2, 0.3, 0.4], 0.5, &c).unwrap(),
            back.velocity(&[0.2, 0.3, 0.4], 0.5, &c).unwrap()
        );
    }

    #[test]
    fn oracle_and_decoder_round_trip() {
        let emb = Mlp::new(&MlpSpec::new(vec![4, 6, 3], Activation::Silu, 1)).unwrap();
        let cls = Mlp::new(&MlpSpec::new(vec![4, 6, 4], Activation::Relu, 2)).unwrap();
        let table = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ];
        let o = Oracle::new(emb, table, cls, 2, 2, OracleMode::Echo).unwrap();
        let back = oracle_from_checkpoint(&oracle_checkpoint(&o, 0, Value::Null).unwrap()).unwrap();
        assert_eq!(back, o);
        let d = Decoder::random(4, 8).unwrap();
        assert_eq!(
            decoder_from_checkpoint(&decoder_checkpoint(&d, 8)).unwrap(),
            d
        );
    }

    #[test]
    fn shape_and_kind_checked() {
        let d = Decoder::random(2, 1).unwrap();
        let c = decoder_checkpoint(&d, 1);
        assert!(velocity_from_checkpoint(&c).is_err());
        let mut v: Value = serde_json::to_value(&c).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["kind"], "decoder");
        v["format_version"] = json!(2);
        let c2: Checkpoint = serde_json::from_value(v).unwrap();
        assert!(decoder_from_checkpoint(&c2).is_err());
        let mut c3 = decoder_checkpoint(&d, 1);
        c3.parameters.pop();
        assert!(decoder_from_checkpoint(&c3).is_err());
    }
}
