//! Weight bundle: every learned map of the pipeline, seeded or loaded from a
//! directory holding `manifest.json` and one tensor file per role.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmr::{DecoderWeights, DEFAULT_MASK_DIM, NUM_QUERIES, NUM_SLOTS};
use crate::encoder::{
    AggregationLayer, EncoderWeights, StreamWeights, WeightSource, DEFAULT_HIDDEN,
};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json, Tensor};
use crate::linalg::{Linear, Matrix};
use crate::prg::{GatingParams, DEFAULT_GATE_HIDDEN, DEFAULT_TAU};
use crate::projection::DEFAULT_EMBED_CHANNELS;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub hidden: usize,
    pub embed_channels: usize,
    pub gate_hidden: usize,
    pub num_slots: usize,
    pub num_queries: usize,
    pub mask_dim: usize,
    pub tau: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            embed_channels: DEFAULT_EMBED_CHANNELS,
            gate_hidden: DEFAULT_GATE_HIDDEN,
            num_slots: NUM_SLOTS,
            num_queries: NUM_QUERIES,
            mask_dim: DEFAULT_MASK_DIM,
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub encoder: EncoderWeights,
    pub gating: GatingParams,
    pub decoder: DecoderWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dims: ModelDims,
    /// Role name to file name, relative to the bundle directory.
    pub tensors: BTreeMap<String, String>,
}

impl ModelWeights {
    /// Encoder, gating and decoder drawn from streams 0, 1 and 2 of one seed.
    pub fn seeded(seed: u64, dims: &ModelDims) -> Self {
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        Self {
            encoder: EncoderWeights::from_rng(&mut rng(0), dims.hidden, WeightSource::Seed(seed)),
            gating: GatingParams::seeded_from(
                &mut rng(1),
                dims.embed_channels,
                dims.gate_hidden,
                dims.tau,
            ),
            decoder: DecoderWeights::seeded_from(
                &mut rng(2),
                dims.num_slots,
                dims.num_queries,
                dims.mask_dim,
            ),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            hidden: self.encoder.hidden(),
            embed_channels: self.gating.embed_channels(),
            gate_hidden: self.gating.gate_layer1.out_dim(),
            num_slots: self.decoder.num_slots(),
            num_queries: self.decoder.num_queries(),
            mask_dim: self.decoder.mask_dim(),
            tau: self.gating.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gating.validate()?;
        self.decoder.validate()
    }

    fn tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        let linear = |out: &mut Vec<(String, Matrix)>, role: String, l: &Linear| {
            out.push((format!("{role}.weight"), l.weight.clone()));
            out.push((
                format!("{role}.bias"),
                Matrix::from_vec(l.bias.len(), 1, l.bias.clone()).expect("bias column"),
            ));
        };
        for (name, stream) in [
            ("coord", &self.encoder.coord),
            ("normal", &self.encoder.normal),
        ] {
            out.push((format!("encoder.{name}.ftm"), stream.ftm.clone()));
            for (s, layer) in stream.stages.iter().enumerate() {
                linear(&mut out, format!("encoder.{name}.stage{s}.phi"), &layer.phi);
                linear(&mut out, format!("encoder.{name}.stage{s}.psi"), &layer.psi);
            }
        }
        linear(&mut out, "encoder.fuse".into(), &self.encoder.fuse);
        linear(
            &mut out,
            "prg.transform_2d".into(),
            &self.gating.transform_2d,
        );
        linear(&mut out, "prg.gate_layer1".into(), &self.gating.gate_layer1);
        linear(&mut out, "prg.gate_layer2".into(), &self.gating.gate_layer2);
        let d = &self.decoder;
        for (role, l) in [
            ("decoder.attn_proj", &d.attn_proj),
            ("decoder.bottleneck", &d.bottleneck),
            ("decoder.kernel_head", &d.kernel_head),
            ("decoder.class_head", &d.class_head),
            ("decoder.obj_head", &d.obj_head),
            ("decoder.mask_proj", &d.mask_proj),
        ] {
            linear(&mut out, role.into(), l);
        }
        out
    }

    /// Writes the manifest and tensor files into `dir` (created if missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        for (role, m) in self.tensors() {
            let file = format!("{role}.tensor");
            Tensor::from_matrix(&m).write(&dir.join(&file))?;
            files.insert(role, file);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dims: self.dims(),
            tensors: files,
        };
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::schema(
                "weight manifest",
                format!("unsupported format_version {}", manifest.format_version),
            ));
        }
        let dims = manifest.dims;
        let matrix = |role: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let file = manifest.tensors.get(role).ok_or_else(|| {
                Error::schema("weight manifest", format!("missing tensor role {role}"))
            })?;
            let m = Tensor::read(&dir.join(file))?.to_matrix()?;
            if m.shape() != (rows, cols) {
                return Err(Error::Schema {
                    context: format!("tensor {role}"),
                    message: format!(
                        "expected shape {rows}x{cols}, found {}x{}",
                        m.rows(),
                        m.cols()
                    ),
                });
            }
            Ok(m)
        };
        let linear = |role: &str, out_dim: usize, in_dim: usize| -> Result<Linear> {
            let w = matrix(&format!("{role}.weight"), out_dim, in_dim)?;
            let b = matrix(&format!("{role}.bias"), out_dim, 1)?;
            Linear::new(w, b.into_vec())
        };
        let stream = |name: &str| -> Result<StreamWeights> {
            let ftm = matrix(&format!("encoder.{name}.ftm"), 12, 12)?;
            let mut stages = Vec::new();
            let mut width = 12;
            for s in 0..crate::encoder::STAGES {
                stages.push(AggregationLayer {
                    phi: linear(
                        &format!("encoder.{name}.stage{s}.phi"),
                        dims.hidden,
                        2 * width,
                    )?,
                    psi: linear(&format!("encoder.{name}.stage{s}.psi"), dims.hidden, width)?,
                });
                width = dims.hidden;
            }
            Ok(StreamWeights { ftm, stages })
        };
        let f = crate::encoder::FEATURE_CHANNELS;
        let e = dims.embed_channels;
        let weights = Self {
            encoder: EncoderWeights {
                coord: stream("coord")?,
                normal: stream("normal")?,
                fuse: linear("encoder.fuse", f, 2 * dims.hidden)?,
                source: WeightSource::File,
            },
            gating: GatingParams {
                transform_2d: linear("prg.transform_2d", f, e)?,
                gate_layer1: linear("prg.gate_layer1", dims.gate_hidden, f + e + 1)?,
                gate_layer2: linear("prg.gate_layer2", 1, dims.gate_hidden)?,
                tau: dims.tau,
            },
            decoder: DecoderWeights {
                attn_proj: linear("decoder.attn_proj", dims.num_slots, f)?,
                bottleneck: linear("decoder.bottleneck", dims.num_queries, dims.num_slots)?,
                kernel_head: linear("decoder.kernel_head", dims.mask_dim, f)?,
                class_head: linear("decoder.class_head", crate::mesh::NUM_CLASSES, f)?,
                obj_head: linear("decoder.obj_head", 1, f)?,
                mask_proj: linear("decoder.mask_proj", dims.mask_dim, f)?,
            },
        };
        weights.validate()?;
        Ok(weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelDims {
        ModelDims {
            hidden: 8,
            embed_channels: 4,
            gate_hidden: 5,
            num_slots: 6,
            num_queries: 3,
            mask_dim: 4,
            tau: 1.0,
        }
    }

    #[test]
    fn seeded_is_deterministic_and_valid() {
        let a = ModelWeights::seeded(9, &small());
        let b = ModelWeights::seeded(9, &small());
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_ne!(a, ModelWeights::seeded(10, &small()));
        assert_eq!(a.dims(), small());
    }

    #[test]
    fn bundle_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let w = ModelWeights::seeded(3, &small());
        w.save(dir.path()).unwrap();
        let back = ModelWeights::load(dir.path()).unwrap();
        let rounded = |m: &Matrix| m.map(|v| v as f32 as f64);
        assert_eq!(
            back.decoder.attn_proj.weight,
            rounded(&w.decoder.attn_proj.weight)
        );
        assert_eq!(back.encoder.coord.ftm, rounded(&w.encoder.coord.ftm));
        assert_eq!(back.dims(), small());
        assert_eq!(back.encoder.source, WeightSource::File);
    }

    #[test]
    fn missing_role_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        ModelWeights::seeded(3, &small()).save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("decoder.obj_head.bias.tensor")).unwrap();
        assert!(matches!(
            ModelWeights::load(dir.path()),
            Err(Error::Io { .. })
        ));
        let manifest = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&manifest)
            .unwrap()
            .replace("\"decoder.obj_head.bias\"", "\"unused\"");
        std::fs::write(&manifest, text).unwrap();
        assert!(matches!(
            ModelWeights::load(dir.path()),
            Err(Error::Schema { .. })
        ));
    }
}
