//! Point-wise residual gating: injects sampled 2D embeddings into the 3D
//! feature map through a per-face scalar gate.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{FaceFeatureSet, FeatureStage, FEATURE_CHANNELS, INIT_BOUND};
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, Linear, Matrix};
use crate::par;
use crate::projection::GuidanceMap;

pub const DEFAULT_GATE_HIDDEN: usize = 64;
pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    /// `C_e -> 128`, produces `e_3d` from the sampled embedding.
    pub transform_2d: Linear,
    /// `(128 + C_e + 1) -> hidden`, followed by a rectifier.
    pub gate_layer1: Linear,
    /// `hidden -> 1`, followed by the logistic function.
    pub gate_layer2: Linear,
    pub tau: f64,
}

impl GatingParams {
    pub fn seeded_from(
        rng: &mut ChaCha8Rng,
        embed_channels: usize,
        hidden: usize,
        tau: f64,
    ) -> Self {
        Self {
            transform_2d: Linear::random_uniform(FEATURE_CHANNELS, embed_channels, INIT_BOUND, rng),
            gate_layer1: Linear::random_uniform(
                hidden,
                FEATURE_CHANNELS + embed_channels + 1,
                INIT_BOUND,
                rng,
            ),
            gate_layer2: Linear::random_uniform(1, hidden, INIT_BOUND, rng),
            tau,
        }
    }

    pub fn embed_channels(&self) -> usize {
        self.transform_2d.in_dim()
    }

    pub fn feature_channels(&self) -> usize {
        self.transform_2d.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.feature_channels();
        let e = self.embed_channels();
        if self.gate_layer1.in_dim() != f + e + 1 {
            return Err(Error::shape(
                "gate layer 1 input",
                f + e + 1,
                self.gate_layer1.in_dim(),
            ));
        }
        if self.gate_layer2.in_dim() != self.gate_layer1.out_dim()
            || self.gate_layer2.out_dim() != 1
        {
            return Err(Error::shape(
                "gate layer 2",
                format!("1x{}", self.gate_layer1.out_dim()),
                format!(
                    "{}x{}",
                    self.gate_layer2.out_dim(),
                    self.gate_layer2.in_dim()
                ),
            ));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau {} must be finite and >= 0",
                self.tau
            )));
        }
        if !(self.transform_2d.is_finite()
            && self.gate_layer1.is_finite()
            && self.gate_layer2.is_finite())
        {
            return Err(Error::NonFinite("gating weights"));
        }
        Ok(())
    }
}

/// Per-face gate `g([f3d || ep || M_p])` in `(0, 1)`.
pub fn gate_values(
    f3d: &Matrix,
    ep: &Matrix,
    mp: &GuidanceMap,
    params: &GatingParams,
) -> Result<Vec<f64>> {
    let m = f3d.cols();
    let ft = f3d.transpose();
    let et = ep.transpose();
    Ok(par::map_range(m, |p| {
        let mut x = Vec::with_capacity(ft.cols() + et.cols() + 1);
        x.extend_from_slice(ft.row(p));
        x.extend_from_slice(et.row(p));
        x.push(mp.weights[p]);
        let hidden: Vec<f64> = params
            .gate_layer1
            .apply_vec(&x)
            .into_iter()
            .map(|h| h.max(0.0))
            .collect();
        sigmoid(params.gate_layer2.apply_vec(&hidden)[0])
    }))
}

/// `F_fused = F_3d + tau * gate * transform_2d(e_p)`, one gate per face.
pub fn fuse(
    f3d: &FaceFeatureSet,
    ep: &Matrix,
    mp: &GuidanceMap,
    params: &GatingParams,
) -> Result<FaceFeatureSet> {
    params.validate()?;
    let m = f3d.num_faces();
    if f3d.channels() != params.feature_channels() {
        return Err(Error::shape(
            "fuse features",
            params.feature_channels(),
            f3d.channels(),
        ));
    }
    if ep.rows() != params.embed_channels() || ep.cols() != m {
        return Err(Error::shape(
            "fuse embeddings",
            format!("{}x{m}", params.embed_channels()),
            format!("{}x{}", ep.rows(), ep.cols()),
        ));
    }
    if mp.weights.len() != m {
        return Err(Error::shape("fuse guidance", m, mp.weights.len()));
    }
    let e3d = params.transform_2d.apply(ep)?;
    let gates = gate_values(&f3d.values, ep, mp, params)?;
    let mut out = f3d.values.clone();
    for c in 0..out.rows() {
        let e_row = e3d.row(c);
        for (p, v) in out.row_mut(c).iter_mut().enumerate() {
            *v += params.tau * gates[p] * e_row[p];
        }
    }
    FaceFeatureSet::new(FeatureStage::Fused128, out)
}
