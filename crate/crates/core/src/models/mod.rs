//! Life-prediction networks and the constant baseline.

pub mod cyclepatch;
pub mod dummy;
pub mod layers;
pub mod mlp;
pub mod scaler;

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cyclepatch::{segment, CyclePatch, CyclePatchCache, CyclePatchConfig, InterEncoder};
pub use dummy::DummyModel;
pub use mlp::{MlpBaseline, MlpCache, MlpConfig};
pub use scaler::InputScaler;

use crate::diffkernel::{decode_checkpoint, encode_checkpoint, ParameterSet, Tensor2D};
use crate::error::{Error, Result};
use crate::preprocess::SampleTensor;
use crate::scalar::Scalar;

/// Predictions for a batch plus the pre-projection embedding `v` (one row per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub predictions: Vec<T>,
    pub embedding: Tensor2D<T>,
}

/// Model family and its architecture; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    Cpmlp(CyclePatchConfig),
    Mlp(MlpConfig),
    Dummy,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Cpmlp(c) => c.validate(),
            ModelSpec::Mlp(c) => c.validate(),
            ModelSpec::Dummy => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::Cpmlp(c) => c.param_count(),
            ModelSpec::Mlp(c) => c.param_count(),
            ModelSpec::Dummy => 1,
        }
    }
}

/// A trainable network of either family.
#[derive(Debug, Clone)]
pub enum Network {
    CyclePatch(CyclePatch),
    Mlp(MlpBaseline),
}

pub enum NetworkCache<T> {
    CyclePatch(CyclePatchCache<T>),
    Mlp(MlpCache<T>),
}

impl Network {
    /// `None` for the dummy family, which has nothing to train by gradient.
    pub fn from_spec(spec: &ModelSpec) -> Result<Option<Network>> {
        Ok(match spec {
            ModelSpec::Cpmlp(c) => Some(Network::CyclePatch(CyclePatch::new(c.clone())?)),
            ModelSpec::Mlp(c) => Some(Network::Mlp(MlpBaseline::new(c.clone())?)),
            ModelSpec::Dummy => None,
        })
    }

    pub fn with_scaler(self, scaler: Option<InputScaler>) -> Self {
        match self {
            Network::CyclePatch(m) => Network::CyclePatch(m.with_scaler(scaler)),
            Network::Mlp(m) => Network::Mlp(m.with_scaler(scaler)),
        }
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ParameterSet<T> {
        match self {
            Network::CyclePatch(m) => m.init(seed),
            Network::Mlp(m) => m.init(seed),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            Network::CyclePatch(m) => m.embedding_dim(),
            Network::Mlp(m) => m.embedding_dim(),
        }
    }

    /// Training-mode forward when `rng` is given (dropout active), inference otherwise.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        batch: &[&SampleTensor],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ModelOutput<T>, NetworkCache<T>)> {
        match self {
            Network::CyclePatch(m) => m.forward(params, batch, rng).map(|(o, c)| (o, NetworkCache::CyclePatch(c))),
            Network::Mlp(m) => m.forward(params, batch, rng).map(|(o, c)| (o, NetworkCache::Mlp(c))),
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &mut ParameterSet<T>,
        cache: &NetworkCache<T>,
        d_pred: &[T],
        d_embedding: Option<&Tensor2D<T>>,
    ) -> Result<()> {
        match (self, cache) {
            (Network::CyclePatch(m), NetworkCache::CyclePatch(c)) => m.backward(params, c, d_pred, d_embedding),
            (Network::Mlp(m), NetworkCache::Mlp(c)) => m.backward(params, c, d_pred, d_embedding),
            _ => Err(Error::Config("forward cache belongs to a different model family".into())),
        }
    }

    /// Inference over any number of samples, in chunks of `chunk`.
    pub fn predict<T: Scalar>(&self, params: &ParameterSet<T>, samples: &[&SampleTensor], chunk: usize) -> Result<ModelOutput<T>> {
        let mut predictions = Vec::with_capacity(samples.len());
        let mut rows = Vec::new();
        for part in samples.chunks(chunk.max(1)) {
            let (out, _) = self.forward(params, part, None)?;
            predictions.extend(out.predictions);
            rows.extend(out.embedding.into_vec());
        }
        let embedding = Tensor2D::new(samples.len(), self.embedding_dim(), rows)?;
        Ok(ModelOutput { predictions, embedding })
    }

    /// Check that `params` carries exactly the tensors this network expects.
    pub fn check_params<T: Scalar>(&self, params: &ParameterSet<T>) -> Result<()> {
        let expected: ParameterSet<T> = self.init(0);
        for (name, p) in expected.iter() {
            let got = params.get(name)?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "checkpoint parameter",
                    left: got.value.shape(),
                    right: p.value.shape(),
                });
            }
        }
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                expected.len()
            )));
        }
        Ok(())
    }
}

const DUMMY_PARAM: &str = "dummy.mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ModelSpec,
    label_scale: f64,
    best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_scaler: Option<InputScaler>,
}

/// Self-describing trained model: architecture, label scale and weights.
///
/// Networks are trained on `label / label_scale`; predictions are mapped back to cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub spec: ModelSpec,
    pub label_scale: f64,
    pub best_epoch: Option<usize>,
    /// Token standardization fitted on the training split; `None` feeds raw values.
    pub input_scaler: Option<InputScaler>,
    pub params: ParameterSet<f64>,
}

impl ModelCheckpoint {
    pub fn dummy(model: DummyModel) -> Self {
        let mut params = ParameterSet::new();
        params.insert(DUMMY_PARAM, Tensor2D::row_vector(vec![model.mean]));
        ModelCheckpoint {
            spec: ModelSpec::Dummy,
            label_scale: 1.0,
            best_epoch: None,
            input_scaler: None,
            params,
        }
    }

    pub fn network(&self) -> Result<Option<Network>> {
        if let Some(sc) = &self.input_scaler {
            sc.validate()?;
        }
        Ok(Network::from_spec(&self.spec)?.map(|n| n.with_scaler(self.input_scaler.clone())))
    }

    /// Predicted lives in cycles, with the pre-projection embeddings (empty for the dummy).
    pub fn predict(&self, samples: &[&SampleTensor]) -> Result<ModelOutput<f64>> {
        match self.network()? {
            Some(net) => {
                let mut out = net.predict(&self.params, samples, 64)?;
                for p in &mut out.predictions {
                    *p *= self.label_scale;
                }
                Ok(out)
            }
            None => {
                let mean = self.params.get(DUMMY_PARAM)?.value.get(0, 0);
                Ok(ModelOutput {
                    predictions: vec![mean; samples.len()],
                    embedding: Tensor2D::zeros(samples.len(), 0),
                })
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            model: self.spec.clone(),
            label_scale: self.label_scale,
            best_epoch: self.best_epoch,
            input_scaler: self.input_scaler.clone(),
        };
        encode_checkpoint(&self.params, &serde_json::to_string(&meta).expect("metadata serializes"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = decode_checkpoint::<f64>(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| Error::parse("checkpoint metadata", e.to_string()))?;
        let ckpt = ModelCheckpoint {
            spec: meta.model,
            label_scale: meta.label_scale,
            best_epoch: meta.best_epoch,
            input_scaler: meta.input_scaler,
            params,
        };
        match ckpt.network()? {
            Some(net) => net.check_params(&ckpt.params)?,
            None => {
                ckpt.params.get(DUMMY_PARAM)?;
            }
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
