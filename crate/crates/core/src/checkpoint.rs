//! Versioned, bit-exact persistence of trained models.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{check_version, Vocabulary, WindowSpec, WindowStats};
use crate::error::{Error, Result};
use crate::model::{init_model, DetmParams, ModelConfig};
use crate::trainer::{TrainingConfig, TrainingHistory};
use crate::FORMAT_VERSION;

/// A dense matrix as little-endian `f64` bytes in base64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorData {
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl TensorData {
    pub fn encode(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorData {
            rows: t.nrows(),
            cols: t.ncols(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Parse(format!("tensor payload: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::Shape(format!(
                "tensor payload has {} bytes for a {}x{} matrix",
                bytes.len(),
                self.rows,
                self.cols
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Array2::from_shape_vec((self.rows, self.cols), values).map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Corpus-side artifacts needed to evaluate a checkpoint on new text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusContext {
    pub vocabulary: Vocabulary,
    pub window_spec: WindowSpec,
    /// Smoothed training-split statistics, frozen at training time.
    pub train_stats: WindowStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DetmParams,
    pub training: TrainingConfig,
    pub history: TrainingHistory,
    pub context: Option<CorpusContext>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    tensor: TensorData,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: String,
    model: ModelConfig,
    training: TrainingConfig,
    history: TrainingHistory,
    vocab_hash: Option<String>,
    rho: TensorData,
    weights: Vec<NamedTensor>,
    context: Option<CorpusContext>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: String,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            version: FORMAT_VERSION.to_string(),
            model: self.params.config.clone(),
            training: self.training.clone(),
            history: self.history.clone(),
            vocab_hash: self.context.as_ref().map(|c| c.vocabulary.checksum()),
            rho: TensorData::encode(&self.params.rho),
            weights: self
                .params
                .weights
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor { name, tensor: TensorData::encode(t) })
                .collect(),
            context: self.context.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // the version is checked before anything else so format changes
        // surface as version errors rather than field errors
        let probe: VersionProbe = serde_json::from_str(text)?;
        check_version(&probe.version)?;
        let file: CheckpointFile = serde_json::from_str(text)?;

        let rho = file.rho.decode()?;
        let template = init_model(&file.model, &Array2::zeros(rho.raw_dim()), 0)?;
        let expected: Vec<String> = template.weights.named().into_iter().map(|(n, _)| n).collect();
        let found: Vec<&str> = file.weights.iter().map(|w| w.name.as_str()).collect();
        if expected != found {
            return Err(Error::Shape(format!("checkpoint tensors {found:?} do not match the model layout")));
        }
        let tensors = file.weights.iter().map(|w| w.tensor.decode()).collect::<Result<Vec<_>>>()?;
        let weights = template.weights.zip_from(tensors)?;
        let params = DetmParams {
            config: file.model,
            rho,
            weights,
        };
        params.check_shapes()?;
        if let (Some(hash), Some(ctx)) = (&file.vocab_hash, &file.context) {
            let actual = ctx.vocabulary.checksum();
            if *hash != actual {
                return Err(Error::ChecksumMismatch { expected: hash.clone(), found: actual });
            }
        }
        Ok(Checkpoint {
            params,
            training: file.training,
            history: file.history,
            context: file.context,
        })
    }
}

/// Writes through a temporary sibling file and a rename, so a crash never
/// leaves a half-written checkpoint under `path`.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = checkpoint.to_json()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::EpochRecord;
    use crate::model::LossBreakdown;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            encoder_hidden: 5,
            rnn_hidden: 3,
            ..ModelConfig::new(2, 3, 7, 4)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = Array2::from_shape_simple_fn((7, 4), || rng.random::<f64>() - 0.5);
        let mut params = init_model(&cfg, &rho, 8).unwrap();
        // awkward values that a decimal round trip could disturb
        params.weights.alpha_mean[[0, 0]] = 0.1 + 0.2;
        params.weights.alpha_mean[[0, 1]] = f64::MIN_POSITIVE / 3.0;
        params.weights.alpha_mean[[1, 0]] = -0.0;
        let loss = LossBreakdown { nll: 1.5, kl_theta: 0.25, kl_eta: 0.1, kl_alpha: 0.3, total: 2.15, reweighted: false };
        let history = TrainingHistory {
            records: vec![EpochRecord { epoch: 1, train: loss, validation_nll: 1.0 / 3.0, wall_seconds: 0.5 }],
            selected_epoch: 1,
        };
        Checkpoint { params, training: TrainingConfig::default(), history, context: None }
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        for ((_, a), (_, b)) in ckpt.params.weights.named().iter().zip(back.params.weights.named()) {
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(bits(&ckpt.params.rho), bits(&back.params.rho));
    }

    #[test]
    fn truncation_is_an_error() {
        let text = sample().to_json().unwrap();
        for cut in [text.len() / 2, text.len() - 1, 10] {
            assert!(Checkpoint::from_json(&text[..cut]).is_err());
        }
    }

    #[test]
    fn wrong_version_is_named() {
        let text = sample().to_json().unwrap().replace(FORMAT_VERSION, "detm-lab/0");
        match Checkpoint::from_json(&text) {
            Err(Error::Version { expected, found }) => {
                assert_eq!(expected, FORMAT_VERSION);
                assert_eq!(found, "detm-lab/0");
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_payload_is_rejected() {
        let mut t = TensorData::encode(&Array2::zeros((2, 2)));
        t.rows = 3;
        assert!(t.decode().is_err());
    }
}
