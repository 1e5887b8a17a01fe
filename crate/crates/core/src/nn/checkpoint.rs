//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "EMLNCKPT"
//! version  u32 LE
//! hlen     u64 LE
//! header   hlen bytes of JSON
//! params   f32 LE, every parameter tensor in layer order
//! velocity f32 LE, same layout, present when the header says so
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::solver::{SgdState, SolverConfig};
use super::tensor::Tensor;
use crate::dataset::LabelSet;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EMLNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    labels: LabelSet,
    epoch: usize,
    solver: SolverConfig,
    stft: StftConfig,
    input_mean: f64,
    iteration: usize,
    param_shapes: Vec<Vec<usize>>,
    has_velocity: bool,
}

/// Trained weights plus everything needed to preprocess new inputs and to
/// resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub labels: LabelSet,
    pub epoch: usize,
    pub solver: SolverConfig,
    pub stft: StftConfig,
    /// Mean training pixel in `[0, 1]`, subtracted from every input.
    pub input_mean: f64,
    pub solver_state: Option<SgdState<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model_config: self.model.config.clone(),
            labels: self.labels.clone(),
            epoch: self.epoch,
            solver: self.solver,
            stft: self.stft,
            input_mean: self.input_mean,
            iteration: self.solver_state.as_ref().map_or(0, |s| s.iteration),
            param_shapes: self.model.params.iter().map(|p| p.shape().to_vec()).collect(),
            has_velocity: self.solver_state.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |tensors: &[Tensor<f32>]| {
            for t in tensors {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        push(&self.model.params);
        if let Some(state) = &self.solver_state {
            push(&state.velocity);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body_start])?;
        if header.labels.len() != header.model_config.num_classes {
            return Err(bad("label count differs from the model's class count"));
        }
        if header.model_config.param_shapes()? != header.param_shapes {
            return Err(bad("parameter shapes do not match the model config"));
        }

        let mut body = bytes[body_start..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut read = |shapes: &[Vec<usize>]| -> Result<Vec<Tensor<f32>>> {
            shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let data: Vec<f32> = body.by_ref().take(n).collect();
                    if data.len() != n {
                        return Err(bad("truncated tensor data"));
                    }
                    Tensor::from_vec(s, data)
                })
                .collect()
        };
        let params = read(&header.param_shapes)?;
        let velocity = if header.has_velocity { Some(read(&header.param_shapes)?) } else { None };
        let expected_len = body_start + 4 * header.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() * if header.has_velocity { 2 } else { 1 };
        if bytes.len() != expected_len {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            model: Model::from_params(header.model_config, params)?,
            labels: header.labels,
            epoch: header.epoch,
            solver: header.solver,
            stft: header.stft,
            input_mean: header.input_mean,
            solver_state: velocity.map(|velocity| SgdState { velocity, iteration: header.iteration }),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // write-then-rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::build_alexnet_like;

    fn sample(with_state: bool) -> Checkpoint {
        let cfg = build_alexnet_like(3, 1.0 / 16.0, 1, 64).unwrap();
        let model = Model::<f32>::init(cfg, 5).unwrap();
        let solver_state = with_state.then(|| {
            let mut s = SgdState::new(&model.params);
            s.velocity[0].data_mut()[3] = -1.5e-7;
            s.iteration = 17;
            s
        });
        Checkpoint {
            model,
            labels: LabelSet::new(["anger", "neutral", "sadness"]).unwrap(),
            epoch: 4,
            solver: SolverConfig::default(),
            stft: StftConfig::default(),
            input_mean: 0.123_456_789_012_345_6,
            solver_state,
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        for with_state in [false, true] {
            let ck = sample(with_state);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let ck = sample(true);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(Checkpoint::load(dir.path().join("nope")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample(false).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&[bytes.as_slice(), &[0, 0, 0, 0]].concat()).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());
        let mut bad_version = bytes;
        bad_version[8] = 9;
        assert!(Checkpoint::from_bytes(&bad_version).is_err());
        assert!(Checkpoint::from_bytes(b"short").is_err());
    }
}
