//! Checkpoints: one safetensors archive of named little-endian arrays whose
//! header metadata carries a JSON blob (`"tarvis"` key) with the model
//! config, a run-config snapshot, the step counter and the RNG state.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "tarvis";

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::Checkpoint(format!("corrupt rng state: {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    /// Snapshot of the run configuration that produced the checkpoint.
    #[serde(default)]
    pub run: serde_json::Value,
    pub step: usize,
    #[serde(default)]
    pub rng: Option<RngState>,
}

impl CheckpointMeta {
    pub fn new(model: &Model) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dtype: dtype_name(model.dtype()).to_string(),
            model: model.config().clone(),
            run: serde_json::Value::Null,
            step: 0,
            rng: None,
        }
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl safetensors::View for &Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(t: &Tensor) -> Result<Raw> {
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F32 => (Dtype::F32, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(Error::Checkpoint(format!("cannot store {other:?} tensors"))),
    };
    Ok(Raw {
        dtype,
        shape: t.dims().to_vec(),
        bytes,
    })
}

fn from_view(name: &str, v: &TensorView<'_>) -> Result<Tensor> {
    let shape = v.shape().to_vec();
    let data = v.data();
    let t = match v.dtype() {
        Dtype::F64 => {
            let vals: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(vals, shape, &Device::Cpu)?
        }
        Dtype::F32 => {
            let vals: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(vals, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("tensor {name} has unsupported dtype {other:?}"))),
    };
    Ok(t)
}

/// Writes tensors and metadata atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let raws: Vec<(String, Raw)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), to_raw(t)?)))
        .collect::<Result<_>>()?;
    let meta_json = serde_json::to_string(meta).map_err(|e| Error::json(path, e))?;
    let info = HashMap::from([(META_KEY.to_string(), meta_json)]);
    let bytes = safetensors::serialize(raws.iter().map(|(k, r)| (k.as_str(), r)), Some(info))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |e: String| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| corrupt("missing metadata blob".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| corrupt(e.to_string()))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", meta.format_version)));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = from_view(&name, &view)?;
        tensors.insert(name, t);
    }
    Ok((meta, tensors))
}

impl Model {
    /// All parameters by hierarchical name.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    /// Overwrites every parameter; names and shapes must match exactly.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, _) in self.params.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
            self.params.assign(name, t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        save_checkpoint(path, meta, &self.named_tensors())
    }

    /// Rebuilds the model from a checkpoint. Tensors outside the parameter
    /// set (optimizer state) are returned alongside.
    pub fn load(path: &Path) -> Result<(Model, CheckpointMeta, BTreeMap<String, Tensor>)> {
        let (meta, mut tensors) = load_checkpoint(path)?;
        let model = Model::new(&meta.model, parse_dtype(&meta.dtype)?, 0)?;
        model.load_tensors(&tensors)?;
        tensors.retain(|k, _| model.params.get(k).is_none());
        Ok((model, meta, tensors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use crate::synthgen::{generate_scene, SceneConfig};
    use crate::types::Task;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..37 {
            rng.next_u32();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        for _ in 0..10 {
            assert_eq!(rng.next_u64(), back.next_u64());
        }
    }

    #[test]
    fn round_trip_reproduces_forward_outputs_exactly() {
        let cfg = crate::model::ModelConfig::small();
        let model = Model::new(&cfg, DType::F64, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let mut meta = CheckpointMeta::new(&model);
        meta.step = 12;
        model.save(&path, &meta).unwrap();
        let (loaded, m2, extra) = Model::load(&path).unwrap();
        assert_eq!(m2, meta);
        assert!(extra.is_empty());

        let (clip, _) = generate_scene(&SceneConfig {
            image_size: (64, 64),
            num_frames: 2,
            ..SceneConfig::default()
        })
        .unwrap();
        let run = |m: &Model| {
            let pyr = m.features(&clip).unwrap();
            let q = m.class_queries(Task::Vps, "synth").unwrap();
            let out = m.decode(&q, &pyr).unwrap();
            let o = out.last();
            (to_vec_f64(&o.query_masks).unwrap(), to_vec_f64(o.semantic_logits.as_ref().unwrap()).unwrap())
        };
        assert_eq!(run(&model), run(&loaded));
    }

    #[test]
    fn missing_parameters_are_reported() {
        let cfg = crate::model::ModelConfig::small();
        let model = Model::new(&cfg, DType::F32, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let mut t = model.named_tensors();
        let first = t.keys().next().unwrap().clone();
        t.remove(&first);
        save_checkpoint(&path, &CheckpointMeta::new(&model), &t).unwrap();
        let err = Model::load(&path).unwrap_err().to_string();
        assert!(err.contains(&first), "{err}");
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
