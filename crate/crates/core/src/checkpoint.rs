//! Model checkpoints as safetensors archives.
//!
//! Every parameter and batch-norm buffer is stored under its hierarchical
//! name (`encoder.layer1.0.conv1.weight`, `affordance.fusion.filters_h.bias`,
//! ...). The model configuration travels as JSON in the archive metadata
//! under [`CONFIG_KEY`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Entry, EntryMut, Module};
use crate::tensor::{DType, Scalar, Tensor};

pub const CONFIG_KEY: &str = "model_config";
pub const FORMAT_KEY: &str = "format";
pub const FORMAT: &str = "acanet-checkpoint-v1";
/// Metadata key holding the JSON input normalization used in training.
pub const NORMALIZATION_KEY: &str = "normalization";

/// A decoded tensor, stored in double precision regardless of file dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Parsed checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Absent for bare weight files such as converted encoder weights.
    pub config: Option<ModelConfig>,
    pub tensors: BTreeMap<String, StoredTensor>,
    pub metadata: HashMap<String, String>,
}

impl Checkpoint {
    /// Parses an in-memory archive.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| parse_err(e.to_string()))?;
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| parse_err(e.to_string()))?;
        let metadata = meta.metadata().clone().unwrap_or_default();
        let config = match metadata.get(CONFIG_KEY) {
            Some(json) => Some(
                serde_json::from_str::<ModelConfig>(json)
                    .map_err(|e| parse_err(format!("bad model config: {e}")))?,
            ),
            None => None,
        };
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let values = match view.dtype() {
                Dtype::F32 => f32::from_le_slice(view.data())
                    .into_iter()
                    .map(f64::from)
                    .collect(),
                Dtype::F64 => f64::from_le_slice(view.data()),
                other => return Err(parse_err(format!("tensor {name} has unsupported dtype {other:?}"))),
            };
            tensors.insert(
                name,
                StoredTensor {
                    shape: view.shape().to_vec(),
                    values,
                },
            );
        }
        Ok(Checkpoint {
            config,
            tensors,
            metadata,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Load { reason, .. } => Error::load(path, reason),
            other => other,
        })
    }
}

fn parse_err(reason: String) -> Error {
    Error::Load {
        path: "<memory>".into(),
        reason,
    }
}

/// Serializes all parameters and buffers with the model configuration.
pub fn to_bytes<T: Scalar>(model: &Model<T>, extra: &[(&str, String)]) -> Result<Vec<u8>> {
    let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.visit("", &mut |name, entry| {
        let t = match entry {
            Entry::Param(p) => &p.value,
            Entry::Buffer(b) => b,
        };
        named.push((
            name.to_string(),
            t.shape().to_vec(),
            T::to_le_bytes_vec(t.data()),
        ));
    });
    let dtype = match T::DTYPE {
        DType::F32 => Dtype::F32,
        DType::F64 => Dtype::F64,
    };
    let views = named
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Config(format!("cannot serialize {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert(
        CONFIG_KEY.to_string(),
        serde_json::to_string(model.config()).expect("config serializes"),
    );
    meta.insert(FORMAT_KEY.to_string(), FORMAT.to_string());
    for (k, v) in extra {
        meta.insert(k.to_string(), v.clone());
    }
    safetensors::serialize(views, &Some(meta))
        .map_err(|e| Error::Config(format!("cannot serialize checkpoint: {e}")))
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    save_with_metadata(model, path, &[])
}

pub fn save_with_metadata<T: Scalar>(model: &Model<T>, path: &Path, extra: &[(&str, String)]) -> Result<()> {
    let bytes = to_bytes(model, extra)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Fields that determine tensor layout; the seed and pretrained path do not.
fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.variant == b.variant
        && a.num_classes == b.num_classes
        && a.input_size == b.input_size
        && a.encoder_depth == b.encoder_depth
        && a.encoder_width == b.encoder_width
        && a.decoder_base_channels == b.decoder_base_channels
        && a.fusion_channels == b.fusion_channels
}

/// Builds a model from the configuration stored in the checkpoint and
/// loads its weights.
pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let ckpt = Checkpoint::read(path)?;
    let mut config = ckpt
        .config
        .clone()
        .ok_or_else(|| Error::load(path, "checkpoint has no model configuration"))?;
    config.pretrained_encoder_path = None;
    let mut model = Model::build(config)?;
    apply(&mut model, &ckpt, |n| Some(n.to_string()), true)
        .map_err(|e| annotate(e, path))?;
    Ok(model)
}

/// Loads weights into an existing model whose configuration must match.
pub fn load_into<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::read(path)?;
    let stored = ckpt
        .config
        .as_ref()
        .ok_or_else(|| Error::load(path, "checkpoint has no model configuration"))?;
    if !same_architecture(stored, model.config()) {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint {} was saved for {stored:?}, model is {:?}",
            path.display(),
            model.config()
        )));
    }
    apply(model, &ckpt, |n| Some(n.to_string()), true).map_err(|e| annotate(e, path))
}

/// Copies encoder tensors from a weight file. Names may carry an
/// `encoder.` prefix or use bare ResNet names; unrelated tensors (e.g. a
/// classifier head) are ignored.
pub fn load_encoder_weights<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::read(path)?;
    let prefixed = ckpt.tensors.keys().any(|k| k.starts_with("encoder."));
    let mut encoder_only = |name: &str| {
        let rest = name.strip_prefix("encoder.")?;
        Some(if prefixed {
            name.to_string()
        } else {
            rest.to_string()
        })
    };
    apply(model, &ckpt, &mut encoder_only, false).map_err(|e| annotate(e, path))
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::CheckpointMismatch(msg) => Error::CheckpointMismatch(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// Copies stored tensors into `model`. `key` maps a model entry name to
/// the stored name, or `None` to skip the entry. With `strict`, stored
/// tensors that the model does not use are an error as well.
fn apply<T: Scalar>(
    model: &mut Model<T>,
    ckpt: &Checkpoint,
    mut key: impl FnMut(&str) -> Option<String>,
    strict: bool,
) -> Result<()> {
    let mut first_error: Option<Error> = None;
    let mut used = 0usize;
    model.visit_mut("", &mut |name, entry| {
        if first_error.is_some() {
            return;
        }
        let Some(stored_name) = key(name) else {
            return;
        };
        let target: &mut Tensor<T> = match entry {
            EntryMut::Param(p) => &mut p.value,
            EntryMut::Buffer(b) => b,
        };
        let Some(stored) = ckpt.tensors.get(&stored_name) else {
            first_error = Some(Error::CheckpointMismatch(format!("missing tensor {stored_name}")));
            return;
        };
        if stored.shape != target.shape() {
            first_error = Some(Error::CheckpointMismatch(format!(
                "tensor {stored_name} has shape {:?}, expected {:?}",
                stored.shape,
                target.shape()
            )));
            return;
        }
        for (dst, &src) in target.data_mut().iter_mut().zip(&stored.values) {
            *dst = T::lit(src);
        }
        used += 1;
    });
    if let Some(e) = first_error {
        return Err(e);
    }
    if strict && used != ckpt.tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} tensors, model uses {used}",
            ckpt.tensors.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn round_trip_preserves_weights_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let cfg = ModelConfig {
            seed: 5,
            ..ModelConfig::miniature(Variant::Acanet, 32)
        };
        let model = Model::<f32>::build(cfg.clone()).unwrap();
        save(&model, &path).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.config(), &cfg);
        let mut a = Vec::new();
        model.visit("", &mut |n, e| {
            if let Entry::Param(p) = e {
                a.push((n.to_string(), p.value.clone()));
            }
        });
        let mut b = Vec::new();
        loaded.visit("", &mut |n, e| {
            if let Entry::Param(p) = e {
                b.push((n.to_string(), p.value.clone()));
            }
        });
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = Model::<f32>::build(ModelConfig::miniature(Variant::Acanet, 32)).unwrap();
        save(&model, &path).unwrap();
        let mut other =
            Model::<f32>::build(ModelConfig::miniature(Variant::Rn18uBaseline, 32)).unwrap();
        assert!(matches!(
            load_into(&mut other, &path),
            Err(Error::CheckpointMismatch(_))
        ));
        let mut wider = Model::<f32>::build(ModelConfig {
            decoder_base_channels: 16,
            ..ModelConfig::miniature(Variant::Acanet, 32)
        })
        .unwrap();
        assert!(load_into(&mut wider, &path).is_err());
    }

    #[test]
    fn corrupt_file_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        std::fs::write(&path, b"definitely not an archive").unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Load { .. })));
        assert!(matches!(
            load::<f32>(&dir.path().join("missing.safetensors")),
            Err(Error::Load { .. })
        ));
    }

    #[test]
    fn pretrained_encoder_weights_are_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoder.safetensors");
        let donor = Model::<f32>::build(ModelConfig {
            seed: 99,
            ..ModelConfig::miniature(Variant::Rn18uBaseline, 32)
        })
        .unwrap();
        save(&donor, &path).unwrap();
        let model = Model::<f32>::build(ModelConfig {
            pretrained_encoder_path: Some(path.clone()),
            ..ModelConfig::miniature(Variant::Acanet, 32)
        })
        .unwrap();
        let grab = |m: &Model<f32>, key: &str| {
            let mut out = None;
            m.visit("", &mut |n, e| {
                if n == key {
                    if let Entry::Param(p) = e {
                        out = Some(p.value.clone());
                    }
                }
            });
            out.unwrap()
        };
        let k = "encoder.layer3.1.conv2.weight";
        assert_eq!(grab(&model, k), grab(&donor, k));

        let missing = ModelConfig {
            pretrained_encoder_path: Some(dir.path().join("nope.safetensors")),
            ..ModelConfig::miniature(Variant::Acanet, 32)
        };
        assert!(matches!(Model::<f32>::build(missing), Err(Error::Load { .. })));
    }
}
