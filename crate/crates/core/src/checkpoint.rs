//! Weight files and training checkpoints, both stored as safetensors.
//!
//! Weights file: one tensor per parameter under its dotted name, dtype f32
//! (f64 is accepted too).
//!
//! Checkpoint: `param.<name>` for every parameter and buffer,
//! `optim.m.<name>` / `optim.v.<name>` for the Adam moments, and string
//! metadata `schema_version`, `epoch`, `step`, `seed`, `dtype`, `adam_t`
//! and `config` (the full config text). Tensors are stored at the
//! training precision so a resumed run continues bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use drrnet_tensor::nn::ParamStore;
use drrnet_tensor::{Scalar, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{DrrnetError, Result};
use crate::optim::Adam;

pub const SCHEMA_VERSION: u32 = 1;

fn to_bytes<T: Scalar>(t: &Tensor<T>, dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::F64 => t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect(),
        _ => t.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect(),
    }
}

fn from_view<T: Scalar>(view: &TensorView<'_>) -> std::result::Result<Tensor<T>, String> {
    let bytes = view.data();
    let data: Vec<T> = match view.dtype() {
        Dtype::F32 => {
            bytes.chunks_exact(4).map(|c| T::cast_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect()
        }
        Dtype::F64 => bytes.chunks_exact(8).map(|c| T::cast_f64(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        other => return Err(format!("unsupported dtype {other:?}")),
    };
    Tensor::from_vec(view.shape(), data).map_err(|e| e.to_string())
}

fn dtype_of<T: Scalar>() -> Dtype {
    if T::DTYPE == "f64" {
        Dtype::F64
    } else {
        Dtype::F32
    }
}

fn write(
    path: &Path,
    tensors: Vec<(String, Vec<usize>, Vec<u8>)>,
    dtype: Dtype,
    meta: HashMap<String, String>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DrrnetError::io(dir, e))?;
    }
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(n, s, b)| (n.clone(), TensorView::new(dtype, s.clone(), b).expect("consistent view")))
        .collect();
    safetensors::serialize_to_file(views, &Some(meta), path)
        .map_err(|e| DrrnetError::io(path, std::io::Error::other(e.to_string())))
}

/// Writes every parameter of `store` as f32 under its name.
pub fn save_weights<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let tensors = store.iter().map(|p| (p.name().to_string(), p.shape(), to_bytes(&p.value(), Dtype::F32))).collect();
    let meta = HashMap::from([("format".to_string(), "drrnet-weights".to_string())]);
    write(path, tensors, Dtype::F32, meta)
}

/// Fills every parameter of `store` from a weights file. Each parameter
/// must be present with its exact shape; extra file entries are ignored.
pub fn load_weights_into<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let missing = |reason: String| DrrnetError::MissingWeights { path: path.to_path_buf(), reason };
    let bytes = std::fs::read(path).map_err(|e| missing(e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| missing(e.to_string()))?;
    for p in store.iter() {
        let view = st.tensor(p.name()).map_err(|_| missing(format!("no tensor named {}", p.name())))?;
        if view.shape() != p.shape().as_slice() {
            return Err(DrrnetError::ShapeMismatch(format!(
                "{}: file has {:?}, model expects {:?}",
                p.name(),
                view.shape(),
                p.shape()
            )));
        }
        p.set(from_view(&view).map_err(missing)?);
    }
    let extra = st.names().into_iter().filter(|n| store.get(n).is_none()).count();
    if extra > 0 {
        log::warn!("{}: {extra} tensors do not match any parameter", path.display());
    }
    Ok(())
}

/// Position of a training run between two optimizer steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    /// Seed every random stream of the run is derived from.
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub progress: Progress,
    pub config_text: String,
    pub params: BTreeMap<String, Tensor<T>>,
    pub adam: Option<Adam<T>>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.safetensors"))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    adam: Option<&Adam<T>>,
    progress: &Progress,
    config_text: &str,
) -> Result<()> {
    let dtype = dtype_of::<T>();
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> =
        store.iter().map(|p| (format!("param.{}", p.name()), p.shape(), to_bytes(&p.value(), dtype))).collect();
    let mut meta = HashMap::from([
        ("schema_version".to_string(), SCHEMA_VERSION.to_string()),
        ("epoch".to_string(), progress.epoch.to_string()),
        ("step".to_string(), progress.step.to_string()),
        ("seed".to_string(), progress.seed.to_string()),
        ("dtype".to_string(), T::DTYPE.to_string()),
        ("config".to_string(), config_text.to_string()),
    ]);
    if let Some(adam) = adam {
        meta.insert("adam_t".into(), adam.t.to_string());
        for (name, (m, v)) in &adam.moments {
            tensors.push((format!("optim.m.{name}"), m.shape().to_vec(), to_bytes(m, dtype)));
            tensors.push((format!("optim.v.{name}"), v.shape().to_vec(), to_bytes(v, dtype)));
        }
    }
    write(path, tensors, dtype, meta)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bad = |m: String| DrrnetError::CheckpointMismatch(format!("{}: {m}", path.display()));
    let bytes = std::fs::read(path).map_err(|e| DrrnetError::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing metadata {k}")));
    let version: u32 = field("schema_version")?.parse().map_err(|_| bad("bad schema_version".into()))?;
    if version != SCHEMA_VERSION {
        return Err(bad(format!("schema version {version}, expected {SCHEMA_VERSION}")));
    }
    let parse = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
    let progress = Progress { epoch: parse("epoch")? as usize, step: parse("step")? as usize, seed: parse("seed")? };
    let mut params = BTreeMap::new();
    let mut ms = BTreeMap::new();
    let mut vs = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = from_view::<T>(&view).map_err(bad)?;
        if let Some(n) = name.strip_prefix("param.") {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("optim.m.") {
            ms.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("optim.v.") {
            vs.insert(n.to_string(), t);
        }
    }
    let adam = match meta.get("adam_t") {
        None => None,
        Some(t) => {
            let t = t.parse().map_err(|_| bad("bad adam_t".into()))?;
            let mut moments = BTreeMap::new();
            for (name, m) in ms {
                let v = vs.remove(&name).ok_or_else(|| bad(format!("optim.v.{name} missing")))?;
                moments.insert(name, (m, v));
            }
            Some(Adam { t, moments, ..Adam::default() })
        }
    };
    Ok(Checkpoint { progress, config_text: field("config")?, params, adam })
}

impl<T: Scalar> Checkpoint<T> {
    /// Copies the stored parameters into `store`. Names and shapes must
    /// match one to one.
    pub fn restore_into(&self, store: &ParamStore<T>) -> Result<()> {
        let bad = |m: String| Err(DrrnetError::CheckpointMismatch(m));
        if store.len() != self.params.len() {
            return bad(format!("checkpoint holds {} tensors, model has {}", self.params.len(), store.len()));
        }
        for p in store.iter() {
            match self.params.get(p.name()) {
                None => return bad(format!("{} not in checkpoint", p.name())),
                Some(t) if t.shape() != p.shape().as_slice() => {
                    return bad(format!("{}: checkpoint {:?}, model {:?}", p.name(), t.shape(), p.shape()))
                }
                Some(t) => p.set(t.clone()),
            }
        }
        Ok(())
    }
}
