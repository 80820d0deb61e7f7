//! Checkpoint container: a safetensors file whose header carries the model
//! config, the training config, the seed and the loss history under a
//! single `segnbdt` metadata key.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{ConvLayer, EpochStats, ModelConfig, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "segnbdt";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    /// Which step produced it, e.g. `train` or `finetune`.
    pub stage: String,
    pub training: serde_json::Value,
    pub seed: u64,
    pub history: Vec<EpochStats>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    stage: String,
    model: ModelConfig,
    training: serde_json::Value,
    seed: u64,
    history: Vec<EpochStats>,
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidCheckpoint(msg.into())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let net = &ckpt.network;
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (i, layer) in net.convs().iter().enumerate() {
        let w = layer.weight.as_standard_layout();
        buffers.push((
            format!("conv{}.weight", i + 1),
            w.shape().to_vec(),
            f32_bytes(w.as_slice().expect("standard layout")),
        ));
        if let Some(b) = &layer.bias {
            buffers.push((format!("conv{}.bias", i + 1), vec![b.len()], f32_bytes(&b.to_vec())));
        }
    }
    let cls = net.final_layer_weights().as_standard_layout().into_owned();
    buffers.push((
        "classifier.weight".into(),
        cls.shape().to_vec(),
        f32_bytes(cls.as_slice().expect("standard layout")),
    ));
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        dtype: "F32".into(),
        stage: ckpt.stage.clone(),
        model: net.config().clone(),
        training: ckpt.training.clone(),
        seed: ckpt.seed,
        history: ckpt.history.clone(),
    };
    let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);
    let views: Vec<(String, TensorView<'_>)> = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| bad(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let bytes = safetensors::tensor::serialize(views, &Some(meta)).map_err(|e| bad(e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(st: &SafeTensors<'_>, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let t = st.tensor(name).map_err(|_| bad(format!("missing tensor {name}")))?;
    if t.dtype() != Dtype::F32 || t.shape() != shape {
        return Err(bad(format!("tensor {name} has {:?} {:?}, expected F32 {shape:?}", t.dtype(), t.shape())));
    }
    Ok(t.data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let header_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad("missing header"))?;
    let header: Header = serde_json::from_str(header_json).map_err(|e| bad(e.to_string()))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(bad(format!("unsupported format_version {}", header.format_version)));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let cfg = header.model;
    let mut convs = Vec::with_capacity(cfg.dilations.len());
    let mut in_ch = cfg.in_channels;
    for (i, &dil) in cfg.dilations.iter().enumerate() {
        let shape = [cfg.feature_dim, in_ch, 3, 3];
        let w = read_f32(&st, &format!("conv{}.weight", i + 1), &shape)?;
        let bias = if cfg.conv_bias {
            Some(Array1::from(read_f32(&st, &format!("conv{}.bias", i + 1), &[cfg.feature_dim])?))
        } else {
            None
        };
        convs.push(ConvLayer {
            weight: Array4::from_shape_vec(shape, w).expect("shape checked"),
            bias,
            dilation: dil,
        });
        in_ch = cfg.feature_dim;
    }
    let cls_shape = [cfg.num_classes, cfg.feature_dim];
    let cls = Array2::from_shape_vec(cls_shape, read_f32(&st, "classifier.weight", &cls_shape)?).expect("shape checked");
    Ok(Checkpoint {
        network: Network::from_parts(cfg, convs, cls)?,
        stage: header.stage,
        training: header.training,
        seed: header.seed,
        history: header.history,
    })
}
