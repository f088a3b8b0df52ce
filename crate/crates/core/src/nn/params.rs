//! Parameter storage. Every tensor lives in one flat buffer so gradients,
//! optimizer moments and the on-disk blob all share a single layout.

use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::{ModelConfig, NnError};

/// Offsets of one transformer block's tensors inside the flat buffer.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    /// `d_model × 3·d_model`, columns ordered query | key | value.
    pub qkv_weight: Range<usize>,
    pub qkv_bias: Range<usize>,
    pub proj_weight: Range<usize>,
    pub proj_bias: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub fc_weight: Range<usize>,
    pub fc_bias: Range<usize>,
    pub out_weight: Range<usize>,
    pub out_bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements.
    pub offset: usize,
    /// Whether decoupled weight decay applies (matrices only).
    pub decay: bool,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub token_embedding: Range<usize>,
    pub positional_embedding: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub final_gain: Range<usize>,
    pub final_bias: Range<usize>,
    /// `d_model × vocab_size`, no bias.
    pub unembedding: Range<usize>,
    pub entries: Vec<TensorEntry>,
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut entries = Vec::new();
        let mut cursor = 0usize;
        let mut push = |name: String, shape: Vec<usize>, decay: bool| -> Range<usize> {
            let len: usize = shape.iter().product();
            let r = cursor..cursor + len;
            entries.push(TensorEntry {
                name,
                shape,
                offset: cursor,
                decay,
            });
            cursor += len;
            r
        };
        let (d, f, v, s) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len);
        let token_embedding = push("token_embedding".into(), vec![v, d], true);
        let positional_embedding = push("positional_embedding".into(), vec![s, d], true);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("blocks.{l}.{n}");
            blocks.push(BlockLayout {
                ln1_gain: push(p("ln1.gain"), vec![d], false),
                ln1_bias: push(p("ln1.bias"), vec![d], false),
                qkv_weight: push(p("attn.qkv.weight"), vec![d, 3 * d], true),
                qkv_bias: push(p("attn.qkv.bias"), vec![3 * d], false),
                proj_weight: push(p("attn.proj.weight"), vec![d, d], true),
                proj_bias: push(p("attn.proj.bias"), vec![d], false),
                ln2_gain: push(p("ln2.gain"), vec![d], false),
                ln2_bias: push(p("ln2.bias"), vec![d], false),
                fc_weight: push(p("mlp.fc.weight"), vec![d, f], true),
                fc_bias: push(p("mlp.fc.bias"), vec![f], false),
                out_weight: push(p("mlp.out.weight"), vec![f, d], true),
                out_bias: push(p("mlp.out.bias"), vec![d], false),
            });
        }
        let final_gain = push("final_norm.gain".into(), vec![d], false);
        let final_bias = push("final_norm.bias".into(), vec![d], false);
        let unembedding = push("unembedding".into(), vec![d, v], true);
        Layout {
            token_embedding,
            positional_embedding,
            blocks,
            final_gain,
            final_bias,
            unembedding,
            entries,
            len: cursor,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Name of the tensor owning flat index `idx`.
    pub fn name_of(&self, idx: usize) -> &str {
        self.entries
            .iter()
            .find(|e| e.range().contains(&idx))
            .map(|e| e.name.as_str())
            .unwrap_or("<out of range>")
    }
}

/// Model weights: config, layout and one flat value buffer.
#[derive(Debug, Clone)]
pub struct TransformerParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Scalar> PartialEq for TransformerParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

const POSITIONAL_INIT_AMPLITUDE: f64 = 0.02;

impl<T: Scalar> TransformerParams<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self, NnError> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        let data = vec![T::zero(); layout.len];
        Ok(TransformerParams { config, layout, data })
    }

    /// GPT-2 style initialisation: N(0, 0.02) weights, residual projections
    /// scaled by 1/sqrt(2·n_layers), unit gains, zero biases. Learned
    /// positions start from a sinusoidal table of amplitude 0.02.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / ((2 * config.n_layers.max(1)) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, resid_std).expect("valid std");
        let layout = Arc::clone(&p.layout);
        let mut fill = |r: &Range<usize>, dist: &Normal<f64>, data: &mut Vec<T>| {
            for x in &mut data[r.clone()] {
                *x = T::lit(dist.sample(&mut rng));
            }
        };
        fill(&layout.token_embedding, &normal, &mut p.data);
        let d = config.d_model;
        for pos in 0..config.max_seq_len {
            for i in 0..d {
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let a = pos as f64 * freq;
                let v = if i % 2 == 0 { a.sin() } else { a.cos() };
                p.data[layout.positional_embedding.start + pos * d + i] = T::lit(POSITIONAL_INIT_AMPLITUDE * v);
            }
        }
        for b in &layout.blocks {
            fill(&b.qkv_weight, &normal, &mut p.data);
            fill(&b.proj_weight, &resid, &mut p.data);
            fill(&b.fc_weight, &normal, &mut p.data);
            fill(&b.out_weight, &resid, &mut p.data);
            p.data[b.ln1_gain.clone()].fill(T::one());
            p.data[b.ln2_gain.clone()].fill(T::one());
        }
        p.data[layout.final_gain.clone()].fill(T::one());
        fill(&layout.unembedding, &normal, &mut p.data);
        Ok(p)
    }

    pub fn slice(&self, r: &Range<usize>) -> &[T] {
        &self.data[r.clone()]
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.entry(name).map(|e| &self.data[e.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.entry(name)?.range();
        Some(&mut self.data[r])
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(NnError::NonFiniteParameter(self.layout.name_of(i).to_string())),
        }
    }

    /// Converts precision, e.g. to build a float64 shadow for gradient checks.
    pub fn cast<U: Scalar>(&self) -> TransformerParams<U> {
        TransformerParams {
            config: self.config,
            layout: Arc::clone(&self.layout),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

/// JSON manifest accompanying a raw tensor blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub config: ModelConfig,
    pub dtype: String,
    pub tensors: Vec<ManifestTensor>,
    pub total_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Result<Vec<f32>, NnError> {
    if bytes.len() % 4 != 0 {
        return Err(NnError::Format(format!(
            "blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl TransformerParams<f32> {
    pub fn manifest(&self) -> ParamManifest {
        ParamManifest {
            config: self.config,
            dtype: "f32-le".into(),
            tensors: self
                .layout
                .entries
                .iter()
                .map(|e| ManifestTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    byte_offset: e.offset * 4,
                })
                .collect(),
            total_bytes: self.layout.len * 4,
        }
    }

    pub fn to_blob(&self) -> Vec<u8> {
        f32_to_le_bytes(&self.data)
    }

    pub fn from_blob(manifest: &ParamManifest, blob: &[u8]) -> Result<Self, NnError> {
        let mut p = Self::zeros(manifest.config)?;
        if *manifest != p.manifest() {
            return Err(NnError::Format(
                "tensor table does not match the layout implied by the config".into(),
            ));
        }
        if blob.len() != manifest.total_bytes {
            return Err(NnError::Format(format!(
                "blob has {} bytes, manifest declares {}",
                blob.len(),
                manifest.total_bytes
            )));
        }
        p.data = f32_from_le_bytes(blob)?;
        Ok(p)
    }

    /// Writes `<stem>.json` and `<stem>.bin` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), NnError> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).map_err(|e| NnError::Format(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.json")), manifest)?;
        fs::write(dir.join(format!("{stem}.bin")), self.to_blob())?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, NnError> {
        let text = fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let manifest: ParamManifest = serde_json::from_str(&text).map_err(|e| NnError::Format(e.to_string()))?;
        let blob = fs::read(dir.join(format!("{stem}.bin")))?;
        Self::from_blob(&manifest, &blob)
    }
}
