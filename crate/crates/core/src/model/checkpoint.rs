//! Checkpoint container: an 8-byte magic, a little-endian u64 header length,
//! a JSON header (config, vocabulary, block table), then raw little-endian
//! f64 blocks in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MiniTransformer, ModelConfig, ModelError, ModuleKind, Tokenizer};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CBMODEL\0";
const FORMAT: &str = "codebias-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    blocks: Vec<Block>,
}

#[derive(Serialize, Deserialize)]
struct Block {
    key: String,
    /// Shapes of the tensors stored back to back in this block.
    shapes: Vec<Vec<usize>>,
}

/// Groups parameter indices into keyed blocks: one per module (weight then
/// bias), one per norm (gain then bias), and one per embedding table.
fn block_layout(m: &MiniTransformer) -> Vec<(String, Vec<usize>)> {
    let n_layers = m.config().n_layers;
    let mut blocks = vec![
        ("embed.tokens".to_string(), vec![0]),
        ("embed.positions".to_string(), vec![1]),
    ];
    for l in 0..n_layers {
        let g = m.ln1_index(l);
        blocks.push((format!("{l}.ln_1"), vec![g, g + 1]));
        for k in ModuleKind::ALL {
            blocks.push((format!("{l}.{k}"), vec![m.weight_index(l, k), m.bias_index(l, k)]));
        }
    }
    let f = m.ln_f_index();
    blocks.push(("ln_f".into(), vec![f, f + 1]));
    blocks.push(("unembed".into(), vec![m.unembed_index()]));
    blocks
}

impl MiniTransformer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = block_layout(self);
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config().clone(),
            vocab: self.tokenizer().pieces().to_vec(),
            blocks: layout
                .iter()
                .map(|(key, ix)| Block {
                    key: key.clone(),
                    shapes: ix.iter().map(|&i| self.params()[i].shape().to_vec()).collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.n_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, ix) in &layout {
            for &i in ix {
                for v in self.params()[i].data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |msg: String| ModelError::Format(msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a model checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("unreadable header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let tokenizer = Tokenizer::from_pieces(header.vocab)?;
        let config = header.config;
        let mut model = MiniTransformer::zeroed(config.clone(), tokenizer)
            .map_err(|e| bad(format!("header config rejected: {e}")))?;
        let layout = block_layout(&model);
        if layout.len() != header.blocks.len() {
            return Err(bad(format!(
                "expected {} blocks, found {}",
                layout.len(),
                header.blocks.len()
            )));
        }
        let mut offset = 16 + hlen;
        for ((key, ix), block) in layout.iter().zip(&header.blocks) {
            if *key != block.key || ix.len() != block.shapes.len() {
                return Err(bad(format!("block {:?} where {key:?} was expected", block.key)));
            }
            for (&i, shape) in ix.iter().zip(&block.shapes) {
                let expected = model.params()[i].shape().to_vec();
                if *shape != expected {
                    return Err(bad(format!(
                        "block {key}: shape {shape:?}, architecture needs {expected:?}"
                    )));
                }
                let n: usize = shape.iter().product();
                let raw = bytes
                    .get(offset..offset + 8 * n)
                    .ok_or_else(|| bad(format!("block {key} is truncated")))?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                model.params_mut()[i] = Tensor::new(shape.clone(), data)?;
                offset += 8 * n;
            }
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and insists the stored architecture equals `expected` (the seed
    /// is not compared).
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self, ModelError> {
        let m = Self::load(path)?;
        if m.config().arch_hash() != expected.arch_hash() {
            return Err(ModelError::Format(format!(
                "checkpoint architecture {:?} does not match the expected {:?}",
                m.config(),
                expected
            )));
        }
        Ok(m)
    }
}
