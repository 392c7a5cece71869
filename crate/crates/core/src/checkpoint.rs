//! Checkpoint files: an ASCII header with the architecture and its digest,
//! followed by named binary parameter blocks.
//!
//! ```text
//! DGNO-CKPT 1 <sha256 of the key=value lines>
//! channels=16
//! ...
//! ---
//! { u32 name_len, name, u32 ndim, u64 dims[ndim], f64 payload[] }*
//! ```
//! All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dg::{FluxConfig, FluxKind, OperatorVariant, Penalty};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::param::ParamStore;
use crate::partition::BoundaryCondition;
use crate::tape::Activation;
use crate::tensor::Tensor;

pub const MAGIC: &str = "DGNO-CKPT";
pub const VERSION: u32 = 1;
const SEPARATOR: &str = "---";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
}

fn config_text(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint(config: &ModelConfig, store: &ParamStore) -> Vec<u8> {
    let pairs: Vec<(String, String)> = config.architecture().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let text = config_text(&pairs);
    let mut out = format!("{MAGIC} {VERSION} {}\n{text}{SEPARATOR}\n", digest(&text)).into_bytes();
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes through a temporary sibling so an interrupted write never
/// replaces a good checkpoint.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let bytes = encode_checkpoint(&model.config, &model.params);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("unterminated header".into()))?;
        *pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not UTF-8".into()))
    };
    let head = next_line(&mut pos)?;
    let parts: Vec<&str> = head.split(' ').collect();
    if parts.len() != 3 || parts[0] != MAGIC {
        return Err(bad(format!("missing `{MAGIC}` header")));
    }
    if parts[1] != VERSION.to_string() {
        return Err(bad(format!("unsupported version {}", parts[1])));
    }
    let mut config = Vec::new();
    loop {
        let line = next_line(&mut pos)?;
        if line == SEPARATOR {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("bad config line `{line}`")))?;
        config.push((k.to_string(), v.to_string()));
    }
    if digest(&config_text(&config)) != parts[2] {
        return Err(bad("config digest does not match header".into()));
    }

    let mut rest = &bytes[pos..];
    let take = |rest: &mut &[u8], n: usize| -> Result<Vec<u8>> {
        if rest.len() < n {
            return Err(bad("truncated parameter block".into()));
        }
        let (head, tail) = rest.split_at(n);
        *rest = tail;
        Ok(head.to_vec())
    };
    let mut params = Vec::new();
    while !rest.is_empty() {
        let len = u32::from_le_bytes(take(&mut rest, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut rest, len)?).map_err(|_| bad("parameter name is not UTF-8".into()))?;
        let ndim = u32::from_le_bytes(take(&mut rest, 4)?.try_into().unwrap()) as usize;
        if ndim == 0 || ndim > crate::tensor::MAX_RANK {
            return Err(bad(format!("parameter `{name}` has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut rest, 8)?.try_into().unwrap()) as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| bad(format!("parameter `{name}` too large")))?;
        let data = take(&mut rest, count)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| bad(format!("parameter `{name}`: {e}")))?;
        params.push((name, value));
    }
    Ok(Checkpoint { config, params })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

impl Checkpoint {
    /// Names of architecture fields that differ from `config`.
    pub fn mismatches(&self, config: &ModelConfig) -> Vec<String> {
        let want = config.architecture();
        let mut fields: Vec<String> = want
            .iter()
            .filter(|(k, v)| self.config.iter().find(|(ck, _)| ck == k).map(|(_, cv)| cv) != Some(v))
            .map(|(k, _)| k.to_string())
            .collect();
        for (k, _) in &self.config {
            if !want.iter().any(|(w, _)| w == k) {
                fields.push(k.clone());
            }
        }
        fields
    }

    /// Rebuilds the architecture stored in the header; `seed` is not stored
    /// and is set to 0.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let get = |k: &str| -> Result<&str> {
            self.config
                .iter()
                .find(|(ck, _)| ck == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::contract(format!("checkpoint lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::contract(format!("checkpoint field `{k}` is not an integer")))
        };
        let tau: f64 = get("tau")?
            .parse()
            .map_err(|_| Error::contract("checkpoint field `tau` is not a number"))?;
        let penalty = match get("penalty")? {
            "learnable" => Penalty::Learnable(tau),
            "fixed" => Penalty::Fixed(tau),
            other => return Err(Error::contract(format!("unknown penalty `{other}`"))),
        };
        let unknown = |k: &str, v: &str| Error::contract(format!("unknown {k} `{v}`"));
        let cfg = ModelConfig {
            channels: num("channels")?,
            heads: num("heads")?,
            element_size: num("element_size")?,
            layers: num("layers")?,
            variant: OperatorVariant::parse(get("variant")?).ok_or_else(|| unknown("variant", get("variant").unwrap()))?,
            flux: FluxConfig {
                kind: FluxKind::parse(get("flux")?).ok_or_else(|| unknown("flux", get("flux").unwrap()))?,
                penalty,
                bc: BoundaryCondition::parse(get("bc")?).ok_or_else(|| unknown("bc", get("bc").unwrap()))?,
            },
            activation: Activation::parse(get("activation")?)
                .ok_or_else(|| unknown("activation", get("activation").unwrap()))?,
            seed: 0,
        };
        Ok(cfg)
    }

    /// Instantiates `config` and loads the stored weights, refusing a
    /// checkpoint written for a different architecture.
    pub fn into_model(self, config: ModelConfig) -> Result<Model> {
        let fields = self.mismatches(&config);
        if !fields.is_empty() {
            return Err(Error::ConfigMismatch { fields });
        }
        let mut model = Model::new(config)?;
        model.params.load_from(&self.params)?;
        Ok(model)
    }
}

pub fn load_model(path: &Path, config: ModelConfig) -> Result<Model> {
    read_checkpoint(path)?.into_model(config)
}
