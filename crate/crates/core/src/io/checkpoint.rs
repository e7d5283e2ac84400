//! Self-describing parameter files.
//!
//! ```text
//! "MHNT" | version: u32 LE | manifest length: u64 LE | manifest (UTF-8) | payload
//! ```
//!
//! The manifest holds the model configuration as `key = value` lines
//! followed by one `param <name> <NxCxHxW>` line per tensor. The payload is
//! every tensor's values as little-endian `f32`, in manifest order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::Config;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MHNT";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor<f32>)>,
}

fn field(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        field,
        detail: detail.into(),
    }
}

fn parse_shape(s: &str) -> Option<Shape> {
    let d: Vec<usize> = s.split('x').map(|v| v.parse().ok()).collect::<Option<_>>()?;
    match d[..] {
        [n, c, h, w] => Some(Shape::new(n, c, h, w)),
        _ => None,
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model
                .params
                .iter()
                .map(|(name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Builds the model, checking the stored configuration against
    /// `expected` when given.
    pub fn into_model(self, expected: Option<&ModelConfig>) -> Result<Model> {
        if let Some(want) = expected {
            if *want != self.config {
                return Err(field(
                    "config",
                    format!("checkpoint holds {:?}, requested {:?}", self.config, want),
                ));
            }
        }
        let mut model = Model::new(&self.config, 0)?;
        if model.params.len() != self.params.len() {
            return Err(field(
                "parameters",
                format!("{} tensors, model has {}", self.params.len(), model.params.len()),
            ));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, (name, t)) in ids.into_iter().zip(self.params) {
            let (want_name, want_shape) = (model.params.name(id).to_string(), model.params.get(id).shape());
            if name != want_name || t.shape() != want_shape {
                return Err(field(
                    "parameters",
                    format!("found {name} {}, expected {want_name} {want_shape}", t.shape()),
                ));
            }
            model.params.set(id, t)?;
        }
        Ok(model)
    }

    fn manifest(&self) -> String {
        let mut m = self.config.to_config().render();
        for (name, t) in &self.params {
            m.push_str(&format!("param {name} {}\n", t.shape()));
        }
        m
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = self.manifest();
        let floats: usize = self.params.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(HEADER + manifest.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(field("header", format!("{} bytes, need at least {HEADER}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(field("magic", format!("{:?}, expected {:?}", &bytes[..4], MAGIC)));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(field("version", format!("{version}, expected {VERSION}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let end = usize::try_from(mlen)
            .ok()
            .and_then(|m| m.checked_add(HEADER))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| field("manifest", format!("length {mlen} exceeds file size {}", bytes.len())))?;
        let text = std::str::from_utf8(&bytes[HEADER..end]).map_err(|e| field("manifest", e.to_string()))?;

        let mut cfg_lines = String::new();
        let mut entries = Vec::new();
        for line in text.lines() {
            match line.strip_prefix("param ") {
                Some(rest) => {
                    let (name, shape) = rest
                        .rsplit_once(' ')
                        .and_then(|(n, s)| Some((n.to_string(), parse_shape(s)?)))
                        .ok_or_else(|| field("manifest", format!("bad parameter line '{line}'")))?;
                    entries.push((name, shape));
                }
                None => {
                    cfg_lines.push_str(line);
                    cfg_lines.push('\n');
                }
            }
        }
        let cfg = Config::parse(&cfg_lines).map_err(|e| field("manifest", e.to_string()))?;
        cfg.check_known(&ModelConfig::KEYS).map_err(|e| field("manifest", e.to_string()))?;
        let config = ModelConfig::from_config(&cfg).map_err(|e| field("config", e.to_string()))?;

        let expected: usize = entries.iter().map(|(_, s)| 4 * s.numel()).sum();
        let payload = &bytes[end..];
        if payload.len() != expected {
            return Err(field(
                "payload",
                format!("expected {expected} bytes, found {}", payload.len()),
            ));
        }
        let mut at = 0;
        let params = entries
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.numel();
                let data = payload[at..at + 4 * n]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                at += 4 * n;
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint { config, params })
    }

    /// Writes through a temporary file so an interrupted save never
    /// replaces a good checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    Checkpoint::load(path)?.into_model(expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Model {
        let mut m = Model::new(&ModelConfig::tiny(8), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in m.params.ids().collect::<Vec<_>>() {
            let s = m.params.get(id).shape();
            m.params.set(id, Tensor::rand_uniform(s, -1.0, 1.0, &mut rng)).unwrap();
        }
        m
    }

    #[test]
    fn byte_exact_round_trip() {
        let bytes = Checkpoint::from_model(&model(1)).encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        let m = back.into_model(Some(&ModelConfig::tiny(8))).unwrap();
        assert_eq!(Checkpoint::from_model(&m).encode(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mhnt");
        let m = model(2);
        save_checkpoint(&m, &p).unwrap();
        let loaded = load_checkpoint(&p, None).unwrap();
        assert_eq!(Checkpoint::from_model(&loaded), Checkpoint::from_model(&m));
    }

    fn failing_field(bytes: &[u8]) -> &'static str {
        match Checkpoint::decode(bytes) {
            Err(Error::Checkpoint { field, .. }) => field,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_names_the_field() {
        let good = Checkpoint::from_model(&model(3)).encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(failing_field(&bad), "magic");
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(failing_field(&bad), "version");
        assert_eq!(failing_field(&good[..good.len() - 3]), "payload");
        assert_eq!(failing_field(&good[..10]), "header");
        let mut bad = good.clone();
        bad[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(failing_field(&bad), "manifest");
        match Checkpoint::decode(&good[..good.len() - 3]) {
            Err(e) => assert!(e.to_string().contains("found"), "{e}"),
            Ok(_) => unreachable!(),
        }
    }

    #[test]
    fn config_mismatch_rejected() {
        let ck = Checkpoint::decode(&Checkpoint::from_model(&model(4)).encode()).unwrap();
        match ck.into_model(Some(&ModelConfig::tiny(16))) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "config"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}
