//! Checkpoint file: a text manifest followed by a little-endian `f64`
//! payload.
//!
//! ```text
//! ISTPA-CKPT 1
//! config {"K_train":3,...}
//! tensor backbone.conv1.kernel 3x3x1x8 0 72
//! ...
//! payload_bytes 123456
//! payload_sha256 <hex>
//! end
//! <payload>
//! ```
//!
//! Tensor offsets are in bytes from the start of the payload.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::data::to_hex;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const FORMAT_HEADER: &str = "ISTPA-CKPT 1";
const END_MARKER: &[u8] = b"\nend\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(config: &TrainConfig, model: &Model) -> Self {
        Self {
            config: config.clone(),
            tensors: model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn payload_hash(&self) -> String {
        to_hex(&Sha256::digest(self.payload()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut manifest = format!("{FORMAT_HEADER}\nconfig {}\n", self.config.to_json());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!(
                "tensor {name} {} {offset} {}\n",
                dims.join("x"),
                t.numel()
            ));
            offset += t.numel() * 8;
        }
        manifest.push_str(&format!("payload_bytes {}\n", payload.len()));
        manifest.push_str(&format!(
            "payload_sha256 {}",
            to_hex(&Sha256::digest(&payload))
        ));
        let mut out = manifest.into_bytes();
        out.extend_from_slice(END_MARKER);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Integrity(m);
        let split = bytes
            .windows(END_MARKER.len())
            .position(|w| w == END_MARKER)
            .ok_or_else(|| bad("manifest end marker not found".into()))?;
        let manifest = std::str::from_utf8(&bytes[..split])
            .map_err(|_| bad("manifest is not UTF-8".into()))?;
        let payload = &bytes[split + END_MARKER.len()..];

        let mut lines = manifest.lines();
        if lines.next() != Some(FORMAT_HEADER) {
            return Err(bad("unknown format header".into()));
        }
        let mut config = None;
        let mut entries = Vec::new();
        let mut declared_bytes = None;
        let mut declared_hash = None;
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "config" => {
                    let c = serde_json::from_str::<TrainConfig>(rest)
                        .map_err(|e| bad(format!("bad config echo: {e}")))?;
                    config = Some(c);
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, dims, offset, len] = f[..] else {
                        return Err(bad(format!("malformed tensor line {line:?}")));
                    };
                    let shape = dims
                        .split('x')
                        .map(str::parse::<usize>)
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape in {line:?}")))?;
                    let offset: usize = offset
                        .parse()
                        .map_err(|_| bad(format!("bad offset in {line:?}")))?;
                    let len: usize = len
                        .parse()
                        .map_err(|_| bad(format!("bad length in {line:?}")))?;
                    if shape.iter().product::<usize>() != len {
                        return Err(bad(format!("shape/length disagree for {name}")));
                    }
                    entries.push((name.to_string(), shape, offset, len));
                }
                "payload_bytes" => {
                    declared_bytes = Some(
                        rest.parse::<usize>()
                            .map_err(|_| bad("bad payload_bytes".into()))?,
                    )
                }
                "payload_sha256" => declared_hash = Some(rest.to_string()),
                other => return Err(bad(format!("unknown manifest key {other:?}"))),
            }
        }
        let config = config.ok_or_else(|| bad("missing config".into()))?;
        let declared = declared_bytes.ok_or_else(|| bad("missing payload_bytes".into()))?;
        if payload.len() != declared {
            return Err(bad(format!(
                "payload is {} bytes, manifest declares {declared}",
                payload.len()
            )));
        }
        if let Some(h) = declared_hash {
            if h != to_hex(&Sha256::digest(payload)) {
                return Err(bad("payload hash mismatch".into()));
            }
        }
        let mut tensors = Vec::with_capacity(entries.len());
        let mut expected_offset = 0;
        for (name, shape, offset, len) in entries {
            if offset != expected_offset || offset + len * 8 > payload.len() {
                return Err(bad(format!("tensor {name} lies outside the payload")));
            }
            let data = payload[offset..offset + len * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
            expected_offset = offset + len * 8;
        }
        if expected_offset != payload.len() {
            return Err(bad("payload has trailing bytes".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model described by the embedded config, checking every
    /// tensor name and shape.
    pub fn to_model(&self) -> Result<Model> {
        self.to_model_for(&self.config)
    }

    /// Like [`Checkpoint::to_model`], but against a caller-supplied config.
    pub fn to_model_for(&self, config: &TrainConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::init(config.model_spec(), &mut rng)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::Load(format!(
                "expected {} tensors, checkpoint has {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (cname, t)) in expected.iter().zip(&self.tensors) {
            if name != cname || shape.as_slice() != t.shape() {
                return Err(Error::Load(format!(
                    "expected {name} {shape:?}, found {cname} {:?}",
                    t.shape()
                )));
            }
        }
        for (dst, (_, src)) in model.params_mut().into_iter().zip(&self.tensors) {
            *dst = src.clone();
        }
        model.spec.fusion = config.fusion;
        if let Some(att) = &mut model.attention {
            att.fusion = config.fusion;
        }
        Ok(model)
    }
}
