//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "LCONVCKP"
//! version   u32
//! dtype     u8       0 = f32, 1 = f64 (tensor payload encoding)
//! folded    u8
//! arch      u32 length + UTF-8 architecture text
//! config    u32 length + UTF-8 JSON
//! epoch     u32
//! rng       32-byte seed, u64 stream, u128 word position
//! adam step u64
//! tensors   u32 count, then per tensor:
//!           u16 name length, name, u8 rank, rank × u32 extents, payload
//! ```
//!
//! Optimizer moments are stored as tensors named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{Adam, TrainConfig};
use crate::error::{Error, Result};
use crate::models::{ArchSpec, Model};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LCONVCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub optimizer: Option<Adam<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// A checkpoint of a model that has not been trained.
    pub fn of_model(model: Model<T>, config: TrainConfig) -> Self {
        Self {
            model,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(config.seed)),
            config,
            epoch: 0,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        out.push(u8::from(self.model.is_folded()));
        put_block(&mut out, self.model.spec().to_text().as_bytes())?;
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_block(&mut out, config.as_bytes())?;
        out.extend(u32::try_from(self.epoch).map_err(|_| Error::Checkpoint("epoch overflow".into()))?.to_le_bytes());
        out.extend(self.rng.seed);
        out.extend(self.rng.stream.to_le_bytes());
        out.extend(self.rng.word_pos.to_le_bytes());
        out.extend(self.optimizer.as_ref().map_or(0, Adam::steps).to_le_bytes());

        let mut table: Vec<(String, &Tensor<T>)> = self.model.named_tensors();
        if let Some(adam) = &self.optimizer {
            let names = learnable_names(&self.model);
            let (m, v) = adam.moments();
            for (name, t) in names.iter().zip(m) {
                table.push((format!("adam.m/{name}"), t));
            }
            for (name, t) in names.iter().zip(v) {
                table.push((format!("adam.v/{name}"), t));
            }
        }
        out.extend((table.len() as u32).to_le_bytes());
        for (name, t) in table {
            let name = name.as_bytes();
            out.extend((name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.rank() as u8);
            for d in t.shape() {
                out.extend((*d as u32).to_le_bytes());
            }
            for v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; payloads stored in the other precision are
    /// converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let dtype_at = r.pos;
        let dtype = DType::from_code(r.u8()?)
            .ok_or_else(|| Error::format(dtype_at as u64, "unknown payload dtype"))?;
        let folded = r.u8()? != 0;
        let arch = ArchSpec::parse(&r.string()?)?;
        let config: TrainConfig =
            serde_json::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let epoch = r.u32()? as usize;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap_or([0; 16]));
        let adam_steps = r.u64()?;

        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(name_at as u64, "tensor name is not UTF-8"))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload_at = r.pos;
            let raw = r.take(n * dtype.width())?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw.chunks(4).map(|c| T::lit(f64::from(f32::read_le(c)))).collect(),
                DType::F64 => raw.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
            };
            let tensor = Tensor::new(&shape, data)
                .map_err(|e| Error::format(payload_at as u64, format!("tensor {name}: {e}")))?;
            table.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after tensor table"));
        }

        let mut model = Model::build(&arch, 0)?;
        if folded {
            model = model.fold()?;
        }
        for (name, slot) in model.named_tensors_mut() {
            *slot = take_tensor(&mut table, &name, slot.shape())?;
        }
        let optimizer = if table.is_empty() {
            None
        } else {
            let names = learnable_names(&model);
            let shapes: Vec<Vec<usize>> = model.learnable_mut().iter().map(|t| t.shape().to_vec()).collect();
            let mut first = Vec::new();
            let mut second = Vec::new();
            for (name, shape) in names.iter().zip(&shapes) {
                first.push(take_tensor(&mut table, &format!("adam.m/{name}"), shape)?);
                second.push(take_tensor(&mut table, &format!("adam.v/{name}"), shape)?);
            }
            Some(Adam::from_parts(adam_steps, first, second))
        };
        if let Some((name, _)) = table.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        Ok(Self {
            model,
            config,
            epoch,
            rng: RngState { seed, stream, word_pos },
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks that the stored architecture is `expected`.
    pub fn load_for(path: &Path, expected: &ArchSpec) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.model.spec() != expected {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint holds {:?} ({}), expected {:?} ({})",
                ck.model.spec().name,
                variant_label(ck.model.spec()),
                expected.name,
                variant_label(expected)
            )));
        }
        Ok(ck)
    }
}

fn take_tensor<T: Scalar>(table: &mut Vec<(String, Tensor<T>)>, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let pos = table
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    let (_, t) = table.swap_remove(pos);
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "shape mismatch for {name}: file has {:?}, architecture needs {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

fn variant_label(spec: &ArchSpec) -> String {
    spec.to_text().lines().find(|l| l.starts_with("variant")).unwrap_or("").to_string()
}

/// Names of the optimizer-visible tensors, in `learnable_mut` order.
fn learnable_names<T: Scalar>(model: &Model<T>) -> Vec<String> {
    model
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| !n.contains(".running_") && !n.ends_with(".folded"))
        .collect()
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| Error::Checkpoint("block too large".into()))?;
    out.extend(len.to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap_or_default()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap_or_default()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap_or_default()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::format(at as u64, "block is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alpha::Alpha;
    use crate::models::Variant;

    fn linear() -> ArchSpec {
        ArchSpec::base()
            .with_input_channels(1)
            .with_variant(Variant::LinearLowRank {
                alpha: Alpha::HALF,
                rank: 10,
            })
    }

    #[test]
    fn round_trip_is_exact() {
        let model = Model::<f32>::build(&linear(), 4).unwrap();
        let mut ck = Checkpoint::of_model(model, TrainConfig::default());
        ck.optimizer = Some(Adam::new(ck.model.clone().learnable_mut().into_iter().map(|t| &*t)));
        ck.epoch = 3;
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn folded_round_trip() {
        let model = Model::<f64>::build(&linear(), 4).unwrap().fold().unwrap();
        let ck = Checkpoint::of_model(model, TrainConfig::default());
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.model.is_folded());
        assert_eq!(back.model, ck.model);
    }

    #[test]
    fn truncation_reports_offset() {
        let ck = Checkpoint::of_model(Model::<f32>::build(&linear(), 0).unwrap(), TrainConfig::default());
        let bytes = ck.to_bytes().unwrap();
        for cut in [5, 20, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::<f32>::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_and_magic_guards() {
        let ck = Checkpoint::of_model(Model::<f32>::build(&linear(), 0).unwrap(), TrainConfig::default());
        let mut bytes = ck.to_bytes().unwrap();
        bytes[8] = 9;
        let msg = Checkpoint::<f32>::from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("version 9"), "{msg}");
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(1);
        rng.next_u64();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }
}
