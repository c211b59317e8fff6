//! HVNC checkpoint files.
//!
//! ```text
//! "HVNC" | version u32 | count u32 | tensor*count | [count u32 | tensor*count] | crc32 u32
//! tensor = name_len u16 | name utf-8 | dtype u8 (0 f32, 1 f64) | rank u8 | extents u32*rank | payload
//! ```
//!
//! All integers and payloads are little-endian. The bracketed block holds
//! optimizer state and is present iff bytes remain before the CRC. The CRC-32
//! covers every preceding byte.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig, PlateauSchedule};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HVNC";
pub const VERSION: u32 = 1;

const FORMAT: &str = "HVNC";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

/// Raw file contents: named tensors plus an optional optimizer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<Vec<(String, Tensor)>>,
}

fn put_block(out: &mut Vec<u8>, tensors: &[(String, Tensor)], dtype: Dtype) -> Result<()> {
    let count = u32::try_from(tensors.len()).map_err(|_| Error::invalid("checkpoint", "too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    let mut seen = HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::invalid("checkpoint", format!("duplicate tensor name {name:?}")));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid("checkpoint", format!("name too long: {name:?}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("checkpoint", format!("{name}: rank too large")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype as u8);
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::invalid("checkpoint", format!("{name}: extent too large")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        match dtype {
            Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    Ok(())
}

/// Serialises `ckpt`; `dtype` applies to every payload.
pub fn encode(ckpt: &Checkpoint, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_block(&mut out, &ckpt.tensors, dtype)?;
    if let Some(opt) = &ckpt.optimizer {
        put_block(&mut out, opt, dtype)?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, field: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(FORMAT, self.pos, format!("truncated {field}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn block(&mut self, which: &str) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32(&format!("{which} tensor count"))?;
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for i in 0..count {
            let field = |f: &str| format!("{which} tensor {i} {f}");
            let len = self.u16(&field("name length"))? as usize;
            let at = self.pos;
            let name = std::str::from_utf8(self.take(len, &field("name"))?)
                .map_err(|_| Error::format(FORMAT, at, field("name is not UTF-8")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::format(FORMAT, at, format!("duplicate tensor name {name:?}")));
            }
            let at = self.pos;
            let width = match self.u8(&field("dtype"))? {
                0 => 4,
                1 => 8,
                other => return Err(Error::format(FORMAT, at, format!("{name}: unknown dtype tag {other}"))),
            };
            let rank = self.u8(&field("rank"))? as usize;
            let at = self.pos;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32(&field("extents"))? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).filter(|&n| n > 0 && shape.iter().all(|&e| e > 0));
            let n = n.ok_or_else(|| Error::format(FORMAT, at, format!("{name}: invalid extents {shape:?}")))?;
            let bytes_needed = n
                .checked_mul(width)
                .ok_or_else(|| Error::format(FORMAT, at, format!("{name}: payload too large")))?;
            let payload = self.take(bytes_needed, &format!("payload of {name}"))?;
            let data: Vec<f64> = if width == 8 {
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            } else {
                payload.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect()
            };
            out.push((name, Tensor::new(&shape, data)?));
        }
        Ok(out)
    }
}

/// Parses and validates a checkpoint; the CRC is checked after the structure.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(FORMAT, 0, "bad magic, expected \"HVNC\""));
    }
    if bytes.len() < 16 {
        return Err(Error::format(FORMAT, bytes.len(), "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(FORMAT, 4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let body_end = bytes.len() - 4;
    let mut r = Reader { bytes: &bytes[..body_end], pos: 8 };
    let tensors = r.block("model")?;
    let optimizer = if r.pos < body_end { Some(r.block("optimizer")?) } else { None };
    if r.pos != body_end {
        return Err(Error::format(FORMAT, r.pos, "trailing bytes before checksum"));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(Checkpoint { tensors, optimizer })
}

fn meta(key: &str, v: f64) -> (String, Tensor) {
    (format!("meta.{key}"), Tensor::scalar(v))
}

fn config_tensors(c: &ModelConfig) -> Vec<(String, Tensor)> {
    vec![
        meta("in_channels", c.in_channels as f64),
        meta("num_classes", c.num_classes as f64),
        meta("base_channels", c.base_channels as f64),
        meta("depth", c.depth as f64),
        meta("dropout_rate", c.dropout_rate),
        meta("use_attention", if c.use_attention { 1.0 } else { 0.0 }),
        meta("attention_reduction", c.attention_reduction as f64),
        meta("spatial_attention_kernel", c.spatial_attention_kernel as f64),
        meta("elu_alpha", c.elu_alpha),
        (
            "meta.init_seed".into(),
            Tensor::from_parts(vec![2], vec![(c.init_seed >> 32) as f64, (c.init_seed & 0xffff_ffff) as f64]),
        ),
    ]
}

fn lookup<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor {name:?}")))
}

fn scalar(tensors: &[(String, Tensor)], name: &str) -> Result<f64> {
    lookup(tensors, name)?
        .item()
        .ok_or_else(|| Error::invalid("checkpoint", format!("{name} is not a scalar")))
}

fn count(tensors: &[(String, Tensor)], name: &str) -> Result<usize> {
    let v = scalar(tensors, name)?;
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::invalid("checkpoint", format!("{name} = {v} is not a count")));
    }
    Ok(v as usize)
}

fn config_from(tensors: &[(String, Tensor)]) -> Result<ModelConfig> {
    let seed = lookup(tensors, "meta.init_seed")?;
    let (hi, lo) = match seed.data() {
        [hi, lo] => (*hi as u64, *lo as u64),
        _ => return Err(Error::invalid("checkpoint", "meta.init_seed must hold two halves")),
    };
    Ok(ModelConfig {
        in_channels: count(tensors, "meta.in_channels")?,
        num_classes: count(tensors, "meta.num_classes")?,
        base_channels: count(tensors, "meta.base_channels")?,
        depth: count(tensors, "meta.depth")?,
        dropout_rate: scalar(tensors, "meta.dropout_rate")?,
        use_attention: scalar(tensors, "meta.use_attention")? != 0.0,
        attention_reduction: count(tensors, "meta.attention_reduction")?,
        spatial_attention_kernel: count(tensors, "meta.spatial_attention_kernel")?,
        elu_alpha: scalar(tensors, "meta.elu_alpha")?,
        init_seed: (hi << 32) | lo,
    })
}

/// Optimizer, schedule and progress saved alongside the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    pub schedule: PlateauSchedule,
    /// Epochs completed.
    pub epoch: u64,
}

impl TrainState {
    fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let s = |k: &str, v: f64| (k.to_string(), Tensor::scalar(v));
        let a = &self.adam;
        let mut out = vec![
            s("adam.step", a.step as f64),
            s("adam.lr", a.config.lr),
            s("adam.beta1", a.config.beta1),
            s("adam.beta2", a.config.beta2),
            s("adam.eps", a.config.eps),
        ];
        for (i, name) in a.names.iter().enumerate() {
            out.push((format!("adam.m.{name}"), a.m[i].clone()));
            out.push((format!("adam.v.{name}"), a.v[i].clone()));
        }
        let p = &self.schedule;
        out.extend([
            s("schedule.lr", p.lr),
            s("schedule.best", p.best),
            s("schedule.stale", f64::from(p.stale)),
            s("schedule.patience", f64::from(p.patience)),
            s("schedule.factor", p.factor),
            s("schedule.min_lr", p.min_lr),
            s("train.epoch", self.epoch as f64),
        ]);
        out
    }

    fn from_tensors(t: &[(String, Tensor)], model: &Model) -> Result<Self> {
        let config = AdamConfig {
            lr: scalar(t, "adam.lr")?,
            beta1: scalar(t, "adam.beta1")?,
            beta2: scalar(t, "adam.beta2")?,
            eps: scalar(t, "adam.eps")?,
        };
        let mut adam = Adam::new(config, model.parameters().iter().map(|p| (p.name.as_str(), p.value.shape())));
        adam.step = count(t, "adam.step")? as u64;
        for i in 0..adam.names.len() {
            for (kind, buf) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let name = format!("adam.{kind}.{}", adam.names[i]);
                let src = lookup(t, &name)?;
                if src.shape() != buf.shape() {
                    return Err(Error::shape("checkpoint", format!("{name}: expected {:?}, found {:?}", buf.shape(), src.shape())));
                }
                *buf = src.clone();
            }
        }
        let schedule = PlateauSchedule {
            lr: scalar(t, "schedule.lr")?,
            best: scalar(t, "schedule.best")?,
            stale: count(t, "schedule.stale")? as u32,
            patience: count(t, "schedule.patience")? as u32,
            factor: scalar(t, "schedule.factor")?,
            min_lr: scalar(t, "schedule.min_lr")?,
        };
        Ok(Self { adam, schedule, epoch: count(t, "train.epoch")? as u64 })
    }
}

pub fn model_checkpoint(model: &Model, state: Option<&TrainState>) -> Checkpoint {
    let mut tensors = config_tensors(model.config());
    tensors.extend(model.state_tensors());
    Checkpoint { tensors, optimizer: state.map(TrainState::to_tensors) }
}

/// Rebuilds the model (and training state, if stored) from a decoded checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<(Model, Option<TrainState>)> {
    let config = config_from(&ckpt.tensors)?;
    let mut model = Model::new(config)?;
    let state: Vec<(String, Tensor)> = ckpt.tensors.iter().filter(|(n, _)| !n.starts_with("meta.")).cloned().collect();
    model.load_state_tensors(&state)?;
    let train = ckpt.optimizer.as_ref().map(|t| TrainState::from_tensors(t, &model)).transpose()?;
    Ok((model, train))
}

pub fn save(path: impl AsRef<Path>, model: &Model, state: Option<&TrainState>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(&model_checkpoint(model, state), Dtype::F64)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, Option<TrainState>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(&decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                ("a".into(), Tensor::new(&[2, 1], vec![1.5, -0.0]).unwrap()),
                ("b".into(), Tensor::scalar(f64::INFINITY)),
            ],
            optimizer: None,
        }
    }

    #[test]
    fn layout() {
        let bytes = encode(&tiny(), Dtype::F64).unwrap();
        assert_eq!(&bytes[..4], b"HVNC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes[15], 1);
        assert_eq!(bytes[16], 2);
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[25..33], &1.5f64.to_le_bytes());
        let n = bytes.len();
        assert_eq!(&bytes[n - 4..], &crc32fast::hash(&bytes[..n - 4]).to_le_bytes());
    }

    #[test]
    fn roundtrip_with_optimizer_block() {
        let mut c = tiny();
        c.optimizer = Some(vec![("m".into(), Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap())]);
        let bytes = encode(&c, Dtype::F64).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.tensors.len(), 2);
        assert!(back.tensors.iter().zip(&c.tensors).all(|(a, b)| a.0 == b.0 && a.1.bit_eq(&b.1)));
        assert_eq!(back.optimizer.unwrap()[0].1.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(decode(&bytes[..]).map(|d| encode(&d, Dtype::F64).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn f32_storage() {
        let bytes = encode(&tiny(), Dtype::F32).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.tensors[0].1.data(), &[1.5, -0.0]);
    }

    #[test]
    fn rejections() {
        let bytes = encode(&tiny(), Dtype::F64).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = bytes.clone();
        bad[26] ^= 0x10;
        assert!(matches!(decode(&bad), Err(Error::Checksum { .. })));
        let err = decode(&bytes[..bytes.len() - 9]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        let dup = Checkpoint { tensors: vec![("x".into(), Tensor::scalar(1.0)), ("x".into(), Tensor::scalar(2.0))], optimizer: None };
        assert!(encode(&dup, Dtype::F64).is_err());
    }

    #[test]
    fn model_and_state_roundtrip() {
        let cfg = ModelConfig { base_channels: 4, init_seed: u64::MAX - 12345, ..Default::default() };
        let model = Model::new(cfg).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), model.parameters().iter().map(|p| (p.name.as_str(), p.value.shape())));
        adam.step = 7;
        adam.m[3].data_mut()[0] = 0.25;
        let state = TrainState { adam, schedule: PlateauSchedule::new(1e-3, 10, 0.1, 1e-7), epoch: 4 };
        let ckpt = model_checkpoint(&model, Some(&state));
        let (m2, s2) = restore(&decode(&encode(&ckpt, Dtype::F64).unwrap()).unwrap()).unwrap();
        assert_eq!(m2, model);
        assert_eq!(s2.unwrap(), state);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig { base_channels: 4, ..Default::default() }).unwrap();
        let (a, b) = (dir.path().join("a.hvnc"), dir.path().join("b.hvnc"));
        save(&a, &model, None).unwrap();
        let (loaded, state) = load(&a).unwrap();
        assert!(state.is_none());
        save(&b, &loaded, None).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    proptest! {
        #[test]
        fn any_payload_roundtrips(values in proptest::collection::vec(any::<f64>(), 1..40)) {
            let n = values.len();
            let c = Checkpoint { tensors: vec![("t".into(), Tensor::new(&[n], values).unwrap())], optimizer: None };
            let bytes = encode(&c, Dtype::F64).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert!(back.tensors[0].1.bit_eq(&c.tensors[0].1));
        }

        #[test]
        fn any_flipped_payload_byte_is_rejected(idx in 0usize..16, bit in 0u8..8) {
            let c = Checkpoint { tensors: vec![("t".into(), Tensor::new(&[2], vec![0.1, 0.2]).unwrap())], optimizer: None };
            let mut bytes = encode(&c, Dtype::F64).unwrap();
            let payload_start = 4 + 4 + 4 + 2 + 1 + 1 + 1 + 4;
            bytes[payload_start + idx] ^= 1 << bit;
            let rejected = matches!(decode(&bytes), Err(Error::Checksum { .. }));
            prop_assert!(rejected);
        }
    }
}
