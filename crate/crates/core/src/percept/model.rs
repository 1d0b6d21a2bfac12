//! Per-family detector weights and their binary file format.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "PHCPWTS\0"
//! version  u32
//! family   u16 length + UTF-8
//! channels u32
//! count    u32
//! count × { name: u16 length + UTF-8, rank: u8, dims: u32 × rank, data: f64 × product(dims) }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{EncoderFamily, EncoderWeights, FusionWeights, HeadWeights};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PHCPWTS\0";
const NAMES: [&str; 10] = [
    "encoder.conv1.w",
    "encoder.conv1.b",
    "encoder.conv2.w",
    "encoder.conv2.b",
    "fusion.score.w",
    "fusion.score.b",
    "head.obj.w",
    "head.obj.b",
    "head.reg.w",
    "head.reg.b",
];

/// A full single-family detector: encoder, fusion and head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub family: String,
    pub encoder: EncoderWeights,
    pub fusion: FusionWeights,
    pub head: HeadWeights,
}

impl ModelWeights {
    pub fn init(family: &EncoderFamily, seed: u64) -> Self {
        Self {
            family: family.id.clone(),
            encoder: family.init_weights(seed),
            fusion: FusionWeights::init(family.channels, seed),
            head: HeadWeights::init(family.channels, seed),
        }
    }

    pub fn channels(&self) -> usize {
        self.head.channels()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.encoder.tensors().into();
        out.extend(self.fusion.tensors());
        out.extend(self.head.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.encoder.tensors_mut().into();
        out.extend(self.fusion.tensors_mut());
        out.extend(self.head.tensors_mut());
        out
    }

    /// Checks every tensor against the shapes `family` implies.
    pub fn check_family(&self, family: &EncoderFamily) -> Result<()> {
        if self.family != family.id {
            return Err(Error::format("weights", format!("family {} (expected {})", self.family, family.id)));
        }
        let reference = ModelWeights::init(family, 0);
        for ((name, t), r) in NAMES.iter().zip(self.tensors()).zip(reference.tensors()) {
            if t.shape() != r.shape() {
                return Err(Error::format(
                    "weights",
                    format!("{name} has shape {:?}, family {} needs {:?}", t.shape(), family.id, r.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&WEIGHTS_FORMAT_VERSION.to_le_bytes())?;
        write_str(w, &self.family)?;
        w.write_all(&(self.channels() as u32).to_le_bytes())?;
        w.write_all(&(NAMES.len() as u32).to_le_bytes())?;
        for (name, t) in NAMES.iter().zip(self.tensors()) {
            write_str(w, name)?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("weights", "bad magic"));
        }
        let version = read_u32(r)?;
        if version != WEIGHTS_FORMAT_VERSION {
            return Err(Error::format(
                "weights",
                format!("format version {version} (expected {WEIGHTS_FORMAT_VERSION})"),
            ));
        }
        let family = read_str(r)?;
        let channels = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        if count != NAMES.len() {
            return Err(Error::format("weights", format!("{count} tensors (expected {})", NAMES.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for expected in NAMES {
            let name = read_str(r)?;
            if name != expected {
                return Err(Error::format("weights", format!("tensor {name} (expected {expected})")));
            }
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let shape = (0..rank[0]).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n > 1 << 28 {
                return Err(Error::format("weights", format!("{name} is implausibly large")));
            }
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(&shape, data)?);
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let out = ModelWeights {
            family,
            encoder: EncoderWeights {
                conv1_w: next(),
                conv1_b: next(),
                conv2_w: next(),
                conv2_b: next(),
            },
            fusion: FusionWeights {
                score_w: next(),
                score_b: next(),
            },
            head: HeadWeights {
                obj_w: next(),
                obj_b: next(),
                reg_w: next(),
                reg_b: next(),
            },
        };
        if out.channels() != channels {
            return Err(Error::format(
                "weights",
                format!("header says {channels} channels, head has {}", out.channels()),
            ));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    /// Loads and validates against `family`.
    pub fn load(path: &Path, family: &EncoderFamily) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingWeights(path.display().to_string()));
        }
        let bytes = std::fs::read(path)?;
        let w = Self::from_bytes(&bytes)?;
        w.check_family(family)?;
        Ok(w)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::invalid("string too long for weights header"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    let mut s = vec![0u8; u16::from_le_bytes(b) as usize];
    r.read_exact(&mut s)?;
    String::from_utf8(s).map_err(|_| Error::format("weights", "non-UTF-8 string"))
}
