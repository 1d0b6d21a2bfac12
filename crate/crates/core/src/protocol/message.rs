//! Wire envelope and binary codec. Every message is serialized even
//! in-process, so `payload_bytes` is the exact encoded length and the ego only
//! ever computes on what it decoded.
//!
//! Layout (little endian): `version u16, sender u32, frame u32, kind u8`, then
//! the body. Features and boxes travel as `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::percept::{CoordFrame, Detection, DetectionSet, FeatureMap, ObjectBox};
use crate::world::{AgentId, GridMeta, Scan};

pub const MESSAGE_VERSION: u16 = 1;
/// Bytes of the envelope header.
pub const HEADER_BYTES: usize = 2 + 4 + 4 + 1;
/// Encoded size of an empty detection set: coordinate tag plus count.
pub const EMPTY_DETECTIONS_BYTES: usize = 1 + 4;

#[derive(Clone, Debug, PartialEq)]
pub enum MessageKind {
    StageOne { feature: FeatureMap, detections: DetectionSet },
    StageTwo { feature: FeatureMap },
    Late { detections: DetectionSet },
    Early { scan: Scan },
}

impl MessageKind {
    pub fn label(&self) -> &'static str {
        match self {
            MessageKind::StageOne { .. } => "stage1",
            MessageKind::StageTwo { .. } => "stage2",
            MessageKind::Late { .. } => "late",
            MessageKind::Early { .. } => "early",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            MessageKind::StageOne { .. } => 1,
            MessageKind::StageTwo { .. } => 2,
            MessageKind::Late { .. } => 3,
            MessageKind::Early { .. } => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub version: u16,
    pub sender: AgentId,
    pub frame: usize,
    pub kind: MessageKind,
    pub payload_bytes: usize,
}

/// Index entry describing one message without its body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageSummary {
    pub sender: AgentId,
    pub frame: usize,
    pub kind: String,
    pub payload_bytes: usize,
}

impl Message {
    /// Encodes `kind` and returns the message as the receiver sees it.
    pub fn seal(sender: AgentId, frame: usize, kind: MessageKind) -> Result<(Message, Vec<u8>)> {
        let bytes = encode_message(sender, frame, &kind)?;
        let msg = decode_message(&bytes)?;
        Ok((msg, bytes))
    }

    pub fn summary(&self) -> MessageSummary {
        MessageSummary {
            sender: self.sender,
            frame: self.frame,
            kind: self.kind.label().to_string(),
            payload_bytes: self.payload_bytes,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::invalid("value does not fit the wire format"))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len()).map_err(|_| Error::invalid("string too long"))?;
        self.u16(n);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn feature(&mut self, f: &FeatureMap) -> Result<()> {
        self.str(&f.family)?;
        let (c, h, w) = f.values.dims3()?;
        self.u32(c)?;
        self.u32(h)?;
        self.u32(w)?;
        self.f64(f.meta.cell_m);
        self.f64(f.meta.origin_x);
        self.f64(f.meta.origin_y);
        for &v in f.values.data() {
            self.f32(v);
        }
        Ok(())
    }

    fn detections(&mut self, d: &DetectionSet) -> Result<()> {
        match d.coords {
            CoordFrame::World => self.u8(0),
            CoordFrame::Sensor { agent, x, y, yaw } => {
                self.u8(1);
                self.u32(agent as usize)?;
                self.f64(x);
                self.f64(y);
                self.f64(yaw);
            }
        }
        self.u32(d.detections.len())?;
        for det in &d.detections {
            let b = det.bbox;
            for v in [b.center_x, b.center_y, b.length, b.width, b.yaw, det.confidence] {
                self.f32(v);
            }
        }
        Ok(())
    }

    fn scan(&mut self, s: &Scan) -> Result<()> {
        self.f64(s.origin_x);
        self.f64(s.origin_y);
        self.f64(s.start_angle);
        self.f64(s.angle_step);
        self.u32(s.rays)?;
        self.u32(s.beams)?;
        for p in &s.points {
            self.0.extend_from_slice(&p[0].to_le_bytes());
            self.0.extend_from_slice(&p[1].to_le_bytes());
        }
        Ok(())
    }
}

pub fn encode_message(sender: AgentId, frame: usize, kind: &MessageKind) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.u16(MESSAGE_VERSION);
    w.u32(sender as usize)?;
    w.u32(frame)?;
    w.u8(kind.tag());
    match kind {
        MessageKind::StageOne { feature, detections } => {
            w.feature(feature)?;
            w.detections(detections)?;
        }
        MessageKind::StageTwo { feature } => w.feature(feature)?,
        MessageKind::Late { detections } => w.detections(detections)?,
        MessageKind::Early { scan } => w.scan(scan)?,
    }
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("message", "truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("message", "non-UTF-8 string"))
    }

    fn feature(&mut self) -> Result<FeatureMap> {
        let family = self.str()?;
        let (c, h, w) = (self.u32()?, self.u32()?, self.u32()?);
        let (cell_m, origin_x, origin_y) = (self.f64()?, self.f64()?, self.f64()?);
        let n = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .filter(|&n| n * 4 <= self.buf.len())
            .ok_or_else(|| Error::format("message", "feature larger than message"))?;
        let data = (0..n).map(|_| self.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        Ok(FeatureMap {
            values: Tensor::new(&[c, h, w], data)?,
            family,
            meta: GridMeta {
                rows: h,
                cols: w,
                cell_m,
                origin_x,
                origin_y,
            },
        })
    }

    fn detections(&mut self, frame: usize) -> Result<DetectionSet> {
        let coords = match self.u8()? {
            0 => CoordFrame::World,
            1 => CoordFrame::Sensor {
                agent: self.u32()? as AgentId,
                x: self.f64()?,
                y: self.f64()?,
                yaw: self.f64()?,
            },
            t => return Err(Error::format("message", format!("coordinate tag {t}"))),
        };
        let n = self.u32()?;
        if n * 24 > self.buf.len() {
            return Err(Error::format("message", "detection count larger than message"));
        }
        let mut detections = Vec::with_capacity(n);
        for _ in 0..n {
            let v: Vec<f64> = (0..6).map(|_| self.f32().map(f64::from)).collect::<Result<_>>()?;
            detections.push(Detection {
                bbox: ObjectBox::new(v[0], v[1], v[2], v[3], v[4]),
                confidence: v[5],
            });
        }
        Ok(DetectionSet {
            frame,
            coords,
            detections,
        })
    }

    fn scan(&mut self) -> Result<Scan> {
        let (origin_x, origin_y, start_angle, angle_step) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let (rays, beams) = (self.u32()?, self.u32()?);
        let n = rays
            .checked_mul(beams)
            .filter(|&n| n * 8 <= self.buf.len())
            .ok_or_else(|| Error::format("message", "scan larger than message"))?;
        let points = (0..n).map(|_| Ok([self.f32()?, self.f32()?])).collect::<Result<Vec<_>>>()?;
        Ok(Scan {
            origin_x,
            origin_y,
            start_angle,
            angle_step,
            rays,
            beams,
            points,
        })
    }
}

pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let version = r.u16()?;
    if version != MESSAGE_VERSION {
        return Err(Error::format("message", format!("version {version} (expected {MESSAGE_VERSION})")));
    }
    let sender = r.u32()? as AgentId;
    let frame = r.u32()?;
    let kind = match r.u8()? {
        1 => MessageKind::StageOne {
            feature: r.feature()?,
            detections: r.detections(frame)?,
        },
        2 => MessageKind::StageTwo { feature: r.feature()? },
        3 => MessageKind::Late {
            detections: r.detections(frame)?,
        },
        4 => MessageKind::Early { scan: r.scan()? },
        t => return Err(Error::format("message", format!("kind tag {t}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::format("message", "trailing bytes"));
    }
    Ok(Message {
        version,
        sender,
        frame,
        kind,
        payload_bytes: bytes.len(),
    })
}
