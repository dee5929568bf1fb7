//! Byte layouts of the synthetic payloads exchanged between stub cartridges.
//! All integers and floats are big-endian.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed {0} payload")]
pub struct PayloadError(pub &'static str);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    /// Identity tag carried by the synthetic detector.
    pub subject: u32,
    pub quality: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub subject: u32,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub probe_subject: u32,
    pub matched: Option<String>,
    pub score: f64,
}

struct Cursor<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], PayloadError> {
        if self.buf.len() < N {
            return Err(PayloadError(self.what));
        }
        let (head, rest) = self.buf.split_at(N);
        self.buf = rest;
        Ok(head.try_into().unwrap())
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        if self.buf.len() < n {
            return Err(PayloadError(self.what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_be_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_be_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32, PayloadError> {
        Ok(f32::from_be_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, PayloadError> {
        Ok(f64::from_be_bytes(self.take()?))
    }

    fn finish(self) -> Result<(), PayloadError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(PayloadError(self.what))
        }
    }
}

pub fn encode_boxes(boxes: &[BoundingBox]) -> Vec<u8> {
    let mut out = (boxes.len() as u16).to_be_bytes().to_vec();
    for b in boxes {
        for v in [b.x, b.y, b.w, b.h] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&b.subject.to_be_bytes());
        match b.quality {
            Some(q) => {
                out.push(1);
                out.extend_from_slice(&q.to_be_bytes());
            }
            None => out.push(0),
        }
    }
    out
}

pub fn decode_boxes(bytes: &[u8]) -> Result<Vec<BoundingBox>, PayloadError> {
    let mut c = Cursor { buf: bytes, what: "bounding box" };
    let n = c.u16()?;
    let mut boxes = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let (x, y, w, h) = (c.f32()?, c.f32()?, c.f32()?, c.f32()?);
        let subject = c.u32()?;
        let quality = match c.take::<1>()?[0] {
            0 => None,
            1 => Some(c.f32()?),
            _ => return Err(PayloadError("bounding box")),
        };
        boxes.push(BoundingBox { x, y, w, h, subject, quality });
    }
    c.finish()?;
    Ok(boxes)
}

pub fn encode_embeddings(embeddings: &[Embedding]) -> Vec<u8> {
    let mut out = (embeddings.len() as u16).to_be_bytes().to_vec();
    for e in embeddings {
        out.extend_from_slice(&e.subject.to_be_bytes());
        out.extend_from_slice(&(e.values.len() as u16).to_be_bytes());
        for v in &e.values {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<Embedding>, PayloadError> {
    let mut c = Cursor { buf: bytes, what: "embedding" };
    let n = c.u16()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let subject = c.u32()?;
        let d = c.u16()? as usize;
        if c.buf.len() < d * 8 {
            return Err(PayloadError("embedding"));
        }
        let values = (0..d).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
        out.push(Embedding { subject, values });
    }
    c.finish()?;
    Ok(out)
}

pub fn encode_matches(records: &[MatchRecord]) -> Vec<u8> {
    let mut out = (records.len() as u16).to_be_bytes().to_vec();
    for r in records {
        out.extend_from_slice(&r.probe_subject.to_be_bytes());
        let id = r.matched.as_deref().unwrap_or("");
        out.extend_from_slice(&(id.len() as u16).to_be_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&r.score.to_be_bytes());
    }
    out
}

pub fn decode_matches(bytes: &[u8]) -> Result<Vec<MatchRecord>, PayloadError> {
    let mut c = Cursor { buf: bytes, what: "match result" };
    let n = c.u16()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let probe_subject = c.u32()?;
        let len = c.u16()? as usize;
        let id = std::str::from_utf8(c.bytes(len)?).map_err(|_| PayloadError("match result"))?;
        let score = c.f64()?;
        out.push(MatchRecord {
            probe_subject,
            matched: (!id.is_empty()).then(|| id.to_string()),
            score,
        });
    }
    c.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_round_trip() {
        let boxes = vec![
            BoundingBox { x: 1.0, y: 2.0, w: 3.0, h: 4.0, subject: 9, quality: None },
            BoundingBox { x: 0.5, y: 0.0, w: 10.0, h: 1.0, subject: 0, quality: Some(0.25) },
        ];
        assert_eq!(decode_boxes(&encode_boxes(&boxes)).unwrap(), boxes);
        assert!(decode_boxes(&[0, 1, 0]).is_err());
    }

    #[test]
    fn embeddings_and_matches_round_trip() {
        let e = vec![Embedding { subject: 3, values: vec![0.5, -0.5, 0.25] }];
        assert_eq!(decode_embeddings(&encode_embeddings(&e)).unwrap(), e);
        let m = vec![
            MatchRecord { probe_subject: 3, matched: Some("subject-0003".into()), score: 0.99 },
            MatchRecord { probe_subject: 4, matched: None, score: 0.1 },
        ];
        assert_eq!(decode_matches(&encode_matches(&m)).unwrap(), m);
        assert!(decode_matches(&[0, 1]).is_err());
    }
}
