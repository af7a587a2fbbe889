//! Point-cloud sequences and the binary sequence file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PCSQ" | version u16 | T u32 | N u32 | C u32 | label i32
//! T × ( count u32 | count × (3 + C) × f32 )
//! ```
//!
//! `N` is the nominal per-frame count written by the producer; frames carry
//! their own counts and may differ from it. A label of `-1` means unlabeled.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloudFrame};

pub const SEQUENCE_MAGIC: &[u8; 4] = b"PCSQ";
pub const SEQUENCE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSequence {
    frames: Vec<PointCloudFrame>,
}

impl PointCloudSequence {
    /// All frames must share a channel count; at least one frame is needed.
    pub fn new(frames: Vec<PointCloudFrame>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::contract("a sequence needs at least one frame"));
        };
        let c = first.channels();
        if let Some(t) = frames.iter().position(|f| f.channels() != c) {
            return Err(Error::contract(format!(
                "frame {t} has {} feature channels, expected {c}",
                frames[t].channels()
            )));
        }
        Ok(PointCloudSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[PointCloudFrame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &PointCloudFrame {
        &self.frames[t]
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels()
    }

    /// Largest per-frame point count.
    pub fn max_points(&self) -> usize {
        self.frames.iter().map(|f| f.len()).max().unwrap_or(0)
    }

    /// Same sequence with every frame's points reordered by its own
    /// permutation.
    pub fn permuted(&self, perms: &[Vec<usize>]) -> Self {
        PointCloudSequence {
            frames: self.frames.iter().zip(perms).map(|(f, p)| f.permuted(p)).collect(),
        }
    }
}

/// A sequence paired with its class label (if any).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub sequence: PointCloudSequence,
    pub label: Option<usize>,
}

pub fn encode_sequence(seq: &PointCloudSequence, label: Option<usize>) -> Result<Vec<u8>> {
    let c = seq.channels();
    let label = match label {
        Some(l) => i32::try_from(l).map_err(|_| Error::contract(format!("label {l} does not fit in i32")))?,
        None => -1,
    };
    let mut out = Vec::new();
    out.extend_from_slice(SEQUENCE_MAGIC);
    out.extend_from_slice(&SEQUENCE_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.max_points() as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&label.to_le_bytes());
    for f in seq.frames() {
        out.extend_from_slice(&(f.len() as u32).to_le_bytes());
        for i in 0..f.len() {
            for v in f.coords()[i] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            for &v in f.feature_row(i) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_sequence(bytes: &[u8]) -> Result<LabeledSequence> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != SEQUENCE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let at = r.pos as u64;
    let version = r.u16("version")?;
    if version != SEQUENCE_VERSION {
        return Err(Error::Format {
            offset: at,
            detail: format!("unsupported version {version}"),
        });
    }
    let at = r.pos as u64;
    let t = r.u32("frame count")? as usize;
    if t == 0 {
        return Err(Error::Format {
            offset: at,
            detail: "zero frames".into(),
        });
    }
    let _nominal = r.u32("point count")?;
    let c = r.u32("channel count")? as usize;
    let at = r.pos as u64;
    let label = r.i32("label")?;
    let label = match label {
        -1 => None,
        l if l >= 0 => Some(l as usize),
        l => {
            return Err(Error::Format {
                offset: at,
                detail: format!("negative label {l}"),
            })
        }
    };
    let mut frames = Vec::with_capacity(t.min(1 << 16));
    for ti in 0..t {
        let at = r.pos as u64;
        let n = r.u32("frame header")? as usize;
        if n == 0 {
            return Err(Error::Format {
                offset: at,
                detail: format!("frame {ti} has no points"),
            });
        }
        let need = n.checked_mul(3 + c).and_then(|v| v.checked_mul(4));
        if need.is_none_or(|need| need > bytes.len() - r.pos) {
            return Err(Error::Format {
                offset: r.pos as u64,
                detail: format!("truncated inside frame {ti}"),
            });
        }
        let mut coords: Vec<Point3> = Vec::with_capacity(n);
        let mut feats = Vec::with_capacity(n * c);
        for _ in 0..n {
            let at = r.pos as u64;
            let mut p = [0.0; 3];
            for v in &mut p {
                *v = r.f32("coordinate")? as f64;
            }
            for _ in 0..c {
                feats.push(r.f32("feature")? as f64);
            }
            if p.iter().chain(&feats[feats.len() - c..]).any(|v| !v.is_finite()) {
                return Err(Error::Format {
                    offset: at,
                    detail: format!("non-finite value in frame {ti}"),
                });
            }
            coords.push(p);
        }
        let frame = PointCloudFrame::with_features(coords, (c > 0).then_some(feats), c).map_err(|e| Error::Format {
            offset: at,
            detail: e.to_string(),
        })?;
        frames.push(frame);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(LabeledSequence {
        sequence: PointCloudSequence::new(frames)?,
        label,
    })
}

pub fn load_sequence(path: &Path) -> Result<LabeledSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_sequence(path: &Path, seq: &PointCloudSequence, label: Option<usize>) -> Result<()> {
    write_atomic(path, &encode_sequence(seq, label)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointCloudSequence {
        let f0 = PointCloudFrame::with_features(vec![[0.0, 1.0, 2.0], [0.5, -1.0, 3.25]], Some(vec![1.0, 2.0]), 1).unwrap();
        let f1 = PointCloudFrame::with_features(vec![[4.0, 4.0, 4.0]], Some(vec![-3.0]), 1).unwrap();
        PointCloudSequence::new(vec![f0, f1]).unwrap()
    }

    #[test]
    fn roundtrip_exact_for_f32_values() {
        let s = sample();
        let bytes = encode_sequence(&s, Some(3)).unwrap();
        let back = decode_sequence(&bytes).unwrap();
        assert_eq!(back.label, Some(3));
        assert_eq!(back.sequence, s);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_sequence(&sample(), None).unwrap();
        for cut in [0, 3, 5, 21, 25, bytes.len() - 1] {
            match decode_sequence(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_sequence(&sample(), None).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_sequence(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode_sequence(&sample(), None).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_sequence(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn mixed_channels_rejected() {
        let a = PointCloudFrame::new(vec![[0.0; 3]]).unwrap();
        let b = PointCloudFrame::with_features(vec![[0.0; 3]], Some(vec![1.0]), 1).unwrap();
        assert!(matches!(PointCloudSequence::new(vec![a, b]), Err(Error::Contract(_))));
        assert!(PointCloudSequence::new(vec![]).is_err());
    }
}
