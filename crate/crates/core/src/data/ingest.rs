//! Converter from whitespace-separated per-frame point lists.
//!
//! Each non-empty line that does not start with `#` holds
//! `frame x y z [f1 … fC]`. Frame numbers must be non-decreasing integers
//! starting at 0 without gaps; every line must have the same column count.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloudFrame;

use super::sequence::PointCloudSequence;

pub fn parse_point_lists(text: &str) -> Result<PointCloudSequence> {
    let mut frames: Vec<(Vec<[f64; 3]>, Vec<f64>)> = Vec::new();
    let mut columns = None;
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len() as u64;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let bad = |detail: String| Error::Format { offset: here, detail };
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(bad(format!("expected at least 4 columns, found {}", fields.len())));
        }
        match columns {
            None => columns = Some(fields.len()),
            Some(c) if c != fields.len() => return Err(bad(format!("expected {c} columns, found {}", fields.len()))),
            _ => {}
        }
        let t: usize = fields[0].parse().map_err(|_| bad(format!("bad frame number {:?}", fields[0])))?;
        let mut vals = Vec::with_capacity(fields.len() - 1);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| bad(format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value {f:?}")));
            }
            vals.push(v);
        }
        if t + 1 == frames.len() + 1 {
            frames.push((Vec::new(), Vec::new()));
        } else if t + 1 != frames.len() {
            return Err(bad(format!("frame {t} out of order")));
        }
        let (coords, feats) = frames.last_mut().expect("pushed above");
        coords.push([vals[0], vals[1], vals[2]]);
        feats.extend_from_slice(&vals[3..]);
    }
    let channels = columns.map(|c| c - 4).unwrap_or(0);
    let frames = frames
        .into_iter()
        .map(|(coords, feats)| PointCloudFrame::with_features(coords, (channels > 0).then_some(feats), channels))
        .collect::<Result<Vec<_>>>()?;
    PointCloudSequence::new(frames)
}

pub fn ingest_point_lists(path: &Path) -> Result<PointCloudSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_point_lists(&text)
}
