//! CTS1 on-disk collection format: gzip-compressed JSON Lines. The first
//! line is a header carrying the format version, dataset kind, frequency,
//! record count, and a CRC-32 over the record payload; each following line is
//! one record with base64-encoded little-endian f32 arrays.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chrono::{DateTime, Utc};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::Crc32;

use super::{DatasetKind, TimeSeriesRecord};

const FORMAT_VERSION: &str = "CTS1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    kind: DatasetKind,
    freq_seconds: u32,
    count: usize,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredRecord {
    series_id: String,
    top_level_attr: String,
    start: DateTime<Utc>,
    freq_seconds: u32,
    dims: [usize; 2],
    pd_dims: [usize; 2],
    targets: Vec<String>,
    past_dynamic: Vec<String>,
    static_real: String,
    /// Missing positions per target row, run-length friendly enough as plain
    /// indices at desk scale.
    missing: Vec<Vec<u32>>,
}

fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f32(s: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Store(format!("invalid base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Store(format!(
            "payload length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn to_stored(rec: &TimeSeriesRecord) -> StoredRecord {
    let t = rec.len();
    StoredRecord {
        series_id: rec.series_id.clone(),
        top_level_attr: rec.top_level_attr.clone(),
        start: rec.start,
        freq_seconds: rec.freq_seconds,
        dims: [rec.targets.len(), t],
        pd_dims: [rec.past_dynamic.len(), t],
        targets: rec.targets.iter().map(|r| encode_f32(r)).collect(),
        past_dynamic: rec.past_dynamic.iter().map(|r| encode_f32(r)).collect(),
        static_real: encode_f32(&rec.static_real),
        missing: rec
            .missing_mask
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(i, _)| i as u32)
                    .collect()
            })
            .collect(),
    }
}

fn from_stored(s: StoredRecord) -> Result<TimeSeriesRecord> {
    let targets: Vec<Vec<f32>> = s.targets.iter().map(|r| decode_f32(r)).collect::<Result<_>>()?;
    let past_dynamic: Vec<Vec<f32>> =
        s.past_dynamic.iter().map(|r| decode_f32(r)).collect::<Result<_>>()?;
    let [d_y, t] = s.dims;
    if targets.len() != d_y || targets.iter().any(|r| r.len() != t) {
        return Err(Error::Store(format!(
            "record '{}' target payload does not match declared dims {:?}",
            s.series_id, s.dims
        )));
    }
    let mut missing_mask = vec![vec![false; t]; d_y];
    for (row, idxs) in missing_mask.iter_mut().zip(&s.missing) {
        for &i in idxs {
            let i = i as usize;
            if i >= t {
                return Err(Error::Store(format!(
                    "record '{}' missing-index {i} out of range",
                    s.series_id
                )));
            }
            row[i] = true;
        }
    }
    Ok(TimeSeriesRecord {
        series_id: s.series_id,
        top_level_attr: s.top_level_attr,
        start: s.start,
        freq_seconds: s.freq_seconds,
        targets,
        past_dynamic,
        static_real: decode_f32(&s.static_real)?,
        missing_mask,
    })
}

pub fn export_store(
    series: &[TimeSeriesRecord],
    kind: DatasetKind,
    path: &Path,
) -> Result<()> {
    // Serialize all record lines first so the header checksum can cover them.
    let mut payload = Vec::new();
    for rec in series {
        serde_json::to_writer(&mut payload, &to_stored(rec))?;
        payload.push(b'\n');
    }
    let mut crc = Crc32::new();
    crc.update(&payload);
    let header = Header {
        format: FORMAT_VERSION.into(),
        kind,
        freq_seconds: series.first().map_or(super::FREQ_SECONDS as u32, |r| r.freq_seconds),
        count: series.len(),
        crc32: crc.finalize(),
    };
    let file = File::create(path)?;
    let mut w = GzEncoder::new(BufWriter::new(file), Compression::default());
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    w.write_all(&payload)?;
    w.finish()?;
    Ok(())
}

pub fn import_store(path: &Path) -> Result<(Vec<TimeSeriesRecord>, DatasetKind)> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(GzDecoder::new(BufReader::new(file)));
    let mut header_line = String::new();
    reader
        .read_line(&mut header_line)
        .map_err(|e| Error::Store(format!("unreadable store header: {e}")))?;
    let header: Header = serde_json::from_str(header_line.trim_end())
        .map_err(|e| Error::Store(format!("malformed store header: {e}")))?;
    if header.format != FORMAT_VERSION {
        return Err(Error::Store(format!(
            "unsupported store format '{}', expected '{FORMAT_VERSION}'",
            header.format
        )));
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::Store(format!("truncated store payload: {e}")))?;
    let mut crc = Crc32::new();
    crc.update(&payload);
    if crc.finalize() != header.crc32 {
        return Err(Error::Store(format!(
            "checksum mismatch: header {:#010x}, payload {:#010x}",
            header.crc32,
            crc.finalize()
        )));
    }
    let mut out = Vec::with_capacity(header.count);
    for line in payload.split(|&b| b == b'\n') {
        if line.is_empty() {
            continue;
        }
        let stored: StoredRecord = serde_json::from_slice(line)
            .map_err(|e| Error::Store(format!("malformed record line: {e}")))?;
        out.push(from_stored(stored)?);
    }
    if out.len() != header.count {
        return Err(Error::Store(format!(
            "record count mismatch: header says {}, found {}",
            header.count,
            out.len()
        )));
    }
    Ok((out, header.kind))
}
