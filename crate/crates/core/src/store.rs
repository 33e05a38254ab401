//! Detection embeddings and the HERDEMB1 container.
//!
//! Layout (little-endian):
//!
//! ```text
//! header  = "HERDEMB\x01" | u32 dim | u32 views | u32 n_identities (0 = unknown)
//!           | u32 reserved (0) | u64 num_records
//! record  = u64 frame_id | u32 detection_idx | i32 gt_label (-1 = unknown)
//!           | views * dim f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HERDEMB\x01";
pub const HEADER_LEN: usize = 32;
const RECORD_FIXED_LEN: usize = 16;
// Upper bound on speculative allocation while reading a header-declared count.
const MAX_PREALLOC_RECORDS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub frame_id: u64,
    pub detection_idx: u32,
    pub gt_label: Option<u32>,
    /// `views * dim` values, view-major.
    pub views: Vec<f32>,
}

impl DetectionRecord {
    pub fn view(&self, v: usize, dim: usize) -> &[f32] {
        &self.views[v * dim..(v + 1) * dim]
    }
}

/// Contiguous run of records belonging to one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSpan {
    pub frame_id: u64,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    views: usize,
    n_identities: Option<u32>,
    records: Vec<DetectionRecord>,
    frames: Vec<FrameSpan>,
}

impl EmbeddingDataset {
    /// Build a dataset, sorting records by `(frame_id, detection_idx)` and
    /// checking every structural invariant.
    pub fn new(
        dim: usize,
        views: usize,
        n_identities: Option<u32>,
        mut records: Vec<DetectionRecord>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invariant("embedding dimension must be >= 1".into()));
        }
        if views < 2 {
            return Err(Error::Invariant(format!(
                "need at least 2 views per detection, got {views}"
            )));
        }
        if n_identities == Some(0) {
            return Err(Error::Invariant("n_identities must be >= 1 when known".into()));
        }
        records.sort_by_key(|r| (r.frame_id, r.detection_idx));
        for pair in records.windows(2) {
            if pair[0].frame_id == pair[1].frame_id && pair[0].detection_idx == pair[1].detection_idx {
                return Err(Error::DuplicateRecord {
                    frame_id: pair[0].frame_id,
                    detection_idx: pair[0].detection_idx,
                });
            }
        }
        for r in &records {
            if r.views.len() != views * dim {
                return Err(Error::Invariant(format!(
                    "record ({}, {}) has {} values, expected {}",
                    r.frame_id,
                    r.detection_idx,
                    r.views.len(),
                    views * dim
                )));
            }
            if r.views.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite embedding in record ({}, {})",
                    r.frame_id, r.detection_idx
                )));
            }
            if let (Some(label), Some(n)) = (r.gt_label, n_identities) {
                if label >= n {
                    return Err(Error::Invariant(format!(
                        "label {label} out of range for {n} identities"
                    )));
                }
            }
        }
        let frames = index_frames(&records);
        if let Some(n) = n_identities {
            if let Some(span) = frames.iter().find(|s| s.len > n as usize) {
                return Err(Error::Invariant(format!(
                    "frame {} has {} detections but only {n} identities",
                    span.frame_id, span.len
                )));
            }
        }
        Ok(Self { dim, views, n_identities, records, frames })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn views_per_detection(&self) -> usize {
        self.views
    }

    pub fn n_identities(&self) -> Option<u32> {
        self.n_identities
    }

    pub fn records(&self) -> &[DetectionRecord] {
        &self.records
    }

    pub fn frames(&self) -> &[FrameSpan] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.gt_label.is_some())
    }

    pub fn labels(&self) -> Vec<Option<u32>> {
        self.records.iter().map(|r| r.gt_label).collect()
    }

    pub fn max_detections_per_frame(&self) -> usize {
        self.frames.iter().map(|s| s.len).max().unwrap_or(0)
    }

    /// Label-free view used by the self-supervised trainer.
    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled(self)
    }

    /// Same dataset with `n_identities` replaced, revalidated.
    pub fn with_identities(self, n_identities: Option<u32>) -> Result<Self> {
        Self::new(self.dim, self.views, n_identities, self.records)
    }

    /// Replace every ground-truth label.
    pub fn map_labels(&self, mut f: impl FnMut(usize, Option<u32>) -> Option<u32>) -> Result<Self> {
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| DetectionRecord { gt_label: f(i, r.gt_label), ..r.clone() })
            .collect();
        Self::new(self.dim, self.views, self.n_identities, records)
    }
}

fn index_frames(records: &[DetectionRecord]) -> Vec<FrameSpan> {
    let mut frames: Vec<FrameSpan> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match frames.last_mut() {
            Some(span) if span.frame_id == r.frame_id => span.len += 1,
            _ => frames.push(FrameSpan { frame_id: r.frame_id, start: i, len: 1 }),
        }
    }
    frames
}

/// A dataset with no access to ground-truth labels.
#[derive(Debug, Clone, Copy)]
pub struct Unlabeled<'a>(&'a EmbeddingDataset);

impl<'a> Unlabeled<'a> {
    pub fn dim(&self) -> usize {
        self.0.dim
    }

    pub fn views_per_detection(&self) -> usize {
        self.0.views
    }

    pub fn frames(&self) -> &'a [FrameSpan] {
        &self.0.frames
    }

    pub fn len(&self) -> usize {
        self.0.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.records.is_empty()
    }

    pub fn max_detections_per_frame(&self) -> usize {
        self.0.max_detections_per_frame()
    }

    pub fn view(&self, record: usize, v: usize) -> &'a [f32] {
        self.0.records[record].view(v, self.0.dim)
    }

    pub fn detection_idx(&self, record: usize) -> u32 {
        self.0.records[record].detection_idx
    }
}

/// Encoded size of a dataset in bytes.
pub fn encoded_len(dim: usize, views: usize, num_records: usize) -> usize {
    HEADER_LEN + num_records * (RECORD_FIXED_LEN + 4 * views * dim)
}

pub fn write_dataset<W: Write>(dataset: &EmbeddingDataset, sink: W) -> Result<u64> {
    write_records(
        dataset.dim,
        dataset.views,
        dataset.n_identities,
        &dataset.records,
        sink,
    )
}

/// Write raw records, sorting them by `(frame_id, detection_idx)`.
pub fn write_records<W: Write>(
    dim: usize,
    views: usize,
    n_identities: Option<u32>,
    records: &[DetectionRecord],
    mut sink: W,
) -> Result<u64> {
    let mut order: Vec<&DetectionRecord> = records.iter().collect();
    order.sort_by_key(|r| (r.frame_id, r.detection_idx));
    for pair in order.windows(2) {
        if (pair[0].frame_id, pair[0].detection_idx) == (pair[1].frame_id, pair[1].detection_idx) {
            return Err(Error::DuplicateRecord {
                frame_id: pair[0].frame_id,
                detection_idx: pair[0].detection_idx,
            });
        }
    }
    let to_u32 = |x: usize, what: &str| {
        u32::try_from(x).map_err(|_| Error::Dimension(format!("{what} {x} exceeds u32")))
    };
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    header.extend_from_slice(&to_u32(views, "views")?.to_le_bytes());
    header.extend_from_slice(&n_identities.unwrap_or(0).to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    header.extend_from_slice(&(order.len() as u64).to_le_bytes());
    sink.write_all(&header)?;

    let mut buf = Vec::with_capacity(RECORD_FIXED_LEN + 4 * views * dim);
    for r in order {
        if r.views.len() != views * dim {
            return Err(Error::Dimension(format!(
                "record ({}, {}) has {} values, expected {}",
                r.frame_id,
                r.detection_idx,
                r.views.len(),
                views * dim
            )));
        }
        let label = match r.gt_label {
            None => -1i32,
            Some(l) => i32::try_from(l).map_err(|_| Error::Data(format!("label {l} exceeds i32")))?,
        };
        buf.clear();
        buf.extend_from_slice(&r.frame_id.to_le_bytes());
        buf.extend_from_slice(&r.detection_idx.to_le_bytes());
        buf.extend_from_slice(&label.to_le_bytes());
        for x in &r.views {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(encoded_len(dim, views, records.len()) as u64)
}

fn read_exact_or<R: Read>(src: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Length(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn read_dataset<R: Read>(mut source: R) -> Result<EmbeddingDataset> {
    let mut header = [0u8; HEADER_LEN];
    read_exact_or(&mut source, &mut header[..8], "magic")?;
    if &header[..8] != MAGIC {
        return Err(Error::Format("bad magic, not a HERDEMB1 file".into()));
    }
    read_exact_or(&mut source, &mut header[8..], "header")?;
    let dim = u32_at(&header, 8) as usize;
    let views = u32_at(&header, 12) as usize;
    let n_ids = u32_at(&header, 16);
    let reserved = u32_at(&header, 20);
    let num_records = u64::from_le_bytes(header[24..32].try_into().unwrap());
    if reserved != 0 {
        return Err(Error::Format(format!("reserved header field is {reserved}, expected 0")));
    }
    if dim == 0 {
        return Err(Error::Invariant("embedding dimension must be >= 1".into()));
    }
    if views < 2 {
        return Err(Error::Invariant(format!(
            "need at least 2 views per detection, got {views}"
        )));
    }
    let values = views
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("views * dim overflows".into()))?;
    let num_records = usize::try_from(num_records)
        .map_err(|_| Error::Format("record count exceeds address space".into()))?;

    let mut records = Vec::with_capacity(num_records.min(MAX_PREALLOC_RECORDS));
    let mut fixed = [0u8; RECORD_FIXED_LEN];
    let mut payload = vec![0u8; 4 * values];
    for _ in 0..num_records {
        read_exact_or(&mut source, &mut fixed, "record header")?;
        read_exact_or(&mut source, &mut payload, "record payload")?;
        let frame_id = u64::from_le_bytes(fixed[..8].try_into().unwrap());
        let detection_idx = u32_at(&fixed, 8);
        let label = i32::from_le_bytes(fixed[12..16].try_into().unwrap());
        let gt_label = match label {
            -1 => None,
            l if l >= 0 => Some(l as u32),
            l => return Err(Error::Data(format!("invalid label {l}"))),
        };
        let mut vals = Vec::with_capacity(values);
        for chunk in payload.chunks_exact(4) {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite value in record ({frame_id}, {detection_idx})"
                )));
            }
            vals.push(x);
        }
        records.push(DetectionRecord { frame_id, detection_idx, gt_label, views: vals });
    }
    let mut probe = [0u8; 1];
    if source.read(&mut probe)? != 0 {
        return Err(Error::Length("trailing bytes after declared records".into()));
    }
    EmbeddingDataset::new(dim, views, (n_ids != 0).then_some(n_ids), records)
}

pub fn write_path(dataset: &EmbeddingDataset, path: &Path) -> Result<u64> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

pub fn read_path(path: &Path) -> Result<EmbeddingDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Path of the optional provenance sidecar for `path`.
pub fn manifest_sidecar(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}
