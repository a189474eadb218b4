//! In-memory feature tensors and the FTZ binary format.
//!
//! FTZ layout (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "FREF"
//! 4       2         version (u16) = 1
//! 6       1         dtype (u8) = 0, f32 little-endian
//! 7       1         rank (u8), 2 or 3
//! 8       4*rank    dims (u32 each)
//! ...     4*prod    row-major payload
//! ```
//!
//! Rank 2 decodes to [`FlatFeatures`] (rows x channels), rank 3 to
//! [`FeatureMap`] (height x width x channels). Non-finite payload values are
//! rejected on read.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Metric;

pub const MAGIC: [u8; 4] = *b"FREF";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

/// Fixed part of the header, before the dims.
const FIXED_HEADER: usize = 8;

/// Size in bytes of the FTZ header for a tensor of the given rank.
pub fn header_len(rank: usize) -> usize {
    FIXED_HEADER + 4 * rank
}

fn check_finite(values: impl IntoIterator<Item = f32>) -> Result<()> {
    match values.into_iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// An `height x width` grid of `channels`-dimensional feature vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| {
                Error::DimsOverflow(vec![height as u32, width as u32, channels as u32])
            })?;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "feature map {height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        check_finite(data.iter().copied())?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector at grid cell `(row, col)`.
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// A dense `rows x channels` matrix of features (or any rank-2 payload such as
/// score maps and masks).
#[derive(Debug, Clone, PartialEq)]
pub struct FlatFeatures {
    data: Array2<f32>,
}

impl FlatFeatures {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix dims must be positive, got {rows}x{cols}"
            )));
        }
        check_finite(data.iter().copied())?;
        Ok(Self { data })
    }

    pub fn from_rows(rows: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        let data = Array2::from_shape_vec((rows, channels), values)
            .map_err(|e| Error::invalid(format!("bad matrix shape: {e}")))?;
        Self::new(data)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.data.row(i)
    }

    pub fn into_array(self) -> Array2<f32> {
        self.data
    }

    /// Widened copy used by the numerical routines.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

/// The prototype memory bank: `count x channels` normal features.
///
/// In cosine mode every row is unit-normalized at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    data: Array2<f32>,
    metric: Metric,
}

impl PrototypeBank {
    pub fn new(data: Array2<f32>, metric: Metric) -> Result<Self> {
        let flat = FlatFeatures::new(data)?;
        let mut data = flat.into_array();
        if metric == Metric::Cosine {
            normalize_rows_f32(&mut data)?;
        }
        Ok(Self { data, metric })
    }

    /// Rows already validated (and normalized, in cosine mode) by the caller.
    pub(crate) fn from_validated(data: Array2<f32>, metric: Metric) -> Self {
        Self { data, metric }
    }

    pub fn count(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn to_flat(&self) -> FlatFeatures {
        FlatFeatures {
            data: self.data.clone(),
        }
    }
}

/// Scales every row to unit L2 norm; zero rows are an error.
pub(crate) fn normalize_rows_f32(data: &mut Array2<f32>) -> Result<()> {
    for (i, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(format!(
                "row {i} has zero norm and cannot be normalized"
            )));
        }
        row.mapv_inplace(|v| (f64::from(v) / norm) as f32);
    }
    Ok(())
}

/// Row-major flattening: row `i` is cell `(i / w, i % w)`.
pub fn flatten_map(map: &FeatureMap) -> FlatFeatures {
    let rows = map.height * map.width;
    let data = Array2::from_shape_vec((rows, map.channels), map.data.clone())
        .expect("feature map length invariant");
    FlatFeatures { data }
}

/// Inverse of [`flatten_map`].
pub fn unflatten(flat: &FlatFeatures, height: usize, width: usize) -> Result<FeatureMap> {
    if height * width != flat.rows() {
        return Err(Error::invalid(format!(
            "cannot reshape {} rows into a {height}x{width} grid",
            flat.rows()
        )));
    }
    let data = flat.data.iter().copied().collect();
    FeatureMap::new(height, width, flat.channels(), data)
}

/// A decoded FTZ payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Flat(FlatFeatures),
    Map(FeatureMap),
}

impl Tensor {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Tensor::Flat(f) => vec![f.rows(), f.channels()],
            Tensor::Map(m) => vec![m.height, m.width, m.channels],
        }
    }

    /// Flattened view regardless of rank.
    pub fn into_flat(self) -> FlatFeatures {
        match self {
            Tensor::Flat(f) => f,
            Tensor::Map(m) => flatten_map(&m),
        }
    }
}

impl From<FlatFeatures> for Tensor {
    fn from(f: FlatFeatures) -> Self {
        Tensor::Flat(f)
    }
}

impl From<FeatureMap> for Tensor {
    fn from(m: FeatureMap) -> Self {
        Tensor::Map(m)
    }
}

/// Serializes a tensor to its FTZ bytes.
pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let dims = tensor.dims();
    let count: usize = dims.iter().product();
    let mut out = Vec::with_capacity(header_len(dims.len()) + 4 * count);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for d in &dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    let mut push = |v: f32| out.extend_from_slice(&v.to_le_bytes());
    match tensor {
        Tensor::Flat(f) => f.data.iter().copied().for_each(&mut push),
        Tensor::Map(m) => m.data.iter().copied().for_each(&mut push),
    }
    out
}

/// Parses FTZ bytes.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < FIXED_HEADER {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(Error::TruncatedHeader {
            expected: FIXED_HEADER,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(bytes[6]));
    }
    let rank = bytes[7];
    if rank != 2 && rank != 3 {
        return Err(Error::UnsupportedRank(rank));
    }
    let header = header_len(rank as usize);
    if bytes.len() < header {
        return Err(Error::TruncatedHeader {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<u32> = bytes[FIXED_HEADER..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let payload_len = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|len| len.checked_add(header).is_some())
        .ok_or_else(|| Error::DimsOverflow(dims.clone()))?;
    let payload = &bytes[header..];
    if payload.len() < payload_len {
        return Err(Error::TruncatedPayload {
            expected: payload_len,
            actual: payload.len(),
        });
    }
    if payload.len() > payload_len {
        return Err(Error::TrailingBytes {
            expected: payload_len,
            actual: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    check_finite(values.iter().copied())?;
    let d: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    match rank {
        2 => FlatFeatures::from_rows(d[0], d[1], values).map(Tensor::Flat),
        _ => FeatureMap::new(d[0], d[1], d[2], values).map(Tensor::Map),
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode_tensor(&bytes)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_tensor(tensor))?;
    file.flush()?;
    Ok(())
}

/// Reads a rank-2 tensor, rejecting rank-3 files.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<FlatFeatures> {
    match read_tensor(path)? {
        Tensor::Flat(f) => Ok(f),
        Tensor::Map(m) => Err(Error::invalid(format!(
            "expected a rank-2 tensor, found {}x{}x{}",
            m.height, m.width, m.channels
        ))),
    }
}

/// One image in a run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub tensor: PathBuf,
    pub label: u8,
    pub mask: Option<PathBuf>,
    pub image_hw: [usize; 2],
    /// External zero-shot image score in [0, 1], when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_zero: Option<f64>,
}

/// A JSON-lines manifest. Relative paths are resolved against the manifest's
/// directory when loaded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub records: Vec<ManifestRecord>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let reader = BufReader::new(fs::File::open(path)?);
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Manifest {
                line: idx + 1,
                message,
            };
            let mut rec: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if rec.label > 1 {
                return Err(bad(format!("label must be 0 or 1, got {}", rec.label)));
            }
            if rec.image_hw[0] == 0 || rec.image_hw[1] == 0 {
                return Err(bad("image_hw must be positive".into()));
            }
            if let Some(s) = rec.s_zero {
                if !(0.0..=1.0).contains(&s) {
                    return Err(bad(format!("s_zero must lie in [0, 1], got {s}")));
                }
            }
            rec.tensor = base.join(&rec.tensor);
            rec.mask = rec.mask.map(|m| base.join(m));
            records.push(rec);
        }
        Ok(Self { records })
    }

    /// Writes records verbatim, one JSON object per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("manifest record serializes"));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}
