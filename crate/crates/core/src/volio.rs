//! Volume input/output.
//!
//! Three formats:
//!
//! * NIfTI-1 single-file (`.nii`, optionally gzip-compressed). The reader
//!   accepts uint8/int16/int32/float32/float64 in either byte order; the
//!   writer emits little-endian float32 with an sform (code 2). Label grids
//!   travel in a sibling file `<stem>.labels.nii[.gz]`.
//! * A raw interchange pair: `<stem>.rkm.txt` metadata plus a little-endian
//!   `.rkm.bin` payload in memory order (`k` fastest).
//! * Activation stacks: a 32-byte header (`RKMACT1\0`, u32 N, D, H, W, eight
//!   zero bytes) followed by little-endian f32 maps, paired with the owning
//!   volume's affine.
//!
//! NIfTI stores the first header axis fastest. The reader transposes into
//! memory order without permuting axes: voxel `(i, j, k)` in memory is voxel
//! `(i, j, k)` of the header, and the affine is used exactly as stored.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::coords::{CoordsError, WorldAffine};
use crate::keypoints::{ActivationStack, KeypointError};
use crate::volume::{Grid, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum VolioError {
    #[error("bad magic in field `{field}`")]
    BadMagic { field: &'static str },
    #[error("unsupported datatype code {code} in field `{field}`")]
    UnsupportedDatatype { field: &'static str, code: i32 },
    #[error("file truncated while reading `{field}`")]
    TruncatedData { field: &'static str },
    #[error("{path}:{line}:{col}: {msg}")]
    ParseError {
        path: String,
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("invalid label value {value} at voxel {index}")]
    BadLabel { index: usize, value: f64 },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Coords(#[from] CoordsError),
    #[error(transparent)]
    Keypoints(#[from] KeypointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolioError + '_ {
    move |source| VolioError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a whole file, transparently gunzipping it if it starts with the
/// gzip magic.
fn read_bytes(path: &Path) -> Result<Vec<u8>, VolioError> {
    let raw = fs::read(path).map_err(io_err(path))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        match GzDecoder::new(&raw[..]).read_to_end(&mut out) {
            Ok(_) => Ok(out),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(VolioError::TruncatedData {
                    field: "gzip stream",
                })
            }
            Err(e) => Err(io_err(path)(e)),
        }
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), VolioError> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(io_err(path))?;
        enc.finish().map_err(io_err(path))?;
        Ok(())
    } else {
        fs::write(path, bytes).map_err(io_err(path))
    }
}

// ---------------------------------------------------------------- NIfTI-1

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

/// The header fields this crate interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: [usize; 3],
    pub datatype: i16,
    /// `pixdim[0..4]`; `pixdim[0]` carries the qform handedness factor.
    pub pixdim: [f32; 4],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    /// `quatern_b, quatern_c, quatern_d`.
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl NiftiHeader {
    /// Affine selected by precedence: sform when `sform_code > 0`, else the
    /// quaternion qform when `qform_code > 0`, else diagonal pixdim.
    pub fn affine(&self) -> Result<WorldAffine, CoordsError> {
        if self.sform_code > 0 {
            let s = self.srow.map(|r| r.map(|v| v as f64));
            return WorldAffine::from_rows([s[0], s[1], s[2], [0.0, 0.0, 0.0, 1.0]]);
        }
        let spacing = [1, 2, 3].map(|a| {
            let p = (self.pixdim[a] as f64).abs();
            if p > 0.0 && p.is_finite() {
                p
            } else {
                1.0
            }
        });
        if self.qform_code > 0 {
            return Ok(self.qform_affine(spacing)?);
        }
        WorldAffine::from_spacing(spacing, [0.0; 3])
    }

    fn qform_affine(&self, spacing: [f64; 3]) -> Result<WorldAffine, CoordsError> {
        let [mut b, mut c, mut d] = self.quatern.map(|v| v as f64);
        let sq = b * b + c * c + d * d;
        let a = if sq >= 1.0 {
            let n = sq.sqrt();
            b /= n;
            c /= n;
            d /= n;
            0.0
        } else {
            (1.0 - sq).sqrt()
        };
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            ],
        ];
        let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [spacing[0], spacing[1], qfac * spacing[2]];
        let o = self.qoffset.map(|v| v as f64);
        let mut rows = [[0.0; 4]; 4];
        for (row, out) in r.iter().zip(rows.iter_mut()) {
            for col in 0..3 {
                out[col] = row[col] * scale[col];
            }
        }
        for a in 0..3 {
            rows[a][3] = o[a];
        }
        rows[3] = [0.0, 0.0, 0.0, 1.0];
        WorldAffine::from_rows(rows)
    }
}

#[derive(Clone, Copy)]
struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn take<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().unwrap();
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.take(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.take(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.take(at))
    }
    fn f64(&self, at: usize) -> f64 {
        f64::from_le_bytes(self.take(at))
    }
}

pub fn parse_nifti_header(bytes: &[u8]) -> Result<NiftiHeader, VolioError> {
    if bytes.len() < HEADER_SIZE {
        return Err(VolioError::TruncatedData { field: "header" });
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        _ => {
            return Err(VolioError::BadMagic {
                field: "sizeof_hdr",
            })
        }
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(VolioError::BadMagic { field: "magic" });
    }
    let c = Cursor { bytes, big_endian };
    let ndim = c.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(VolioError::ParseError {
            path: String::new(),
            line: 0,
            col: 40,
            msg: format!("dim[0] = {ndim} out of range"),
        });
    }
    let mut dims = [1usize; 3];
    for a in 0..7usize {
        let d = if a < ndim as usize {
            c.i16(42 + 2 * a)
        } else {
            1
        };
        if d < 1 || (a >= 3 && d != 1) {
            return Err(VolioError::ParseError {
                path: String::new(),
                line: 0,
                col: 42 + 2 * a,
                msg: format!(
                    "dim[{}] = {d}: only non-empty 3-D volumes are supported",
                    a + 1
                ),
            });
        }
        if a < 3 {
            dims[a] = d as usize;
        }
    }
    let datatype = c.i16(70);
    if ![DT_UINT8, DT_INT16, DT_INT32, DT_FLOAT32, DT_FLOAT64].contains(&datatype) {
        return Err(VolioError::UnsupportedDatatype {
            field: "datatype",
            code: datatype as i32,
        });
    }
    let f4 = |at: usize| [c.f32(at), c.f32(at + 4), c.f32(at + 8), c.f32(at + 12)];
    Ok(NiftiHeader {
        dims,
        datatype,
        pixdim: f4(76),
        vox_offset: c.f32(108),
        scl_slope: c.f32(112),
        scl_inter: c.f32(116),
        qform_code: c.i16(252),
        sform_code: c.i16(254),
        quatern: [c.f32(256), c.f32(260), c.f32(264)],
        qoffset: [c.f32(268), c.f32(272), c.f32(276)],
        srow: [f4(280), f4(296), f4(312)],
    })
}

/// Header plus scaled voxel values in memory order.
fn decode_nifti(bytes: &[u8]) -> Result<(NiftiHeader, Vec<f64>), VolioError> {
    let h = parse_nifti_header(bytes)?;
    let big_endian = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) != 348;
    let c = Cursor { bytes, big_endian };
    let width = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        _ => 8,
    };
    let offset = (h.vox_offset.max(0.0) as usize).max(VOX_OFFSET);
    let [d0, d1, d2] = h.dims;
    let n = d0 * d1 * d2;
    if bytes.len() < offset + n * width {
        return Err(VolioError::TruncatedData { field: "data" });
    }
    let slope = match h.scl_slope as f64 {
        s if s == 0.0 || !s.is_finite() => 1.0,
        s => s,
    };
    let inter = match h.scl_inter as f64 {
        s if s.is_finite() => s,
        _ => 0.0,
    };
    let mut out = vec![0.0f64; n];
    // file index = i + d0 * (j + d1 * k)
    for k in 0..d2 {
        for j in 0..d1 {
            for i in 0..d0 {
                let at = offset + (i + d0 * (j + d1 * k)) * width;
                let raw = match h.datatype {
                    DT_UINT8 => bytes[at] as f64,
                    DT_INT16 => c.i16(at) as f64,
                    DT_INT32 => c.i32(at) as f64,
                    DT_FLOAT32 => c.f32(at) as f64,
                    _ => c.f64(at),
                };
                out[(i * d1 + j) * d2 + k] = if slope == 1.0 && inter == 0.0 {
                    raw
                } else {
                    raw * slope + inter
                };
            }
        }
    }
    Ok((h, out))
}

/// `foo.nii` → `foo.labels.nii`, `foo.nii.gz` → `foo.labels.nii.gz`.
pub fn label_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sibling = if let Some(stem) = name.strip_suffix(".nii.gz") {
        format!("{stem}.labels.nii.gz")
    } else if let Some(stem) = name.strip_suffix(".nii") {
        format!("{stem}.labels.nii")
    } else {
        format!("{name}.labels")
    };
    path.with_file_name(sibling)
}

fn is_label_file(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".labels.nii") || name.ends_with(".labels.nii.gz")
}

fn to_labels(values: &[f64]) -> Result<Vec<u16>, VolioError> {
    values
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            if v.fract() == 0.0 && (0.0..=u16::MAX as f64).contains(&v) {
                Ok(v as u16)
            } else {
                Err(VolioError::BadLabel { index, value: v })
            }
        })
        .collect()
}

/// Reads a volume and, when present, its label sibling.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume, VolioError> {
    let path = path.as_ref();
    let (h, values) = decode_nifti(&read_bytes(path)?)?;
    let grid = Grid::new(h.dims, h.affine()?)?;
    let mut vol = Volume::new(grid, values.iter().map(|&v| v as f32).collect())?;
    let sibling = label_sibling(path);
    if !is_label_file(path) && sibling.exists() {
        let (lh, lv) = decode_nifti(&read_bytes(&sibling)?)?;
        if lh.dims != h.dims {
            return Err(VolumeError::WrongLength {
                dims: h.dims,
                expected: grid.len(),
                actual: lh.dims.iter().product(),
            }
            .into());
        }
        vol = vol.with_labels(to_labels(&lv)?)?;
    }
    Ok(vol)
}

/// Reads only the header.
pub fn read_nifti_header(path: impl AsRef<Path>) -> Result<NiftiHeader, VolioError> {
    parse_nifti_header(&read_bytes(path.as_ref())?)
}

fn encode_nifti(grid: &Grid, datatype: i16, payload: impl Fn(usize, &mut Vec<u8>)) -> Vec<u8> {
    let [d0, d1, d2] = grid.dims;
    let (width, bitpix) = match datatype {
        DT_UINT8 => (1, 8),
        DT_INT16 => (2, 16),
        DT_INT32 => (4, 32),
        DT_FLOAT32 => (4, 32),
        _ => (8, 64),
    };
    let mut b = vec![0u8; VOX_OFFSET];
    let put =
        |b: &mut Vec<u8>, at: usize, bytes: &[u8]| b[at..at + bytes.len()].copy_from_slice(bytes);
    put(&mut b, 0, &348i32.to_le_bytes());
    let dim: [i16; 8] = [3, d0 as i16, d1 as i16, d2 as i16, 1, 1, 1, 1];
    for (a, d) in dim.iter().enumerate() {
        put(&mut b, 40 + 2 * a, &d.to_le_bytes());
    }
    put(&mut b, 70, &datatype.to_le_bytes());
    put(&mut b, 72, &(bitpix as i16).to_le_bytes());
    let spacing = grid.spacing();
    let pixdim = [
        1.0f32,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (a, p) in pixdim.iter().enumerate() {
        put(&mut b, 76 + 4 * a, &p.to_le_bytes());
    }
    put(&mut b, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut b, 112, &1.0f32.to_le_bytes());
    put(&mut b, 116, &0.0f32.to_le_bytes());
    b[123] = 2; // xyzt_units: millimeters
    put(&mut b, 252, &0i16.to_le_bytes());
    put(&mut b, 254, &2i16.to_le_bytes());
    let rows = grid.affine.rows();
    for (r, row) in rows.iter().take(3).enumerate() {
        for (col, v) in row.iter().enumerate() {
            put(&mut b, 280 + 16 * r + 4 * col, &(*v as f32).to_le_bytes());
        }
    }
    put(&mut b, 344, b"n+1\0");
    b.reserve(grid.len() * width);
    for k in 0..d2 {
        for j in 0..d1 {
            for i in 0..d0 {
                payload((i * d1 + j) * d2 + k, &mut b);
            }
        }
    }
    b
}

/// Writes float32 intensities with an sform (code 2); labels, when present,
/// go to [`label_sibling`] as uint8 (int16 or int32 if values need it).
pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<(), VolioError> {
    let path = path.as_ref();
    if vol.grid.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(VolioError::ParseError {
            path: path.display().to_string(),
            line: 0,
            col: 0,
            msg: "dimension exceeds NIfTI-1 limit".into(),
        });
    }
    let bytes = encode_nifti(&vol.grid, DT_FLOAT32, |n, b| {
        b.extend_from_slice(&vol.data[n].to_le_bytes())
    });
    write_bytes(path, &bytes)?;
    if let Some(labels) = &vol.labels {
        let max = labels.iter().copied().max().unwrap_or(0);
        let bytes = if max <= u8::MAX as u16 {
            encode_nifti(&vol.grid, DT_UINT8, |n, b| b.push(labels[n] as u8))
        } else if max <= i16::MAX as u16 {
            encode_nifti(&vol.grid, DT_INT16, |n, b| {
                b.extend_from_slice(&(labels[n] as i16).to_le_bytes())
            })
        } else {
            encode_nifti(&vol.grid, DT_INT32, |n, b| {
                b.extend_from_slice(&(labels[n] as i32).to_le_bytes())
            })
        };
        write_bytes(&label_sibling(path), &bytes)?;
    }
    Ok(())
}

// ------------------------------------------------------------------- raw

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawType {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl RawType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "uint8" => Self::Uint8,
            "int16" => Self::Int16,
            "int32" => Self::Int32,
            "float32" => Self::Float32,
            "float64" => Self::Float64,
            _ => return None,
        })
    }

    fn width(self) -> usize {
        match self {
            Self::Uint8 => 1,
            Self::Int16 => 2,
            Self::Int32 | Self::Float32 => 4,
            Self::Float64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::Uint8 => b[0] as f64,
            Self::Int16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::Int32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::Float32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::Float64 => f64::from_le_bytes(b.try_into().unwrap()),
        }
    }
}

/// Parsed `.rkm.txt` metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMeta {
    pub dims: [usize; 3],
    pub datatype: RawType,
    pub affine: WorldAffine,
    /// Label payload (u16 little-endian), relative to the metadata file.
    pub labels: Option<String>,
}

/// Metadata grammar, one statement per line (`#` starts a comment):
///
/// ```text
/// dims 2 2 2
/// datatype float32
/// affine 1 0 0 0
/// affine 0 1 0 0
/// affine 0 0 1 0
/// affine 0 0 0 1
/// labels brain.labels.bin
/// ```
pub fn parse_raw_meta(text: &str, path: &str) -> Result<RawMeta, VolioError> {
    let err = |line: usize, col: usize, msg: String| VolioError::ParseError {
        path: path.to_string(),
        line,
        col,
        msg,
    };
    let mut dims = None;
    let mut datatype = None;
    let mut rows: Vec<[f64; 4]> = Vec::new();
    let mut labels = None;
    let mut last_line = 0;
    for (n, raw_line) in text.lines().enumerate() {
        let line = n + 1;
        last_line = line;
        let content = raw_line.split('#').next().unwrap_or("");
        // (column, token) pairs, 1-based columns
        let mut tokens = Vec::new();
        let mut start = None;
        for (i, ch) in content
            .char_indices()
            .chain(std::iter::once((content.len(), ' ')))
        {
            match (ch.is_whitespace(), start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    tokens.push((s + 1, &content[s..i]));
                    start = None;
                }
                _ => {}
            }
        }
        let Some(&(kcol, key)) = tokens.first() else {
            continue;
        };
        let args = &tokens[1..];
        let reals = |want: usize| -> Result<Vec<f64>, VolioError> {
            if args.len() != want {
                let col = args.get(want).map_or(kcol, |t| t.0);
                return Err(err(
                    line,
                    col,
                    format!("`{key}` takes {want} values, got {}", args.len()),
                ));
            }
            args.iter()
                .map(|&(c, t)| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(line, c, format!("expected a finite real, got `{t}`")))
                })
                .collect()
        };
        match key {
            "dims" => {
                let v = reals(3)?;
                let mut d = [0usize; 3];
                for a in 0..3 {
                    if v[a] < 1.0 || v[a].fract() != 0.0 {
                        return Err(err(
                            line,
                            args[a].0,
                            format!("bad dimension `{}`", args[a].1),
                        ));
                    }
                    d[a] = v[a] as usize;
                }
                dims = Some(d);
            }
            "datatype" => {
                if args.len() != 1 {
                    return Err(err(line, kcol, "`datatype` takes one value".into()));
                }
                datatype = Some(RawType::parse(args[0].1).ok_or_else(|| {
                    err(line, args[0].0, format!("unknown datatype `{}`", args[0].1))
                })?);
            }
            "affine" => {
                if rows.len() == 4 {
                    return Err(err(line, kcol, "affine has more than 4 rows".into()));
                }
                let v = reals(4)?;
                rows.push([v[0], v[1], v[2], v[3]]);
            }
            "labels" => {
                if args.len() != 1 {
                    return Err(err(line, kcol, "`labels` takes one file name".into()));
                }
                labels = Some(args[0].1.to_string());
            }
            other => return Err(err(line, kcol, format!("unknown key `{other}`"))),
        }
    }
    let end = last_line + 1;
    let dims = dims.ok_or_else(|| err(end, 1, "missing `dims`".into()))?;
    let datatype = datatype.ok_or_else(|| err(end, 1, "missing `datatype`".into()))?;
    if rows.len() != 4 {
        return Err(err(
            end,
            1,
            format!("affine has {} rows, need 4", rows.len()),
        ));
    }
    let affine = WorldAffine::from_rows([rows[0], rows[1], rows[2], rows[3]])
        .map_err(|e| err(end, 1, e.to_string()))?;
    Ok(RawMeta {
        dims,
        datatype,
        affine,
        labels,
    })
}

pub fn read_raw(
    path_meta: impl AsRef<Path>,
    path_data: impl AsRef<Path>,
) -> Result<Volume, VolioError> {
    let (pm, pd) = (path_meta.as_ref(), path_data.as_ref());
    let text = fs::read_to_string(pm).map_err(io_err(pm))?;
    let meta = parse_raw_meta(&text, &pm.display().to_string())?;
    let grid = Grid::new(meta.dims, meta.affine)?;
    let bytes = fs::read(pd).map_err(io_err(pd))?;
    let w = meta.datatype.width();
    if bytes.len() < grid.len() * w {
        return Err(VolioError::TruncatedData { field: "data" });
    }
    let data = bytes
        .chunks_exact(w)
        .take(grid.len())
        .map(|b| meta.datatype.decode(b) as f32)
        .collect();
    let mut vol = Volume::new(grid, data)?;
    if let Some(name) = &meta.labels {
        let lp = pm.parent().unwrap_or(Path::new("")).join(name);
        let lb = fs::read(&lp).map_err(io_err(&lp))?;
        if lb.len() < grid.len() * 2 {
            return Err(VolioError::TruncatedData { field: "labels" });
        }
        let labels = lb
            .chunks_exact(2)
            .take(grid.len())
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        vol = vol.with_labels(labels)?;
    }
    Ok(vol)
}

/// Writes float32 data; labels go next to the payload as
/// `<payload>.labels` (u16 little-endian).
pub fn write_raw(
    vol: &Volume,
    path_meta: impl AsRef<Path>,
    path_data: impl AsRef<Path>,
) -> Result<(), VolioError> {
    let (pm, pd) = (path_meta.as_ref(), path_data.as_ref());
    let [d0, d1, d2] = vol.grid.dims;
    let mut text = format!("dims {d0} {d1} {d2}\ndatatype float32\n");
    for row in vol.grid.affine.rows() {
        text.push_str(&format!(
            "affine {:?} {:?} {:?} {:?}\n",
            row[0], row[1], row[2], row[3]
        ));
    }
    if let Some(labels) = &vol.labels {
        let name = format!(
            "{}.labels",
            pd.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        );
        let lp = pm.parent().unwrap_or(Path::new("")).join(&name);
        let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        fs::write(&lp, bytes).map_err(io_err(&lp))?;
        text.push_str(&format!("labels {name}\n"));
    }
    fs::write(pm, text).map_err(io_err(pm))?;
    let bytes: Vec<u8> = vol.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(pd, bytes).map_err(io_err(pd))
}

// ------------------------------------------------------- activation stacks

const ACT_MAGIC: &[u8; 8] = b"RKMACT1\0";
const ACT_HEADER: usize = 32;

pub fn decode_activations(
    bytes: &[u8],
    affine: WorldAffine,
) -> Result<ActivationStack, VolioError> {
    if bytes.len() < ACT_HEADER {
        return Err(VolioError::TruncatedData { field: "header" });
    }
    if &bytes[..8] != ACT_MAGIC {
        return Err(VolioError::BadMagic { field: "magic" });
    }
    let u = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (n, dims) = (u(8), [u(12), u(16), u(20)]);
    if bytes[24..32].iter().any(|&b| b != 0) {
        return Err(VolioError::BadMagic { field: "reserved" });
    }
    let grid = Grid::new(dims, affine)?;
    let per = grid.len();
    if bytes.len() < ACT_HEADER + n * per * 4 {
        return Err(VolioError::TruncatedData { field: "maps" });
    }
    let maps = (0..n)
        .map(|m| {
            bytes[ACT_HEADER + m * per * 4..ACT_HEADER + (m + 1) * per * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect();
    Ok(ActivationStack::new(grid, maps)?)
}

pub fn encode_activations(stack: &ActivationStack) -> Vec<u8> {
    let dims = stack.grid().dims;
    let mut b = Vec::with_capacity(ACT_HEADER + stack.len() * stack.grid().len() * 4);
    b.extend_from_slice(ACT_MAGIC);
    for v in [stack.len(), dims[0], dims[1], dims[2]] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    b.extend_from_slice(&[0u8; 8]);
    for m in stack.maps() {
        for v in m {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

pub fn read_activations(
    path: impl AsRef<Path>,
    affine: WorldAffine,
) -> Result<ActivationStack, VolioError> {
    let path = path.as_ref();
    decode_activations(&fs::read(path).map_err(io_err(path))?, affine)
}

pub fn write_activations(
    stack: &ActivationStack,
    path: impl AsRef<Path>,
) -> Result<(), VolioError> {
    let path = path.as_ref();
    fs::write(path, encode_activations(stack)).map_err(io_err(path))
}

/// Dispatches on the file name: `.nii`/`.nii.gz` or `<stem>.rkm.txt` (payload
/// `<stem>.rkm.bin`).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, VolioError> {
    let path = path.as_ref();
    match raw_payload_path(path) {
        Some(data) => read_raw(path, data),
        None => read_nifti(path),
    }
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<(), VolioError> {
    let path = path.as_ref();
    match raw_payload_path(path) {
        Some(data) => write_raw(vol, path, data),
        None => write_nifti(vol, path),
    }
}

fn raw_payload_path(meta: &Path) -> Option<PathBuf> {
    let name = meta.file_name()?.to_string_lossy().into_owned();
    let stem = name.strip_suffix(".rkm.txt")?;
    Some(meta.with_file_name(format!("{stem}.rkm.bin")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dims: [usize; 3], affine: WorldAffine) -> Volume {
        let grid = Grid::new(dims, affine).unwrap();
        let data = (0..grid.len())
            .map(|n| (n as f32 * 0.731).sin() * 1e3 + 0.125)
            .collect();
        Volume::new(grid, data).unwrap()
    }

    fn shear() -> WorldAffine {
        WorldAffine::from_rows([
            [1.5, 0.2, -0.1, -10.0],
            [0.0, 0.9, 0.3, 4.25],
            [0.05, 0.0, 2.5, 7.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn nifti_round_trip_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let path = dir.path().join(name);
            let labels: Vec<u16> = (0..60).map(|n| (n % 4) as u16).collect();
            let v = sample([3, 4, 5], shear()).with_labels(labels).unwrap();
            write_nifti(&v, &path).unwrap();
            let back = read_nifti(&path).unwrap();
            assert_eq!(back.dims(), v.dims());
            assert_eq!(back.data, v.data);
            assert_eq!(back.labels, v.labels);
            assert!(back.affine().max_abs_diff(v.affine()) <= 1e-6);
            let lh = read_nifti_header(label_sibling(&path)).unwrap();
            assert_eq!(lh.datatype, DT_UINT8);
        }
    }

    #[test]
    fn file_layout_is_first_axis_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.nii");
        let grid = Grid::new([2, 1, 3], WorldAffine::identity()).unwrap();
        let v = Volume::new(grid, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        write_nifti(&v, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let first: Vec<f32> = bytes[VOX_OFFSET..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        // memory (i,j,k) -> k fastest: (0,0,0)=0 (0,0,1)=1 ... (1,0,0)=3
        assert_eq!(first, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    fn crafted(sform_code: i16, qform_code: i16) -> Vec<u8> {
        let grid = Grid::new(
            [2, 2, 2],
            WorldAffine::from_spacing([2.0, 2.0, 2.0], [-10.0; 3]).unwrap(),
        )
        .unwrap();
        let mut b = encode_nifti(&grid, DT_FLOAT32, |_, b| {
            b.extend_from_slice(&1.0f32.to_le_bytes())
        });
        b[252..254].copy_from_slice(&qform_code.to_le_bytes());
        b[254..256].copy_from_slice(&sform_code.to_le_bytes());
        b
    }

    #[test]
    fn precedence_rules() {
        let b = crafted(1, 1);
        let h = parse_nifti_header(&b).unwrap();
        assert_eq!(
            h.affine().unwrap(),
            WorldAffine::from_spacing([2.0; 3], [-10.0; 3]).unwrap()
        );
        // sform off, qform identity quaternion, pixdim 2, offset 5
        let mut b = crafted(0, 1);
        b[268..272].copy_from_slice(&5.0f32.to_le_bytes());
        let h = parse_nifti_header(&b).unwrap();
        assert_eq!(
            h.affine().unwrap(),
            WorldAffine::from_spacing([2.0; 3], [5.0, 0.0, 0.0]).unwrap()
        );
        let b = crafted(0, 0);
        assert_eq!(
            parse_nifti_header(&b).unwrap().affine().unwrap(),
            WorldAffine::from_spacing([2.0; 3], [0.0; 3]).unwrap()
        );
    }

    #[test]
    fn qform_rotation_and_handedness() {
        // 90° about z: (a, b, c, d) = (cos 45°, 0, 0, sin 45°)
        let mut b = crafted(0, 1);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        b[264..268].copy_from_slice(&s.to_le_bytes());
        b[76..80].copy_from_slice(&(-1.0f32).to_le_bytes());
        let a = parse_nifti_header(&b).unwrap().affine().unwrap();
        let m = a.linear();
        assert!((m[(0, 1)] + 2.0).abs() < 1e-6);
        assert!((m[(1, 0)] - 2.0).abs() < 1e-6);
        assert!((m[(2, 2)] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn big_endian_headers_are_read() {
        let mut b = vec![0u8; VOX_OFFSET + 4];
        b[0..4].copy_from_slice(&348i32.to_be_bytes());
        for (a, d) in [3i16, 1, 1, 1, 1, 1, 1, 1].iter().enumerate() {
            b[40 + 2 * a..42 + 2 * a].copy_from_slice(&d.to_be_bytes());
        }
        b[70..72].copy_from_slice(&DT_INT32.to_be_bytes());
        b[108..112].copy_from_slice(&352f32.to_be_bytes());
        b[112..116].copy_from_slice(&2f32.to_be_bytes());
        b[116..120].copy_from_slice(&1f32.to_be_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        b[352..356].copy_from_slice(&(-7i32).to_be_bytes());
        let (h, v) = decode_nifti(&b).unwrap();
        assert_eq!(h.dims, [1, 1, 1]);
        assert_eq!(v, vec![-13.0]);
    }

    #[test]
    fn error_cases() {
        let good = crafted(1, 0);
        assert!(matches!(
            decode_nifti(&good[..good.len() - 3]),
            Err(VolioError::TruncatedData { field: "data" })
        ));
        assert!(matches!(
            parse_nifti_header(&good[..100]),
            Err(VolioError::TruncatedData { field: "header" })
        ));
        let mut bad = good.clone();
        bad[344] = b'x';
        assert!(matches!(
            parse_nifti_header(&bad),
            Err(VolioError::BadMagic { field: "magic" })
        ));
        let mut bad = good.clone();
        bad[70..72].copy_from_slice(&32i16.to_le_bytes());
        assert!(matches!(
            parse_nifti_header(&bad),
            Err(VolioError::UnsupportedDatatype { code: 32, .. })
        ));
    }

    #[test]
    fn raw_minimal_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let meta = dir.path().join("m.rkm.txt");
        let data = dir.path().join("m.rkm.bin");
        fs::write(
            &meta,
            "# minimal\ndims 2 2 2\ndatatype float32\naffine 1 0 0 0\naffine 0 1 0 0\naffine 0 0 1 0\naffine 0 0 0 1\n",
        )
        .unwrap();
        let payload: Vec<u8> = (0..8).flat_map(|v| (v as f32).to_le_bytes()).collect();
        fs::write(&data, payload).unwrap();
        let v = read_raw(&meta, &data).unwrap();
        assert_eq!(v.data, (0..8).map(|v| v as f32).collect::<Vec<_>>());
        assert_eq!(v.at(0, 0, 1), 1.0);
        assert_eq!(v.at(1, 0, 0), 4.0);

        let w = sample([4, 3, 2], shear())
            .with_labels((0..24).map(|n| n as u16 * 1000).collect())
            .unwrap();
        write_volume(&w, &meta).unwrap();
        let back = read_volume(&meta).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn raw_parse_errors_carry_positions() {
        let rows3 = "dims 1 1 1\ndatatype uint8\naffine 1 0 0 0\naffine 0 1 0 0\naffine 0 0 0 1\n";
        match parse_raw_meta(rows3, "m") {
            Err(VolioError::ParseError { line: 6, .. }) => {}
            other => panic!("{other:?}"),
        }
        let bad = "dims 1 1 1\ndatatype uint8\naffine 1 0 x 0\n";
        match parse_raw_meta(bad, "m") {
            Err(VolioError::ParseError {
                line: 3, col: 12, ..
            }) => {}
            other => panic!("{other:?}"),
        }
        let five = "affine 1 0 0 0\n".repeat(5);
        assert!(matches!(
            parse_raw_meta(&five, "m"),
            Err(VolioError::ParseError {
                line: 5,
                col: 1,
                ..
            })
        ));
    }

    #[test]
    fn activation_round_trip() {
        let grid = Grid::new([3, 2, 4], shear()).unwrap();
        let maps = vec![
            (0..24).map(|n| n as f32).collect(),
            (0..24).map(|n| (24 - n) as f32 * 0.5).collect(),
        ];
        let stack = ActivationStack::new(grid, maps).unwrap();
        let bytes = encode_activations(&stack);
        assert_eq!(&bytes[..8], b"RKMACT1\0");
        assert_eq!(bytes.len(), 32 + 2 * 24 * 4);
        assert_eq!(decode_activations(&bytes, grid.affine).unwrap(), stack);
        assert!(matches!(
            decode_activations(&bytes[..40], grid.affine),
            Err(VolioError::TruncatedData { .. })
        ));
    }
}
