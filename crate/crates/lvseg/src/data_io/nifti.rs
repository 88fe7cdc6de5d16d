//! Reader/writer for the standard single-file volumetric neuroimaging
//! format (`.nii`, gzip-compressed `.nii.gz`).
//!
//! Scope: 3-D volumes with scalar voxel types (unsigned 8/16-bit, signed
//! 16/32-bit integer, 32/64-bit float), spacing from the header `pixdim`
//! fields, and the `scl_slope`/`scl_inter` intensity transform. Both byte
//! orders are read (the order is detected from the header-size field);
//! files are always written little-endian with 32-bit float voxels for
//! images and unsigned bytes for label maps. Orientation metadata
//! (qform/sform) is not modeled — axes are taken as stored.
//!
//! Voxel order on disk is first-dimension-fastest, which maps directly onto
//! [`Volume`]'s column-fastest layout with `dim[1]` = columns, `dim[2]` =
//! rows, `dim[3]` = slices.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::core::{LabelMap, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE_FILE: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::VolumeFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_all_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

fn write_all_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(path, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Little/big-endian scalar readers over a raw header buffer.
struct Fields<'a> {
    bytes: &'a [u8],
    swapped: bool,
}

impl Fields<'_> {
    fn i16_at(&self, off: usize) -> i16 {
        let raw = [self.bytes[off], self.bytes[off + 1]];
        if self.swapped {
            i16::from_be_bytes(raw)
        } else {
            i16::from_le_bytes(raw)
        }
    }

    fn f32_at(&self, off: usize) -> f32 {
        let raw = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        if self.swapped {
            f32::from_be_bytes(raw)
        } else {
            f32::from_le_bytes(raw)
        }
    }
}

/// Decoded file: voxel values in stored order (already slope/intercept
/// scaled) plus geometry.
struct Decoded {
    /// (rows, cols, slices)
    shape: (usize, usize, usize),
    /// (row mm, col mm, slice mm)
    spacing: (f32, f32, f32),
    values: Vec<f32>,
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < DATA_OFFSET {
        return Err(format_err(path, format!("file too short ({} bytes) for a header", bytes.len())));
    }
    let size_le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let swapped = match size_le {
        348 => false,
        s if s.swap_bytes() == 348 => true,
        s => return Err(format_err(path, format!("header size field is {s}, expected 348"))),
    };
    let magic = &bytes[344..348];
    if magic != MAGIC_SINGLE_FILE {
        return Err(format_err(path, format!("unrecognized magic {magic:?}")));
    }
    let f = Fields { bytes, swapped };

    let ndim = f.i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(format_err(path, format!("invalid dimension count {ndim}")));
    }
    let dims: Vec<i16> = (1..=ndim as usize).map(|d| f.i16_at(40 + 2 * d)).collect();
    if ndim < 3 || dims.iter().take(3).any(|&d| d < 1) || dims.iter().skip(3).any(|&d| d > 1) {
        return Err(format_err(
            path,
            format!("expected a 3-D volume, got dimensions {dims:?}"),
        ));
    }
    let (cols, rows, slices) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);

    let datatype = f.i16_at(70);
    let voxel_bytes = match datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format_err(path, format!("unsupported voxel datatype code {other}"))),
    };

    let pix = |d: usize| f.f32_at(76 + 4 * d);
    let spacing = (pix(2).abs(), pix(1).abs(), pix(3).abs());

    let vox_offset = f.f32_at(108);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 {
        return Err(format_err(path, format!("invalid data offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let slope = f.f32_at(112);
    let inter = f.f32_at(116);

    let count = cols * rows * slices;
    let end = offset + count * voxel_bytes;
    if bytes.len() < end {
        return Err(format_err(
            path,
            format!("voxel data truncated: need {end} bytes, file has {}", bytes.len()),
        ));
    }

    let data = &bytes[offset..end];
    let fix2 = |c: [u8; 2]| if swapped { [c[1], c[0]] } else { c };
    let mut values: Vec<f32> = Vec::with_capacity(count);
    match datatype {
        DT_UINT8 => values.extend(data.iter().map(|&b| b as f32)),
        DT_INT16 => values.extend(
            data.chunks_exact(2)
                .map(|c| i16::from_le_bytes(fix2([c[0], c[1]])) as f32),
        ),
        DT_UINT16 => values.extend(
            data.chunks_exact(2)
                .map(|c| u16::from_le_bytes(fix2([c[0], c[1]])) as f32),
        ),
        DT_INT32 => values.extend(data.chunks_exact(4).map(|c| {
            let c = if swapped { [c[3], c[2], c[1], c[0]] } else { [c[0], c[1], c[2], c[3]] };
            i32::from_le_bytes(c) as f32
        })),
        DT_FLOAT32 => values.extend(data.chunks_exact(4).map(|c| {
            let c = if swapped { [c[3], c[2], c[1], c[0]] } else { [c[0], c[1], c[2], c[3]] };
            f32::from_le_bytes(c)
        })),
        DT_FLOAT64 => values.extend(data.chunks_exact(8).map(|c| {
            let c = if swapped {
                [c[7], c[6], c[5], c[4], c[3], c[2], c[1], c[0]]
            } else {
                [c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]
            };
            f64::from_le_bytes(c) as f32
        })),
        _ => unreachable!("datatype validated above"),
    }

    // Intensity transform; slope 0 means "not set" by convention.
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in values.iter_mut() {
            *v = (*v as f64 * slope as f64 + inter as f64) as f32;
        }
    }

    Ok(Decoded {
        shape: (rows, cols, slices),
        spacing,
        values,
    })
}

/// Read a 3-D image volume. Spacing comes from the header grid-spacing
/// fields; voxels are converted to 32-bit floats.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = read_all_bytes(path)?;
    let d = decode(path, &bytes)?;
    Volume::new(d.shape, d.spacing, d.values)
}

/// Read a 3-D label volume: every voxel must be an integer code in 0..=255.
/// Returns the labels and the header spacing.
pub fn read_labels(path: &Path) -> Result<(LabelMap, (f32, f32, f32))> {
    let bytes = read_all_bytes(path)?;
    let d = decode(path, &bytes)?;
    let mut codes = Vec::with_capacity(d.values.len());
    for &v in &d.values {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(format_err(path, format!("label value {v} is not an integer code in 0..=255")));
        }
        codes.push(v as u8);
    }
    Ok((LabelMap::new(d.shape, codes)?, d.spacing))
}

fn header(shape: (usize, usize, usize), spacing: (f32, f32, f32), datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim[0..3] = (ndim, cols, rows, slices); trailing dims stay 0.
    let dims = [3i16, shape.1 as i16, shape.0 as i16, shape.2 as i16, 1, 1, 1, 1];
    for (d, v) in dims.iter().enumerate() {
        h[40 + 2 * d..42 + 2 * d].copy_from_slice(&v.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim = [1.0f32, spacing.1, spacing.0, spacing.2, 0.0, 0.0, 0.0, 0.0];
    for (d, v) in pixdim.iter().enumerate() {
        h[76 + 4 * d..80 + 4 * d].copy_from_slice(&v.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    h[116..120].copy_from_slice(&0.0f32.to_le_bytes()); // scl_inter
    h[123] = 2; // spatial units: millimeters
    h[344..348].copy_from_slice(MAGIC_SINGLE_FILE);
    h
}

/// Write an image volume as 32-bit floats (bit-exact round trip through
/// [`read_volume`]).
pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let mut bytes = header(volume.shape, volume.spacing, DT_FLOAT32, 32);
    bytes.reserve(volume.voxels.len() * 4);
    for v in &volume.voxels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_all_bytes(path, &bytes)
}

/// Write a label volume as unsigned bytes.
pub fn write_labels(path: &Path, labels: &LabelMap, spacing: (f32, f32, f32)) -> Result<()> {
    let mut bytes = header(labels.shape, spacing, DT_UINT8, 8);
    bytes.extend_from_slice(&labels.labels);
    write_all_bytes(path, &bytes)
}
