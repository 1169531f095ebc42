//! MetaImage (`.mhd` + `.raw`, or single-file `.mha`) reader and writer.
//!
//! Only uncompressed little-endian `MET_FLOAT` payloads are supported.
//! Vector fields are stored with `ElementNumberOfChannels = NDims` and
//! interleaved components, x varying fastest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::LabelImage;
use crate::field::{Grid, ScalarImage, VectorField};

#[derive(Clone, Debug, PartialEq)]
pub struct MetaImage {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl MetaImage {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(&self.dims, &self.spacing)
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| Error::format(format!("bad value '{t}' for {key}"))))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::format(format!("bad boolean '{value}' for {key}"))),
    }
}

/// Reads a MetaImage header and its payload.
pub fn read(path: impl AsRef<Path>) -> Result<MetaImage> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;

    let mut ndims: Option<usize> = None;
    let mut dims: Option<Vec<usize>> = None;
    let mut spacing: Option<Vec<f64>> = None;
    let mut channels = 1usize;
    let mut element_type: Option<String> = None;
    let mut data_file: Option<String> = None;
    let mut payload_offset = 0usize;

    // Header lines up to and including ElementDataFile.
    let mut pos = 0usize;
    while pos < bytes.len() {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| Error::format(format!("{}: header is not valid text", path.display())))?
            .trim();
        pos = (end + 1).min(bytes.len());
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::format(format!("{}: header line without '=': {line}", path.display())))?;
        match key {
            "NDims" => {
                ndims = Some(value.parse().map_err(|_| Error::format(format!("bad NDims '{value}'")))?)
            }
            "DimSize" => dims = Some(parse_list(key, value)?),
            "ElementSpacing" => spacing = Some(parse_list(key, value)?),
            "ElementNumberOfChannels" => {
                channels = value
                    .parse()
                    .map_err(|_| Error::format(format!("bad ElementNumberOfChannels '{value}'")))?
            }
            "ElementType" => element_type = Some(value.to_string()),
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                if parse_bool(key, value)? {
                    return Err(Error::format("big-endian payloads are not supported"));
                }
            }
            "CompressedData" => {
                if parse_bool(key, value)? {
                    return Err(Error::format("compressed payloads are not supported"));
                }
            }
            "HeaderSize" => {
                if value != "0" {
                    return Err(Error::format("HeaderSize other than 0 is not supported"));
                }
            }
            "ElementDataFile" => {
                data_file = Some(value.to_string());
                payload_offset = pos;
                break;
            }
            // ObjectType, BinaryData, Offset, TransformMatrix, ... carry no
            // information this reader uses.
            _ => {}
        }
    }

    let ndims = ndims.ok_or_else(|| Error::format("missing NDims"))?;
    let dims = dims.ok_or_else(|| Error::format("missing DimSize"))?;
    let spacing = spacing.unwrap_or_else(|| vec![1.0; ndims]);
    if dims.len() != ndims || spacing.len() != ndims {
        return Err(Error::format("DimSize/ElementSpacing length disagrees with NDims"));
    }
    match element_type.as_deref() {
        Some("MET_FLOAT") => {}
        Some(other) => return Err(Error::format(format!("unsupported ElementType {other}"))),
        None => return Err(Error::format("missing ElementType")),
    }
    let data_file = data_file.ok_or_else(|| Error::format("missing ElementDataFile"))?;
    if channels == 0 {
        return Err(Error::format("ElementNumberOfChannels must be positive"));
    }

    let count = dims.iter().product::<usize>() * channels;
    let raw: Vec<u8> = if data_file == "LOCAL" {
        bytes[payload_offset..].to_vec()
    } else {
        let p = Path::new(&data_file);
        let full = if p.is_absolute() {
            p.to_path_buf()
        } else {
            path.parent().unwrap_or_else(|| Path::new(".")).join(p)
        };
        fs::read(&full)?
    };
    if raw.len() < count * 4 {
        return Err(Error::format(format!(
            "payload holds {} bytes, expected {}",
            raw.len(),
            count * 4
        )));
    }
    let data: Vec<f32> = raw[..count * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(MetaImage { dims, spacing, channels, data })
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes `img` to `path`. A `.mha` extension produces a single file with a
/// `LOCAL` payload; anything else gets a sibling `.raw` file. Returns every
/// path written.
pub fn write(path: impl AsRef<Path>, img: &MetaImage) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let local = path.extension().is_some_and(|e| e == "mha");
    let raw_path = path.with_extension("raw");
    let data_file = if local {
        "LOCAL".to_string()
    } else {
        raw_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::format("output path has no file name"))?
    };
    let mut header = String::new();
    header.push_str("ObjectType = Image\n");
    header.push_str(&format!("NDims = {}\n", img.dims.len()));
    header.push_str("BinaryData = True\n");
    header.push_str("BinaryDataByteOrderMSB = False\n");
    header.push_str("CompressedData = False\n");
    header.push_str(&format!("DimSize = {}\n", fmt_list(&img.dims)));
    header.push_str(&format!("ElementSpacing = {}\n", fmt_list(&img.spacing)));
    header.push_str(&format!("ElementNumberOfChannels = {}\n", img.channels));
    header.push_str("ElementType = MET_FLOAT\n");
    header.push_str(&format!("ElementDataFile = {data_file}\n"));

    let mut payload = Vec::with_capacity(img.data.len() * 4);
    for v in &img.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }

    if local {
        let mut f = fs::File::create(path)?;
        f.write_all(header.as_bytes())?;
        f.write_all(&payload)?;
        Ok(vec![path.to_path_buf()])
    } else {
        fs::write(path, header)?;
        fs::write(&raw_path, payload)?;
        Ok(vec![path.to_path_buf(), raw_path])
    }
}

fn widen(data: &[f32]) -> Vec<f64> {
    data.iter().map(|&v| v as f64).collect()
}

fn narrow(data: &[f64]) -> Vec<f32> {
    data.iter().map(|&v| v as f32).collect()
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ScalarImage> {
    let m = read(path)?;
    if m.channels != 1 {
        return Err(Error::format(format!("expected a scalar image, found {} channels", m.channels)));
    }
    ScalarImage::new(m.grid()?, widen(&m.data))
        .map_err(|e| Error::format(format!("invalid image payload: {e}")))
}

pub fn write_image(path: impl AsRef<Path>, img: &ScalarImage) -> Result<Vec<PathBuf>> {
    let g = img.grid();
    write(
        path,
        &MetaImage {
            dims: g.dims().to_vec(),
            spacing: g.spacing().to_vec(),
            channels: 1,
            data: narrow(img.data()),
        },
    )
}

pub fn read_field(path: impl AsRef<Path>) -> Result<VectorField> {
    let m = read(path)?;
    if m.channels != m.dims.len() {
        return Err(Error::format(format!(
            "vector field needs {} channels, found {}",
            m.dims.len(),
            m.channels
        )));
    }
    VectorField::new(m.grid()?, widen(&m.data))
        .map_err(|e| Error::format(format!("invalid vector payload: {e}")))
}

pub fn write_field(path: impl AsRef<Path>, field: &VectorField) -> Result<Vec<PathBuf>> {
    let g = field.grid();
    write(
        path,
        &MetaImage {
            dims: g.dims().to_vec(),
            spacing: g.spacing().to_vec(),
            channels: g.ndim(),
            data: narrow(field.data()),
        },
    )
}

/// Reads a float image whose samples must all be non-negative integers.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelImage> {
    let m = read(path)?;
    if m.channels != 1 {
        return Err(Error::format("label images must have one channel"));
    }
    let mut labels = Vec::with_capacity(m.data.len());
    for &v in &m.data {
        if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32) {
            return Err(Error::format(format!("label image holds non-integer value {v}")));
        }
        labels.push(v as u32);
    }
    LabelImage::new(m.grid()?, labels)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelImage) -> Result<Vec<PathBuf>> {
    let g = labels.grid();
    write(
        path,
        &MetaImage {
            dims: g.dims().to_vec(),
            spacing: g.spacing().to_vec(),
            channels: 1,
            data: labels.data().iter().map(|&l| l as f32).collect(),
        },
    )
}
