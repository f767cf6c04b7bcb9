//! MetaImage (`.mha`, single-file LOCAL form) reading and writing.
//!
//! Supports scalar volumes (`MET_UCHAR`, `MET_SHORT`, `MET_USHORT`, `MET_INT`,
//! `MET_FLOAT`, `MET_DOUBLE`) and 3-channel vector volumes. Data is raw
//! little-endian, x-fastest; channels are interleaved per voxel.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Geometry, Image3D, Mask3D};
use crate::registration::DeformationField;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    UChar,
    Short,
    UShort,
    Int,
    Float,
    Double,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::UChar => "MET_UCHAR",
            ElementType::Short => "MET_SHORT",
            ElementType::UShort => "MET_USHORT",
            ElementType::Int => "MET_INT",
            ElementType::Float => "MET_FLOAT",
            ElementType::Double => "MET_DOUBLE",
        }
    }

    fn parse(tag: &str) -> Option<Self> {
        Some(match tag {
            "MET_UCHAR" => ElementType::UChar,
            "MET_SHORT" => ElementType::Short,
            "MET_USHORT" => ElementType::UShort,
            "MET_INT" => ElementType::Int,
            "MET_FLOAT" => ElementType::Float,
            "MET_DOUBLE" => ElementType::Double,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ElementType::UChar => 1,
            ElementType::Short | ElementType::UShort => 2,
            ElementType::Int | ElementType::Float => 4,
            ElementType::Double => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            ElementType::UChar => b[0] as f64,
            ElementType::Short => i16::from_le_bytes([b[0], b[1]]) as f64,
            ElementType::UShort => u16::from_le_bytes([b[0], b[1]]) as f64,
            ElementType::Int => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ElementType::Float => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ElementType::Double => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            ElementType::UChar => out.push(v.round().clamp(0.0, 255.0) as u8),
            ElementType::Short => out.extend_from_slice(&(v.round().clamp(-32768.0, 32767.0) as i16).to_le_bytes()),
            ElementType::UShort => out.extend_from_slice(&(v.round().clamp(0.0, 65535.0) as u16).to_le_bytes()),
            ElementType::Int => out.extend_from_slice(&(v.round() as i32).to_le_bytes()),
            ElementType::Float => out.extend_from_slice(&(v as f32).to_le_bytes()),
            ElementType::Double => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

/// Raw decoded volume: geometry, channel count, widened voxel values.
#[derive(Clone, Debug)]
pub struct MetaVolume {
    pub geometry: Geometry,
    pub channels: usize,
    pub element_type: ElementType,
    pub data: Vec<f64>,
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn parse_numbers<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<Vec<T>> {
    v.split_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| fmt_err(path, format!("bad {key} value {t:?}"))))
        .collect()
}

fn three<T: Copy>(path: &Path, key: &str, v: Vec<T>) -> Result<[T; 3]> {
    v.try_into()
        .map_err(|_| fmt_err(path, format!("{key} must have 3 entries")))
}

pub fn read_bytes(path: &Path, bytes: &[u8]) -> Result<MetaVolume> {
    let mut pos = 0usize;
    let mut dims = None;
    let mut spacing = [1.0; 3];
    let mut origin = [0.0; 3];
    let mut channels = 1usize;
    let mut etype = None;
    let mut msb = false;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err(path, "header ended before ElementDataFile"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| fmt_err(path, "non-UTF8 header"))?
            .trim();
        pos += end + 1;
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(path, format!("header line without '=': {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "ObjectType" if value != "Image" => {
                return Err(fmt_err(path, format!("unsupported ObjectType {value}")));
            }
            "NDims" if value != "3" => {
                return Err(fmt_err(path, format!("only NDims = 3 supported, got {value}")));
            }
            "DimSize" => dims = Some(three(path, key, parse_numbers::<usize>(path, key, value)?)?),
            "ElementSpacing" | "ElementSize" => spacing = three(path, key, parse_numbers(path, key, value)?)?,
            "Offset" | "Origin" | "Position" => origin = three(path, key, parse_numbers(path, key, value)?)?,
            "ElementNumberOfChannels" => {
                channels = value.parse().map_err(|_| fmt_err(path, "bad ElementNumberOfChannels"))?
            }
            "ElementType" => {
                etype = Some(
                    ElementType::parse(value)
                        .ok_or_else(|| fmt_err(path, format!("unsupported ElementType {value}")))?,
                )
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => msb = value.eq_ignore_ascii_case("true"),
            "CompressedData" if value.eq_ignore_ascii_case("true") => {
                return Err(fmt_err(path, "compressed data not supported"));
            }
            "TransformMatrix" | "Orientation" | "Rotation" => {
                let m: Vec<f64> = parse_numbers(path, key, value)?;
                let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
                if m.len() != 9 || m.iter().zip(identity).any(|(a, b)| (a - b).abs() > 1e-6) {
                    return Err(fmt_err(path, "only identity orientation supported"));
                }
            }
            "ElementDataFile" => {
                if value != "LOCAL" {
                    return Err(fmt_err(path, "only ElementDataFile = LOCAL supported"));
                }
                break;
            }
            _ => {}
        }
    }
    if msb {
        return Err(fmt_err(path, "big-endian data not supported"));
    }
    let dims = dims.ok_or_else(|| fmt_err(path, "missing DimSize"))?;
    let etype = etype.ok_or_else(|| fmt_err(path, "missing ElementType"))?;
    let geometry = Geometry::new(dims, spacing, origin).map_err(|e| fmt_err(path, e.to_string()))?;
    let n = geometry.len() * channels;
    let need = n * etype.size();
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(fmt_err(path, format!("expected {need} data bytes, found {}", payload.len())));
    }
    let data = payload[..need].chunks_exact(etype.size()).map(|b| etype.decode(b)).collect();
    Ok(MetaVolume {
        geometry,
        channels,
        element_type: etype,
        data,
    })
}

pub fn read(path: impl AsRef<Path>) -> Result<MetaVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_bytes(path, &bytes)
}

pub fn encode(geom: &Geometry, channels: usize, etype: ElementType, data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(256 + data.len() * etype.size());
    let f = |v: [f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n\
         TransformMatrix = 1 0 0 0 1 0 0 0 1\nOffset = {}\nElementSpacing = {}\nDimSize = {} {} {}\n{}ElementType = {}\nElementDataFile = LOCAL\n",
        f(geom.origin),
        f(geom.spacing),
        geom.dims[0],
        geom.dims[1],
        geom.dims[2],
        if channels > 1 {
            format!("ElementNumberOfChannels = {channels}\n")
        } else {
            String::new()
        },
        etype.tag()
    );
    out.extend_from_slice(header.as_bytes());
    for &v in data {
        etype.encode(v, &mut out);
    }
    out
}

fn write_raw(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image3D> {
    let path = path.as_ref();
    let vol = read(path)?;
    if vol.channels != 1 {
        return Err(fmt_err(path, format!("expected scalar image, found {} channels", vol.channels)));
    }
    Image3D::new(vol.geometry, vol.data)
}

/// Any nonzero voxel is foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask3D> {
    let img = read_image(path)?;
    Mask3D::new(*img.geometry(), img.data().iter().map(|&v| v != 0.0).collect())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    let path = path.as_ref();
    let vol = read(path)?;
    if vol.channels != 3 {
        return Err(fmt_err(path, format!("expected 3-channel field, found {}", vol.channels)));
    }
    let vectors = vol.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    DeformationField::new(vol.geometry, vectors)
}

pub fn write_image(path: impl AsRef<Path>, img: &Image3D, etype: ElementType) -> Result<()> {
    write_raw(path.as_ref(), &encode(img.geometry(), 1, etype, img.data()))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask3D) -> Result<()> {
    write_image(path, &mask.to_image(), ElementType::UChar)
}

/// Writes a displacement field as a 3-channel `MET_FLOAT` volume.
pub fn write_field(path: impl AsRef<Path>, field: &DeformationField) -> Result<()> {
    let flat: Vec<f64> = field.vectors().iter().flat_map(|v| v.iter().copied()).collect();
    write_raw(path.as_ref(), &encode(field.geometry(), 3, ElementType::Float, &flat))
}
