//! On-disk formats.
//!
//! Tensor files (`.tnsr`) are laid out as:
//!
//! ```text
//! magic    8 bytes  "CNG3TNSR"
//! version  u32 LE   1
//! dtype    u8       0 = f32
//! rank     u8
//! dims     rank × u32 LE
//! payload  product(dims) × f32 LE, row-major (last dimension fastest)
//! ```
//!
//! Images are binary netpbm: PPM (`P6`) for color, PGM (`P5`) for masks,
//! both 8-bit. Fields, manifests, poses and keypoints are JSON.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Aabb, VoxelField};
use crate::geometry::CameraPose;
use crate::raster::Image;
use crate::render::NocsImage;

pub const TENSOR_MAGIC: &[u8; 8] = b"CNG3TNSR";
pub const TENSOR_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::SizeMismatch(format!("dims {dims:?} imply {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    if t.dims.len() > u8::MAX as usize || t.dims.iter().any(|d| *d > u32::MAX as usize) {
        return Err(Error::UnsupportedFormat("tensor rank or dimension too large".into()));
    }
    let mut out = Vec::with_capacity(14 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.dims.len() as u8);
    for d in &t.dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let short = |what: &str| Error::SizeMismatch(format!("file ends inside the {what}"));
    if bytes.len() < 8 {
        return Err(if TENSOR_MAGIC.starts_with(bytes) {
            short("magic")
        } else {
            Error::BadMagic
        });
    }
    if &bytes[..8] != TENSOR_MAGIC {
        return Err(Error::BadMagic);
    }
    let header = bytes.get(8..14).ok_or_else(|| short("header"))?;
    let version = u32::from_le_bytes(header[..4].try_into().expect("4 bytes"));
    if version != TENSOR_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if header[4] != DTYPE_F32 {
        return Err(Error::UnsupportedFormat(format!("tensor dtype {}", header[4])));
    }
    let rank = header[5] as usize;
    let dim_bytes = bytes.get(14..14 + 4 * rank).ok_or_else(|| short("dimension list"))?;
    let dims: Vec<usize> = dim_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| Error::SizeMismatch(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[14 + 4 * rank..];
    if count.checked_mul(4) != Some(payload.len()) {
        return Err(Error::SizeMismatch(format!(
            "dims {dims:?} need {} payload bytes, found {}",
            count.saturating_mul(4),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_tensor(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// `H × W × C` tensor of an image.
pub fn image_to_tensor(img: &Image) -> Tensor {
    Tensor {
        dims: vec![img.height(), img.width(), img.channels()],
        data: img.data().iter().map(|v| *v as f32).collect(),
    }
}

/// Accepts `H × W × C` or `H × W` (one channel).
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let (h, w, c) = match t.dims[..] {
        [h, w, c] => (h, w, c),
        [h, w] => (h, w, 1),
        _ => return Err(Error::ShapeMismatch(format!("expected an image tensor, got dims {:?}", t.dims))),
    };
    Image::from_vec(w, h, c, t.data.iter().map(|v| *v as f64).collect())
}

pub fn write_image_tensor(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_tensor(path, &image_to_tensor(img))
}

pub fn read_image_tensor(path: impl AsRef<Path>) -> Result<Image> {
    tensor_to_image(&read_tensor(path)?)
}

/// NOCS stored as `H × W × 4`, the last channel 1 for valid pixels.
pub fn write_nocs(path: impl AsRef<Path>, nocs: &NocsImage) -> Result<()> {
    write_image_tensor(path, &nocs.to_packed())
}

pub fn read_nocs(path: impl AsRef<Path>) -> Result<NocsImage> {
    NocsImage::from_packed(&read_image_tensor(path)?)
}

struct PnmHeader {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_pnm(bytes: &[u8], magic: &[u8; 2]) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::UnsupportedFormat(format!(
            "expected netpbm {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::UnsupportedFormat("truncated netpbm header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnsupportedFormat("malformed netpbm header".into()))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::UnsupportedFormat("malformed netpbm header".into()));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!("netpbm maxval {maxval}; only 8-bit is supported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::UnsupportedFormat("netpbm image is empty".into()));
    }
    Ok(PnmHeader {
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

fn decode_pnm(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Image> {
    let h = parse_pnm(bytes, magic)?;
    let n = h.width * h.height * channels;
    let payload = &bytes[h.data_start..];
    if payload.len() < n {
        return Err(Error::SizeMismatch(format!("netpbm payload has {} of {n} bytes", payload.len())));
    }
    let scale = h.maxval as f64;
    Image::from_vec(
        h.width,
        h.height,
        channels,
        payload[..n].iter().map(|b| (*b as f64 / scale).min(1.0)).collect(),
    )
}

fn encode_pnm(img: &Image, magic: &str) -> Vec<u8> {
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Color image with values in `[0, 1]`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_pnm(&fs::read(path).map_err(|e| Error::io(path, e))?, b"P6", 3)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    if img.channels() != 3 {
        return Err(Error::ShapeMismatch(format!("PPM needs 3 channels, got {}", img.channels())));
    }
    fs::write(path, encode_pnm(img, "P6")).map_err(|e| Error::io(path, e))
}

/// Single-channel mask with values in `[0, 1]`.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_pnm(&fs::read(path).map_err(|e| Error::io(path, e))?, b"P5", 1)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    if img.channels() != 1 {
        return Err(Error::ShapeMismatch(format!("PGM needs 1 channel, got {}", img.channels())));
    }
    fs::write(path, encode_pnm(img, "P5")).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// JSON description of a voxel field; channel paths are relative to the
/// JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldFile {
    pub resolution: [usize; 3],
    pub domain_min: [f64; 3],
    pub domain_max: [f64; 3],
    pub channels: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_descriptor: Option<Vec<f64>>,
}

/// Writes `<dir>/field.json` with density, color and descriptor tensors.
pub fn write_field(dir: impl AsRef<Path>, field: &VoxelField) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [nx, ny, nz] = field.resolution();
    let mut channels = BTreeMap::new();
    write_tensor(
        dir.join("density.tnsr"),
        &Tensor::new(vec![nx, ny, nz], field.density_grid().to_vec())?,
    )?;
    channels.insert("density".to_string(), PathBuf::from("density.tnsr"));
    write_tensor(
        dir.join("color.tnsr"),
        &Tensor::new(vec![nx, ny, nz, 3], field.color_grid().to_vec())?,
    )?;
    channels.insert("color".to_string(), PathBuf::from("color.tnsr"));
    if let Some(desc) = field.descriptor_grid() {
        write_tensor(
            dir.join("descriptors.tnsr"),
            &Tensor::new(vec![nx, ny, nz, field.descriptor_dim()], desc.to_vec())?,
        )?;
        channels.insert("descriptors".to_string(), PathBuf::from("descriptors.tnsr"));
    }
    let file = FieldFile {
        resolution: field.resolution(),
        domain_min: field.domain().min.into(),
        domain_max: field.domain().max.into(),
        channels,
        background_descriptor: field.background_descriptor().map(|b| b.to_vec()),
    };
    let path = dir.join("field.json");
    write_json(&path, &file)?;
    Ok(path)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<VoxelField> {
    let path = path.as_ref();
    let file: FieldFile = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let [nx, ny, nz] = file.resolution;
    let load = |name: &'static str, trailing: Option<usize>| -> Result<Option<Tensor>> {
        let Some(p) = file.channels.get(name) else {
            return Ok(None);
        };
        let t = read_tensor(resolve(base, p))?;
        let ok = match trailing {
            None => t.dims == [nx, ny, nz],
            Some(c) => t.dims.len() == 4 && t.dims[..3] == [nx, ny, nz] && (c == 0 || t.dims[3] == c),
        };
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "{name} tensor dims {:?} do not match resolution {:?}",
                t.dims, file.resolution
            )));
        }
        Ok(Some(t))
    };
    let density = load("density", None)?.ok_or(Error::MissingChannel("density"))?;
    let color = match load("color", Some(3))? {
        Some(t) => t.data,
        None => vec![0.0; nx * ny * nz * 3],
    };
    let descriptors = load("descriptors", Some(0))?.map(|t| (t.dims[3], t.data));
    let domain = Aabb::new(Vector3::from(file.domain_min), Vector3::from(file.domain_max))?;
    let field = VoxelField::new(file.resolution, domain, density.data, color, descriptors)?;
    match file.background_descriptor {
        Some(bg) => field.with_background_descriptor(bg),
        None => Ok(field),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub features_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ManifestEntry>,
}

impl Manifest {
    /// Loads a manifest, resolving relative paths against its directory and
    /// checking that ids are unique and referenced files exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Manifest = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut ids = HashSet::new();
        for e in &mut m.images {
            if !ids.insert(e.id.clone()) {
                return Err(Error::Invalid(format!("duplicate image id {:?}", e.id)));
            }
            for p in [&mut e.image_path, &mut e.mask_path, &mut e.features_path]
                .into_iter()
                .chain(e.pose_path.as_mut())
            {
                *p = resolve(base, p);
                if !p.exists() {
                    return Err(Error::Invalid(format!("{}: referenced file is missing", p.display())));
                }
            }
        }
        Ok(m)
    }
}

pub fn read_pose(path: impl AsRef<Path>) -> Result<CameraPose> {
    read_json(path)
}

pub fn write_pose(path: impl AsRef<Path>, pose: &CameraPose) -> Result<()> {
    write_json(path, pose)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub id: String,
    pub pose: CameraPose,
}

/// Pixel locations in one image; `None` marks a point with no location
/// (not visible, or a failed transfer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub image_id: String,
    pub points: Vec<Option<[f64; 2]>>,
}
