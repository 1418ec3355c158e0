//! 3-D intensity volumes and the self-describing header+raw file format.
//!
//! Layout is x-fastest: `data[x + nx*(y + ny*z)]`, so a z-slice is one
//! contiguous `nx*ny` plane. Files carry a magic, a dtype tag, grid dims,
//! voxel spacing in mm, and a free-form UTF-8 metadata string (used by the
//! pipeline to embed the config fingerprint and tool version); cube files
//! (see [`crate::cube`]) share the same header with a different `kind` tag.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

pub(crate) const MAGIC: &[u8; 8] = b"CDISVOL1";
pub(crate) const DTYPE_F64: u16 = 1;
pub(crate) const KIND_VOLUME: u16 = 0;
pub(crate) const KIND_CUBE: u16 = 1;

/// A real-valued volume on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    data: Vec<f64>,
}

impl Volume3D {
    /// Validates dims >= 1, spacing > 0, finite intensities, and length.
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        data: Vec<f64>,
    ) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(CoreError::InvalidVolume(format!(
                "all dims must be >= 1, got {dims:?}"
            )));
        }
        let (sx, sy, sz) = spacing;
        if !(sx > 0.0 && sy > 0.0 && sz > 0.0)
            || !sx.is_finite()
            || !sy.is_finite()
            || !sz.is_finite()
        {
            return Err(CoreError::InvalidVolume(format!(
                "all spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if data.len() != nx * ny * nz {
            return Err(CoreError::InvalidVolume(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::InvalidVolume(format!(
                "non-finite intensity at voxel {i}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    /// A constant-intensity volume.
    pub fn filled(dims: (usize, usize, usize), spacing: (f64, f64, f64), value: f64) -> Self {
        let n = dims.0 * dims.1 * dims.2;
        Self::new(dims, spacing, vec![value; n]).expect("filled volume is valid")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// One contiguous z-slice (`nx * ny` values).
    pub fn slice(&self, z: usize) -> &[f64] {
        let plane = self.dims.0 * self.dims.1;
        &self.data[z * plane..(z + 1) * plane]
    }

    /// True when `other` lives on the same grid (dims and spacing).
    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }
}

/// Writes `vol` with an embedded metadata string.
pub fn write_volume(path: impl AsRef<Path>, vol: &Volume3D, meta: &str) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (nx, ny, nz) = vol.dims;
    write_header(&mut w, path, KIND_VOLUME, 1, (nx, ny, nz), vol.spacing, meta)?;
    write_f64s(&mut w, path, &vol.data)?;
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Reads a volume and its metadata string.
pub fn read_volume(path: impl AsRef<Path>) -> Result<(Volume3D, String)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r, path)?;
    if header.kind != KIND_VOLUME {
        return Err(CoreError::InvalidVolume(format!(
            "{}: expected a volume file, found kind {}",
            path.display(),
            header.kind
        )));
    }
    let (nx, ny, nz) = header.dims;
    let data = read_f64s(&mut r, path, header.channels as usize * nx * ny * nz)?;
    let vol = Volume3D::new(header.dims, header.spacing, data)?;
    Ok((vol, header.meta))
}

/// Reads only the metadata string (cheap cache checks).
pub fn read_volume_meta(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    Ok(read_header(&mut r, path)?.meta)
}

pub(crate) struct Header {
    pub kind: u16,
    pub channels: u32,
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub meta: String,
}

pub(crate) fn write_header<W: Write>(
    w: &mut W,
    path: &Path,
    kind: u16,
    channels: u32,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    meta: &str,
) -> Result<()> {
    let err = |e| CoreError::io(path, e);
    w.write_all(MAGIC).map_err(err)?;
    w.write_all(&DTYPE_F64.to_le_bytes()).map_err(err)?;
    w.write_all(&kind.to_le_bytes()).map_err(err)?;
    w.write_all(&channels.to_le_bytes()).map_err(err)?;
    for d in [dims.0, dims.1, dims.2] {
        w.write_all(&(d as u32).to_le_bytes()).map_err(err)?;
    }
    for s in [spacing.0, spacing.1, spacing.2] {
        w.write_all(&s.to_le_bytes()).map_err(err)?;
    }
    let meta_bytes = meta.as_bytes();
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())
        .map_err(err)?;
    w.write_all(meta_bytes).map_err(err)
}

pub(crate) fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<Header> {
    let mut magic = [0u8; 8];
    read_exact(r, path, &mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::BadMagic { path: path.into() });
    }
    let dtype = read_u16(r, path)?;
    if dtype != DTYPE_F64 {
        return Err(CoreError::UnsupportedDtype {
            path: path.into(),
            dtype,
        });
    }
    let kind = read_u16(r, path)?;
    let channels = read_u32(r, path)?;
    let nx = read_u32(r, path)? as usize;
    let ny = read_u32(r, path)? as usize;
    let nz = read_u32(r, path)? as usize;
    let sx = read_f64(r, path)?;
    let sy = read_f64(r, path)?;
    let sz = read_f64(r, path)?;
    let meta_len = read_u32(r, path)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(r, path, &mut meta_bytes)?;
    let meta = String::from_utf8(meta_bytes)
        .map_err(|_| CoreError::InvalidVolume(format!("{}: metadata is not UTF-8", path.display())))?;
    Ok(Header {
        kind,
        channels,
        dims: (nx, ny, nz),
        spacing: (sx, sy, sz),
        meta,
    })
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len().min(1 << 16) * 8);
    for chunk in values.chunks(1 << 13) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| CoreError::io(path, e))?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, path: &Path, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, path, &mut bytes)?;
    let mut out = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(8) {
        out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(out)
}

fn read_exact<R: Read>(r: &mut R, path: &Path, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CoreError::Truncated { path: path.into() }
        } else {
            CoreError::io(path, e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, path, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, path, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, path, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
