//! Standardization of volumes into fixed-dimension, z-scored data cubes.
//!
//! Order of operations: in-plane bilinear resample per slice, slice-axis
//! center crop / symmetric zero pad, then per-channel z-score. Statistics
//! are computed over the resampled source slices; padded slices stay exactly
//! zero, so the full-cube mean is exactly zero and the standard deviation is
//! one over the real region (and over the whole cube whenever no padding was
//! needed). A channel whose standard deviation is below 1e-12 is emitted as
//! all zeros.
//!
//! Cube memory layout is `[channel][slice][row][column]`, column fastest;
//! rows/columns map to the volume's y/x axes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::par;
use crate::volume::{self, Volume3D};

pub const CUBE_HEIGHT: usize = 224;
pub const CUBE_WIDTH: usize = 224;
pub const CUBE_DEPTH: usize = 25;

/// Std below this marks a constant channel, which becomes all zeros.
pub const CONSTANT_STD: f64 = 1e-12;

/// The z-score parameters applied to one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelNorm {
    pub mean: f64,
    pub std: f64,
}

/// A normalized `channels x height x width x depth` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCube {
    channels: usize,
    /// (height, width, depth)
    dims: (usize, usize, usize),
    data: Vec<f64>,
    norm: Vec<ChannelNorm>,
}

impl DataCube {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn norm(&self) -> &[ChannelNorm] {
        &self.norm
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Voxels of one channel (`depth * height * width` values).
    pub fn channel(&self, c: usize) -> &[f64] {
        let stride = self.dims.0 * self.dims.1 * self.dims.2;
        &self.data[c * stride..(c + 1) * stride]
    }

    pub fn value(&self, c: usize, d: usize, h: usize, w: usize) -> f64 {
        let (hh, ww, _) = self.dims;
        self.data[((c * self.dims.2 + d) * hh + h) * ww + w]
    }
}

/// Standardizes to the fixed 224 x 224 x 25 shape.
pub fn standardize_cube(volume: &Volume3D) -> DataCube {
    standardize_cube_to(volume, (CUBE_HEIGHT, CUBE_WIDTH, CUBE_DEPTH))
}

/// Standardizes to an arbitrary `(height, width, depth)` cube (the miniature
/// network configurations use small cubes).
pub fn standardize_cube_to(volume: &Volume3D, dims: (usize, usize, usize)) -> DataCube {
    let (height, width, depth) = dims;
    assert!(height > 0 && width > 0 && depth > 0, "cube dims must be >= 1");
    let (nx, ny, nz) = volume.dims();

    // Slice-axis center crop / symmetric zero pad bookkeeping.
    let (src_z0, dst_z0, real_slices) = if nz >= depth {
        ((nz - depth) / 2, 0usize, depth)
    } else {
        (0usize, (depth - nz) / 2, nz)
    };

    let plane = height * width;
    let mut data = vec![0.0f64; depth * plane];

    // Resample each real slice independently.
    par::for_each_chunk_mut(&mut data, plane, |d, slice_out| {
        if d < dst_z0 || d >= dst_z0 + real_slices {
            return; // padded slice stays zero
        }
        let src = volume.slice(src_z0 + (d - dst_z0));
        resample_bilinear(src, (nx, ny), slice_out, (width, height));
    });

    // Z-score over the real region only; pads remain exactly zero.
    let real = &data[dst_z0 * plane..(dst_z0 + real_slices) * plane];
    let n_real = real.len() as f64;
    let mean = real.iter().sum::<f64>() / n_real;
    let var = real.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_real;
    let std = var.sqrt();

    if std < CONSTANT_STD {
        data.fill(0.0);
    } else {
        let range = dst_z0 * plane..(dst_z0 + real_slices) * plane;
        par::for_each_chunk_mut(&mut data[range], 8192, |_, chunk| {
            for v in chunk {
                *v = (*v - mean) / std;
            }
        });
    }

    DataCube {
        channels: 1,
        dims: (height, width, depth),
        data,
        norm: vec![ChannelNorm { mean, std }],
    }
}

/// Bilinear resize of one slice using the pixel-center convention with edge
/// clamping; an identity when source and destination sizes match.
fn resample_bilinear(src: &[f64], src_dims: (usize, usize), dst: &mut [f64], dst_dims: (usize, usize)) {
    let (nx, ny) = src_dims;
    let (ow, oh) = dst_dims;
    let scale_x = nx as f64 / ow as f64;
    let scale_y = ny as f64 / oh as f64;
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0c = (y0 as isize).clamp(0, ny as isize - 1) as usize;
        let y1c = (y0 as isize + 1).clamp(0, ny as isize - 1) as usize;
        let row0 = &src[y0c * nx..y0c * nx + nx];
        let row1 = &src[y1c * nx..y1c * nx + nx];
        let out_row = &mut dst[oy * ow..oy * ow + ow];
        for (ox, out) in out_row.iter_mut().enumerate() {
            let sx = (ox as f64 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0c = (x0 as isize).clamp(0, nx as isize - 1) as usize;
            let x1c = (x0 as isize + 1).clamp(0, nx as isize - 1) as usize;
            let top = row0[x0c] * (1.0 - fx) + row0[x1c] * fx;
            let bot = row1[x0c] * (1.0 - fx) + row1[x1c] * fx;
            *out = top * (1.0 - fy) + bot * fy;
        }
    }
}

/// Stacks single-channel cubes into one multi-channel cube; channel `i`
/// equals input cube `i` and the normalization records carry over.
pub fn stack_channels(cubes: &[DataCube]) -> Result<DataCube> {
    let first = cubes.first().ok_or(CoreError::EmptyStack)?;
    let dims = first.dims;
    let mut data = Vec::with_capacity(cubes.len() * first.data.len());
    let mut norm = Vec::with_capacity(cubes.len());
    for cube in cubes {
        if cube.channels != 1 {
            return Err(CoreError::MultiChannelStackInput { got: cube.channels });
        }
        if cube.dims != dims {
            return Err(CoreError::CubeDimMismatch {
                expected: dims,
                found: cube.dims,
            });
        }
        data.extend_from_slice(&cube.data);
        norm.extend_from_slice(&cube.norm);
    }
    Ok(DataCube {
        channels: cubes.len(),
        dims,
        data,
        norm,
    })
}

/// Writes a cube in the shared header+raw format (kind tag `cube`, channel
/// count and per-channel normalization in the header).
pub fn write_cube(path: impl AsRef<Path>, cube: &DataCube, meta: &str) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (h, wd, d) = cube.dims;
    // Header dims follow the volume convention (x=width, y=height, z=depth).
    volume::write_header(
        &mut w,
        path,
        volume::KIND_CUBE,
        cube.channels as u32,
        (wd, h, d),
        (1.0, 1.0, 1.0),
        meta,
    )?;
    for n in &cube.norm {
        w.write_all(&n.mean.to_le_bytes())
            .and_then(|_| w.write_all(&n.std.to_le_bytes()))
            .map_err(|e| CoreError::io(path, e))?;
    }
    volume::write_f64s(&mut w, path, &cube.data)?;
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<(DataCube, String)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = volume::read_header(&mut r, path)?;
    if header.kind != volume::KIND_CUBE {
        return Err(CoreError::InvalidVolume(format!(
            "{}: expected a cube file, found kind {}",
            path.display(),
            header.kind
        )));
    }
    let channels = header.channels as usize;
    let (wd, h, d) = header.dims;
    let mut norm = Vec::with_capacity(channels);
    for _ in 0..channels {
        let vals = volume::read_f64s(&mut r, path, 2)?;
        norm.push(ChannelNorm {
            mean: vals[0],
            std: vals[1],
        });
    }
    let data = volume::read_f64s(&mut r, path, channels * wd * h * d)?;
    Ok((
        DataCube {
            channels,
            dims: (h, wd, d),
            data,
            norm,
        },
        header.meta,
    ))
}

/// Reads only the metadata string of a cube file.
pub fn read_cube_meta(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    Ok(volume::read_header(&mut r, path)?.meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(dims: (usize, usize, usize)) -> Volume3D {
        let (nx, ny, nz) = dims;
        let mut data = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(x as f64 + 0.5 * y as f64 + 2.0 * z as f64);
                }
            }
        }
        Volume3D::new(dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    #[test]
    fn output_dims_are_fixed() {
        for dims in [(7, 9, 3), (300, 260, 40), (224, 224, 25), (1, 1, 1)] {
            let cube = standardize_cube(&ramp_volume(dims));
            assert_eq!(cube.dims(), (224, 224, 25));
            assert_eq!(cube.channels(), 1);
            assert_eq!(cube.len(), 224 * 224 * 25);
        }
    }

    #[test]
    fn already_normalized_input_is_unchanged() {
        // Build a 224x224x25 volume, standardize once, feed the result back
        // through as a volume: the second pass must be identity to 1e-6.
        let first = standardize_cube(&ramp_volume((224, 224, 25)));
        let vol = Volume3D::new((224, 224, 25), (1.0, 1.0, 1.0), first.data().to_vec()).unwrap();
        let second = standardize_cube(&vol);
        for (a, b) in second.data().iter().zip(first.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_reference_bilinear_interpolator() {
        // Independent oracle written against the same pixel-center convention.
        fn oracle_sample(src: &[f64], nx: usize, ny: usize, x: f64, y: f64) -> f64 {
            let fetch = |xi: isize, yi: isize| -> f64 {
                let xc = xi.max(0).min(nx as isize - 1) as usize;
                let yc = yi.max(0).min(ny as isize - 1) as usize;
                src[yc * nx + xc]
            };
            let xf = x.floor();
            let yf = y.floor();
            let dx = x - xf;
            let dy = y - yf;
            let (xi, yi) = (xf as isize, yf as isize);
            fetch(xi, yi) * (1.0 - dx) * (1.0 - dy)
                + fetch(xi + 1, yi) * dx * (1.0 - dy)
                + fetch(xi, yi + 1) * (1.0 - dx) * dy
                + fetch(xi + 1, yi + 1) * dx * dy
        }

        let vol = ramp_volume((112, 112, 25));
        let cube = standardize_cube(&vol);
        let (nx, ny, _) = vol.dims();

        // Reproduce the full pipeline slice by slice with the oracle.
        for d in [0usize, 12, 24] {
            let src = vol.slice(d);
            let mut expected = vec![0.0f64; 224 * 224];
            for oy in 0..224 {
                for ox in 0..224 {
                    let sx = (ox as f64 + 0.5) * (nx as f64 / 224.0) - 0.5;
                    let sy = (oy as f64 + 0.5) * (ny as f64 / 224.0) - 0.5;
                    expected[oy * 224 + ox] = oracle_sample(src, nx, ny, sx, sy);
                }
            }
            let norm = cube.norm()[0];
            for oy in 0..224 {
                for ox in 0..224 {
                    let want = (expected[oy * 224 + ox] - norm.mean) / norm.std;
                    let got = cube.value(0, d, oy, ox);
                    assert!((got - want).abs() < 1e-6, "mismatch at ({ox},{oy},{d})");
                }
            }
        }
    }

    #[test]
    fn normalization_is_exact_on_unpadded_inputs() {
        for dims in [(64, 48, 25), (100, 90, 31)] {
            let cube = standardize_cube(&ramp_volume(dims));
            let n = cube.len() as f64;
            let mean = cube.data().iter().sum::<f64>() / n;
            let var = cube.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-5, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() <= 1e-5, "std {}", var.sqrt());
        }
    }

    #[test]
    fn padded_slices_are_exactly_zero_and_centered() {
        let cube = standardize_cube(&ramp_volume((32, 32, 10)));
        // 25 - 10 = 15 pad slices: 7 in front, 8 in back.
        let plane = 224 * 224;
        for d in (0..7).chain(17..25) {
            assert!(
                cube.data()[d * plane..(d + 1) * plane].iter().all(|&v| v == 0.0),
                "pad slice {d} not zero"
            );
        }
        // Real region is normalized: mean 0 over the full cube (pads are 0).
        let mean = cube.data().iter().sum::<f64>() / cube.len() as f64;
        assert!(mean.abs() < 1e-9);
        let real = &cube.data()[7 * plane..17 * plane];
        let var = real.iter().map(|v| v * v).sum::<f64>() / real.len() as f64;
        assert!((var.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn crop_takes_the_center_slices() {
        let vol = ramp_volume((8, 8, 31));
        let cube = standardize_cube_to(&vol, (8, 8, 25));
        // 31 -> 25 drops 3 slices at each end: cube slice 0 = source slice 3.
        let norm = cube.norm()[0];
        let want = (vol.get(2, 5, 3) - norm.mean) / norm.std;
        assert!((cube.value(0, 0, 5, 2) - want).abs() < 1e-12);
    }

    #[test]
    fn constant_volume_standardizes_to_zeros() {
        let cube = standardize_cube(&Volume3D::filled((10, 10, 30), (1.0, 1.0, 1.0), 42.0));
        assert!(cube.data().iter().all(|&v| v == 0.0));
        assert_eq!(cube.norm()[0].mean, 42.0);
    }

    #[test]
    fn standardization_is_deterministic() {
        let vol = ramp_volume((33, 47, 11));
        let a = standardize_cube(&vol);
        let b = standardize_cube(&vol);
        assert_eq!(a, b);
    }

    #[test]
    fn stacking_preserves_order_and_checks_inputs() {
        let cubes: Vec<DataCube> = (0..4)
            .map(|i| {
                let mut vol = ramp_volume((16, 16, 25));
                vol.data_mut().iter_mut().for_each(|v| *v += i as f64 * 10.0);
                standardize_cube_to(&vol, (8, 8, 5))
            })
            .collect();
        let stacked = stack_channels(&cubes).unwrap();
        assert_eq!(stacked.channels(), 4);
        for (i, cube) in cubes.iter().enumerate() {
            assert_eq!(stacked.channel(i), cube.data());
        }

        let single = stack_channels(&cubes[..1]).unwrap();
        assert_eq!(single.channels(), 1);
        assert_eq!(single.data(), cubes[0].data());

        // Permuting inputs permutes channels identically.
        let perm = [2usize, 0, 3, 1];
        let reordered: Vec<DataCube> = perm.iter().map(|&i| cubes[i].clone()).collect();
        let restacked = stack_channels(&reordered).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            assert_eq!(restacked.channel(slot), cubes[src].data());
        }

        assert!(matches!(stack_channels(&[]), Err(CoreError::EmptyStack)));
        let odd = standardize_cube_to(&ramp_volume((4, 4, 4)), (4, 4, 4));
        assert!(matches!(
            stack_channels(&[cubes[0].clone(), odd]),
            Err(CoreError::CubeDimMismatch { .. })
        ));
        assert!(matches!(
            stack_channels(&[stacked.clone()]),
            Err(CoreError::MultiChannelStackInput { got: 4 })
        ));
    }

    #[test]
    fn cube_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cubes: Vec<DataCube> = (0..2)
            .map(|i| {
                let mut vol = ramp_volume((12, 10, 7));
                vol.data_mut().iter_mut().for_each(|v| *v *= 1.0 + i as f64);
                standardize_cube_to(&vol, (6, 5, 5))
            })
            .collect();
        let stacked = stack_channels(&cubes).unwrap();
        let path = dir.path().join("c.cube");
        write_cube(&path, &stacked, "meta!").unwrap();
        let (back, meta) = read_cube(&path).unwrap();
        assert_eq!(back, stacked);
        assert_eq!(meta, "meta!");
        assert_eq!(read_cube_meta(&path).unwrap(), "meta!");
    }
}
