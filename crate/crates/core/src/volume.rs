//! Volumetric images: in-memory representation, intensity windowing,
//! trilinear resampling, and the MVOL file format.
//!
//! Voxels are stored row-major as `(slice, row, column)`: voxel `(z, y, x)`
//! of a `depth x height x width` volume lives at `z*height*width + y*width + x`.
//! In-memory values are f64; MVOL files store little-endian f32.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::ioutil::atomic_write;

/// Lower edge of the intensity window, in Hounsfield units.
pub const HU_LO: f64 = -1000.0;
/// Upper edge of the intensity window, in Hounsfield units.
pub const HU_HI: f64 = 1000.0;

const MVOL_MAGIC: &[u8] = b"MVOL1\n";
/// Guard against absurd headers before allocating.
const MAX_VOXELS: usize = 1 << 31;

#[derive(Debug)]
pub enum VolumeError {
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed MVOL content; `detail` says what was wrong.
    Format { path: PathBuf, detail: String },
    /// `hu_window` applied to a volume that is already windowed.
    AlreadyWindowed,
    /// A zero dimension, or dimensions whose product overflows the guard.
    BadDims { depth: usize, height: usize, width: usize },
    DataLength { expected: usize, got: usize },
}

impl fmt::Display for VolumeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolumeError::Io { path, source } => {
                write!(f, "i/o on {}: {source}", path.display())
            }
            VolumeError::Format { path, detail } => {
                write!(f, "malformed volume file {}: {detail}", path.display())
            }
            VolumeError::AlreadyWindowed => {
                write!(f, "volume is already windowed to [0, 1]")
            }
            VolumeError::BadDims { depth, height, width } => {
                write!(f, "invalid volume dimensions {depth}x{height}x{width}")
            }
            VolumeError::DataLength { expected, got } => {
                write!(f, "voxel buffer length {got} does not match dimensions ({expected})")
            }
        }
    }
}

impl std::error::Error for VolumeError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            VolumeError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    depth: usize,
    height: usize,
    width: usize,
    voxels: Vec<f64>,
    windowed: bool,
}

impl Volume {
    pub fn new(
        depth: usize,
        height: usize,
        width: usize,
        voxels: Vec<f64>,
        windowed: bool,
    ) -> Result<Self, VolumeError> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(VolumeError::BadDims { depth, height, width });
        }
        let expected = depth
            .checked_mul(height)
            .and_then(|p| p.checked_mul(width))
            .filter(|&p| p <= MAX_VOXELS)
            .ok_or(VolumeError::BadDims { depth, height, width })?;
        if voxels.len() != expected {
            return Err(VolumeError::DataLength { expected, got: voxels.len() });
        }
        Ok(Volume { depth, height, width, voxels, windowed })
    }

    pub fn zeros(depth: usize, height: usize, width: usize) -> Result<Self, VolumeError> {
        let n = depth
            .checked_mul(height)
            .and_then(|p| p.checked_mul(width))
            .filter(|&p| p > 0 && p <= MAX_VOXELS)
            .ok_or(VolumeError::BadDims { depth, height, width })?;
        Ok(Volume { depth, height, width, voxels: vec![0.0; n], windowed: false })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_windowed(&self) -> bool {
        self.windowed
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxel(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels[(z * self.height + y) * self.width + x]
    }

    pub fn voxel_mut(&mut self, z: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.voxels[(z * self.height + y) * self.width + x]
    }

    /// One slice as a `height x width` row-major view.
    pub fn slice(&self, z: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.voxels[z * hw..(z + 1) * hw]
    }

    /// Clamps raw intensities to [HU_LO, HU_HI] and maps the window linearly
    /// onto [0, 1]. Refuses to window twice.
    pub fn hu_window(&self) -> Result<Volume, VolumeError> {
        if self.windowed {
            return Err(VolumeError::AlreadyWindowed);
        }
        let span = HU_HI - HU_LO;
        let voxels = self
            .voxels
            .iter()
            .map(|&v| (v.clamp(HU_LO, HU_HI) - HU_LO) / span)
            .collect();
        Ok(Volume {
            depth: self.depth,
            height: self.height,
            width: self.width,
            voxels,
            windowed: true,
        })
    }

    /// Trilinear resample onto a new grid with corner alignment: the first
    /// and last samples of each axis map onto the first and last inputs, so
    /// resizing to the same dimensions reproduces the volume exactly.
    pub fn resize(
        &self,
        depth: usize,
        height: usize,
        width: usize,
    ) -> Result<Volume, VolumeError> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(VolumeError::BadDims { depth, height, width });
        }
        depth
            .checked_mul(height)
            .and_then(|p| p.checked_mul(width))
            .filter(|&p| p <= MAX_VOXELS)
            .ok_or(VolumeError::BadDims { depth, height, width })?;

        let axis_pos = |out_i: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
            if out_n == 1 || in_n == 1 {
                return (0, 0, 0.0);
            }
            let pos = out_i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64;
            let lo = pos.floor() as usize;
            let lo = lo.min(in_n - 1);
            let hi = (lo + 1).min(in_n - 1);
            (lo, hi, pos - lo as f64)
        };

        let mut voxels = Vec::with_capacity(depth * height * width);
        for z in 0..depth {
            let (z0, z1, tz) = axis_pos(z, depth, self.depth);
            for y in 0..height {
                let (y0, y1, ty) = axis_pos(y, height, self.height);
                for x in 0..width {
                    let (x0, x1, tx) = axis_pos(x, width, self.width);
                    let c000 = self.voxel(z0, y0, x0);
                    let c001 = self.voxel(z0, y0, x1);
                    let c010 = self.voxel(z0, y1, x0);
                    let c011 = self.voxel(z0, y1, x1);
                    let c100 = self.voxel(z1, y0, x0);
                    let c101 = self.voxel(z1, y0, x1);
                    let c110 = self.voxel(z1, y1, x0);
                    let c111 = self.voxel(z1, y1, x1);
                    let c00 = c000 * (1.0 - tx) + c001 * tx;
                    let c01 = c010 * (1.0 - tx) + c011 * tx;
                    let c10 = c100 * (1.0 - tx) + c101 * tx;
                    let c11 = c110 * (1.0 - tx) + c111 * tx;
                    let c0 = c00 * (1.0 - ty) + c01 * ty;
                    let c1 = c10 * (1.0 - ty) + c11 * ty;
                    voxels.push(c0 * (1.0 - tz) + c1 * tz);
                }
            }
        }
        Ok(Volume { depth, height, width, voxels, windowed: self.windowed })
    }

    /// Serializes to MVOL: the magic line, an ASCII `depth height width`
    /// header line, then voxels as little-endian f32 in storage order. The
    /// file is written atomically.
    pub fn write_mvol(&self, path: &Path) -> Result<(), VolumeError> {
        let mut bytes =
            Vec::with_capacity(MVOL_MAGIC.len() + 32 + self.voxels.len() * 4);
        bytes.extend_from_slice(MVOL_MAGIC);
        bytes.extend_from_slice(
            format!("{} {} {}\n", self.depth, self.height, self.width).as_bytes(),
        );
        for &v in &self.voxels {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        atomic_write(path, &bytes)
            .map_err(|source| VolumeError::Io { path: path.to_path_buf(), source })
    }

    /// Reads an MVOL file. The result is marked un-windowed; windowing state
    /// is not part of the format.
    pub fn read_mvol(path: &Path) -> Result<Volume, VolumeError> {
        let bytes = std::fs::read(path)
            .map_err(|source| VolumeError::Io { path: path.to_path_buf(), source })?;
        let fail = |detail: String| VolumeError::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < MVOL_MAGIC.len() || &bytes[..MVOL_MAGIC.len()] != MVOL_MAGIC {
            return Err(fail("bad magic, expected \"MVOL1\"".into()));
        }
        let rest = &bytes[MVOL_MAGIC.len()..];
        let newline = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("missing dimension header line".into()))?;
        let header = std::str::from_utf8(&rest[..newline])
            .map_err(|_| fail("dimension header is not ascii".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| fail(format!("unparseable dimension header {header:?}")))?;
        let [depth, height, width] = dims[..] else {
            return Err(fail(format!("expected 3 dimensions, got {}", dims.len())));
        };
        if depth == 0 || height == 0 || width == 0 {
            return Err(fail(format!("zero dimension in {depth}x{height}x{width}")));
        }
        let count = depth
            .checked_mul(height)
            .and_then(|p| p.checked_mul(width))
            .filter(|&p| p <= MAX_VOXELS)
            .ok_or_else(|| fail(format!("dimensions {depth}x{height}x{width} too large")))?;
        let payload = &rest[newline + 1..];
        if payload.len() != count * 4 {
            return Err(fail(format!(
                "expected {} voxel bytes, found {}",
                count * 4,
                payload.len()
            )));
        }
        let voxels = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Volume { depth, height, width, voxels, windowed: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windowing_pins_the_reference_points() {
        let v = Volume::new(1, 1, 3, vec![1500.0, -2000.0, 0.0], false).unwrap();
        let w = v.hu_window().unwrap();
        assert_eq!(w.voxels(), &[1.0, 0.0, 0.5]);
        assert!(w.is_windowed());
        assert!(matches!(w.hu_window(), Err(VolumeError::AlreadyWindowed)));
    }

    #[test]
    fn windowing_is_monotone_and_bounded() {
        let raw: Vec<f64> = (-30..30).map(|i| i as f64 * 120.0).collect();
        let v = Volume::new(1, 1, raw.len(), raw, false).unwrap();
        let w = v.hu_window().unwrap();
        let vals = w.voxels();
        assert!(vals.iter().all(|&x| (0.0..=1.0).contains(&x)));
        for pair in vals.windows(2) {
            assert!(pair[0] <= pair[1], "windowing must preserve order");
        }
    }

    #[test]
    fn resize_to_same_dims_is_identity() {
        let mut v = Volume::zeros(3, 4, 5).unwrap();
        for (i, x) in v.voxels.iter_mut().enumerate() {
            *x = (i as f64).sin() * 700.0;
        }
        let r = v.resize(3, 4, 5).unwrap();
        assert_eq!(r.voxels(), v.voxels(), "identity resize must be bitwise exact");
    }

    #[test]
    fn resize_constant_volume_stays_constant() {
        let v = Volume::new(2, 2, 2, vec![3.25; 8], false).unwrap();
        let r = v.resize(5, 3, 7).unwrap();
        for &x in r.voxels() {
            assert!((x - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_interpolates_a_depth_ramp() {
        // depth-2 column 0, 1 resampled to depth 3 gives 0, 0.5, 1
        let v = Volume::new(2, 1, 1, vec![0.0, 1.0], false).unwrap();
        let r = v.resize(3, 1, 1).unwrap();
        assert_eq!(r.voxels(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn resize_preserves_value_range() {
        let mut v = Volume::zeros(4, 6, 6).unwrap();
        let mut state = 1u64;
        for x in v.voxels.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            *x = (state >> 11) as f64 / (1u64 << 53) as f64;
        }
        let (lo, hi) = v
            .voxels()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        let r = v.resize(7, 3, 9).unwrap();
        for &x in r.voxels() {
            assert!(x >= lo - 1e-12 && x <= hi + 1e-12, "interpolation overshoot: {x}");
        }
    }

    #[test]
    fn resize_rejects_zero_dims() {
        let v = Volume::zeros(2, 2, 2).unwrap();
        assert!(matches!(v.resize(0, 2, 2), Err(VolumeError::BadDims { .. })));
    }

    #[test]
    fn mvol_round_trip_is_bit_exact_on_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        let mut v = Volume::zeros(2, 3, 4).unwrap();
        for (i, x) in v.voxels.iter_mut().enumerate() {
            *x = i as f64 * 0.37 - 400.0 + (i as f64).cos();
        }
        v.write_mvol(&path).unwrap();
        let r = Volume::read_mvol(&path).unwrap();
        assert_eq!(r.dims(), (2, 3, 4));
        assert!(!r.is_windowed());
        for (&a, &b) in v.voxels().iter().zip(r.voxels()) {
            assert_eq!(a as f32, b as f32, "stored f32 must round-trip bit-exactly");
        }
        // a second round trip is byte-stable
        let path2 = dir.path().join("v2.mvol");
        r.write_mvol(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn mvol_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.mvol");
        std::fs::write(&bad, b"MVOL9\n2 2 2\n").unwrap();
        let err = Volume::read_mvol(&bad).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let v = Volume::zeros(2, 2, 2).unwrap();
        let path = dir.path().join("v.mvol");
        v.write_mvol(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        let err = Volume::read_mvol(&path).unwrap_err();
        assert!(err.to_string().contains("voxel bytes"), "{err}");
    }

    #[test]
    fn mvol_rejects_oversized_dims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("huge.mvol");
        std::fs::write(&path, b"MVOL1\n999999999 999999999 999999999\n").unwrap();
        let err = Volume::read_mvol(&path).unwrap_err();
        assert!(err.to_string().contains("too large"), "{err}");
    }
}
