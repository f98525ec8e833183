//! Volumes, masks and the `DEAPVOL1` container.
//!
//! ```text
//! DEAPVOL1\n
//! dims <H> <W> <D>\n
//! channels <N>\n
//! spacing <sx> <sy> <sz>\n
//! dtype <f32|u8>\n
//! <payload>
//! ```
//!
//! The payload is `H*W*D*N` little-endian `f32` values (or single bytes for
//! `u8`), with H the slowest axis and the channel the fastest. Spacing values
//! are written in shortest round-trip decimal form, so write/read is exact.

mod phantom;
mod split;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use phantom::{generate_phantom, rasterize_lesion, sample_lesions, LesionShape, PhantomSpec};
pub use split::{kfold, split_dataset, DatasetSplit, Fold};

pub const VOLUME_MAGIC: &str = "DEAPVOL1";

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    channels: usize,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], channels: usize, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "volume dims {dims:?} x {channels} must be positive"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing {spacing:?} must be finite and positive"
            )));
        }
        let expected = dims.iter().product::<usize>() * channels;
        if data.len() != expected {
            return Err(Error::shape(
                "volume",
                format!("{dims:?} x {channels} needs {expected} values, got {}", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteVoxel { index });
        }
        Ok(Self {
            dims,
            channels,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self::new(dims, channels, [1.0; 3], vec![0.0; dims.iter().product::<usize>() * channels])
            .expect("positive dims")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// `[H, W, D, N]` tensor of the voxel values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [h, w, d] = self.dims;
        Tensor::new(
            vec![h, w, d, self.channels],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("volume invariant")
    }

    /// Builds a volume from a `[H, W, D, N]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, spacing: [f32; 3]) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::shape("volume", format!("expected [H, W, D, N], got {s:?}")));
        }
        Self::new(
            [s[0], s[1], s[2]],
            s[3],
            spacing,
            t.data().iter().map(|&v| Scalar::to_f32(v)).collect(),
        )
    }

    /// Reverses the listed spatial axes.
    pub fn flipped(&self, axes: [bool; 3]) -> Self {
        let data = flip_grid(&self.data, self.dims, self.channels, axes);
        Self {
            data,
            ..self.clone()
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = header(self.dims, self.channels, self.spacing, "f32").into_bytes();
        bytes.reserve(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = path.as_ref();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = parse_header(bytes)?;
        if h.dtype != "f32" {
            return Err(Error::Header(format!("volume dtype must be f32, found {:?}", h.dtype)));
        }
        let expected = h.dims.iter().product::<usize>() * h.channels * 4;
        if payload.len() != expected {
            return Err(Error::PayloadMismatch {
                expected,
                found: payload.len(),
            });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(h.dims, h.channels, h.spacing, data)
    }
}

/// Binary label grid: 0 background, 1 lesion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(
                "mask",
                format!("{dims:?} needs {} values, got {}", dims.iter().product::<usize>(), data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask value {} at index {i} is not 0 or 1",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    data.push(f(h, w, d) as u8);
                }
            }
        }
        Self { dims, data }
    }

    /// Thresholds a probability field; values `>= threshold` are foreground.
    pub fn from_probabilities<T: Scalar>(p: &Tensor<T>, threshold: f64) -> Result<Self> {
        let s = p.shape();
        if s.len() != 4 || s[3] != 1 {
            return Err(Error::shape("mask", format!("expected [H, W, D, 1], got {s:?}")));
        }
        Ok(Self {
            dims: [s[0], s[1], s[2]],
            data: p.data().iter().map(|&v| (v.to_f64() >= threshold) as u8).collect(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> bool {
        self.data[self.index(h, w, d)] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [h, w, d] = self.dims;
        Tensor::new(
            vec![h, w, d, 1],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("mask invariant")
    }

    pub fn flipped(&self, axes: [bool; 3]) -> Self {
        Self {
            dims: self.dims,
            data: flip_grid(&self.data, self.dims, 1, axes),
        }
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permuted(&self, perm: [usize; 3]) -> Self {
        let dims = [self.dims[perm[0]], self.dims[perm[1]], self.dims[perm[2]]];
        Self::from_fn(dims, |a, b, c| {
            let mut src = [0; 3];
            src[perm[0]] = a;
            src[perm[1]] = b;
            src[perm[2]] = c;
            self.get(src[0], src[1], src[2])
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = header(self.dims, 1, [1.0; 3], "u8").into_bytes();
        bytes.extend_from_slice(&self.data);
        let path = path.as_ref();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = parse_header(bytes)?;
        if h.dtype != "u8" || h.channels != 1 {
            return Err(Error::Header(format!(
                "mask must be single-channel u8, found {} x {:?}",
                h.channels, h.dtype
            )));
        }
        let expected = h.dims.iter().product::<usize>();
        if payload.len() != expected {
            return Err(Error::PayloadMismatch {
                expected,
                found: payload.len(),
            });
        }
        Self::new(h.dims, payload.to_vec())
    }
}

fn flip_grid<V: Copy>(data: &[V], dims: [usize; 3], channels: usize, axes: [bool; 3]) -> Vec<V> {
    let [h_n, w_n, d_n] = dims;
    let mut out = Vec::with_capacity(data.len());
    for h in 0..h_n {
        let sh = if axes[0] { h_n - 1 - h } else { h };
        for w in 0..w_n {
            let sw = if axes[1] { w_n - 1 - w } else { w };
            for d in 0..d_n {
                let sd = if axes[2] { d_n - 1 - d } else { d };
                let off = ((sh * w_n + sw) * d_n + sd) * channels;
                out.extend_from_slice(&data[off..off + channels]);
            }
        }
    }
    out
}

fn header(dims: [usize; 3], channels: usize, spacing: [f32; 3], dtype: &str) -> String {
    format!(
        "{VOLUME_MAGIC}\ndims {} {} {}\nchannels {channels}\nspacing {} {} {}\ndtype {dtype}\n",
        dims[0], dims[1], dims[2], spacing[0], spacing[1], spacing[2]
    )
}

struct Header {
    dims: [usize; 3],
    channels: usize,
    spacing: [f32; 3],
    dtype: String,
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let mut rest = bytes;
    let mut next_line = |what: &str| -> Result<String> {
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Header(format!("truncated before {what} line")))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Header(format!("{what} line is not UTF-8")))?
            .to_string();
        rest = &rest[end + 1..];
        Ok(line)
    };

    let magic = next_line("magic").map_err(|_| Error::BadMagic {
        expected: VOLUME_MAGIC,
        found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
    })?;
    if magic != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            expected: VOLUME_MAGIC,
            found: magic,
        });
    }

    fn fields<'a>(line: &'a str, key: &str, n: usize) -> Result<Vec<&'a str>> {
        let mut parts = line.split(' ');
        if parts.next() != Some(key) {
            return Err(Error::Header(format!("expected {key:?} line, found {line:?}")));
        }
        let vals: Vec<&str> = parts.collect();
        if vals.len() != n {
            return Err(Error::Header(format!("{key} needs {n} fields, found {line:?}")));
        }
        Ok(vals)
    }
    fn num<V: std::str::FromStr>(s: &str, key: &str) -> Result<V> {
        s.parse()
            .map_err(|_| Error::Header(format!("bad {key} value {s:?}")))
    }

    let line = next_line("dims")?;
    let d = fields(&line, "dims", 3)?;
    let dims = [num(d[0], "dims")?, num(d[1], "dims")?, num(d[2], "dims")?];
    let line = next_line("channels")?;
    let channels: usize = num(fields(&line, "channels", 1)?[0], "channels")?;
    let line = next_line("spacing")?;
    let s = fields(&line, "spacing", 3)?;
    let spacing = [num(s[0], "spacing")?, num(s[1], "spacing")?, num(s[2], "spacing")?];
    let line = next_line("dtype")?;
    let dtype = fields(&line, "dtype", 1)?[0].to_string();
    if dims.contains(&0) || channels == 0 {
        return Err(Error::Header(format!("non-positive extent {dims:?} x {channels}")));
    }
    Ok((
        Header {
            dims,
            channels,
            spacing,
            dtype,
        },
        rest,
    ))
}
