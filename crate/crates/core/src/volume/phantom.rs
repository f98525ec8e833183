//! Synthetic labeled phantoms: smooth background, one organ, lesion blobs.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Mask, Volume};
use crate::error::{Error, Result};

const MIN_DIM: usize = 16;
const LESION_INTENSITY: f64 = 0.8;
const ORGAN_INTENSITY: f64 = 0.45;
const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub lesion_count: usize,
    pub noise_sd: f64,
}

impl PhantomSpec {
    pub fn new(seed: u64, dims: [usize; 3], lesion_count: usize, noise_sd: f64) -> Self {
        Self {
            seed,
            dims,
            lesion_count,
            noise_sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Ripple {
    axis: [f64; 3],
    freq: f64,
    phase: f64,
    amp: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Lobe {
    offset: [f64; 3],
    radii: [f64; 3],
    exponent: f64,
    ripples: Vec<Ripple>,
}

impl Lobe {
    fn contains(&self, p: [f64; 3]) -> bool {
        let x = [p[0] - self.offset[0], p[1] - self.offset[1], p[2] - self.offset[2]];
        let len = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        if len == 0.0 {
            return true;
        }
        let norm = x
            .iter()
            .zip(&self.radii)
            .map(|(&xi, &ri)| (xi / ri).abs().powf(self.exponent))
            .sum::<f64>()
            .powf(1.0 / self.exponent);
        let bump: f64 = self
            .ripples
            .iter()
            .map(|r| {
                let c = (r.axis[0] * x[0] + r.axis[1] * x[1] + r.axis[2] * x[2]) / len;
                r.amp * (r.freq * c + r.phase).sin()
            })
            .sum();
        norm <= 1.0 + bump
    }

    /// Per-axis half-width of a box around the lesion centre holding the lobe.
    fn half_extents(&self) -> [f64; 3] {
        let amp: f64 = self.ripples.iter().map(|r| r.amp).sum();
        [0, 1, 2].map(|i| self.offset[i].abs() + self.radii[i] * (1.0 + amp))
    }
}

/// One lesion: a union of superellipsoid lobes that all contain `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionShape {
    pub center: [f64; 3],
    lobes: Vec<Lobe>,
}

impl LesionShape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let rel = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        self.lobes.iter().any(|l| l.contains(rel))
    }

    /// Per-axis half-widths of a box around `center` enclosing the lesion.
    pub fn half_extents(&self) -> [f64; 3] {
        self.lobes.iter().map(Lobe::half_extents).fold([0.0; 3], |a, b| {
            [a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2])]
        })
    }
}

/// Rasterizes one lesion at voxel centres.
pub fn rasterize_lesion(lesion: &LesionShape, dims: [usize; 3]) -> Mask {
    Mask::from_fn(dims, |h, w, d| lesion.contains([h as f64, w as f64, d as f64]))
}

fn sample_lesion(rng: &mut ChaCha8Rng, center: [f64; 3], r_max: f64) -> LesionShape {
    let n_lobes = rng.random_range(1..=3);
    let lobes = (0..n_lobes)
        .map(|_| {
            let radii = [0; 3].map(|_| rng.random_range(0.6 * r_max..=r_max));
            let r_min = radii.iter().cloned().fold(f64::INFINITY, f64::min);
            // Offsets small enough that every lobe still covers the centre.
            let offset = [0; 3].map(|_| rng.random_range(-0.25..=0.25) * r_min / 3f64.sqrt());
            let ripples = (0..2)
                .map(|_| {
                    let mut axis = [0; 3].map(|_| rng.random_range(-1.0..=1.0));
                    let n = axis.iter().map(|a: &f64| a * a).sum::<f64>().sqrt().max(1e-9);
                    axis.iter_mut().for_each(|a| *a /= n);
                    Ripple {
                        axis,
                        freq: rng.random_range(2.0..5.0),
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                        amp: rng.random_range(0.03..0.08),
                    }
                })
                .collect();
            Lobe {
                offset,
                radii,
                exponent: rng.random_range(1.6..3.0),
                ripples,
            }
        })
        .collect();
    LesionShape { center, lobes }
}

/// Samples lesion shapes whose bounding boxes are pairwise separated.
pub fn sample_lesions(spec: &PhantomSpec) -> Result<Vec<LesionShape>> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_dim = *spec.dims.iter().min().unwrap() as f64;
    let mut r_max = (min_dim / 5.0).min(6.0);
    let mut lesions: Vec<LesionShape> = Vec::with_capacity(spec.lesion_count);
    for attempt in 1..=PLACEMENT_ATTEMPTS {
        if lesions.len() == spec.lesion_count {
            break;
        }
        // Crowded grids: shrink the lesion scale rather than give up.
        if attempt % 200 == 0 {
            r_max *= 0.9;
        }
        let shape = sample_lesion(&mut rng, [0.0; 3], r_max);
        let e = shape.half_extents();
        let mut center = [0.0; 3];
        let mut fits = true;
        for i in 0..3 {
            let (lo, hi) = ((e[i] + 1.0).ceil(), spec.dims[i] as f64 - 2.0 - e[i]);
            if lo > hi {
                fits = false;
                break;
            }
            center[i] = rng.random_range(lo..=hi).round();
        }
        if !fits {
            continue;
        }
        let clear = lesions.iter().all(|o| {
            let oe = o.half_extents();
            (0..3).any(|i| (o.center[i] - center[i]).abs() > oe[i] + e[i] + 1.0)
        });
        if clear {
            lesions.push(LesionShape { center, ..shape });
        }
    }
    if lesions.len() < spec.lesion_count {
        return Err(Error::InvalidArgument(format!(
            "could not place {} disjoint lesions in {:?}; use larger dims or fewer lesions",
            spec.lesion_count, spec.dims
        )));
    }
    Ok(lesions)
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::InvalidArgument(format!(
            "phantom dims {:?} too small to fit one lesion; each must be >= {MIN_DIM}",
            spec.dims
        )));
    }
    if spec.lesion_count == 0 {
        return Err(Error::InvalidArgument("lesion_count must be >= 1".into()));
    }
    if !(spec.noise_sd >= 0.0 && spec.noise_sd.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise_sd {} must be finite and >= 0",
            spec.noise_sd
        )));
    }
    Ok(())
}

/// Deterministic (volume, mask) pair for `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, Mask)> {
    let lesions = sample_lesions(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);

    let [hn, wn, dn] = spec.dims;
    let freqs = [0; 3].map(|_| rng.random_range(0.5..1.5));
    let phases = [0; 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let organ_c = [hn, wn, dn].map(|n| n as f64 / 2.0 - 0.5 + rng.random_range(-1.0..=1.0));
    let organ_r = [hn, wn, dn].map(|n| n as f64 * rng.random_range(0.32..0.4));
    let noise = Normal::new(0.0, spec.noise_sd).expect("validated sd");

    let mut data = Vec::with_capacity(hn * wn * dn);
    let mut labels = Vec::with_capacity(hn * wn * dn);
    for h in 0..hn {
        for w in 0..wn {
            for d in 0..dn {
                let p = [h as f64, w as f64, d as f64];
                let u = [p[0] / hn as f64, p[1] / wn as f64, p[2] / dn as f64];
                let mut v = 0.175
                    + 0.075
                        * (0..3)
                            .map(|i| (std::f64::consts::TAU * freqs[i] * u[i] + phases[i]).cos())
                            .sum::<f64>()
                        / 3.0;
                let q: f64 = (0..3).map(|i| ((p[i] - organ_c[i]) / organ_r[i]).powi(2)).sum();
                if q <= 1.0 {
                    v = ORGAN_INTENSITY + 0.03 * (1.0 - q);
                }
                let lesion = lesions.iter().any(|l| l.contains(p));
                if lesion {
                    v = LESION_INTENSITY;
                }
                if spec.noise_sd > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0) as f32);
                labels.push(lesion as u8);
            }
        }
    }
    Ok((
        Volume::new(spec.dims, 1, [1.0; 3], data)?,
        Mask::new(spec.dims, labels)?,
    ))
}
