//! Training objective (weighted soft dice + binary cross-entropy) and the
//! evaluation metrics DICE and normalized surface dice.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volume::Mask;

/// Default threshold turning probabilities into masks; ties go to foreground.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub w_dice: f64,
    pub w_ce: f64,
    /// Added to numerator and denominator of the soft dice.
    pub smooth: f64,
    /// Predictions are clamped into `[eps, 1 - eps]` before the loss.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_dice: 0.5,
            w_ce: 0.5,
            smooth: 1e-5,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_dice >= 0.0 && self.w_ce >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got dice {} and ce {}",
                self.w_dice, self.w_ce
            )));
        }
        if !(self.smooth > 0.0) || !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config("loss smooth must be > 0 and eps in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// `w_dice * (1 - soft dice) + w_ce * BCE` as a scalar graph node.
///
/// `gt` is a constant `{0, 1}` tensor with the same shape as `pred`.
pub fn combined_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    if g.shape(pred) != gt.shape() {
        return Err(Error::shape(
            "combined_loss",
            format!("prediction {:?} vs ground truth {:?}", g.shape(pred), gt.shape()),
        ));
    }
    let eps = T::of(cfg.eps);
    let p = g.clamp(pred, eps, T::one() - eps)?;
    let y = g.constant(gt.clone())?;
    let not_y = g.constant(gt.map(|v| T::one() - v))?;

    let py = g.mul(p, y)?;
    let inter = g.reduce_sum(py, None)?;
    let sp = g.reduce_sum(p, None)?;
    let sy = g.reduce_sum(y, None)?;
    let num = g.scale(inter, T::of(2.0))?;
    let num = g.add_scalar(num, T::of(cfg.smooth))?;
    let den = g.add(sp, sy)?;
    let den = g.add_scalar(den, T::of(cfg.smooth))?;
    let dice = g.div(num, den)?;
    let dice_loss = g.scale(dice, -T::one())?;
    let dice_loss = g.add_scalar(dice_loss, T::one())?;

    let lp = g.ln(p)?;
    let q = g.scale(p, -T::one())?;
    let q = g.add_scalar(q, T::one())?;
    let lq = g.ln(q)?;
    let pos = g.mul(y, lp)?;
    let neg = g.mul(not_y, lq)?;
    let ll = g.add(pos, neg)?;
    let ll = g.reduce_mean(ll, None)?;
    let bce = g.scale(ll, -T::one())?;

    let a = g.scale(dice_loss, T::of(cfg.w_dice))?;
    let b = g.scale(bce, T::of(cfg.w_ce))?;
    g.add(a, b)
}

fn check_dims(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`, 1 when both are empty.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_dims("dice_score", pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p & g) as usize;
        total += (p + g) as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground voxels with at least one face neighbour in the background.
/// Voxels outside the grid count as background.
pub fn boundary(m: &Mask) -> Vec<bool> {
    let [h, w, d] = m.dims();
    let mut out = vec![false; h * w * d];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                if !m.get(i, j, k) {
                    continue;
                }
                let bg = |a: usize, b: usize, c: usize| !m.get(a, b, c);
                out[m.index(i, j, k)] = i == 0
                    || j == 0
                    || k == 0
                    || i + 1 == h
                    || j + 1 == w
                    || k + 1 == d
                    || bg(i - 1, j, k)
                    || bg(i + 1, j, k)
                    || bg(i, j - 1, k)
                    || bg(i, j + 1, k)
                    || bg(i, j, k - 1)
                    || bg(i, j, k + 1);
            }
        }
    }
    out
}

const FAR: i64 = i64::MAX / 4;

/// Exact 1D squared distance transform over `f` (lower envelope of parabolas).
fn edt_1d(f: &[i64], v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut [i64]) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q] >= FAR {
            continue;
        }
        let fq = (f[q] + (q * q) as i64) as f64;
        while let Some(&p) = v.last() {
            let fp = (f[p] + (p * p) as i64) as f64;
            let s = (fq - fp) / (2.0 * (q as f64 - p as f64));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.fill(FAR);
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as i64 - v[k] as i64;
        out[q] = dq * dq + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest site.
pub fn squared_distance_transform(sites: &[bool], dims: [usize; 3]) -> Vec<i64> {
    let mut dist: Vec<i64> = sites.iter().map(|&s| if s { 0 } else { FAR }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let len = dims[axis];
        let mut line = vec![0i64; len];
        let mut out = vec![0i64; len];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let (na, nb) = (dims[others[0]], dims[others[1]]);
        for a in 0..na {
            for b in 0..nb {
                let base = a * strides[others[0]] + b * strides[others[1]];
                for t in 0..len {
                    line[t] = dist[base + t * strides[axis]];
                }
                edt_1d(&line, &mut v, &mut z, &mut out);
                for t in 0..len {
                    dist[base + t * strides[axis]] = out[t];
                }
            }
        }
    }
    dist
}

/// Normalized surface dice at tolerance `tau` voxels.
pub fn nsd(pred: &Mask, gt: &Mask, tau: f64) -> Result<f64> {
    check_dims("nsd", pred, gt)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("nsd tolerance must be >= 0, got {tau}")));
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    if np + ng == 0 {
        return Ok(1.0);
    }
    let tau2 = tau * tau;
    let within = |from: &[bool], to: &[bool]| -> usize {
        let dt = squared_distance_transform(to, pred.dims());
        from.iter()
            .zip(&dt)
            .filter(|(&b, &d)| b && d < FAR && d as f64 <= tau2)
            .count()
    };
    Ok((within(&bp, &bg) + within(&bg, &bp)) as f64 / (np + ng) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub dice: f64,
    pub nsd: f64,
    pub tau: f64,
}

impl MetricReport {
    pub fn evaluate(pred: &Mask, gt: &Mask, tau: f64) -> Result<Self> {
        Ok(Self {
            dice: dice_score(pred, gt)?,
            nsd: nsd(pred, gt, tau)?,
            tau,
        })
    }

    /// Thresholds a `[H, W, D, 1]` probability tensor, then evaluates.
    pub fn from_probabilities<T: Scalar>(prob: &Tensor<T>, gt: &Mask, tau: f64) -> Result<Self> {
        Self::evaluate(&Mask::from_probabilities(prob, THRESHOLD)?, gt, tau)
    }

    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        Some(MetricReport {
            dice: reports.iter().map(|r| r.dice).sum::<f64>() / n,
            nsd: reports.iter().map(|r| r.nsd).sum::<f64>() / n,
            tau: first.tau,
        })
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;

    pub fn dice(p: &Mask, g: &Mask) -> f64 {
        let [h, w, d] = p.dims();
        let (mut both, mut cp, mut cg) = (0, 0, 0);
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let (a, b) = (p.get(i, j, k), g.get(i, j, k));
                    both += (a && b) as usize;
                    cp += a as usize;
                    cg += b as usize;
                }
            }
        }
        if cp + cg == 0 {
            1.0
        } else {
            2.0 * both as f64 / (cp + cg) as f64
        }
    }

    fn surface(m: &Mask) -> Vec<[i64; 3]> {
        let [h, w, d] = m.dims();
        let inside = |i: i64, j: i64, k: i64| {
            i >= 0 && j >= 0 && k >= 0 && (i as usize) < h && (j as usize) < w && (k as usize) < d
                && m.get(i as usize, j as usize, k as usize)
        };
        let mut out = Vec::new();
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                for k in 0..d as i64 {
                    if inside(i, j, k)
                        && [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                            .iter()
                            .any(|&(a, b, c)| !inside(i + a, j + b, k + c))
                    {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }

    /// All-pairs surface distances.
    pub fn nsd(p: &Mask, g: &Mask, tau: f64) -> f64 {
        let (sp, sg) = (surface(p), surface(g));
        if sp.is_empty() && sg.is_empty() {
            return 1.0;
        }
        let close = |a: &[i64; 3], set: &[[i64; 3]]| {
            set.iter().any(|b| {
                let d2: i64 = (0..3).map(|i| (a[i] - b[i]).pow(2)).sum();
                d2 as f64 <= tau * tau
            })
        };
        let hits = sp.iter().filter(|a| close(a, &sg)).count() + sg.iter().filter(|a| close(a, &sp)).count();
        hits as f64 / (sp.len() + sg.len()) as f64
    }
}
