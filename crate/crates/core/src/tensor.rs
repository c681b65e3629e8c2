//! Small dense-array helpers shared by the model code.
//!
//! Products are written as plain loops with a fixed accumulation order so
//! that results are bit-reproducible across machines (no runtime-selected
//! FMA kernels).

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HcpError, Result};

/// `a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    if k != k2 {
        return Err(HcpError::shape("matmul", &[m, k], &[k2, n]));
    }
    let mut out = Array2::<f64>::zeros((m, n));
    for i in 0..m {
        let mut row = out.row_mut(i);
        for p in 0..k {
            let aip = a[[i, p]];
            if aip == 0.0 {
                continue;
            }
            let brow = b.row(p);
            for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_bt(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (m, k) = a.dim();
    let (n, k2) = b.dim();
    if k != k2 {
        return Err(HcpError::shape("matmul_bt", &[m, k], &[n, k2]));
    }
    let mut out = Array2::<f64>::zeros((m, n));
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out[[i, j]] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_at(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (k, m) = a.dim();
    let (k2, n) = b.dim();
    if k != k2 {
        return Err(HcpError::shape("matmul_at", &[k, m], &[k2, n]));
    }
    let mut out = Array2::<f64>::zeros((m, n));
    for p in 0..k {
        let brow = b.row(p);
        for i in 0..m {
            let api = a[[p, i]];
            if api == 0.0 {
                continue;
            }
            let mut row = out.row_mut(i);
            for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                *o += api * bv;
            }
        }
    }
    Ok(out)
}

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

pub fn normal_array3<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize), std: f64) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Affine map on row vectors: `y = x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, std: f64) -> Self {
        Self {
            weight: normal_matrix(rng, input, output, std),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut y = matmul(x, self.weight.view())?;
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        Ok(y)
    }
}

/// Mean-pool a `[c, side, side]` map down to `[target*target, c]` rows
/// (row index `y * target + x`).
pub fn avg_pool_rows(z: ArrayView3<f64>, target: usize) -> Result<Array2<f64>> {
    let (c, h, w) = z.dim();
    if target == 0 || h % target != 0 || w % target != 0 || h != w {
        return Err(HcpError::Validation(format!(
            "cannot pool a {h}x{w} map to {target}x{target}"
        )));
    }
    let f = h / target;
    let inv = 1.0 / (f * f) as f64;
    let mut out = Array2::<f64>::zeros((target * target, c));
    for ch in 0..c {
        for ty in 0..target {
            for tx in 0..target {
                let mut s = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        s += z[[ch, ty * f + dy, tx * f + dx]];
                    }
                }
                out[[ty * target + tx, ch]] = s * inv;
            }
        }
    }
    Ok(out)
}

/// Average-pool a channel-first map by an integer factor.
pub fn avg_pool_chw(z: ArrayView3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = z.dim();
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += z[[ch, y * factor + dy, x * factor + dx]];
                    }
                }
                out[[ch, y, x]] = s * inv;
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling of `[s*s, c]` rows back onto a
/// `[c, side, side]` grid, added in place.
pub fn add_upsampled_rows(dst: &mut Array3<f64>, rows: ArrayView2<f64>, source_side: usize) {
    let (c, side, _) = dst.dim();
    let f = side / source_side;
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                dst[[ch, y, x]] += rows[[(y / f) * source_side + x / f, ch]];
            }
        }
    }
}

/// Adjoint of [`add_upsampled_rows`]: sums each block of a `[c, side, side]`
/// gradient back onto the `[s*s, c]` source rows.
pub fn sum_pool_rows(grad: ArrayView3<f64>, source_side: usize) -> Array2<f64> {
    let (c, side, _) = grad.dim();
    let f = side / source_side;
    let mut out = Array2::<f64>::zeros((source_side * source_side, c));
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                out[[(y / f) * source_side + x / f, ch]] += grad[[ch, y, x]];
            }
        }
    }
    out
}

/// Bilinear resize of a channel-first map with half-pixel centres and edge
/// clamping. Returns an exact copy when the size already matches.
pub fn resize_bilinear(map: ArrayView3<f64>, target: (usize, usize)) -> Result<Array3<f64>> {
    let (c, h, w) = map.dim();
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(HcpError::Validation(format!(
            "resize target must be positive, got {th}x{tw}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(HcpError::Validation("cannot resize an empty map".into()));
    }
    if (h, w) == (th, tw) {
        return Ok(map.to_owned());
    }
    let ys = sample_positions(h, th);
    let xs = sample_positions(w, tw);
    let mut out = Array3::<f64>::zeros((c, th, tw));
    for ch in 0..c {
        let plane = map.index_axis(Axis(0), ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
                let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
                out[[ch, oy, ox]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
