//! Slice-level kernels shared by forward and adjoint passes.

use crate::tensor::Real;

/// Row-major `m×k · k×n` with optional transposed operands, written
/// (`beta = 0`) or accumulated (`beta = 1`) into `c`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Real>(
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let n = if tb { b_rows } else { b_cols };
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// 3x3, zero padding 1 patch matrix: row `c*9 + ky*3 + kx`, column `y*w + x`.
pub fn im2col3<T: Real>(x: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); channels * 9 * hw];
    for c in 0..channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    let x_lo = if dx < 0 { 1 } else { 0 };
                    let x_hi = if dx > 0 { w - 1 } else { w };
                    for xx in x_lo..x_hi {
                        dst[xx] = src[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: scatter-adds patch gradients back onto the input.
pub fn col2im3<T: Real>(cols: &[T], channels: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                let oy = ky as isize - 1;
                let ox = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    let x_lo = if ox < 0 { 1 } else { 0 };
                    let x_hi = if ox > 0 { w - 1 } else { w };
                    for xx in x_lo..x_hi {
                        dst[(xx as isize + ox) as usize] = dst[(xx as isize + ox) as usize] + src[xx];
                    }
                }
            }
        }
    }
}

/// One bilinear sample: four (flat spatial index, weight) taps.
pub type BilinearTaps<T> = [(usize, T); 4];

/// Sampling plan for a `out_h × out_w` grid of cell centres over the map
/// region `[x0, x1) × [y0, y1)` (map coordinates, cell units).
pub fn bilinear_plan<T: Real>(
    map_h: usize,
    map_w: usize,
    region: [f64; 4],
    out_h: usize,
    out_w: usize,
) -> Vec<BilinearTaps<T>> {
    let [x0, y0, x1, y1] = region;
    let mut plan = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        // map cell c covers [c, c+1); its value sits at c + 0.5
        let sy = y0 + (i as f64 + 0.5) * (y1 - y0) / out_h as f64 - 0.5;
        for j in 0..out_w {
            let sx = x0 + (j as f64 + 0.5) * (x1 - x0) / out_w as f64 - 0.5;
            plan.push(bilinear_taps(map_h, map_w, sy, sx));
        }
    }
    plan
}

fn bilinear_taps<T: Real>(h: usize, w: usize, sy: f64, sx: f64) -> BilinearTaps<T> {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    [
        (y0 * w + x0, T::lit((1.0 - fy) * (1.0 - fx))),
        (y0 * w + x1, T::lit((1.0 - fy) * fx)),
        (y1 * w + x0, T::lit(fy * (1.0 - fx))),
        (y1 * w + x1, T::lit(fy * fx)),
    ]
}

/// Numerically stable in-place softmax of one contiguous row.
pub fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[inline]
pub fn std_normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn std_normal_pdf<T: Real>(x: T) -> T {
    T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * T::lit(0.5)).exp()
}
