//! Dense stride-1 "same" convolution lowered to a matrix product, plus the
//! nearest-neighbour resampling used between generator resolutions.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

/// Unfolds `x` (C, H, W) into a (C·k·k, H·W) patch matrix with zero padding k/2.
pub(crate) fn im2col(x: ArrayView3<f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    if k == 1 {
        return x.to_shape((c, h * w)).unwrap().into_owned();
    }
    let pad = (k / 2) as isize;
    let mut cols = Array2::<f64>::zeros((c * k * k, h * w));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut out = cols.row_mut(row);
                let out = out.as_slice_mut().unwrap();
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = plane.row(sy as usize);
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            out[y * w + xx] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back to (C, H, W).
pub(crate) fn col2im(cols: ArrayView2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    if k == 1 {
        return cols.to_shape((c, h, w)).unwrap().into_owned();
    }
    let pad = (k / 2) as isize;
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = x.index_axis_mut(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = cols.row(row);
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let mut dst = plane.row_mut(sy as usize);
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Nearest-neighbour ×2 upsampling of a (C, H, W) tensor.
pub(crate) fn upsample2(x: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[[ci, y, xx]];
                out[[ci, 2 * y, 2 * xx]] = v;
                out[[ci, 2 * y, 2 * xx + 1]] = v;
                out[[ci, 2 * y + 1, 2 * xx]] = v;
                out[[ci, 2 * y + 1, 2 * xx + 1]] = v;
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
pub(crate) fn downsum2(x: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, h / 2, w / 2));
    for ci in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                out[[ci, y, xx]] = x[[ci, 2 * y, 2 * xx]]
                    + x[[ci, 2 * y, 2 * xx + 1]]
                    + x[[ci, 2 * y + 1, 2 * xx]]
                    + x[[ci, 2 * y + 1, 2 * xx + 1]];
            }
        }
    }
    out
}

/// Reference spatial-loop convolution. Used by tests as an independent oracle.
#[cfg(test)]
pub(crate) fn conv2d_naive(x: ArrayView3<f64>, w: ndarray::ArrayView4<f64>) -> Array3<f64> {
    let (c, h, wd) = x.dim();
    let (o, i, k, _) = w.dim();
    assert_eq!(c, i);
    let pad = (k / 2) as isize;
    let mut y = Array3::<f64>::zeros((o, h, wd));
    for oj in 0..o {
        for yy in 0..h {
            for xx in 0..wd {
                let mut acc = 0.0;
                for ii in 0..i {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = yy as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                acc += w[[oj, ii, ky, kx]] * x[[ii, sy as usize, sx as usize]];
                            }
                        }
                    }
                }
                y[[oj, yy, xx]] = acc;
            }
        }
    }
    y
}
