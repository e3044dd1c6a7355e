//! Slow, obviously-correct reference routines.
//!
//! Everything here works on plain `f64` slices with explicit shapes and is
//! written as direct nested sums straight from the defining formulas. None of
//! it shares code with `crossd-core`; it exists to cross-check it.

use std::f64::consts::PI;

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = input + 2 * pad;
    assert!(padded >= kernel, "kernel larger than padded input");
    (padded - kernel) / stride + 1
}

/// Direct triple-sum forward DFT of a real volume (`O(N²)` in the voxel count).
/// Returns `(re, im)` pairs in row-major order.
pub fn naive_dft3(data: &[f64], shape: [usize; 3]) -> Vec<(f64, f64)> {
    let [n0, n1, n2] = shape;
    assert_eq!(data.len(), n0 * n1 * n2);
    let mut out = Vec::with_capacity(data.len());
    for k0 in 0..n0 {
        for k1 in 0..n1 {
            for k2 in 0..n2 {
                let (mut re, mut im) = (0.0, 0.0);
                for a in 0..n0 {
                    for b in 0..n1 {
                        for c in 0..n2 {
                            let phase = -2.0
                                * PI
                                * ((k0 * a) as f64 / n0 as f64
                                    + (k1 * b) as f64 / n1 as f64
                                    + (k2 * c) as f64 / n2 as f64);
                            let v = data[(a * n1 + b) * n2 + c];
                            re += v * phase.cos();
                            im += v * phase.sin();
                        }
                    }
                }
                out.push((re, im));
            }
        }
    }
    out
}

/// Cross-correlation over `B × C × H × W` with zero padding and groups.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    stride: [usize; 2],
    pad: [usize; 2],
    groups: usize,
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<usize>) {
    let [b, c, h, wd] = xs;
    let [co, cig, kh, kw] = ws;
    assert_eq!(c, cig * groups);
    let oh = out_extent(h, kh, stride[0], pad[0]);
    let ow = out_extent(wd, kw, stride[1], pad[1]);
    let cog = co / groups;
    let mut out = vec![0.0; b * co * oh * ow];
    for n in 0..b {
        for o in 0..co {
            let g = o / cog;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..cig {
                        let ci = g * cig + i;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride[0] + dy) as isize - pad[0] as isize;
                                let ix = (xo * stride[1] + dx) as isize - pad[1] as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((n * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((o * cig + i) * kh + dy) * kw + dx];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias[o];
                    }
                    out[((n * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, vec![b, co, oh, ow])
}

/// Cross-correlation over `B × C × D × H × W` with zero padding and groups.
#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    stride: [usize; 3],
    pad: [usize; 3],
    groups: usize,
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<usize>) {
    let [b, c, d, h, wd] = xs;
    let [co, cig, kd, kh, kw] = ws;
    assert_eq!(c, cig * groups);
    let od = out_extent(d, kd, stride[0], pad[0]);
    let oh = out_extent(h, kh, stride[1], pad[1]);
    let ow = out_extent(wd, kw, stride[2], pad[2]);
    let cog = co / groups;
    let mut out = vec![0.0; b * co * od * oh * ow];
    for n in 0..b {
        for o in 0..co {
            let g = o / cog;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..cig {
                            let ci = g * cig + i;
                            for dz in 0..kd {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let iz = (z * stride[0] + dz) as isize - pad[0] as isize;
                                        let iy = (y * stride[1] + dy) as isize - pad[1] as isize;
                                        let ix = (xo * stride[2] + dx) as isize - pad[2] as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xi = (((n * c + ci) * d + iz as usize) * h
                                            + iy as usize)
                                            * wd
                                            + ix as usize;
                                        let wi = (((o * cig + i) * kd + dz) * kh + dy) * kw + dx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        if let Some(bias) = bias {
                            acc += bias[o];
                        }
                        out[(((n * co + o) * od + z) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
    }
    (out, vec![b, co, od, oh, ow])
}

/// Sizes of the axial, coronal and sagittal output-channel groups.
pub fn acs_split(c_out: usize) -> [usize; 3] {
    let a = c_out.div_ceil(3);
    let b = (c_out - a).div_ceil(2);
    [a, b, c_out - a - b]
}

/// Axial/coronal/sagittal convolution by direct summation.
///
/// Output channel `o` belongs to view `v` (0 = depth, 1 = height, 2 = width).
/// Its `K × K` kernel spans the two axes other than `v`; along `v` the output
/// samples the input at the position the centre tap of a `K × K × K` kernel
/// with the same stride and padding would see.
pub fn acs_conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 4],
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, Vec<usize>) {
    let [b, c, d, h, wd] = xs;
    let [co, ci, k, k2] = ws;
    assert_eq!(k, k2);
    assert_eq!(c, ci);
    let dims = [d, h, wd];
    let od: Vec<usize> = (0..3).map(|a| out_extent(dims[a], k, stride[a], pad[a])).collect();
    let split = acs_split(co);
    let view_of = |o: usize| {
        if o < split[0] {
            0
        } else if o < split[0] + split[1] {
            1
        } else {
            2
        }
    };
    let mut out = vec![0.0; b * co * od[0] * od[1] * od[2]];
    for n in 0..b {
        for o in 0..co {
            let view = view_of(o);
            let plane: Vec<usize> = (0..3).filter(|&a| a != view).collect();
            for z in 0..od[0] {
                for y in 0..od[1] {
                    for xo in 0..od[2] {
                        let opos = [z, y, xo];
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for r in 0..k {
                                for s in 0..k {
                                    let mut ipos = [0isize; 3];
                                    for a in 0..3 {
                                        let tap = if a == view {
                                            k / 2
                                        } else if a == plane[0] {
                                            r
                                        } else {
                                            s
                                        };
                                        ipos[a] = (opos[a] * stride[a] + tap) as isize
                                            - pad[a] as isize;
                                    }
                                    if (0..3).any(|a| ipos[a] < 0 || ipos[a] >= dims[a] as isize) {
                                        continue;
                                    }
                                    let xi = (((n * c + i) * d + ipos[0] as usize) * h
                                        + ipos[1] as usize)
                                        * wd
                                        + ipos[2] as usize;
                                    acc += x[xi] * w[((o * ci + i) * k + r) * k + s];
                                }
                            }
                        }
                        out[(((n * co + o) * od[0] + z) * od[1] + y) * od[2] + xo] = acc;
                    }
                }
            }
        }
    }
    (out, vec![b, co, od[0], od[1], od[2]])
}

/// Band-limited circular shift of an odd-length 1-D signal by a real number of
/// samples, via the Dirichlet interpolation kernel
/// `D(t) = (1/N) Σ_{k=-(N-1)/2}^{(N-1)/2} cos(2π k t / N)`.
pub fn fractional_shift_1d(signal: &[f64], shift: f64) -> Vec<f64> {
    let n = signal.len();
    assert!(n % 2 == 1, "odd length required");
    let half = (n / 2) as i64;
    let kernel = |t: f64| -> f64 {
        (-half..=half).map(|k| (2.0 * PI * k as f64 * t / n as f64).cos()).sum::<f64>() / n as f64
    };
    (0..n)
        .map(|i| {
            signal
                .iter()
                .enumerate()
                .map(|(m, &v)| v * kernel(i as f64 - m as f64 - shift))
                .sum()
        })
        .collect()
}

/// Separable fractional circular shift of a `K × K × K` volume, one axis at a
/// time with [`fractional_shift_1d`].
pub fn fractional_shift3(volume: &[f64], k: usize, shift: [f64; 3]) -> Vec<f64> {
    assert_eq!(volume.len(), k * k * k);
    let mut cur = volume.to_vec();
    let strides = [k * k, k, 1];
    for axis in 0..3 {
        let st = strides[axis];
        let mut next = cur.clone();
        for base in 0..k * k * k {
            if (base / st) % k != 0 {
                continue;
            }
            let line: Vec<f64> = (0..k).map(|i| cur[base + i * st]).collect();
            for (i, v) in fractional_shift_1d(&line, shift[axis]).into_iter().enumerate() {
                next[base + i * st] = v;
            }
        }
        cur = next;
    }
    cur
}

/// `r_c = Σ_i f_{c,i} e^{f_{c,i}} / Σ_j e^{f_{c,j}}` over `B × C × H × W`,
/// returning `B × C` values.
pub fn softmax_weighted_sum(f: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let mut out = Vec::with_capacity(b * c);
    for n in 0..b {
        for ch in 0..c {
            let field = &f[(n * c + ch) * hw..(n * c + ch + 1) * hw];
            let denom: f64 = field.iter().map(|v| v.exp()).sum();
            let numer: f64 = field.iter().map(|v| v * v.exp()).sum();
            out.push(numer / denom);
        }
    }
    out
}

/// Central difference `(f(x+h) − f(x−h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dft_of_delta_is_flat() {
        let mut v = vec![0.0; 27];
        v[0] = 1.0;
        for (re, im) in naive_dft3(&v, [3, 3, 3]) {
            assert!((re - 1.0).abs() < 1e-12 && im.abs() < 1e-12);
        }
    }

    #[test]
    fn integer_fractional_shift_is_roll() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = fractional_shift_1d(&s, 1.0);
        for (a, b) in r.iter().zip([5.0, 1.0, 2.0, 3.0, 4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn acs_split_rule() {
        assert_eq!(acs_split(3), [1, 1, 1]);
        assert_eq!(acs_split(8), [3, 3, 2]);
        assert_eq!(acs_split(4), [2, 1, 1]);
    }

    #[test]
    fn conv2d_sum_of_ones() {
        let (y, s) = conv2d(&[1.0; 9], [1, 1, 3, 3], &[1.0; 9], [1, 1, 3, 3], [1, 1], [0, 0], 1, None);
        assert_eq!(s, vec![1, 1, 1, 1]);
        assert_eq!(y, vec![9.0]);
    }
}
