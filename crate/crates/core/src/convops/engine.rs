//! Direct 3D cross-correlation kernels shared by every convolution entry point.
//!
//! 2D convolutions run through here as depth-1 volumes. Padding is signed so
//! that anisotropic kernels (ACS views) can line up with the centre tap of a
//! cubic kernel. Each output element accumulates in the fixed order
//! `(in_channel, kd, kh, kw)`, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Plan {
    /// `B, C_in, D, H, W`
    pub x: [usize; 5],
    /// `C_out, C_in / G, KD, KH, KW`
    pub w: [usize; 5],
    /// `B, C_out, D', H', W'`
    pub out: [usize; 5],
    pub stride: [usize; 3],
    pub pad: [isize; 3],
    pub groups: usize,
}

impl Plan {
    pub fn new(
        x: [usize; 5],
        w: [usize; 5],
        stride: [usize; 3],
        pad: [isize; 3],
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || w[0] % groups != 0 {
            return shape_err(format!("{} output channels not divisible by {groups} groups", w[0]));
        }
        if x[1] != w[1] * groups {
            return shape_err(format!(
                "input has {} channels, kernel expects {} x {groups} groups",
                x[1], w[1]
            ));
        }
        if stride.contains(&0) {
            return shape_err("stride must be positive");
        }
        let mut out = [x[0], w[0], 0, 0, 0];
        for a in 0..3 {
            let span = x[a + 2] as isize + 2 * pad[a] - w[a + 2] as isize;
            if span < 0 {
                return shape_err(format!(
                    "kernel extent {} exceeds padded input extent {} on spatial axis {a}",
                    w[a + 2],
                    x[a + 2] as isize + 2 * pad[a]
                ));
            }
            out[a + 2] = span as usize / stride[a] + 1;
        }
        Ok(Self { x, w, out, stride, pad, groups })
    }

    fn out_spatial(&self) -> usize {
        self.out[2] * self.out[3] * self.out[4]
    }

    fn x_spatial(&self) -> usize {
        self.x[2] * self.x[3] * self.x[4]
    }

    fn kernel_volume(&self) -> usize {
        self.w[2] * self.w[3] * self.w[4]
    }
}

/// Output positions `o` in `[lo, hi)` with `0 <= o*s + k - p < n`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, s: usize, p: isize) -> (usize, usize) {
    let first = p - k as isize;
    let lo = if first > 0 { (first as usize).div_ceil(s) } else { 0 };
    let last = in_len as isize - 1 + p - k as isize;
    let hi = if last < 0 { 0 } else { (last as usize / s + 1).min(out_len) };
    (lo, hi.max(lo))
}

#[inline]
fn input_pos(o: usize, k: usize, s: usize, p: isize) -> usize {
    ((o * s + k) as isize - p) as usize
}

pub(crate) fn forward<T: Scalar>(plan: &Plan, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let [_, cin, d, h, wd] = plan.x;
    let [cout, cin_g, kd, kh, kw] = plan.w;
    let [_, _, od, oh, ow] = plan.out;
    let [sd, sh, sw] = plan.stride;
    let [pd, ph, pw] = plan.pad;
    let cout_g = cout / plan.groups;
    let osp = plan.out_spatial();
    let xsp = plan.x_spatial();
    let kvol = plan.kernel_volume();

    let mut out = vec![T::zero(); plan.out[0] * cout * osp];
    out.par_chunks_mut(osp).enumerate().for_each(|(bo, dst)| {
        let (b, oc) = (bo / cout, bo % cout);
        let g = oc / cout_g;
        for icg in 0..cin_g {
            let ic = g * cin_g + icg;
            let xin = &x[(b * cin + ic) * xsp..][..xsp];
            let wk = &w[(oc * cin_g + icg) * kvol..][..kvol];
            for dz in 0..kd {
                let (zlo, zhi) = valid_range(od, d, dz, sd, pd);
                for dy in 0..kh {
                    let (ylo, yhi) = valid_range(oh, h, dy, sh, ph);
                    for dx in 0..kw {
                        let (xlo, xhi) = valid_range(ow, wd, dx, sw, pw);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = wk[(dz * kh + dy) * kw + dx];
                        for z in zlo..zhi {
                            let iz = input_pos(z, dz, sd, pd);
                            for y in ylo..yhi {
                                let iy = input_pos(y, dy, sh, ph);
                                let row = &xin[(iz * h + iy) * wd..][..wd];
                                let orow = &mut dst[(z * oh + y) * ow..][..ow];
                                let start = input_pos(xlo, dx, sw, pw);
                                if sw == 1 {
                                    for (o, &v) in orow[xlo..xhi].iter_mut().zip(&row[start..]) {
                                        *o += wv * v;
                                    }
                                } else {
                                    for (o, &v) in
                                        orow[xlo..xhi].iter_mut().zip(row[start..].iter().step_by(sw))
                                    {
                                        *o += wv * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            let bv = bias[oc];
            for o in dst.iter_mut() {
                *o += bv;
            }
        }
    });
    out
}

/// Gradient with respect to the kernel: correlation of the input with the
/// upstream gradient.
pub(crate) fn backward_weight<T: Scalar>(plan: &Plan, x: &[T], upstream: &[T]) -> Vec<T> {
    let [batch, cin, d, h, wd] = plan.x;
    let [cout, cin_g, kd, kh, kw] = plan.w;
    let [_, _, od, oh, ow] = plan.out;
    let [sd, sh, sw] = plan.stride;
    let [pd, ph, pw] = plan.pad;
    let cout_g = cout / plan.groups;
    let osp = plan.out_spatial();
    let xsp = plan.x_spatial();
    let kvol = plan.kernel_volume();

    let mut grad = vec![T::zero(); cout * cin_g * kvol];
    grad.par_chunks_mut(cin_g * kvol).enumerate().for_each(|(oc, gw)| {
        let g = oc / cout_g;
        for b in 0..batch {
            let up = &upstream[(b * cout + oc) * osp..][..osp];
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let xin = &x[(b * cin + ic) * xsp..][..xsp];
                for dz in 0..kd {
                    let (zlo, zhi) = valid_range(od, d, dz, sd, pd);
                    for dy in 0..kh {
                        let (ylo, yhi) = valid_range(oh, h, dy, sh, ph);
                        for dx in 0..kw {
                            let (xlo, xhi) = valid_range(ow, wd, dx, sw, pw);
                            let mut acc = T::zero();
                            for z in zlo..zhi {
                                let iz = input_pos(z, dz, sd, pd);
                                for y in ylo..yhi {
                                    let iy = input_pos(y, dy, sh, ph);
                                    let row = &xin[(iz * h + iy) * wd..][..wd];
                                    let urow = &up[(z * oh + y) * ow..][..ow];
                                    for xo in xlo..xhi {
                                        acc += urow[xo] * row[input_pos(xo, dx, sw, pw)];
                                    }
                                }
                            }
                            gw[icg * kvol + (dz * kh + dy) * kw + dx] += acc;
                        }
                    }
                }
            }
        }
    });
    grad
}

/// Gradient with respect to the input: transposed convolution of the
/// upstream gradient with the kernel.
pub(crate) fn backward_input<T: Scalar>(plan: &Plan, w: &[T], upstream: &[T]) -> Vec<T> {
    let [batch, cin, d, h, wd] = plan.x;
    let [cout, cin_g, kd, kh, kw] = plan.w;
    let [_, _, od, oh, ow] = plan.out;
    let [sd, sh, sw] = plan.stride;
    let [pd, ph, pw] = plan.pad;
    let cout_g = cout / plan.groups;
    let osp = plan.out_spatial();
    let xsp = plan.x_spatial();
    let kvol = plan.kernel_volume();

    let mut grad = vec![T::zero(); batch * cin * xsp];
    grad.par_chunks_mut(cin * xsp).enumerate().for_each(|(b, gx)| {
        for oc in 0..cout {
            let g = oc / cout_g;
            let up = &upstream[(b * cout + oc) * osp..][..osp];
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let gin = &mut gx[ic * xsp..][..xsp];
                let wk = &w[(oc * cin_g + icg) * kvol..][..kvol];
                for dz in 0..kd {
                    let (zlo, zhi) = valid_range(od, d, dz, sd, pd);
                    for dy in 0..kh {
                        let (ylo, yhi) = valid_range(oh, h, dy, sh, ph);
                        for dx in 0..kw {
                            let (xlo, xhi) = valid_range(ow, wd, dx, sw, pw);
                            let wv = wk[(dz * kh + dy) * kw + dx];
                            for z in zlo..zhi {
                                let iz = input_pos(z, dz, sd, pd);
                                for y in ylo..yhi {
                                    let iy = input_pos(y, dy, sh, ph);
                                    let row = &mut gin[(iz * h + iy) * wd..][..wd];
                                    let urow = &up[(z * oh + y) * ow..][..ow];
                                    for xo in xlo..xhi {
                                        row[input_pos(xo, dx, sw, pw)] += wv * urow[xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_brute_force() {
        for out_len in 1..6 {
            for in_len in 1..6 {
                for k in 0..4 {
                    for s in 1..4 {
                        for p in -2isize..3 {
                            let (lo, hi) = valid_range(out_len, in_len, k, s, p);
                            let expect: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let i = (o * s + k) as isize - p;
                                    i >= 0 && i < in_len as isize
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, expect, "{out_len} {in_len} {k} {s} {p}");
                        }
                    }
                }
            }
        }
    }
}
