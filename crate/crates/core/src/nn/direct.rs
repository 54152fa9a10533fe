//! Direct stride-1 convolution for x86-64 with AVX-512F.
//!
//! The input is padded once, then every output row is computed over the
//! padded width, so one flat index `q` addresses an output pixel and tap `t`
//! reads the padded input at `q + offs[t]`. The two spare columns per row
//! are computed and dropped. No im2col matrix and no gemm packing are needed;
//! with the small channel counts of the networks here those copies cost as
//! much as the multiply itself.

use super::kernels::{ConvGeom, PadMode};

const LANES: usize = 8;

/// Whether the direct kernels run on this machine.
pub(crate) fn available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx512f")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Whether `g` takes the direct path.
pub(crate) fn applies(g: &ConvGeom) -> bool {
    g.stride == 1 && !g.is_pointwise() && available()
}

struct Plan {
    wp: usize,
    /// Per-channel stride of the padded input, with slack for the last taps.
    cs: usize,
    /// Flat output length, `ho × wp`.
    l: usize,
    offs: Vec<usize>,
}

impl Plan {
    fn new(g: &ConvGeom) -> Self {
        let hp = g.h + 2 * g.pad;
        let wp = g.w + 2 * g.pad;
        let offs = (0..g.k * g.k).map(|t| (t / g.k) * wp + t % g.k).collect();
        Plan {
            wp,
            cs: hp * wp + g.k,
            l: g.ho * wp,
            offs,
        }
    }

    fn pad(&self, x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut xp = vec![0.0; g.cin * self.cs];
        let (h, w, p) = (g.h, g.w, g.pad);
        for c in 0..g.cin {
            let src = &x[c * h * w..(c + 1) * h * w];
            let dst = &mut xp[c * self.cs..];
            for yy in 0..h + 2 * p {
                let sy = match g.mode {
                    _ if (p..p + h).contains(&yy) => yy - p,
                    PadMode::Zero => continue,
                    PadMode::Replicate => yy.saturating_sub(p).min(h - 1),
                };
                let row = &src[sy * w..(sy + 1) * w];
                let out = &mut dst[yy * self.wp..(yy + 1) * self.wp];
                out[p..p + w].copy_from_slice(row);
                if g.mode == PadMode::Replicate {
                    out[..p].fill(row[0]);
                    out[p + w..].fill(row[w - 1]);
                }
            }
        }
        xp
    }
}

/// A kernel repacked as `cin·k·k × cop`, output channels innermost and
/// padded to a whole number of vectors.
pub(crate) struct Weights {
    wt: Vec<f64>,
    cout: usize,
    cop: usize,
}

impl Weights {
    /// From the usual `cout × cin·k·k` layout.
    pub fn new(weight: &[f64], cout: usize, kdim: usize) -> Self {
        let cop = cout.div_ceil(LANES) * LANES;
        let mut wt = vec![0.0; kdim * cop];
        for c0 in (0..cout).step_by(LANES) {
            let rows = &weight[c0 * kdim..(c0 + LANES).min(cout) * kdim];
            for (j, dst) in wt.chunks_exact_mut(cop).enumerate() {
                for (i, row) in rows.chunks_exact(kdim).enumerate() {
                    dst[c0 + i] = row[j];
                }
            }
        }
        Weights { wt, cout, cop }
    }

    /// The kernel whose convolution with the upstream gradient gives the
    /// input gradient: spatially flipped, input and output channels swapped.
    pub fn flipped(weight: &[f64], cout: usize, cin: usize, kk: usize) -> Self {
        let cop = cin.div_ceil(LANES) * LANES;
        let mut wt = vec![0.0; cout * kk * cop];
        for co in 0..cout {
            for t in 0..kk {
                let dst = &mut wt[(co * kk + t) * cop..][..cin];
                for (ci, d) in dst.iter_mut().enumerate() {
                    *d = weight[(co * cin + ci) * kk + kk - 1 - t];
                }
            }
        }
        Weights { wt, cout: cin, cop }
    }
}

/// One image: `y (=|+=) conv(x, w)`. Panics unless [`applies`] holds for `g`.
pub(crate) fn forward(x: &[f64], g: &ConvGeom, w: &Weights, y: &mut [f64], accumulate: bool) {
    assert!(applies(g) && w.wt.len() == g.col_rows() * w.cop);
    let plan = Plan::new(g);
    let xp = plan.pad(x, g);
    let mut yp = vec![0.0; w.cop * plan.l];
    // SAFETY: `applies` checked AVX-512F; buffer sizes follow `plan`.
    #[cfg(target_arch = "x86_64")]
    unsafe {
        avx512::forward(&xp, &plan, g.cin, &w.wt, w.cop, &mut yp)
    };
    let hw = g.out_len();
    for co in 0..w.cout {
        for yy in 0..g.ho {
            let src = &yp[co * plan.l + yy * plan.wp..][..g.wo];
            let dst = &mut y[co * hw + yy * g.wo..][..g.wo];
            if accumulate {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
}

/// One image: `dw += ∂/∂w` of `<dy, conv(x, w)>`.
pub(crate) fn weight_grad(x: &[f64], g: &ConvGeom, dy: &[f64], cout: usize, dw: &mut [f64]) {
    assert!(applies(g));
    let plan = Plan::new(g);
    let xp = plan.pad(x, g);
    let hw = g.out_len();
    let mut dyp = vec![0.0; cout * plan.l];
    for co in 0..cout {
        for yy in 0..g.ho {
            dyp[co * plan.l + yy * plan.wp..][..g.wo]
                .copy_from_slice(&dy[co * hw + yy * g.wo..][..g.wo]);
        }
    }
    let kk = g.k * g.k;
    let src: Vec<usize> = (0..g.col_rows())
        .map(|j| (j / kk) * plan.cs + plan.offs[j % kk])
        .collect();
    // SAFETY: as in `forward`.
    #[cfg(target_arch = "x86_64")]
    unsafe {
        avx512::weight_grad(&xp, &src, &dyp, plan.l, cout, dw)
    };
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::{Plan, LANES};

    /// Output vectors per tile in the forward kernel.
    const NV: usize = 3;
    /// Output-channel and source rows per tile in the weight-gradient kernel.
    const DW_CO: usize = 4;
    const DW_J: usize = 6;

    #[inline(always)]
    fn mask(q: usize, len: usize) -> __mmask8 {
        if q + LANES <= len {
            0xff
        } else if q >= len {
            0
        } else {
            ((1u16 << (len - q)) - 1) as __mmask8
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn forward(
        xp: &[f64],
        plan: &Plan,
        cin: usize,
        wt: &[f64],
        cop: usize,
        yp: &mut [f64],
    ) {
        let l = plan.l;
        debug_assert!(xp.len() >= cin * plan.cs && wt.len() >= cin * plan.offs.len() * cop);
        debug_assert!(yp.len() >= cop * l);
        let xbase = xp.as_ptr();
        let ybase = yp.as_mut_ptr();
        for q0 in (0..l).step_by(NV * LANES) {
            let m: [__mmask8; NV] = std::array::from_fn(|v| mask(q0 + v * LANES, l));
            for cb in (0..cop).step_by(LANES) {
                let mut acc = [[_mm512_setzero_pd(); NV]; LANES];
                let mut w = wt.as_ptr().wrapping_add(cb);
                for ci in 0..cin {
                    let xc = xbase.wrapping_add(ci * plan.cs + q0);
                    for &off in &plan.offs {
                        let p = xc.wrapping_add(off);
                        let mut xv = [_mm512_setzero_pd(); NV];
                        for (v, x) in xv.iter_mut().enumerate() {
                            *x = _mm512_maskz_loadu_pd(m[v], p.wrapping_add(v * LANES));
                        }
                        for (j, row) in acc.iter_mut().enumerate() {
                            let wj = _mm512_set1_pd(*w.wrapping_add(j));
                            for v in 0..NV {
                                row[v] = _mm512_fmadd_pd(wj, xv[v], row[v]);
                            }
                        }
                        w = w.wrapping_add(cop);
                    }
                }
                for (j, row) in acc.iter().enumerate() {
                    for v in 0..NV {
                        _mm512_mask_storeu_pd(
                            ybase.wrapping_add((cb + j) * l + q0 + v * LANES),
                            m[v],
                            row[v],
                        );
                    }
                }
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn weight_grad(
        xp: &[f64],
        src: &[usize],
        dyp: &[f64],
        l: usize,
        cout: usize,
        dw: &mut [f64],
    ) {
        let kdim = src.len();
        debug_assert!(dyp.len() >= cout * l && dw.len() >= cout * kdim);
        debug_assert!(src.iter().all(|&s| s + l <= xp.len()));
        let xbase = xp.as_ptr();
        let dbase = dyp.as_ptr();
        for c0 in (0..cout).step_by(DW_CO) {
            // tails repeat the last valid row; their sums are dropped
            let co: [usize; DW_CO] = std::array::from_fn(|i| (c0 + i).min(cout - 1));
            for j0 in (0..kdim).step_by(DW_J) {
                let js: [usize; DW_J] = std::array::from_fn(|i| src[(j0 + i).min(kdim - 1)]);
                let mut acc = [[_mm512_setzero_pd(); DW_J]; DW_CO];
                for q in (0..l).step_by(LANES) {
                    let m = mask(q, l);
                    let mut d = [_mm512_setzero_pd(); DW_CO];
                    for (dv, &c) in d.iter_mut().zip(&co) {
                        *dv = _mm512_maskz_loadu_pd(m, dbase.wrapping_add(c * l + q));
                    }
                    let mut x = [_mm512_setzero_pd(); DW_J];
                    for (xv, &j) in x.iter_mut().zip(&js) {
                        *xv = _mm512_maskz_loadu_pd(m, xbase.wrapping_add(j + q));
                    }
                    for (row, dv) in acc.iter_mut().zip(&d) {
                        for (a, xv) in row.iter_mut().zip(&x) {
                            *a = _mm512_fmadd_pd(*dv, *xv, *a);
                        }
                    }
                }
                for (i, row) in acc.iter().enumerate().take(cout - c0) {
                    for (jj, a) in row.iter().enumerate().take(kdim - j0) {
                        dw[(c0 + i) * kdim + j0 + jj] += _mm512_reduce_add_pd(*a);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::kernels::{conv2d_backward_with, conv2d_forward_with};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    const CASES: &[(usize, usize, usize, usize, usize, usize, PadMode)] = &[
        // cin, h, w, k, pad, cout, mode
        (3, 8, 8, 3, 1, 16, PadMode::Zero),
        (5, 7, 13, 3, 1, 3, PadMode::Zero),
        (2, 9, 5, 3, 1, 9, PadMode::Replicate),
        (4, 6, 11, 5, 2, 1, PadMode::Zero),
        (3, 10, 10, 3, 0, 20, PadMode::Zero),
        (1, 4, 4, 3, 2, 2, PadMode::Zero),
        (7, 12, 12, 3, 1, 8, PadMode::Replicate),
    ];

    #[test]
    fn matches_im2col_path() {
        if !available() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(cin, h, w, k, pad, cout, mode) in CASES {
            let g = ConvGeom::new(cin, h, w, k, 1, pad, mode).unwrap();
            let x = random(cin * h * w, &mut rng);
            let wgt = random(cout * g.col_rows(), &mut rng);
            let dy = random(cout * g.out_len(), &mut rng);

            let want = conv2d_forward_with(&x, 1, &g, &wgt, None, cout, false);
            let packed = Weights::new(&wgt, cout, g.col_rows());
            let mut got = random(want.len(), &mut rng);
            let offset = got.clone();
            forward(&x, &g, &packed, &mut got, true);
            for i in 0..want.len() {
                assert!(
                    (got[i] - offset[i] - want[i]).abs() < 1e-12,
                    "forward {:?} at {i}",
                    (cin, h, w, k, pad)
                );
            }
            forward(&x, &g, &packed, &mut got, false);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }

            let mut want_dw = vec![0.0; wgt.len()];
            conv2d_backward_with(
                &x,
                1,
                &g,
                &wgt,
                cout,
                &dy,
                None,
                Some(&mut want_dw),
                None,
                false,
            );
            let mut got_dw = vec![0.5; wgt.len()];
            weight_grad(&x, &g, &dy, cout, &mut got_dw);
            for (a, b) in got_dw.iter().zip(&want_dw) {
                assert!((a - 0.5 - b).abs() < 1e-11, "dw {:?}", (cin, h, w, k, pad));
            }
        }
    }
}
