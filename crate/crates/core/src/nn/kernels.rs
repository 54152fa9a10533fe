//! Raw numeric kernels behind the graph ops. Everything works on flat
//! row-major slices; shape checking happens in the graph layer.

/// How a convolution reads outside the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    beta: f64,
    c: &mut [f64],
    c_rs: usize,
    c_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m == 0 || k == 0 || (m - 1) * a_rs + (k - 1) * a_cs < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * b_rs + (n - 1) * b_cs < b.len());
    assert!((m - 1) * c_rs + (n - 1) * c_cs < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

/// Geometry of one 2-D convolution over a single image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            mode,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Source index along an axis of length `len`, or `None` when the tap
    /// falls in zero padding.
    #[inline]
    fn source(&self, o: usize, kk: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < len {
            Some(pos as usize)
        } else {
            match self.mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
            }
        }
    }
}

impl ConvGeom {
    /// Output columns `lo..hi` whose taps at offset `kx` land inside a row
    /// of length `len`; the rest read padding.
    #[inline]
    fn interior(&self, kx: usize, len: usize, count: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride).min(count);
        // largest o with o·stride + kx - pad <= len - 1
        let hi = if len + self.pad > kx {
            ((len + self.pad - kx - 1) / self.stride + 1).min(count)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

use super::direct;

/// Unfolds one image (`cin × h × w`) into a `cin·k·k × ho·wo` matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let out_len = g.out_len();
    let hw = g.h * g.w;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut col[row * out_len..(row + 1) * out_len];
                let (lo, hi) = g.interior(kx, g.w, g.wo);
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        line.fill(0.0);
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let (left, right) = match g.mode {
                        PadMode::Zero => (0.0, 0.0),
                        PadMode::Replicate => (src[0], src[g.w - 1]),
                    };
                    line[..lo].fill(left);
                    line[hi..].fill(right);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, s) in line[lo..hi]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back and accumulates into `grad`.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom, grad: &mut [f64]) {
    let out_len = g.out_len();
    let hw = g.h * g.w;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut grad[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &col[row * out_len..(row + 1) * out_len];
                let (lo, hi) = g.interior(kx, g.w, g.wo);
                for oy in 0..g.ho {
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    if g.mode == PadMode::Replicate {
                        dst[0] += line[..lo].iter().sum::<f64>();
                        dst[g.w - 1] += line[hi..].iter().sum::<f64>();
                    }
                    let first = lo * g.stride + kx - g.pad;
                    for (s, d) in line[lo..hi]
                        .iter()
                        .zip(dst[first..].iter_mut().step_by(g.stride))
                    {
                        *d += *s;
                    }
                }
                row += 1;
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Runs `f` with two per-thread scratch buffers of at least `len` elements.
/// Their contents are unspecified on entry.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (a, b) = &mut *guard;
        if a.len() < len {
            a.resize(len, 0.0);
            b.resize(len, 0.0);
        }
        f(&mut a[..len], &mut b[..len])
    })
}

/// Forward convolution over a batch. `weight` is `cout × cin·k·k`.
pub(crate) fn conv2d_forward(
    input: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
) -> Vec<f64> {
    conv2d_forward_with(input, batch, g, weight, bias, cout, direct::applies(g))
}

pub(crate) fn conv2d_forward_with(
    input: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    use_direct: bool,
) -> Vec<f64> {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.out_len();
    let kdim = g.col_rows();
    let mut out = vec![0.0; batch * cout * out_len];
    if use_direct {
        let packed = direct::Weights::new(weight, cout, kdim);
        for (x, y) in input
            .chunks_exact(in_len)
            .zip(out.chunks_exact_mut(cout * out_len))
        {
            if let Some(b) = bias {
                for (co, chunk) in y.chunks_exact_mut(out_len).enumerate() {
                    chunk.fill(b[co]);
                }
            }
            direct::forward(x, g, &packed, y, bias.is_some());
        }
        return out;
    }
    let scratch = if g.is_pointwise() { 0 } else { kdim * out_len };
    with_scratch(scratch, |col, _| {
        for n in 0..batch {
            let x = &input[n * in_len..(n + 1) * in_len];
            let y = &mut out[n * cout * out_len..(n + 1) * cout * out_len];
            if let Some(b) = bias {
                for (co, chunk) in y.chunks_exact_mut(out_len).enumerate() {
                    chunk.fill(b[co]);
                }
            }
            let cols: &[f64] = if g.is_pointwise() {
                x
            } else {
                im2col(x, g, col);
                col
            };
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            // Yᵀ = colsᵀ·Wᵀ; the pixel axis as gemm rows runs faster
            gemm(
                out_len, kdim, cout, 1.0, cols, 1, out_len, weight, 1, kdim, beta, y, 1, out_len,
            );
        }
    });
    out
}

/// For stride-1 zero-padded convolutions the input gradient is itself a
/// convolution of the upstream gradient with the spatially flipped,
/// channel-transposed kernel. This is its geometry.
fn transposed_geometry(g: &ConvGeom, cout: usize) -> Option<ConvGeom> {
    if g.stride != 1 || g.mode != PadMode::Zero || g.pad >= g.k {
        return None;
    }
    let tg = ConvGeom::new(cout, g.ho, g.wo, g.k, 1, g.k - 1 - g.pad, PadMode::Zero)?;
    debug_assert_eq!((tg.ho, tg.wo), (g.h, g.w));
    Some(tg)
}

fn flipped_kernel(weight: &[f64], cout: usize, cin: usize, kk: usize) -> Vec<f64> {
    let mut flipped = vec![0.0; cin * cout * kk];
    for co in 0..cout {
        for ci in 0..cin {
            let src = &weight[(co * cin + ci) * kk..][..kk];
            let dst = &mut flipped[(ci * cout + co) * kk..][..kk];
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
    }
    flipped
}

/// How the input gradient of one convolution is formed.
enum InputGrad {
    Pointwise,
    Direct(ConvGeom, direct::Weights),
    Flipped(ConvGeom, Vec<f64>),
    Scatter,
}

/// Gradients of a batched convolution. Any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    cout: usize,
    upstream: &[f64],
    d_input: Option<&mut [f64]>,
    d_weight: Option<&mut [f64]>,
    d_bias: Option<&mut [f64]>,
) {
    let use_direct = direct::applies(g);
    conv2d_backward_with(
        input, batch, g, weight, cout, upstream, d_input, d_weight, d_bias, use_direct,
    );
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_with(
    input: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    cout: usize,
    upstream: &[f64],
    mut d_input: Option<&mut [f64]>,
    mut d_weight: Option<&mut [f64]>,
    mut d_bias: Option<&mut [f64]>,
    use_direct: bool,
) {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.out_len();
    let kdim = g.col_rows();
    let kk = g.k * g.k;
    let input_grad = match transposed_geometry(g, cout) {
        _ if g.is_pointwise() => InputGrad::Pointwise,
        Some(tg) if use_direct => {
            InputGrad::Direct(tg, direct::Weights::flipped(weight, cout, g.cin, kk))
        }
        Some(tg) if d_input.is_some() => {
            InputGrad::Flipped(tg, flipped_kernel(weight, cout, g.cin, kk))
        }
        _ => InputGrad::Scatter,
    };
    let mut scratch = if g.is_pointwise() || use_direct {
        0
    } else {
        kdim * out_len
    };
    match &input_grad {
        InputGrad::Flipped(tg, _) => scratch = scratch.max(tg.col_rows() * tg.out_len()),
        InputGrad::Scatter if d_input.is_some() => scratch = scratch.max(kdim * out_len),
        _ => {}
    }
    with_scratch(scratch, |col, dcol| {
        for n in 0..batch {
            let dy = &upstream[n * cout * out_len..(n + 1) * cout * out_len];
            if let Some(db) = d_bias.as_deref_mut() {
                for (co, chunk) in dy.chunks_exact(out_len).enumerate() {
                    db[co] += chunk.iter().sum::<f64>();
                }
            }
            if let Some(dw) = d_weight.as_deref_mut() {
                let x = &input[n * in_len..(n + 1) * in_len];
                if use_direct {
                    direct::weight_grad(x, g, dy, cout, dw);
                } else {
                    let cols: &[f64] = if g.is_pointwise() {
                        x
                    } else {
                        im2col(x, g, col);
                        col
                    };
                    // dWᵀ += cols·dYᵀ
                    gemm(
                        kdim, out_len, cout, 1.0, cols, out_len, 1, dy, 1, out_len, 1.0, dw, 1,
                        kdim,
                    );
                }
            }
            if let Some(dx) = d_input.as_deref_mut() {
                let dx = &mut dx[n * in_len..(n + 1) * in_len];
                match &input_grad {
                    InputGrad::Pointwise => gemm(
                        out_len, cout, kdim, 1.0, dy, 1, out_len, weight, kdim, 1, 1.0, dx, 1,
                        out_len,
                    ),
                    InputGrad::Direct(tg, packed) => direct::forward(dy, tg, packed, dx, true),
                    InputGrad::Flipped(tg, flipped) => {
                        // correlate dY with the flipped kernel: a short, wide
                        // product instead of a tall col matrix plus a scatter
                        im2col(dy, tg, col);
                        let tk = tg.col_rows();
                        let hw = tg.out_len();
                        gemm(
                            hw, tk, g.cin, 1.0, col, 1, hw, flipped, 1, tk, 1.0, dx, 1, hw,
                        );
                    }
                    InputGrad::Scatter => {
                        gemm(
                            out_len, cout, kdim, 1.0, dy, 1, out_len, weight, kdim, 1, 0.0, dcol,
                            1, out_len,
                        );
                        col2im(dcol, g, dx);
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposed_operand() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| f64::from(v) * 0.5).collect(); // stored 4x3, used as 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &a, 3, 1, &b, 1, 3, 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert_eq!(c[i * 4 + j], expect);
            }
        }
    }

    #[test]
    fn im2col_matches_per_tap_lookup() {
        for mode in [PadMode::Zero, PadMode::Replicate] {
            for (k, stride, pad) in [
                (3, 1, 1),
                (3, 2, 1),
                (4, 2, 1),
                (5, 1, 2),
                (3, 3, 0),
                (1, 1, 0),
            ] {
                let g = ConvGeom::new(2, 7, 6, k, stride, pad, mode).unwrap();
                let x: Vec<f64> = (0..84).map(|v| f64::from(v) + 1.0).collect();
                let mut col = vec![f64::NAN; g.col_rows() * g.out_len()];
                im2col(&x, &g, &mut col);
                let mut i = 0;
                for ci in 0..2 {
                    for ky in 0..k {
                        for kx in 0..k {
                            for oy in 0..g.ho {
                                for ox in 0..g.wo {
                                    let want = match (g.source(oy, ky, 7), g.source(ox, kx, 6)) {
                                        (Some(iy), Some(ix)) => x[ci * 42 + iy * 6 + ix],
                                        _ => 0.0,
                                    };
                                    assert_eq!(col[i], want, "{mode:?} k{k} s{stride} p{pad}");
                                    i += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_direct_sum() {
        for (k, stride, pad, mode) in [
            (3, 1, 1, PadMode::Zero),
            (3, 1, 0, PadMode::Zero),
            (5, 1, 1, PadMode::Zero),
            (3, 2, 1, PadMode::Zero),
            (3, 1, 1, PadMode::Replicate),
        ] {
            let (cin, cout, h, w) = (2, 3, 6, 5);
            let g = ConvGeom::new(cin, h, w, k, stride, pad, mode).unwrap();
            let x: Vec<f64> = (0..cin * h * w).map(|v| (v as f64 * 0.3).sin()).collect();
            let wt: Vec<f64> = (0..cout * cin * k * k)
                .map(|v| (v as f64 * 0.7).cos())
                .collect();
            let dy: Vec<f64> = (0..cout * g.out_len())
                .map(|v| (v as f64 * 0.13).sin())
                .collect();
            let mut dx = vec![0.0; x.len()];
            conv2d_backward(&x, 1, &g, &wt, cout, &dy, Some(&mut dx), None, None);
            let mut want = vec![0.0; x.len()];
            for co in 0..cout {
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            for oy in 0..g.ho {
                                for ox in 0..g.wo {
                                    if let (Some(iy), Some(ix)) =
                                        (g.source(oy, ky, h), g.source(ox, kx, w))
                                    {
                                        want[ci * h * w + iy * w + ix] += wt
                                            [((co * cin + ci) * k + ky) * k + kx]
                                            * dy[co * g.out_len() + oy * g.wo + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for (a, b) in dx.iter().zip(&want) {
                assert!(
                    (a - b).abs() < 1e-12,
                    "k{k} s{stride} p{pad} {mode:?}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for mode in [PadMode::Zero, PadMode::Replicate] {
            for stride in [1, 2] {
                let g = ConvGeom::new(2, 5, 6, 3, stride, 1, mode).unwrap();
                let x: Vec<f64> = (0..60).map(|v| (f64::from(v) * 0.37).sin()).collect();
                let y: Vec<f64> = (0..g.col_rows() * g.out_len())
                    .map(|v| (f64::from(v as u32) * 0.11).cos())
                    .collect();
                let mut col = vec![0.0; y.len()];
                im2col(&x, &g, &mut col);
                let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
                let mut back = vec![0.0; x.len()];
                col2im(&y, &g, &mut back);
                let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-10, "{mode:?} stride {stride}");
            }
        }
    }
}
