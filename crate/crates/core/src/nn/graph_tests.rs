use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::GradCheck;
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Nested-loop cross-correlation with zero or replicate padding.
fn brute_conv(
    x: &Tensor,
    w: &Tensor,
    b: &[f64],
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Tensor {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, k, _) = w.dims4().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                let inside = iy >= 0 && iy < h as i64 && ix >= 0 && ix < wd as i64;
                                let v = if inside {
                                    x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                } else if mode == PadMode::Replicate {
                                    let iy = iy.clamp(0, h as i64 - 1) as usize;
                                    let ix = ix.clamp(0, wd as i64 - 1) as usize;
                                    x.data()[((bi * cin + ci) * h + iy) * wd + ix]
                                } else {
                                    0.0
                                };
                                acc += v * w.data()[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut r = rng(1);
    let x = Tensor::uniform(&[1, 3, 5, 5], -1.0, 1.0, &mut r);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w), g.input(Tensor::zeros(&[3])));
    let y = g.conv2d(xv, wv, Some(bv), 1, 0, PadMode::Zero).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_averaging_kernel_keeps_constant_interior() {
    let x = Tensor::full(&[1, 1, 6, 6], 0.7);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
    let mut g = Graph::new();
    let (xv, wv) = (g.input(x), g.input(w));
    let y = g.conv2d(xv, wv, None, 1, 1, PadMode::Zero).unwrap();
    let out = g.value(y);
    for yy in 1..5 {
        for xx in 1..5 {
            assert!((out.data()[yy * 6 + xx] - 0.7).abs() < 1e-12);
        }
    }
    // replicate padding keeps the border constant too
    let mut g = Graph::new();
    let (xv, wv) = (
        g.input(Tensor::full(&[1, 1, 6, 6], 0.7)),
        g.input(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0)),
    );
    let y = g.conv2d(xv, wv, None, 1, 1, PadMode::Replicate).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn conv_matches_brute_force() {
    let mut r = rng(2);
    let x = Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
    for (stride, pad, mode) in [
        (1, 1, PadMode::Zero),
        (2, 1, PadMode::Zero),
        (1, 1, PadMode::Replicate),
        (2, 0, PadMode::Zero),
    ] {
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad, mode).unwrap();
        let oracle = brute_conv(&x, &w, b.data(), stride, pad, mode);
        assert_eq!(g.value(y).shape(), oracle.shape());
        for (a, o) in g.value(y).data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-10);
        }
    }
}

#[test]
fn conv_rejects_incompatible_shapes() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 8, 8]));
    let w = g.input(Tensor::zeros(&[4, 2, 3, 3]));
    assert!(g.conv2d(x, w, None, 1, 1, PadMode::Zero).is_err());
    let w = g.input(Tensor::zeros(&[4, 3, 3, 3]));
    assert!(g.conv2d(x, w, None, 3, 1, PadMode::Zero).is_err());
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
    let y = g.leaky_relu(x, LEAKY_SLOPE);
    assert_eq!(g.value(y).data(), &[-0.2, 2.0]);

    let x = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let up = g.upsample_nearest(x, 2).unwrap();
    assert_eq!(
        g.value(up).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );

    let mut r = rng(3);
    let a = Tensor::uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut r);
    let b = Tensor::uniform(&[2, 5, 4, 4], 0.0, 1.0, &mut r);
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let cat = g.concat_channels(&[av, bv]).unwrap();
    assert_eq!(g.value(cat).shape(), &[2, 8, 4, 4]);
    let a2 = g.slice_channels(cat, 0, 3).unwrap();
    let b2 = g.slice_channels(cat, 3, 5).unwrap();
    assert_eq!(g.value(a2), &a);
    assert_eq!(g.value(b2), &b);

    let c = g.input(Tensor::zeros(&[2, 5, 3, 4]));
    assert!(g.concat_channels(&[av, c]).is_err());
}

#[test]
fn backward_simple_cases() {
    // loss = sum(w ⊙ x) → grad(x) = w
    let mut g = Graph::new();
    let w = Tensor::new(vec![3], vec![0.5, -2.0, 3.0]).unwrap();
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap(), true);
    let wv = g.input(w.clone());
    let p = g.mul(wv, x).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &w);

    // loss = sum(x²) at [1, 2] → [2, 4]
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

    // a second call accumulates, zero_grad clears
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());

    // non-scalar loss is rejected
    assert!(g.backward(sq).is_err());
}

#[test]
fn leaky_relu_subgradient_at_zero_is_slope() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), true);
    let y = g.leaky_relu(x, LEAKY_SLOPE);
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[LEAKY_SLOPE]);
}

fn assert_check(name: &str, report: gradcheck::GradCheckReport, tol: f64) {
    let worst = report.worst().unwrap();
    assert!(
        report.max_rel_error() <= tol,
        "{name}: worst {} analytic {} numeric {} rel {}",
        worst.location,
        worst.analytic,
        worst.numeric,
        worst.rel_error
    );
}

/// Random projection so that every op is checked through a generic scalar.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, crate::Error> {
    let mut r = rng(seed);
    let w = Tensor::uniform(g.value(y).shape(), -1.0, 1.0, &mut r);
    let wv = g.input(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

#[test]
fn every_layer_passes_finite_differences() {
    let check = GradCheck::default();
    let mut r = rng(4);
    let x = Tensor::uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[4], -1.0, 1.0, &mut r);

    for (stride, mode) in [
        (1, PadMode::Zero),
        (2, PadMode::Zero),
        (1, PadMode::Replicate),
    ] {
        let rep = check
            .inputs(&[x.clone(), w.clone(), b.clone()], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1, mode)?;
                project(g, y, 10)
            })
            .unwrap();
        assert_check("conv2d", rep, 1e-3);
    }

    let rep = check
        .inputs(std::slice::from_ref(&x), |g, v| {
            let y = g.leaky_relu(v[0], LEAKY_SLOPE);
            project(g, y, 11)
        })
        .unwrap();
    assert_check("leaky_relu", rep, 1e-3);

    let rep = check
        .inputs(std::slice::from_ref(&x), |g, v| {
            let y = g.upsample_nearest(v[0], 2)?;
            project(g, y, 12)
        })
        .unwrap();
    assert_check("upsample", rep, 1e-3);

    let dw = Tensor::uniform(&[5, 108], -1.0, 1.0, &mut r);
    let db = Tensor::uniform(&[5], -1.0, 1.0, &mut r);
    let rep = check
        .inputs(&[x.clone(), dw, db], |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            project(g, y, 13)
        })
        .unwrap();
    assert_check("dense", rep, 1e-3);

    let other = Tensor::uniform(&[2, 2, 6, 6], -1.0, 1.0, &mut r);
    let rep = check
        .inputs(&[x.clone(), other], |g, v| {
            let y = g.concat_channels(&[v[0], v[1]])?;
            let s = g.slice_channels(y, 1, 3)?;
            project(g, s, 14)
        })
        .unwrap();
    assert_check("concat/slice", rep, 1e-3);

    let pos = Tensor::uniform(&[2, 3, 6, 6], 0.0, 1.0, &mut r);
    let rep = check
        .inputs(&[pos], |g, v| {
            let y = g.gradient_magnitude(v[0], crate::DEFAULT_EPSILON)?;
            project(g, y, 15)
        })
        .unwrap();
    assert_check("gradient_magnitude", rep, 1e-3);

    let a = Tensor::uniform(&[7], -3.0, 3.0, &mut r);
    let s = Tensor::uniform(&[1], -1.0, 1.0, &mut r);
    let rep = check
        .inputs(&[a, s], |g, v| {
            let d = g.sub_scalar(v[0], v[1])?;
            let sp = g.softplus(d);
            let sc = g.scale(sp, 1.7);
            let m = g.mean(sc)?;
            let ab = g.abs(d);
            let t = g.sum(ab);
            let both = g.add(m, t)?;
            Ok(g.add_scalar(both, 0.3))
        })
        .unwrap();
    assert_check("scalar ops", rep, 1e-3);
}

#[test]
fn param_binding_and_grads() {
    let mut r = rng(5);
    let conv = Conv2d::same("block.conv", 2, 3, 3);
    let mut tree = ParamTree::new();
    conv.init(&mut tree, 1.0, &mut r).unwrap();
    assert!(tree
        .register("block.conv.bias", Tensor::zeros(&[3]))
        .is_err());

    let mut g = Graph::new();
    let x = g.input(Tensor::uniform(&[1, 2, 5, 5], 0.0, 1.0, &mut r));
    let y = conv.forward(&mut g, Params::trainable(&tree), x).unwrap();
    let loss = g.mean(y).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    assert_eq!(
        grads.names().collect::<Vec<_>>(),
        vec!["block.conv.bias", "block.conv.weight"]
    );
    // d mean / d bias = 1 for every output channel share
    for v in grads.get("block.conv.bias").unwrap().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    let mut g = Graph::new();
    let x = g.input(Tensor::uniform(&[1, 2, 5, 5], 0.0, 1.0, &mut r));
    let y = conv.forward(&mut g, Params::frozen(&tree), x).unwrap();
    let loss = g.mean(y).unwrap();
    g.backward(loss).unwrap();
    assert!(g.param_grads().is_empty());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(9);
        let conv = Conv2d::same("c", 3, 4, 3);
        let mut tree = ParamTree::new();
        conv.init(&mut tree, 0.1, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::uniform(&[2, 3, 7, 7], 0.0, 1.0, &mut r));
        let y = conv.forward(&mut g, Params::trainable(&tree), x).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
