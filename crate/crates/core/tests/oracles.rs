mod common;

use common::{matmul_loops, random_tensor, rng};
use marginlab::autodiff::{Graph, LrnParams, Padding};
use marginlab::Tensor;
use proptest::prelude::*;

/// Direct NHWC convolution with TF-style same padding (extra pad on the
/// bottom/right).
fn conv_loops(x: &Tensor, f: &Tensor, stride: usize, padding: Padding) -> (Vec<usize>, Vec<f64>) {
    let [n, h, w, c] = x.shape().try_into().unwrap();
    let [kh, kw, _, fo] = f.shape().try_into().unwrap();
    let (oh, ow, pt, pl) = match padding {
        Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let ph = ((oh - 1) * stride + kh).saturating_sub(h);
            let pw = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, ph / 2, pw / 2)
        }
    };
    let mut out = vec![0.0; n * oh * ow * fo];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for o in 0..fo {
                    let mut s = 0.0;
                    for di in 0..kh {
                        for dj in 0..kw {
                            let (yi, xj) = ((i * stride + di) as isize - pt as isize, (j * stride + dj) as isize - pl as isize);
                            if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                continue;
                            }
                            for ch in 0..c {
                                let xv = x.data()[((b * h + yi as usize) * w + xj as usize) * c + ch];
                                let fv = f.data()[((di * kw + dj) * c + ch) * fo + o];
                                s += xv * fv;
                            }
                        }
                    }
                    out[((b * oh + i) * ow + j) * fo + o] = s;
                }
            }
        }
    }
    (vec![n, oh, ow, fo], out)
}

fn maxpool_loops(x: &Tensor, k: usize, s: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, h, w, c] = x.shape().try_into().unwrap();
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = vec![f64::NEG_INFINITY; n * oh * ow * c];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let o = &mut out[((b * oh + i) * ow + j) * c + ch];
                    for di in 0..k {
                        for dj in 0..k {
                            *o = o.max(x.data()[((b * h + i * s + di) * w + j * s + dj) * c + ch]);
                        }
                    }
                }
            }
        }
    }
    (vec![n, oh, ow, c], out)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[m, k], -2.0, 2.0);
        let b = random_tensor(&mut r, &[k, n], -2.0, 2.0);
        let got = a.matmul(&b).unwrap();
        prop_assert_eq!(got.shape(), &[m, n]);
        prop_assert!(close(got.data(), &matmul_loops(&a, &b), 1e-12));
    }

    #[test]
    fn conv2d_matches_direct_loops(
        h in 3usize..8, w in 3usize..8, c in 1usize..4, fo in 1usize..4,
        k in 1usize..4, stride in 1usize..3, same in any::<bool>(), seed in any::<u64>(),
    ) {
        let padding = if same { Padding::Same } else { Padding::Valid };
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, h, w, c], -1.0, 1.0);
        let f = random_tensor(&mut r, &[k, k, c, fo], -1.0, 1.0);
        let mut g = Graph::new();
        let (xi, fi) = (g.constant(x.clone()), g.constant(f.clone()));
        let y = g.conv2d(xi, fi, stride, padding).unwrap();
        let (shape, want) = conv_loops(&x, &f, stride, padding);
        prop_assert_eq!(g.value(y).shape(), shape.as_slice());
        prop_assert!(close(g.value(y).data(), &want, 1e-12));
    }

    #[test]
    fn maxpool_matches_direct_loops(h in 2usize..9, w in 2usize..9, k in 1usize..4, s in 1usize..4, seed in any::<u64>()) {
        prop_assume!(k <= h && k <= w);
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, h, w, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = g.maxpool2d(xi, k, s).unwrap();
        let (shape, want) = maxpool_loops(&x, k, s);
        prop_assert_eq!(g.value(y).shape(), shape.as_slice());
        prop_assert_eq!(g.value(y).data(), want.as_slice());
    }

    #[test]
    fn lrn_matches_direct_formula(c in 1usize..12, radius in 0usize..6, seed in any::<u64>()) {
        let p = LrnParams { radius, bias: 1.5, alpha: 0.2, beta: 0.75 };
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[3, 1, 2, c], -2.0, 2.0);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = g.lrn(xi, p).unwrap();
        let mut want = Vec::new();
        for pos in x.data().chunks(c) {
            for ch in 0..c {
                let mut sq = 0.0;
                for (j, v) in pos.iter().enumerate() {
                    if j + radius >= ch && j <= ch + radius {
                        sq += v * v;
                    }
                }
                want.push(pos[ch] / (p.bias + p.alpha * sq).powf(p.beta));
            }
        }
        prop_assert!(close(g.value(y).data(), &want, 1e-12));
    }

    #[test]
    fn broadcast_add_matches_loops(m in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[m, 1], -1.0, 1.0);
        let b = random_tensor(&mut r, &[n], -1.0, 1.0);
        let mut g = Graph::new();
        let (ai, bi) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.add(ai, bi).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[m, n]);
        for i in 0..m {
            for j in 0..n {
                prop_assert_eq!(g.value(y).data()[i * n + j], a.data()[i] + b.data()[j]);
            }
        }
    }
}

#[test]
fn pooling_example_and_lrn_defaults() {
    let x = Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut g = Graph::new();
    let xi = g.constant(x);
    let y = g.maxpool2d(xi, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    let d = LrnParams::default();
    assert_eq!((d.radius, d.bias, d.alpha, d.beta), (4, 1.0, 0.001 / 9.0, 0.75));
}
