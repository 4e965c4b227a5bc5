#![allow(dead_code)]

use istpa::tape::{Combine, Padding, L2_EPSILON};
use istpa::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

/// Random values with pairwise gaps, keeping relu kinks and max ties at
/// least `gap` away from any value.
pub fn separated(shape: &[usize], seed: u64) -> Tensor {
    let mut t = randn(shape, seed);
    let n = t.numel();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| t.data()[a].total_cmp(&t.data()[b]));
    let d = t.data_mut();
    for (rank, &i) in order.iter().enumerate() {
        // Evenly spaced in [-2, 2] with a nudge off zero.
        d[i] = -2.0 + 4.0 * (rank as f64 + 0.5) / n as f64 + 0.013;
    }
    t
}

/// Explicit triple-loop matrix product.
pub fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.data()[i * k + t] * b.data()[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// Adaptive max pooling by explicit window enumeration.
pub fn pool_oracle(x: &Tensor, tw: usize, th: usize) -> Tensor {
    let s = x.shape();
    let (k, w, h, c) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; k * tw * th * c];
    for f in 0..k {
        for m in 0..tw {
            let r0 = (m * w) / tw;
            let r1 = ((m + 1) * w).div_ceil(tw);
            for n in 0..th {
                let c0 = (n * h) / th;
                let c1 = ((n + 1) * h).div_ceil(th);
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for r in r0..r1 {
                        for q in c0..c1 {
                            best = best.max(x.data()[((f * w + r) * h + q) * c + ch]);
                        }
                    }
                    out[((f * tw + m) * th + n) * c + ch] = best;
                }
            }
        }
    }
    Tensor::new(&[k, tw, th, c], out).unwrap()
}

/// Valid-padding stride-`s` cross-correlation by explicit loops.
pub fn conv_valid_oracle(x: &Tensor, k: &Tensor, s: usize) -> Tensor {
    let xs = x.shape();
    let ks = k.shape();
    let (f, w, h, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    let ow = (w - kh) / s + 1;
    let oh = (h - kw) / s + 1;
    let mut out = vec![0.0; f * ow * oh * cout];
    for n in 0..f {
        for i in 0..ow {
            for j in 0..oh {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for a in 0..kh {
                        for b in 0..kw {
                            for ci in 0..cin {
                                let xv = x.data()[((n * w + i * s + a) * h + j * s + b) * cin + ci];
                                let kv = k.data()[((a * kw + b) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((n * ow + i) * oh + j) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(&[f, ow, oh, cout], out).unwrap()
}

pub type OpProgram = Box<dyn Fn(&mut Tape, &[Var]) -> istpa::Result<Var>>;

/// Scalar read-out `Σ r ⊙ v` with fixed random weights `r`.
pub fn readout(t: &mut Tape, v: Var, seed: u64) -> istpa::Result<Var> {
    let r = t.constant(randn(t.shape(v), seed));
    let p = t.combine(Combine::Multiplication, &[v, r])?;
    Ok(t.sum(p))
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> istpa::Result<Var> + 'static,
) -> (&'static str, Vec<Tensor>, OpProgram) {
    (name, inputs, Box::new(f))
}

/// One scalar program per differentiable op, with inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, OpProgram)> {
    let s = seed.wrapping_mul(1000);
    let r = move |shape: &[usize], k: u64| randn(shape, s + k);
    let mut out = vec![
        case("matmul", vec![r(&[3, 4], 1), r(&[4, 2], 2)], move |t, v| {
            let o = t.matmul(v[0], v[1])?;
            readout(t, o, s + 100)
        }),
        case("transpose", vec![r(&[3, 4], 3)], move |t, v| {
            let o = t.transpose(v[0])?;
            readout(t, o, s + 101)
        }),
        case("softmax_rows", vec![r(&[3, 4], 4)], move |t, v| {
            let o = t.softmax_rows(v[0])?;
            readout(t, o, s + 102)
        }),
        case("l2_normalize_rows", vec![r(&[3, 4], 5)], move |t, v| {
            let (o, _) = t.l2_normalize_rows(v[0], L2_EPSILON)?;
            readout(t, o, s + 103)
        }),
        case(
            "max_pool",
            vec![separated(&[2, 5, 5, 2], s + 6)],
            move |t, v| {
                let o = t.adaptive_max_pool2d(v[0], (2, 3))?;
                readout(t, o, s + 104)
            },
        ),
        case("relu", vec![separated(&[3, 4], s + 7)], move |t, v| {
            let o = t.relu(v[0]);
            readout(t, o, s + 105)
        }),
        case(
            "affine",
            vec![r(&[3, 4], 8), r(&[4, 2], 9), r(&[2], 10)],
            move |t, v| {
                let o = t.affine(v[0], v[1], v[2])?;
                readout(t, o, s + 106)
            },
        ),
        case(
            "add_channel_bias",
            vec![r(&[2, 3, 4], 11), r(&[4], 12)],
            move |t, v| {
                let o = t.add_channel_bias(v[0], v[1])?;
                readout(t, o, s + 107)
            },
        ),
        case("slice/mean_frames", vec![r(&[4, 2, 3], 13)], move |t, v| {
            let sl = t.slice_frames(v[0], 1, 2)?;
            let m = t.mean_frames(sl)?;
            readout(t, m, s + 108)
        }),
        case(
            "sub/zero_diagonal/sum_squares",
            vec![r(&[3, 3], 14), r(&[3, 3], 15)],
            |t, v| {
                let d = t.sub(v[0], v[1])?;
                let z = t.zero_diagonal(d)?;
                Ok(t.sum_squares(z))
            },
        ),
        case(
            "sqrt_clamped/add_scalar/scale",
            vec![Tensor::from_rows(&[&[0.7, 2.5, 4.0]])],
            move |t, v| {
                let q = t.sqrt_clamped(v[0]);
                let a = t.add_scalar(q, 1.0);
                let b = t.scale(a, -1.5);
                readout(t, b, s + 109)
            },
        ),
        case("cross_entropy", vec![r(&[1, 3], 16)], |t, v| {
            t.cross_entropy(v[0], 2)
        }),
        case("dropout", vec![r(&[1, 4], 17)], move |t, v| {
            let o = t.dropout(v[0], vec![0.0, 2.0, 2.0, 0.0])?;
            readout(t, o, s + 110)
        }),
        case("reshape", vec![r(&[2, 6], 18)], move |t, v| {
            let o = t.reshape(v[0], &[3, 4])?;
            readout(t, o, s + 111)
        }),
    ];
    for (name, kind) in [
        ("combine_sum", Combine::Sum),
        ("combine_multiplication", Combine::Multiplication),
        ("combine_maximum", Combine::Maximum),
    ] {
        // Slices of one separated tensor, so no two inputs tie.
        let inputs = separated(&[18], s + 19)
            .data()
            .chunks(6)
            .map(|c| Tensor::new(&[2, 3], c.to_vec()).unwrap())
            .collect();
        out.push(case(name, inputs, move |t, v| {
            let o = t.combine(kind, v)?;
            readout(t, o, s + 112)
        }));
    }
    for (name, stride, pad) in [
        ("conv2d_same_s1", 1, Padding::Same),
        ("conv2d_same_s2", 2, Padding::Same),
        ("conv2d_valid_s1", 1, Padding::Valid),
    ] {
        out.push(case(
            name,
            vec![r(&[2, 6, 5, 2], 20), r(&[3, 3, 2, 3], 21)],
            move |t, v| {
                let o = t.conv2d(v[0], v[1], stride, pad)?;
                readout(t, o, s + 113)
            },
        ));
    }
    out
}
