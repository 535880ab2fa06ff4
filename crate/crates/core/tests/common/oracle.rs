//! Loop-based reference implementations.

use candle_core::Tensor;
use refseg::carafe::{reassemble, ReassemblyKernels};
use refseg::decoder::{correlate, ProjectedKernel};

use super::{randn, to_vec};

/// CARAFE on `(1, C, h, w)` from raw encoder logits `(1, σ²k², h, w)`, written as explicit loops:
/// channel `kk·σ² + di·σ + dj` of source pixel `(i, j)` is kernel tap `kk` of output pixel
/// `(σi + di, σj + dj)`; taps are softmax-normalized and applied to the zero-padded `k×k`
/// neighborhood of the source pixel.
pub fn carafe_loops(x: &[f64], c: usize, h: usize, w: usize, raw: &[f64], k: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = (h * s, w * s);
    let r = (k / 2) as isize;
    let mut out = vec![0.0; c * oh * ow];
    for oi in 0..oh {
        for oj in 0..ow {
            let (i, j) = (oi / s, oj / s);
            let (di, dj) = (oi % s, oj % s);
            let logits: Vec<f64> = (0..k * k)
                .map(|kk| raw[((kk * s * s + di * s + dj) * h + i) * w + j])
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for ch in 0..c {
                let mut acc = 0.0;
                for a in -r..=r {
                    for b in -r..=r {
                        let (y, xx) = (i as isize + a, j as isize + b);
                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let kk = ((a + r) as usize) * k + (b + r) as usize;
                        let wgt = (logits[kk] - m).exp() / z;
                        acc += wgt * x[(ch * h + y as usize) * w + xx as usize];
                    }
                }
                out[(ch * oh + oi) * ow + oj] = acc;
            }
        }
    }
    out
}

/// Max abs difference between `reassemble` and the loop oracle on a random `C×h×w` input.
pub fn carafe_vs_loops(c: usize, h: usize, w: usize, k: usize, s: usize, seed: u64) -> f64 {
    let x = randn(&[1, c, h, w], seed);
    let raw = randn(&[1, s * s * k * k, h, w], seed + 1);
    let kernels = ReassemblyKernels::from_encoder_output(&raw, k, s).unwrap();
    let fast = to_vec(&reassemble(&x, &kernels).unwrap());
    let slow = carafe_loops(&to_vec(&x), c, h, w, &to_vec(&raw), k, s);
    fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Max abs difference between `correlate` with a 1×1 kernel and per-pixel inner products.
pub fn correlate_k1_vs_dot(b: usize, c: usize, h: usize, w: usize, seed: u64) -> f64 {
    let f = randn(&[b, c, h, w], seed);
    let kw = randn(&[b, c, 1, 1], seed + 1);
    let kb = randn(&[b], seed + 2);
    let k = ProjectedKernel {
        weights: kw.clone(),
        bias: kb.clone(),
    };
    let fast = to_vec(&correlate(&k, &f).unwrap());
    let (fv, wv, bv) = (to_vec(&f), to_vec(&kw), to_vec(&kb));
    let mut worst = 0f64;
    for n in 0..b {
        for p in 0..h * w {
            let dot: f64 = (0..c).map(|ch| wv[n * c + ch] * fv[(n * c + ch) * h * w + p]).sum();
            worst = worst.max((fast[n * h * w + p] - (dot + bv[n])).abs());
        }
    }
    worst
}

pub fn tensor_max_abs(t: &Tensor) -> f64 {
    to_vec(t).iter().fold(0.0, |m, v| m.max(v.abs()))
}
