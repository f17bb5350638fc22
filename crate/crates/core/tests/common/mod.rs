#![allow(dead_code)]

use crackseg::numeric::gradcheck::{numeric_gradient, relative_error, STEP};
use crackseg::numeric::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Checks every input coordinate of `build` against central differences of
/// the scalar `Σ out ⊙ r` for a fixed random `r`. Returns the worst relative
/// error over coordinates whose derivative exceeds `1e-6`.
pub fn max_grad_error(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
) -> f64 {
    let mut r = rng(99);
    let probe_weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        random_tensor(tape.shape(out), &mut r)
    };
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out)
            .data()
            .iter()
            .zip(probe_weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = tape.constant(probe_weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(input, STEP, |t| {
            let mut vals = inputs.to_vec();
            vals[k] = t.clone();
            eval(&vals)
        });
        let analytic = grads
            .wrt(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for (a, n) in analytic.iter().zip(&numeric) {
            if a.abs() > 1e-6 || n.abs() > 1e-6 {
                worst = worst.max(relative_error(*a, *n));
            }
        }
    }
    worst
}

/// Direct nested-loop cross-correlation.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                acc += x.at(&[c, y as usize, xx as usize]) * w.at(&[o, c, ky, kx]);
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new([co, oh, ow], out).unwrap()
}
