//! Reverse-mode gradients against central finite differences (f64, h = 1e-4).

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use wm_kernel::{Result, Tape, Tensor, Var};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Builds `sum(weights * f(inputs))` on a fresh tape.
fn probe_loss<F>(inputs: &[Tensor<f64>], weights: &Tensor<f64>, f: &F) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let w = tape.constant(weights.clone());
    let weighted = tape.mul(out, w)?;
    let loss = tape.sum(weighted);
    Ok((tape, vars, loss))
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = StdRng::seed_from_u64(name.bytes().map(u64::from).sum());
    for point in 0..5 {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let out_shape = {
            let mut t = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
            let out = f(&mut t, &v).unwrap();
            t.shape(out).to_vec()
        };
        let weights = random(&mut rng, &out_shape);
        let (tape, vars, loss) = probe_loss(&inputs, &weights, &f).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(*var);
            let mut numeric = vec![0.0; inputs[i].numel()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let eval = |delta: f64| {
                    let mut shifted = inputs.clone();
                    shifted[i].data_mut()[j] += delta;
                    let (t, _, l) = probe_loss(&shifted, &weights, &f).unwrap();
                    t.value(l).item()
                };
                *slot = (eval(H) - eval(-H)) / (2.0 * H);
            }
            let err = relative_error(analytic.data(), &numeric);
            assert!(err < TOL, "{name}: input {i} point {point} relative error {err:.3e}");
        }
    }
}

#[test]
fn matmul() {
    check("matmul", &[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn add_and_broadcast() {
    check("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
    check("add_bcast", &[&[2, 3, 4], &[4]], |t, v| t.add(v[0], v[1]));
}

#[test]
fn mul_and_broadcast() {
    check("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
    check("mul_bcast", &[&[2, 3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
    check("mul_self", &[&[5]], |t, v| t.mul(v[0], v[0]));
}

#[test]
fn pointwise() {
    check("tanh", &[&[3, 5]], |t, v| Ok(t.tanh(v[0])));
    check("gelu", &[&[3, 5]], |t, v| Ok(t.gelu(v[0])));
    check("affine", &[&[4]], |t, v| Ok(t.affine(v[0], -1.5, 0.25)));
}

#[test]
fn softmax_axes() {
    check("softmax_last", &[&[3, 5]], |t, v| t.softmax(v[0], 1));
    check("softmax_mid", &[&[2, 4, 3]], |t, v| t.softmax(v[0], 1));
}

#[test]
fn layer_norm_axes() {
    check("ln_last", &[&[3, 6]], |t, v| t.layer_norm(v[0], 1));
    check("ln_first", &[&[4, 3]], |t, v| t.layer_norm(v[0], 0));
}

#[test]
fn mse_both_sides() {
    check("mse", &[&[3, 4], &[3, 4]], |t, v| t.mse(v[0], v[1]));
    check("masked_mse", &[&[4, 3], &[4, 3]], |t, v| {
        t.masked_mse(v[0], v[1], &[true, false, true, true])
    });
}

#[test]
fn concat_and_slice() {
    check("concat", &[&[2, 3, 2], &[2, 1, 2]], |t, v| t.concat(&[v[0], v[1]], 1));
    check("slice", &[&[2, 5, 3]], |t, v| t.slice(v[0], 1, 1, 4));
    check("slice_cols", &[&[4, 6]], |t, v| t.slice(v[0], 1, 2, 5));
}

#[test]
fn scale_shift() {
    check("scale_shift", &[&[3, 4], &[3, 4], &[3, 4]], |t, v| {
        t.scale_shift(v[0], v[1], v[2])
    });
    check("scale_shift_bcast", &[&[2, 3, 4], &[4], &[3, 4]], |t, v| {
        t.scale_shift(v[0], v[1], v[2])
    });
}

#[test]
fn reductions_and_masks() {
    check("mean", &[&[3, 4]], |t, v| Ok(t.mean(v[0])));
    check("mask_rows", &[&[3, 2]], |t, v| {
        t.mask_rows(v[0], &[true, false, true], &[0.5, -1.0])
    });
    check("reshape", &[&[3, 4]], |t, v| t.reshape(v[0], &[2, 6]));
}

#[test]
fn attention_with_causal_bias() {
    let (heads, seq) = (2, 4);
    let bias = Tensor::from_fn([heads, seq, seq], |idx| {
        let (h, i, j) = (idx / (seq * seq), (idx / seq) % seq, idx % seq);
        if j > i {
            f64::NEG_INFINITY
        } else {
            -0.5 * (h + 1) as f64 * (i - j) as f64
        }
    });
    check("attention", &[&[2, seq, 6], &[2, seq, 6], &[2, seq, 6]], move |t, v| {
        t.attention(v[0], v[1], v[2], &bias, heads)
    });
}

#[test]
fn sum_gives_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_fn([2, 3], |i| i as f64));
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0; 6]);
}

#[test]
fn mse_at_minimum_has_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_fn([4], |i| i as f64 - 1.5));
    let loss = tape.mse(x, x).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn tanh_at_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros([1]));
    let y = tape.tanh(x);
    assert_eq!(tape.value(y).item(), 0.0);
    let loss = tape.sum(y);
    assert_eq!(tape.backward(loss).unwrap().wrt(x).item(), 1.0);
}

#[test]
fn composite_state_tanh_mse_chain() {
    // states -> linear -> tanh -> mse against a fixed target
    check("ws_chain", &[&[5, 4], &[4, 4], &[5, 4]], |t, v| {
        let z = t.matmul(v[0], v[1])?;
        let y = t.tanh(z);
        let m = t.mse(y, v[2])?;
        t.reshape(m, &[1])
    });
}

#[test]
fn unreached_leaf_gets_zero_gradient_and_non_scalar_loss_fails() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::ones([3]));
    let unused = tape.param(Tensor::ones([2, 2]));
    let loss = tape.sum(a);
    let g = tape.backward(loss).unwrap();
    assert!(!g.reached(unused));
    assert_eq!(g.wrt(unused), Tensor::zeros([2, 2]));
    assert!(matches!(
        tape.backward(a),
        Err(wm_kernel::KernelError::NonScalarLoss(_))
    ));
}

#[test]
fn backward_is_deterministic() {
    let mut rng = StdRng::seed_from_u64(9);
    let x = random(&mut rng, &[3, 8]);
    let w = random(&mut rng, &[8, 8]);
    let run = || {
        let mut t = Tape::<f64>::new();
        let xv = t.param(x.clone());
        let wv = t.param(w.clone());
        let z = t.matmul(xv, wv).unwrap();
        let n = t.layer_norm(z, 1).unwrap();
        let s = t.softmax(n, 1).unwrap();
        let l = t.mean(s);
        let l2 = t.gelu(l);
        let g = t.backward(l2).unwrap();
        (g.wrt(xv), g.wrt(wv))
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data(), a2.data());
    assert_eq!(b1.data(), b2.data());
}

#[test]
fn constants_are_not_recorded() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::ones([2]));
    let b = tape.tanh(a);
    assert!(!tape.requires_grad(b));
}
