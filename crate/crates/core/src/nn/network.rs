use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng as _;

use super::{Activation, DenseNetSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};

/// Forward mode. Dropout is active only in `Train`, with masks drawn from
/// the given seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

struct LayerRecord {
    input: Array2<f64>,
    pre: Array2<f64>,
    /// Activation output before dropout.
    activated: Array2<f64>,
    /// Inverted-dropout multipliers (0 or `1/(1-p)`).
    mask: Option<Array2<f64>>,
}

/// Everything the backward pass needs from one forward call.
pub struct Tape {
    generation: u64,
    parameter_count: usize,
    layers: Vec<LayerRecord>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input.nrows())
    }
}

fn weights_view<'a>(params: &'a ParameterSet, layer: usize) -> ArrayView2<'a, f64> {
    let l = params.layout()[layer];
    ArrayView2::from_shape((l.fan_out, l.fan_in), params.weights(layer)).expect("layout")
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Evaluates the network on a batch (`rows = samples`).
pub fn forward(
    spec: &DenseNetSpec,
    params: &ParameterSet,
    input: ArrayView2<'_, f64>,
    mode: Mode,
) -> Result<(Array2<f64>, Tape)> {
    if input.ncols() != spec.input_width() {
        return Err(Error::Shape {
            context: "network input width",
            expected: spec.input_width(),
            got: input.ncols(),
        });
    }
    if params.len() != spec.parameter_count() {
        return Err(Error::Shape {
            context: "parameter count for network spec",
            expected: spec.parameter_count(),
            got: params.len(),
        });
    }
    let mut x = input.to_owned();
    let mut layers = Vec::with_capacity(spec.layers());
    for l in 0..spec.layers() {
        let w = weights_view(params, l);
        let b = ArrayView1::from(params.bias(l));
        let pre = x.dot(&w.t()) + &b;
        let activated = match spec.activation(l) {
            Activation::Identity => pre.clone(),
            Activation::PRelu => {
                let a = params.slope(l).expect("PReLU slope");
                pre.mapv(|v| if v > 0.0 { v } else { a * v })
            }
            Activation::Softmax => softmax_rows(&pre),
            Activation::Exponential => pre.mapv(f64::exp),
        };
        let p = spec.dropout(l);
        let (out, mask) = match mode {
            Mode::Train { seed } if p > 0.0 => {
                let mut rng = rng_from_seed(derive_seed(seed, stream::DROPOUT, l as u64));
                let keep = 1.0 / (1.0 - p);
                let mask = Array2::from_shape_fn(activated.dim(), |_| {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                (&activated * &mask, Some(mask))
            }
            _ => (activated.clone(), None),
        };
        layers.push(LayerRecord {
            input: x,
            pre,
            activated,
            mask,
        });
        x = out;
    }
    Ok((
        x,
        Tape {
            generation: params.generation(),
            parameter_count: params.len(),
            layers,
        },
    ))
}

/// Reverse pass for a scalar loss whose gradient wrt the network output is
/// `grad_output`. Returns the flat parameter gradient and the gradient wrt
/// the network input.
pub fn backward(
    spec: &DenseNetSpec,
    params: &ParameterSet,
    tape: &Tape,
    grad_output: ArrayView2<'_, f64>,
) -> Result<(Vec<f64>, Array2<f64>)> {
    if tape.generation != params.generation() || tape.parameter_count != params.len() {
        return Err(Error::ContractViolation(
            "tape was recorded against a different parameter state".into(),
        ));
    }
    if tape.layers.len() != spec.layers() {
        return Err(Error::ContractViolation("tape does not match network spec".into()));
    }
    let expected = (tape.batch(), spec.output_width());
    if grad_output.dim() != expected {
        return Err(Error::Shape {
            context: "output gradient width",
            expected: expected.1,
            got: grad_output.ncols(),
        });
    }
    let mut grad = vec![0.0; params.len()];
    let mut upstream = grad_output.to_owned();
    for l in (0..spec.layers()).rev() {
        let rec = &tape.layers[l];
        let offsets = params.layout()[l];
        if let Some(mask) = &rec.mask {
            upstream *= mask;
        }
        let dpre = match spec.activation(l) {
            Activation::Identity => upstream,
            Activation::PRelu => {
                let a = params.slope(l).expect("PReLU slope");
                let mut dslope = 0.0;
                let mut d = upstream;
                Zip::from(&mut d).and(&rec.pre).for_each(|g, &z| {
                    if z <= 0.0 {
                        dslope += *g * z;
                        *g *= a;
                    }
                });
                grad[offsets.slope.expect("slope offset")] += dslope;
                d
            }
            Activation::Softmax => {
                let y = &rec.activated;
                let dot: Array1<f64> = (&upstream * y).sum_axis(Axis(1));
                let mut d = upstream;
                Zip::from(d.rows_mut())
                    .and(y.rows())
                    .and(&dot)
                    .for_each(|mut drow, yrow, &s| {
                        Zip::from(&mut drow).and(&yrow).for_each(|g, &yv| *g = yv * (*g - s));
                    });
                d
            }
            Activation::Exponential => upstream * &rec.activated,
        };
        let dw = dpre.t().dot(&rec.input);
        for (g, v) in grad[offsets.weights..offsets.weights + dw.len()]
            .iter_mut()
            .zip(dw.iter())
        {
            *g += v;
        }
        let db = dpre.sum_axis(Axis(0));
        for (g, v) in grad[offsets.bias..offsets.bias + offsets.fan_out]
            .iter_mut()
            .zip(db.iter())
        {
            *g += v;
        }
        upstream = dpre.dot(&weights_view(params, l));
    }
    Ok((grad, upstream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation::*;
    use ndarray::array;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Straight scalar loops over the stored weights.
    fn scalar_forward(spec: &DenseNetSpec, params: &ParameterSet, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in 0..spec.layers() {
            let off = params.layout()[l];
            let w = params.weights(l);
            let b = params.bias(l);
            let mut next = vec![0.0; off.fan_out];
            for o in 0..off.fan_out {
                let mut acc = b[o];
                for i in 0..off.fan_in {
                    acc += w[o * off.fan_in + i] * cur[i];
                }
                next[o] = acc;
            }
            match spec.activation(l) {
                Identity => {}
                PRelu => {
                    let a = params.slope(l).unwrap();
                    for v in &mut next {
                        if *v <= 0.0 {
                            *v *= a;
                        }
                    }
                }
                Softmax => {
                    let m = next.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = next.iter().map(|v| (v - m).exp()).sum();
                    for v in &mut next {
                        *v = (*v - m).exp() / s;
                    }
                }
                Exponential => {
                    for v in &mut next {
                        *v = v.exp();
                    }
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn identity_network_passes_input_through() {
        let spec = DenseNetSpec::new(vec![3, 3], vec![Identity], vec![0.0]).unwrap();
        let mut values = vec![0.0; spec.parameter_count()];
        for i in 0..3 {
            values[i * 3 + i] = 1.0;
        }
        let p = ParameterSet::from_values(&spec, values).unwrap();
        let x = array![[1.0, -2.0, 3.5]];
        let (y, _) = forward(&spec, &p, x.view(), Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let spec = DenseNetSpec::new(
            vec![5, 7, 4, 3],
            vec![PRelu, Exponential, Softmax],
            vec![0.3, 0.3, 0.0],
        )
        .unwrap();
        let p = ParameterSet::init(&spec, 11);
        let x = random_matrix(4, 5, 12);
        let (y, _) = forward(&spec, &p, x.view(), Mode::Eval).unwrap();
        for r in 0..4 {
            let oracle = scalar_forward(&spec, &p, x.row(r).as_slice().unwrap());
            for (a, b) in y.row(r).iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn eval_mode_ignores_seed_and_dropout() {
        let spec = DenseNetSpec::mlp(vec![4, 8, 2], 0.3).unwrap();
        let p = ParameterSet::init(&spec, 1);
        let x = random_matrix(3, 4, 2);
        let (a, _) = forward(&spec, &p, x.view(), Mode::Eval).unwrap();
        let (b, _) = forward(&spec, &p, x.view(), Mode::Eval).unwrap();
        assert_eq!(a, b);
        let (t1, _) = forward(&spec, &p, x.view(), Mode::Train { seed: 1 }).unwrap();
        let (t2, _) = forward(&spec, &p, x.view(), Mode::Train { seed: 1 }).unwrap();
        let (t3, _) = forward(&spec, &p, x.view(), Mode::Train { seed: 2 }).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, t3);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let spec = DenseNetSpec::mlp(vec![4, 2], 0.0).unwrap();
        let p = ParameterSet::init(&spec, 1);
        let x = random_matrix(1, 3, 2);
        assert!(matches!(forward(&spec, &p, x.view(), Mode::Eval), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_squared_loss_closed_form() {
        let spec = DenseNetSpec::new(vec![3, 2], vec![Identity], vec![0.0]).unwrap();
        let p = ParameterSet::init(&spec, 5);
        let x = array![[0.5, -1.0, 2.0]];
        let y = array![[1.0, -1.0]];
        let (out, tape) = forward(&spec, &p, x.view(), Mode::Eval).unwrap();
        let resid = &out - &y;
        let (g, _) = backward(&spec, &p, &tape, (2.0 * &resid).view()).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let expected = 2.0 * resid[[0, o]] * x[[0, i]];
                assert!((g[o * 3 + i] - expected).abs() < 1e-14);
            }
            assert!((g[6 + o] - 2.0 * resid[[0, o]]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradient() {
        let spec = DenseNetSpec::mlp(vec![3, 5, 2], 0.3).unwrap();
        let p = ParameterSet::init(&spec, 5);
        let x = random_matrix(2, 3, 6);
        let (_, tape) = forward(&spec, &p, x.view(), Mode::Train { seed: 9 }).unwrap();
        let (g, dx) = backward(&spec, &p, &tape, Array2::zeros((2, 2)).view()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let spec = DenseNetSpec::mlp(vec![3, 2], 0.0).unwrap();
        let mut p = ParameterSet::init(&spec, 5);
        let x = random_matrix(1, 3, 6);
        let (_, tape) = forward(&spec, &p, x.view(), Mode::Eval).unwrap();
        p.values_mut()[0] += 1.0;
        let r = backward(&spec, &p, &tape, Array2::ones((1, 2)).view());
        assert!(matches!(r, Err(Error::ContractViolation(_))));
    }

    fn loss_of(spec: &DenseNetSpec, p: &ParameterSet, x: &Array2<f64>, c: &Array2<f64>, seed: u64) -> f64 {
        let (y, _) = forward(spec, p, x.view(), Mode::Train { seed }).unwrap();
        (&y * c).sum() + 0.5 * y.mapv(|v| v * v).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_central_differences() {
        for (acts, seed) in [
            (vec![PRelu, PRelu, Identity], 1u64),
            (vec![PRelu, Exponential, Softmax], 2),
            (vec![Identity, PRelu, Exponential], 3),
        ] {
            let spec = DenseNetSpec::new(vec![4, 6, 5, 3], acts, vec![0.3, 0.2, 0.0]).unwrap();
            let p = ParameterSet::init(&spec, seed);
            let x = random_matrix(3, 4, seed + 10);
            let c = random_matrix(3, 3, seed + 20);
            let (y, tape) = forward(&spec, &p, x.view(), Mode::Train { seed: 77 }).unwrap();
            let dy = &c + &y;
            let (g, dx) = backward(&spec, &p, &tape, dy.view()).unwrap();
            let h = 1e-5;
            for i in 0..p.len() {
                let mut plus = p.clone();
                plus.values_mut()[i] += h;
                let mut minus = p.clone();
                minus.values_mut()[i] -= h;
                let fd = (loss_of(&spec, &plus, &x, &c, 77) - loss_of(&spec, &minus, &x, &c, 77)) / (2.0 * h);
                assert!(rel_err(g[i], fd) <= 1e-4, "param {i}: {} vs {fd}", g[i]);
            }
            for r in 0..3 {
                for k in 0..4 {
                    let mut xp = x.clone();
                    xp[[r, k]] += h;
                    let mut xm = x.clone();
                    xm[[r, k]] -= h;
                    let fd = (loss_of(&spec, &p, &xp, &c, 77) - loss_of(&spec, &p, &xm, &c, 77)) / (2.0 * h);
                    assert!(rel_err(dx[[r, k]], fd) <= 1e-4);
                }
            }
        }
    }

    #[test]
    fn dropout_preserves_expectation() {
        let spec = DenseNetSpec::new(vec![6, 4], vec![Identity], vec![0.3]).unwrap();
        let mut p = ParameterSet::init(&spec, 3);
        // Positive outputs keep the relative tolerance meaningful.
        for v in p.values_mut().iter_mut() {
            *v = v.abs() + 0.1;
        }
        let x = Array2::from_elem((1, 6), 1.0);
        let (eval, _) = forward(&spec, &p, x.view(), Mode::Eval).unwrap();
        let n = 100_000;
        // Batch the seeded draws: each row of a tall batch gets its own mask.
        let tall = Array2::from_elem((n, 6), 1.0);
        let (train, _) = forward(&spec, &p, tall.view(), Mode::Train { seed: 4 }).unwrap();
        let mean = train.mean_axis(Axis(0)).unwrap();
        for (m, e) in mean.iter().zip(eval.row(0)) {
            assert!((m - e).abs() / e.abs() < 0.01, "{m} vs {e}");
        }
    }
}
