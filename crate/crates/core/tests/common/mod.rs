//! Central finite-difference gradient checks shared by the integration tests.

#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use svddip::autograd::{LinearMap, ParamStore, Tape, Var};
use svddip::ct::{CtOperator, ParallelGeometry, MU_MAX};
use svddip::error::Result;
use svddip::losses::{tv_aniso_var, DataTerm, Objective};
use svddip::tensor::Tensor;

/// Records a function of the input nodes; the output may have any shape.
pub type Recorder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub f: Recorder,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            f: Box::new(f),
        }
    }
}

const STEP: f64 = 1e-5;

/// Scalarizes the output with fixed random weights so every output entry is probed.
fn scalar_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    Ok(tape.sum(prod))
}

fn record(case: &GradCase, inputs: &[Tensor<f64>], seed: u64) -> Result<(Tape<f64>, ParamStore<f64>, Var)> {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs.iter().enumerate().map(|(i, t)| store.add(format!("in{i}"), t.clone(), true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let out = (case.f)(&mut tape, &vars)?;
    let loss = scalar_loss(&mut tape, out, seed)?;
    Ok((tape, store, loss))
}

fn value_at(case: &GradCase, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let (tape, _, loss) = record(case, inputs, seed).expect("forward pass");
    tape.value(loss).item().unwrap()
}

/// Largest relative error between the analytic and the central-difference
/// directional derivative over `probes` random directions.
pub fn max_relative_error(case: &GradCase, probes: usize, seed: u64) -> f64 {
    let (tape, mut store, loss) = record(case, &case.inputs, seed).expect("forward pass");
    tape.backward(loss, &mut store).expect("backward pass");
    let grads: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.grad().clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let dirs: Vec<Tensor<f64>> = case
            .inputs
            .iter()
            .map(|t| Tensor::from_fn(t.shape().to_vec(), |_| StandardNormal.sample(&mut rng)))
            .collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shifted = |sign: f64| -> Vec<Tensor<f64>> {
            case.inputs
                .iter()
                .zip(&dirs)
                .map(|(t, d)| t.zip_map(d, |a, b| a + sign * STEP * b).unwrap())
                .collect()
        };
        let numeric = (value_at(case, &shifted(1.0), seed) - value_at(case, &shifted(-1.0), seed)) / (2.0 * STEP);
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-12 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
        worst = worst.max(err);
    }
    worst
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// Normal entries pushed at least `margin` away from zero, keeping kinks out of reach of the probes.
fn off_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    normal(shape, rng).map(|v| v + margin.copysign(v))
}

/// Image whose neighbouring pixels all differ by at least 0.04.
fn distinct_image(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut levels: Vec<usize> = (0..rows * cols).collect();
    for i in (1..levels.len()).rev() {
        levels.swap(i, rng.random_range(0..=i));
    }
    Tensor::new([rows, cols], levels.iter().map(|&l| l as f64 * 0.05 + rng.random_range(0.0..0.01)).collect()).unwrap()
}

fn small_operator() -> Arc<CtOperator> {
    let geom = ParallelGeometry::uniform(6, 12, 8).unwrap();
    Arc::new(CtOperator::parallel(geom).unwrap().with_pixel_size(0.25).unwrap())
}

/// Every differentiable tape operation, the data losses, TV and the full objective.
pub fn all_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        GradCase::new("add", vec![normal(&[2, 3, 4], r), normal(&[2, 3, 4], r)], |t, v| t.add(v[0], v[1])),
        GradCase::new("sub", vec![normal(&[2, 3, 4], r), normal(&[2, 3, 4], r)], |t, v| t.sub(v[0], v[1])),
        GradCase::new("mul", vec![normal(&[2, 3, 4], r), normal(&[2, 3, 4], r)], |t, v| t.mul(v[0], v[1])),
        GradCase::new("mul_self", vec![normal(&[5, 3], r)], |t, v| t.mul(v[0], v[0])),
        GradCase::new("scale", vec![normal(&[7], r)], |t, v| Ok(t.scale(v[0], -1.7))),
        GradCase::new("add_scalar", vec![normal(&[7], r)], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        GradCase::new("leaky_relu", vec![off_zero(&[3, 4, 4], 0.05, r)], |t, v| Ok(t.leaky_relu(v[0], 0.2))),
        GradCase::new("sigmoid", vec![normal(&[3, 4, 4], r)], |t, v| Ok(t.sigmoid(v[0]))),
        GradCase::new("abs", vec![off_zero(&[3, 4, 4], 0.05, r)], |t, v| Ok(t.abs(v[0]))),
        GradCase::new("exp", vec![normal(&[9], r)], |t, v| Ok(t.exp(v[0]))),
        GradCase::new("sum", vec![normal(&[3, 5], r)], |t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s)
        }),
        GradCase::new("mean", vec![normal(&[3, 5], r)], |t, v| {
            let m = t.mean(v[0]);
            t.mul(m, m)
        }),
        GradCase::new("reshape", vec![normal(&[2, 6], r)], |t, v| t.reshape(v[0], [3, 4])),
        GradCase::new("upsample2x", vec![normal(&[2, 4, 5], r)], |t, v| t.upsample2x(v[0])),
        GradCase::new("group_norm", vec![normal(&[4, 5, 5], r)], |t, v| t.group_norm(v[0], 2, 1e-5)),
        GradCase::new("group_norm_single_group", vec![normal(&[3, 4, 6], r)], |t, v| t.group_norm(v[0], 1, 1e-5)),
        GradCase::new("channel_mul", vec![normal(&[3, 4, 4], r), normal(&[3], r)], |t, v| t.channel_mul(v[0], v[1])),
        GradCase::new("channel_add", vec![normal(&[3, 4, 4], r), normal(&[3], r)], |t, v| t.channel_add(v[0], v[1])),
        GradCase::new("concat_channels", vec![normal(&[2, 3, 3], r), normal(&[1, 3, 3], r)], |t, v| {
            t.concat_channels(&[v[0], v[1]])
        }),
        GradCase::new("diff_rows", vec![normal(&[5, 6], r)], |t, v| t.diff(v[0], 0)),
        GradCase::new("diff_cols", vec![normal(&[5, 6], r)], |t, v| t.diff(v[0], 1)),
    ];
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (5, 2, 2), (3, 1, 0)] {
        cases.push(GradCase::new(
            format!("conv2d_k{k}_s{stride}_p{pad}"),
            vec![normal(&[3, 7, 7], r), normal(&[4, 3, k, k], r), normal(&[4], r)],
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        ));
    }
    cases.push(GradCase::new(
        "conv2d_no_bias",
        vec![normal(&[2, 6, 5], r), normal(&[3, 2, 3, 3], r)],
        |t, v| t.conv2d(v[0], v[1], None, 1, 1),
    ));
    cases.push(GradCase::new(
        "factorized_conv",
        vec![normal(&[3, 6, 6], r), normal(&[4, 3, 3, 3], r), normal(&[4], r), normal(&[5, 4, 1, 1], r), normal(&[5], r)],
        |t, v| {
            let h = t.conv2d(v[0], v[1], None, 1, 1)?;
            let h = t.channel_mul(h, v[2])?;
            t.conv2d(h, v[3], Some(v[4]), 1, 0)
        },
    ));
    let op = small_operator();
    let map: Arc<dyn LinearMap<f64>> = op.clone();
    cases.push(GradCase::new("ct_forward", vec![normal(&[8, 8], r)], {
        let map = map.clone();
        move |t, v| t.linear(v[0], map.clone())
    }));
    let rates = Tensor::from_fn([6, 12], |_| r.random_range(0.0..0.05));
    cases.push(GradCase::new(
        "poisson_nll",
        vec![Tensor::from_fn([6, 12], |_| r.random_range(0.0..0.05))],
        move |t, v| t.poisson_nll(v[0], &rates, 4096.0, MU_MAX),
    ));

    let x_shape = [8, 8];
    let y = normal(&[6, 12], r).scale(0.5);
    let y_counts = Tensor::from_fn([6, 12], |_| r.random_range(0.0..0.02));
    for (name, term, y, gamma) in [
        ("loss_l2", DataTerm::SquaredL2, y.clone(), 0.0),
        ("loss_mean_l2", DataTerm::MeanSquared, y.clone(), 0.0),
        (
            "loss_poisson",
            DataTerm::Poisson {
                photons: 4096.0,
                mu_max: MU_MAX,
            },
            y_counts,
            0.0,
        ),
        ("objective_mean_l2_tv", DataTerm::MeanSquared, y, 0.3),
    ] {
        let obj = Objective::new(term, gamma, map.clone(), y).unwrap();
        let x0 = if gamma > 0.0 {
            distinct_image(x_shape[0], x_shape[1], r)
        } else if matches!(term, DataTerm::Poisson { .. }) {
            Tensor::from_fn(x_shape, |_| r.random_range(0.0..0.01))
        } else {
            normal(&x_shape, r)
        };
        cases.push(GradCase::new(name, vec![x0], move |t, v| Ok(obj.record(t, v[0])?.0)));
    }
    cases.push(GradCase::new("loss_tv", vec![distinct_image(7, 9, r)], |t, v| tv_aniso_var(t, v[0])));
    cases
}
