//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass, so it is an independent
//! oracle for [`Graph::backward`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Worst relative error per checked input.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub relative_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compare analytic and numeric gradients of `sum(f(inputs) * r)` for a fixed
/// random projection `r`.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let project = |inputs: &[Tensor<f64>], track: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| if track { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&mut g, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
        let r = g.constant(Tensor::randn(g.shape(out), &mut rng));
        let prod = g.mul(out, r)?;
        let loss = g.sum(prod);
        Ok((g, vars, loss))
    };

    let (g, vars, loss) = project(inputs, true)?;
    let grads = g.backward(loss)?;
    let mut relative_errors = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, *var);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let mut probe = inputs.to_vec();
                probe[i].data_mut()[j] += delta;
                let (g, _, loss) = project(&probe, false)?;
                Ok(g.value(loss).data()[0])
            };
            *slot = (eval(step)? - eval(-step)?) / (2.0 * step);
        }
        relative_errors.push(relative_error(analytic.data(), &numeric));
    }
    Ok(GradReport { relative_errors })
}

/// Finite-difference check of every differentiable primitive on randomized
/// small shapes. Returns `(primitive, worst relative error)` pairs.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut out = Vec::new();
    let randn = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::<f64>::randn(shape, rng);

    let n = rng.random_range(1..3);
    let c = 4 * rng.random_range(1..3);
    let hw = rng.random_range(3..6);
    let x = randn(&[n, c, hw, hw], &mut rng);
    let y = randn(&[n, c, hw, hw], &mut rng);

    macro_rules! run {
        ($name:expr, $inputs:expr, $f:expr) => {
            out.push(($name, check(&$inputs, h, $f)?.max_error()));
        };
    }

    run!("add", [x.clone(), y.clone()], |g, v| g.add(v[0], v[1]));
    run!("sub", [x.clone(), y.clone()], |g, v| g.sub(v[0], v[1]));
    run!("mul", [x.clone(), y.clone()], |g, v| g.mul(v[0], v[1]));
    run!("scale", [x.clone()], |g, v| Ok(g.scale(v[0], -1.7)));
    run!("add_channel", [x.clone(), randn(&[c], &mut rng)], |g, v| g.add_channel(v[0], v[1]));
    run!(
        "add_batch_channel",
        [x.clone(), randn(&[n, c], &mut rng)],
        |g, v| g.add_batch_channel(v[0], v[1])
    );
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 2, 5), (1, 0, 1)] {
        let w = randn(&[3, c, k, k], &mut rng);
        run!("conv2d", [x.clone(), w], move |g, v| g.conv2d(v[0], v[1], stride, pad));
        let wt = randn(&[c, 3, k.max(2), k.max(2)], &mut rng);
        run!("conv_transpose2d", [x.clone(), wt], move |g, v| g
            .conv_transpose2d(v[0], v[1], stride, pad.min(k.max(2) - 1)));
    }
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { randn(&[2, 4, 3], &mut rng) } else { randn(&[2, 3, 4], &mut rng) };
        let b = if tb { randn(&[2, 5, 4], &mut rng) } else { randn(&[2, 4, 5], &mut rng) };
        run!("matmul", [a, b], move |g, v| g.matmul(v[0], v[1], ta, tb));
    }
    run!(
        "matmul_rank2",
        [randn(&[3, 4], &mut rng), randn(&[4, 2], &mut rng)],
        |g, v| g.matmul(v[0], v[1], false, false)
    );
    run!("leaky_relu", [x.clone()], |g, v| Ok(g.leaky_relu(v[0], 0.2)));
    run!(
        "group_norm",
        [x.clone(), randn(&[c], &mut rng), randn(&[c], &mut rng)],
        |g, v| g.group_norm(v[0], v[1], v[2], 4, 1e-5)
    );
    run!("softmax", [randn(&[2, 3, 5], &mut rng)], |g, v| Ok(g.softmax(v[0])));
    run!("reshape", [x.clone()], |g, v| {
        let numel: usize = g.shape(v[0]).iter().product();
        g.reshape(v[0], &[numel])
    });
    run!(
        "concat_channels",
        [x.clone(), randn(&[n, 2, hw, hw], &mut rng)],
        |g, v| g.concat_channels(v[0], v[1])
    );
    run!("sum", [x.clone()], |g, v| Ok(g.sum(v[0])));
    run!("mean", [x.clone()], |g, v| Ok(g.mean(v[0])));
    run!("square", [x.clone()], |g, v| Ok(g.square(v[0])));
    run!("channel_normalize", [x.clone()], |g, v| g.channel_normalize(v[0], 1e-10));
    let bits_y = Tensor::rand_uniform([n, c, hw, hw], -4.0, 4.0, &mut rng);
    let mean = Tensor::rand_uniform([c], -1.0, 1.0, &mut rng);
    let log_scale = Tensor::rand_uniform([c], -0.5, 1.0, &mut rng);
    run!("gaussian_bits", [bits_y, mean, log_scale], |g, v| g
        .gaussian_bits(v[0], v[1], v[2]));
    Ok(out)
}
