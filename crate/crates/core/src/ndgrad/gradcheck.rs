//! Central finite-difference checks of tape gradients, in `f64`.
//!
//! The error reported per tensor is `|a - n| / max(|a|, |n|)` over the whole
//! gradient, with `a` analytic and `n` numeric. When both norms are below
//! `1e-10` the absolute difference is reported instead.

use super::params::{ParamStore, Session};
use super::tape::Unary;
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Check `f` with respect to every input tensor. Returns one error per input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Check a scalar loss built over a parameter store, for every parameter.
/// Returns `(name, error)` pairs in store order.
pub fn check_params<F>(store: &ParamStore<f64>, train: bool, h: f64, f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut sess = Session::inference(s, train);
        let out = f(&mut sess)?;
        Ok(sess.value(out).item())
    };
    let analytic = {
        let mut sess = Session::new(store, train);
        let out = f(&mut sess)?;
        sess.backward(out)?.grads
    };
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let a = analytic[id.0]
            .as_ref()
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        out.push((store.name(id).to_string(), relative_error(&a, &numeric)));
    }
    Ok(out)
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Conv1dSpec, NormStats, Padding};

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Contract the output with fixed random weights so every output element
/// contributes a distinct amount to the scalar.
fn contract(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = t.constant(Tensor::randn(t.shape(y).to_vec(), &mut rng));
    let p = t.mul(y, r)?;
    t.sum(p)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Build one randomized check case per differentiable op for `seed`.
fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (b, c, l, n) = (dim(1, 3), dim(1, 3), dim(4, 7), dim(2, 4));
    let (cout, k, d) = (dim(1, 3), 2 * dim(0, 2) + 1, dim(1, 2));
    let (m, kk, nn_) = (dim(1, 4), dim(1, 4), dim(1, 4));
    let axis3 = dim(0, 2);
    let factor = dim(1, 3);
    let stride = dim(1, 3);
    let s = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut randn = |shape: Vec<usize>| Tensor::<f64>::randn(shape, &mut rng);
    let x3 = randn(vec![b, c, l]);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = Vec::new();

    cases.push((
        "conv1d_same",
        vec![x3.clone(), randn(vec![cout, c, k]), randn(vec![cout])],
        Box::new(move |t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), Conv1dSpec::same(d))?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "conv1d_strided",
        vec![x3.clone(), randn(vec![cout, c, 3]), randn(vec![cout])],
        Box::new(move |t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), Conv1dSpec::strided(2, 1))?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "conv1d_causal",
        vec![x3.clone(), randn(vec![cout, c, 2])],
        Box::new(move |t, v| {
            let spec = Conv1dSpec {
                stride: 1,
                dilation: d,
                padding: Padding::Causal,
            };
            let y = t.conv1d(v[0], v[1], None, spec)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "linear",
        vec![randn(vec![n, c]), randn(vec![cout, c]), randn(vec![cout])],
        Box::new(move |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            contract(t, y, s)
        }),
    ));
    for (name, ta, tb) in [
        ("matmul", false, false),
        ("matmul_ta", true, false),
        ("matmul_tb", false, true),
        ("matmul_tab", true, true),
    ] {
        let sa = if ta { vec![b, kk, m] } else { vec![b, m, kk] };
        let sb = if tb { vec![b, nn_, kk] } else { vec![b, kk, nn_] };
        cases.push((
            name,
            vec![randn(sa), randn(sb)],
            Box::new(move |t, v| {
                let y = t.bmm(v[0], v[1], ta, tb)?;
                contract(t, y, s)
            }),
        ));
    }
    cases.push((
        "softmax",
        vec![x3.clone()],
        Box::new(move |t, v| {
            let y = t.softmax(v[0], axis3)?;
            contract(t, y, s)
        }),
    ));
    for (name, f) in [
        ("silu", Unary::Silu),
        ("sigmoid", Unary::Sigmoid),
        ("tanh", Unary::Tanh),
        ("exp", Unary::Exp),
        ("affine", Unary::Affine(-1.7, 0.3)),
    ] {
        cases.push((
            name,
            vec![x3.clone()],
            Box::new(move |t, v| {
                let y = t.unary(v[0], f);
                contract(t, y, s)
            }),
        ));
    }
    let mut krng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    cases.push((
        "relu",
        vec![away_from_zero(vec![b, c, l], &mut krng)],
        Box::new(move |t, v| {
            let y = t.relu(v[0]);
            contract(t, y, s)
        }),
    ));
    cases.push((
        "batchnorm1d_train",
        vec![randn(vec![b + 1, c, l]), randn(vec![c]), randn(vec![c])],
        Box::new(move |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?;
            contract(t, y, s)
        }),
    ));
    let rm: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
    let rv: Vec<f64> = (0..c).map(|i| 0.5 + 0.25 * i as f64).collect();
    cases.push((
        "batchnorm1d_eval",
        vec![randn(vec![n, c]), randn(vec![c]), randn(vec![c])],
        Box::new(move |t, v| {
            let stats = NormStats::Running { mean: &rm, var: &rv };
            let (y, _) = t.batch_norm(v[0], v[1], v[2], stats, 1e-5)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "layernorm",
        vec![x3.clone(), randn(vec![l]), randn(vec![l])],
        Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "upsample_nearest",
        vec![x3.clone()],
        Box::new(move |t, v| {
            let y = t.upsample_nearest(v[0], factor)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "downsample_stride",
        vec![x3.clone()],
        Box::new(move |t, v| {
            let y = t.downsample_stride(v[0], stride)?;
            contract(t, y, s)
        }),
    ));
    let y3 = randn(vec![b, c, l]);
    cases.push((
        "add",
        vec![x3.clone(), y3.clone()],
        Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "sub",
        vec![x3.clone(), y3.clone()],
        Box::new(move |t, v| {
            let y = t.sub(v[0], v[1])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "mul",
        vec![x3.clone(), y3.clone()],
        Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "add_bcast",
        vec![x3.clone(), randn(vec![b, c])],
        Box::new(move |t, v| {
            let y = t.add_bcast(v[0], v[1])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "mul_scalar",
        vec![x3.clone(), randn(vec![1])],
        Box::new(move |t, v| {
            let y = t.mul_scalar(v[0], v[1])?;
            contract(t, y, s)
        }),
    ));
    cases.push(("sum", vec![x3.clone()], Box::new(|t, v| t.sum(v[0]))));
    cases.push(("mean", vec![x3.clone()], Box::new(|t, v| t.mean(v[0]))));
    cases.push((
        "mean_axis",
        vec![x3.clone()],
        Box::new(move |t, v| {
            let y = t.mean_axis(v[0], axis3)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "mse_loss",
        vec![x3.clone(), y3.clone()],
        Box::new(|t, v| t.mse_loss(v[0], v[1])),
    ));
    let gap = away_from_zero(vec![b, c, l], &mut krng);
    let shifted = Tensor::new(
        vec![b, c, l],
        x3.data().iter().zip(gap.data()).map(|(a, g)| a + g).collect(),
    )
    .expect("same shape");
    cases.push((
        "l1_loss",
        vec![x3.clone(), shifted],
        Box::new(|t, v| t.l1_loss(v[0], v[1])),
    ));
    let probs = Tensor::from_fn(vec![n, 1], |_| krng.random_range(0.05..0.95));
    let labels = Tensor::from_fn(vec![n, 1], |i| (i % 2) as f64);
    cases.push((
        "bce_loss",
        vec![probs],
        Box::new(move |t, v| {
            let y = t.constant(labels.clone());
            t.bce_loss(v[0], y)
        }),
    ));
    let targets: Vec<usize> = (0..n).map(|i| i % c.max(2)).collect();
    cases.push((
        "cross_entropy",
        vec![randn(vec![n, c.max(2)])],
        Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
    ));
    cases.push((
        "l2_normalize",
        vec![x3.clone()],
        Box::new(move |t, v| {
            let y = t.l2_normalize(v[0])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "transpose",
        vec![x3.clone()],
        Box::new(move |t, v| {
            let y = t.transpose(v[0], 1, 2)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "permute",
        vec![x3.clone()],
        Box::new(move |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "reshape",
        vec![x3.clone()],
        Box::new(move |t, v| {
            let y = t.reshape(v[0], &[b * c, l])?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "concat",
        vec![x3.clone(), randn(vec![b, c, l + 1])],
        Box::new(move |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]], 2)?;
            contract(t, y, s)
        }),
    ));
    cases.push((
        "slice",
        vec![x3],
        Box::new(move |t, v| {
            let y = t.slice(v[0], 2, 1, l - 1)?;
            contract(t, y, s)
        }),
    ));
    cases
}

/// Finite-difference check of every differentiable op at shapes drawn from
/// `seed`. Returns `(op, worst error over its inputs)`.
pub fn check_all_ops(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    op_cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| {
            let errs = check_inputs(&inputs, DEFAULT_STEP, |t, v| f(t, v))?;
            Ok((name, errs.into_iter().fold(0.0, f64::max)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..3 {
            for (name, err) in check_all_ops(seed).unwrap() {
                assert!(err < 1e-4, "{name} seed {seed}: {err:e}");
            }
        }
    }
}
