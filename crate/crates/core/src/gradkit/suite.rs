//! Finite-difference checks of every operator on randomized shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check, BnMode, FdReport, GradError, Graph, Tensor, Var};

/// Step used by the operator checks.
pub const FD_EPS: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

/// Values bounded away from zero, so a relu kink is never within `FD_EPS`.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(shape, rng);
    for v in &mut t.data {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

type Builder = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GradError>;

/// Checks `d/dx sum(c * op(x))` against central differences for all inputs.
pub fn check_op(inputs: &[Tensor<f64>], build: &Builder, seed: u64) -> Result<FdReport, GradError> {
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let shape = g.value(out).shape.clone();
        random(&shape, &mut ChaCha8Rng::seed_from_u64(seed))
    };
    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let unflatten = |x: &[f64]| -> Vec<Tensor<f64>> {
        let mut offset = 0;
        inputs
            .iter()
            .zip(&sizes)
            .map(|(t, &n)| {
                let part = Tensor { shape: t.shape.clone(), data: x[offset..offset + n].to_vec() };
                offset += n;
                part
            })
            .collect()
    };
    let eval = |x: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>), GradError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = unflatten(x).into_iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars)?;
        let loss = g.dot(out, &probe)?;
        let value = g.value(loss).data[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let mut flat = Vec::with_capacity(x.len());
        for (v, &n) in vars.iter().zip(&sizes) {
            match grads.get(*v) {
                Some(gr) => flat.extend_from_slice(gr),
                None => flat.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        Ok((value, flat))
    };
    let x0: Vec<f64> = inputs.iter().flat_map(|t| t.data.iter().copied()).collect();
    let (_, analytic) = eval(&x0, true)?;
    Ok(finite_diff_check(|x| eval(x, false).map(|r| r.0).unwrap_or(f64::NAN), &x0, &analytic, FD_EPS, None))
}

/// Runs every operator check, returning `(name, report)` pairs.
pub fn operator_suite(seed: u64) -> Result<Vec<(String, FdReport)>, GradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: String, inputs: Vec<Tensor<f64>>, build: &Builder, rng: &mut ChaCha8Rng| -> Result<(), GradError> {
        out.push((name, check_op(&inputs, build, rng.random())?));
        Ok(())
    };
    for &(n, c, co, h, w, stride) in &[(2, 3, 4, 8, 8, 1), (2, 3, 2, 7, 5, 2), (1, 2, 3, 5, 6, 2), (3, 1, 2, 4, 3, 1)] {
        let inputs = vec![random(&[n, c, h, w], &mut rng), random(&[co, c, 3, 3], &mut rng)];
        run(format!("conv2d {n}x{c}x{h}x{w} -> {co}, stride {stride}"), inputs, &move |g, v| g.conv2d(v[0], v[1], stride), &mut rng)?;
    }
    for &(n, c, co, h, w) in &[(2, 3, 2, 3, 3), (1, 2, 3, 4, 5), (2, 1, 1, 1, 1)] {
        let inputs = vec![random(&[n, c, h, w], &mut rng), random(&[c, co, 4, 4], &mut rng)];
        run(format!("conv_transpose2d {n}x{c}x{h}x{w} -> {co}"), inputs, &|g, v| g.conv_transpose2d(v[0], v[1]), &mut rng)?;
    }
    for &(n, c, h, w) in &[(2, 3, 4, 4), (4, 2, 3, 5), (2, 2, 1, 1)] {
        let mut gamma = random(&[c], &mut rng);
        gamma.data.iter_mut().for_each(|v| *v += 1.5);
        let inputs = vec![random(&[n, c, h, w], &mut rng), gamma, random(&[c], &mut rng)];
        run(
            format!("batch_norm train {n}x{c}x{h}x{w}"),
            inputs.clone(),
            &|g, v| g.batch_norm(v[0], v[1], v[2], BnMode::Train, None).map(|r| r.0),
            &mut rng,
        )?;
        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        run(
            format!("batch_norm eval {n}x{c}x{h}x{w}"),
            inputs,
            &move |g, v| g.batch_norm(v[0], v[1], v[2], BnMode::Eval, Some((&mean, &var))).map(|r| r.0),
            &mut rng,
        )?;
    }
    run("relu".into(), vec![away_from_zero(&[2, 3, 5, 5], &mut rng)], &|g, v| Ok(g.relu(v[0])), &mut rng)?;
    run("avg_pool2".into(), vec![random(&[2, 3, 6, 4], &mut rng)], &|g, v| g.avg_pool2(v[0]), &mut rng)?;
    run(
        "concat".into(),
        vec![random(&[2, 2, 3, 3], &mut rng), random(&[2, 3, 3, 3], &mut rng), random(&[2, 1, 3, 3], &mut rng)],
        &|g, v| g.concat(v),
        &mut rng,
    )?;
    run(
        "add_bias".into(),
        vec![random(&[2, 3, 4, 5], &mut rng), random(&[3], &mut rng)],
        &|g, v| g.add_bias(v[0], v[1]),
        &mut rng,
    )?;
    run(
        "add + scale".into(),
        vec![random(&[2, 3, 4, 4], &mut rng), random(&[2, 3, 4, 4], &mut rng)],
        &|g, v| {
            let s = g.scale(v[1], -2.5);
            g.add(v[0], s)
        },
        &mut rng,
    )?;
    // Targets far from predictions keep every residual away from the kink.
    let target = Tensor { shape: vec![2, 1, 4, 4], data: (0..32).map(|i| if i % 2 == 0 { 5.0 } else { -5.0 }).collect() };
    run(
        "l1_loss".into(),
        vec![random(&[2, 1, 4, 4], &mut rng)],
        &move |g, v| g.l1_loss(v[0], &target, 3.0),
        &mut rng,
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_passes() {
        for (name, r) in operator_suite(1).unwrap() {
            assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // Perturbing the analytic gradient must surface as a large error.
        let x = [0.5, -1.5];
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let r = finite_diff_check(f, &x, &[1.0, 3.3], FD_EPS, None);
        assert!(r.max_rel_error > 0.05 && r.worst == 1);
    }
}
