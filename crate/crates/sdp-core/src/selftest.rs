//! Gradient and invariant checks, runnable from the CLI (`sdp selftest`) and
//! reused by the test suites.
//!
//! The gradient oracle is central finite differences: it re-evaluates the
//! recorded forward computation at perturbed inputs and never touches the
//! backward rules it is checking.

use crate::numerics::{Graph, Rng, Tensor, Var};

pub struct Check {
    pub name: String,
    pub error: Option<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error.is_none()
    }

    fn of(name: impl Into<String>, result: Result<(), String>) -> Self {
        Check {
            name: name.into(),
            error: result.err(),
        }
    }
}

const FD_STEP: f64 = 1e-4;
// Below this magnitude the central-difference quotient is dominated by f64
// rounding of the two forward evaluations, so near-zero pairs compare absolutely.
const FD_ATOL: f64 = 1e-9;

/// Compare analytic gradients of `build` against central finite differences.
///
/// `build` must be a pure function of the leaf values: it is re-run many times
/// with perturbed inputs. Inputs flagged `requires_grad` are checked on up to
/// `max_coords` coordinates each (all of them when small).
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>,
    tol: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<(), String> {
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64, String> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars).map_err(|e| e.to_string())?;
        if !g.value(loss).is_scalar() {
            return Err("gradcheck build must return a scalar".into());
        }
        Ok(g.value(loss).item())
    };

    // Analytic gradients once.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars).map_err(|e| e.to_string())?;
    let grads = g.backward(loss).map_err(|e| e.to_string())?;

    for (ti, tensor) in inputs.iter().enumerate() {
        if !tensor.needs_grad() {
            continue;
        }
        let analytic = grads
            .get(vars[ti])
            .ok_or_else(|| format!("input {ti}: no gradient reached a requires_grad leaf"))?;
        let n = tensor.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.below(n)).collect()
        };
        for &c in &coords {
            let x = tensor.data()[c];
            let mut plus = inputs.to_vec();
            plus[ti] = tensor.with_value(c, x + FD_STEP);
            let mut minus = inputs.to_vec();
            minus[ti] = tensor.with_value(c, x - FD_STEP);
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let a = analytic.data()[c];
            let err = (a - fd).abs();
            let bound = FD_ATOL + tol * a.abs().max(fd.abs());
            if !err.is_finite() || err > bound {
                let rel = err / a.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
                return Err(format!(
                    "input {ti} coord {c}: analytic {a:.9e} vs fd {fd:.9e} (rel err {rel:.3e} > {tol:.1e})"
                ));
            }
        }
    }
    Ok(())
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal()).requires_grad(true)
}

fn rand_positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| 0.5 + 1.5 * rng.uniform()).requires_grad(true)
}

fn rand_shape(rng: &mut Rng, max_rank: usize) -> Vec<usize> {
    let rank = 1 + rng.below(max_rank);
    (0..rank).map(|_| 1 + rng.below(4)).collect()
}

/// Reduce an op output to a scalar against a fixed random projection so the
/// upstream gradient is not uniform.
fn project(g: &mut Graph<f64>, out: Var, rng: &mut Rng) -> crate::Result<Var> {
    let shape = g.shape(out).to_vec();
    let proj = g.constant(Tensor::from_fn(&shape, |_| rng.normal()));
    let prod = g.mul(out, proj)?;
    Ok(g.sum_all(prod))
}

/// Per-op finite-difference checks over randomized shapes up to rank 4,
/// 20 random points per op.
pub fn op_gradient_checks(seed: u64) -> Vec<Check> {
    const ELEMENTWISE_TOL: f64 = 1e-6;
    const POINTS: usize = 20;
    let mut rng = Rng::stream(seed, "gradcheck");
    let mut failures: Vec<(String, String)> = Vec::new();
    let mut names: Vec<&'static str> = Vec::new();

    macro_rules! check_op {
        ($name:literal, $tol:expr, $inputs:expr, $build:expr) => {{
            names.push($name);
            for point in 0..POINTS {
                let inputs = $inputs(&mut rng);
                let prng = rng.substream(point as u64);
                #[allow(clippy::redundant_closure_call)]
                let result = gradcheck(
                    &inputs,
                    |g: &mut Graph<f64>, v: &[Var]| {
                        let out = ($build)(g, v)?;
                        project(g, out, &mut prng.clone())
                    },
                    $tol,
                    16,
                    &mut rng,
                );
                if let Err(e) = result {
                    failures.push((format!("grad/{}", $name), format!("point {point}: {e}")));
                    break;
                }
            }
        }};
    }

    check_op!("silu", ELEMENTWISE_TOL, |r: &mut Rng| vec![randn(
        &rand_shape(r, 4),
        r
    )], |g: &mut Graph<f64>, v: &[Var]| Ok(g.silu(v[0])));
    check_op!("ln", ELEMENTWISE_TOL, |r: &mut Rng| vec![rand_positive(
        &rand_shape(r, 4),
        r
    )], |g: &mut Graph<f64>, v: &[Var]| g.ln(v[0]));
    check_op!("softmax", ELEMENTWISE_TOL, |r: &mut Rng| vec![randn(
        &rand_shape(r, 4),
        r
    )], |g: &mut Graph<f64>, v: &[Var]| g.softmax(v[0]));
    check_op!("scale", ELEMENTWISE_TOL, |r: &mut Rng| vec![randn(
        &rand_shape(r, 4),
        r
    )], |g: &mut Graph<f64>, v: &[Var]| Ok(g.scale(v[0], -1.7)));
    check_op!("add_scalar", ELEMENTWISE_TOL, |r: &mut Rng| vec![randn(
        &rand_shape(r, 4),
        r
    )], |g: &mut Graph<f64>, v: &[Var]| Ok(g.add_scalar(v[0], 0.3)));
    check_op!("mean_all", ELEMENTWISE_TOL, |r: &mut Rng| vec![randn(
        &rand_shape(r, 4),
        r
    )], |g: &mut Graph<f64>, v: &[Var]| Ok(g.mean_all(v[0])));
    check_op!("l2norm_rows", ELEMENTWISE_TOL, |r: &mut Rng| vec![randn(
        &rand_shape(r, 4),
        r
    )], |g: &mut Graph<f64>, v: &[Var]| g.l2norm_rows(v[0]));

    check_op!(
        "add",
        ELEMENTWISE_TOL,
        |r: &mut Rng| {
            let s = rand_shape(r, 4);
            vec![randn(&s, r), randn(&s, r)]
        },
        |g: &mut Graph<f64>, v: &[Var]| g.add(v[0], v[1])
    );
    check_op!(
        "sub",
        ELEMENTWISE_TOL,
        |r: &mut Rng| {
            let s = rand_shape(r, 4);
            vec![randn(&s, r), randn(&s, r)]
        },
        |g: &mut Graph<f64>, v: &[Var]| g.sub(v[0], v[1])
    );
    check_op!(
        "mul",
        ELEMENTWISE_TOL,
        |r: &mut Rng| {
            let s = rand_shape(r, 4);
            vec![randn(&s, r), randn(&s, r)]
        },
        |g: &mut Graph<f64>, v: &[Var]| g.mul(v[0], v[1])
    );

    check_op!(
        "matmul",
        ELEMENTWISE_TOL,
        |r: &mut Rng| {
            let (m, k, n) = (1 + r.below(5), 1 + r.below(5), 1 + r.below(5));
            vec![randn(&[m, k], r), randn(&[k, n], r)]
        },
        |g: &mut Graph<f64>, v: &[Var]| g.matmul(v[0], v[1])
    );
    check_op!(
        "matmul_nt",
        ELEMENTWISE_TOL,
        |r: &mut Rng| {
            let (m, k, n) = (1 + r.below(5), 1 + r.below(5), 1 + r.below(5));
            vec![randn(&[m, k], r), randn(&[n, k], r)]
        },
        |g: &mut Graph<f64>, v: &[Var]| g.matmul_nt(v[0], v[1])
    );
    check_op!(
        "bmm",
        ELEMENTWISE_TOL,
        |r: &mut Rng| {
            let (b, m, k, n) = (1 + r.below(3), 1 + r.below(4), 1 + r.below(4), 1 + r.below(4));
            vec![randn(&[b, m, k], r), randn(&[b, k, n], r)]
        },
        |g: &mut Graph<f64>, v: &[Var]| g.bmm(v[0], v[1])
    );

    check_op!(
        "add_bcast",
        ELEMENTWISE_TOL,
        |r: &mut Rng| {
            let (b, t, c) = (1 + r.below(3), 1 + r.below(4), 1 + r.below(5));
            vec![randn(&[b, t, c], r), randn(&[t, c], r)]
        },
        |g: &mut Graph<f64>, v: &[Var]| g.add_bcast(v[0], v[1])
    );
    check_op!(
        "add_mid_bcast",
        ELEMENTWISE_TOL,
        |r: &mut Rng| {
            let (b, t, c) = (1 + r.below(3), 1 + r.below(4), 1 + r.below(5));
            vec![randn(&[b, t, c], r), randn(&[b, c], r)]
        },
        |g: &mut Graph<f64>, v: &[Var]| g.add_mid_bcast(v[0], v[1])
    );
    check_op!(
        "mul_mid_bcast",
        ELEMENTWISE_TOL,
        |r: &mut Rng| {
            let (b, t, c) = (1 + r.below(3), 1 + r.below(4), 1 + r.below(5));
            vec![randn(&[b, t, c], r), randn(&[b, c], r)]
        },
        |g: &mut Graph<f64>, v: &[Var]| g.mul_mid_bcast(v[0], v[1])
    );

    check_op!(
        "mean_axis",
        ELEMENTWISE_TOL,
        |r: &mut Rng| vec![randn(&[2, 3, 1 + r.below(5)], r)],
        |g: &mut Graph<f64>, v: &[Var]| {
            let axis = g.shape(v[0])[2] % 3;
            g.mean_axis(v[0], axis)
        }
    );

    check_op!(
        "rmsnorm",
        1e-5,
        |r: &mut Rng| {
            let c = 1 + r.below(6);
            vec![randn(&[2, 2, c], r), randn(&[c], r)]
        },
        |g: &mut Graph<f64>, v: &[Var]| g.rmsnorm(v[0], v[1])
    );
    check_op!(
        "layernorm",
        1e-5,
        |r: &mut Rng| {
            let c = 2 + r.below(5);
            vec![randn(&[2, 2, c], r), randn(&[c], r), randn(&[c], r)]
        },
        |g: &mut Graph<f64>, v: &[Var]| g.layernorm(v[0], Some(v[1]), Some(v[2]))
    );

    check_op!(
        "sdpa",
        1e-5,
        |r: &mut Rng| {
            let (tq, tk, heads) = (1 + r.below(4), 1 + r.below(4), 1 + r.below(2));
            let width = heads * 4;
            vec![
                randn(&[2, tq, width], r),
                randn(&[2, tk, width], r),
                randn(&[2, tk, width], r),
            ]
        },
        |g: &mut Graph<f64>, v: &[Var]| {
            let heads = g.shape(v[0])[2] / 4;
            g.sdpa(v[0], v[1], v[2], heads)
        }
    );

    check_op!(
        "concat_slice_reshape",
        ELEMENTWISE_TOL,
        |r: &mut Rng| vec![randn(&[2, 5], r), randn(&[3, 5], r)],
        |g: &mut Graph<f64>, v: &[Var]| {
            let cat = g.concat(&[v[0], v[1]], 0)?;
            let sl = g.slice(cat, 0, 1, 4)?;
            g.reshape(sl, vec![15])
        }
    );

    check_op!(
        "gather_rows",
        ELEMENTWISE_TOL,
        |r: &mut Rng| vec![randn(&[5, 3], r)],
        |g: &mut Graph<f64>, v: &[Var]| g.gather_rows(v[0], &[0, 2, 2, 4])
    );

    check_op!(
        "weighted_sq_error",
        ELEMENTWISE_TOL,
        |r: &mut Rng| vec![randn(&[3, 2, 2], r), randn(&[3, 2, 2], r)],
        |g: &mut Graph<f64>, v: &[Var]| g.weighted_sq_error(v[0], v[1], &[0.5, 1.25, 2.0])
    );

    let mut checks: Vec<Check> = Vec::new();
    for name in names {
        let full = format!("grad/{name}");
        match failures.iter().find(|(n, _)| *n == full) {
            Some((_, e)) => checks.push(Check::of(full, Err(e.clone()))),
            None => checks.push(Check::of(full, Ok(()))),
        }
    }
    checks
}

/// Non-gradient numeric invariants.
pub fn numeric_invariant_checks(seed: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = Rng::stream(seed, "invariants");

    // Softmax rows sum to one.
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let shape = rand_shape(&mut rng, 4);
        let x = Tensor::from_fn(&shape, |_| 4.0 * rng.normal());
        let mut g = Graph::<f64>::new();
        let v = g.constant(x);
        let s = g.softmax(v).unwrap();
        let cols = *g.shape(s).last().unwrap();
        for row in g.value(s).data().chunks(cols) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    checks.push(Check::of(
        "invariant/softmax_rows_sum_to_one",
        if worst < 1e-12 {
            Ok(())
        } else {
            Err(format!("worst deviation {worst:.3e}"))
        },
    ));

    // Same seed, same op sequence => bit-identical outputs.
    let run_once = |seed: u64| -> Vec<f64> {
        let mut r = Rng::stream(seed, "determinism");
        let a = Tensor::from_fn(&[16, 16], |_| r.normal());
        let b = Tensor::from_fn(&[16, 16], |_| r.normal());
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let mm = g.matmul(va, vb).unwrap();
        let sm = g.softmax(mm).unwrap();
        let si = g.silu(sm);
        g.value(si).data().to_vec()
    };
    let deterministic = run_once(42) == run_once(42);
    checks.push(Check::of(
        "invariant/determinism_same_seed",
        if deterministic {
            Ok(())
        } else {
            Err("two identical runs differed".into())
        },
    ));

    checks
}

/// Numeric-layer checks: per-op gradients plus invariants.
pub fn numerics_checks(seed: u64) -> Vec<Check> {
    let mut checks = op_gradient_checks(seed);
    checks.extend(numeric_invariant_checks(seed));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_op_gradients_match_finite_differences() {
        for check in numerics_checks(7) {
            assert!(
                check.passed(),
                "{}: {}",
                check.name,
                check.error.unwrap_or_default()
            );
        }
    }

    #[test]
    fn gradcheck_rejects_wrong_gradient() {
        // The oracle must catch a broken derivative: forward follows a skewed
        // path while the recorded gradient follows the plain one.
        let mut rng = Rng::stream(3, "probe");
        let x = Tensor::from_fn(&[4], |_| 1.0 + rng.uniform()).requires_grad(true);
        let result = gradcheck(
            &[x],
            |g, v| {
                let base = g.silu(v[0]);
                let skewed = g.scale(v[0], 1.1);
                let skewed = g.silu(skewed);
                let delta = g.sub(skewed, base)?;
                let delta_value = g.value(delta).clone();
                let frozen = g.constant(delta_value);
                let mixed = g.add(base, frozen)?;
                Ok(g.sum_all(mixed))
            },
            1e-6,
            8,
            &mut rng,
        );
        assert!(result.is_err(), "oracle failed to flag a broken gradient");
    }
}
