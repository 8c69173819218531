use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Probes where either derivative is non-zero.
    pub nonzero: usize,
    /// `(leaf, element)` with the largest relative error.
    pub worst: Option<(usize, usize)>,
}

/// Relative error with the denominator clamped at 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every element of `at` for a scalar-valued `f`.
pub fn finite_diff_check<F>(f: F, at: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let probes: Vec<(usize, usize)> = (0..at.len()).map(|i| (0, i)).collect();
    finite_diff_check_leaves(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(at),
        &probes,
        h,
    )
}

fn evaluate<F>(
    f: &F,
    values: &[Tensor<f64>],
    grads: bool,
) -> Result<(f64, Option<Vec<Tensor<f64>>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), grads)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(Error::shape(
            "finite_diff_check needs a scalar-valued function",
        ));
    }
    let y = value.item();
    if !grads {
        return Ok((y, None));
    }
    let g = tape.backward(out)?;
    Ok((y, Some(vars.iter().map(|&v| g.get(v)).collect())))
}

/// Tape gradient of a scalar function with respect to every leaf.
pub fn analytic_gradients<F>(f: &F, leaves: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(evaluate(f, leaves, true)?.1.expect("gradients requested"))
}

/// Central difference `(f(x + h e) - f(x - h e)) / 2h` along one element.
pub fn central_difference<F>(
    f: &F,
    leaves: &mut [Tensor<f64>],
    leaf: usize,
    idx: usize,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let orig = leaves[leaf].data()[idx];
    leaves[leaf].data_mut()[idx] = orig + h;
    let fp = evaluate(f, leaves, false);
    leaves[leaf].data_mut()[idx] = orig - h;
    let fm = evaluate(f, leaves, false);
    leaves[leaf].data_mut()[idx] = orig;
    Ok((fp?.0 - fm?.0) / (2.0 * h))
}

/// [`Tape::branch_pattern`] of `f` evaluated at `leaves`.
pub fn branch_pattern<F>(f: &F, leaves: &[Tensor<f64>]) -> Result<Vec<u64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|v| tape.leaf(v.clone(), false)).collect();
    f(&mut tape, &vars)?;
    Ok(tape.branch_pattern())
}

/// Like [`central_difference`], but `None` when either end of the stencil
/// takes a different branch than `base` somewhere, i.e. a ReLU kink or a
/// tied maximum lies within `h` of the point.
pub fn smooth_central_difference<F>(
    f: &F,
    leaves: &mut [Tensor<f64>],
    leaf: usize,
    idx: usize,
    h: f64,
    base: &[u64],
) -> Result<Option<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let orig = leaves[leaf].data()[idx];
    let mut side = |x: f64| -> Result<(f64, bool)> {
        leaves[leaf].data_mut()[idx] = x;
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        leaves[leaf].data_mut()[idx] = orig;
        let out = out?;
        Ok((tape.value(out).item(), tape.branch_pattern() == base))
    };
    let (fp, same_p) = side(orig + h)?;
    let (fm, same_m) = side(orig - h)?;
    Ok((same_p && same_m).then(|| (fp - fm) / (2.0 * h)))
}

/// Checks the listed `(leaf, element)` probes of a scalar function of several
/// leaves, e.g. a sampled subset of a network's parameters.
pub fn finite_diff_check_leaves<F>(
    f: F,
    leaves: &[Tensor<f64>],
    probes: &[(usize, usize)],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let analytic = analytic_gradients(&f, leaves)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        nonzero: 0,
        worst: None,
    };
    let mut work = leaves.to_vec();
    for &(leaf, idx) in probes {
        let numeric = central_difference(&f, &mut work, leaf, idx, h)?;
        let a = analytic[leaf].data()[idx];
        let rel = relative_error(a, numeric);
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((leaf, idx));
        }
        report.checked += 1;
        report.nonzero += (a != 0.0 || numeric != 0.0) as usize;
    }
    Ok(report)
}

/// Result of one primitive in [`primitive_suite`].
#[derive(Clone, Debug)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Case = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
);

/// Gradient check of every differentiable primitive with respect to every
/// element of every input (data, weights, biases, affine parameters).
/// Inputs are drawn away from the ReLU kinks so central differences with a
/// small `h` stay on one linear piece.
pub fn primitive_suite(h: f64, seed: u64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = rng_from_seed(seed);
    let mut rand = |shape: &[usize], lo: f64, hi: f64| -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let v: f64 = rng.random_range(lo..hi);
            if v.abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        })
    };
    // a fixed random linear functional turns any tensor op into a scalar
    let proj_w: Vec<Tensor<f64>> = (0..14).map(|_| rand(&[4096], -1.0, 1.0)).collect();
    let project = move |t: &mut Tape<f64>, y: Var, k: usize| -> Result<Var> {
        let n = t.value(y).len();
        let w = Tensor::new(t.value(y).shape().to_vec(), proj_w[k].data()[..n].to_vec())?;
        let w = t.leaf(w, false);
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    };
    let p = std::sync::Arc::new(project);
    let mut nrelu_in = rand(&[1, 1, 2, 2, 3], 0.1, 1.0);
    nrelu_in.data_mut()[5] = 2.0;
    macro_rules! case {
        ($name:expr, [$($leaf:expr),*], |$t:ident, $v:ident, $pr:ident| $body:expr) => {{
            let $pr = p.clone();
            let f: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> = Box::new(move |$t, $v| $body);
            ($name, vec![$($leaf),*], f) as Case
        }};
    }
    let cases: Vec<Case> = vec![
        case!(
            "conv3d 3x3x3 stride 1",
            [
                rand(&[1, 2, 3, 3, 3], -1.0, 1.0),
                rand(&[2, 2, 3, 3, 3], -0.5, 0.5),
                rand(&[2], -0.5, 0.5)
            ],
            |t, v, pr| {
                let y = t.conv3d(v[0], v[1], v[2], 1, 1)?;
                pr(t, y, 0)
            }
        ),
        case!(
            "conv3d 3x3x3 stride 2",
            [
                rand(&[2, 2, 4, 4, 4], -1.0, 1.0),
                rand(&[3, 2, 3, 3, 3], -0.5, 0.5),
                rand(&[3], -0.5, 0.5)
            ],
            |t, v, pr| {
                let y = t.conv3d(v[0], v[1], v[2], 2, 1)?;
                pr(t, y, 1)
            }
        ),
        case!(
            "conv3d 1x1x1",
            [
                rand(&[2, 3, 2, 2, 2], -1.0, 1.0),
                rand(&[4, 3, 1, 1, 1], -1.0, 1.0),
                rand(&[4], -1.0, 1.0)
            ],
            |t, v, pr| {
                let y = t.conv3d(v[0], v[1], v[2], 1, 0)?;
                pr(t, y, 2)
            }
        ),
        case!(
            "instance_norm3d",
            [
                rand(&[2, 3, 2, 2, 2], -1.0, 1.0),
                rand(&[3], 0.5, 1.5),
                rand(&[3], -0.5, 0.5)
            ],
            |t, v, pr| {
                let y = t.instance_norm3d(v[0], v[1], v[2], 1e-5)?;
                pr(t, y, 3)
            }
        ),
        case!(
            "leaky_relu",
            [rand(&[2, 3, 2, 2, 2], -1.0, 1.0)],
            |t, v, pr| {
                let y = t.leaky_relu(v[0], 0.01);
                pr(t, y, 4)
            }
        ),
        case!("relu", [rand(&[2, 3, 2, 2, 2], -1.0, 1.0)], |t, v, pr| {
            let y = t.relu(v[0]);
            pr(t, y, 5)
        }),
        case!(
            "sigmoid",
            [rand(&[2, 3, 2, 2, 2], -3.0, 3.0)],
            |t, v, pr| {
                let y = t.sigmoid(v[0]);
                pr(t, y, 6)
            }
        ),
        case!(
            "nearest_upsample2x",
            [rand(&[1, 2, 2, 2, 2], -1.0, 1.0)],
            |t, v, pr| {
                let y = t.upsample2x(v[0])?;
                pr(t, y, 7)
            }
        ),
        case!("normalized_relu", [nrelu_in], |t, v, pr| {
            let y = t.normalized_relu(v[0]);
            pr(t, y, 8)
        }),
        case!(
            "dropout3d",
            [rand(&[2, 4, 2, 2, 2], -1.0, 1.0)],
            |t, v, pr| {
                let y = t.dropout3d(v[0], 0.4, &mut rng_from_seed(8), true)?;
                pr(t, y, 9)
            }
        ),
        case!(
            "add",
            [
                rand(&[1, 2, 2, 2, 2], -1.0, 1.0),
                rand(&[1, 2, 2, 2, 2], -1.0, 1.0)
            ],
            |t, v, pr| {
                let y = t.add(v[0], v[1])?;
                pr(t, y, 10)
            }
        ),
        case!(
            "mul",
            [
                rand(&[1, 2, 2, 2, 2], -1.0, 1.0),
                rand(&[1, 2, 2, 2, 2], -1.0, 1.0)
            ],
            |t, v, pr| {
                let y = t.mul(v[0], v[1])?;
                pr(t, y, 11)
            }
        ),
        case!(
            "concat_channels",
            [
                rand(&[2, 1, 2, 2, 2], -1.0, 1.0),
                rand(&[2, 3, 2, 2, 2], -1.0, 1.0)
            ],
            |t, v, pr| {
                let y = t.concat_channels(v[0], v[1])?;
                pr(t, y, 12)
            }
        ),
        case!(
            "scale_by_map",
            [
                rand(&[2, 3, 2, 2, 2], -1.0, 1.0),
                rand(&[2, 1, 2, 2, 2], 0.0, 1.0)
            ],
            |t, v, pr| {
                let y = t.scale_by_map(v[0], v[1])?;
                pr(t, y, 13)
            }
        ),
        case!("sum", [rand(&[2, 3, 2, 2, 2], -1.0, 1.0)], |t, v, _pr| Ok(
            t.sum(v[0])
        )),
        case!(
            "soft_dice_loss",
            [
                rand(&[2, 1, 2, 2, 2], -2.0, 2.0),
                rand(&[2, 1, 2, 2, 2], 0.0, 1.0)
            ],
            |t, v, _pr| {
                let p = t.sigmoid(v[0]);
                t.soft_dice_loss(p, v[1], 1e-8, false)
            }
        ),
        case!(
            "soft_dice_loss squared",
            [
                rand(&[2, 1, 2, 2, 2], -2.0, 2.0),
                rand(&[2, 1, 2, 2, 2], 0.0, 1.0)
            ],
            |t, v, _pr| {
                let p = t.sigmoid(v[0]);
                t.soft_dice_loss(p, v[1], 1e-8, true)
            }
        ),
    ];
    cases
        .into_iter()
        .map(|(name, leaves, f)| {
            let probes: Vec<(usize, usize)> = leaves
                .iter()
                .enumerate()
                .flat_map(|(l, t)| (0..t.len()).map(move |i| (l, i)))
                .collect();
            let report = finite_diff_check_leaves(f, &leaves, &probes, h)?;
            Ok(PrimitiveCheck { name, report })
        })
        .collect()
}
