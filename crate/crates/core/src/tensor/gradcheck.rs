//! Central finite-difference verification of tape gradients (64-bit).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose stencil crossed a relu kink; the function is not
    /// differentiable there along that axis, so they are not compared.
    pub skipped_kinks: usize,
    /// `(input, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    /// Compared coordinates per input.
    pub per_input_checked: Vec<usize>,
    /// Compared coordinates whose stencil crossed a kink and was corrected
    /// (see [`finite_diff_check_sampled`]); included in `checked`.
    pub corrected: usize,
    /// Largest relative error among the corrected coordinates.
    pub max_corrected_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the analytic gradient of a scalar function of one tensor with
/// central differences at every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        &[None],
        h,
    )
}

/// Multi-input variant. `coords[i]` restricts the compared coordinates of
/// input `i` (`None` means all of them).
pub fn finite_diff_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    coords: &[Option<Vec<usize>>],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    contract!(
        coords.len() == inputs.len(),
        "one coordinate selection per input"
    );
    let orders = coords
        .iter()
        .zip(inputs)
        .map(|(c, x)| c.clone().unwrap_or_else(|| (0..x.numel()).collect()))
        .collect();
    run(f, inputs, orders, None, false, h)
}

/// Sampled variant for large networks: visits the coordinates of every
/// input in a seeded random order until `per_input` of them have been
/// compared or `max_tries` have been visited.
///
/// In a network with tens of thousands of relu units almost every stencil
/// flips some unit. With `correct_kinks`, such a stencil is not skipped:
/// a unit whose input moved from `z0` to `z` across zero adds `g_u |z|` to
/// the perturbed loss relative to the smooth branch of the base point,
/// where `g_u` is the base-point gradient at the relu output. Subtracting
/// that first-order term leaves an O(h^2) stencil error, like a kink-free
/// coordinate. Corrected comparisons are counted separately in the report.
pub fn finite_diff_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    per_input: usize,
    max_tries: usize,
    seed: u64,
    correct_kinks: bool,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orders = inputs
        .iter()
        .map(|x| {
            let mut o: Vec<usize> = (0..x.numel()).collect();
            o.shuffle(&mut rng);
            o.truncate(max_tries);
            o
        })
        .collect();
    run(f, inputs, orders, Some(per_input), correct_kinks, h)
}

fn run<F>(
    f: F,
    inputs: &[Tensor<f64>],
    orders: Vec<Vec<usize>>,
    quota: Option<usize>,
    correct_kinks: bool,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    contract!(h > 0.0, "finite-difference step must be positive");

    let eval = |values: &[Tensor<f64>], track_all: bool| -> Result<(f64, Tape<f64>, Vec<Var>, Var)> {
        let mut tape = if track_all { Tape::tracking_all() } else { Tape::new() };
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        contract!(
            tape.value(out).numel() == 1,
            "gradient check needs a scalar function"
        );
        Ok((tape.value(out).item(), tape, vars, out))
    };

    let (_, tape, vars, out) = eval(inputs, correct_kinks)?;
    let base_z = tape.relu_inputs();
    let grads = tape.backward(out)?;
    // gradient at every relu output, aligned with `base_z`
    let relu_grad: Vec<f64> = if correct_kinks {
        tape.relu_nodes()
            .into_iter()
            .flat_map(|(y, x)| match grads.get(y) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; tape.value(x).numel()],
            })
            .collect()
    } else {
        Vec::new()
    };
    // Sum of g_u |z_u| over flipped units, or None when nothing flipped.
    let kink_term = |t: &Tape<f64>| -> Option<f64> {
        let z = t.relu_inputs();
        let mut flipped = false;
        let mut term = 0.0;
        for (u, (&z0, &z1)) in base_z.iter().zip(&z).enumerate() {
            if (z0 > 0.0) != (z1 > 0.0) {
                flipped = true;
                if correct_kinks {
                    term += relu_grad[u] * z1.abs();
                }
            }
        }
        flipped.then_some(term)
    };
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
        })
        .collect();
    drop(grads);
    drop(tape);

    let mut report = GradCheckReport {
        per_input_checked: vec![0; inputs.len()],
        ..Default::default()
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for &j in &orders[i] {
            if quota.is_some_and(|q| report.per_input_checked[i] >= q) {
                break;
            }
            contract!(
                j < input.numel(),
                "coordinate {j} out of range for input {i}"
            );
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let (fp, tp, _, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - h;
            let (fm, tm, _, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;
            let (kp, km) = (kink_term(&tp), kink_term(&tm));
            let kinked = kp.is_some() || km.is_some();
            if kinked && !correct_kinks {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = ((fp - kp.unwrap_or(0.0)) - (fm - km.unwrap_or(0.0))) / (2.0 * h);
            let err = relative_error(analytic[i].data()[j], numeric);
            report.checked += 1;
            if kinked {
                report.corrected += 1;
                report.max_corrected_error = report.max_corrected_error.max(err);
            }
            report.per_input_checked[i] += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
