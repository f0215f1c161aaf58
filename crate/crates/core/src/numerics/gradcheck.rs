//! Central finite differences against the tape's analytic gradients.

use super::params::{ParamId, ParamStore};
use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::{Init, Tensor};
use crate::error::{Error, Result};

/// Relative error measure `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

/// Compares the backward gradient of the scalar `f(x)` with central
/// differences at every entry of `x`; returns the largest relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'static>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone())?;
    let loss = f(&mut tape, input)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t)?;
        let loss = f(&mut tape, v)?;
        Ok(tape.value(loss).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`finite_difference_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates passed over because the perturbation crossed a relu kink.
    pub kinks: usize,
    pub max_error: f64,
}

/// Finite-difference check of a loss with respect to stored parameters.
///
/// `f` builds the loss on a tape bound to the given store. At most
/// `max_entries` coordinates per parameter are checked, chosen by `rng`
/// when the tensor is larger than that. A coordinate whose `+eps` or `-eps`
/// evaluation changes the relu pattern of the unperturbed one has no
/// derivative over that interval; it is skipped and, for sampled tensors,
/// replaced by another draw (at most `4 * max_entries` draws in all).
pub fn finite_difference_check_params<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    max_entries: usize,
    rng: &mut Rng,
) -> Result<Vec<ParamCheck>>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    check_eps(eps)?;
    let (grads, pattern) = {
        let mut tape = Tape::with_params(store, true);
        let loss = f(&mut tape)?;
        tape.backward(loss)?;
        (tape.param_grads(), tape.relu_pattern())
    };
    let mut work = store.clone();
    let eval = |work: &ParamStore| -> Result<(f64, bool)> {
        let mut tape = Tape::with_params(work, false);
        let loss = f(&mut tape)?;
        Ok((tape.value(loss).item(), tape.relu_pattern() == pattern))
    };
    let mut out = Vec::new();
    for id in store.ids() {
        let len = store.get(id).len();
        let candidates: Vec<usize> = if len > max_entries {
            (0..4 * max_entries).map(|_| rng.below(len)).collect()
        } else {
            (0..len).collect()
        };
        let (mut checked, mut kinks, mut worst) = (0, 0, 0.0f64);
        for c in candidates {
            if checked == max_entries {
                break;
            }
            let original = store.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = original + eps;
            let (up, up_smooth) = eval(&work)?;
            work.get_mut(id).data_mut()[c] = original - eps;
            let (down, down_smooth) = eval(&work)?;
            work.get_mut(id).data_mut()[c] = original;
            if !(up_smooth && down_smooth) {
                kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[c]);
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
        out.push(ParamCheck {
            name: store.name(id).to_string(),
            checked,
            kinks,
            max_error: worst,
        });
    }
    Ok(out)
}

/// Outcome for one elementary operation.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_error: f64,
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::new(shape, Init::Uniform(1.0, rng)).expect("valid shape")
}

/// Weighted sum `sum(w * y)` with fixed random weights, so that every output
/// entry contributes a distinct gradient.
fn probe(tape: &mut Tape<'_>, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = Rng::new(rng_seed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Gradient checks for every differentiable tape operation on random inputs.
pub fn elementary_suite(seed: u64, eps: f64) -> Result<Vec<OpCheck>> {
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();
    let mut run = |op: &'static str,
                   shape: &[usize],
                   rng: &mut Rng,
                   f: &dyn Fn(&mut Tape<'static>, Var) -> Result<Var>|
     -> Result<()> {
        let x = random(shape, rng);
        let max_error = finite_difference_check(|t, v| f(t, v), &x, eps)?;
        checks.push(OpCheck { op, max_error });
        Ok(())
    };
    let other = random(&[3, 4], &mut rng);
    let other2 = other.clone();
    let other3 = other.clone();
    let mat = random(&[4, 5], &mut rng);
    let mat_t = random(&[5, 4], &mut rng);
    let batched = random(&[2, 4, 3], &mut rng);
    let col = random(&[3, 1], &mut rng);
    let gain = random(&[4], &mut rng);
    let shift = random(&[4], &mut rng);
    let table_rows = random(&[2, 4], &mut rng);

    run("add", &[3, 4], &mut rng, &|t, x| {
        let o = t.constant(other.clone())?;
        let y = t.add(x, o)?;
        probe(t, y, 1)
    })?;
    run("mul", &[3, 4], &mut rng, &|t, x| {
        let o = t.constant(other2.clone())?;
        let y = t.mul(x, o)?;
        probe(t, y, 2)
    })?;
    run("mul (self)", &[3, 4], &mut rng, &|t, x| {
        let y = t.mul(x, x)?;
        probe(t, y, 2)
    })?;
    run("add_bias", &[4], &mut rng, &|t, b| {
        let o = t.constant(other3.clone())?;
        let y = t.add_bias(o, b)?;
        probe(t, y, 3)
    })?;
    run("mul_column", &[3, 1], &mut rng, &|t, c| {
        let o = t.constant(Tensor::from_vec(&[3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect())?)?;
        let y = t.mul_column(o, c)?;
        probe(t, y, 4)
    })?;
    run("mul_column (rows)", &[3, 4], &mut rng, &|t, x| {
        let c = t.constant(col.clone())?;
        let y = t.mul_column(x, c)?;
        probe(t, y, 4)
    })?;
    run("affine", &[5], &mut rng, &|t, x| {
        let y = t.affine(x, -1.5, 0.3)?;
        probe(t, y, 5)
    })?;
    run("matmul (left)", &[3, 4], &mut rng, &|t, x| {
        let b = t.constant(mat.clone())?;
        let y = t.matmul(x, b)?;
        probe(t, y, 6)
    })?;
    run("matmul (right)", &[4, 5], &mut rng, &|t, x| {
        let a = t.constant(Tensor::from_vec(&[2, 4], (0..8).map(|i| (i as f64).sin()).collect())?)?;
        let y = t.matmul(a, x)?;
        probe(t, y, 7)
    })?;
    run("matmul_t (both)", &[3, 4], &mut rng, &|t, x| {
        let b = t.constant(mat_t.clone())?;
        let y = t.matmul_t(x, b)?;
        let z = t.matmul_t(x, x)?;
        let s1 = probe(t, y, 8)?;
        let s2 = probe(t, z, 80)?;
        t.add(s1, s2)
    })?;
    run("matmul (batched)", &[2, 3, 4], &mut rng, &|t, x| {
        let b = t.constant(batched.clone())?;
        let y = t.matmul(x, b)?;
        probe(t, y, 9)
    })?;
    run("transpose", &[2, 3, 4], &mut rng, &|t, x| {
        let y = t.transpose(x)?;
        probe(t, y, 10)
    })?;
    run("reshape", &[2, 6], &mut rng, &|t, x| {
        let y = t.reshape(x, &[3, 4])?;
        probe(t, y, 11)
    })?;
    run("concat", &[2, 3], &mut rng, &|t, x| {
        let sq = t.mul(x, x)?;
        let y = t.concat(&[x, sq, x], 1)?;
        let z = t.concat(&[y, y], 0)?;
        probe(t, z, 12)
    })?;
    run("slice", &[3, 5], &mut rng, &|t, x| {
        let y = t.slice(x, 1, 1, 4)?;
        let z = t.slice(y, 0, 1, 3)?;
        probe(t, z, 13)
    })?;
    run("gather", &[3, 4], &mut rng, &|t, table| {
        let y = t.gather(table, &[2, 0, 2, 1])?;
        probe(t, y, 14)
    })?;
    run("sigmoid", &[6], &mut rng, &|t, x| {
        let y = t.sigmoid(x)?;
        probe(t, y, 15)
    })?;
    run("relu", &[8], &mut rng, &|t, x| {
        let y = t.relu(x)?;
        probe(t, y, 16)
    })?;
    run("dropout (rate 0)", &[4], &mut rng, &|t, x| {
        let y = t.dropout(x, 0.0)?;
        probe(t, y, 17)
    })?;
    run("sum", &[2, 3], &mut rng, &|t, x| {
        let y = t.mul(x, x)?;
        t.sum(y)
    })?;
    run("mean", &[2, 3], &mut rng, &|t, x| {
        let y = t.mul(x, x)?;
        t.mean(y)
    })?;
    run("softmax_masked", &[3, 4], &mut rng, &|t, x| {
        let mask = [true, false, true, true];
        let y = t.softmax_masked(x, 1, Some(&mask))?;
        probe(t, y, 18)
    })?;
    run("softmax_masked (axis 0)", &[3, 4], &mut rng, &|t, x| {
        let y = t.softmax_masked(x, 0, None)?;
        probe(t, y, 19)
    })?;
    run("layer_norm (input)", &[3, 4], &mut rng, &|t, x| {
        let g = t.constant(gain.clone())?;
        let b = t.constant(shift.clone())?;
        let y = t.layer_norm(x, g, b, 1e-5)?;
        probe(t, y, 20)
    })?;
    run("layer_norm (gain)", &[4], &mut rng, &|t, g| {
        let x = t.constant(Tensor::from_vec(&[2, 4], vec![0.3, -1.2, 0.8, 2.0, 1.0, 0.1, -0.4, 0.5])?)?;
        let b = t.constant(Tensor::zeros(&[4]))?;
        let y = t.layer_norm(x, g, b, 1e-5)?;
        probe(t, y, 21)
    })?;
    run("nll (via softmax)", &[3, 5], &mut rng, &|t, x| {
        let p = t.softmax_masked(x, 1, None)?;
        t.nll(p, &[0, 4, 2])
    })?;
    run("outer_add", &[3, 4], &mut rng, &|t, x| {
        let b = t.constant(table_rows.clone())?;
        let y = t.outer_add(x, b)?;
        let z = t.outer_add(b, x)?;
        let y = t.relu(y)?;
        let s1 = probe(t, y, 22)?;
        let s2 = probe(t, z, 23)?;
        t.add(s1, s2)
    })?;
    run("scatter_cols", &[2, 4], &mut rng, &|t, x| {
        let y = t.scatter_cols(x, &[3, 1, 3, 0], 5)?;
        probe(t, y, 24)
    })?;
    Ok(checks)
}

/// Gradient check of a loss over `ids` only; convenience wrapper used by tests.
pub fn max_param_error(checks: &[ParamCheck], ids: &[ParamId], store: &ParamStore) -> f64 {
    checks
        .iter()
        .filter(|c| ids.iter().any(|id| store.name(*id) == c.name))
        .map(|c| c.max_error)
        .fold(0.0, f64::max)
}
