//! Central finite differences, used as an independent oracle for
//! [`Graph::backward`](crate::numkit::Graph::backward).

use crate::error::Result;
use crate::numkit::graph::{Gradients, ParamId, ParamStore};

/// Outcome for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the probed coordinates.
    pub rel_err: f64,
    pub analytic_norm: f64,
}

/// Central difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error `O(h²)`.
    ThreePoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error `O(h⁴)`.
    /// Tolerates a wider step, which keeps f32 roundoff in the loss small
    /// relative to the difference.
    FivePoint,
}

/// Compares `analytic` with three-point central differences of `loss` at
/// step `h`, probing up to `max_coords` evenly spaced coordinates per
/// parameter.
pub fn check_gradients(
    params: &ParamStore,
    analytic: &Gradients,
    h: f32,
    max_coords: usize,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<Vec<GradCheckEntry>> {
    check_gradients_with(Stencil::ThreePoint, params, analytic, h, max_coords, loss)
}

pub fn check_gradients_with(
    stencil: Stencil,
    params: &ParamStore,
    analytic: &Gradients,
    h: f32,
    max_coords: usize,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<Vec<GradCheckEntry>> {
    let mut work = params.clone();
    let mut out = Vec::new();
    for id in params.ids() {
        let n = params.get(id).len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let (mut diff2, mut a2, mut n2, mut coords) = (0.0f64, 0.0f64, 0.0f64, 0);
        for i in (0..n).step_by(stride) {
            let numeric = central_difference(stencil, &mut work, id, i, h, &loss)?;
            let a = f64::from(analytic.get(id).data()[i]);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            coords += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-12);
        out.push(GradCheckEntry {
            name: params.name(id).to_string(),
            coords,
            rel_err: if a2 == 0.0 && n2 == 0.0 { 0.0 } else { diff2.sqrt() / denom },
            analytic_norm: a2.sqrt(),
        });
    }
    Ok(out)
}

/// Compares `analytic` with directional differences along `directions`
/// sign vectors per parameter tensor. Each probe moves every coordinate of
/// the tensor by `±h` at once, so the difference quotient carries the whole
/// tensor's gradient rather than one small entry of it. `rel_err` is the
/// RMS error over directions divided by `‖analytic‖`, the RMS size of a
/// sign-vector projection, so a projection that happens to cancel does not
/// inflate it. `coords` in the result counts directions.
pub fn check_directional(
    stencil: Stencil,
    params: &ParamStore,
    analytic: &Gradients,
    h: f32,
    directions: usize,
    seed: u64,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<Vec<GradCheckEntry>> {
    use rand::{Rng as _, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut out = Vec::new();
    for id in params.ids() {
        let orig = params.get(id).clone();
        let grad = analytic.get(id);
        let gnorm = grad.data().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        let mut diff2 = 0.0f64;
        for _ in 0..directions {
            let signs: Vec<f32> = (0..orig.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let a: f64 = grad.data().iter().zip(&signs).map(|(g, s)| f64::from(g * s)).sum();
            let mut at = |k: f32| -> Result<f64> {
                for ((w, o), s) in work.get_mut(id).data_mut().iter_mut().zip(orig.data()).zip(&signs) {
                    *w = o + k * h * s;
                }
                let l = loss(&work);
                work.get_mut(id).data_mut().copy_from_slice(orig.data());
                l
            };
            let hh = f64::from(h);
            let numeric = match stencil {
                Stencil::ThreePoint => (at(1.0)? - at(-1.0)?) / (2.0 * hh),
                Stencil::FivePoint => (-at(2.0)? + 8.0 * at(1.0)? - 8.0 * at(-1.0)? + at(-2.0)?) / (12.0 * hh),
            };
            diff2 += (a - numeric).powi(2);
        }
        let rms = (diff2 / directions.max(1) as f64).sqrt();
        out.push(GradCheckEntry {
            name: params.name(id).to_string(),
            coords: directions,
            rel_err: if gnorm == 0.0 { rms } else { rms / gnorm },
            analytic_norm: gnorm,
        });
    }
    Ok(out)
}

fn central_difference(
    stencil: Stencil,
    work: &mut ParamStore,
    id: ParamId,
    i: usize,
    h: f32,
    loss: &impl Fn(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let orig = work.get(id).data()[i];
    let mut at = |offset: f32| -> Result<(f64, f64)> {
        let x = orig + offset;
        work.get_mut(id).data_mut()[i] = x;
        let l = loss(work);
        work.get_mut(id).data_mut()[i] = orig;
        // The realised step, since `orig + offset` rounds in f32.
        Ok((l?, f64::from(x) - f64::from(orig)))
    };
    match stencil {
        Stencil::ThreePoint => {
            let (lp, dp) = at(h)?;
            let (lm, dm) = at(-h)?;
            Ok((lp - lm) / (dp - dm))
        }
        Stencil::FivePoint => {
            let (lp2, _) = at(2.0 * h)?;
            let (lp, dp) = at(h)?;
            let (lm, dm) = at(-h)?;
            let (lm2, _) = at(-2.0 * h)?;
            let step = 0.5 * (dp - dm);
            Ok((-lp2 + 8.0 * lp - 8.0 * lm + lm2) / (12.0 * step))
        }
    }
}
