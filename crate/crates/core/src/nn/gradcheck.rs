//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::params::{Group, GroupMask, ParamId, ParamStore};
use super::tensor::Tensor;
use super::TensorError;

/// Denominator floor so exact-zero gradients compare on absolute error.
const REL_FLOOR: f64 = 1e-6;

/// Relative and absolute gaps between the one-sided slopes above which a
/// coordinate is probed for a kink inside `[x - eps, x + eps]`.
const KINK_REL: f64 = 1e-3;
const KINK_ABS: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates whose step straddled a kink and were scored on the
    /// smooth side instead of by the central difference.
    pub kinks: usize,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks `f` as a function of free tensors `params`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = params
        .iter()
        .enumerate()
        .map(|(i, p)| store.add(format!("p{i}"), Group::Generator, p.clone()))
        .collect();
    grad_check_store(
        &store,
        GroupMask::of(&[Group::Generator]),
        |s, mask| {
            let mut g = Graph::new(s, mask).checked(true);
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = f(&mut g, &vars)?;
            Ok((g, out))
        },
        eps,
        None,
    )
}

/// Checks a closure that builds its loss from parameters of `store`.
/// `coords_per_param` limits the coordinates probed per tensor (evenly
/// spaced); `None` checks all of them.
pub fn grad_check_store<'s, F>(
    store: &'s ParamStore<f64>,
    mask: GroupMask,
    build: F,
    eps: f64,
    coords_per_param: Option<usize>,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'x> Fn(&'x ParamStore<f64>, GroupMask) -> Result<(Graph<'x, f64>, Var), TensorError>,
{
    let (g, loss) = build(store, mask)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check loss" });
    }
    let grads = g.backward(loss)?;
    drop(g);

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        kinks: 0,
    };
    let value_at = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let (g, l) = build(s, GroupMask::NONE)?;
        let v = g.value(l).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "grad_check loss" })
        }
    };
    for id in store.ids() {
        let entry = store.entry(id);
        if !mask.contains(entry.group) {
            continue;
        }
        let n = entry.value.len();
        let coords: Vec<usize> = match coords_per_param {
            Some(c) if c < n => (0..c).map(|i| i * n / c).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            let mut at = |delta: f64| -> Result<f64, TensorError> {
                work.get_mut(id).data_mut()[i] = orig + delta;
                let v = value_at(&work);
                work.get_mut(id).data_mut()[i] = orig;
                v
            };
            let (up, down) = (at(eps)?, at(-eps)?);
            let mut numeric = (up - down) / (2.0 * eps);
            let (fwd, bwd) = ((up - base) / eps, (base - down) / eps);
            if (fwd - bwd).abs() > (KINK_REL * fwd.abs().max(bwd.abs())).max(KINK_ABS) {
                let h = eps / 2.0;
                let (fwd2, bwd2) = ((at(h)? - base) / h, (base - at(-h)?) / h);
                let (jump_f, jump_b) = ((fwd - fwd2).abs(), (bwd - bwd2).abs());
                if jump_f > 4.0 * jump_b {
                    numeric = 2.0 * bwd2 - bwd;
                    report.kinks += 1;
                } else if jump_b > 4.0 * jump_f {
                    numeric = 2.0 * fwd2 - fwd;
                    report.kinks += 1;
                }
            }
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
            let err = relative_error(analytic, numeric);
            report.coords_checked += 1;
            if report.coords_checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = entry.name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
