//! Central-difference gradient checking in double precision.

use std::fmt;

use crate::error::Result;
use crate::par;
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Denominator floor of the relative error, so roundoff on near-zero
/// gradients does not read as a large relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Param { id: ParamId, index: usize },
    Input { input: usize, index: usize },
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub location: Option<Location>,
    pub location_name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max relative error {:.3e} at {} (analytic {:.9e}, numeric {:.9e}) over {} scalars",
            self.max_rel_error, self.location_name, self.analytic, self.numeric, self.checked
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Forward closure: build the output from bound inputs. The checked loss is
/// the sum of the output's elements.
pub trait Forward: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + Sync {}

impl<F> Forward for F where F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + Sync {}

fn slot<'a>(store: &'a mut ParamStore<f64>, inputs: &'a mut [Tensor<f64>], loc: Location) -> &'a mut f64 {
    match loc {
        Location::Param { id, index } => &mut store.get_mut(id).data_mut()[index],
        Location::Input { input, index } => &mut inputs[input].data_mut()[index],
    }
}

fn loss_value(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: &impl Forward) -> Result<f64> {
    let mut g = Graph::new(store);
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).sum())
}

/// Compare tape gradients of `sum(f(inputs))` against central differences
/// over every parameter scalar and every input scalar.
pub fn gradcheck(store: &ParamStore<f64>, inputs: &[Tensor<f64>], step: f64, f: impl Forward) -> Result<GradcheckReport> {
    let mut g = Graph::new(store);
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let loss = g.sum(out)?;
    g.backward(loss)?;
    let param_grads = g.param_grads();
    let input_grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut targets = Vec::new();
    for id in store.ids() {
        targets.extend((0..store.get(id).numel()).map(|index| Location::Param { id, index }));
    }
    for (input, t) in inputs.iter().enumerate() {
        targets.extend((0..t.numel()).map(|index| Location::Input { input, index }));
    }

    let results = par::map_range_init(
        targets.len(),
        || (store.clone(), inputs.to_vec()),
        |(s, xs), i| -> Result<(f64, f64)> {
            let loc = targets[i];
            let orig = *slot(s, xs, loc);
            *slot(s, xs, loc) = orig + step;
            let plus = loss_value(s, xs, &f);
            *slot(s, xs, loc) = orig - step;
            let minus = loss_value(s, xs, &f);
            *slot(s, xs, loc) = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let analytic = match loc {
                Location::Param { id, index } => param_grads[id.index()].data()[index],
                Location::Input { input, index } => input_grads[input].data()[index],
            };
            Ok((analytic, numeric))
        },
    );

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        location: None,
        location_name: "-".into(),
        analytic: 0.0,
        numeric: 0.0,
        checked: targets.len(),
    };
    for (loc, r) in targets.iter().zip(results) {
        let (a, n) = r?;
        let e = relative_error(a, n);
        if e > report.max_rel_error || report.location.is_none() {
            report.max_rel_error = e;
            report.location = Some(*loc);
            report.analytic = a;
            report.numeric = n;
        }
    }
    report.location_name = match report.location {
        Some(Location::Param { id, index }) => format!("{}[{index}]", store.name(id)),
        Some(Location::Input { input, index }) => format!("input{input}[{index}]"),
        None => "-".into(),
    };
    Ok(report)
}
