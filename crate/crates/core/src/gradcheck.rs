// SPDX-License-Identifier: Apache-2.0

//! Central-difference verification of [`Graph::backward`].

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParameterStore;
use crate::rng::RngState;

/// Smallest denominator used for relative errors.
pub const REL_ERR_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst relative error per parameter name.
    pub per_parameter: BTreeMap<String, f64>,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_GUARD)
}

/// Compares analytic gradients of the scalar built by `loss_fn` against
/// central differences with step `step`, sampling up to `per_parameter`
/// entries of every parameter.
pub fn grad_check<F>(
    store: &mut ParameterStore,
    loss_fn: F,
    step: f64,
    per_parameter: usize,
    rng: &mut RngState,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, store)?;
    graph.backward(loss, store)?;

    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.value(l).data()[0])
    };

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        per_parameter: BTreeMap::new(),
        entries_checked: 0,
    };
    for name in names {
        let len = store.get(&name).map_or(0, |t| t.len());
        let picks = sample(rng, len, per_parameter.min(len)).into_vec();
        let analytic = store.grad(&name).expect("present").clone();
        let mut worst = 0.0f64;
        for i in picks {
            let orig = store.get(&name).expect("present").data()[i];
            store.get_mut(&name).expect("present").data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.get_mut(&name).expect("present").data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.get_mut(&name).expect("present").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            report.entries_checked += 1;
        }
        report.max_relative_error = report.max_relative_error.max(worst);
        report.per_parameter.insert(name, worst);
    }
    Ok(report)
}
