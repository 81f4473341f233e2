//! Central-difference gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, NodeId, ParamStore};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation crossed a relu or max-pool kink.
    pub skipped: usize,
    pub worst: Option<(String, usize)>,
}

/// Which coordinates to probe.
#[derive(Clone, Debug)]
pub enum Coordinates {
    /// Uniformly sampled flat indices over all parameters.
    Sampled { count: usize, seed: u64 },
    Explicit(Vec<(String, usize)>),
}

/// Compares analytic gradients from one backward pass against
/// `(f(x+eps) - f(x-eps)) / (2 eps)`. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, coords: Coordinates, eps: f64) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, NnError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, params)?;
    graph.backward(loss)?;
    let base_sig = graph.kink_signature();
    let analytic: std::collections::BTreeMap<String, super::Tensor> = graph.param_grads().into_iter().collect();

    let coords = match coords {
        Coordinates::Explicit(c) => c,
        Coordinates::Sampled { count, seed } => {
            let names: Vec<(&str, usize)> = params.names().map(|n| (n, params.get(n).map_or(0, |t| t.len()))).collect();
            let total: usize = names.iter().map(|(_, l)| l).sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let mut flat = rng.random_range(0..total);
                    let mut chosen = (names[0].0.to_string(), 0);
                    for (n, l) in &names {
                        if flat < *l {
                            chosen = (n.to_string(), flat);
                            break;
                        }
                        flat -= l;
                    }
                    chosen
                })
                .collect()
        }
    };

    let eval = |store: &ParamStore| -> Result<(f64, u64), NnError> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok((g.value(l).item(), g.kink_signature()))
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped: 0, worst: None };
    let mut work = params.clone();
    for (name, idx) in coords {
        let original = work.get(&name).ok_or_else(|| NnError::UnknownParam(name.clone()))?.data()[idx];
        work.get_mut(&name).expect("present").data_mut()[idx] = original + eps;
        let (fp, sp) = eval(&work)?;
        work.get_mut(&name).expect("present").data_mut()[idx] = original - eps;
        let (fm, sm) = eval(&work)?;
        work.get_mut(&name).expect("present").data_mut()[idx] = original;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.get(&name).map_or(0.0, |t| t.data()[idx]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((name.clone(), idx));
        }
    }
    Ok(report)
}
