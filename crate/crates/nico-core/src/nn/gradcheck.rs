//! Finite-difference validation of hand-written backward passes.

use super::{rel_err, ParamModule};

#[derive(Debug, Clone)]
pub struct GradCheckBlock {
    pub name: String,
    pub max_rel_err: f64,
    /// Entry index where the worst error occurred.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<GradCheckBlock>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compare the model's analytic gradients against central finite
/// differences of `run`, per parameter entry.
///
/// `run(model, true)` must compute the scalar loss AND accumulate gradients
/// into the model's parameters; `run(model, false)` must compute the same
/// loss without touching gradients.  `run` must be deterministic: any
/// sampling inside it has to use a fixed stream.
pub fn gradient_check<M: ParamModule>(
    model: &mut M,
    mut run: impl FnMut(&mut M, bool) -> f64,
    step: f64,
    tolerance: f64,
) -> GradCheckReport {
    model.zero_grad();
    let _ = run(model, true);
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.iter().copied().collect()))
        .collect();
    model.zero_grad();

    let mut blocks = Vec::with_capacity(analytic.len());
    for (block_idx, (name, grads)) in analytic.iter().enumerate() {
        let mut worst = GradCheckBlock {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for entry in 0..grads.len() {
            // Perturb exactly one scalar, re-evaluating the loss twice.
            let original = {
                let mut params = model.params_mut();
                let slice = params[block_idx].value.as_slice_mut().expect("contiguous");
                let orig = slice[entry];
                slice[entry] = orig + step;
                orig
            };
            let up = run(model, false);
            {
                let mut params = model.params_mut();
                let slice = params[block_idx].value.as_slice_mut().expect("contiguous");
                slice[entry] = original - step;
            }
            let down = run(model, false);
            {
                let mut params = model.params_mut();
                let slice = params[block_idx].value.as_slice_mut().expect("contiguous");
                slice[entry] = original;
            }
            let numeric = (up - down) / (2.0 * step);
            let err = rel_err(grads[entry], numeric);
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_entry = entry;
                worst.analytic = grads[entry];
                worst.numeric = numeric;
            }
        }
        blocks.push(worst);
    }
    GradCheckReport { blocks, tolerance, step }
}
