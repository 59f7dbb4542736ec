//! Central finite-difference verification of [`Graph`] gradients.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::kernels::dot;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per input.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Differentiates the scalar built by `build` with respect to every tensor
/// in `inputs`, analytically and by central differences with `step`.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<_> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let mut grads = g.backward(loss)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, &id) in ids.iter().enumerate() {
        let analytic = grads
            .take(id)
            .map(Tensor::into_data)
            .unwrap_or_else(|| alloc::vec![0.0; inputs[i].len()]);
        let mut numeric = alloc::vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            numeric[j] = (up - down) / (2.0 * step);
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = libm::sqrt(dot(&analytic, &analytic)).max(libm::sqrt(dot(&numeric, &numeric)));
        let err = libm::sqrt(dot(&diff, &diff));
        relative_errors.push(if scale > 0.0 { err / scale } else { err });
    }
    Ok(GradCheckReport { relative_errors })
}
