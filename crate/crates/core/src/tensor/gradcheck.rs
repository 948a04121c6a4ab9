//! Central-difference gradient checking.

use serde::Serialize;

use super::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Cap on probed coordinates per parameter tensor; evenly strided when hit.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-4,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub per_param: Vec<ParamError>,
    pub tolerance: f64,
    pub pass: bool,
}

/// `|a − n| / max(1, |a|, |n|)`; non-finite inputs map to infinity.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn probe_indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => (0..c).map(|i| i * len / c).collect(),
        _ => (0..len).collect(),
    }
}

/// Compare `analytic` gradients of the scalar function `f` against central
/// differences, coordinate by coordinate.
pub fn grad_check<F>(
    op: &str,
    params: &[(String, Tensor)],
    analytic: &[Tensor],
    mut f: F,
    opts: GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut point: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut per_param = Vec::with_capacity(params.len());
    let mut worst = 0.0f64;
    for (pi, (name, tensor)) in params.iter().enumerate() {
        assert_eq!(tensor.shape(), analytic[pi].shape(), "gradient shape for {name}");
        let idx = probe_indices(tensor.len(), opts.max_coords_per_param);
        let mut param_worst = 0.0f64;
        for &i in &idx {
            let orig = point[pi].data()[i];
            point[pi].data_mut()[i] = orig + opts.eps;
            let up = f(&point);
            point[pi].data_mut()[i] = orig - opts.eps;
            let down = f(&point);
            point[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let err = relative_error(analytic[pi].data()[i], numeric);
            param_worst = if err.is_nan() { f64::INFINITY } else { param_worst.max(err) };
        }
        worst = worst.max(param_worst);
        per_param.push(ParamError {
            name: name.clone(),
            max_rel_error: param_worst,
            coords: idx.len(),
        });
    }
    GradCheckReport {
        op: op.to_string(),
        max_rel_error: worst,
        per_param,
        tolerance: opts.tol,
        pass: worst <= opts.tol,
    }
}
