use super::{GradError, Tape, Tensor, Var};

/// Denominator floor for [`relative_error`]; coordinates whose derivative is
/// below it in magnitude are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: &F, x: &Tensor, h: f64) -> Result<Tensor, GradError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, GradError>,
{
    let eval = |t: Tensor| -> Result<f64, GradError> {
        let tape = Tape::new();
        let x = tape.constant(t);
        Ok(f(&tape, x)?.value().item())
    };
    let mut out = Tensor::zeros(x.shape());
    for k in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[k] += h;
        let mut minus = x.clone();
        minus.data_mut()[k] -= h;
        out.data_mut()[k] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(out)
}

/// Largest per-coordinate [`relative_error`] between the tape gradient of
/// `f` at `x` and central differences with step `h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, GradError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, GradError>,
{
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = f(&tape, xv)?;
    let analytic = tape.backward(loss)?.get_or_zeros(xv);
    let numeric = finite_diff_grad(&f, x, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Result of [`directional_derivatives`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Directional {
    pub analytic: f64,
    pub numeric: f64,
    /// Both stencil points took the same branch in every piecewise op, so
    /// the difference quotient does not straddle a kink.
    pub smooth: bool,
}

impl Directional {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Tape and central-difference directional derivatives of `f` at `inputs`
/// along `dirs`. Suits functions of many parameters where a per-coordinate
/// check is too slow.
pub fn directional_derivatives<F>(f: F, inputs: &[Tensor], dirs: &[Tensor], h: f64) -> Result<Directional, GradError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, GradError>,
{
    if inputs.len() != dirs.len() {
        return Err(GradError::shape("directional_derivatives", &[inputs.len()], &[dirs.len()]));
    }
    for (x, d) in inputs.iter().zip(dirs) {
        if x.shape() != d.shape() {
            return Err(GradError::shape("directional_derivatives", x.shape(), d.shape()));
        }
    }
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let grads = tape.backward(f(&tape, &vars)?)?;
    let analytic = vars
        .iter()
        .zip(dirs)
        .map(|(&v, d)| grads.get_or_zeros(v).data().iter().zip(d.data()).map(|(g, u)| g * u).sum::<f64>())
        .sum();
    let eval = |sign: f64| -> Result<(f64, u64), GradError> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .zip(dirs)
            .map(|(x, d)| tape.constant(x.zip_map(d, |a, u| a + sign * h * u)))
            .collect();
        let y = f(&tape, &vars)?.value().item();
        Ok((y, tape.branch_signature()))
    };
    let ((plus, sp), (minus, sm)) = (eval(1.0)?, eval(-1.0)?);
    Ok(Directional {
        analytic,
        numeric: (plus - minus) / (2.0 * h),
        smooth: sp == sm,
    })
}
