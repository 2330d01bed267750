//! Central finite differences for checking analytic gradients.
//!
//! Piecewise-linear ops (ReLU) make the estimate wrong whenever the step
//! straddles a kink. Elements whose estimates at `h` and `h / 10` disagree are
//! re-estimated at `h / 100`; the number of such elements is reported so a
//! caller can bound it.

#[derive(Debug, Clone)]
pub struct FdEstimate {
    pub gradient: Vec<f64>,
    /// Elements re-estimated with the smaller step.
    pub refined: usize,
}

fn central(x: &mut [f64], i: usize, h: f64, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Gradient of `f` at `x` by central differences with step `h`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> FdEstimate {
    let mut x = x.to_vec();
    let mut refined = 0;
    let gradient = (0..x.len())
        .map(|i| {
            let coarse = central(&mut x, i, h, &mut f);
            let fine = central(&mut x, i, h / 10.0, &mut f);
            let scale = coarse.abs().max(fine.abs()).max(1e-3);
            if (coarse - fine).abs() / scale > 1e-5 {
                refined += 1;
                central(&mut x, i, h / 100.0, &mut f)
            } else {
                coarse
            }
        })
        .collect();
    FdEstimate { gradient, refined }
}

/// `||a - b|| / max(||a||, ||b||)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}
