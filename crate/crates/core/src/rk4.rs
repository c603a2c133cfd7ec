//! Classical fixed-step fourth-order Runge–Kutta.

use crate::error::Result;

/// One RK4 step of `y' = f(t, y)` from `t` with signed step `h`.
pub fn rk4_step<F>(f: &mut F, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let n = y.len();
    let k1 = f(t, y)?;
    let mut tmp: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
    let k2 = f(t + 0.5 * h, &tmp)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    let k3 = f(t + 0.5 * h, &tmp)?;
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    let k4 = f(t + h, &tmp)?;
    Ok((0..n)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Integrates from `t0` to `t1` in `steps` equal steps, calling `observe`
/// after every step (and once at the start) with `(step_index, t, y)`.
pub fn rk4_integrate<F, O>(mut f: F, t0: f64, t1: f64, y0: &[f64], steps: usize, mut observe: O) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    O: FnMut(usize, f64, &[f64]) -> Result<()>,
{
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    observe(0, t0, &y)?;
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        y = rk4_step(&mut f, t, &y, h)?;
        let t_next = if k + 1 == steps { t1 } else { t0 + (k + 1) as f64 * h };
        observe(k + 1, t_next, &y)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_growth_fourth_order() {
        let solve = |steps| {
            rk4_integrate(|_, y: &[f64]| Ok(vec![y[0]]), 0.0, 1.0, &[1.0], steps, |_, _, _| Ok(()))
                .unwrap()[0]
        };
        let e = std::f64::consts::E;
        let e1 = (solve(10) - e).abs();
        let e2 = (solve(20) - e).abs();
        assert!(e1 / e2 > 14.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn backward_integration_inverts_forward() {
        let f = |t: f64, y: &[f64]| Ok(vec![t * y[1], -y[0]]);
        let fwd = rk4_integrate(f, 0.0, 1.0, &[1.0, 0.5], 200, |_, _, _| Ok(())).unwrap();
        let back = rk4_integrate(f, 1.0, 0.0, &fwd, 200, |_, _, _| Ok(())).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-9 && (back[1] - 0.5).abs() < 1e-9);
    }
}
