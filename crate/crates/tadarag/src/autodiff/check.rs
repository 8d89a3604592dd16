//! Central finite-difference gradient checking.
//!
//! The numerical gradient perturbs one value at a time and re-runs the
//! caller's forward closure, so it is independent of the backward pass it
//! verifies. Comparisons use a norm-relative error: per-component relative
//! error is meaningless for near-zero components at f32 precision.

/// Central finite differences of `f` at `x`: (f(x+h) - f(x-h)) / 2h.
pub fn finite_difference_grad<F: FnMut(&[f32]) -> f32>(
    mut f: F,
    x: &[f32],
    h: f32,
) -> Vec<f32> {
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe) as f64;
        probe[i] = orig - h;
        let down = f(&probe) as f64;
        probe[i] = orig;
        grad[i] = ((up - down) / (2.0 * h as f64)) as f32;
    }
    grad
}

/// ||a - b||2 / max(||a||2, ||b||2); zero when both vectors vanish.
pub fn relative_error(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x as f64 - y as f64).powi(2);
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    let denom = na.sqrt().max(nb.sqrt());
    if denom < 1e-12 {
        return 0.0;
    }
    (diff.sqrt() / denom) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_recovers_quadratic_gradient() {
        // f(x) = sum(x^2), df/dx = 2x
        let x = [0.5f32, -1.25, 2.0];
        let g = finite_difference_grad(
            |v| v.iter().map(|a| a * a).sum::<f32>(),
            &x,
            1e-3,
        );
        let expect = [1.0f32, -2.5, 4.0];
        assert!(relative_error(&g, &expect) < 1e-4);
    }

    #[test]
    fn relative_error_handles_zero_vectors() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!(relative_error(&[1.0, 0.0], &[0.0, 0.0]) > 0.99);
    }
}
