//! Finite-difference gradient oracles.

/// Magnitudes below this are treated as this value when forming a relative
/// error, so entries whose true gradient is ~0 are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// Two-point central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for
/// every coordinate.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Five-point central stencil, fourth-order accurate:
/// `(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h`.
pub fn five_point_difference(x: &[f64], h: f64, f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let indices: Vec<usize> = (0..x.len()).collect();
    five_point_at(x, &indices, h, f)
}

/// Five-point stencil evaluated only at `indices`.
pub fn five_point_at(
    x: &[f64],
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            let mut at = |d: f64| {
                probe[i] = orig + d;
                f(&probe)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            probe[i] = orig;
            (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_polynomials() {
        let x = [0.3, -1.2];
        let f = |v: &[f64]| v[0].powi(3) + 2.0 * v[0] * v[1];
        let exact = [3.0 * 0.09 + 2.0 * -1.2, 2.0 * 0.3];
        let two = central_difference(&x, 1e-4, f);
        let five = five_point_difference(&x, 1e-2, f);
        assert!(max_relative_error(&exact, &two) < 1e-7);
        assert!(max_relative_error(&exact, &five) < 1e-12);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
