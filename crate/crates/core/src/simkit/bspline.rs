//! Cox-de Boor B-spline basis used for the endogenous trend of the synthetic
//! EHR outcomes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BsplineError {
    #[error("t = {0} outside the knot span [{1}, {2}]")]
    OutOfSpan(f64, f64, f64),
    #[error("knots must be nondecreasing")]
    KnotsNotSorted,
}

/// Values of all basis functions of the given degree at `t`.
///
/// The basis has `knots.len() - degree - 1` functions and partitions unity on
/// the interior of the span. Evaluation at the right endpoint is closed by
/// the usual half-open-interval convention.
pub fn bspline_basis(t: f64, knots: &[f64], degree: usize) -> Result<Vec<f64>, BsplineError> {
    if knots.windows(2).any(|w| w[1] < w[0]) {
        return Err(BsplineError::KnotsNotSorted);
    }
    let n_basis = knots.len().checked_sub(degree + 1).expect("too few knots");
    let (lo, hi) = (knots[degree], knots[knots.len() - degree - 1]);
    if t < lo || t > hi {
        return Err(BsplineError::OutOfSpan(t, lo, hi));
    }
    // Degree-0 seed: indicator of the containing interval.
    let mut b: Vec<f64> = (0..knots.len() - 1)
        .map(|i| {
            let inside = t >= knots[i] && t < knots[i + 1];
            let at_end = t == hi && knots[i] < t && t <= knots[i + 1];
            if inside || at_end {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for d in 1..=degree {
        for i in 0..knots.len() - d - 1 {
            let left_den = knots[i + d] - knots[i];
            let right_den = knots[i + d + 1] - knots[i + 1];
            let left = if left_den > 0.0 { (t - knots[i]) / left_den * b[i] } else { 0.0 };
            let right = if right_den > 0.0 {
                (knots[i + d + 1] - t) / right_den * b[i + 1]
            } else {
                0.0
            };
            b[i] = left + right;
        }
    }
    b.truncate(n_basis);
    Ok(b)
}

/// Open-uniform knot vector over [lo, hi] with the given count of interior
/// segments.
pub fn open_uniform_knots(lo: f64, hi: f64, segments: usize, degree: usize) -> Vec<f64> {
    let mut knots = vec![lo; degree];
    for i in 0..=segments {
        knots.push(lo + (hi - lo) * i as f64 / segments as f64);
    }
    knots.extend(std::iter::repeat(hi).take(degree));
    knots
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degree_zero_is_interval_indicator() {
        let knots = [0.0, 1.0, 2.0, 3.0];
        let b = bspline_basis(1.5, &knots, 0).unwrap();
        assert_eq!(b, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn partition_of_unity_inside_span() {
        let knots = open_uniform_knots(0.0, 10.0, 5, 3);
        for i in 0..100 {
            let t = 10.0 * i as f64 / 99.0;
            let b = bspline_basis(t, &knots, 3).unwrap();
            let s: f64 = b.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "sum {s} at t={t}");
            assert!(b.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn cubic_matches_independent_recursion_at_interior_point() {
        // Uniform knots 0..7, cubic, evaluated at t = 3.4. Independent oracle:
        // direct Cox-de Boor recursion written out long-hand.
        let knots: Vec<f64> = (0..=7).map(|k| k as f64).collect();
        let t = 3.4;
        fn n(i: usize, d: usize, t: f64, knots: &[f64]) -> f64 {
            if d == 0 {
                return if t >= knots[i] && t < knots[i + 1] { 1.0 } else { 0.0 };
            }
            let mut v = 0.0;
            if knots[i + d] > knots[i] {
                v += (t - knots[i]) / (knots[i + d] - knots[i]) * n(i, d - 1, t, knots);
            }
            if knots[i + d + 1] > knots[i + 1] {
                v += (knots[i + d + 1] - t) / (knots[i + d + 1] - knots[i + 1])
                    * n(i + 1, d - 1, t, knots);
            }
            v
        }
        let b = bspline_basis(t, &knots, 3).unwrap();
        for (i, &bv) in b.iter().enumerate() {
            assert!((bv - n(i, 3, t, &knots)).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_span_rejected() {
        let knots = open_uniform_knots(0.0, 1.0, 2, 3);
        assert!(bspline_basis(1.5, &knots, 3).is_err());
        assert!(bspline_basis(-0.1, &knots, 3).is_err());
    }
}
