//! Golden-section search for one-dimensional minimisation.

/// `(√5 + 1) / 2`
pub const PHI: f64 = 1.618_033_988_749_895;
/// `2 − φ`, the fraction of the bracket cut off per step.
const RESP: f64 = 2.0 - PHI;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub fx: f64,
    pub evaluations: usize,
}

/// Minimises `f` on `[a, b]` until the bracket is narrower than `xtol`.
///
/// Returns the best point visited. The bracket ends themselves are not
/// evaluated; callers that need `f(x) <= f(a), f(b)` compare explicitly.
pub fn minimize(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64, xtol: f64) -> Minimum {
    debug_assert!(a <= b);
    let xtol = xtol.max(f64::EPSILON * (a.abs() + b.abs()));
    let mut x1 = a + RESP * (b - a);
    let mut x2 = b - RESP * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut evaluations = 2;
    while b - a > xtol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + RESP * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = b - RESP * (b - a);
            f2 = f(x2);
        }
        evaluations += 1;
    }
    let (x, fx) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    Minimum { x, fx, evaluations }
}

/// Like [`minimize`] but also evaluates both bracket ends and returns the
/// lowest of the three candidates, so the result never loses to an endpoint.
pub fn minimize_bracketed(
    mut f: impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    xtol: f64,
) -> Minimum {
    let mut best = minimize(&mut f, a, b, xtol);
    for end in [a, b] {
        let fe = f(end);
        best.evaluations += 1;
        if fe < best.fx {
            best.x = end;
            best.fx = fe;
        }
    }
    best
}

/// Golden-section search over the integers `lo..=hi`.
///
/// Each index is evaluated at most once. The final bracket of at most four
/// indices is scanned exhaustively; ties resolve to the smaller index.
pub fn minimize_index(mut f: impl FnMut(usize) -> f64, lo: usize, hi: usize) -> (usize, f64) {
    assert!(lo <= hi);
    let mut memo: Vec<Option<f64>> = vec![None; hi - lo + 1];
    let mut eval = |i: usize| -> f64 { *memo[i - lo].get_or_insert_with(|| f(i)) };
    let (mut a, mut b) = (lo, hi);
    while b - a > 3 {
        let d = ((RESP * (b - a) as f64) as usize).max(1);
        let (x1, x2) = (a + d, b - d);
        if eval(x1) <= eval(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let mut best = (a, eval(a));
    for i in a + 1..=b {
        let fi = eval(i);
        if fi < best.1 {
            best = (i, fi);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parabola_minimum_within_tolerance() {
        let m = minimize(|x| (x - 0.3217).powi(2) + 2.0, 0.0, 1.0, 1e-6);
        assert!((m.x - 0.3217).abs() < 1e-4 * 1.0, "{m:?}");
        assert!((m.fx - 2.0).abs() < 1e-10);
    }

    #[test]
    fn bracketed_prefers_endpoint_for_monotone() {
        let m = minimize_bracketed(|x| x, 1.0, 4.0, 1e-6);
        assert_eq!(m.x, 1.0);
        let m = minimize_bracketed(|x| -x, 1.0, 4.0, 1e-6);
        assert_eq!(m.x, 4.0);
    }

    #[test]
    fn index_search_finds_unimodal_minimum() {
        for target in [0usize, 1, 7, 50, 98, 99] {
            let (i, _) = minimize_index(|i| (i as f64 - target as f64).abs(), 0, 99);
            assert_eq!(i, target);
        }
        let (i, _) = minimize_index(|i| (i as f64 - 3.0).powi(2), 3, 3);
        assert_eq!(i, 3);
    }

    #[test]
    fn index_search_evaluates_each_point_once() {
        let mut calls = std::collections::HashMap::new();
        minimize_index(
            |i| {
                *calls.entry(i).or_insert(0) += 1;
                ((i as f64) - 61.0).powi(2)
            },
            0,
            159,
        );
        assert!(calls.values().all(|&c| c == 1));
        assert!(calls.len() < 20, "{}", calls.len());
    }
}
