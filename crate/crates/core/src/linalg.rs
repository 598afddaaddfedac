//! Small dense-vector helpers shared by the numeric modules.

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Convex combination `Σ w_i p_i`.
pub fn combine(weights: &[f64], points: &[Vec<f64>]) -> Vec<f64> {
    let dim = points.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (w, p) in weights.iter().zip(points) {
        for (o, x) in out.iter_mut().zip(p) {
            *o += w * x;
        }
    }
    out
}

pub fn mean(points: &[Vec<f64>]) -> Vec<f64> {
    let w = vec![1.0 / points.len() as f64; points.len()];
    combine(&w, points)
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub fn clamp_into(a: &[f64], low: &[f64], high: &[f64]) -> (Vec<f64>, bool) {
    let mut clamped = false;
    let out = a
        .iter()
        .zip(low.iter().zip(high))
        .map(|(&x, (&lo, &hi))| {
            let c = x.clamp(lo, hi);
            clamped |= c != x;
            c
        })
        .collect();
    (out, clamped)
}
