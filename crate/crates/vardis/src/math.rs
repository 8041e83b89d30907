//! Small numeric helpers shared by the model, sampling, and objective code.

use ndarray::{Array1, ArrayView1};

/// Numerically stable softmax.
pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e: Array1<f64> = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

/// Numerically stable log-softmax.
pub fn log_softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = z.fold(0.0, |a, &b| a + (b - m).exp()).ln() + m;
    z.mapv(|v| v - lse)
}

pub fn logsumexp(z: ArrayView1<f64>) -> f64 {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    z.fold(0.0, |a, &b| a + (b - m).exp()).ln() + m
}

/// KL(p ‖ q) over a full distribution pair, in nats. Terms with p_i = 0
/// contribute zero by convention.
pub fn kl_divergence(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi.ln() - qi.ln()) } else { 0.0 })
        .sum()
}
