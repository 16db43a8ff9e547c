//! Contrastive and classification losses with analytic gradients.

use crate::error::{Error, Result};

use super::layers::dot;

/// Loss value plus its gradient with respect to each input vector.
#[derive(Debug, Clone)]
pub struct NtXent {
    pub loss: f64,
    pub grad_a: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
}

/// Normalized temperature-scaled cross entropy over paired views.
///
/// Row `i` of `view_a` and row `i` of `view_b` are positives; every other of
/// the `2N` vectors is a negative. Similarities are cosine. For each anchor
/// the denominator sums `exp(sim / temperature)` over the `2N - 1` other
/// vectors. The result is the mean over all `2N` anchors.
pub fn nt_xent(view_a: &[Vec<f64>], view_b: &[Vec<f64>], temperature: f64) -> Result<NtXent> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let n = view_a.len();
    if n == 0 || view_b.len() != n {
        return Err(Error::Dimension { expected: n.max(1), got: view_b.len() });
    }
    let dim = view_a[0].len();
    let z: Vec<&Vec<f64>> = view_a.iter().chain(view_b).collect();
    if let Some(bad) = z.iter().find(|v| v.len() != dim) {
        return Err(Error::Dimension { expected: dim, got: bad.len() });
    }
    let m = 2 * n;
    let norms: Vec<f64> = z.iter().map(|v| dot(v, v).sqrt()).collect();
    if norms.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::Data("zero-norm or non-finite embedding in contrastive loss".into()));
    }
    let u: Vec<Vec<f64>> = z.iter().zip(&norms).map(|(v, r)| v.iter().map(|x| x / r).collect()).collect();

    let mut sim = vec![0.0; m * m];
    for i in 0..m {
        for k in i..m {
            let s = dot(&u[i], &u[k]);
            sim[i * m + k] = s;
            sim[k * m + i] = s;
        }
    }
    let pos = |i: usize| if i < n { i + n } else { i - n };

    // coef[i][k] = dL/dsim_ik contribution from anchor i
    let mut coef = vec![0.0; m * m];
    let mut loss = 0.0;
    for i in 0..m {
        let row = &sim[i * m..(i + 1) * m];
        let mx = row.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &s)| s / temperature).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (k, &s) in row.iter().enumerate() {
            if k != i {
                denom += (s / temperature - mx).exp();
            }
        }
        let lse = mx + denom.ln();
        loss += lse - row[pos(i)] / temperature;
        for (k, &s) in row.iter().enumerate() {
            if k == i {
                continue;
            }
            let p = (s / temperature - lse).exp();
            let target = if k == pos(i) { 1.0 } else { 0.0 };
            coef[i * m + k] = (p - target) / temperature;
        }
    }
    let scale = 1.0 / m as f64;
    loss *= scale;

    // dL/du_i = scale * sum_k (coef_ik + coef_ki) u_k ; then through normalisation
    let mut grads = Vec::with_capacity(m);
    for i in 0..m {
        let mut du = vec![0.0; dim];
        for k in 0..m {
            if k == i {
                continue;
            }
            let c = scale * (coef[i * m + k] + coef[k * m + i]);
            if c != 0.0 {
                super::layers::axpy(c, &u[k], &mut du);
            }
        }
        let proj = dot(&u[i], &du);
        grads.push(du.iter().zip(&u[i]).map(|(d, ui)| (d - ui * proj) / norms[i]).collect::<Vec<f64>>());
    }
    let grad_b = grads.split_off(n);
    Ok(NtXent { loss, grad_a: grads, grad_b })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax cross entropy for one sample. Returns `(loss, dL/dlogits)`.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln();
    let mut grad: Vec<f64> = logits.iter().map(|&l| (l - lse).exp()).collect();
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}
