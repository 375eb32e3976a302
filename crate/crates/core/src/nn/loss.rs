//! Cross-entropy and InfoNCE losses with their gradients.

use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Row-wise softmax of a `[B, C]` tensor.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Mean cross-entropy of `[B, C]` logits against class indices, plus the
/// gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>), NnError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(NnError::Shape(format!(
            "cross-entropy expects [{}, C] logits, got {s:?}",
            labels.len()
        )));
    }
    let (b, c) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(NnError::Shape(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = softmax(logits);
    let inv_b = T::one() / T::of(b as f64);
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - row[y];
        grad.data_mut()[i * c + y] -= T::one();
    }
    for v in grad.data_mut() {
        *v *= inv_b;
    }
    Ok((loss * inv_b, grad))
}

#[derive(Debug, Clone)]
pub struct InfoNceOutput<T> {
    /// Mean of `per_anchor`.
    pub loss: T,
    pub per_anchor: Vec<T>,
    /// Gradient w.r.t. the raw (unnormalized) projections.
    pub grad: Tensor<T>,
    /// Fraction of anchors whose positive is among the `k` most similar
    /// candidates (ties counted in the positive's favour).
    pub top_k: f64,
}

/// Index of the positive partner of view `i` when views are laid out as
/// pairs `(0, 1), (2, 3), ...`.
pub fn positive_of(i: usize) -> usize {
    i ^ 1
}

/// InfoNCE (NT-Xent) over `2N` projections where rows `2i` and `2i + 1` are
/// two views of the same sample.
///
/// Similarities are cosine; for anchor `i` with positive `j` the loss is
/// `-log(exp(s_ij / t) / sum_{k != i} exp(s_ik / t))`, averaged over anchors.
pub fn info_nce<T: Scalar>(z: &Tensor<T>, temperature: f64, k: usize) -> Result<InfoNceOutput<T>, NnError> {
    let s = z.shape();
    if s.len() != 2 || s[0] < 4 || !s[0].is_multiple_of(2) {
        return Err(NnError::Shape(format!(
            "InfoNCE needs an even number (>= 4) of projections, got {s:?}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(NnError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (n, d) = (s[0], s[1]);
    let tau = T::of(temperature);

    let mut norms = Vec::with_capacity(n);
    let mut unit = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row = z.row(i);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(NnError::ZeroNorm(i));
        }
        norms.push(norm);
        for (u, &v) in unit.data_mut()[i * d..(i + 1) * d].iter_mut().zip(row) {
            *u = v / norm;
        }
    }

    let mut sim = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i..n {
            let v: T = unit.row(i).iter().zip(unit.row(j)).map(|(&a, &b)| a * b).sum();
            sim[i * n + j] = v;
            sim[j * n + i] = v;
        }
    }

    // dL/ds_ik accumulated in `gs` (not symmetric).
    let inv_n = T::one() / T::of(n as f64);
    let mut gs = vec![T::zero(); n * n];
    let mut per_anchor = Vec::with_capacity(n);
    let mut hits = 0usize;
    for i in 0..n {
        let j = positive_of(i);
        let row = &sim[i * n..(i + 1) * n];
        let m = (0..n)
            .filter(|&c| c != i)
            .map(|c| row[c] / tau)
            .fold(T::neg_infinity(), T::max);
        let z_sum: T = (0..n).filter(|&c| c != i).map(|c| (row[c] / tau - m).exp()).sum();
        let lse = m + z_sum.ln();
        per_anchor.push(lse - row[j] / tau);
        for c in (0..n).filter(|&c| c != i) {
            let p = (row[c] / tau - m).exp() / z_sum;
            let target = if c == j { T::one() } else { T::zero() };
            gs[i * n + c] = (p - target) / tau * inv_n;
        }
        let better = (0..n).filter(|&c| c != i && c != j && row[c] > row[j]).count();
        if better < k {
            hits += 1;
        }
    }

    // s_ik = u_i . u_k, so dL/du_i = sum_k (G_ik + G_ki) u_k.
    let mut gu = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for c in 0..n {
            let w = gs[i * n + c] + gs[c * n + i];
            if w == T::zero() {
                continue;
            }
            let uc = &unit.data()[c * d..(c + 1) * d];
            for (g, &u) in gu.data_mut()[i * d..(i + 1) * d].iter_mut().zip(uc) {
                *g += w * u;
            }
        }
    }
    // Through normalization: dz = (I - u u^T) du / |z|.
    let mut grad = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let u = unit.row(i);
        let g = gu.row(i);
        let dot: T = u.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((out, &gv), &uv) in grad.data_mut()[i * d..(i + 1) * d].iter_mut().zip(g).zip(u) {
            *out = (gv - dot * uv) / norms[i];
        }
    }

    let loss = per_anchor.iter().copied().sum::<T>() * inv_n;
    Ok(InfoNceOutput {
        loss,
        per_anchor,
        grad,
        top_k: hits as f64 / n as f64,
    })
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f64>::zeros(&[3, 5]);
        let (loss, _) = cross_entropy(&logits, &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        let p = softmax(&Tensor::new(vec![1, 3], vec![1.0f32, 2.0, 3.0]).unwrap());
        assert!((p.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_projections_give_log3() {
        let z = Tensor::new(vec![4, 2], vec![1.0f64, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let out = info_nce(&z, 0.07, 5).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
        assert_eq!(out.top_k, 1.0);
    }

    #[test]
    fn zero_norm_is_rejected() {
        let z = Tensor::new(vec![4, 2], vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(info_nce(&z, 0.1, 5), Err(NnError::ZeroNorm(1))));
        let odd = Tensor::<f64>::zeros(&[3, 2]);
        assert!(info_nce(&odd, 0.1, 5).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }
}
