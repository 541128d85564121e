//! Embedding-level losses and their gradients.
//!
//! Inputs are plain vectors: unit embeddings or difference vectors between
//! them. Every cosine uses `sqrt(Σ v² + ε)` in place of `‖v‖`, so a zero
//! direction evaluates to a cosine of zero (loss one) instead of failing.

use crate::error::{shape_err, Error, Result};

pub const COSINE_EPS: f64 = 1e-8;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn guarded_norm(a: &[f64]) -> f64 {
    (dot(a, a) + COSINE_EPS).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(shape_err(format!("embedding dims differ: {} vs {}", a.len(), b.len())))
    }
}

pub fn guarded_cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (guarded_norm(a) * guarded_norm(b))
}

/// `1 − cos(delta, reference)`, in [0, 2].
pub fn direction_loss(delta: &[f64], reference: &[f64]) -> Result<f64> {
    same_dim(delta, reference)?;
    Ok(1.0 - guarded_cosine(delta, reference))
}

/// [`direction_loss`] and its gradient with respect to `delta`.
pub fn direction_loss_grad(delta: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_dim(delta, reference)?;
    let na = guarded_norm(delta);
    let nb = guarded_norm(reference);
    let ab = dot(delta, reference);
    let cos = ab / (na * nb);
    let grad = delta
        .iter()
        .zip(reference)
        .map(|(&a, &b)| -(b / (na * nb) - ab * a / (na * na * na * nb)))
        .collect();
    Ok((1.0 - cos, grad))
}

/// Sum over ordered pairs `i ≠ j` of the squared change in pairwise inner
/// products between the source and adapted embedding sets. Returns the
/// gradient with respect to each adapted embedding.
pub fn indomain_angle(adapted: &[&[f64]], source: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = adapted.len();
    if n != source.len() {
        return Err(shape_err(format!(
            "batch sizes differ: {n} adapted vs {} source",
            source.len()
        )));
    }
    if n < 2 {
        return Err(Error::Input("indomain-angle loss needs at least two samples".into()));
    }
    let dim = adapted[0].len();
    if adapted.iter().chain(source).any(|e| e.len() != dim) {
        return Err(shape_err("embeddings in a batch must share one dimension"));
    }
    let mut loss = 0.0;
    let mut grads = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let r = dot(adapted[i], adapted[j]) - dot(source[i], source[j]);
            loss += r * r;
            // each ordered pair contributes 2r·A_j to ∂/∂A_i and 2r·A_i to ∂/∂A_j
            for (g, &a) in grads[i].iter_mut().zip(adapted[j]) {
                *g += 2.0 * r * a;
            }
            for (g, &a) in grads[j].iter_mut().zip(adapted[i]) {
                *g += 2.0 * r * a;
            }
        }
    }
    Ok((loss, grads))
}

/// `‖d − 1‖²` and its gradient.
pub fn domain_norm(d: &[f64]) -> (f64, Vec<f64>) {
    let loss = d.iter().map(|v| (v - 1.0) * (v - 1.0)).sum();
    let grad = d.iter().map(|v| 2.0 * (v - 1.0)).collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_geometry() {
        let r = [0.6, 0.8, 0.0];
        let par = [1.2, 1.6, 0.0];
        let orth = [0.0, 0.0, 1.0];
        let anti = [-0.6, -0.8, 0.0];
        assert!(direction_loss(&par, &r).unwrap().abs() < 1e-6);
        assert!((direction_loss(&orth, &r).unwrap() - 1.0).abs() < 1e-12);
        assert!((direction_loss(&anti, &r).unwrap() - 2.0).abs() < 1e-6);
        assert!((direction_loss(&[0.0; 3], &r).unwrap() - 1.0).abs() < 1e-12);
        assert!(direction_loss(&[1.0], &r).is_err());
    }

    #[test]
    fn indomain_hand_case() {
        // source cos 0.5, adapted cos 0.3 -> 2 * 0.2^2
        let s0 = [1.0, 0.0];
        let s1 = [0.5, (0.75f64).sqrt()];
        let a0 = [1.0, 0.0];
        let a1 = [0.3, (1.0 - 0.09f64).sqrt()];
        let (loss, _) = indomain_angle(&[&a0, &a1], &[&s0, &s1]).unwrap();
        assert!((loss - 0.08).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn indomain_identity_is_exactly_zero() {
        let e = [[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]];
        let b: Vec<&[f64]> = e.iter().map(|v| v.as_slice()).collect();
        let (loss, grads) = indomain_angle(&b, &b).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn indomain_needs_two() {
        let e = [1.0, 0.0];
        assert!(matches!(indomain_angle(&[&e], &[&e]), Err(Error::Input(_))));
    }

    #[test]
    fn domain_norm_cases() {
        assert_eq!(domain_norm(&[1.0; 5]).0, 0.0);
        assert_eq!(domain_norm(&[1.0, 2.0, 1.0]).0, 1.0);
    }
}
