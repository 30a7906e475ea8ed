//! Small dense-vector helpers shared by the embedding-space code paths.
//!
//! Everything here operates on `&[f64]` slices; callers own the storage.

use crate::error::Error;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns the unit-norm copy of `v`. Errors on zero (or near-zero) norm.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>, Error> {
    let n = norm(v);
    if n < 1e-12 {
        return Err(Error::Numeric("cannot normalize a zero vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity, in [-1, 1] for nonzero inputs.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine distance `1 - cosine`, in [0, 2].
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_unit_norm() {
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert!((norm(&v) - 1.0).abs() < 1e-12);
        assert!((v[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn normalize_zero_vector_errors() {
        assert!(normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_bounds() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-12);
    }
}
