//! Minimal differentiable building blocks: affine maps, activations, losses,
//! a reverse-mode tape, and the Adam optimizer.

pub mod adam;
pub mod checkpoint;
pub mod init;
pub mod tape;

use crate::error::{FkdError, Result};
use crate::mat::Mat;

/// Probability floor used inside every log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Affine map `X -> X W + b`.
#[derive(Debug, Clone)]
pub struct DenseMap {
    pub w: Mat,
    pub b: Option<Mat>,
}

impl DenseMap {
    pub fn new(w: Mat, b: Option<Mat>) -> Self {
        if let Some(b) = &b {
            assert_eq!(b.shape(), (1, w.cols()), "bias must be 1 x out_dim");
        }
        DenseMap { w, b }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }
}

/// `X W + b` broadcast over rows.
pub fn dense_forward(m: &DenseMap, x: &Mat) -> Result<Mat> {
    if x.cols() != m.in_dim() {
        return Err(FkdError::ShapeMismatch {
            expected: format!("n x {}", m.in_dim()),
            got: format!("{} x {}", x.rows(), x.cols()),
        });
    }
    let mut out = x.matmul(&m.w);
    if let Some(b) = &m.b {
        for i in 0..out.rows() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(b.row(0)) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn masked_count(mask: &[bool]) -> Result<f64> {
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(FkdError::EmptyMask);
    }
    Ok(m as f64)
}

/// Mean over masked rows of −log p[i, y_i], probabilities floored at 1e-12.
pub fn cross_entropy(probs: &Mat, y: &[usize], mask: &[bool]) -> Result<f64> {
    assert_eq!(probs.rows(), y.len());
    assert_eq!(probs.rows(), mask.len());
    let m = masked_count(mask)?;
    let mut total = 0.0;
    for i in 0..probs.rows() {
        if mask[i] {
            total -= probs.get(i, y[i]).max(PROB_FLOOR).ln();
        }
    }
    Ok(total / m)
}

/// Mean over masked rows of Σ_k t·(log t − log s), argument order
/// KL(teacher ‖ student); zero-probability teacher entries contribute zero.
pub fn kl_divergence(teacher: &Mat, student: &Mat, mask: &[bool]) -> Result<f64> {
    assert_eq!(teacher.shape(), student.shape());
    assert_eq!(teacher.rows(), mask.len());
    let m = masked_count(mask)?;
    let mut total = 0.0;
    for i in 0..teacher.rows() {
        if !mask[i] {
            continue;
        }
        for k in 0..teacher.cols() {
            let t = teacher.get(i, k);
            if t > 0.0 {
                let s = student.get(i, k).max(PROB_FLOOR);
                total += t * (t.max(PROB_FLOOR).ln() - s.ln());
            }
        }
    }
    Ok(total / m)
}

/// Accuracy of row-wise argmax predictions over the masked rows.
pub fn masked_accuracy(probs: &Mat, y: &[usize], mask: &[bool]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..probs.rows() {
        if !mask[i] {
            continue;
        }
        total += 1;
        let row = probs.row(i);
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best == y[i] {
            correct += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_and_scalar_case() {
        let m = DenseMap::new(Mat::identity(3), Some(Mat::zeros(1, 3)));
        let x = Mat::from_fn(2, 3, |i, j| (i + j) as f64);
        assert_eq!(dense_forward(&m, &x).unwrap().data(), x.data());

        let m1 = DenseMap::new(
            Mat::from_vec(1, 1, vec![3.0]),
            Some(Mat::from_vec(1, 1, vec![1.0])),
        );
        let x1 = Mat::from_vec(1, 1, vec![2.0]);
        assert_eq!(dense_forward(&m1, &x1).unwrap().get(0, 0), 7.0);
    }

    #[test]
    fn dense_rejects_shape_mismatch() {
        let m = DenseMap::new(Mat::identity(3), None);
        let x = Mat::zeros(2, 4);
        assert!(matches!(
            dense_forward(&m, &x),
            Err(FkdError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(relu(-2.0), 0.0);
        assert_eq!(relu(2.0), 2.0);

        let sm = softmax_rows(&Mat::from_vec(1, 3, vec![0.0, 0.0, 0.0]));
        for k in 0..3 {
            assert!((sm.get(0, k) - 1.0 / 3.0).abs() < 1e-15);
        }

        // Stability: huge logits do not overflow.
        let sm = softmax_rows(&Mat::from_vec(1, 2, vec![1000.0, 0.0]));
        assert!(sm.is_finite());
        assert!((sm.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(sm.get(0, 1) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitudes() {
        let m = Mat::from_fn(5, 4, |i, j| ((i * j) as f64).sin() * 1e3);
        let sm = softmax_rows(&m);
        for i in 0..5 {
            let s: f64 = sm.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Mat::from_vec(1, 2, vec![0.5, 0.5]);
        let ce = cross_entropy(&uniform, &[0], &[true]).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);

        let onehot = Mat::from_vec(1, 2, vec![1.0, 0.0]);
        assert!(cross_entropy(&onehot, &[0], &[true]).unwrap() <= 1e-10);

        let p = Mat::from_vec(1, 2, vec![0.9, 0.1]);
        let ce = cross_entropy(&p, &[1], &[true]).unwrap();
        assert!((ce - 2.302585).abs() < 1e-5);

        assert!(matches!(
            cross_entropy(&p, &[1], &[false]),
            Err(FkdError::EmptyMask)
        ));
    }

    #[test]
    fn kl_values_and_nonnegativity() {
        let t = Mat::from_vec(1, 2, vec![0.3, 0.7]);
        assert!(kl_divergence(&t, &t, &[true]).unwrap().abs() < 1e-12);

        let t = Mat::from_vec(1, 2, vec![1.0, 0.0]);
        let s = Mat::from_vec(1, 2, vec![0.5, 0.5]);
        let kl = kl_divergence(&t, &s, &[true]).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);

        let mut rng = crate::rng::substream(5, "kl");
        for _ in 0..100 {
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                use rand::Rng;
                let a: f64 = rng.gen_range(0.01..1.0);
                let b: f64 = rng.gen_range(0.01..1.0);
                let c: f64 = rng.gen_range(0.01..1.0);
                let s = a + b + c;
                Mat::from_vec(1, 3, vec![a / s, b / s, c / s])
            };
            let t = draw(&mut rng);
            let s = draw(&mut rng);
            assert!(kl_divergence(&t, &s, &[true]).unwrap() >= -1e-12);
        }
    }
}
