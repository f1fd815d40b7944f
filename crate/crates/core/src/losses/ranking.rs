/// Value of a score-level loss and its gradient w.r.t. each input score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub grad_first: Vec<f64>,
    pub grad_second: Vec<f64>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow or `log 0`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Mean of `-log σ(ŷ⁺ - ŷ⁻)` over the batch.
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> ScoreLoss {
    assert_eq!(pos.len(), neg.len(), "bpr score vectors differ in length");
    let n = pos.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad_first = Vec::with_capacity(pos.len());
    let mut grad_second = Vec::with_capacity(pos.len());
    for (&p, &q) in pos.iter().zip(neg) {
        let diff = p - q;
        value -= log_sigmoid(diff);
        let g = -sigmoid(-diff) / n;
        grad_first.push(g);
        grad_second.push(-g);
    }
    ScoreLoss {
        value: value / n,
        grad_first,
        grad_second,
    }
}

/// Binary cross-entropy between tempered pairwise preferences of teacher and student.
///
/// Inputs are the per-tuple score differences `ε = ŷ_{i,j1} - ŷ_{i,j2}`;
/// the gradient is w.r.t. the student differences (teacher is constant).
/// Returns `(value, ∂value/∂ε^s)`, averaged over the batch.
pub fn prediction_kd_loss(teacher_eps: &[f64], student_eps: &[f64], tau: f64) -> (f64, Vec<f64>) {
    assert_eq!(teacher_eps.len(), student_eps.len(), "kd score vectors differ in length");
    let n = teacher_eps.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(student_eps.len());
    for (&t, &s) in teacher_eps.iter().zip(student_eps) {
        let p = sigmoid(t / tau);
        let z = s / tau;
        value -= p * log_sigmoid(z) + (1.0 - p) * log_sigmoid(-z);
        grad.push((sigmoid(z) - p) / tau / n);
    }
    (value / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], k: usize) -> f64 {
        let h = 1e-6;
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[k] += h;
        b[k] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    #[test]
    fn bpr_equal_scores_is_ln2() {
        let l = bpr_loss(&[0.3, -1.0], &[0.3, -1.0]);
        assert!((l.value - LN_2).abs() < 1e-15);
    }

    #[test]
    fn bpr_saturates() {
        let l = bpr_loss(&[20.0], &[0.0]);
        assert!((l.value - 2.0611536e-9).abs() < 1e-15);
        let l = bpr_loss(&[-800.0], &[0.0]);
        assert!((l.value - 800.0).abs() < 1e-9);
    }

    #[test]
    fn bpr_gradient_matches_finite_differences() {
        let pos = [0.4, -1.3, 2.0, 0.0];
        let neg = [0.1, 0.7, -0.5, 3.0];
        let l = bpr_loss(&pos, &neg);
        for k in 0..4 {
            let fd = finite_diff(|p| bpr_loss(p, &neg).value, &pos, k);
            assert!((fd - l.grad_first[k]).abs() < 1e-6);
            let fd = finite_diff(|q| bpr_loss(&pos, q).value, &neg, k);
            assert!((fd - l.grad_second[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn bpr_shift_invariant() {
        let a = bpr_loss(&[1.0, 2.0], &[0.5, 3.0]);
        let b = bpr_loss(&[11.0, 12.0], &[10.5, 13.0]);
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn kd_zero_differences_is_ln2() {
        let (v, g) = prediction_kd_loss(&[0.0], &[0.0], 1.0);
        assert!((v - LN_2).abs() < 1e-15);
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn kd_direct_formula() {
        let (v, _) = prediction_kd_loss(&[2.0], &[-2.0], 1.0);
        let p = 1.0 / (1.0 + (-2.0f64).exp());
        let q = 1.0 / (1.0 + 2.0f64.exp());
        let expect = -(p * q.ln() + (1.0 - p) * (1.0 - q).ln());
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn kd_minimum_is_binary_entropy_at_teacher() {
        for &(t, tau) in &[(1.5, 1.0), (-3.0, 0.5), (0.2, 3.0)] {
            let (v, g) = prediction_kd_loss(&[t], &[t], tau);
            let p = sigmoid(t / tau);
            let entropy = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
            assert!((v - entropy).abs() < 1e-12);
            assert!(g[0].abs() < 1e-15);
            // grid scan: no student difference does better
            for k in -200..=200 {
                let s = t + k as f64 * 0.05;
                let (vs, _) = prediction_kd_loss(&[t], &[s], tau);
                assert!(vs >= v - 1e-15);
            }
        }
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let t = [0.3, -2.0, 4.0];
        let s = [1.0, 0.5, -1.0];
        let (_, g) = prediction_kd_loss(&t, &s, 0.7);
        for k in 0..3 {
            let fd = finite_diff(|x| prediction_kd_loss(&t, x, 0.7).0, &s, k);
            assert!((fd - g[k]).abs() < 1e-7);
        }
    }
}
