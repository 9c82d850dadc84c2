use super::tensor::{Scalar, Tensor};

/// Mean negative log-probability of the true class.
pub fn loss_ce<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> f64 {
    let b = probs.batch();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let p = probs.row(r)[y];
            // `max` would swallow a NaN.
            if p.is_nan() {
                f64::NAN
            } else {
                -p.max(T::min_positive_value()).f64().ln()
            }
        })
        .sum();
    total / b as f64
}

/// Mean squared difference over every element.
pub fn loss_l2<T: Scalar>(x_hat: &Tensor<T>, x: &Tensor<T>) -> f64 {
    let sum: f64 = x_hat.data().iter().zip(x.data()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
    sum / x.len() as f64
}

/// Gradient of [`loss_ce`] with respect to the softmax logits.
pub fn ce_logit_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let b = T::of(probs.batch() as f64);
    let d = probs.item_len();
    let mut g: Vec<T> = probs.data().iter().map(|p| *p / b).collect();
    for (r, &y) in labels.iter().enumerate() {
        g[r * d + y] = g[r * d + y] - T::one() / b;
    }
    Tensor::new(probs.shape().to_vec(), g)
}

/// Gradient of [`loss_ce`] with respect to the probabilities.
pub fn ce_prob_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let b = T::of(probs.batch() as f64);
    let d = probs.item_len();
    let mut g = vec![T::zero(); probs.len()];
    for (r, &y) in labels.iter().enumerate() {
        g[r * d + y] = -T::one() / (b * probs.row(r)[y]);
    }
    Tensor::new(probs.shape().to_vec(), g)
}

pub fn l2_grad<T: Scalar>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let scale = T::of(2.0 / x.len() as f64);
    Tensor::new(x_hat.shape().to_vec(), x_hat.data().iter().zip(x.data()).map(|(a, b)| scale * (*a - *b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_binary_cross_entropy_is_ln2() {
        let p = Tensor::new(vec![2, 2], vec![0.5f64; 4]);
        assert!((loss_ce(&p, &[0, 1]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn l2_examples() {
        let x = Tensor::new(vec![1, 4], vec![0.0f32; 4]);
        assert_eq!(loss_l2(&x, &x), 0.0);
        let half = Tensor::new(vec![1, 4], vec![0.5f32; 4]);
        assert_eq!(loss_l2(&half, &x), 0.25);
    }

    #[test]
    fn zero_probability_is_finite_but_large() {
        let p = Tensor::new(vec![1, 2], vec![1.0f32, 0.0]);
        let l = loss_ce(&p, &[1]);
        assert!(l.is_finite() && l > 80.0);
    }

    #[test]
    fn fused_gradient_matches_chain_rule() {
        let p = Tensor::new(vec![1, 3], vec![0.2f64, 0.3, 0.5]);
        let dp = ce_prob_grad(&p, &[1]);
        let dot: f64 = p.data().iter().zip(dp.data()).map(|(a, b)| a * b).sum();
        let chained: Vec<f64> = p.data().iter().zip(dp.data()).map(|(pi, gi)| pi * (gi - dot)).collect();
        let fused = ce_logit_grad(&p, &[1]);
        for (a, b) in chained.iter().zip(fused.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
