use crate::element::Element;
use crate::param::Parameter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update, in place. Gradients are zeroed afterwards.
/// Frozen parameters only have their gradients cleared.
pub fn adam_step<'a, T: Element>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    lr: f64,
    settings: AdamSettings,
) {
    let AdamSettings { beta1, beta2, eps } = settings;
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let one = T::one();
    for p in params {
        if !p.trainable {
            p.zero_grad();
            continue;
        }
        p.step += 1;
        let t = p.step as i32;
        let c1 = T::from_f64(1.0 - beta1.powi(t));
        let c2 = T::from_f64(1.0 - beta2.powi(t));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = p.grad[i];
            let m = b1 * p.first_moment[i] + (one - b1) * g;
            let v = b2 * p.second_moment[i] + (one - b2) * g * g;
            p.first_moment[i] = m;
            p.second_moment[i] = v;
            values[i] = values[i] - lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(x: f64) -> Parameter<f64> {
        Parameter::new("x", Tensor::scalar(x))
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Parameter::<f32>::new("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        adam_step([&mut p], 0.01, AdamSettings::default());
        assert_eq!(p.value.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Parameter::<f32>::new("w", Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        p.grad = vec![3.0, -0.25, 1e-3];
        adam_step([&mut p], 0.1, AdamSettings::default());
        for (v, s) in p.value.data().iter().zip([-1.0f32, 1.0, -1.0]) {
            assert!((v - (1.0 + 0.1 * s)).abs() < 1e-5, "{v}");
        }
        assert!(p.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn three_steps_on_quadratic_match_reference_trace() {
        // f(x) = (x - 3)^2, grad = 2(x - 3); reference Adam written out longhand.
        let (lr, b1, b2, eps) = (0.05f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
            trace.push(x);
        }
        let mut p = scalar_param(0.5);
        for expected in trace {
            let x = p.value.data()[0];
            p.grad = vec![2.0 * (x - 3.0)];
            adam_step([&mut p], lr, AdamSettings::default());
            assert!((p.value.data()[0] - expected).abs() < 1e-6);
        }
        assert_eq!(p.step, 3);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = scalar_param(1.0);
        p.trainable = false;
        p.grad = vec![4.0];
        adam_step([&mut p], 0.1, AdamSettings::default());
        assert_eq!(p.value.data(), &[1.0]);
        assert_eq!(p.grad, vec![0.0]);
        assert_eq!(p.step, 0);
    }
}
