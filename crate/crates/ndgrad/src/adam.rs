use crate::{GradError, NdArray, Result, Scalar};

/// Adam hyperparameters. `lr_decay` multiplies the learning rate once per
/// step before the update is applied.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, lr_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter and the
/// decayed learning rate.
pub struct AdamState<T: Scalar> {
    config: AdamConfig,
    first: Vec<NdArray<T>>,
    second: Vec<NdArray<T>>,
    step: u64,
    lr: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, param_shapes: &[Vec<usize>]) -> Result<Self> {
        if config.lr <= 0.0 {
            return Err(GradError::InvalidParameter {
                op: "adam",
                message: format!("learning rate must be strictly positive, got {}", config.lr),
            });
        }
        Ok(AdamState {
            config,
            first: param_shapes.iter().map(|s| NdArray::zeros(s)).collect(),
            second: param_shapes.iter().map(|s| NdArray::zeros(s)).collect(),
            step: 0,
            lr: config.lr,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// One Adam update with bias correction. `params`, `grads` and `names`
    /// are parallel; moment shapes must match parameter shapes.
    pub fn step(
        &mut self,
        params: &mut [NdArray<T>],
        grads: &[NdArray<T>],
        names: &[String],
    ) -> Result<()> {
        debug_assert_eq!(params.len(), self.first.len());
        debug_assert_eq!(params.len(), grads.len());
        for (i, g) in grads.iter().enumerate() {
            if g.has_nan() {
                return Err(GradError::Numeric {
                    op: "adam_step",
                    message: format!("NaN gradient for parameter '{}'", names[i]),
                });
            }
        }
        self.step += 1;
        self.lr *= self.config.lr_decay;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.config.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.config.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.config.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                md[j] = b1 * md[j] + (one - b1) * gj;
                vd[j] = b2 * vd[j] + (one - b2) * gj * gj;
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                pd[j] = pd[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut state = AdamState::<f64>::new(AdamConfig::new(0.1, 1.0), &[vec![2]]).unwrap();
        let mut params = vec![NdArray::from_vec(&[2], vec![1.0, -2.0]).unwrap()];
        let grads = vec![NdArray::zeros(&[2])];
        state.step(&mut params, &grads, &names(1)).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // with zero moments and constant gradient g, the bias-corrected first
        // step is lr * g / (|g| + eps) ~= lr * sign(g)
        let cfg = AdamConfig::new(0.01, 1.0);
        let mut state = AdamState::<f64>::new(cfg, &[vec![2]]).unwrap();
        let mut params = vec![NdArray::zeros(&[2])];
        let grads = vec![NdArray::from_vec(&[2], vec![3.0, -0.5]).unwrap()];
        state.step(&mut params, &grads, &names(1)).unwrap();
        assert!((params[0].data()[0] + 0.01).abs() < 1e-6);
        assert!((params[0].data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn descends_scalar_quadratic() {
        // f(p) = (p - 3)^2, 100 steps at lr 0.1 lands within 0.5 of 3
        let cfg = AdamConfig::new(0.1, 1.0);
        let mut state = AdamState::<f64>::new(cfg, &[vec![1]]).unwrap();
        let mut params = vec![NdArray::zeros(&[1])];
        for _ in 0..100 {
            let p = params[0].data()[0];
            let grad = NdArray::from_vec(&[1], vec![2.0 * (p - 3.0)]).unwrap();
            state.step(&mut params, &[grad], &names(1)).unwrap();
        }
        assert!((params[0].data()[0] - 3.0).abs() < 0.5);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut state = AdamState::<f64>::new(AdamConfig::new(0.1, 1.0), &[vec![1]]).unwrap();
        let mut params = vec![NdArray::zeros(&[1])];
        let grads = vec![NdArray::from_vec(&[1], vec![f64::NAN]).unwrap()];
        let err = state
            .step(&mut params, &grads, &["encoder.w".to_string()])
            .unwrap_err();
        match err {
            GradError::Numeric { message, .. } => assert!(message.contains("encoder.w")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        assert!(AdamState::<f64>::new(AdamConfig::new(0.0, 1.0), &[]).is_err());
    }

    #[test]
    fn learning_rate_decays_each_step() {
        let mut state = AdamState::<f64>::new(AdamConfig::new(1.0, 0.5), &[vec![1]]).unwrap();
        let mut params = vec![NdArray::zeros(&[1])];
        let grads = vec![NdArray::from_vec(&[1], vec![1.0]).unwrap()];
        state.step(&mut params, &grads, &names(1)).unwrap();
        assert!((state.learning_rate() - 0.5).abs() < 1e-12);
        state.step(&mut params, &grads, &names(1)).unwrap();
        assert!((state.learning_rate() - 0.25).abs() < 1e-12);
    }
}
