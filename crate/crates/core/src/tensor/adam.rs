use super::{Param, ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "Adam needs 0 < beta1, beta2 < 1 and epsilon > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Moment estimates, one store per trainable tensor in visitation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    config: AdamConfig,
    state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            state: AdamState {
                step_count: 0,
                first_moment: Vec::new(),
                second_moment: Vec::new(),
            },
        })
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// One bias-corrected Adam update over every trainable tensor of
    /// `stores`, in order. Tensors without a gradient count as zero
    /// gradient. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>], lr: f64) -> Result<()> {
        let mut params: Vec<&mut Param<T>> = stores
            .iter_mut()
            .flat_map(|s| s.entries_mut().iter_mut())
            .filter(|p| p.tensor.requires_grad)
            .collect();
        self.step_params(&mut params, lr)
    }

    pub fn step_params(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        let st = &mut self.state;
        if st.step_count == 0 && st.first_moment.is_empty() {
            st.first_moment = params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
            st.second_moment = st.first_moment.clone();
        }
        let congruent = st.first_moment.len() == params.len()
            && st
                .first_moment
                .iter()
                .zip(params.iter())
                .all(|(m, p)| m.len() == p.tensor.numel());
        if !congruent {
            return Err(Error::shape(
                "adam_step",
                "optimizer state is not congruent with the parameters",
            ));
        }
        for p in params.iter() {
            if let Some(g) = &p.tensor.grad {
                if let Some((index, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: p.name.clone(),
                        index,
                        value: v.as_f64(),
                    });
                }
            }
        }

        st.step_count += 1;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let eps = T::from_f64(self.config.epsilon);
        let lr = T::from_f64(lr);
        let t = st.step_count as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for ((p, m), v) in params
            .iter_mut()
            .zip(st.first_moment.iter_mut())
            .zip(st.second_moment.iter_mut())
        {
            let grad = p
                .tensor
                .grad
                .take()
                .unwrap_or_else(|| vec![T::zero(); m.len()]);
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }
}
