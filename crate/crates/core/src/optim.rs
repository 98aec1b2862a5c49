use crate::error::{Error, Result};
use crate::nets::ParamSet;
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are kept per parameter tensor in the
/// order of the [`ParamSet`] it was created for.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Invalid(
                "optimizer state does not match parameters".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((_, p), m), v) in params
            .entries_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }

    /// First and second moments as tensors shaped like the parameters.
    pub fn moments(&self, params: &ParamSet) -> Result<Vec<(Tensor, Tensor)>> {
        params
            .entries()
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|((_, p), (m, v))| {
                Ok((
                    Tensor::new(p.shape().to_vec(), m.clone())?,
                    Tensor::new(p.shape().to_vec(), v.clone())?,
                ))
            })
            .collect()
    }

    pub fn restore(&mut self, t: u64, moments: Vec<(Tensor, Tensor)>) -> Result<()> {
        if moments.len() != self.m.len() {
            return Err(Error::CorruptCheckpoint(
                "optimizer moment count mismatch".into(),
            ));
        }
        for (i, (m, v)) in moments.into_iter().enumerate() {
            if m.numel() != self.m[i].len() || v.numel() != self.v[i].len() {
                return Err(Error::CorruptCheckpoint(
                    "optimizer moment shape mismatch".into(),
                ));
            }
            self.m[i] = m.into_data();
            self.v[i] = v.into_data();
        }
        self.t = t;
        Ok(())
    }
}
