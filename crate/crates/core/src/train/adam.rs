//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Learning-rate multiplier over a run: linear warmup, then an optional
/// decay to zero at the final step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup: u64,
    pub decay: Decay,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    #[default]
    None,
    Linear,
    Cosine,
}

impl std::str::FromStr for Decay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Decay::None),
            "linear" => Ok(Decay::Linear),
            "cosine" => Ok(Decay::Cosine),
            _ => Err(Error::Config(format!("unknown decay `{s}` (none, linear, cosine)"))),
        }
    }
}

impl Schedule {
    /// Multiplier for update `step` (0-based) of `total`.
    pub fn factor(&self, step: u64, total: u64) -> f64 {
        let warm = if self.warmup > 0 && step < self.warmup {
            (step + 1) as f64 / self.warmup as f64
        } else {
            1.0
        };
        let span = total.saturating_sub(self.warmup).max(1) as f64;
        let t = (step.saturating_sub(self.warmup) as f64 / span).min(1.0);
        let decay = match self.decay {
            Decay::None => 1.0,
            Decay::Linear => 1.0 - t,
            Decay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
        };
        warm * decay
    }
}

/// First/second moments mirroring a parameter store.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        OptimState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter. A parameter without a gradient is a
    /// contract violation; nothing is modified in that case.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            match grads.get(id) {
                None => {
                    return Err(Error::contract(format!("missing gradient for `{}`", store.name(id))));
                }
                Some(g) if g.shape() != store.get(id).shape() => {
                    return Err(Error::Shape {
                        op: "adam step",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        for id in store.ids() {
            let g = grads.get(id).expect("checked above").data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] = p[k] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;

    fn one_param(v: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n = v.len();
        s.add("p", Tensor::new(vec![n], v).unwrap()).unwrap();
        s
    }

    fn grads(v: Vec<f64>) -> Gradients<f64> {
        let mut g = Gradients::empty(1);
        let n = v.len();
        g.set(ParamId(0), Some(Tensor::new(vec![n], v).unwrap()));
        g
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = one_param(vec![1.5, -2.0]);
        let mut st = OptimState::new(&s, AdamConfig::with_lr(0.1));
        st.step(&mut s, &grads(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[1.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g0 in [3.0, -0.01, 250.0] {
            let mut s = one_param(vec![0.0]);
            let mut st = OptimState::new(&s, AdamConfig::with_lr(0.01));
            st.step(&mut s, &grads(vec![g0])).unwrap();
            let moved = s.get(ParamId(0)).data()[0];
            assert!((moved + 0.01 * g0.signum()).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let c = [0.7, -1.3, 0.05];
        let mut s = one_param(vec![0.0; 3]);
        let mut st = OptimState::new(&s, AdamConfig::with_lr(0.05));
        for _ in 0..200 {
            let p = s.get(ParamId(0)).data().to_vec();
            let g = p.iter().zip(c).map(|(p, c)| 2.0 * (p - c)).collect();
            st.step(&mut s, &grads(g)).unwrap();
        }
        for (p, c) in s.get(ParamId(0)).data().iter().zip(c) {
            assert!((p - c).abs() < 1e-3, "{p} vs {c}");
        }
    }

    #[test]
    fn missing_gradient_names_tensor() {
        let mut s = one_param(vec![1.0]);
        s.add("q", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut st = OptimState::new(&s, AdamConfig::default());
        let err = st.step(&mut s, &grads(vec![1.0])).unwrap_err().to_string();
        assert!(err.contains("`q`"), "{err}");
        assert_eq!(st.step, 0);
    }

    #[test]
    fn gradient_scale_keeps_direction() {
        let g = vec![0.3, -2.0, 1e-3];
        let mut a = one_param(vec![0.0; 3]);
        let mut b = one_param(vec![0.0; 3]);
        let mut sa = OptimState::new(&a, AdamConfig::default());
        let mut sb = OptimState::new(&b, AdamConfig::default());
        sa.step(&mut a, &grads(g.clone())).unwrap();
        sb.step(&mut b, &grads(g.iter().map(|x| x * 40.0).collect())).unwrap();
        for (x, y) in a.get(ParamId(0)).data().iter().zip(b.get(ParamId(0)).data()) {
            assert_eq!(x.signum(), y.signum());
        }
    }

    #[test]
    fn schedule_shapes() {
        let s = Schedule { warmup: 4, decay: Decay::Linear };
        assert_eq!(s.factor(0, 10), 0.25);
        assert_eq!(s.factor(3, 10), 1.0);
        assert_eq!(s.factor(4, 10), 1.0);
        assert!((s.factor(7, 10) - 0.5).abs() < 1e-12);
        assert_eq!(Schedule::default().factor(99, 10), 1.0);
        let c = Schedule { warmup: 0, decay: Decay::Cosine };
        assert!((c.factor(5, 10) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = grads(vec![3.0, 4.0]);
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
