//! Adam with optional per-parameter gradient clipping and weight decay,
//! either coupled (added to the gradient) or decoupled (AdamW).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: Option<f64>,
    pub weight_decay: Option<f64>,
    pub decoupled: bool,
}

impl AdamConfig {
    pub const DEFAULT_CLIP_NORM: f64 = 10.0;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

    pub fn adam(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
            weight_decay: None,
            decoupled: false,
        }
    }

    pub fn clipped(lr: f64, clip_norm: f64) -> Self {
        AdamConfig {
            clip_norm: Some(clip_norm),
            ..Self::adam(lr)
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay: Some(weight_decay),
            decoupled: true,
            ..Self::adam(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        let ok = self.lr > 0.0
            && unit(self.beta1)
            && unit(self.beta2)
            && self.epsilon > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0)
            && self.weight_decay.is_none_or(|w| w >= 0.0);
        if !ok {
            return Err(Error::contract(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Step counter and moment estimates, one pair of buffers per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// `g` unchanged if `‖g‖₂ ≤ clip_norm`, else rescaled to norm `clip_norm`.
pub fn clip_gradient(g: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= clip_norm {
        g.to_vec()
    } else {
        let s = clip_norm / norm;
        g.iter().map(|x| x * s).collect()
    }
}

/// Adam over a fixed list of leaves.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    params: Vec<Tensor<T>>,
    state: AdamState,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        if params.iter().any(|p| !p.requires_grad() || !p.is_leaf()) {
            return Err(Error::contract("optimizers only update gradient-requiring leaves"));
        }
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(Adam {
            config,
            params,
            state: AdamState {
                step_count: 0,
                m: zeros.clone(),
                v: zeros,
            },
        })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.state.step_count
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn load_state(&mut self, state: AdamState) -> Result<()> {
        let shapes_ok = state.m.len() == self.params.len()
            && state.v.len() == self.params.len()
            && self
                .params
                .iter()
                .zip(state.m.iter().zip(&state.v))
                .all(|(p, (m, v))| m.len() == p.numel() && v.len() == p.numel());
        if !shapes_ok {
            return Err(Error::contract("optimizer state does not match its parameters"));
        }
        self.state = state;
        Ok(())
    }

    /// Steps using the gradients accumulated on the parameters; a parameter
    /// without a gradient is treated as having a zero gradient.
    pub fn step(&mut self) -> Result<()> {
        let grads: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|p| match p.grad_ref().as_ref() {
                Some(g) => g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
                None => vec![0.0; p.numel()],
            })
            .collect();
        self.step_with(&grads)
    }

    /// Steps using explicit gradients aligned with the parameter list.
    pub fn step_with(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::dim("adam_step", &[self.params.len()], &[grads.len()]));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if g.len() != p.numel() {
                return Err(Error::dim("adam_step", p.shape(), &[g.len()]));
            }
            if g.iter().any(|v| v.is_nan()) {
                return Err(Error::contract("NaN gradient passed to optimizer"));
            }
        }

        let c = self.config;
        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let wd = c.weight_decay.unwrap_or(0.0);

        for (i, (p, g)) in self.params.iter().zip(grads).enumerate() {
            let mut g = match c.clip_norm {
                Some(clip) => clip_gradient(g, clip),
                None => g.clone(),
            };
            let mut data = p.data_mut();
            if wd != 0.0 && !c.decoupled {
                g.iter_mut()
                    .zip(data.iter())
                    .for_each(|(gj, pj)| *gj += wd * pj.to_f64().unwrap_or(f64::NAN));
            }
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.epsilon);
                let mut x = data[j].to_f64().unwrap_or(f64::NAN) - update;
                if c.decoupled && wd != 0.0 {
                    x *= 1.0 - c.lr * wd;
                }
                data[j] = T::lit(x);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor<f64> {
        Tensor::param(v.to_vec(), &[v.len()]).unwrap()
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_gradient(&[3.0, 4.0], 10.0), vec![3.0, 4.0]);
        assert_eq!(clip_gradient(&[3.0, 4.0], 5.0), vec![3.0, 4.0]);
        let c = clip_gradient(&[3.0, 4.0], 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = param(&[1.0, -2.0]);
        let mut opt = Adam::new(vec![p.clone()], AdamConfig::adam(0.01)).unwrap();
        opt.step_with(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn decoupled_decay_on_zero_gradient() {
        let p = param(&[1.0, -2.0, 0.5]);
        let mut opt = Adam::new(vec![p.clone()], AdamConfig::adamw(0.005, 0.01)).unwrap();
        opt.step_with(&[vec![0.0; 3]]).unwrap();
        let s = 1.0 - 0.005 * 0.01;
        assert_eq!(p.to_vec(), vec![1.0 * s, -2.0 * s, 0.5 * s]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let p = param(&[0.0, 0.0, 0.0]);
        let mut opt = Adam::new(vec![p.clone()], AdamConfig::adam(0.01)).unwrap();
        opt.step_with(&[vec![0.3, -7.0, 1e-3]]).unwrap();
        for (x, want) in p.to_vec().iter().zip([-0.01, 0.01, -0.01]) {
            assert!((x - want).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn adamw_without_decay_is_adam() {
        let grads = [vec![0.3, -1.0], vec![2.0, 0.1], vec![-0.4, 0.4]];
        let a = param(&[1.0, 2.0]);
        let b = param(&[1.0, 2.0]);
        let mut oa = Adam::new(vec![a.clone()], AdamConfig::adam(0.02)).unwrap();
        let mut ob = Adam::new(vec![b.clone()], AdamConfig::adamw(0.02, 0.0)).unwrap();
        for g in &grads {
            oa.step_with(std::slice::from_ref(g)).unwrap();
            ob.step_with(std::slice::from_ref(g)).unwrap();
        }
        assert_eq!(a.to_vec(), b.to_vec());
        assert_eq!(oa.step_count(), 3);
    }

    #[test]
    fn coupled_decay_enters_moments() {
        let p = param(&[2.0]);
        let cfg = AdamConfig {
            weight_decay: Some(0.5),
            ..AdamConfig::adam(0.1)
        };
        let mut opt = Adam::new(vec![p.clone()], cfg).unwrap();
        opt.step_with(&[vec![0.0]]).unwrap();
        // effective gradient 1.0 > 0, so the first step is −lr
        assert!((p.to_vec()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_is_per_parameter() {
        let a = param(&[0.0, 0.0]);
        let b = param(&[0.0]);
        let mut opt = Adam::new(vec![a, b], AdamConfig::clipped(0.1, 1.0)).unwrap();
        opt.step_with(&[vec![30.0, 40.0], vec![0.5]]).unwrap();
        let m = &opt.state().m;
        assert!((m[0][0] - 0.1 * 0.6).abs() < 1e-12 && (m[0][1] - 0.1 * 0.8).abs() < 1e-12);
        assert!((m[1][0] - 0.1 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let p = param(&[0.0, 0.0]);
        let mut opt = Adam::new(vec![p.clone()], AdamConfig::adam(0.1)).unwrap();
        assert!(matches!(opt.step_with(&[vec![0.0]]), Err(Error::Dimension { .. })));
        assert!(matches!(opt.step_with(&[vec![f64::NAN, 0.0]]), Err(Error::Contract(_))));
        assert_eq!(opt.step_count(), 0);
        assert_eq!(p.to_vec(), vec![0.0, 0.0]);
        assert!(Adam::new(vec![Tensor::<f64>::zeros(&[2])], AdamConfig::adam(0.1)).is_err());
        assert!(Adam::new(vec![p], AdamConfig::adam(-1.0)).is_err());
    }

    #[test]
    fn step_reads_accumulated_gradients() {
        let p = param(&[1.0, 1.0]);
        p.mul(&p).unwrap().sum().backward().unwrap();
        let mut opt = Adam::new(vec![p.clone()], AdamConfig::adam(0.1)).unwrap();
        opt.step().unwrap();
        assert!(p.to_vec().iter().all(|&x| (x - 0.9).abs() < 1e-6));
        opt.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn state_round_trip() {
        let p = param(&[1.0]);
        let mut opt = Adam::new(vec![p.clone()], AdamConfig::adam(0.1)).unwrap();
        opt.step_with(&[vec![1.0]]).unwrap();
        let saved = opt.state().clone();
        let q = param(&[1.0]);
        let mut other = Adam::new(vec![q], AdamConfig::adam(0.1)).unwrap();
        other.load_state(saved.clone()).unwrap();
        assert_eq!(other.state(), &saved);
        assert!(other.load_state(AdamState { step_count: 0, m: vec![], v: vec![] }).is_err());
    }

    proptest::proptest! {
        #[test]
        fn clipped_norm_is_bounded(
            g in proptest::collection::vec(-1e6f64..1e6, 1..20),
            clip in 1e-3f64..100.0,
        ) {
            let c = clip_gradient(&g, clip);
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            proptest::prop_assert!(n <= clip + 1e-6);
        }

        #[test]
        fn first_update_direction_is_scale_free(
            g in proptest::collection::vec(-10.0f64..10.0, 1..8),
            k in 0.01f64..100.0,
        ) {
            let run = |scale: f64| {
                let p = param(&vec![0.0; g.len()]);
                let mut opt = Adam::new(vec![p.clone()], AdamConfig::adam(0.01)).unwrap();
                opt.step_with(&[g.iter().map(|x| x * scale).collect()]).unwrap();
                p.to_vec().iter().map(|x| x.partial_cmp(&0.0)).collect::<Vec<_>>()
            };
            proptest::prop_assert_eq!(run(1.0), run(k));
        }
    }
}
