use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with L2 penalty folded into the gradient.
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam/AdamW moments for a subset of a [`ParamSet`], selected by name.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar = f32> {
    pub kind: OptimizerKind,
    pub hyper: OptimizerHyper,
    pub step_count: u64,
    names: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// State over every parameter for which `select(name)` holds.
    pub fn new(
        kind: OptimizerKind,
        hyper: OptimizerHyper,
        params: &ParamSet<T>,
        select: impl Fn(&str) -> bool,
    ) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in params.iter().filter(|(n, _)| select(n)) {
            names.push(name.to_string());
            m.push(Tensor::zeros(t.shape()));
            v.push(Tensor::zeros(t.shape()));
        }
        OptimizerState { kind, hyper, step_count: 0, names, m, v }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// First and second moments as parameter sets, for checkpointing.
    pub fn moments(&self) -> (ParamSet<T>, ParamSet<T>) {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (i, n) in self.names.iter().enumerate() {
            m.insert(n.clone(), self.m[i].clone()).expect("unique names");
            v.insert(n.clone(), self.v[i].clone()).expect("unique names");
        }
        (m, v)
    }

    pub fn restore_moments(&mut self, m: &ParamSet<T>, v: &ParamSet<T>, step_count: u64) -> Result<()> {
        for (i, n) in self.names.iter().enumerate() {
            let mt = m.get(n).ok_or_else(|| NnError::UnknownParam(n.clone()))?;
            let vt = v.get(n).ok_or_else(|| NnError::UnknownParam(n.clone()))?;
            if mt.shape() != self.m[i].shape() || vt.shape() != self.v[i].shape() {
                return Err(NnError::ShapeMismatch {
                    op: "restore_moments",
                    shapes: vec![mt.shape().to_vec(), self.m[i].shape().to_vec()],
                });
            }
            self.m[i] = mt.clone();
            self.v[i] = vt.clone();
        }
        self.step_count = step_count;
        Ok(())
    }

    /// Applies one update to the selected parameters.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        for name in &self.names {
            let g = grads.get(name).ok_or_else(|| NnError::MissingGradient(name.clone()))?;
            let p = params.get(name).ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "optimizer_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
        }
        self.step_count += 1;
        let h = self.hyper;
        let t = self.step_count as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
        let (lr, eps, wd) = (T::lit(h.lr), T::lit(h.eps), T::lit(h.weight_decay));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        for (i, name) in self.names.iter().enumerate() {
            let g = grads.get(name).expect("checked above").data();
            let p = params.get_mut(name).expect("checked above").data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let mut gj = g[j];
                match self.kind {
                    OptimizerKind::Adam => gj += wd * p[j],
                    OptimizerKind::AdamW => p[j] -= lr * wd * p[j],
                }
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `target <- tau * target + (1 - tau) * online`, elementwise.
pub fn polyak_update<T: Scalar>(target: &mut ParamSet<T>, online: &ParamSet<T>, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) || tau.is_nan() {
        return Err(NnError::InvalidTau(tau));
    }
    target.check_compatible(online)?;
    let keep = T::lit(tau);
    let mix = T::lit(1.0 - tau);
    for ((_, t), (_, o)) in target.iter_mut().zip(online.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
            *a = keep * *a + mix * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParamSet<f64> {
        let mut s = ParamSet::new();
        s.insert("p", Tensor::scalar(p)).unwrap();
        s
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = single(0.3);
        let g = single(0.0);
        let mut st = OptimizerState::new(OptimizerKind::Adam, OptimizerHyper::default(), &p, |_| true);
        st.step(&mut p, &g).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 0.3);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step() {
        let mut p = single(1.0);
        let g = single(1.0);
        let hyper = OptimizerHyper { lr: 0.1, ..Default::default() };
        let mut st = OptimizerState::new(OptimizerKind::Adam, hyper, &p, |_| true);
        st.step(&mut p, &g).unwrap();
        // mhat = 1, vhat = 1 -> p = 1 - 0.1 * 1 / (1 + 1e-8)
        assert!((p.get("p").unwrap().item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut p = single(1.0);
        let g = single(0.0);
        let hyper = OptimizerHyper { lr: 0.1, weight_decay: 0.05, ..Default::default() };
        let mut st = OptimizerState::new(OptimizerKind::AdamW, hyper, &p, |_| true);
        st.step(&mut p, &g).unwrap();
        assert!((p.get("p").unwrap().item() - 0.995).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_error() {
        let mut p = single(1.0);
        let g = ParamSet::<f64>::new();
        let mut st = OptimizerState::new(OptimizerKind::Adam, OptimizerHyper::default(), &p, |_| true);
        assert!(matches!(st.step(&mut p, &g), Err(NnError::MissingGradient(_))));
    }

    #[test]
    fn optimizer_is_deterministic() {
        let run = || {
            let mut p = single(0.7);
            let mut st = OptimizerState::new(OptimizerKind::AdamW, OptimizerHyper::default(), &p, |_| true);
            for i in 0..10 {
                st.step(&mut p, &single(i as f64 * 0.1 - 0.3)).unwrap();
            }
            p.get("p").unwrap().item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn selected_subset_only() {
        let mut p = ParamSet::<f64>::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        p.insert("logz.w", Tensor::scalar(1.0)).unwrap();
        let mut g = p.clone();
        g.scale(1.0);
        let mut st = OptimizerState::new(OptimizerKind::Adam, OptimizerHyper { lr: 0.1, ..Default::default() }, &p, |n| {
            n.starts_with("logz.")
        });
        st.step(&mut p, &g).unwrap();
        assert_eq!(p.get("a").unwrap().item(), 1.0);
        assert!(p.get("logz.w").unwrap().item() < 1.0);
    }

    #[test]
    fn polyak_edges() {
        let online = single(1.0);
        let mut t = single(0.0);
        polyak_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.get("p").unwrap().item(), 1.0);

        let mut t = single(0.0);
        polyak_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.get("p").unwrap().item(), 0.0);

        let mut t = single(0.0);
        polyak_update(&mut t, &online, 0.99).unwrap();
        assert!((t.get("p").unwrap().item() - 0.01).abs() < 1e-15);

        assert!(matches!(polyak_update(&mut t, &online, 1.5), Err(NnError::InvalidTau(_))));
        assert!(matches!(polyak_update(&mut t, &online, -0.1), Err(NnError::InvalidTau(_))));
    }

    #[test]
    fn polyak_converges_to_online() {
        let online = single(2.5);
        let mut t = single(-4.0);
        for _ in 0..5000 {
            polyak_update(&mut t, &online, 0.99).unwrap();
        }
        assert!((t.get("p").unwrap().item() - 2.5).abs() < 1e-12);
    }
}
