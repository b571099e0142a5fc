//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use super::tensor::{Scalar, Tensor};

/// Ordered collection of named parameter arrays. Iteration order is the
/// insertion order, which keeps checkpoints and updates deterministic.
#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &mut self.tensors[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment accumulators, one pair per parameter array.
pub struct AdamState<T: Scalar> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
    cfg: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let m = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let v = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { m, v, step: 0, cfg }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn moments(&self, i: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m[i], &self.v[i])
    }

    /// Bias-corrected Adam update with optional decoupled weight decay.
    /// `grads` must align with the store's parameter order; `None` entries
    /// are treated as zero gradient (the moments still decay).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient count does not match parameter count");
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(self.cfg.weight_decay);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(t));
        let zero = Tensor::zeros(&[0]);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = match &grads[i] {
                Some(g) => {
                    assert_eq!(g.shape(), p.shape(), "gradient shape mismatch for parameter {i}");
                    g
                }
                None => &zero,
            };
            let gd = g.data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = if gd.is_empty() { T::zero() } else { gd[j] };
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut upd = mhat / (vhat.sqrt() + eps);
                if self.cfg.weight_decay != 0.0 {
                    upd = upd + wd * pd[j];
                }
                pd[j] = pd[j] - lr_t * upd;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::new(&[2], vec![1.5, -0.5]));
        let mut st = AdamState::new(&params, AdamConfig::default());
        st.step(&mut params, &[Some(Tensor::zeros(&[2]))], 1e-3);
        assert_eq!(params.get("w").data(), &[1.5, -0.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // With fresh moments, bias correction gives update ~ lr * sign(g).
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::new(&[2], vec![0.0, 0.0]));
        let mut st = AdamState::new(&params, AdamConfig::default());
        let g = Tensor::new(&[2], vec![3.0, -0.2]);
        st.step(&mut params, &[Some(g)], 0.01);
        let w = params.get("w").data();
        assert!((w[0] + 0.01).abs() < 1e-7, "w0 = {}", w[0]);
        assert!((w[1] - 0.01).abs() < 1e-7, "w1 = {}", w[1]);
    }

    #[test]
    fn moments_follow_ema_recurrence() {
        // Two identical steps with gradient g: hand-evaluated EMA values.
        let g = 0.7;
        let cfg = AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 };
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::new(&[1], vec![0.0]));
        let mut st = AdamState::new(&params, cfg);
        for _ in 0..2 {
            st.step(&mut params, &[Some(Tensor::new(&[1], vec![g]))], 1e-3);
        }
        assert_eq!(st.step_count(), 2);
        let (m, v) = st.moments(0);
        let m_expect = 0.9 * (0.1 * g) + 0.1 * g;
        let v_expect = 0.99 * (0.01 * g * g) + 0.01 * g * g;
        assert!((m.data()[0] - m_expect).abs() < 1e-12);
        assert!((v.data()[0] - v_expect).abs() < 1e-12);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_params() {
        let cfg = AdamConfig { weight_decay: 0.1, ..Default::default() };
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::new(&[1], vec![2.0]));
        let mut st = AdamState::new(&params, cfg);
        st.step(&mut params, &[Some(Tensor::zeros(&[1]))], 0.5);
        // zero gradient, so the only movement is -lr * wd * p = -0.1
        assert!((params.get("w").data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_is_rejected() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::new(&[2], vec![0.0, 0.0]));
        let mut st = AdamState::new(&params, AdamConfig::default());
        st.step(&mut params, &[Some(Tensor::zeros(&[3]))], 1e-3);
    }
}
