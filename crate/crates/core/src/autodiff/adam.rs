use super::param::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    steps: u32,
}

/// Adam with bias-corrected moment estimates. Moment buffers and step
/// counts are kept per parameter, so a parameter that is excluded from an
/// update (frozen) does not advance its own bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: Vec::new(),
        }
    }

    /// Applies one update to every parameter in `ids` using its current grad.
    pub fn step(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) {
        let lr = self.cfg.lr;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let eps = self.cfg.eps;
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), || None);
        }
        for &id in ids {
            let param = store.get_mut(id);
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: Tensor::zeros(param.value.shape()),
                v: Tensor::zeros(param.value.shape()),
                steps: 0,
            });
            st.steps += 1;
            let c1 = 1.0 - b1.powi(st.steps as i32);
            let c2 = 1.0 - b2.powi(st.steps as i32);
            let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
            let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
            let (tc1, tc2) = (T::from_f64(c1), T::from_f64(c2));
            let (tlr, teps) = (T::from_f64(lr), T::from_f64(eps));
            let values = param.value.data_mut();
            let grads = param.grad.data();
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = tb1 * m[i] + ob1 * g;
                v[i] = tb2 * v[i] + ob2 * g * g;
                let m_hat = m[i] / tc1;
                let v_hat = v[i] / tc2;
                values[i] = values[i] - tlr * m_hat / (v_hat.sqrt() + teps);
            }
        }
    }

    /// First and second moment buffers of a parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.state
            .get(id.index())
            .and_then(|s| s.as_ref())
            .map(|s| (&s.m, &s.v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(value)).unwrap();
        (store, id)
    }

    #[test]
    fn three_steps_constant_gradient_match_hand_sequence() {
        let (mut store, id) = one_param(0.5);
        let mut adam = Adam::new(AdamConfig::default());
        // Hand-rolled reference with g = 1.
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 1e-3f64, 1e-8f64);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=3 {
            store.get_mut(id).grad = Tensor::scalar(1.0);
            adam.step(&mut store, &[id]);
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            assert!((store.value(id).data()[0] - w).abs() < 1e-12, "step {t}");
        }
        // With a constant gradient every bias-corrected step is ~lr.
        assert!((0.5 - w - 3.0 * lr).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameter_unchanged() {
        let (mut store, id) = one_param(2.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[id]);
        assert_eq!(store.value(id).data()[0], 2.0);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let (mut store, id) = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        store.get_mut(id).grad = Tensor::scalar(1.0);
        adam.step(&mut store, &[id]);
        let (m1, v1) = {
            let (m, v) = adam.moments(id).unwrap();
            (m.data()[0], v.data()[0])
        };
        store.get_mut(id).grad = Tensor::scalar(0.0);
        adam.step(&mut store, &[id]);
        let (m, v) = adam.moments(id).unwrap();
        assert!((m.data()[0] - 0.9 * m1).abs() < 1e-15);
        assert!((v.data()[0] - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn parameters_outside_the_update_set_are_untouched() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::scalar(1.0)).unwrap();
        let b = store.insert("b", Tensor::scalar(1.0)).unwrap();
        store.get_mut(a).grad = Tensor::scalar(1.0);
        store.get_mut(b).grad = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[a]);
        assert!(store.value(a).data()[0] < 1.0);
        assert_eq!(store.value(b).data()[0], 1.0);
        assert!(adam.moments(b).is_none());
    }
}
