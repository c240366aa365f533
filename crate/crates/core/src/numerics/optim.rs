use indexmap::IndexMap;

use super::scalar::Scalar;

/// AdamW with decoupled weight decay.
///
/// Moment buffers are keyed by parameter name so the same optimizer can
/// drive parameter groups with different effective learning rates (the
/// caller passes the per-group `lr` to [`AdamW::update`]).
pub struct AdamW<S: Scalar> {
    beta1: S,
    beta2: S,
    eps: S,
    weight_decay: S,
    t: i32,
    state: IndexMap<String, Moments<S>>,
}

struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            weight_decay: S::from_f64(weight_decay),
            t: 0,
            state: IndexMap::new(),
        }
    }

    /// Advance the shared step counter (bias correction). Call once per
    /// optimizer step, before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step_count(&self) -> i32 {
        self.t
    }

    /// Apply one AdamW update to `param` in place.
    pub fn update(&mut self, name: &str, param: &mut [S], grad: &[S], lr: f64) {
        assert!(self.t > 0, "call begin_step before update");
        assert_eq!(param.len(), grad.len(), "optim: grad length mismatch for {name}");
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![S::zero(); param.len()],
            v: vec![S::zero(); param.len()],
        });
        assert_eq!(st.m.len(), param.len(), "optim: state shape changed for {name}");
        let lr = S::from_f64(lr);
        let one = S::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for ((p, &g), (m, v)) in param
            .iter_mut()
            .zip(grad)
            .zip(st.m.iter_mut().zip(st.v.iter_mut()))
        {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }
}
