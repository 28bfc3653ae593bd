use super::{GradAccum, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = |id: ParamId| vec![T::zero(); store.get(id).numel()];
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradAccum<T>) {
        self.step += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Moment tensors and step counter, for checkpointing.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * store.len() + 1);
        for (id, name, t) in store.iter() {
            out.push((
                format!("adam.m.{name}"),
                Tensor::new(t.shape().to_vec(), self.m[id.0].clone()).expect("shape"),
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor::new(t.shape().to_vec(), self.v[id.0].clone()).expect("shape"),
            ));
        }
        out.push(("adam.step".into(), Tensor::scalar(T::of(self.step as f64))));
        out
    }

    pub fn import(&mut self, store: &ParamStore<T>, lookup: impl Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (id, name, t) in store.iter() {
            for (prefix, slot) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("adam.{prefix}.{name}");
                let v = lookup(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?;
                if v.shape() != t.shape() {
                    return Err(Error::dim("adam state", t.shape(), v.shape()));
                }
                slot[id.0] = v.into_data();
            }
        }
        let step = lookup("adam.step").ok_or_else(|| Error::Format("checkpoint lacks `adam.step`".into()))?;
        self.step = step.data()[0].f64() as u64;
        Ok(())
    }
}
