use crate::encoder::AdapterSet;
use crate::error::{Error, Result};

/// Decoupled weight decay Adam over an [`AdapterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: AdapterSet,
    second: AdapterSet,
}

impl AdamW {
    pub fn new(params: &AdapterSet, lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &AdapterSet {
        &self.first
    }

    pub fn second_moment(&self) -> &AdapterSet {
        &self.second
    }

    pub fn step(&mut self, params: &mut AdapterSet, grads: &AdapterSet) -> Result<()> {
        let shapes = |s: &AdapterSet| s.tensors().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        if shapes(params) != shapes(grads) || shapes(params) != shapes(&self.first) {
            return Err(Error::Data("optimizer state does not match the adapter shapes".into()));
        }
        if grads.tensors().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "adamw" });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        let moments = self.first.tensors_mut().into_iter().zip(self.second.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(moments) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g as f64;
                let m1 = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
                let v1 = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
                *m = m1 as f32;
                *v = v1 as f32;
                let update = (m1 / bc1) / ((v1 / bc2).sqrt() + self.eps);
                *p = (*p as f64 * decay - self.lr * update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> AdapterSet {
        let mut s = AdapterSet::zeros(1, 2, 1);
        s.layers[0].attn.down.data_mut()[0] = v;
        s
    }

    #[test]
    fn two_steps_by_hand() {
        let mut p = one(0.5);
        let mut opt = AdamW::new(&p, 0.1);
        opt.step(&mut p, &one(2.0)).unwrap();
        // m = 0.2, v = 0.004; m̂ = 2, v̂ = 4 → update 2 / (2 + 1e-8)
        let want1 = 0.5 * (1.0 - 0.1 * 0.01) - 0.1 * (2.0 / (2.0 + 1e-8));
        let got = p.layers[0].attn.down.data()[0] as f64;
        assert!((got - want1).abs() < 1e-7);

        opt.step(&mut p, &one(-1.0)).unwrap();
        let m = 0.9 * 0.2 - 0.1;
        let v = 0.999 * 0.004 + 0.001 * 1.0;
        let mhat = m / (1.0 - 0.9f64.powi(2));
        let vhat = v / (1.0 - 0.999f64.powi(2));
        let want2 = want1 as f32 as f64 * (1.0 - 0.001) - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        let got = p.layers[0].attn.down.data()[0] as f64;
        assert!((got - want2).abs() < 1e-6, "{got} {want2}");
        assert_eq!(opt.steps_taken(), 2);
        // untouched entries stay at zero: no gradient and nothing to decay
        assert_eq!(p.layers[0].attn.down.data()[1], 0.0);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = one(0.5);
        let mut opt = AdamW::new(&p, 0.1);
        assert!(opt.step(&mut p, &one(f32::NAN)).is_err());
        assert!(opt.step(&mut p, &AdapterSet::zeros(2, 2, 1)).is_err());
        assert_eq!(opt.steps_taken(), 0);
    }
}
