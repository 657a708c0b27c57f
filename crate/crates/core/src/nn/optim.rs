use super::{Scalar, Tensor};

/// SGD with classical momentum: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Vec<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        let lr = T::from_f64(self.learning_rate);
        let mu = T::from_f64(self.momentum);
        for ((param, grad), vel) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in param.values_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
    }
}
