use crate::autodiff::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: T) -> Self {
        let zeros = || store.iter().map(|(_, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { lr, beta1: T::of(0.9), beta2: T::of(0.999), eps: T::of(1e-8), step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        for (k, (id, g)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads.iter()).enumerate() {
            let p = store.get_mut(id).as_mut_slice();
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (one - self.beta1) * gi;
                *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // With bias correction, step one is lr·g/(|g| + eps) ≈ lr·sign(g).
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Matrix::from_f64_rows(&[[1.0, -2.0]]));
        let mut opt = Adam::new(&store, 0.01);
        let mut tape = Tape::with_params(&store);
        let p = tape.param(id);
        let sq = tape.square(p);
        let l = tape.sum(sq);
        let g = tape.backward(l);
        drop(tape);
        opt.step(&mut store, &g);
        let after = store.get(id).as_slice();
        assert!((after[0] - 0.99).abs() < 1e-9);
        assert!((after[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Matrix::from_f64_rows(&[[3.0, -4.0, 0.5]]));
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let g = {
                let mut tape = Tape::with_params(&store);
                let p = tape.param(id);
                let sq = tape.square(p);
                let l = tape.sum(sq);
                tape.backward(l)
            };
            opt.step(&mut store, &g);
        }
        assert!(store.get(id).max_abs() < 1e-3);
    }
}
