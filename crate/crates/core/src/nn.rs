//! Feed-forward building blocks registered in a [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Silu,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Silu => tape.silu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Softplus => tape.softplus(x),
        }
    }
}

/// Weights drawn uniformly from `[-1/√fan_in, 1/√fan_in]`.
pub fn uniform_init<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let s = 1.0 / (rows.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.random_range(-s..=s)))
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), uniform_init(fan_in, fan_out, rng));
        let bias = bias.then(|| store.add(format!("{name}.b"), Matrix::zeros(1, fan_out)));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => y,
        }
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let w = store.get_mut(self.weight);
        *w = Matrix::zeros(w.rows(), w.cols());
        if let Some(b) = self.bias {
            let b = store.get_mut(b);
            *b = Matrix::zeros(b.rows(), b.cols());
        }
    }
}

/// Multi-layer perceptron with SiLU between layers and a configurable output
/// activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_act: Activation,
    pub out_act: Activation,
}

impl Mlp {
    /// `widths` lists every layer width including input and output, so
    /// `[in, h, out]` gives two affine layers.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        out_act: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, hidden_act: Activation::Silu, out_act }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("nonempty")
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x);
            let act = if i + 1 == n { self.out_act } else { self.hidden_act };
            x = act.apply(tape, x);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Matrix<f64> = uniform_init(16, 8, &mut rng);
        assert!(w.max_abs() <= 0.25);
        assert!(w.max_abs() > 0.1);
    }

    #[test]
    fn mlp_shapes_and_zeroed_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], Activation::Identity, &mut rng);
        assert_eq!((mlp.in_dim(), mlp.out_dim()), (3, 2));
        mlp.last().zero(&mut store);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Matrix::filled(4, 3, 0.5));
        let y = mlp.forward(&mut tape, x);
        assert_eq!(tape.shape(y), (4, 2));
        assert_eq!(tape.value(y).max_abs(), 0.0);
    }
}
