//! Equivariant graph convolution with a velocity channel.
//!
//! One layer computes, over the fully connected graph of each molecule,
//!
//! ```text
//! m_ij = φ_e([h_i, h_j, ‖x_i − x_j‖², a_ij])
//! h_i' = φ_h([h_i, Σ_j φ_inf(m_ij)·m_ij])
//! v_i' = φ_v(h_i)·v_i + C·Σ_j (x_i − x_j)·φ_x(m_ij)
//! x_i' = x_i + v_i'
//! ```
//!
//! with `a_ij` the `{local, global}` one-hot and `C = 1/(N−1)`.

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{LmdmError, Result};
use crate::graph::GraphBatch;
use crate::nn::{Activation, Linear, Mlp};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Egcl {
    pub phi_e: Mlp,
    pub phi_inf: Linear,
    pub phi_h: Mlp,
    pub phi_x: Mlp,
    pub phi_v: Mlp,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Egcl {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let phi_e = Mlp::new(store, &format!("{name}.phi_e"), &[2 * in_dim + 3, hidden, hidden], Activation::Silu, rng);
        let phi_inf = Linear::new(store, &format!("{name}.phi_inf"), hidden, 1, true, rng);
        let phi_h = Mlp::new(store, &format!("{name}.phi_h"), &[in_dim + hidden, hidden, out_dim], Activation::Identity, rng);
        let phi_x = Mlp::new(store, &format!("{name}.phi_x"), &[hidden, hidden, 1], Activation::Identity, rng);
        phi_x.last().zero(store);
        let phi_v = Mlp::new(store, &format!("{name}.phi_v"), &[in_dim, hidden, 1], Activation::Identity, rng);
        Self { phi_e, phi_inf, phi_h, phi_x, phi_v, in_dim, hidden, out_dim }
    }

    /// Returns `(x', h', v')`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        h: Var,
        v: Var,
        graph: &GraphBatch,
    ) -> (Var, Var, Var) {
        assert_eq!(tape.shape(h).1, self.in_dim, "feature width does not match layer");
        let n = graph.n_nodes();
        let recv = graph.all.recv.clone();
        let send = graph.all.send.clone();

        let xi = tape.gather_rows(x, recv.clone());
        let xj = tape.gather_rows(x, send.clone());
        let diff = tape.sub(xi, xj);
        let sq = tape.square(diff);
        let d2 = tape.row_sum(sq);
        let hi = tape.gather_rows(h, recv.clone());
        let hj = tape.gather_rows(h, send);
        let a = tape.constant(graph.all_indicator());
        let e_in = tape.concat(&[hi, hj, d2, a]);
        let m = self.phi_e.forward(tape, e_in);

        let gate_logit = self.phi_inf.forward(tape, m);
        let gate = tape.sigmoid(gate_logit);
        let gated = tape.mul_col(m, gate);
        let agg = tape.scatter_add_rows(gated, recv.clone(), n);
        let h_in = tape.concat(&[h, agg]);
        let h_new = self.phi_h.forward(tape, h_in);

        let w = self.phi_x.forward(tape, m);
        let norm = tape.constant(Matrix::from_fn(graph.all.len(), 1, |e, _| T::of(graph.all_norm[e])));
        let w = tape.mul(w, norm);
        let shift = tape.mul_col(diff, w);
        let pull = tape.scatter_add_rows(shift, recv, n);
        let damp = self.phi_v.forward(tape, h);
        let carried = tape.mul_col(v, damp);
        let v_new = tape.add(carried, pull);
        let x_new = tape.add(x, v_new);
        (x_new, h_new, v_new)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EgnnStack {
    pub layers: Vec<Egcl>,
    pub in_dim: usize,
}

impl EgnnStack {
    /// First layer maps `in_dim → hidden`, the rest `hidden → hidden`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let fin = if l == 0 { in_dim } else { hidden };
                Egcl::new(store, &format!("{name}.{l}"), fin, hidden, hidden, rng)
            })
            .collect();
        Self { layers, in_dim }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.in_dim, |l| l.out_dim)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Threads the velocity through the layers, starting from zero.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, h: Var, graph: &GraphBatch) -> (Var, Var) {
        let (n, _) = tape.shape(x);
        let mut v = tape.constant(Matrix::zeros(n, 3));
        let (mut x, mut h) = (x, h);
        for layer in &self.layers {
            (x, h, v) = layer.forward(tape, x, h, v, graph);
        }
        (x, h)
    }
}

fn check_shapes<T: Scalar>(x: &Matrix<T>, h: &Matrix<T>, graph: &GraphBatch, in_dim: usize) -> Result<()> {
    if x.cols() != 3 || x.rows() != graph.n_nodes() || h.rows() != x.rows() || h.cols() != in_dim {
        return Err(LmdmError::Shape(format!(
            "egnn input x {:?}, h {:?} for {} nodes of width {in_dim}",
            x.shape(),
            h.shape(),
            graph.n_nodes()
        )));
    }
    Ok(())
}

/// Single layer evaluated outside any training pass.
pub fn egcl_forward<T: Scalar>(
    store: &ParamStore<T>,
    layer: &Egcl,
    x: &Matrix<T>,
    h: &Matrix<T>,
    v: &Matrix<T>,
    graph: &GraphBatch,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    check_shapes(x, h, graph, layer.in_dim)?;
    if v.shape() != x.shape() {
        return Err(LmdmError::Shape("velocity must match coordinates".into()));
    }
    let mut tape = Tape::with_params(store);
    let (xv, hv, vv) = (tape.constant(x.clone()), tape.constant(h.clone()), tape.constant(v.clone()));
    let (xo, ho, vo) = layer.forward(&mut tape, xv, hv, vv, graph);
    let out = (tape.value(xo).clone(), tape.value(ho).clone(), tape.value(vo).clone());
    if !(out.0.all_finite() && out.1.all_finite() && out.2.all_finite()) {
        return Err(LmdmError::NonFinite { stage: "egnn", layer: 0 });
    }
    Ok(out)
}

/// Whole stack evaluated outside any training pass; reports the first layer
/// producing a non-finite activation.
pub fn egnn_forward<T: Scalar>(
    store: &ParamStore<T>,
    stack: &EgnnStack,
    x: &Matrix<T>,
    h: &Matrix<T>,
    graph: &GraphBatch,
) -> Result<(Matrix<T>, Matrix<T>)> {
    check_shapes(x, h, graph, stack.in_dim)?;
    let mut tape = Tape::with_params(store);
    let mut xv = tape.constant(x.clone());
    let mut hv = tape.constant(h.clone());
    let mut vv = tape.constant(Matrix::zeros(x.rows(), 3));
    for (l, layer) in stack.layers.iter().enumerate() {
        (xv, hv, vv) = layer.forward(&mut tape, xv, hv, vv, graph);
        if !(tape.value(xv).all_finite() && tape.value(hv).all_finite()) {
            return Err(LmdmError::NonFinite { stage: "egnn", layer: l });
        }
    }
    Ok((tape.value(xv).clone(), tape.value(hv).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, rigid_transform, rotate_rows};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize_all(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).as_mut_slice() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    fn setup(seed: u64, n: usize, f: usize) -> (ParamStore<f64>, EgnnStack, Matrix<f64>, Matrix<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stack = EgnnStack::new(&mut store, "enc", f, 8, 2, &mut rng);
        // Non-zero φ_x so the coordinate path is exercised.
        randomize_all(&mut store, &mut rng, 0.4);
        let x = Matrix::from_fn(n, 3, |_, _| rng.random_range(-1.5..1.5));
        let h = Matrix::from_fn(n, f, |_, _| rng.random_range(-1.0..1.0));
        (store, stack, x, h, rng)
    }

    #[test]
    fn isolated_node_is_fixed() {
        let (store, stack, _, _, mut rng) = setup(1, 1, 3);
        let x = Matrix::from_f64_rows(&[[0.3, -0.2, 1.0]]);
        let h = Matrix::from_fn(1, 3, |_, _| rng.random_range(-1.0..1.0));
        let g = GraphBatch::single(&x, 2.0);
        let (xo, _) = egnn_forward(&store, &stack, &x, &h, &g).unwrap();
        assert_eq!(xo, x);
    }

    #[test]
    fn zero_layer_stack_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = EgnnStack::new(&mut store, "e", 2, 4, 0, &mut rng);
        let x = Matrix::from_f64_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let h = Matrix::from_f64_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let g = GraphBatch::single(&x, 2.0);
        let (xo, ho) = egnn_forward(&store, &stack, &x, &h, &g).unwrap();
        assert_eq!((xo, ho), (x, h));
    }

    #[test]
    fn fresh_layers_leave_coordinates_in_place() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = EgnnStack::new(&mut store, "e", 2, 4, 3, &mut rng);
        let x = Matrix::from_f64_rows(&[[0.0, 0.0, 0.0], [1.0, 0.5, 0.0], [0.0, 2.0, 1.0]]);
        let h = Matrix::filled(3, 2, 0.5);
        let (xo, _) = egnn_forward(&store, &stack, &x, &h, &GraphBatch::single(&x, 2.0)).unwrap();
        assert_eq!(xo, x);
    }

    fn mlp_scalar(store: &ParamStore<f64>, mlp: &Mlp, input: &[f64]) -> Vec<f64> {
        let mut a = input.to_vec();
        let n = mlp.layers.len();
        for (l, layer) in mlp.layers.iter().enumerate() {
            let w = store.get(layer.weight);
            let b = store.get(layer.bias.unwrap());
            let mut out = vec![0.0; layer.fan_out];
            for (o, out_o) in out.iter_mut().enumerate() {
                let mut s = b.get(0, o);
                for (i, &ai) in a.iter().enumerate() {
                    s += ai * w.get(i, o);
                }
                *out_o = s;
            }
            let act = if l + 1 == n { mlp.out_act } else { mlp.hidden_act };
            for o in out.iter_mut() {
                *o = match act {
                    Activation::Identity => *o,
                    Activation::Silu => *o / (1.0 + (-*o).exp()),
                    Activation::Sigmoid => 1.0 / (1.0 + (-*o).exp()),
                    Activation::Softplus => (1.0 + o.exp()).ln(),
                };
            }
            a = out;
        }
        a
    }

    #[test]
    fn two_node_layer_matches_scalar_oracle() {
        let (store, stack, x, h, mut rng) = setup(7, 2, 2);
        let layer = &stack.layers[0];
        let v = Matrix::from_fn(2, 3, |_, _| rng.random_range(-0.5..0.5));
        let g = GraphBatch::single(&x, 2.0);
        let (xo, ho, vo) = egcl_forward(&store, layer, &x, &h, &v, &g).unwrap();

        let d2: f64 = (0..3).map(|c| (x.get(0, c) - x.get(1, c)).powi(2)).sum();
        let a = if d2.sqrt() <= 2.0 { [1.0, 0.0] } else { [0.0, 1.0] };
        for (i, j) in [(0usize, 1usize), (1, 0)] {
            let mut e_in = h.row(i).to_vec();
            e_in.extend_from_slice(h.row(j));
            e_in.push(d2);
            e_in.extend_from_slice(&a);
            let m = mlp_scalar(&store, &layer.phi_e, &e_in);
            let wi = store.get(layer.phi_inf.weight);
            let gate_logit = store.get(layer.phi_inf.bias.unwrap()).get(0, 0)
                + m.iter().enumerate().map(|(k, mk)| mk * wi.get(k, 0)).sum::<f64>();
            let gate = 1.0 / (1.0 + (-gate_logit).exp());
            let mut h_in = h.row(i).to_vec();
            h_in.extend(m.iter().map(|mk| gate * mk));
            let h_new = mlp_scalar(&store, &layer.phi_h, &h_in);
            for (k, hk) in h_new.iter().enumerate() {
                assert!((ho.get(i, k) - hk).abs() < 1e-12);
            }
            let phx = mlp_scalar(&store, &layer.phi_x, &m)[0];
            let phv = mlp_scalar(&store, &layer.phi_v, h.row(i))[0];
            for c in 0..3 {
                // C = 1/(N−1) = 1
                let vn = phv * v.get(i, c) + (x.get(i, c) - x.get(j, c)) * phx;
                assert!((vo.get(i, c) - vn).abs() < 1e-12);
                assert!((xo.get(i, c) - (x.get(i, c) + vn)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stack_equals_threaded_layers() {
        let (store, stack, x, h, _) = setup(3, 4, 3);
        let g = GraphBatch::single(&x, 2.0);
        let (xs, hs) = egnn_forward(&store, &stack, &x, &h, &g).unwrap();
        let v0 = Matrix::zeros(4, 3);
        let (x1, h1, v1) = egcl_forward(&store, &stack.layers[0], &x, &h, &v0, &g).unwrap();
        let (x2, h2, _) = egcl_forward(&store, &stack.layers[1], &x1, &h1, &v1, &g).unwrap();
        assert!(xs.sub(&x2).max_abs() < 1e-13 && hs.sub(&h2).max_abs() < 1e-13);
    }

    #[test]
    fn layer_is_se3_equivariant_with_velocity() {
        for seed in 0..10 {
            let (store, stack, x, h, mut rng) = setup(seed, 5, 3);
            let layer = &stack.layers[0];
            let v = Matrix::from_fn(5, 3, |_, _| rng.random_range(-0.5..0.5));
            let r: Matrix<f64> = random_rotation(&mut rng);
            let t = [0.7, -1.1, 2.3];
            let g = GraphBatch::single(&x, 2.0);
            let (xo, ho, vo) = egcl_forward(&store, layer, &x, &h, &v, &g).unwrap();
            let xr = rigid_transform(&x, &r, &t);
            let gr = GraphBatch::single(&xr, 2.0);
            let (xro, hro, vro) = egcl_forward(&store, layer, &xr, &h, &rotate_rows(&v, &r), &gr).unwrap();
            let scale = 1.0 + xo.max_abs();
            assert!(xro.sub(&rigid_transform(&xo, &r, &t)).max_abs() <= 1e-9 * scale);
            assert!(vro.sub(&rotate_rows(&vo, &r)).max_abs() <= 1e-9 * scale);
            assert!(hro.sub(&ho).max_abs() <= 1e-9);
        }
    }

    #[test]
    fn stack_permutation_equivariant() {
        let (store, stack, x, h, _) = setup(9, 5, 3);
        let perm = [3usize, 0, 4, 1, 2];
        let g = GraphBatch::single(&x, 2.0);
        let (xo, ho) = egnn_forward(&store, &stack, &x, &h, &g).unwrap();
        let xp = x.gather_rows(&perm);
        let hp = h.gather_rows(&perm);
        let (xpo, hpo) = egnn_forward(&store, &stack, &xp, &hp, &GraphBatch::single(&xp, 2.0)).unwrap();
        assert!(xpo.sub(&xo.gather_rows(&perm)).max_abs() < 1e-12);
        assert!(hpo.sub(&ho.gather_rows(&perm)).max_abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (store, stack, x, _, _) = setup(0, 3, 3);
        let h = Matrix::zeros(3, 2);
        let g = GraphBatch::single(&x, 2.0);
        assert!(matches!(egnn_forward(&store, &stack, &x, &h, &g), Err(LmdmError::Shape(_))));
    }
}
