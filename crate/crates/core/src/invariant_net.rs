//! Continuous-filter convolution blocks and the distance-to-coordinate score
//! transition.
//!
//! Geometry enters only through edge distances, so every output here is
//! invariant under rigid motions except [`dist_transition`], which turns
//! per-edge scalars into an equivariant field `Σ_j s_ij (x_i − x_j)/d_ij`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{LmdmError, Result};
use crate::geometry::{rbf_expand, RbfSpec};
use crate::graph::{edge_geometry, EdgeIndex, EdgeLevel};
use crate::nn::{Activation, Linear, Mlp};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordEmbed {
    /// Node embedding from features only.
    #[default]
    None,
    /// Also embeds raw coordinates; breaks rotation invariance.
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantNetConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub node_out: usize,
    pub coord_embed: CoordEmbed,
    pub rbf: RbfSpec<f64>,
}

impl InvariantNetConfig {
    pub fn new(in_dim: usize, hidden: usize, n_layers: usize, node_out: usize) -> Self {
        Self { in_dim, hidden, n_layers, node_out, coord_embed: CoordEmbed::None, rbf: RbfSpec::default() }
    }
}

/// `h' = silu(W0 h + Σ_j W1 φ_w(rbf(d_ij)) ⊙ W2 h_j)`
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub w0: Linear,
    pub filter: Mlp,
    pub w1: Linear,
    pub w2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantNet {
    pub config: InvariantNetConfig,
    pub node_embed: Mlp,
    pub coord_embed: Option<Mlp>,
    pub convs: Vec<ConvLayer>,
    /// Score heads; absent on a feature-only trunk.
    pub heads: Option<ScoreHeads>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreHeads {
    pub edge_mlp: Mlp,
    pub node_score_mlp: Mlp,
    pub distance_mlp: Mlp,
}

impl InvariantNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: InvariantNetConfig,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::trunk(store, name, config, rng);
        let h = net.config.hidden;
        net.heads = Some(ScoreHeads {
            edge_mlp: Mlp::new(store, &format!("{name}.edge"), &[3, h, h], Activation::Identity, rng),
            node_score_mlp: Mlp::new(store, &format!("{name}.node_score"), &[h, h, net.config.node_out], Activation::Identity, rng),
            distance_mlp: Mlp::new(store, &format!("{name}.dist_score"), &[3 * h, h, 1], Activation::Identity, rng),
        });
        net
    }

    fn heads(&self) -> &ScoreHeads {
        self.heads.as_ref().expect("score heads on a trunk-only network")
    }

    /// Embedding and convolutions only; `node_out` is ignored.
    pub fn trunk<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: InvariantNetConfig,
        rng: &mut R,
    ) -> Self {
        assert!(config.n_layers >= 1, "at least one convolution layer");
        let h = config.hidden;
        let k = config.rbf.len();
        let (feat_width, coord_embed) = match config.coord_embed {
            CoordEmbed::None => (h, None),
            CoordEmbed::Raw => {
                let c = h / 2;
                (h - c, Some(Mlp::new(store, &format!("{name}.coord_embed"), &[3, h, c], Activation::Identity, rng)))
            }
        };
        let node_embed = Mlp::new(store, &format!("{name}.node_embed"), &[config.in_dim, h, feat_width], Activation::Identity, rng);
        let convs = (0..config.n_layers)
            .map(|l| ConvLayer {
                w0: Linear::new(store, &format!("{name}.conv{l}.w0"), h, h, true, rng),
                filter: Mlp::new(store, &format!("{name}.conv{l}.filter"), &[k, h, h], Activation::Silu, rng),
                w1: Linear::new(store, &format!("{name}.conv{l}.w1"), h, h, false, rng),
                w2: Linear::new(store, &format!("{name}.conv{l}.w2"), h, h, false, rng),
            })
            .collect();
        Self { config, node_embed, coord_embed, convs, heads: None }
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    fn rbf_matrix<T: Scalar>(&self, d: &Matrix<T>) -> Matrix<T> {
        let centers: Vec<T> = self.config.rbf.centers.iter().map(|&c| T::of(c)).collect();
        let width = T::of(self.config.rbf.width);
        let mut out = Matrix::zeros(d.rows(), centers.len());
        for e in 0..d.rows() {
            out.row_mut(e).copy_from_slice(&rbf_expand(d.get(e, 0), &centers, width));
        }
        out
    }

    /// `h_e = MLP([d, e])` for every edge of one level; `d` is `E×1`.
    pub fn edge_embed_var<T: Scalar>(&self, tape: &mut Tape<'_, T>, d: &Matrix<T>, level: EdgeLevel) -> Var {
        let ind = level.indicator::<T>();
        let input = Matrix::from_fn(d.rows(), 3, |e, c| if c == 0 { d.get(e, 0) } else { ind[c - 1] });
        let x = tape.constant(input);
        self.heads().edge_mlp.forward(tape, x)
    }

    /// Node embedding followed by the convolution stack over `edges`.
    pub fn schnet_var<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        features: Var,
        coords: &Matrix<T>,
        edges: &EdgeIndex,
        d: &Matrix<T>,
    ) -> Var {
        let n = coords.rows();
        let mut h = self.node_embed.forward(tape, features);
        if let Some(ce) = &self.coord_embed {
            let x = tape.constant(coords.clone());
            let hx = ce.forward(tape, x);
            h = tape.concat(&[h, hx]);
        }
        let rbf = tape.constant(self.rbf_matrix(d));
        for conv in &self.convs {
            let self_term = conv.w0.forward(tape, h);
            let filt = conv.filter.forward(tape, rbf);
            let filt = conv.w1.forward(tape, filt);
            let hj = tape.gather_rows(h, edges.send.clone());
            let hj = conv.w2.forward(tape, hj);
            let msg = tape.mul(filt, hj);
            let agg = tape.scatter_add_rows(msg, edges.recv.clone(), n);
            let pre = tape.add(self_term, agg);
            h = tape.silu(pre);
        }
        h
    }

    pub fn node_score_var<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var) -> Var {
        self.heads().node_score_mlp.forward(tape, h)
    }

    /// `s(d_ij) = MLP([h_i, h_j, h_e])`, one row per edge.
    pub fn distance_score_var<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var, edges: &EdgeIndex, h_e: Var) -> Var {
        let hi = tape.gather_rows(h, edges.recv.clone());
        let hj = tape.gather_rows(h, edges.send.clone());
        let input = tape.concat(&[hi, hj, h_e]);
        self.heads().distance_mlp.forward(tape, input)
    }

    /// Full branch over one edge level: returns `(s_x, s_h)`.
    pub fn score_var<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        features: Var,
        coords: &Matrix<T>,
        edges: &EdgeIndex,
        level: EdgeLevel,
    ) -> Result<(Var, Var)> {
        let (d, unit) = edge_geometry(coords, edges)
            .map_err(|(i, j, distance)| LmdmError::DegenerateGeometry { i, j, distance })?;
        let h = self.schnet_var(tape, features, coords, edges, &d);
        let s_h = self.node_score_var(tape, h);
        let h_e = self.edge_embed_var(tape, &d, level);
        let s_d = self.distance_score_var(tape, h, edges, h_e);
        let s_x = dist_transition_var(tape, s_d, &unit, edges, coords.rows());
        Ok((s_x, s_h))
    }
}

/// `s_x_i = Σ_j s_ij · unit_ij` with the unit vectors held constant.
pub fn dist_transition_var<T: Scalar>(
    tape: &mut Tape<'_, T>,
    s_d: Var,
    unit: &Matrix<T>,
    edges: &EdgeIndex,
    n: usize,
) -> Var {
    let u = tape.constant(unit.clone());
    let contrib = tape.mul_col(u, s_d);
    tape.scatter_add_rows(contrib, edges.recv.clone(), n)
}

fn index_of(pairs: &[(usize, usize)]) -> EdgeIndex {
    EdgeIndex {
        recv: pairs.iter().map(|p| p.0).collect::<Vec<_>>().into(),
        send: pairs.iter().map(|p| p.1).collect::<Vec<_>>().into(),
    }
}

pub fn edge_embed<T: Scalar>(store: &ParamStore<T>, net: &InvariantNet, d: T, level: EdgeLevel) -> Vec<T> {
    let mut tape = Tape::with_params(store);
    let v = net.edge_embed_var(&mut tape, &Matrix::filled(1, 1, d), level);
    tape.value(v).row(0).to_vec()
}

/// Node embeddings after the convolution stack for one molecule.
pub fn schnet_forward<T: Scalar>(
    store: &ParamStore<T>,
    net: &InvariantNet,
    features: &Matrix<T>,
    coords: &Matrix<T>,
    edges: &[(usize, usize)],
) -> Result<Matrix<T>> {
    if features.rows() != coords.rows() || features.cols() != net.config.in_dim {
        return Err(LmdmError::Shape(format!("features {:?} for {} atoms", features.shape(), coords.rows())));
    }
    let idx = index_of(edges);
    let (d, _) = edge_geometry(coords, &idx).map_err(|(i, j, distance)| LmdmError::DegenerateGeometry { i, j, distance })?;
    let mut tape = Tape::with_params(store);
    let f = tape.constant(features.clone());
    let h = net.schnet_var(&mut tape, f, coords, &idx, &d);
    let out = tape.value(h).clone();
    if !out.all_finite() {
        return Err(LmdmError::NonFinite { stage: "schnet", layer: net.convs.len() });
    }
    Ok(out)
}

pub fn node_score<T: Scalar>(store: &ParamStore<T>, net: &InvariantNet, h: &Matrix<T>) -> Matrix<T> {
    let mut tape = Tape::with_params(store);
    let hv = tape.constant(h.clone());
    let s = net.node_score_var(&mut tape, hv);
    tape.value(s).clone()
}

/// Scalar distance score for each edge given node and edge embeddings.
pub fn distance_score<T: Scalar>(
    store: &ParamStore<T>,
    net: &InvariantNet,
    h: &Matrix<T>,
    edges: &[(usize, usize)],
    h_e: &Matrix<T>,
) -> Vec<T> {
    let mut tape = Tape::with_params(store);
    let hv = tape.constant(h.clone());
    let he = tape.constant(h_e.clone());
    let s = net.distance_score_var(&mut tape, hv, &index_of(edges), he);
    tape.value(s).as_slice().to_vec()
}

/// `s_x_i = Σ_{(i,j)} s_ij (x_i − x_j)/d_ij`
pub fn dist_transition<T: Scalar>(s_d: &[T], coords: &Matrix<T>, edges: &[(usize, usize)]) -> Result<Matrix<T>> {
    if s_d.len() != edges.len() {
        return Err(LmdmError::Shape(format!("{} scores for {} edges", s_d.len(), edges.len())));
    }
    let idx = index_of(edges);
    let (_, unit) = edge_geometry(coords, &idx).map_err(|(i, j, distance)| LmdmError::DegenerateGeometry { i, j, distance })?;
    let mut tape = Tape::new();
    let s = tape.constant(Matrix::from_vec(s_d.len(), 1, s_d.to_vec()));
    let out = dist_transition_var(&mut tape, s, &unit, &idx, coords.rows());
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_edges, random_rotation, rigid_transform, rotate_rows};
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    fn affine(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
        let w = store.get(l.weight);
        (0..l.fan_out)
            .map(|o| {
                let b = l.bias.map_or(0.0, |b| store.get(b).get(0, o));
                b + x.iter().enumerate().map(|(i, xi)| xi * w.get(i, o)).sum::<f64>()
            })
            .collect()
    }

    fn mlp(store: &ParamStore<f64>, m: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (l, layer) in m.layers.iter().enumerate() {
            a = affine(store, layer, &a);
            let act = if l + 1 == m.layers.len() { m.out_act } else { m.hidden_act };
            if act == Activation::Silu {
                a = a.into_iter().map(silu).collect();
            }
        }
        a
    }

    fn net(seed: u64, in_dim: usize) -> (ParamStore<f64>, InvariantNet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = InvariantNet::new(&mut store, "net", InvariantNetConfig::new(in_dim, 6, 2, 2), &mut rng);
        (store, n)
    }

    #[test]
    fn edge_embed_matches_scalar_oracle() {
        let (store, n) = net(1, 3);
        let got = edge_embed(&store, &n, 1.0, EdgeLevel::Local);
        let want = mlp(&store, &n.heads().edge_mlp, &[1.0, 1.0, 0.0]);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
        assert_eq!(edge_embed(&store, &n, 1.0, EdgeLevel::Local), got);
    }

    #[test]
    fn schnet_single_node_has_no_messages() {
        let (store, n) = net(2, 3);
        let f = Matrix::from_f64_rows(&[[0.2, -0.4, 1.0]]);
        let x = Matrix::from_f64_rows(&[[1.0, 2.0, 3.0]]);
        let out = schnet_forward(&store, &n, &f, &x, &[]).unwrap();
        let mut h = mlp(&store, &n.node_embed, f.row(0));
        for conv in &n.convs {
            h = affine(&store, &conv.w0, &h).into_iter().map(silu).collect();
        }
        for (k, hk) in h.iter().enumerate() {
            assert!((out.get(0, k) - hk).abs() < 1e-13);
        }
    }

    #[test]
    fn schnet_two_nodes_match_scalar_oracle() {
        let (store, n) = net(3, 2);
        let f = Matrix::from_f64_rows(&[[0.5, -0.1], [-0.3, 0.8]]);
        let x = Matrix::from_f64_rows(&[[0.0, 0.0, 0.0], [0.6, 0.8, 0.0]]);
        let edges = [(0, 1), (1, 0)];
        let out = schnet_forward(&store, &n, &f, &x, &edges).unwrap();
        let rbf: Vec<f64> = n.config.rbf.centers.iter().map(|c| (-(1.0 - c).powi(2) / (2.0 * n.config.rbf.width.powi(2))).exp()).collect();
        let mut h: Vec<Vec<f64>> = (0..2).map(|i| mlp(&store, &n.node_embed, f.row(i))).collect();
        for conv in &n.convs {
            let filt = affine(&store, &conv.w1, &mlp(&store, &conv.filter, &rbf));
            let next: Vec<Vec<f64>> = (0..2)
                .map(|i| {
                    let j = 1 - i;
                    let s = affine(&store, &conv.w0, &h[i]);
                    let hj = affine(&store, &conv.w2, &h[j]);
                    s.iter().enumerate().map(|(k, sk)| silu(sk + filt[k] * hj[k])).collect()
                })
                .collect();
            h = next;
        }
        for i in 0..2 {
            for k in 0..6 {
                assert!((out.get(i, k) - h[i][k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn node_score_examples() {
        let (mut store, n) = net(4, 2);
        let h = Matrix::from_f64_rows(&[[0.3, -0.2, 0.1, 0.0, 0.5, 1.0], [0.3, -0.2, 0.1, 0.0, 0.5, 1.0]]);
        let s = node_score(&store, &n, &h);
        assert_eq!(s.row(0), s.row(1));
        let want = mlp(&store, &n.heads().node_score_mlp, h.row(0));
        assert!((s.get(0, 0) - want[0]).abs() < 1e-14 && (s.get(0, 1) - want[1]).abs() < 1e-14);
        for l in &n.heads().node_score_mlp.layers {
            l.zero(&mut store);
        }
        assert_eq!(node_score(&store, &n, &h).max_abs(), 0.0);
    }

    #[test]
    fn distance_score_examples() {
        let (mut store, n) = net(5, 2);
        let h = Matrix::from_fn(2, 6, |_, k| k as f64 * 0.1);
        let h_e = Matrix::from_fn(2, 6, |_, k| 0.3 - k as f64 * 0.05);
        let edges = [(0, 1), (1, 0)];
        let s = distance_score(&store, &n, &h, &edges, &h_e);
        assert_eq!(s[0], s[1]);
        let mut input = h.row(0).to_vec();
        input.extend_from_slice(h.row(1));
        input.extend_from_slice(h_e.row(0));
        assert!((s[0] - mlp(&store, &n.heads().distance_mlp, &input)[0]).abs() < 1e-14);
        n.heads().distance_mlp.last().zero(&mut store);
        assert!(distance_score(&store, &n, &h, &edges, &h_e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dist_transition_examples() {
        let x = Matrix::from_f64_rows(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let edges = [(0, 1), (1, 0)];
        assert_eq!(dist_transition(&[0.0, 0.0], &x, &edges).unwrap().max_abs(), 0.0);
        let f = dist_transition(&[1.0, 1.0], &x, &edges).unwrap();
        assert_eq!(f.row(0), &[-1.0, 0.0, 0.0]);
        assert_eq!(f.row(1), &[1.0, 0.0, 0.0]);

        let x: Matrix<f64> = Matrix::from_f64_rows(&[[0.0, 0.0, 0.0], [1.0, 0.5, 0.0], [-0.5, 1.5, 1.0]]);
        let edges = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];
        let s = [0.3, -0.7, 1.1, 0.2, -0.4, 0.9];
        let got = dist_transition(&s, &x, &edges).unwrap();
        let mut want = [[0.0; 3]; 3];
        for (e, &(i, j)) in edges.iter().enumerate() {
            let d: f64 = (0..3).map(|c| (x.get(i, c) - x.get(j, c)).powi(2)).sum::<f64>().sqrt();
            for c in 0..3 {
                want[i][c] += s[e] * (x.get(i, c) - x.get(j, c)) / d;
            }
        }
        assert!(got.sub(&Matrix::from_f64_rows(&want)).max_abs() < 1e-14);
    }

    #[test]
    fn dist_transition_rejects_coincident_atoms() {
        let x = Matrix::from_f64_rows(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
        assert!(matches!(dist_transition(&[1.0], &x, &[(0, 1)]), Err(LmdmError::DegenerateGeometry { .. })));
    }

    #[test]
    fn branch_is_rotation_equivariant() {
        let (store, n) = net(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..10 {
            let x = Matrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
            let f = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
            let r: Matrix<f64> = random_rotation(&mut rng);
            let xr = rigid_transform(&x, &r, &[1.0, -2.0, 0.5]);
            let run = |coords: &Matrix<f64>| {
                let e = build_edges(coords, 2.0);
                let all: Vec<_> = e.all_tagged().into_iter().map(|(p, _)| p).collect();
                let idx = index_of(&all);
                let mut tape = Tape::with_params(&store);
                let fv = tape.constant(f.clone());
                let (sx, sh) = n.score_var(&mut tape, fv, coords, &idx, EdgeLevel::All).unwrap();
                (tape.value(sx).clone(), tape.value(sh).clone())
            };
            let (sx, sh) = run(&x);
            let (sxr, shr) = run(&xr);
            assert!(sxr.sub(&rotate_rows(&sx, &r)).max_abs() <= 1e-9 * (1.0 + sx.max_abs()));
            assert!(shr.sub(&sh).max_abs() <= 1e-9);
        }
    }

    #[test]
    fn raw_coord_embedding_is_not_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let mut cfg = InvariantNetConfig::new(2, 6, 1, 1);
        cfg.coord_embed = CoordEmbed::Raw;
        let n = InvariantNet::new(&mut store, "raw", cfg, &mut rng);
        let f = Matrix::from_f64_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let x = Matrix::from_f64_rows(&[[0.0, 0.0, 0.0], [1.2, 0.0, 0.0]]);
        let shifted = rigid_transform(&x, &Matrix::identity(3), &[3.0, 0.0, 0.0]);
        let a = schnet_forward(&store, &n, &f, &x, &[(0, 1), (1, 0)]).unwrap();
        let b = schnet_forward(&store, &n, &f, &shifted, &[(0, 1), (1, 0)]).unwrap();
        assert_eq!(a.cols(), 6);
        assert!(a.sub(&b).max_abs() > 1e-6);
    }

    proptest! {
        #[test]
        fn symmetric_scores_give_zero_net_field(seed in 0u64..500, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::from_fn(n, 3, |_, _| rng.random_range(-2.0..2.0));
            let mut edges = Vec::new();
            let mut s = Vec::new();
            let mut sym = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = rng.random_range(-1.0..1.0);
                    sym[i][j] = v;
                    sym[j][i] = v;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        edges.push((i, j));
                        s.push(sym[i][j]);
                    }
                }
            }
            let f = dist_transition(&s, &x, &edges).unwrap();
            prop_assert!(f.col_sums().max_abs() <= 1e-9);
        }
    }
}
