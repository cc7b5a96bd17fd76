//! Learned hypergraph over the concatenated node sets and attention-based
//! propagation along it.
//!
//! Two structure stages share one layout: stage 1 groups nodes into the
//! hyperedges used for node-to-edge aggregation, stage 2 supplies the
//! membership used when edges write back to nodes.

use std::fmt::Write as _;

use rand::Rng;

use crate::encoders::LN_EPS;
use crate::error::{GfefError, Result};
use crate::graph::{Graph, Var};
use crate::params::{glorot, normal, Bound, ParamSet};
use crate::robustness::{gumbel, Mode};
use crate::tensor::{Scalar, Tensor};

pub fn init_structure_state<F: Scalar, R: Rng>(p: &mut ParamSet<F>, rng: &mut R, stage: usize, nodes: usize, d: usize) {
    let s = format!("hg{stage}");
    p.insert(format!("{s}.e"), normal(rng, &[nodes, d], 1.0));
    for l in 0..2 {
        p.insert(format!("{s}.mlp{l}.w"), glorot(rng, d, d));
        p.insert(format!("{s}.mlp{l}.b"), Tensor::zeros(&[d]));
    }
    for c in 0..3 {
        p.insert(format!("{s}.conv{c}.w"), glorot(rng, 3 * d, d));
        p.insert(format!("{s}.conv{c}.b"), Tensor::zeros(&[d]));
        if c < 2 {
            p.insert(format!("{s}.ln{c}.g"), Tensor::full(&[d], F::one()));
            p.insert(format!("{s}.ln{c}.b"), Tensor::zeros(&[d]));
        }
    }
    p.insert(format!("{s}.pair.w"), glorot(rng, 2 * d, 2));
    p.insert(format!("{s}.pair.b"), Tensor::zeros(&[2]));
}

/// Shared node features of one stage as a node-major `[P, d]` graph value
/// (the transpose of the `d x P` key matrix).
pub fn shared_node_features<F: Scalar>(g: &mut Graph<F>, b: &Bound, stage: usize) -> Var {
    let s = format!("hg{stage}");
    let e = b.var(&format!("{s}.e"));
    let (n, d) = (g.shape(e)[0], g.shape(e)[1]);
    let h = g.linear(e, b.var(&format!("{s}.mlp0.w")), b.var(&format!("{s}.mlp0.b")));
    let h = g.relu(h);
    let h = g.linear(h, b.var(&format!("{s}.mlp1.w")), b.var(&format!("{s}.mlp1.b")));
    let mut h = g.reshape(h, &[1, n, d]);
    for c in 0..3 {
        let cols = g.im2col1d(h, 3, 1, 1);
        h = g.linear(cols, b.var(&format!("{s}.conv{c}.w")), b.var(&format!("{s}.conv{c}.b")));
        if c < 2 {
            h = g.layer_norm(h, b.var(&format!("{s}.ln{c}.g")), b.var(&format!("{s}.ln{c}.b")), F::c(LN_EPS));
            h = g.relu(h);
        }
    }
    g.reshape(h, &[n, d])
}

/// Key matrix `M` (`d x P`) of one stage, evaluated without gradients.
pub fn shared_node_matrix<F: Scalar>(params: &ParamSet<F>, stage: usize) -> Tensor<F> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let mt = shared_node_features(&mut g, &b, stage);
    let mt = g.value(mt);
    let (n, d) = (mt.dim(0), mt.dim(1));
    let mut out = vec![F::zero(); n * d];
    for i in 0..n {
        for j in 0..d {
            out[j * n + i] = mt.at2(i, j);
        }
    }
    Tensor::new(vec![d, n], out)
}

/// Pairwise Bernoulli head: affine `2d -> 2` on `[m_i ; m_j]`.
#[derive(Clone, Debug)]
pub struct PairHead {
    /// `[2d, 2]`, rows `0..d` act on node `i`, rows `d..2d` on node `j`.
    pub w: Tensor<f64>,
    pub b: [f64; 2],
    pub tau: f64,
}

impl PairHead {
    pub fn from_params<F: Scalar>(params: &ParamSet<F>, stage: usize, tau: f64) -> Self {
        let w = params.get(&format!("hg{stage}.pair.w")).expect("pair head").cast();
        let b = params.get(&format!("hg{stage}.pair.b")).expect("pair head");
        PairHead {
            w,
            b: [b.data()[0].f64(), b.data()[1].f64()],
            tau,
        }
    }
}

/// Connection matrix from node-major features `mt: [P, d]`.
///
/// Train mode draws two Gumbel values per ordered pair (row-major, diagonal
/// included) and keeps the relaxed sample; infer mode thresholds the keep
/// probability at 0.5.  The diagonal is always 1.
pub fn learn_connection_matrix<R: Rng + ?Sized>(mt: &Tensor<f64>, head: &PairHead, mode: Mode, rng: &mut R) -> Tensor<f64> {
    let (n, d) = (mt.dim(0), mt.dim(1));
    assert_eq!(head.w.shape(), &[2 * d, 2]);
    let project = |offset: usize| -> Vec<[f64; 2]> {
        (0..n)
            .map(|i| {
                let mut acc = [0.0; 2];
                for (k, &v) in mt.row(i).iter().enumerate() {
                    acc[0] += v * head.w.at2(offset + k, 0);
                    acc[1] += v * head.w.at2(offset + k, 1);
                }
                acc
            })
            .collect()
    };
    let (left, right) = (project(0), project(d));
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let l0 = left[i][0] + right[j][0] + head.b[0];
            let l1 = left[i][1] + right[j][1] + head.b[1];
            c[i * n + j] = match mode {
                Mode::Train => {
                    let (g0, g1) = (gumbel(rng), gumbel(rng));
                    1.0 / (1.0 + ((l0 + g0 - l1 - g1) / head.tau).exp())
                }
                Mode::Infer => {
                    if l1 >= l0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
        }
        c[i * n + i] = 1.0;
    }
    Tensor::new(vec![n, n], c)
}

/// `P = D^-1 C`.
pub fn transition_matrix(c: &Tensor<f64>) -> Tensor<f64> {
    let n = c.dim(0);
    let mut p = c.data().to_vec();
    for row in p.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        assert!(s > 0.0, "connection row without any weight");
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(vec![n, n], p)
}

/// Restart-weighted sum of walk powers, `sum_{k=0}^{steps} a (1-a)^k P^k`.
pub fn random_walk_relevance(c: &Tensor<f64>, alpha: f64, steps: usize) -> Result<Tensor<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GfefError::InvalidArgument(format!("restart probability {alpha} outside [0, 1]")));
    }
    let n = c.dim(0);
    if c.shape() != [n, n] {
        return Err(GfefError::Shape(format!("connection matrix must be square, got {:?}", c.shape())));
    }
    let p = transition_matrix(c);
    let mut power = Tensor::zeros(&[n, n]);
    for i in 0..n {
        power.data_mut()[i * n + i] = 1.0;
    }
    let mut out = Tensor::zeros(&[n, n]);
    let mut weight = alpha;
    for k in 0..=steps {
        if k > 0 {
            power = crate::tensor::matmul(&power, &p, false, false);
            weight *= 1.0 - alpha;
        }
        for (o, &v) in out.data_mut().iter_mut().zip(power.data()) {
            *o += weight * v;
        }
    }
    Ok(out)
}

/// Hyperedge `e` is anchored at node `e`; members are kept sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hyperedges {
    pub members: Vec<Vec<usize>>,
    /// Node `i` to the edges containing it.
    pub incidence: Vec<Vec<usize>>,
}

impl Hyperedges {
    fn from_members(members: Vec<Vec<usize>>) -> Self {
        let n = members.len();
        let mut incidence = vec![Vec::new(); n];
        for (e, m) in members.iter().enumerate() {
            for &v in m {
                incidence[v].push(e);
            }
        }
        Hyperedges { members, incidence }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Membership as `[edges, nodes]` 0/1 values.
    pub fn mask<F: Scalar>(&self) -> Tensor<F> {
        let n = self.members.len();
        let mut m = vec![F::zero(); n * n];
        for (e, mem) in self.members.iter().enumerate() {
            for &v in mem {
                m[e * n + v] = F::one();
            }
        }
        Tensor::new(vec![n, n], m)
    }
}

/// Indices of the `k` largest entries of `row`, skipping `skip`; ties go to
/// the lower index.
fn top_k_excluding(row: &[f64], skip: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != skip).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Edge `i` is node `i` plus the `k` most relevant other nodes of row `i`.
pub fn build_hyperedges(relevance: &Tensor<f64>, k: usize) -> Result<Hyperedges> {
    let n = relevance.dim(0);
    if n == 0 || k > n - 1 {
        return Err(GfefError::InvalidArgument(format!(
            "top_k = {k} needs at least {} nodes, have {n}",
            k + 1
        )));
    }
    let members = (0..n)
        .map(|i| {
            let mut m = top_k_excluding(relevance.row(i), i, k);
            m.push(i);
            m.sort_unstable();
            m
        })
        .collect();
    Ok(Hyperedges::from_members(members))
}

/// Nearest-neighbour alternative: edge `i` is node `i` plus its `k` closest
/// nodes in Euclidean distance over `points: [P, d]`.
pub fn knn_hyperedges<F: Scalar>(points: &[F], n: usize, k: usize) -> Result<Hyperedges> {
    let d = points.len() / n;
    let dist: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            let (a, b) = (&points[i * d..(i + 1) * d], &points[j * d..(j + 1) * d]);
            // Negated so that "largest" means "closest".
            -a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>()
        })
        .collect();
    build_hyperedges(&Tensor::new(vec![n, n], dist), k)
}

/// Full construction for one stage: connection matrix, relevance, top-K.
pub fn rwhc_structure<R: Rng + ?Sized>(
    mt: &Tensor<f64>,
    head: &PairHead,
    alpha: f64,
    steps: usize,
    k: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Hyperedges> {
    let c = learn_connection_matrix(mt, head, mode, rng);
    let rel = random_walk_relevance(&c, alpha, steps)?;
    build_hyperedges(&rel, k)
}

pub fn init_propagation<F: Scalar, R: Rng>(p: &mut ParamSet<F>, rng: &mut R, layer: usize, d: usize) {
    let s = format!("prop{layer}");
    p.insert(format!("{s}.theta2.w"), glorot(rng, d, 2 * d));
    p.insert(format!("{s}.theta2.b"), Tensor::zeros(&[2 * d]));
    p.insert(format!("{s}.w.w"), glorot(rng, d, d));
    p.insert(format!("{s}.w.b"), Tensor::zeros(&[d]));
    p.insert(format!("{s}.lne.g"), Tensor::full(&[d], F::one()));
    p.insert(format!("{s}.lne.b"), Tensor::zeros(&[d]));
    p.insert(format!("{s}.theta3.w"), glorot(rng, d, d));
    p.insert(format!("{s}.theta3.b"), Tensor::zeros(&[d]));
    p.insert(format!("{s}.wp.w"), glorot(rng, d, d));
    p.insert(format!("{s}.wp.b"), Tensor::zeros(&[d]));
    p.insert(format!("{s}.lnv.g"), Tensor::full(&[d], F::one()));
    p.insert(format!("{s}.lnv.b"), Tensor::zeros(&[d]));
}

/// Softmax over nodes of the row sums of `q * key^T`, scaled by `1/sqrt(d)`.
///
/// `q: [B, P, d]`, `key: [P, d]` or `[B, P, d]`; result `[B, P]`.
pub fn attention_scores<F: Scalar>(g: &mut Graph<F>, q: Var, key: Var) -> Var {
    let d = *g.shape(q).last().unwrap();
    let infl = g.matmul(q, key, false, true);
    let rows = g.sum_last(infl);
    let rows = g.scale(rows, F::c(1.0 / (d as f64).sqrt()));
    g.softmax_last(rows)
}

/// Node scores and values: `[Q | X] = Z Theta2 + b2`, scores from `Q` against
/// the stage-1 key.  Returns `(att [B, P], values [B, P, d])`.
pub fn node_attention<F: Scalar>(g: &mut Graph<F>, b: &Bound, layer: usize, z: Var, key: Var) -> (Var, Var) {
    let d = *g.shape(z).last().unwrap();
    let s = format!("prop{layer}");
    let qx = g.linear(z, b.var(&format!("{s}.theta2.w")), b.var(&format!("{s}.theta2.b")));
    let q = g.narrow(qx, 2, 0, d);
    let x = g.narrow(qx, 2, d, d);
    (attention_scores(g, q, key), x)
}

/// Inputs of one propagation layer.
pub struct LayerStructure<'a, F> {
    /// Stage-1 key, node-major.
    pub key1: Var,
    /// Stage-2 key, node-major.
    pub key2: Var,
    /// Stage-1 membership `[Bh, E, P]` with `Bh` 1 or the batch size.
    pub h1: &'a Tensor<F>,
    /// Stage-2 membership `[Bh, E, P]`.
    pub h2: &'a Tensor<F>,
}

/// Values recorded for inspection.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub att_v: Var,
    pub att_e: Var,
    pub edges: Var,
}

/// First half of a layer: node scores, values and edge features
/// `Xe = LN(W (H1 . att) Xv)`.  Returns `(att_v, xv, xe)`.
pub fn edge_features<F: Scalar>(
    g: &mut Graph<F>,
    b: &Bound,
    layer: usize,
    z: Var,
    key1: Var,
    h1: &Tensor<F>,
) -> (Var, Var, Var) {
    let shape = g.shape(z).to_vec();
    let (batch, n) = (shape[0], shape[1]);
    let s = format!("prop{layer}");
    let (att_v, xv) = node_attention(g, b, layer, z, key1);
    let h1 = g.constant(h1.clone());
    let att_row = g.reshape(att_v, &[batch, 1, n]);
    let w1 = g.mul(h1, att_row);
    let agg = g.matmul(w1, xv, false, false);
    let xe = g.linear(agg, b.var(&format!("{s}.w.w")), b.var(&format!("{s}.w.b")));
    let xe = g.layer_norm(xe, b.var(&format!("{s}.lne.g")), b.var(&format!("{s}.lne.b")), F::c(LN_EPS));
    (att_v, xv, xe)
}

/// Second half: edge scores against the stage-2 key, written back to nodes
/// through the stage-2 incidence.  Returns `(out, att_e)`.
pub fn node_update<F: Scalar>(
    g: &mut Graph<F>,
    b: &Bound,
    layer: usize,
    xv: Var,
    xe: Var,
    st: &LayerStructure<'_, F>,
) -> (Var, Var) {
    let shape = g.shape(xv).to_vec();
    let (batch, n) = (shape[0], shape[1]);
    let s = format!("prop{layer}");
    let qe = g.linear(xe, b.var(&format!("{s}.theta3.w")), b.var(&format!("{s}.theta3.b")));
    let att_e = attention_scores(g, qe, st.key2);
    let h2t = transpose_membership(st.h2);
    let h2t = g.constant(h2t);
    let att_e_row = g.reshape(att_e, &[batch, 1, n]);
    let w2 = g.mul(h2t, att_e_row);
    let back = g.matmul(w2, xe, false, false);
    let res = g.add(xv, back);
    let out = g.linear(res, b.var(&format!("{s}.wp.w")), b.var(&format!("{s}.wp.b")));
    let out = g.layer_norm(out, b.var(&format!("{s}.lnv.g")), b.var(&format!("{s}.lnv.b")), F::c(LN_EPS));
    (out, att_e)
}

/// One hypergraph layer over `z: [B, P, d]`.
pub fn propagate<F: Scalar>(
    g: &mut Graph<F>,
    b: &Bound,
    layer: usize,
    z: Var,
    st: &LayerStructure<'_, F>,
) -> (Var, LayerTrace) {
    let (att_v, xv, xe) = edge_features(g, b, layer, z, st.key1, st.h1);
    let (out, att_e) = node_update(g, b, layer, xv, xe, st);
    (out, LayerTrace { att_v, att_e, edges: xe })
}

/// Plain self-attention replacement for [`propagate`] (ablation).
pub fn self_attention_layer<F: Scalar>(g: &mut Graph<F>, b: &Bound, layer: usize, z: Var) -> (Var, LayerTrace) {
    let d = *g.shape(z).last().unwrap();
    let s = format!("prop{layer}");
    let qx = g.linear(z, b.var(&format!("{s}.theta2.w")), b.var(&format!("{s}.theta2.b")));
    let q = g.narrow(qx, 2, 0, d);
    let xv = g.narrow(qx, 2, d, d);
    let k = g.linear(z, b.var(&format!("{s}.theta3.w")), b.var(&format!("{s}.theta3.b")));
    let scores = g.matmul(q, k, false, true);
    let scores = g.scale(scores, F::c(1.0 / (d as f64).sqrt()));
    let att = g.softmax_last(scores);
    let mixed = g.matmul(att, xv, false, false);
    let res = g.add(xv, mixed);
    let out = g.linear(res, b.var(&format!("{s}.wp.w")), b.var(&format!("{s}.wp.b")));
    let out = g.layer_norm(out, b.var(&format!("{s}.lnv.g")), b.var(&format!("{s}.lnv.b")), F::c(LN_EPS));
    // Row-mean of the attention matrix stands in for node scores.
    let att_v = g.mean_axis(att, 1);
    (out, LayerTrace { att_v, att_e: att_v, edges: mixed })
}

fn transpose_membership<F: Scalar>(h: &Tensor<F>) -> Tensor<F> {
    let (bh, e, n) = (h.dim(0), h.dim(1), h.dim(2));
    let mut out = vec![F::zero(); h.numel()];
    for p in 0..bh {
        for i in 0..e {
            for j in 0..n {
                out[p * e * n + j * e + i] = h.data()[p * e * n + i * n + j];
            }
        }
    }
    Tensor::new(vec![bh, n, e], out)
}

/// Stack per-sample (or one shared) memberships into `[Bh, E, P]`.
pub fn stack_masks<F: Scalar>(edges: &[Hyperedges]) -> Tensor<F> {
    let n = edges[0].len();
    let mut data = Vec::with_capacity(edges.len() * n * n);
    for e in edges {
        data.extend_from_slice(e.mask::<F>().data());
    }
    Tensor::new(vec![edges.len(), n, n], data)
}

/// Share of each input type among the members of every edge.
pub fn type_proportions(edges: &Hyperedges, nodes_per_type: usize, types: usize) -> Vec<Vec<f64>> {
    edges
        .members
        .iter()
        .map(|m| {
            let mut counts = vec![0.0; types];
            for &v in m {
                counts[v / nodes_per_type] += 1.0;
            }
            let total = m.len() as f64;
            counts.iter().map(|c| c / total).collect()
        })
        .collect()
}

/// Tab-separated membership and type-proportion table.
pub fn composition_table(edges: &Hyperedges, nodes_per_type: usize, type_names: &[&str]) -> String {
    let props = type_proportions(edges, nodes_per_type, type_names.len());
    let mut s = String::from("edge");
    for t in type_names {
        write!(s, "\t{t}").unwrap();
    }
    s.push_str("\tmembers\n");
    for (e, (m, p)) in edges.members.iter().zip(&props).enumerate() {
        write!(s, "{e}").unwrap();
        for v in p {
            write!(s, "\t{v:.6}").unwrap();
        }
        let list: Vec<String> = m.iter().map(|v| v.to_string()).collect();
        writeln!(s, "\t{}", list.join(",")).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::check::{max_rel_error_sampled, random};
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(n: usize, d: usize) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = ParamSet::new();
        init_structure_state(&mut p, &mut rng, 1, n, d);
        init_structure_state(&mut p, &mut rng, 2, n, d);
        init_propagation(&mut p, &mut rng, 0, d);
        p
    }

    #[test]
    fn shared_features_shape_and_determinism() {
        let p = params(48, 16);
        let m = shared_node_matrix(&p, 1);
        assert_eq!(m.shape(), &[16, 48]);
        assert_eq!(m, shared_node_matrix(&p, 1));
        assert_ne!(m, shared_node_matrix(&p, 2));
    }

    #[test]
    fn shared_feature_gradients_match_finite_differences() {
        let p = params(10, 6);
        let names: Vec<String> = p.names().iter().filter(|n| n.starts_with("hg1.") && !n.contains("pair")).cloned().collect();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        let err = max_rel_error_sampled(&inputs, 16, |g, vars| {
            let mut b = p.bind_frozen(g);
            for (n, &v) in names.iter().zip(vars) {
                b.replace(p.position(n).unwrap(), v);
            }
            shared_node_features(g, &b, 1)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn forced_connections_and_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mt = random(&[6, 4], 3);
        let always = PairHead {
            w: Tensor::zeros(&[8, 2]),
            b: [-50.0, 50.0],
            tau: 1.0,
        };
        assert!(learn_connection_matrix(&mt, &always, Mode::Infer, &mut rng).data().iter().all(|&v| v == 1.0));
        let never = PairHead {
            b: [50.0, -50.0],
            ..always
        };
        for mode in [Mode::Infer, Mode::Train] {
            let c = learn_connection_matrix(&mt, &never, mode, &mut rng);
            for i in 0..6 {
                assert_eq!(c.at2(i, i), 1.0);
            }
        }
    }

    #[test]
    fn connection_matrix_matches_pairwise_scalar_oracle() {
        let (n, d) = (7, 5);
        let mt = random(&[n, d], 4);
        let head = PairHead {
            w: random(&[2 * d, 2], 5),
            b: [0.1, -0.3],
            tau: 0.8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut probe = rng.clone();
        let c = learn_connection_matrix(&mt, &head, Mode::Train, &mut rng);
        let c_inf = learn_connection_matrix(&mt, &head, Mode::Infer, &mut rng);
        for i in 0..n {
            for j in 0..n {
                let concat: Vec<f64> = mt.row(i).iter().chain(mt.row(j)).copied().collect();
                let mut l = head.b;
                for (k, v) in concat.iter().enumerate() {
                    l[0] += v * head.w.at2(k, 0);
                    l[1] += v * head.w.at2(k, 1);
                }
                let p1 = l[1].exp() / (l[0].exp() + l[1].exp());
                let (g0, g1) = (gumbel(&mut probe), gumbel(&mut probe));
                let soft = crate::robustness::soft_keep(p1, g0, g1, head.tau);
                let (want, want_inf) = if i == j { (1.0, 1.0) } else { (soft, f64::from(u8::from(p1 >= 0.5))) };
                assert!((c.at2(i, j) - want).abs() < 1e-12, "({i},{j})");
                assert_eq!(c_inf.at2(i, j), want_inf);
            }
        }
    }

    fn path_graph() -> Tensor<f64> {
        Tensor::new(vec![3, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0])
    }

    #[test]
    fn three_node_path_by_hand() {
        let r = random_walk_relevance(&path_graph(), 0.5, 1).unwrap();
        // P rows: (1/2, 1/2, 0), (1/3, 1/3, 1/3), (0, 1/2, 1/2).
        let p = [[0.5, 0.5, 0.0], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], [0.0, 0.5, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.5 } else { 0.0 } + 0.25 * p[i][j];
                assert_eq!(r.at2(i, j), want, "({i},{j})");
            }
        }
    }

    #[test]
    fn full_restart_is_identity() {
        for steps in [0, 1, 4] {
            let r = random_walk_relevance(&path_graph(), 1.0, steps).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(r.at2(i, j), f64::from(u8::from(i == j)));
                }
            }
        }
        assert!(random_walk_relevance(&path_graph(), 1.5, 1).is_err());
        assert!(random_walk_relevance(&path_graph(), -0.1, 1).is_err());
    }

    proptest! {
        #[test]
        fn rows_keep_their_mass(
            seed in 0u64..500,
            alpha in 0.0f64..=1.0,
            steps in 0usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let mut c = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect());
            for i in 0..n {
                c.data_mut()[i * n + i] = 1.0;
            }
            let p = transition_matrix(&c);
            for i in 0..n {
                prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let r = random_walk_relevance(&c, alpha, steps).unwrap();
            let want: f64 = (0..=steps).map(|k| alpha * (1.0 - alpha).powi(k as i32)).sum();
            for i in 0..n {
                prop_assert!((r.row(i).iter().sum::<f64>() - want).abs() < 1e-9);
            }
        }

        #[test]
        fn every_edge_has_anchor_plus_k(seed in 0u64..500, k in 1usize..20) {
            let rel = random(&[20, 20], seed);
            let h = build_hyperedges(&rel, k.min(19)).unwrap();
            for (i, m) in h.members.iter().enumerate() {
                prop_assert_eq!(m.len(), k.min(19) + 1);
                prop_assert!(m.contains(&i));
                prop_assert!(h.incidence[i].contains(&i));
            }
        }
    }

    #[test]
    fn exhaustive_k_gives_complete_edges() {
        let h = build_hyperedges(&random(&[48, 48], 1), 47).unwrap();
        assert!(h.members.iter().all(|m| m.len() == 48));
        assert!(build_hyperedges(&random(&[48, 48], 1), 48).is_err());
    }

    #[test]
    fn equal_relevance_picks_lowest_indices() {
        let n = 10;
        let rel = Tensor::full(&[n, n], 0.3);
        let h = build_hyperedges(&rel, 4).unwrap();
        for i in 0..n {
            // Sort-with-index oracle.
            let mut cand: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (rel.at2(i, j), j)).collect();
            cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = cand[..4].iter().map(|c| c.1).collect();
            want.push(i);
            want.sort_unstable();
            assert_eq!(h.members[i], want);
        }
        assert_eq!(h.members[0], vec![0, 1, 2, 3, 4]);
        assert_eq!(h.members[2], vec![0, 1, 2, 3, 4]);
        assert_eq!(h.members[9], vec![0, 1, 2, 3, 9]);
    }

    #[test]
    fn knn_picks_closest_points() {
        // Points on a line at 0, 1, 2, ..., 5.
        let pts: Vec<f64> = (0..6).map(f64::from).collect();
        let h = knn_hyperedges(&pts, 6, 2).unwrap();
        assert_eq!(h.members[0], vec![0, 1, 2]);
        assert_eq!(h.members[3], vec![2, 3, 4]);
        assert_eq!(h.members[5], vec![3, 4, 5]);
    }

    #[test]
    fn proportions_sum_to_one() {
        let h = build_hyperedges(&random(&[48, 48], 3), 12).unwrap();
        for p in type_proportions(&h, 16, 3) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let table = composition_table(&h, 16, &["ts", "img", "exp"]);
        assert!(table.starts_with("edge\tts\timg\texp\tmembers\n"));
        assert_eq!(table.lines().count(), 49);
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::full(&[1, 48, 8], 0.7));
        let key = g.constant(random(&[48, 8], 2));
        let att = attention_scores(&mut g, q, key);
        for &a in g.value(att).data() {
            assert!((a - 1.0 / 48.0).abs() < 1e-12);
        }
    }

    fn layer_inputs(n: usize, d: usize, batch: usize) -> (ParamSet<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let p = params(n, d);
        let z = random(&[batch, n, d], 30);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rel1 = random(&[n, n], 31);
        let h1 = stack_masks::<f64>(&[build_hyperedges(&rel1, 5).unwrap()]);
        let per_sample: Vec<Hyperedges> = (0..batch)
            .map(|_| {
                let rel = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect());
                build_hyperedges(&rel, 7).unwrap()
            })
            .collect();
        let h2 = stack_masks::<f64>(&per_sample);
        (p, z, h1, h2)
    }

    /// Direct loop evaluation of one layer for a single sample.
    #[allow(clippy::needless_range_loop)]
    fn naive_layer(p: &ParamSet<f64>, z: &[f64], n: usize, d: usize, e1: &Hyperedges, e2: &Hyperedges) -> Vec<f64> {
        let m1 = shared_node_matrix(p, 1);
        let m2 = shared_node_matrix(p, 2);
        let get = |name: &str| p.get(name).unwrap().clone();
        let affine = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            (0..w.dim(1))
                .map(|o| b.data()[o] + (0..w.dim(0)).map(|i| x[i] * w.at2(i, o)).sum::<f64>())
                .collect()
        };
        let ln = |x: &[f64], gname: &str, bname: &str| -> Vec<f64> {
            let (gn, bn) = (get(gname), get(bname));
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * gn.data()[i] + bn.data()[i])
                .collect()
        };
        let softmax = |x: &[f64]| -> Vec<f64> {
            let mx = x.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let scale = 1.0 / (d as f64).sqrt();
        let (t2w, t2b) = (get("prop0.theta2.w"), get("prop0.theta2.b"));
        let mut q = vec![vec![0.0; d]; n];
        let mut xv = vec![vec![0.0; d]; n];
        for i in 0..n {
            let qx = affine(&z[i * d..(i + 1) * d], &t2w, &t2b);
            q[i] = qx[..d].to_vec();
            xv[i] = qx[d..].to_vec();
        }
        let row_agg: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..n {
                    for k in 0..d {
                        s += q[i][k] * m1.at2(k, j);
                    }
                }
                s * scale
            })
            .collect();
        let att_v = softmax(&row_agg);
        let mut xe = vec![vec![0.0; d]; n];
        for (e, members) in e1.members.iter().enumerate() {
            let mut acc = vec![0.0; d];
            for &k in members {
                for c in 0..d {
                    acc[c] += att_v[k] * xv[k][c];
                }
            }
            xe[e] = ln(&affine(&acc, &get("prop0.w.w"), &get("prop0.w.b")), "prop0.lne.g", "prop0.lne.b");
        }
        let (t3w, t3b) = (get("prop0.theta3.w"), get("prop0.theta3.b"));
        let edge_agg: Vec<f64> = (0..n)
            .map(|e| {
                let qe = affine(&xe[e], &t3w, &t3b);
                let mut s = 0.0;
                for j in 0..n {
                    for k in 0..d {
                        s += qe[k] * m2.at2(k, j);
                    }
                }
                s * scale
            })
            .collect();
        let att_e = softmax(&edge_agg);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let mut acc = xv[i].clone();
            for &e in &e2.incidence[i] {
                for c in 0..d {
                    acc[c] += att_e[e] * xe[e][c];
                }
            }
            out.extend(ln(&affine(&acc, &get("prop0.wp.w"), &get("prop0.wp.b")), "prop0.lnv.g", "prop0.lnv.b"));
        }
        out
    }

    fn run_layer(p: &ParamSet<f64>, z: &Tensor<f64>, h1: &Tensor<f64>, h2: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let key1 = shared_node_features(&mut g, &b, 1);
        let key2 = shared_node_features(&mut g, &b, 2);
        let zv = g.constant(z.clone());
        let st = LayerStructure { key1, key2, h1, h2 };
        let (out, trace) = propagate(&mut g, &b, 0, zv, &st);
        (g.value(out).clone(), g.value(trace.att_v).clone(), g.value(trace.att_e).clone())
    }

    #[test]
    fn layer_matches_loop_reference() {
        let (n, d, batch) = (48, 8, 2);
        let (p, z, h1, h2) = layer_inputs(n, d, batch);
        let (out, att_v, att_e) = run_layer(&p, &z, &h1, &h2);
        assert_eq!(out.shape(), &[batch, n, d]);
        let e1 = build_hyperedges(&random(&[n, n], 31), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for s in 0..batch {
            let rel = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect());
            let e2 = build_hyperedges(&rel, 7).unwrap();
            let want = naive_layer(&p, &z.data()[s * n * d..(s + 1) * n * d], n, d, &e1, &e2);
            let got = &out.data()[s * n * d..(s + 1) * n * d];
            let worst = want.iter().zip(got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-6, "sample {s}: {worst}");
        }
        for att in [&att_v, &att_e] {
            for row in att.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_attended_node_isolates_edge_features() {
        // With all node attention on node k, an edge's features depend only
        // on node k's values; perturbing other nodes changes nothing.
        let (n, d) = (12, 4);
        let p = params(n, d);
        let e1 = build_hyperedges(&random(&[n, n], 2), 3).unwrap();
        let h1 = e1.mask::<f64>().reshape(&[1, n, n]);
        let k = 5;
        let edges = |z: &Tensor<f64>| {
            let mut g = Graph::new();
            let b = p.bind_frozen(&mut g);
            let zv = g.constant(z.clone());
            let qx = g.linear(zv, b.var("prop0.theta2.w"), b.var("prop0.theta2.b"));
            let xv = g.narrow(qx, 2, d, d);
            let mut onehot = vec![0.0; n];
            onehot[k] = 1.0;
            let att = g.constant(Tensor::new(vec![1, 1, n], onehot));
            let hv = g.constant(h1.clone());
            let w1 = g.mul(hv, att);
            let agg = g.matmul(w1, xv, false, false);
            g.value(agg).clone()
        };
        let z = random(&[1, n, d], 4);
        let mut z2 = z.clone();
        for i in 0..n {
            if i != k {
                for c in 0..d {
                    z2.data_mut()[i * d + c] += 1.0;
                }
            }
        }
        let (a, b) = (edges(&z).reshape(&[n, d]), edges(&z2).reshape(&[n, d]));
        assert_eq!(a, b);
        for e in 0..n {
            let nonzero = a.row(e).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, e1.members[e].contains(&k));
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (n, d) = (12, 4);
        let (p, z, h1, h2) = layer_inputs(n, d, 2);
        let names: Vec<String> = p
            .names()
            .iter()
            .filter(|n| n.starts_with("prop0.") || (n.starts_with("hg") && !n.contains("pair")))
            // A shared shift of every query row moves all scores equally, so
            // these biases have (partly) zero gradient and the ratio is noise.
            .filter(|n| !n.ends_with("theta2.b") && !n.ends_with("theta3.b"))
            .cloned()
            .collect();
        let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        inputs.push(z);
        let err = max_rel_error_sampled(&inputs, 8, |g, vars| {
            let mut b = p.bind_frozen(g);
            for (nm, &v) in names.iter().zip(vars) {
                b.replace(p.position(nm).unwrap(), v);
            }
            let key1 = shared_node_features(g, &b, 1);
            let key2 = shared_node_features(g, &b, 2);
            let st = LayerStructure { key1, key2, h1: &h1, h2: &h2 };
            propagate(g, &b, 0, *vars.last().unwrap(), &st).0
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn self_attention_layer_runs() {
        let (n, d) = (16, 8);
        let p = params(n, d);
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let z = g.constant(random(&[3, n, d], 1));
        let (out, trace) = self_attention_layer(&mut g, &b, 0, z);
        assert_eq!(g.shape(out), &[3, n, d]);
        for row in g.value(trace.att_v).data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
