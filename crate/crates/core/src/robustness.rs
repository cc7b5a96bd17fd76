//! Learnable per-dimension masks and reliability weights for the node sets.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, Var};
use crate::params::{glorot, Bound, ParamSet};
use crate::tensor::{softmax_in_place, Scalar, Tensor};

/// Number of multiplicative noise levels probed per input type.
pub const NOISE_LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Soft Gumbel-softmax samples.
    Train,
    /// Deterministic threshold at probability 0.5.
    Infer,
}

/// Standard Gumbel draw `-ln(-ln u)` with `u` strictly inside (0, 1).
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// Gumbel noise tensor of the given shape.
pub fn gumbel_tensor<F: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| F::c(gumbel(rng))).collect())
}

/// Relaxed sample of the "keep" component given its probability `c1`.
pub fn soft_keep(c1: f64, g0: f64, g1: f64, tau: f64) -> f64 {
    let a = ((1.0 - c1).ln() + g0) / tau;
    let b = (c1.ln() + g1) / tau;
    // Two-way softmax, written as a logistic to stay finite.
    1.0 / (1.0 + (a - b).exp())
}

/// Value-level mask head: `theta` is `P x 2`, `bias` has length 2.
#[derive(Clone, Debug)]
pub struct MaskHead<F> {
    pub theta: Tensor<F>,
    pub bias: Tensor<F>,
    pub tau: f64,
}

pub fn init_mask_head<F: Scalar, R: Rng>(p: &mut ParamSet<F>, rng: &mut R, tag: &str, nodes: usize) {
    p.insert(format!("frf.{tag}.w"), glorot(rng, nodes, 2));
    // Start with most dimensions kept.
    p.insert(format!("frf.{tag}.b"), Tensor::from_f64(&[2], &[0.0, 2.0]));
}

/// Masks feature columns of `z: [B, P, d]`.
///
/// `noise` (`[B, d, 2]` Gumbel draws) is required in train mode.  Returns the
/// masked node set and the mask as `[B, 1, d]`.
pub fn redundancy_filter<F: Scalar>(
    g: &mut Graph<F>,
    b: &Bound,
    z: Var,
    tag: &str,
    mode: Mode,
    noise: Option<Tensor<F>>,
    tau: f64,
) -> (Var, Var) {
    let shape = g.shape(z).to_vec();
    let (batch, d) = (shape[0], shape[2]);
    let zt = g.transpose_last2(z);
    let logits = g.linear(zt, b.var(&format!("frf.{tag}.w")), b.var(&format!("frf.{tag}.b")));
    let mask = match mode {
        Mode::Train => {
            let noise = noise.expect("train-mode mask needs Gumbel noise");
            assert_eq!(noise.shape(), &[batch, d, 2]);
            let logp = g.log_softmax_last(logits);
            let n = g.constant(noise);
            let y = g.add(logp, n);
            let y = g.scale(y, F::c(1.0 / tau));
            let sm = g.softmax_last(y);
            let keep = g.narrow(sm, 2, 1, 1);
            g.reshape(keep, &[batch, 1, d])
        }
        Mode::Infer => {
            let probs = crate::tensor::softmax_last(g.value(logits));
            let hard: Vec<F> = probs
                .data()
                .chunks(2)
                .map(|c| if c[1] >= F::c(0.5) { F::one() } else { F::zero() })
                .collect();
            g.constant(Tensor::new(vec![batch, 1, d], hard))
        }
    };
    (g.mul(z, mask), mask)
}

/// Single node set (`P x d`) through a standalone head.
pub fn filter_nodes<F: Scalar, R: Rng>(
    z: &Tensor<F>,
    head: &MaskHead<F>,
    mode: Mode,
    rng: &mut R,
) -> (Tensor<F>, Vec<F>) {
    let (p, d) = (z.dim(0), z.dim(1));
    let mut params = ParamSet::new();
    params.insert("frf.x.w", head.theta.clone());
    params.insert("frf.x.b", head.bias.clone());
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let zv = g.constant(z.clone().reshape(&[1, p, d]));
    let noise = (mode == Mode::Train).then(|| gumbel_tensor(rng, &[1, d, 2]));
    let (out, mask) = redundancy_filter(&mut g, &b, zv, "x", mode, noise, head.tau);
    (
        g.value(out).clone().reshape(&[p, d]),
        g.value(mask).data().to_vec(),
    )
}

/// Spread of a classifier's output under noise: the per-class population
/// variance across levels, then max minus min over classes.
pub fn relative_variance(levels: &[Vec<f64>]) -> f64 {
    let n = levels.len() as f64;
    let classes = levels[0].len();
    let vars: Vec<f64> = (0..classes)
        .map(|c| {
            let mean = levels.iter().map(|l| l[c]).sum::<f64>() / n;
            levels.iter().map(|l| (l[c] - mean).powi(2)).sum::<f64>() / n
        })
        .collect();
    let max = vars.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = vars.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Reliability weight per input type.
///
/// For level `j = 1..=3` (outer) and each type (inner) the node values are
/// perturbed to `z * (G + 1) * j` with one fresh `G` per entry drawn from
/// `gauss` in row-major order, and the type's classifier returns class
/// probabilities.  Scores are `1 - softmax(relative variances)`.  A single
/// type gets weight 1, since the softmax would otherwise zero it.
pub fn reliability_scores_with<F: Scalar>(
    nodes: &[&[F]],
    classifiers: &[&dyn Fn(&[F]) -> Vec<f64>],
    gauss: &mut dyn FnMut() -> f64,
) -> Vec<f64> {
    assert_eq!(nodes.len(), classifiers.len());
    let types = nodes.len();
    if types < 2 {
        return vec![1.0; types];
    }
    let mut outputs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(NOISE_LEVELS); types];
    let mut buf: Vec<F> = Vec::new();
    for level in 1..=NOISE_LEVELS {
        let j = level as f64;
        for t in 0..types {
            buf.clear();
            buf.extend(nodes[t].iter().map(|&v| F::c(v.f64() * (gauss() + 1.0) * j)));
            outputs[t].push(classifiers[t](&buf));
        }
    }
    let mut rel: Vec<f64> = outputs.iter().map(|o| relative_variance(o)).collect();
    softmax_in_place(&mut rel);
    rel.iter().map(|s| 1.0 - s).collect()
}

/// [`reliability_scores_with`] drawing standard normals from `rng`.
pub fn reliability_scores<F: Scalar, R: Rng>(
    nodes: &[&[F]],
    classifiers: &[&dyn Fn(&[F]) -> Vec<f64>],
    rng: &mut R,
) -> Vec<f64> {
    reliability_scores_with(nodes, classifiers, &mut || StandardNormal.sample(rng))
}

pub fn apply_reliability<F: Scalar>(z: &Tensor<F>, s: f64) -> Tensor<F> {
    let s = F::c(s);
    z.map(|v| v * s)
}

/// Affine classifier over a flattened node set followed by softmax.
pub fn affine_probabilities<F: Scalar>(x: &[F], w: &Tensor<F>, b: &Tensor<F>) -> Vec<f64> {
    let (n_in, n_out) = (w.dim(0), w.dim(1));
    assert_eq!(x.len(), n_in);
    let mut out: Vec<f64> = b.data().iter().map(|v| v.f64()).collect();
    let wd = w.data();
    for (i, &xi) in x.iter().enumerate() {
        let xi = xi.f64();
        if xi == 0.0 {
            continue;
        }
        let row = &wd[i * n_out..(i + 1) * n_out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv.f64();
        }
    }
    softmax_in_place(&mut out);
    out
}
