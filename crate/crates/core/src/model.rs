//! The full classifier: encoders, masks, reliability weights, hypergraph
//! fusion and the four classification heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{AttentionKind, Construction, FeatureConfig, ModelConfig, RunConfig, ENCODER_WIDTH};
use crate::dataset::znormalize;
use crate::encoders::{self, InputType, MIN_TS_LENGTH};
use crate::error::{GfefError, Result};
use crate::features::{expert_features, render_curve_image, IMAGE_CHANNELS, IMAGE_SIZE, NUM_EXPERT_FEATURES};
use crate::graph::{Graph, Var};
use crate::hypergraph::{self, Hyperedges, LayerStructure, LayerTrace, PairHead};
use crate::params::{glorot, Bound, ParamSet};
use crate::robustness::{self, gumbel_tensor, Mode};
use crate::tensor::{Scalar, Tensor};

/// Floor for the JS-divergence logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Everything that fixes parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub series_length: usize,
    pub num_classes: usize,
}

impl Layout {
    pub fn new(cfg: &RunConfig, series_length: usize, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if series_length < MIN_TS_LENGTH {
            return Err(GfefError::InvalidArgument(format!(
                "series length {series_length} is below the minimum of {MIN_TS_LENGTH}"
            )));
        }
        if num_classes < 2 {
            return Err(GfefError::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
        }
        Ok(Layout {
            model: cfg.model.clone(),
            features: cfg.features.clone(),
            series_length,
            num_classes,
        })
    }

    pub fn types(&self) -> Vec<InputType> {
        let mut t = vec![InputType::Ts];
        if self.features.use_image {
            t.push(InputType::Img);
        }
        if self.features.use_expert {
            t.push(InputType::Exp);
        }
        t
    }

    /// Total node count across active types.
    pub fn nodes(&self) -> usize {
        self.types().len() * self.model.nodes_per_type
    }

    fn uses_stage2(&self) -> bool {
        self.features.dynamic_hyperedges && self.features.attention == AttentionKind::Hypergraph
    }

    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamSet<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (d, c) = (self.model.hidden_size, self.num_classes);
        let per_type = self.model.nodes_per_type * d;
        let types = self.types();
        encoders::init_ts_encoder(&mut p, &mut rng, self.series_length);
        if self.features.use_image {
            encoders::init_image_encoder(&mut p, &mut rng);
        }
        if self.features.use_expert {
            encoders::init_expert_encoder(&mut p, &mut rng);
        }
        for &ty in &types {
            encoders::init_patch_projection(&mut p, &mut rng, ty, self.model.patch_len, d);
            if self.features.use_frf {
                robustness::init_mask_head(&mut p, &mut rng, ty.tag(), self.model.nodes_per_type);
            }
            p.insert(format!("cl.{}.w", ty.tag()), glorot(&mut rng, per_type, c));
            p.insert(format!("cl.{}.b", ty.tag()), Tensor::zeros(&[c]));
        }
        if self.features.attention == AttentionKind::Hypergraph {
            hypergraph::init_structure_state(&mut p, &mut rng, 1, self.nodes(), d);
            if self.uses_stage2() {
                hypergraph::init_structure_state(&mut p, &mut rng, 2, self.nodes(), d);
            }
        }
        for l in 0..self.model.layers {
            hypergraph::init_propagation(&mut p, &mut rng, l, d);
        }
        p.insert("final.w", glorot(&mut rng, self.nodes() * d, c));
        p.insert("final.b", Tensor::zeros(&[c]));
        p
    }
}

/// Mean and spread of the expert features over a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; NUM_EXPERT_FEATURES],
    pub std: [f64; NUM_EXPERT_FEATURES],
}

impl Standardizer {
    pub fn identity() -> Self {
        Standardizer {
            mean: [0.0; NUM_EXPERT_FEATURES],
            std: [1.0; NUM_EXPERT_FEATURES],
        }
    }

    /// Population statistics; a feature with (near) zero spread keeps unit
    /// scale so it maps to zero.
    pub fn fit(samples: &[Prepared]) -> Self {
        let n = samples.len().max(1) as f64;
        let mut mean = [0.0; NUM_EXPERT_FEATURES];
        let mut std = [0.0; NUM_EXPERT_FEATURES];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(&s.expert) {
                *m += v / n;
            }
        }
        for s in samples {
            for k in 0..NUM_EXPERT_FEATURES {
                std[k] += (s.expert[k] - mean[k]).powi(2) / n;
            }
        }
        for v in std.iter_mut() {
            *v = v.sqrt();
            if *v < 1e-12 {
                *v = 1.0;
            }
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, raw: &[f64; NUM_EXPERT_FEATURES]) -> [f64; NUM_EXPERT_FEATURES] {
        std::array::from_fn(|k| (raw[k] - self.mean[k]) / self.std[k])
    }
}

/// Model inputs derived from one raw series.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub series: Vec<f64>,
    pub image: Vec<f64>,
    /// Raw (unstandardized) expert features.
    pub expert: [f64; NUM_EXPERT_FEATURES],
    /// Content hash of the raw series; seeds inference-time noise.
    pub content_seed: u64,
}

/// First 8 bytes of SHA-256 over the little-endian values.
pub fn content_seed(series: &[f64]) -> u64 {
    let mut h = Sha256::new();
    for v in series {
        h.update(v.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn prepare(series: &[f64], normalize: bool) -> Result<Prepared> {
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(GfefError::NonFinite { index: i });
    }
    let s = if normalize { znormalize(series) } else { series.to_vec() };
    let expert = expert_features(&s)?;
    let image = render_curve_image(&s)?;
    Ok(Prepared {
        expert: expert.as_slice().try_into().expect("12 features"),
        image: image.pixels().to_vec(),
        series: s,
        content_seed: content_seed(series),
    })
}

/// A stacked batch ready for the graph.
pub struct Batch<F> {
    pub series: Tensor<F>,
    pub images: Tensor<F>,
    pub expert: Tensor<F>,
    /// Seed of each sample's reliability-noise stream.
    pub dra_seeds: Vec<u64>,
}

impl<F: Scalar> Batch<F> {
    pub fn new(samples: &[&Prepared], std: &Standardizer, dra_seeds: Vec<u64>) -> Self {
        let b = samples.len();
        let t = samples[0].series.len();
        let mut series = Vec::with_capacity(b * t);
        let mut images = Vec::with_capacity(b * IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS);
        let mut expert = Vec::with_capacity(b * NUM_EXPERT_FEATURES);
        for s in samples {
            assert_eq!(s.series.len(), t);
            series.extend(s.series.iter().map(|&v| F::c(v)));
            images.extend(s.image.iter().map(|&v| F::c(v)));
            expert.extend(std.apply(&s.expert).iter().map(|&v| F::c(v)));
        }
        assert_eq!(dra_seeds.len(), b);
        Batch {
            series: Tensor::new(vec![b, t, 1], series),
            images: Tensor::new(vec![b, IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS], images),
            expert: Tensor::new(vec![b, NUM_EXPERT_FEATURES], expert),
            dra_seeds,
        }
    }

    /// Inference batch: noise seeded by content.
    pub fn for_inference(samples: &[&Prepared], std: &Standardizer) -> Self {
        let seeds = samples.iter().map(|s| s.content_seed).collect();
        Self::new(samples, std, seeds)
    }

    pub fn len(&self) -> usize {
        self.dra_seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dra_seeds.is_empty()
    }
}

/// Hyperedges of both stages; one entry when shared by the batch, one per
/// sample otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Structures {
    pub stage1: Vec<Hyperedges>,
    pub stage2: Vec<Hyperedges>,
}

/// Discrete choices and stop-gradient values replayed from an earlier pass,
/// so a perturbed pass differs only through differentiable paths.
#[derive(Clone, Debug, PartialEq)]
pub struct Pins {
    pub structures: Option<Structures>,
    /// Per sample, per active type.
    pub scores: Vec<Vec<f64>>,
    /// Per type, the inference-mode masks (`[B, 1, d]`).
    pub masks: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Seeds mask and connection Gumbel noise in train mode.
    pub noise_seed: u64,
    pub pins: Option<&'a Pins>,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Intermediate classifier logits per active type.
    pub inter: Vec<(InputType, Var)>,
    /// Reliability weights per sample, per active type.
    pub scores: Vec<Vec<f64>>,
    pub structures: Option<Structures>,
    pub traces: Vec<LayerTrace>,
    /// Masks per active type (`[B, 1, d]`), when filtering is on.
    pub masks: Vec<Var>,
}

impl ForwardOutput {
    /// Replay data for a pinned re-evaluation.
    pub fn pins<F: Scalar>(&self, g: &Graph<F>, mode: Mode) -> Pins {
        Pins {
            structures: self.structures.clone(),
            scores: self.scores.clone(),
            masks: (mode == Mode::Infer)
                .then(|| self.masks.iter().map(|&m| g.value(m).to_f64_vec()).collect()),
        }
    }
}

const FRF_STREAM: u64 = 1;
const STAGE1_STREAM: u64 = 2;
const STAGE2_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn pair_head<F: Scalar>(g: &Graph<F>, b: &Bound, stage: usize, tau: f64) -> PairHead {
    let w = g.value(b.var(&format!("hg{stage}.pair.w"))).cast();
    let bias = g.value(b.var(&format!("hg{stage}.pair.b")));
    PairHead {
        w,
        b: [bias.data()[0].f64(), bias.data()[1].f64()],
        tau,
    }
}

fn per_sample_knn<F: Scalar>(values: &Tensor<F>, k: usize) -> Result<Vec<Hyperedges>> {
    let (b, n) = (values.dim(0), values.dim(1));
    (0..b)
        .map(|s| hypergraph::knn_hyperedges(values.row(s), n, k))
        .collect()
}

/// Builds the whole network for one batch.
pub fn forward<F: Scalar>(
    layout: &Layout,
    g: &mut Graph<F>,
    b: &Bound,
    batch: &Batch<F>,
    opts: &ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    let m = &layout.model;
    let fc = &layout.features;
    let bsz = batch.len();
    let (p, d) = (m.nodes_per_type, m.hidden_size);
    if batch.series.dim(1) != layout.series_length {
        return Err(GfefError::LengthMismatch {
            expected: layout.series_length,
            found: batch.series.dim(1),
        });
    }
    let types = layout.types();

    // Per-type encoders and patch projection.
    let mut nodes: Vec<Var> = Vec::with_capacity(types.len());
    for &ty in &types {
        let feat = match ty {
            InputType::Ts => {
                let x = g.constant(batch.series.clone());
                encoders::ts_encoder(g, b, x)
            }
            InputType::Img => {
                let x = g.constant(batch.images.clone());
                encoders::image_encoder(g, b, x)
            }
            InputType::Exp => {
                let x = g.constant(batch.expert.clone());
                encoders::expert_encoder(g, b, x)
            }
        };
        debug_assert_eq!(g.shape(feat), &[bsz, ENCODER_WIDTH]);
        nodes.push(encoders::patchify_project(g, b, feat, ty, m.patch_len));
    }

    // Redundancy filtering.
    let mut masks = Vec::new();
    if fc.use_frf {
        let mut rng = stream(opts.noise_seed, FRF_STREAM);
        for (i, &ty) in types.iter().enumerate() {
            let pinned = opts.pins.and_then(|p| p.masks.as_ref()).map(|m| &m[i]);
            let (out, mask) = match (opts.mode, pinned) {
                (Mode::Infer, Some(mv)) => {
                    let mask = g.constant(Tensor::from_f64(&[bsz, 1, d], mv));
                    (g.mul(nodes[i], mask), mask)
                }
                (Mode::Train, _) => {
                    let noise = gumbel_tensor(&mut rng, &[bsz, d, 2]);
                    robustness::redundancy_filter(g, b, nodes[i], ty.tag(), Mode::Train, Some(noise), m.tau)
                }
                (Mode::Infer, None) => robustness::redundancy_filter(g, b, nodes[i], ty.tag(), Mode::Infer, None, m.tau),
            };
            nodes[i] = out;
            masks.push(mask);
        }
    }

    // Intermediate heads on the filtered, unweighted nodes.
    let mut inter = Vec::with_capacity(types.len());
    for (i, &ty) in types.iter().enumerate() {
        let flat = g.reshape(nodes[i], &[bsz, p * d]);
        let logits = g.linear(flat, b.var(&format!("cl.{}.w", ty.tag())), b.var(&format!("cl.{}.b", ty.tag())));
        inter.push((ty, logits));
    }

    // Reliability weights, treated as constants.
    let scores: Vec<Vec<f64>> = match opts.pins {
        Some(pins) => pins.scores.clone(),
        None if fc.use_dra => {
            let heads: Vec<(Tensor<F>, Tensor<F>)> = types
                .iter()
                .map(|ty| {
                    (
                        g.value(b.var(&format!("cl.{}.w", ty.tag()))).clone(),
                        g.value(b.var(&format!("cl.{}.b", ty.tag()))).clone(),
                    )
                })
                .collect();
            let classifiers: Vec<Box<dyn Fn(&[F]) -> Vec<f64> + '_>> = heads
                .iter()
                .map(|(w, bias)| Box::new(move |x: &[F]| robustness::affine_probabilities(x, w, bias)) as Box<dyn Fn(&[F]) -> Vec<f64>>)
                .collect();
            let cls_refs: Vec<&dyn Fn(&[F]) -> Vec<f64>> = classifiers.iter().map(|c| c.as_ref()).collect();
            (0..bsz)
                .map(|s| {
                    let per_type: Vec<&[F]> = nodes.iter().map(|&v| g.value(v).row(s)).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(batch.dra_seeds[s]);
                    robustness::reliability_scores(&per_type, &cls_refs, &mut rng)
                })
                .collect()
        }
        None => vec![vec![1.0; types.len()]; bsz],
    };
    let mut weighted = Vec::with_capacity(types.len());
    for (i, &v) in nodes.iter().enumerate() {
        let s: Vec<F> = scores.iter().map(|row| F::c(row[i])).collect();
        let sv = g.constant(Tensor::new(vec![bsz, 1, 1], s));
        weighted.push(g.mul(v, sv));
    }
    let mut z = g.concat(&weighted, 1);
    let n = layout.nodes();

    let mut traces = Vec::with_capacity(m.layers);
    let mut structures = None;
    if fc.attention == AttentionKind::SelfAttention {
        for l in 0..m.layers {
            let (out, trace) = hypergraph::self_attention_layer(g, b, l, z);
            z = out;
            traces.push(trace);
        }
    } else {
        let key1 = hypergraph::shared_node_features(g, b, 1);
        let key2 = if layout.uses_stage2() {
            hypergraph::shared_node_features(g, b, 2)
        } else {
            key1
        };
        let pinned = opts.pins.and_then(|p| p.structures.clone());
        let stage1 = match (&pinned, fc.construction) {
            (Some(s), _) => s.stage1.clone(),
            (None, Construction::Rwhc) => {
                let mt = g.value(key1).cast::<f64>();
                let head = pair_head(g, b, 1, m.tau);
                let mut rng = stream(opts.noise_seed, STAGE1_STREAM);
                vec![hypergraph::rwhc_structure(&mt, &head, m.alpha, m.walk_steps, m.top_k, opts.mode, &mut rng)?]
            }
            (None, Construction::Knn) => per_sample_knn(g.value(z), m.top_k)?,
        };
        let shared_stage2 = match (&pinned, fc.construction) {
            (Some(s), _) => Some(s.stage2.clone()),
            (None, _) if !layout.uses_stage2() => Some(stage1.clone()),
            (None, Construction::Rwhc) => {
                let mt = g.value(key2).cast::<f64>();
                let head = pair_head(g, b, 2, m.tau);
                let mut rng = stream(opts.noise_seed, STAGE2_STREAM);
                Some(vec![hypergraph::rwhc_structure(&mt, &head, m.alpha, m.walk_steps, m.top_k, opts.mode, &mut rng)?])
            }
            // Decided per layer from the edge features.
            (None, Construction::Knn) => None,
        };
        let h1 = hypergraph::stack_masks::<F>(&stage1);
        let mut stage2_used = shared_stage2.clone();
        for l in 0..m.layers {
            let (att_v, xv, xe) = hypergraph::edge_features(g, b, l, z, key1, &h1);
            let stage2 = match &shared_stage2 {
                Some(s) => s.clone(),
                None => per_sample_knn(g.value(xe), m.top_k)?,
            };
            let h2 = hypergraph::stack_masks::<F>(&stage2);
            let st = LayerStructure {
                key1,
                key2,
                h1: &h1,
                h2: &h2,
            };
            let (out, att_e) = hypergraph::node_update(g, b, l, xv, xe, &st);
            traces.push(LayerTrace { att_v, att_e, edges: xe });
            z = out;
            if stage2_used.is_none() {
                stage2_used = Some(stage2);
            }
        }
        structures = Some(Structures {
            stage1,
            stage2: stage2_used.expect("at least one layer"),
        });
    }
    debug_assert_eq!(g.shape(z), &[bsz, n, d]);
    let flat = g.reshape(z, &[bsz, n * d]);
    let logits = g.linear(flat, b.var("final.w"), b.var("final.b"));
    Ok(ForwardOutput {
        logits,
        inter,
        scores,
        structures,
        traces,
        masks,
    })
}

/// Graph handles of each loss term (batch means).
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce_final: Var,
    pub ce_inter: Vec<(InputType, Var)>,
    pub js: Vec<(InputType, Var)>,
}

/// Mean JS divergence between the rows of two logit matrices.
pub fn js_divergence_graph<F: Scalar>(g: &mut Graph<F>, logits_p: Var, logits_q: Var) -> Var {
    let p = g.softmax_last(logits_p);
    let q = g.softmax_last(logits_q);
    let sum = g.add(p, q);
    let mid = g.scale(sum, F::c(0.5));
    let floor = F::c(LOG_FLOOR);
    let log_m = g.log_floor(mid, floor);
    let mut halves = Vec::with_capacity(2);
    for x in [p, q] {
        let lx = g.log_floor(x, floor);
        let diff = g.sub(lx, log_m);
        let prod = g.mul(x, diff);
        halves.push(g.sum_last(prod));
    }
    let both = g.add(halves[0], halves[1]);
    let per_row = g.scale(both, F::c(0.5));
    g.mean_axis(per_row, 0)
}

/// Four cross-entropies plus JS(final, intermediate) per type, unit weights.
pub fn loss_graph<F: Scalar>(g: &mut Graph<F>, out: &ForwardOutput, labels: &[usize]) -> LossVars {
    let ce_final = g.cross_entropy(out.logits, labels);
    let mut total = ce_final;
    let mut ce_inter = Vec::new();
    let mut js = Vec::new();
    for &(ty, logits) in &out.inter {
        let ce = g.cross_entropy(logits, labels);
        let j = js_divergence_graph(g, out.logits, logits);
        let j = g.reshape(j, &[1]);
        total = g.add(total, ce);
        total = g.add(total, j);
        ce_inter.push((ty, ce));
        js.push((ty, j));
    }
    LossVars {
        total,
        ce_final,
        ce_inter,
        js,
    }
}

/// Output of the deterministic inference path for one series.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
    /// Reliability weight per input type in `InputType::ALL` order; an
    /// inactive type reports 0.
    pub reliability: [f64; 3],
}

/// A trained (or freshly initialized) model with everything needed to
/// classify raw series.
#[derive(Clone, Debug, PartialEq)]
pub struct Gfef {
    pub config: RunConfig,
    pub layout: Layout,
    pub params: ParamSet<f32>,
    pub standardizer: Standardizer,
    /// Seed the parameters were initialized and trained with.
    pub seed: u64,
}

impl Gfef {
    pub fn new(config: &RunConfig, series_length: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let layout = Layout::new(config, series_length, num_classes)?;
        Ok(Gfef {
            params: layout.init_params(seed),
            config: config.clone(),
            layout,
            standardizer: Standardizer::identity(),
            seed,
        })
    }

    pub fn series_length(&self) -> usize {
        self.layout.series_length
    }

    pub fn num_classes(&self) -> usize {
        self.layout.num_classes
    }

    pub fn prepare(&self, series: &[f64]) -> Result<Prepared> {
        if series.len() != self.series_length() {
            return Err(GfefError::LengthMismatch {
                expected: self.series_length(),
                found: series.len(),
            });
        }
        prepare(series, self.config.dataset.normalize)
    }

    /// Inference on prepared samples.  Each sample's result depends only on
    /// its own content, whatever the batch.
    pub fn predict_prepared(&self, samples: &[&Prepared]) -> Result<Vec<Prediction>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        for s in samples {
            if s.series.len() != self.series_length() {
                return Err(GfefError::LengthMismatch {
                    expected: self.series_length(),
                    found: s.series.len(),
                });
            }
        }
        let batch = Batch::<f32>::for_inference(samples, &self.standardizer);
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let opts = ForwardOptions {
            mode: Mode::Infer,
            noise_seed: 0,
            pins: None,
        };
        let out = forward(&self.layout, &mut g, &bound, &batch, &opts)?;
        let probs = crate::tensor::softmax_last(&g.value(out.logits).cast::<f64>());
        let types = self.layout.types();
        Ok(probs
            .data()
            .chunks(self.num_classes())
            .zip(&out.scores)
            .map(|(p, sc)| {
                let mut reliability = [0.0; 3];
                for (ty, &v) in types.iter().zip(sc) {
                    reliability[*ty as usize] = v;
                }
                Prediction {
                    label: crate::tensor::argmax(p),
                    probabilities: p.to_vec(),
                    reliability,
                }
            })
            .collect())
    }

    /// Full path from a raw series.
    pub fn predict_series(&self, series: &[f64]) -> Result<Prediction> {
        let p = self.prepare(series)?;
        Ok(self.predict_prepared(&[&p])?.remove(0))
    }

    /// Inference-time hyperedges (shared across samples under RWHC).
    pub fn inference_structures(&self, sample: &Prepared) -> Result<Option<Structures>> {
        let batch = Batch::<f32>::for_inference(&[sample], &self.standardizer);
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let opts = ForwardOptions {
            mode: Mode::Infer,
            noise_seed: 0,
            pins: None,
        };
        Ok(forward(&self.layout, &mut g, &bound, &batch, &opts)?.structures)
    }

    /// Type-composition table of the stage-1 hyperedges (first sample's
    /// edges when they are per sample).
    pub fn composition_table(&self, sample: &Prepared) -> Result<String> {
        let names: Vec<&str> = self.layout.types().iter().map(|t| t.tag()).collect();
        match self.inference_structures(sample)? {
            Some(st) => Ok(hypergraph::composition_table(&st.stage1[0], self.layout.model.nodes_per_type, &names)),
            None => Err(GfefError::InvalidArgument(
                "self-attention models have no hyperedges".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_strain_dataset;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.hidden_size = 16;
        cfg
    }

    fn batch(n: usize) -> (Vec<Prepared>, Vec<usize>) {
        let ds = generate_strain_dataset(n, 3);
        let prepared = ds.instances.iter().map(|i| prepare(&i.values, true).unwrap()).collect();
        (prepared, ds.instances.iter().map(|i| i.label).collect())
    }

    fn run(cfg: &RunConfig, mode: Mode) -> (Graph<f64>, ForwardOutput, LossVars, Layout) {
        let (g, out, loss, layout, _) = run_bound(cfg, mode);
        (g, out, loss, layout)
    }

    fn run_bound(cfg: &RunConfig, mode: Mode) -> (Graph<f64>, ForwardOutput, LossVars, Layout, Bound) {
        let (prep, labels) = batch(2);
        let layout = Layout::new(cfg, prep[0].series.len(), 3).unwrap();
        let params = layout.init_params::<f64>(5);
        let std = Standardizer::fit(&prep);
        let refs: Vec<&Prepared> = prep.iter().collect();
        let b = Batch::<f64>::new(&refs, &std, (0..refs.len() as u64).collect());
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let opts = ForwardOptions {
            mode,
            noise_seed: 9,
            pins: None,
        };
        let out = forward(&layout, &mut g, &bound, &b, &opts).unwrap();
        let loss = loss_graph(&mut g, &out, &labels);
        (g, out, loss, layout, bound)
    }

    #[test]
    fn default_forward_shapes_and_invariants() {
        for mode in [Mode::Train, Mode::Infer] {
            let (g, out, loss, layout) = run(&small_cfg(), mode);
            assert_eq!(g.shape(out.logits), &[6, 3]);
            assert_eq!(out.inter.len(), 3);
            assert!(g.value(loss.total).data()[0].is_finite());
            for s in &out.scores {
                assert!((s.iter().sum::<f64>() - 2.0).abs() < 1e-6);
            }
            let st = out.structures.as_ref().unwrap();
            assert_eq!(st.stage1.len(), 1);
            assert_eq!(st.stage1[0].len(), layout.nodes());
            for t in &out.traces {
                for v in [t.att_v, t.att_e] {
                    for row in g.value(v).data().chunks(48) {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn every_ablation_runs() {
        let variants: Vec<Box<dyn Fn(&mut RunConfig)>> = vec![
            Box::new(|c| c.features.use_image = false),
            Box::new(|c| c.features.use_expert = false),
            Box::new(|c| c.features.use_frf = false),
            Box::new(|c| c.features.use_dra = false),
            Box::new(|c| c.features.dynamic_hyperedges = false),
            Box::new(|c| c.features.construction = Construction::Knn),
            Box::new(|c| {
                c.features.construction = Construction::Knn;
                c.features.dynamic_hyperedges = false;
            }),
            Box::new(|c| c.features.attention = AttentionKind::SelfAttention),
            Box::new(|c| c.features = FeatureConfig::ts_only()),
            Box::new(|c| c.model.layers = 2),
        ];
        for f in variants {
            let mut cfg = small_cfg();
            f(&mut cfg);
            let (g, out, loss, layout, bound) = run_bound(&cfg, Mode::Train);
            assert_eq!(g.shape(out.logits), &[6, 3]);
            assert!(g.value(loss.total).data()[0].is_finite(), "{:?}", cfg.features);
            assert_eq!(out.inter.len(), layout.types().len());
            let grads = g.backward(loss.total);
            let fin = grads.get(bound.var("final.w")).unwrap();
            assert!(fin.all_finite());
            assert!(grads.get(bound.var("ts.b0.k1.w")).unwrap().data().iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn ts_only_has_unit_scores_and_fewer_nodes() {
        let mut cfg = small_cfg();
        cfg.features = FeatureConfig::ts_only();
        let (_, out, _, layout) = run(&cfg, Mode::Infer);
        assert_eq!(layout.nodes(), 16);
        assert!(out.scores.iter().all(|s| s == &vec![1.0]));
    }

    #[test]
    fn knn_builds_per_sample_edges() {
        let mut cfg = small_cfg();
        cfg.features.construction = Construction::Knn;
        let (_, out, _, _) = run(&cfg, Mode::Infer);
        let st = out.structures.unwrap();
        assert_eq!(st.stage1.len(), 6);
        assert_eq!(st.stage2.len(), 6);
    }

    #[test]
    fn content_seed_is_stable() {
        assert_eq!(content_seed(&[1.0, 2.0]), content_seed(&[1.0, 2.0]));
        assert_ne!(content_seed(&[1.0, 2.0]), content_seed(&[2.0, 1.0]));
    }

    #[test]
    fn prepare_rejects_non_finite() {
        let mut s = vec![0.0; 20];
        s[3] = f64::NAN;
        assert!(matches!(prepare(&s, true), Err(GfefError::NonFinite { index: 3 })));
    }

    #[test]
    fn js_graph_matches_scalar_formula() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[40.0, 0.0]));
        let b = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.0]));
        let j = js_divergence_graph(&mut g, a, b);
        // p ~ (1, 0), q = (1/2, 1/2).
        let want = 0.5 * (1.0f64 / 0.75).ln() + 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln());
        assert!((g.value(j).data()[0] - want).abs() < 1e-9);
    }
}
