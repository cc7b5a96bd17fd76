//! Loss bookkeeping, Adam and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::encoders::InputType;
use crate::error::{GfefError, Result};
use crate::graph::Graph;
use crate::metrics::Metrics;
use crate::model::{forward, loss_graph, Batch, ForwardOptions, Gfef, Prepared, Standardizer, LOG_FLOOR};
use crate::robustness::Mode;
use crate::tensor::{Scalar, Tensor};

/// Natural-log Jensen-Shannon divergence with logs floored at 1e-12.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let ln = |x: f64| x.max(LOG_FLOOR).ln();
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        kl_p += a * (ln(a) - ln(m));
        kl_q += b * (ln(b) - ln(m));
    }
    0.5 * kl_p + 0.5 * kl_q
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub ce_final: f64,
    pub ce_ts: f64,
    pub ce_img: f64,
    pub ce_exp: f64,
    pub js_total: f64,
    pub total: f64,
}

impl LossReport {
    fn set_ce(&mut self, ty: InputType, v: f64) {
        match ty {
            InputType::Ts => self.ce_ts = v,
            InputType::Img => self.ce_img = v,
            InputType::Exp => self.ce_exp = v,
        }
    }

    fn scaled_add(&mut self, other: &LossReport, w: f64) {
        self.ce_final += w * other.ce_final;
        self.ce_ts += w * other.ce_ts;
        self.ce_img += w * other.ce_img;
        self.ce_exp += w * other.ce_exp;
        self.js_total += w * other.js_total;
        self.total += w * other.total;
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    crate::tensor::softmax_in_place(&mut v);
    v
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let mut v = logits.to_vec();
    crate::tensor::log_softmax_in_place(&mut v);
    -v[label]
}

/// Loss of one sample.  Missing intermediates (ablated types) contribute 0.
pub fn total_loss(
    logits_final: &[f64],
    logits_ts: &[f64],
    logits_img: Option<&[f64]>,
    logits_exp: Option<&[f64]>,
    label: usize,
) -> LossReport {
    let pf = softmax(logits_final);
    let mut r = LossReport {
        ce_final: cross_entropy(logits_final, label),
        ..LossReport::default()
    };
    for (ty, l) in [(InputType::Ts, Some(logits_ts)), (InputType::Img, logits_img), (InputType::Exp, logits_exp)] {
        if let Some(l) = l {
            r.set_ce(ty, cross_entropy(l, label));
            r.js_total += js_divergence(&pf, &softmax(l));
        }
    }
    r.total = r.ce_final + r.ce_ts + r.ce_img + r.ce_exp + r.js_total;
    r
}

/// Adam with the usual constants.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[Tensor<f32>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `grads[i] = None` means the parameter was unused this step.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>]) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let lr = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= lr * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted means over the epoch.
    pub loss: LossReport,
    /// Accuracy of the train-mode (noisy) forward passes.
    pub train_accuracy: f64,
    pub validation: Option<Metrics>,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str =
        "epoch\ttotal\tce_final\tce_ts\tce_img\tce_exp\tjs_total\ttrain_acc\tval_acc\tval_f1\tval_precision";

    pub fn tsv_row(&self) -> String {
        let l = &self.loss;
        let (va, vf, vp) = match &self.validation {
            Some(m) => (
                format!("{:.6}", m.accuracy),
                format!("{:.6}", m.macro_f1),
                format!("{:.6}", m.macro_precision),
            ),
            None => ("".into(), "".into(), "".into()),
        };
        format!(
            "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.6}\t{va}\t{vf}\t{vp}",
            self.epoch, l.total, l.ce_final, l.ce_ts, l.ce_img, l.ce_exp, l.js_total, self.train_accuracy
        )
    }
}

pub fn prepare_dataset(ds: &Dataset, normalize: bool) -> Result<Vec<Prepared>> {
    ds.instances
        .iter()
        .map(|i| crate::model::prepare(&i.values, normalize))
        .collect()
}

fn check_split(ds: &Dataset, what: &str) -> Result<usize> {
    if ds.is_empty() {
        return Err(GfefError::InvalidArgument(format!("{what} split is empty")));
    }
    ds.series_length()
        .ok_or_else(|| GfefError::InvalidArgument(format!("{what} split has no series length")))
}

/// Trains one model.  `on_epoch` sees every record as it is produced.
pub fn train(
    cfg: &RunConfig,
    train_set: &Dataset,
    validation: Option<&Dataset>,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Gfef, Vec<EpochRecord>)> {
    cfg.validate()?;
    let t = check_split(train_set, "training")?;
    train_set.check_all_classes_present()?;
    let num_classes = train_set.num_classes;
    if let Some(v) = validation {
        let vt = check_split(v, "validation")?;
        if vt != t {
            return Err(GfefError::LengthMismatch { expected: t, found: vt });
        }
    }
    let mut model = Gfef::new(cfg, t, num_classes, seed)?;
    let normalize = cfg.dataset.normalize;
    let samples = prepare_dataset(train_set, normalize)?;
    model.standardizer = Standardizer::fit(&samples);
    let labels: Vec<usize> = train_set.instances.iter().map(|i| i.label).collect();
    let val_samples = match validation {
        Some(v) => Some((prepare_dataset(v, normalize)?, v.instances.iter().map(|i| i.label).collect::<Vec<_>>())),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Parameter init consumed its own stream; keep training draws apart.
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.train.lr, model.params.tensors());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossReport::default();
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.train.batch) {
            let noise_seed: u64 = rng.gen();
            let dra_seeds: Vec<u64> = (0..chunk.len()).map(|_| rng.gen()).collect();
            let refs: Vec<&Prepared> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = Batch::<f32>::new(&refs, &model.standardizer, dra_seeds);
            let (report, hits, grads) = step_gradients(&model, &batch, &batch_labels, noise_seed)?;
            adam.step(model.params.tensors_mut(), &grads);
            sum.scaled_add(&report, chunk.len() as f64);
            correct += hits;
        }
        let n = samples.len() as f64;
        let mut loss = LossReport::default();
        loss.scaled_add(&sum, 1.0 / n);
        if !loss.total.is_finite() {
            return Err(GfefError::InvalidArgument(format!("loss became non-finite at epoch {epoch}")));
        }
        let eval_now = cfg.train.eval_every > 0 && ((epoch + 1) % cfg.train.eval_every == 0 || epoch + 1 == cfg.train.epochs);
        let validation = match (&val_samples, eval_now) {
            (Some((vs, vl)), true) => Some(evaluate_prepared(&model, vs, vl)?),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            loss,
            train_accuracy: correct as f64 / n,
            validation,
        };
        log::debug!("{}", rec.tsv_row());
        on_epoch(&rec);
        records.push(rec);
    }
    Ok((model, records))
}

type StepOutput = (LossReport, usize, Vec<Option<Tensor<f32>>>);

/// Forward + backward on one batch in train mode.
fn step_gradients(model: &Gfef, batch: &Batch<f32>, labels: &[usize], noise_seed: u64) -> Result<StepOutput> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let opts = ForwardOptions {
        mode: Mode::Train,
        noise_seed,
        pins: None,
    };
    let out = forward(&model.layout, &mut g, &bound, batch, &opts)?;
    let lv = loss_graph(&mut g, &out, labels);
    let mut report = LossReport {
        ce_final: scalar(&g, lv.ce_final),
        total: scalar(&g, lv.total),
        ..LossReport::default()
    };
    for &(ty, v) in &lv.ce_inter {
        report.set_ce(ty, scalar(&g, v));
    }
    report.js_total = lv.js.iter().map(|&(_, v)| scalar(&g, v)).sum();
    let c = model.num_classes();
    let hits = g
        .value(out.logits)
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| crate::tensor::argmax(row) == l)
        .count();
    let mut grads = g.backward(lv.total);
    let per_param = bound.vars().iter().map(|&v| grads.take(v)).collect();
    Ok((report, hits, per_param))
}

fn scalar<F: Scalar>(g: &Graph<F>, v: crate::graph::Var) -> f64 {
    g.value(v).data()[0].f64()
}

/// Batch size used for inference passes.
const EVAL_CHUNK: usize = 64;

pub fn evaluate_prepared(model: &Gfef, samples: &[Prepared], labels: &[usize]) -> Result<Metrics> {
    let mut predicted = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        predicted.extend(model.predict_prepared(&refs)?.into_iter().map(|p| p.label));
    }
    Ok(Metrics::from_predictions(labels, &predicted, model.num_classes()))
}

pub fn evaluate(model: &Gfef, ds: &Dataset) -> Result<Metrics> {
    if let Some(t) = ds.series_length() {
        if t != model.series_length() {
            return Err(GfefError::LengthMismatch {
                expected: model.series_length(),
                found: t,
            });
        }
    }
    if ds.num_classes > model.num_classes() {
        return Err(GfefError::InvalidArgument(format!(
            "dataset has {} classes, model has {}",
            ds.num_classes,
            model.num_classes()
        )));
    }
    let samples = prepare_dataset(ds, model.config.dataset.normalize)?;
    let labels: Vec<usize> = ds.instances.iter().map(|i| i.label).collect();
    evaluate_prepared(model, &samples, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_strain_dataset;
    use crate::model::{Layout, Standardizer};
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn js_hand_value() {
        // 0.5 ln(1/0.75) + 0.5 (0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25))
        let want = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2.0f64.ln();
        let got = js_divergence(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.215762).abs() < 1e-5, "{got}");
    }

    proptest! {
        #[test]
        fn js_symmetric_and_zero_on_diagonal(a in proptest::collection::vec(0.0f64..1.0, 4), b in proptest::collection::vec(0.0f64..1.0, 4)) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum::<f64>() + 1e-9; v.iter().map(|x| (x + 1e-9 / 4.0) / s).collect::<Vec<_>>() };
            let (p, q) = (norm(&a), norm(&b));
            prop_assert!(js_divergence(&p, &p).abs() < 1e-12);
            prop_assert!((js_divergence(&p, &q) - js_divergence(&q, &p)).abs() < 1e-12);
            prop_assert!(js_divergence(&p, &q) >= -1e-15);
            prop_assert!(js_divergence(&p, &q) <= 2f64.ln() + 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let z = [0.3, 0.3, 0.3];
        let r = total_loss(&z, &z, Some(&z), Some(&z), 1);
        let ln3 = 3f64.ln();
        for v in [r.ce_final, r.ce_ts, r.ce_img, r.ce_exp] {
            assert!((v - ln3).abs() < 1e-12);
        }
        assert!(r.js_total.abs() < 1e-12);
        assert!((r.total - 4.0 * ln3).abs() < 1e-12);
    }

    /// Loop-only reference for one sample, written without helpers.
    fn naive_loss(f: &[f64], inter: &[&[f64]], y: usize) -> f64 {
        let probs = |l: &[f64]| {
            let mut mx = f64::NEG_INFINITY;
            for &v in l {
                if v > mx {
                    mx = v;
                }
            }
            let mut e = Vec::new();
            let mut s = 0.0;
            for &v in l {
                e.push((v - mx).exp());
                s += (v - mx).exp();
            }
            e.iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let pf = probs(f);
        let mut total = -pf[y].ln();
        for l in inter {
            let q = probs(l);
            total -= q[y].ln();
            let mut js = 0.0;
            for k in 0..q.len() {
                let m = (pf[k] + q[k]) / 2.0;
                js += 0.5 * pf[k] * (pf[k] / m).ln() + 0.5 * q[k] * (q[k] / m).ln();
            }
            total += js;
        }
        total
    }

    #[test]
    fn total_loss_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut draw = || (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
            let (f, a, b, c) = (draw(), draw(), draw(), draw());
            let y = 2;
            let r = total_loss(&f, &a, Some(&b), Some(&c), y);
            assert!((r.total - naive_loss(&f, &[&a, &b, &c], y)).abs() < 1e-7);
            let parts = r.ce_final + r.ce_ts + r.ce_img + r.ce_exp + r.js_total;
            assert!((r.total - parts).abs() < 1e-9);
            assert!([r.ce_final, r.ce_ts, r.ce_img, r.ce_exp, r.js_total].iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn graph_loss_matches_scalar_loss() {
        let ds = generate_strain_dataset(2, 8);
        let cfg = {
            let mut c = RunConfig::default();
            c.model.hidden_size = 16;
            c
        };
        let layout = Layout::new(&cfg, 101, 3).unwrap();
        let params = layout.init_params::<f64>(1);
        let prep = prepare_dataset(&ds, true).unwrap();
        let refs: Vec<&Prepared> = prep.iter().collect();
        let labels: Vec<usize> = ds.instances.iter().map(|i| i.label).collect();
        let std = Standardizer::fit(&prep);
        let batch = Batch::<f64>::new(&refs, &std, vec![1; refs.len()]);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let opts = ForwardOptions {
            mode: Mode::Train,
            noise_seed: 3,
            pins: None,
        };
        let out = forward(&layout, &mut g, &bound, &batch, &opts).unwrap();
        let lv = loss_graph(&mut g, &out, &labels);
        let c = 3;
        let row = |v: crate::graph::Var, s: usize| g.value(v).data()[s * c..(s + 1) * c].to_vec();
        let mut mean = 0.0;
        for (s, &y) in labels.iter().enumerate() {
            let i: Vec<Vec<f64>> = out.inter.iter().map(|&(_, v)| row(v, s)).collect();
            mean += total_loss(&row(out.logits, s), &i[0], Some(&i[1]), Some(&i[2]), y).total / labels.len() as f64;
        }
        assert!((g.value(lv.total).data()[0] - mean).abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f32>::new(vec![2], vec![1.0, -1.0])];
        let mut opt = Adam::new(0.1, &p);
        opt.step(&mut p, &[Some(Tensor::new(vec![2], vec![3.0, -0.5]))]);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    fn tiny_cfg(epochs: usize) -> RunConfig {
        let mut c = RunConfig::default();
        c.model.hidden_size = 16;
        c.train.epochs = epochs;
        c.train.batch = 16;
        c
    }

    #[test]
    fn same_seed_same_epoch0_loss() {
        let ds = generate_strain_dataset(8, 1);
        let cfg = tiny_cfg(1);
        let (_, a) = train(&cfg, &ds, None, 11, &mut |_| {}).unwrap();
        let (_, b) = train(&cfg, &ds, None, 11, &mut |_| {}).unwrap();
        assert_eq!(a[0].loss.total.to_bits(), b[0].loss.total.to_bits());
        let (_, c) = train(&cfg, &ds, None, 12, &mut |_| {}).unwrap();
        assert_ne!(a[0].loss.total, c[0].loss.total);
    }

    #[test]
    fn missing_class_is_rejected() {
        let mut ds = generate_strain_dataset(4, 1);
        ds.instances.retain(|i| i.label != 2);
        assert!(matches!(train(&tiny_cfg(1), &ds, None, 1, &mut |_| {}), Err(GfefError::MissingClass { .. })));
    }

    #[test]
    fn loss_decreases_on_small_set() {
        let ds = generate_strain_dataset(10, 2);
        let (_, recs) = train(&tiny_cfg(8), &ds, Some(&ds), 3, &mut |_| {}).unwrap();
        assert!(recs.last().unwrap().loss.total < recs[0].loss.total);
        assert!(recs.last().unwrap().validation.is_some());
    }

    #[test]
    fn batched_and_single_predictions_agree() {
        let ds = generate_strain_dataset(4, 5);
        let (model, _) = train(&tiny_cfg(2), &ds, None, 3, &mut |_| {}).unwrap();
        let prep = prepare_dataset(&ds, true).unwrap();
        let refs: Vec<&Prepared> = prep.iter().collect();
        let batched = model.predict_prepared(&refs).unwrap();
        for (i, inst) in ds.instances.iter().enumerate() {
            let single = model.predict_series(&inst.values).unwrap();
            assert_eq!(single, batched[i]);
        }
    }
}
