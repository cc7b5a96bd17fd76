//! Finite-difference verification of the full model's gradients in f64.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::RunConfig;
use crate::dataset::generate_strain_dataset;
use crate::error::{GfefError, Result};
use crate::graph::Graph;
use crate::model::{forward, loss_graph, Batch, ForwardOptions, Layout, Pins, Prepared, Standardizer};
use crate::params::ParamSet;
use crate::robustness::Mode;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !(e.rel_error <= self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.failures().is_empty()
    }

    /// Checked entries per module.
    pub fn modules(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(module_of(&e.name).to_string()).or_insert(0) += 1;
        }
        m
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "checked\t{}\nmax_rel_error\t{:.3e}\ntolerance\t{:.1e}\nstatus\t{}\n",
            self.entries.len(),
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "pass" } else { "fail" }
        );
        for e in self.failures() {
            s.push_str(&format!(
                "FAIL\t{}[{}]\tanalytic {:.6e}\tnumeric {:.6e}\trel {:.3e}\n",
                e.name, e.index, e.analytic, e.numeric, e.rel_error
            ));
        }
        s
    }
}

/// Leading name segment: `ts`, `img`, `exp`, `patch`, `frf`, `cl`, `hg1`,
/// `hg2`, `prop0`, `final`.
pub fn module_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Entries whose gradient vanishes identically: the pair heads feed only
/// the discrete top-K choice, and the attention-query biases shift every
/// node's logit equally, which the softmax cancels.
fn structurally_zero(name: &str, index: usize, d: usize) -> bool {
    name.ends_with(".pair.w")
        || name.ends_with(".pair.b")
        || name.ends_with(".theta3.b")
        || (name.ends_with(".theta2.b") && index < d)
}

/// A fixed batch, parameters and noise seed to check against.
pub struct GradCheckSetup {
    pub layout: Layout,
    pub params: ParamSet<f64>,
    pub batch: Batch<f64>,
    pub labels: Vec<usize>,
    pub noise_seed: u64,
}

impl GradCheckSetup {
    /// Small synthetic batch through a freshly initialized model.  Every
    /// rank-1 parameter is jittered so no ReLU input sits exactly on its kink.
    pub fn synthetic(cfg: &RunConfig, per_class: usize, seed: u64) -> Result<Self> {
        let ds = generate_strain_dataset(per_class, seed);
        let samples: Vec<Prepared> = ds
            .instances
            .iter()
            .map(|i| crate::model::prepare(&i.values, cfg.dataset.normalize))
            .collect::<Result<_>>()?;
        let labels = ds.instances.iter().map(|i| i.label).collect();
        Self::from_samples(cfg, &samples, labels, 3, seed)
    }

    pub fn from_samples(
        cfg: &RunConfig,
        samples: &[Prepared],
        labels: Vec<usize>,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let t = samples.first().map(|s| s.series.len()).ok_or_else(|| {
            GfefError::InvalidArgument("gradient check needs at least one sample".into())
        })?;
        let layout = Layout::new(cfg, t, num_classes)?;
        let mut params = layout.init_params::<f64>(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        for t in params.tensors_mut() {
            if t.rank() == 1 {
                for v in t.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += 0.1 * z;
                }
            }
        }
        let std = Standardizer::fit(samples);
        let refs: Vec<&Prepared> = samples.iter().collect();
        let seeds = (0..refs.len() as u64).map(|i| seed.wrapping_add(i)).collect();
        Ok(GradCheckSetup {
            layout,
            params,
            batch: Batch::new(&refs, &std, seeds),
            labels,
            noise_seed: seed,
        })
    }

    fn loss(&self, params: &ParamSet<f64>, pins: &Pins) -> Result<f64> {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let opts = ForwardOptions {
            mode: Mode::Train,
            noise_seed: self.noise_seed,
            pins: Some(pins),
        };
        let out = forward(&self.layout, &mut g, &bound, &self.batch, &opts)?;
        let lv = loss_graph(&mut g, &out, &self.labels);
        Ok(g.value(lv.total).data()[0])
    }
}

/// Compares analytic and central-difference gradients on `trials` randomly
/// chosen scalars from parameters whose name starts with `selector` (empty
/// or `"all"` selects everything).  Draws rotate across modules.
pub fn gradient_check(setup: &GradCheckSetup, selector: &str, trials: usize, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let d = setup.layout.model.hidden_size;
    let names = setup.params.names();
    let selected: Vec<usize> = (0..names.len())
        .filter(|&i| selector.is_empty() || selector == "all" || names[i].starts_with(selector))
        .collect();
    if selected.is_empty() {
        return Err(GfefError::InvalidArgument(format!("no parameter matches `{selector}`")));
    }

    // Analytic pass, recording the discrete choices and DRA weights.
    let mut g = Graph::new();
    let bound = setup.params.bind(&mut g);
    let opts = ForwardOptions {
        mode: Mode::Train,
        noise_seed: setup.noise_seed,
        pins: None,
    };
    let out = forward(&setup.layout, &mut g, &bound, &setup.batch, &opts)?;
    let pins = out.pins(&g, Mode::Train);
    let lv = loss_graph(&mut g, &out, &setup.labels);
    let grads = g.backward(lv.total);

    let mut by_module: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &selected {
        by_module.entry(module_of(&names[i])).or_default().push(i);
    }
    let modules: Vec<Vec<usize>> = by_module.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(trials);
    let mut work = setup.params.clone();
    let mut attempts = 0;
    while entries.len() < trials {
        attempts += 1;
        if attempts > trials * 100 {
            return Err(GfefError::InvalidArgument(format!(
                "`{selector}` has too few parameters with a nonzero gradient path"
            )));
        }
        let group = &modules[entries.len() % modules.len()];
        let pi = group[rng.gen_range(0..group.len())];
        let numel = setup.params.tensors()[pi].numel();
        let k = rng.gen_range(0..numel);
        if structurally_zero(&names[pi], k, d) {
            continue;
        }
        let analytic = grads.get(bound.vars()[pi]).map_or(0.0, |t| t.data()[k]);
        let orig = work.tensors()[pi].data()[k];
        work.tensors_mut()[pi].data_mut()[k] = orig + FD_STEP;
        let up = setup.loss(&work, &pins)?;
        work.tensors_mut()[pi].data_mut()[k] = orig - FD_STEP;
        let down = setup.loss(&work, &pins)?;
        work.tensors_mut()[pi].data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        entries.push(GradCheckEntry {
            name: names[pi].clone(),
            index: k,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}
