//! Command implementations behind the `gfef` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use gfef_core::checkpoint;
use gfef_core::config::{DatasetFormat, RunConfig};
use gfef_core::dataset::{generate_strain_dataset, load_ucr_dataset, Dataset};
use gfef_core::gradcheck::{gradient_check, GradCheckReport, GradCheckSetup};
use gfef_core::hypergraph::type_proportions;
use gfef_core::metrics::Metrics;
use gfef_core::model::Gfef;
use gfef_core::training::{evaluate, train, EpochRecord};

use crate::service::classify_one;

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p, overrides)?,
        None => RunConfig::from_toml_with_overrides("", overrides)?,
    })
}

/// Training split and optional held-out split named by the config.
pub fn load_splits(cfg: &RunConfig) -> anyhow::Result<(Dataset, Option<Dataset>)> {
    let d = &cfg.dataset;
    match d.format {
        DatasetFormat::Synthetic => {
            let s = &d.synthetic;
            Ok((
                generate_strain_dataset(s.n_per_class, s.seed),
                Some(generate_strain_dataset(s.n_per_class, s.test_seed)),
            ))
        }
        DatasetFormat::Ucr | DatasetFormat::StrainCsv => {
            let Some(path) = &d.path else {
                bail!("dataset.path is required for format {:?}", d.format);
            };
            let train = load_ucr_dataset(path)?;
            let test = d.test_path.as_deref().map(load_ucr_dataset).transpose()?;
            Ok((train, test))
        }
    }
}

/// Checkpoint file for one seed; the bare path when there is only one.
pub fn checkpoint_path(out: &Path, seed: u64, n_seeds: usize) -> PathBuf {
    if n_seeds == 1 {
        out.to_path_buf()
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(format!(".seed{seed}"));
        PathBuf::from(s)
    }
}

pub struct SeedResult {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub final_metrics: Option<Metrics>,
}

/// Trains one model per configured seed.  Progress goes to `status`, the
/// per-epoch log (with a leading seed column) to `log`.
pub fn run_train(
    cfg: &RunConfig,
    out: &Path,
    log: &mut dyn Write,
    status: &mut dyn Write,
) -> anyhow::Result<Vec<SeedResult>> {
    let (train_set, test_set) = load_splits(cfg)?;
    writeln!(log, "seed\t{}", EpochRecord::TSV_HEADER)?;
    let mut results = Vec::new();
    for &seed in &cfg.train.seeds {
        let mut io_err = None;
        let (model, _) = train(cfg, &train_set, test_set.as_ref(), seed, &mut |r| {
            if let Err(e) = writeln!(log, "{seed}\t{}", r.tsv_row()) {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        let path = checkpoint_path(out, seed, cfg.train.seeds.len());
        checkpoint::save(&model, &path)?;
        let final_metrics = test_set.as_ref().map(|t| evaluate(&model, t)).transpose()?;
        match &final_metrics {
            Some(m) => writeln!(status, "seed {seed}: test accuracy {:.4}, checkpoint {}", m.accuracy, path.display())?,
            None => writeln!(status, "seed {seed}: checkpoint {}", path.display())?,
        }
        results.push(SeedResult {
            seed,
            checkpoint: path,
            final_metrics,
        });
    }
    let accs: Vec<f64> = results.iter().filter_map(|r| r.final_metrics.as_ref().map(|m| m.accuracy)).collect();
    if !accs.is_empty() {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        writeln!(status, "mean test accuracy over {} seed(s): {mean:.4}", accs.len())?;
    }
    Ok(results)
}

/// Evaluation split: an explicit file, else the held-out split the model's
/// config names.
pub fn evaluation_set(model: &Gfef, data: Option<&Path>) -> anyhow::Result<Dataset> {
    if let Some(p) = data {
        return Ok(load_ucr_dataset(p)?);
    }
    match load_splits(&model.config)? {
        (_, Some(test)) => Ok(test),
        (_, None) => bail!("no --data given and the checkpoint's config has no dataset.test_path"),
    }
}

pub fn run_evaluate(model: &Gfef, data: Option<&Path>) -> anyhow::Result<String> {
    let ds = evaluation_set(model, data)?;
    Ok(evaluate(model, &ds)?.to_text())
}

/// One series per non-empty line; values split on commas, tabs or spaces.
pub fn read_series_file(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().with_context(|| format!("{}:{}: bad value `{t}`", path.display(), i + 1)))
            .collect::<anyhow::Result<Vec<f64>>>()?;
        out.push(values);
    }
    Ok(out)
}

/// JSON line per series, in the service's response format.
pub fn run_predict(model: &Gfef, series: &[Vec<f64>]) -> anyhow::Result<Vec<String>> {
    series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r = classify_one(model, s).map_err(|e| anyhow::anyhow!("series {}: {e}", i + 1))?;
            Ok(serde_json::to_string(&r)?)
        })
        .collect()
}

/// Writes the configured synthetic splits; `.csv` outputs are comma separated.
pub fn run_generate(cfg: &RunConfig, out: &Path, test_out: Option<&Path>) -> anyhow::Result<()> {
    let s = &cfg.dataset.synthetic;
    write_dataset(&generate_strain_dataset(s.n_per_class, s.seed), out)?;
    if let Some(t) = test_out {
        write_dataset(&generate_strain_dataset(s.n_per_class, s.test_seed), t)?;
    }
    Ok(())
}

fn write_dataset(ds: &Dataset, path: &Path) -> anyhow::Result<()> {
    if path.extension().is_some_and(|e| e == "csv") {
        let mut text = String::new();
        for inst in &ds.instances {
            let vals: Vec<String> = inst.values.iter().map(|v| v.to_string()).collect();
            text.push_str(&format!("{},{}\n", inst.label, vals.join(",")));
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    } else {
        ds.save_ucr(path)?;
    }
    Ok(())
}

pub fn run_gradcheck(cfg: &RunConfig, select: &str, trials: usize, tol: f64, seed: u64) -> anyhow::Result<GradCheckReport> {
    let setup = GradCheckSetup::synthetic(cfg, 1, seed)?;
    Ok(gradient_check(&setup, select, trials, tol, seed)?)
}

/// Stage-1 edge table for the first instance plus mean type shares over
/// every instance.
pub fn run_hyperedges(model: &Gfef, ds: &Dataset) -> anyhow::Result<String> {
    let types: Vec<&str> = model.layout.types().iter().map(|t| t.tag()).collect();
    let npt = model.layout.model.nodes_per_type;
    let mut mean = vec![0.0; types.len()];
    let mut count = 0usize;
    let mut table = None;
    for inst in &ds.instances {
        let p = model.prepare(&inst.values)?;
        let Some(st) = model.inference_structures(&p)? else {
            bail!("self-attention models have no hyperedges");
        };
        let edges = &st.stage1[0];
        if table.is_none() {
            table = Some(model.composition_table(&p)?);
        }
        for row in type_proportions(edges, npt, types.len()) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
            count += 1;
        }
    }
    let mut s = table.unwrap_or_default();
    s.push_str("mean");
    for m in &mean {
        s.push_str(&format!("\t{:.6}", m / count.max(1) as f64));
    }
    s.push('\n');
    Ok(s)
}
