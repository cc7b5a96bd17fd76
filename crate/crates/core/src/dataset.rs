//! Dataset ingestion (UCR text format), z-normalization and the synthetic
//! strain-gauge generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GfefError, Result};

/// Length of every synthetic strain series (one loading/unloading cycle).
pub const STRAIN_LENGTH: usize = 101;

/// Class indices of the synthetic strain generator.
pub const NORMAL: usize = 0;
pub const BUCKLING: usize = 1;
pub const STUCK: usize = 2;
pub const STRAIN_CLASS_NAMES: [&str; 3] = ["normal", "buckling", "stuck"];

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesInstance {
    pub values: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<TimeSeriesInstance>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Shared series length, `None` for an empty dataset.
    pub fn series_length(&self) -> Option<usize> {
        self.instances.first().map(|i| i.values.len())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }

    /// Errors unless every class in `[0, num_classes)` occurs.
    pub fn check_all_classes_present(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(class) => Err(GfefError::MissingClass {
                class,
                num_classes: self.num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Returns a copy with every series z-normalized.
    pub fn znormalized(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            instances: self
                .instances
                .iter()
                .map(|i| TimeSeriesInstance {
                    values: znormalize(&i.values),
                    label: i.label,
                })
                .collect(),
        }
    }

    /// Writes the dataset in UCR text format (tab separated, dense labels).
    pub fn save_ucr(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for inst in &self.instances {
            write!(out, "{}", inst.label).unwrap();
            for v in &inst.values {
                write!(out, "\t{}", v).unwrap();
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| GfefError::io(path, e))
    }
}

/// Parses a UCR-format file: one instance per line, label first, then the
/// series values, separated by tabs or commas.
///
/// Labels are remapped to dense indices in ascending order of their numeric
/// value.
pub fn load_ucr_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| GfefError::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_ucr(&text, path, name)
}

pub(crate) fn parse_ucr(text: &str, path: &Path, name: String) -> Result<Dataset> {
    let mut raw: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(['\t', ',']).map(str::trim).collect();
        let parse = |field: usize| -> Result<f64> {
            let token = fields[field];
            match token.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(GfefError::BadToken {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    field: field + 1,
                    token: token.to_string(),
                }),
            }
        };
        let label = parse(0)?;
        let values = (1..fields.len()).map(parse).collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(GfefError::RaggedRow {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    expected: w,
                    found: values.len(),
                })
            }
            _ => {}
        }
        raw.push((label, values));
    }
    if raw.is_empty() {
        return Err(GfefError::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    if width == Some(0) {
        return Err(GfefError::InvalidArgument(format!(
            "{}: rows carry a label but no values",
            path.display()
        )));
    }

    // Keyed by bit pattern; -0.0 and 0.0 are the same label.
    let mut labels: Vec<f64> = raw.iter().map(|(l, _)| if *l == 0.0 { 0.0 } else { *l }).collect();
    labels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    labels.dedup();
    let index: BTreeMap<u64, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.to_bits(), i))
        .collect();
    let instances = raw
        .into_iter()
        .map(|(l, values)| TimeSeriesInstance {
            label: index[&(if l == 0.0 { 0.0f64 } else { l }).to_bits()],
            values,
        })
        .collect();
    Ok(Dataset {
        name,
        instances,
        num_classes: labels.len(),
    })
}

/// Zero mean, unit population standard deviation.  Series with σ < 1e-8 map
/// to all zeros.
pub fn znormalize(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-8 {
        return vec![0.0; series.len()];
    }
    series.iter().map(|v| (v - mean) / sd).collect()
}

/// Synthetic loading/unloading strain curves in three classes: `NORMAL`
/// (linear ramp up then down), `BUCKLING` (the same ramp bent by a strong
/// quadratic/cubic bow) and `STUCK` (a ramp that freezes and repeats one
/// reading for more than half the series).
///
/// Instances are ordered class-major; the stream depends only on `seed`.
pub fn generate_strain_dataset(n_per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(3 * n_per_class);
    for label in [NORMAL, BUCKLING, STUCK] {
        for _ in 0..n_per_class {
            let values = match label {
                NORMAL => normal_curve(&mut rng),
                BUCKLING => buckling_curve(&mut rng),
                _ => stuck_curve(&mut rng),
            };
            instances.push(TimeSeriesInstance { values, label });
        }
    }
    Dataset {
        name: format!("strain-seed{seed}"),
        instances,
        num_classes: 3,
    }
}

struct Ramp {
    amplitude: f64,
    peak: f64,
    residual: f64,
}

impl Ramp {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Ramp {
            amplitude: rng.gen_range(0.6..1.4),
            peak: rng.gen_range(0.35..0.65),
            residual: rng.gen_range(0.0..0.1),
        }
    }

    /// Position inside the current phase (0 at phase start, 1 at its end)
    /// and whether we are loading.
    fn phase(&self, x: f64) -> (f64, bool) {
        if x <= self.peak {
            (x / self.peak, true)
        } else {
            ((x - self.peak) / (1.0 - self.peak), false)
        }
    }

    fn value(&self, x: f64) -> f64 {
        let (u, loading) = self.phase(x);
        if loading {
            self.amplitude * u
        } else {
            self.amplitude * (1.0 - u * (1.0 - self.residual))
        }
    }
}

fn abscissa(i: usize) -> f64 {
    i as f64 / (STRAIN_LENGTH - 1) as f64
}

fn noise(rng: &mut ChaCha8Rng, amplitude: f64) -> f64 {
    Normal::new(0.0, 0.01 * amplitude).unwrap().sample(rng)
}

fn normal_curve(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let ramp = Ramp::sample(rng);
    (0..STRAIN_LENGTH)
        .map(|i| ramp.value(abscissa(i)) + noise(rng, ramp.amplitude))
        .collect()
}

fn buckling_curve(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let ramp = Ramp::sample(rng);
    let bow = rng.gen_range(0.35..0.7) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let skew = rng.gen_range(-1.0..1.0);
    (0..STRAIN_LENGTH)
        .map(|i| {
            let x = abscissa(i);
            let (u, _) = ramp.phase(x);
            // Quadratic bow with a cubic skew, vanishing at both phase ends.
            let bend = 4.0 * u * (1.0 - u) * (1.0 + skew * (u - 0.5));
            ramp.value(x) + bow * ramp.amplitude * bend + noise(rng, ramp.amplitude)
        })
        .collect()
}

fn stuck_curve(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let ramp = Ramp::sample(rng);
    // Frozen run of 101 - freeze >= 56 readings, so the repeat exceeds T/2.
    let freeze = rng.gen_range(8..=45);
    let mut values: Vec<f64> = (0..freeze)
        .map(|i| ramp.value(abscissa(i)) + noise(rng, ramp.amplitude))
        .collect();
    let held = ramp.value(abscissa(freeze)) + noise(rng, ramp.amplitude);
    values.resize(STRAIN_LENGTH, held);
    values
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn parse(text: &str) -> Result<Dataset> {
        parse_ucr(text, Path::new("mem.tsv"), "mem".into())
    }

    #[test]
    fn single_row_identity() {
        let ds = parse("1\t0.5\t-0.5").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.num_classes, 1);
        assert_eq!(ds.instances[0].label, 0);
        assert_eq!(ds.instances[0].values, vec![0.5, -0.5]);
    }

    #[test]
    fn labels_remap_densely_in_sorted_order() {
        let ds = parse("7,1,2\n3,4,5\n7,0,0\n").unwrap();
        assert_eq!(ds.num_classes, 2);
        let labels: Vec<usize> = ds.instances.iter().map(|i| i.label).collect();
        assert_eq!(labels, vec![1, 0, 1]);
    }

    #[test]
    fn numeric_label_order_not_lexical() {
        let ds = parse("10\t1\n9\t1\n-1\t1\n").unwrap();
        let labels: Vec<usize> = ds.instances.iter().map(|i| i.label).collect();
        assert_eq!(labels, vec![2, 1, 0]);
    }

    #[test]
    fn loader_errors() {
        match parse("1\t1\t2\n2\t3\n") {
            Err(GfefError::RaggedRow { line, expected, found, .. }) => {
                assert_eq!((line, expected, found), (2, 2, 1));
            }
            other => panic!("expected ragged row error, got {other:?}"),
        }
        assert!(matches!(parse("\n\n"), Err(GfefError::EmptyFile { .. })));
        match parse("1\t1\n1\t2\tx\n") {
            Err(GfefError::BadToken { line, field, token, .. }) => {
                assert_eq!((line, field, token.as_str()), (2, 3, "x"));
            }
            other => panic!("expected bad token error, got {other:?}"),
        }
        assert!(matches!(parse("1\tNaN\n"), Err(GfefError::BadToken { .. })));
    }

    #[test]
    fn file_round_trip() {
        let ds = generate_strain_dataset(3, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("strain.tsv");
        ds.save_ucr(&path).unwrap();
        let back = load_ucr_dataset(&path).unwrap();
        assert_eq!(back.instances, ds.instances);
        assert_eq!(back.num_classes, 3);

        let mut f = fs::File::create(dir.path().join("empty.tsv")).unwrap();
        f.write_all(b"").unwrap();
        assert!(load_ucr_dataset(&dir.path().join("empty.tsv")).is_err());
        assert!(matches!(
            load_ucr_dataset(&dir.path().join("missing.tsv")),
            Err(GfefError::Io { .. })
        ));
    }

    #[test]
    fn znormalize_examples() {
        assert_eq!(znormalize(&[5.0, 5.0, 5.0]), vec![0.0, 0.0, 0.0]);
        let z = znormalize(&[1.0, 2.0, 3.0]);
        let s = (1.5f64).sqrt();
        for (a, b) in z.iter().zip([-s, 0.0, s]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((z[0] + 1.2247).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn znormalize_moments_and_idempotence(v in prop::collection::vec(-1e3f64..1e3, 2..64)) {
            let z = znormalize(&v);
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            let var = z.iter().map(|x| x * x).sum::<f64>() / z.len() as f64;
            prop_assert!(var.abs() < 1e-9 || (var - 1.0).abs() < 1e-9);
            let zz = znormalize(&z);
            for (a, b) in z.iter().zip(&zz) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generator_is_deterministic_and_shaped() {
        let a = generate_strain_dataset(20, 9);
        let b = generate_strain_dataset(20, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
        assert_eq!(a.series_length(), Some(STRAIN_LENGTH));
        assert_eq!(a.class_counts(), vec![20, 20, 20]);
        assert_ne!(a, generate_strain_dataset(20, 10));

        let empty = generate_strain_dataset(0, 1);
        assert!(empty.is_empty());
        assert_eq!(empty.num_classes, 3);
        assert!(empty.check_all_classes_present().is_err());
    }

    fn longest_constant_run(v: &[f64]) -> usize {
        let mut best = 1;
        let mut cur = 1;
        for w in v.windows(2) {
            if w[0] == w[1] {
                cur += 1;
                best = best.max(cur);
            } else {
                cur = 1;
            }
        }
        best
    }

    #[test]
    fn stuck_instances_hold_a_long_run() {
        let ds = generate_strain_dataset(50, 3);
        for inst in &ds.instances {
            let run = longest_constant_run(&inst.values);
            if inst.label == STUCK {
                assert!(run > STRAIN_LENGTH / 2 + 1, "run {run}");
            } else {
                assert!(run < 5, "unexpected plateau of {run}");
            }
        }
    }

    /// Brute-force 1-NN (Euclidean) trained on one seed, tested on another.
    #[test]
    fn nearest_neighbour_separates_synthetic_classes() {
        let train = generate_strain_dataset(200, 1);
        let test = generate_strain_dataset(200, 2);
        let mut correct = 0;
        for q in &test.instances {
            let nearest = train
                .instances
                .iter()
                .map(|t| {
                    let d: f64 = t.values.iter().zip(&q.values).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, t.label)
                })
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .unwrap();
            correct += usize::from(nearest.1 == q.label);
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.8, "1-NN accuracy {acc}");
    }
}
