//! Dataset provisioning: a seeded synthetic feature-shift benchmark,
//! class-stratified scarcity subsampling and delimiter-separated tabular
//! ingestion.
//!
//! The synthetic benchmark draws class clusters in a latent space shared by
//! all domains and pushes each domain through its own invertible affine map
//! (rotation, anisotropic scaling, translation), so the label space is
//! common while input marginals differ per client.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded_stream, stream};
use crate::tensor::{Element, Tensor};

/// Features, labels and split for one client's domain.
#[derive(Debug, Clone)]
pub struct DomainDataset<T: Element> {
    pub domain: String,
    pub features: Tensor<T>,
    pub labels: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub num_classes: usize,
    pub provenance: String,
}

impl<T: Element> DomainDataset<T> {
    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather rows/labels for a list of sample indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        let features = Tensor::from_vec(vec![indices.len(), d], data).expect("consistent rows");
        (features, labels)
    }

    /// Splits are disjoint, exhaustive, and every class occurs in train.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.features.rows() != n {
            return Err(Error::ShapeMismatch {
                context: format!("dataset '{}' features vs labels", self.domain),
                left: self.features.shape().to_vec(),
                right: vec![n],
            });
        }
        let mut seen = vec![0u8; n];
        for &i in self.train_idx.iter().chain(&self.test_idx) {
            if i >= n {
                return Err(Error::config(format!(
                    "dataset '{}': split index {i} out of range",
                    self.domain
                )));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::config(format!(
                "dataset '{}': train/test splits must be disjoint and exhaustive",
                self.domain
            )));
        }
        let mut train_classes = vec![false; self.num_classes];
        for &i in &self.train_idx {
            let label = self.labels[i];
            if label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.num_classes,
                });
            }
            train_classes[label] = true;
        }
        if let Some(missing) = train_classes.iter().position(|&p| !p) {
            return Err(Error::config(format!(
                "dataset '{}': class {missing} missing from train split",
                self.domain
            )));
        }
        self.features.check_finite(&format!("dataset '{}'", self.domain))
    }
}

/// Parameters of the synthetic covariate-shift benchmark.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub dim: usize,
    /// Distance scale of latent class means.
    pub class_separation: f64,
    /// Within-class standard deviation in latent space.
    pub latent_noise: f64,
    /// Apply a random rotation per domain.
    pub rotation: bool,
    /// Per-dimension anisotropic scale range (min, max); min must be > 0.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-dimension translation drawn uniformly from [-t, t].
    pub translation: f64,
    /// Concept-shift strength: per-domain, per-class latent mean
    /// perturbation scale (0 disables it).
    pub concept_shift: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            num_domains: 4,
            num_classes: 5,
            dim: 20,
            class_separation: 3.0,
            latent_noise: 1.0,
            rotation: true,
            scale_min: 0.5,
            scale_max: 2.0,
            translation: 2.0,
            concept_shift: 0.0,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("shift spec needs at least one domain"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("shift spec needs at least two classes"));
        }
        if self.dim == 0 {
            return Err(Error::config("shift spec dimension must be positive"));
        }
        if !(self.scale_min > 0.0 && self.scale_max >= self.scale_min) {
            return Err(Error::config(
                "shift spec scale range must satisfy 0 < min <= max (degenerate transform)",
            ));
        }
        if self.latent_noise < 0.0 || self.translation < 0.0 || self.concept_shift < 0.0 {
            return Err(Error::config("shift spec noise scales must be non-negative"));
        }
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

/// Random rotation via modified Gram-Schmidt on a Gaussian matrix.
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut q = vec![0.0f64; dim * dim];
    for col in 0..dim {
        let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        for prev in 0..col {
            let mut dot = 0.0;
            for r in 0..dim {
                dot += v[r] * q[r * dim + prev];
            }
            for r in 0..dim {
                v[r] -= dot * q[r * dim + prev];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // A zero column after projection has probability zero; fall back to
        // a unit basis vector deterministically anyway.
        if norm < 1e-9 {
            for (r, slot) in v.iter_mut().enumerate() {
                *slot = if r == col { 1.0 } else { 0.0 };
            }
        } else {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        for r in 0..dim {
            q[r * dim + col] = v[r];
        }
    }
    q
}

struct DomainTransform {
    /// Row-major `dim x dim` linear map (rotation composed with scaling).
    linear: Vec<f64>,
    translation: Vec<f64>,
    dim: usize,
}

impl DomainTransform {
    fn sample(spec: &ShiftSpec, rng: &mut ChaCha8Rng) -> Self {
        let dim = spec.dim;
        let rotation = if spec.rotation {
            random_rotation(dim, rng)
        } else {
            let mut eye = vec![0.0; dim * dim];
            for i in 0..dim {
                eye[i * dim + i] = 1.0;
            }
            eye
        };
        let scales: Vec<f64> = (0..dim)
            .map(|_| rng.gen::<f64>() * (spec.scale_max - spec.scale_min) + spec.scale_min)
            .collect();
        // linear = rotation . diag(scales)
        let mut linear = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                linear[r * dim + c] = rotation[r * dim + c] * scales[c];
            }
        }
        let translation: Vec<f64> = (0..dim)
            .map(|_| rng.gen::<f64>() * 2.0 * spec.translation - spec.translation)
            .collect();
        DomainTransform { linear, translation, dim }
    }

    fn apply(&self, latent: &[f64], out: &mut [f64]) {
        for r in 0..self.dim {
            let mut acc = self.translation[r];
            for c in 0..self.dim {
                acc += self.linear[r * self.dim + c] * latent[c];
            }
            out[r] = acc;
        }
    }
}

/// Round-robin class labels so every split is label-balanced (+/- 1).
fn balanced_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

/// Generate one dataset per domain. Identical `(spec, seed)` inputs yield
/// bit-identical datasets.
pub fn generate_synthetic<T: Element>(
    spec: &ShiftSpec,
    n_train_per_domain: usize,
    n_test_per_domain: usize,
    seed: u64,
) -> Result<Vec<DomainDataset<T>>> {
    spec.validate()?;
    if n_train_per_domain < 2 * spec.num_classes {
        return Err(Error::config(format!(
            "need at least {} train samples per domain",
            2 * spec.num_classes
        )));
    }
    let mut shared = seeded_stream(seed, &[stream::DATASET, 0]);
    // Latent class means: random directions scaled to the separation.
    let mut class_means: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let mut v: Vec<f64> = (0..spec.dim).map(|_| standard_normal(&mut shared)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        for x in v.iter_mut() {
            *x = *x / norm * spec.class_separation;
        }
        class_means.push(v);
    }

    let mut datasets = Vec::with_capacity(spec.num_domains);
    for domain in 0..spec.num_domains {
        let mut rng = seeded_stream(seed, &[stream::DATASET, 1 + domain as u64]);
        let transform = DomainTransform::sample(spec, &mut rng);
        let concept_offsets: Vec<Vec<f64>> = (0..spec.num_classes)
            .map(|_| {
                (0..spec.dim)
                    .map(|_| standard_normal(&mut rng) * spec.concept_shift)
                    .collect()
            })
            .collect();
        let total = n_train_per_domain + n_test_per_domain;
        let labels: Vec<usize> = balanced_labels(n_train_per_domain, spec.num_classes)
            .into_iter()
            .chain(balanced_labels(n_test_per_domain, spec.num_classes))
            .collect();
        let mut data: Vec<T> = Vec::with_capacity(total * spec.dim);
        let mut latent = vec![0.0f64; spec.dim];
        let mut mapped = vec![0.0f64; spec.dim];
        for &label in &labels {
            for c in 0..spec.dim {
                latent[c] = class_means[label][c]
                    + concept_offsets[label][c]
                    + standard_normal(&mut rng) * spec.latent_noise;
            }
            transform.apply(&latent, &mut mapped);
            data.extend(mapped.iter().map(|&v| T::from_f64(v)));
        }
        let dataset = DomainDataset {
            domain: format!("domain{domain}"),
            features: Tensor::from_vec(vec![total, spec.dim], data)?,
            labels,
            train_idx: (0..n_train_per_domain).collect(),
            test_idx: (n_train_per_domain..total).collect(),
            num_classes: spec.num_classes,
            provenance: format!("synthetic(seed={seed}, domain={domain})"),
        };
        dataset.validate()?;
        datasets.push(dataset);
    }
    Ok(datasets)
}

/// Class-stratified subsample of the train split; the test split is kept.
/// Per class, `floor(fraction * count)` samples are retained; a class that
/// would empty is an error.
pub fn scarcity_subsample<T: Element>(
    dataset: &DomainDataset<T>,
    fraction: f64,
    seed: u64,
) -> Result<DomainDataset<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("scarcity fraction must be in (0, 1]"));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let mut rng = seeded_stream(seed, &[stream::SUBSAMPLE]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for &i in &dataset.train_idx {
        by_class[dataset.labels[i]].push(i);
    }
    let mut kept = Vec::new();
    for (class, indices) in by_class.iter().enumerate() {
        let take = (fraction * indices.len() as f64).floor() as usize;
        if take == 0 {
            return Err(Error::config(format!(
                "scarcity fraction {fraction} would empty class {class}"
            )));
        }
        let mut pool = indices.clone();
        // Partial Fisher-Yates for the first `take` positions.
        for i in 0..take {
            let j = i + rng.gen_range(0..pool.len() - i);
            pool.swap(i, j);
        }
        kept.extend_from_slice(&pool[..take]);
    }
    kept.sort_unstable();
    // Reindex so the splits stay exhaustive over the retained rows.
    let all: Vec<usize> = kept.iter().copied().chain(dataset.test_idx.iter().copied()).collect();
    let (features, labels) = dataset.gather(&all);
    let out = DomainDataset {
        domain: dataset.domain.clone(),
        features,
        labels,
        train_idx: (0..kept.len()).collect(),
        test_idx: (kept.len()..all.len()).collect(),
        num_classes: dataset.num_classes,
        provenance: format!(
            "{} | subsample(fraction={fraction}, seed={seed})",
            dataset.provenance
        ),
    };
    out.validate()?;
    Ok(out)
}

/// Schema for tabular ingestion: comma-separated numeric feature columns
/// followed by one integer label column; lines starting with '#' are
/// comments.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TabularSchema {
    /// Expected feature count; inferred from the first data row when absent.
    pub num_features: Option<usize>,
    /// Expected class count; inferred as `max(label) + 1` when absent.
    pub num_classes: Option<usize>,
    /// Fraction of rows held out as the test split (class-stratified).
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for TabularSchema {
    fn default() -> Self {
        TabularSchema {
            num_features: None,
            num_classes: None,
            test_fraction: 0.2,
            split_seed: 0,
        }
    }
}

pub fn load_tabular<T: Element>(path: &Path, schema: &TabularSchema) -> Result<DomainDataset<T>> {
    if !(schema.test_fraction >= 0.0 && schema.test_fraction < 1.0) {
        return Err(Error::config("tabular test_fraction must be in [0, 1)"));
    }
    let file_name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::Parse {
        file: file_name.clone(),
        line: 0,
        message: format!("cannot open file: {e}"),
    })?;
    let reader = BufReader::new(file);
    let mut features: Vec<T> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width: Option<usize> = schema.num_features;
    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if cells.len() < 2 {
            return Err(Error::Parse {
                file: file_name,
                line: line_no,
                message: "need at least one feature column and a label column".into(),
            });
        }
        let n_features = cells.len() - 1;
        match width {
            None => width = Some(n_features),
            Some(w) if w != n_features => {
                return Err(Error::Parse {
                    file: file_name,
                    line: line_no,
                    message: format!("expected {w} feature columns, found {n_features}"),
                });
            }
            _ => {}
        }
        for (col, cell) in cells[..n_features].iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                file: file_name.clone(),
                line: line_no,
                message: format!("column {}: '{cell}' is not numeric", col + 1),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    file: file_name,
                    line: line_no,
                    message: format!("column {}: non-finite value", col + 1),
                });
            }
            features.push(T::from_f64(value));
        }
        let label: usize = cells[n_features].parse().map_err(|_| Error::Parse {
            file: file_name.clone(),
            line: line_no,
            message: format!(
                "label column: '{}' is not a non-negative integer",
                cells[n_features]
            ),
        })?;
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::Parse {
        file: file_name.clone(),
        line: 0,
        message: "file contains no data rows".into(),
    })?;
    let n = labels.len();
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let num_classes = match schema.num_classes {
        Some(c) => {
            if max_label >= c {
                return Err(Error::Parse {
                    file: file_name,
                    line: 0,
                    message: format!("label {max_label} exceeds declared class count {c}"),
                });
            }
            c
        }
        None => max_label + 1,
    };
    // Class-stratified holdout.
    let mut rng = seeded_stream(schema.split_seed, &[stream::SUBSAMPLE, 1]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &label) in labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let mut test_idx = Vec::new();
    for indices in by_class.iter() {
        let take = (schema.test_fraction * indices.len() as f64).floor() as usize;
        let mut pool = indices.clone();
        for i in 0..take {
            let j = i + rng.gen_range(0..pool.len() - i);
            pool.swap(i, j);
        }
        test_idx.extend_from_slice(&pool[..take]);
    }
    test_idx.sort_unstable();
    let mut is_test = vec![false; n];
    for &i in &test_idx {
        is_test[i] = true;
    }
    let train_idx: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "tabular".into());
    let dataset = DomainDataset {
        domain: stem,
        features: Tensor::from_vec(vec![n, width], features)?,
        labels,
        train_idx,
        test_idx,
        num_classes,
        provenance: format!("tabular({file_name})"),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Export features and labels in the tabular format (shortest round-trip
/// float formatting, so reading the file back reproduces the values).
pub fn save_tabular<T: Element>(dataset: &DomainDataset<T>, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# domain: {}", dataset.domain)?;
    let d = dataset.input_dim();
    for i in 0..dataset.len() {
        let mut line = String::new();
        for c in 0..d {
            line.push_str(&format!("{}", dataset.features.row(i)[c]));
            line.push(',');
        }
        line.push_str(&dataset.labels[i].to_string());
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{mmd_value, KernelSpec};

    #[test]
    fn generation_is_deterministic() {
        let spec = ShiftSpec::default();
        let a = generate_synthetic::<f32>(&spec, 50, 20, 9).unwrap();
        let b = generate_synthetic::<f32>(&spec, 50, 20, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features.data(), y.features.data());
            assert_eq!(x.labels, y.labels);
        }
        let c = generate_synthetic::<f32>(&spec, 50, 20, 10).unwrap();
        assert_ne!(a[0].features.data(), c[0].features.data());
    }

    #[test]
    fn label_histogram_is_uniform_within_one() {
        let spec = ShiftSpec::default();
        let sets = generate_synthetic::<f32>(&spec, 201, 52, 4).unwrap();
        for ds in &sets {
            for split in [&ds.train_idx, &ds.test_idx] {
                let mut counts = vec![0usize; spec.num_classes];
                for &i in split.iter() {
                    counts[ds.labels[i]] += 1;
                }
                let min = counts.iter().min().unwrap();
                let max = counts.iter().max().unwrap();
                assert!(max - min <= 1, "{counts:?}");
            }
        }
    }

    #[test]
    fn identity_transforms_make_domains_indistinguishable() {
        let spec = ShiftSpec {
            rotation: false,
            scale_min: 1.0,
            scale_max: 1.0,
            translation: 0.0,
            ..ShiftSpec::default()
        };
        let sets = generate_synthetic::<f64>(&spec, 64, 64, 3).unwrap();
        let kernel = KernelSpec::default();
        let (xa, _) = sets[0].gather(&sets[0].train_idx);
        let (xb, _) = sets[1].gather(&sets[1].train_idx);
        let cross = mmd_value(&xa, &xb, &kernel).unwrap();
        // Same-distribution reference: two halves of one domain.
        let (h1, _) = sets[2].gather(&sets[2].train_idx[..32].to_vec());
        let (h2, _) = sets[2].gather(&sets[2].train_idx[32..].to_vec());
        let same = mmd_value(&h1, &h2, &kernel).unwrap();
        assert!(cross < 8.0 * same.max(1e-4), "cross={cross} same={same}");
    }

    #[test]
    fn default_transforms_produce_measurable_shift() {
        let spec = ShiftSpec::default();
        let sets = generate_synthetic::<f64>(&spec, 64, 16, 3).unwrap();
        let kernel = KernelSpec::default();
        let (xa, _) = sets[0].gather(&sets[0].train_idx);
        let (xb, _) = sets[1].gather(&sets[1].train_idx);
        let cross = mmd_value(&xa, &xb, &kernel).unwrap();
        let (h1, _) = sets[0].gather(&sets[0].train_idx[..32].to_vec());
        let (h2, _) = sets[0].gather(&sets[0].train_idx[32..].to_vec());
        let same = mmd_value(&h1, &h2, &kernel).unwrap();
        assert!(cross > 3.0 * same, "cross={cross} same={same}");
    }

    /// Probe oracle: a logistic head on raw features must identify the
    /// source domain of a sample well above chance.
    #[test]
    fn domain_probe_identifies_domains() {
        use crate::graph::Graph;

        let spec = ShiftSpec::default();
        let sets = generate_synthetic::<f64>(&spec, 100, 50, 13).unwrap();
        let d = spec.dim;
        let mut rows: Vec<f64> = Vec::new();
        let mut domain_labels: Vec<usize> = Vec::new();
        let mut test_rows: Vec<f64> = Vec::new();
        let mut test_labels: Vec<usize> = Vec::new();
        for (dom, ds) in sets.iter().enumerate() {
            for &i in &ds.train_idx {
                rows.extend_from_slice(ds.features.row(i));
                domain_labels.push(dom);
            }
            for &i in &ds.test_idx {
                test_rows.extend_from_slice(ds.features.row(i));
                test_labels.push(dom);
            }
        }
        // Column standardization from the pooled train set.
        let n = domain_labels.len();
        let mut mean = vec![0.0f64; d];
        let mut var = vec![0.0f64; d];
        for r in 0..n {
            for c in 0..d {
                mean[c] += rows[r * d + c];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for r in 0..n {
            for c in 0..d {
                var[c] += (rows[r * d + c] - mean[c]).powi(2);
            }
        }
        let standardize = |data: &mut [f64], count: usize| {
            for r in 0..count {
                for c in 0..d {
                    data[r * d + c] = (data[r * d + c] - mean[c]) / (var[c] / n as f64).sqrt();
                }
            }
        };
        standardize(&mut rows, n);
        standardize(&mut test_rows, test_labels.len());

        let domains = sets.len();
        let mut w = vec![0.0f64; d * domains];
        let mut b = vec![0.0f64; domains];
        for _ in 0..400 {
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant_from(vec![n, d], rows.clone()).unwrap();
            let wv = g
                .param(&Tensor::from_vec(vec![d, domains], w.clone()).unwrap())
                .to_owned();
            let bv = g.param(&Tensor::from_vec(vec![domains], b.clone()).unwrap());
            let xw = g.matmul(x, wv).unwrap();
            let logits = g.add_bias(xw, bv).unwrap();
            let loss = g.cross_entropy(logits, &domain_labels).unwrap();
            g.backward(loss).unwrap();
            let gw = g.grad(wv).unwrap();
            let gb = g.grad(bv).unwrap();
            for (wi, gi) in w.iter_mut().zip(gw) {
                *wi -= 0.5 * gi;
            }
            for (bi, gi) in b.iter_mut().zip(gb) {
                *bi -= 0.5 * gi;
            }
        }
        let m = test_labels.len();
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant_from(vec![m, d], test_rows).unwrap();
        let wv = g.constant(&Tensor::from_vec(vec![d, domains], w).unwrap());
        let bv = g.constant(&Tensor::from_vec(vec![domains], b).unwrap());
        let xw = g.matmul(x, wv).unwrap();
        let logits_var = g.add_bias(xw, bv).unwrap();
        let logits = g.data(logits_var);
        let mut correct = 0;
        for (r, &label) in test_labels.iter().enumerate() {
            let row = &logits[r * domains..(r + 1) * domains];
            let mut best = 0;
            for c in 1..domains {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / m as f64;
        assert!(accuracy > 0.9, "domain probe accuracy {accuracy}");
    }

    #[test]
    fn class_means_map_through_domain_transform() {
        // Within sampling error, a transformed cluster mean is the transform
        // of the latent mean; compare a large noisy draw against a noise-free
        // draw under the same seed (same transforms, same latent means).
        let noisy = ShiftSpec {
            latent_noise: 0.4,
            ..ShiftSpec::default()
        };
        let clean = ShiftSpec {
            latent_noise: 0.0,
            ..noisy.clone()
        };
        let a = generate_synthetic::<f64>(&noisy, 1000, 10, 77).unwrap();
        let b = generate_synthetic::<f64>(&clean, 10, 10, 77).unwrap();
        let dim = noisy.dim;
        for class in 0..noisy.num_classes {
            let mut mean = vec![0.0; dim];
            let mut count = 0.0;
            for &i in &a[0].train_idx {
                if a[0].labels[i] == class {
                    for c in 0..dim {
                        mean[c] += a[0].features.row(i)[c];
                    }
                    count += 1.0;
                }
            }
            for m in mean.iter_mut() {
                *m /= count;
            }
            let exact_row = b[0]
                .train_idx
                .iter()
                .find(|&&i| b[0].labels[i] == class)
                .copied()
                .unwrap();
            let exact = b[0].features.row(exact_row);
            let err: f64 = mean
                .iter()
                .zip(exact)
                .map(|(m, e)| (m - e).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err < 0.5, "class {class}: |mean - transformed latent mean| = {err}");
        }
    }

    #[test]
    fn subsample_is_stratified_and_deterministic() {
        let spec = ShiftSpec::default();
        let ds = &generate_synthetic::<f32>(&spec, 1000, 100, 5).unwrap()[0];
        let sub = scarcity_subsample(ds, 0.1, 21).unwrap();
        assert_eq!(sub.train_idx.len(), 100);
        let mut counts = vec![0usize; spec.num_classes];
        for &i in &sub.train_idx {
            counts[sub.labels[i]] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20), "{counts:?}");
        assert_eq!(sub.test_idx.len(), ds.test_idx.len());

        let again = scarcity_subsample(ds, 0.1, 21).unwrap();
        assert_eq!(sub.features.data(), again.features.data());

        let full = scarcity_subsample(ds, 1.0, 21).unwrap();
        assert_eq!(full.train_idx.len(), ds.train_idx.len());
    }

    #[test]
    fn subsample_rejects_emptying_fraction() {
        let spec = ShiftSpec::default();
        let ds = &generate_synthetic::<f32>(&spec, 50, 10, 5).unwrap()[0];
        assert!(scarcity_subsample(ds, 0.01, 3).is_err());
    }

    #[test]
    fn tabular_roundtrip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShiftSpec {
            num_domains: 1,
            ..ShiftSpec::default()
        };
        let ds = &generate_synthetic::<f32>(&spec, 30, 10, 8).unwrap()[0];
        let path = dir.path().join("domain0.csv");
        save_tabular(ds, &path).unwrap();
        let schema = TabularSchema {
            test_fraction: 0.0,
            ..TabularSchema::default()
        };
        let loaded: DomainDataset<f32> = load_tabular(&path, &schema).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.features.data(), ds.features.data());

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "1.0,2.0,0\n1.0,oops,1\n").unwrap();
        let err = load_tabular::<f32>(&bad, &schema).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "{msg}");
        assert!(msg.contains("column 2"), "{msg}");

        let missing = dir.path().join("nope.csv");
        assert!(load_tabular::<f32>(&missing, &schema).is_err());

        let tiny = dir.path().join("tiny.csv");
        std::fs::write(&tiny, "# header\n1.0,2.0,0\n0.5,1.5,1\n2.0,0.1,0\n").unwrap();
        let ds: DomainDataset<f32> = load_tabular(&tiny, &schema).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes, 2);
    }
}
