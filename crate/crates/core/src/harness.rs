//! Experiment orchestration: config-driven runs with metrics and
//! checkpoint persistence, the head-finetuning study, and the component
//! ablation grid.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::client::{ClientState, FraugKnobs, LocalVariant, ModelSpecs, OptimSettings, RoundPlan};
use crate::config::{ExperimentConfig, Precision};
use crate::data::{generate_synthetic, load_tabular, scarcity_subsample, DomainDataset};
use crate::error::{Error, Result};
use crate::federation::{ExecMode, RoundRecord, Simulation, SimulationConfig};
use crate::graph::{accumulate_grads, Graph, ParamBinding};
use crate::metrics::{
    parse_metrics, rows_from_record, summarize, MeanStd, MetricRow, MetricsWriter, Summary,
};
use crate::nets::{classifier_forward, head_logits, BindMode, Mode};
use crate::optim::Optimizer;
use crate::params::{ParameterSet, Role, RoleMask};
use crate::rng::{derive_seed, seeded_stream, stream};
use crate::tensor::Element;

#[derive(Debug)]
pub struct ExperimentOutput {
    pub strategy: String,
    pub seed_rows: Vec<(u64, Vec<MetricRow>)>,
    pub summary: Summary,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentOutput {
    pub fn all_rows(&self) -> Vec<MetricRow> {
        self.seed_rows.iter().flat_map(|(_, rows)| rows.clone()).collect()
    }
}

pub fn model_specs(cfg: &ExperimentConfig) -> ModelSpecs {
    let mut generator = cfg.model.generator.clone();
    generator.num_classes = cfg.data.shift.num_classes;
    generator.embedding_dim = cfg.model.embedding_dim;
    let mut rtnet = cfg.model.rtnet.clone();
    rtnet.embedding_dim = cfg.model.embedding_dim;
    ModelSpecs {
        classifier: cfg.classifier_spec(),
        generator,
        rtnet,
    }
}

fn optim_settings(cfg: &ExperimentConfig) -> Result<OptimSettings> {
    Ok(OptimSettings {
        kind: cfg.optim.kind()?,
        aux_kind: cfg.optim.aux_kind()?,
        lr: cfg.optim.lr,
        lr_generator: cfg.optim.lr_generator,
        lr_rtnet: cfg.optim.lr_rtnet,
    })
}

/// Provision the per-client datasets for one seed, applying scarcity
/// subsampling when configured.
pub fn build_datasets<T: Element>(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<DomainDataset<T>>> {
    let mut datasets = match cfg.data.source.as_str() {
        "synthetic" => generate_synthetic(
            &cfg.data.shift,
            cfg.data.train_per_domain,
            cfg.data.test_per_domain,
            derive_seed(seed, &[stream::DATASET]),
        )?,
        "tabular" => {
            let mut sets = Vec::with_capacity(cfg.data.paths.len());
            for path in &cfg.data.paths {
                sets.push(load_tabular(Path::new(path), &cfg.data.tabular)?);
            }
            sets
        }
        other => return Err(Error::config(format!("unknown data source '{other}'"))),
    };
    if cfg.data.scarcity_fraction < 1.0 {
        datasets = datasets
            .iter()
            .enumerate()
            .map(|(i, ds)| {
                scarcity_subsample(
                    ds,
                    cfg.data.scarcity_fraction,
                    derive_seed(seed, &[stream::SUBSAMPLE, i as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(datasets)
}

fn exec_mode(cfg: &ExperimentConfig) -> ExecMode {
    if cfg.exec.parallel {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Build the simulation for one seed of a config.
pub fn build_simulation<T: Element>(cfg: &ExperimentConfig, seed: u64) -> Result<Simulation<T>> {
    let datasets = build_datasets::<T>(cfg, seed)?;
    let sim_cfg = SimulationConfig {
        strategy: cfg.strategy()?,
        specs: model_specs(cfg),
        optim: optim_settings(cfg)?,
        batch_size: cfg.batch_size,
        local_steps: cfg.local_steps,
        exec: exec_mode(cfg),
        seed,
    };
    Simulation::build(&sim_cfg, datasets)
}

/// Execute the config: every seed, all rounds, metrics + summary +
/// checkpoints written under `out_dir` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_impl::<f32>(cfg, out_dir),
        Precision::F64 => run_impl::<f64>(cfg, out_dir),
    }
}

fn run_impl<T: Element>(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    let strategy_name = cfg.strategy()?.name().to_string();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("effective_config.toml"), cfg.to_toml_string()?)?;
    }
    let mut seed_rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut sim: Simulation<T> = build_simulation(cfg, seed)?;
        let mut records: Vec<RoundRecord> = Vec::new();
        if cfg.rounds == 0 {
            records.push(sim.evaluate_all()?);
        } else {
            records.extend(sim.run(cfg.rounds, cfg.eval_every)?);
        }
        let rows: Vec<MetricRow> = records
            .iter()
            .flat_map(|record| rows_from_record(record, seed))
            .collect();
        if let Some(dir) = out_dir {
            let file = std::fs::File::create(dir.join(format!("metrics_seed{seed}.csv")))?;
            let mut writer = MetricsWriter::new(std::io::BufWriter::new(file))?;
            writer.write_rows(&rows)?;
            let mut server_bytes = Vec::new();
            sim.server.theta.write_to(&mut server_bytes, RoleMask::EMPTY)?;
            std::fs::write(dir.join(format!("checkpoint_server_seed{seed}.bin")), server_bytes)?;
            for client in &sim.clients {
                std::fs::write(
                    dir.join(format!("checkpoint_client{}_seed{seed}.bin", client.id)),
                    client.theta.to_bytes(RoleMask::EMPTY),
                )?;
            }
        }
        seed_rows.push((seed, rows));
    }
    let all_rows: Vec<MetricRow> = seed_rows.iter().flat_map(|(_, r)| r.clone()).collect();
    let summary = summarize(&all_rows, &strategy_name)?;
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::config(format!("summary serialize: {e}")))?;
        std::fs::write(dir.join("summary.json"), json + "\n")?;
    }
    Ok(ExperimentOutput {
        strategy: strategy_name,
        seed_rows,
        summary,
        out_dir: out_dir.map(Path::to_path_buf),
    })
}

/// Re-derive the summary from the metrics files in a run directory; used to
/// verify that the written summary is a pure function of the metrics.
pub fn summary_from_dir(dir: &Path, strategy: &str) -> Result<Summary> {
    let mut rows = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("metrics_seed") && n.ends_with(".csv"))
        })
        .collect();
    entries.sort();
    for path in entries {
        let text = std::fs::read_to_string(&path)?;
        let (mut parsed, _) = parse_metrics(&text, &path.display().to_string())?;
        rows.append(&mut parsed);
    }
    summarize(&rows, strategy)
}

// ---- head-finetuning study -------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct HeadStudyRow {
    pub domain: String,
    pub scarce: MeanStd,
    pub finetuned: MeanStd,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadStudyReport {
    pub rows: Vec<HeadStudyRow>,
    pub average_scarce: MeanStd,
    pub average_finetuned: MeanStd,
    pub average_delta: f64,
    /// Extractor and normalization parameters are bit-identical before and
    /// after the head finetuning phase.
    pub frozen_extractor_intact: bool,
}

impl std::fmt::Display for HeadStudyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<12} {:>16} {:>16} {:>8}", "domain", "scarce acc", "finetuned acc", "delta")?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<12} {:>7.2} ±{:>6.2} {:>7.2} ±{:>6.2} {:>8.2}",
                row.domain, row.scarce.mean, row.scarce.std, row.finetuned.mean,
                row.finetuned.std, row.delta
            )?;
        }
        writeln!(
            f,
            "{:<12} {:>7.2} ±{:>6.2} {:>7.2} ±{:>6.2} {:>8.2}",
            "avg",
            self.average_scarce.mean,
            self.average_scarce.std,
            self.average_finetuned.mean,
            self.average_finetuned.std,
            self.average_delta
        )?;
        writeln!(
            f,
            "frozen extractor bit-identical: {}",
            if self.frozen_extractor_intact { "yes" } else { "NO" }
        )
    }
}

/// Local-training study: fit the full model on a scarce fraction, freeze
/// the extractor, finetune only the head on embeddings of the full train
/// split, and compare accuracies.
pub fn head_study(cfg: &ExperimentConfig) -> Result<HeadStudyReport> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => head_study_impl::<f32>(cfg),
        Precision::F64 => head_study_impl::<f64>(cfg),
    }
}

fn mean_std_of(values: &[f64]) -> MeanStd {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std, n }
}

fn head_study_impl<T: Element>(cfg: &ExperimentConfig) -> Result<HeadStudyReport> {
    let fraction = if cfg.data.scarcity_fraction < 1.0 {
        cfg.data.scarcity_fraction
    } else {
        0.1
    };
    let specs = Arc::new(model_specs(cfg));
    let optim = optim_settings(cfg)?;
    let knobs = FraugKnobs::default();
    let steps = cfg.rounds.max(1) * cfg.local_steps;
    let variant = LocalVariant::Plain;

    let mut per_domain: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut frozen_ok = true;
    for &seed in &cfg.seeds {
        // Full datasets without scarcity; the study applies its own.
        let mut full_cfg = cfg.clone();
        full_cfg.data.scarcity_fraction = 1.0;
        let full_sets = build_datasets::<T>(&full_cfg, seed)?;
        for (idx, full) in full_sets.iter().enumerate() {
            let scarce = scarcity_subsample(
                full,
                fraction,
                derive_seed(seed, &[stream::SUBSAMPLE, idx as u64]),
            )?;
            let mut server_rng = seeded_stream(seed, &[stream::SERVER]);
            let theta0: ParameterSet<T> = specs.classifier.init_params(&mut server_rng)?;
            let omega0: ParameterSet<T> = specs.generator.init_params(&mut server_rng)?;
            let domain = full.domain.clone();
            let eval = vec![(domain.clone(), scarce.test_idx.clone())];
            let mut client = ClientState::new(
                idx,
                Arc::new(scarce),
                eval,
                Arc::clone(&specs),
                theta0,
                omega0,
                &optim,
                &knobs,
                cfg.batch_size,
                derive_seed(seed, &[77, idx as u64]),
            )?;
            // Phase 1: full model on the scarce split.
            let plan = RoundPlan {
                round: 1,
                local_steps: steps,
                variant: &variant,
                broadcast: None,
                upload: false,
                upload_exclude: RoleMask::EMPTY,
                upload_omega: false,
                evaluate: true,
            };
            let result = client.client_update(&plan)?;
            let scarce_acc = result.accuracies[0].1 * 100.0;

            // Phase 2: freeze everything but the head, then finetune the
            // head on embeddings of the full train split.
            let frozen_before = client.theta.to_bytes(RoleMask::of(&[Role::Head]));
            let mut head_opt: Optimizer<T> = Optimizer::new(optim.kind, optim.lr)?;
            let mut data_rng = seeded_stream(seed, &[stream::DATA, 1000 + idx as u64]);
            for _ in 0..steps {
                let indices: Vec<usize> = (0..cfg.batch_size)
                    .map(|_| {
                        use rand::Rng;
                        full.train_idx[data_rng.gen_range(0..full.train_idx.len())]
                    })
                    .collect();
                let (x, y) = full.gather(&indices);
                let mut g: Graph<T> = Graph::new();
                let fwd = classifier_forward(
                    &mut g,
                    &specs.classifier,
                    &client.theta,
                    &x,
                    Mode::Eval,
                    BindMode::Constant,
                )?;
                let head_w = g.param(&client.theta.get("h.w")?.tensor);
                let head_b = g.param(&client.theta.get("h.b")?.tensor);
                let logits = head_logits(&mut g, (head_w, head_b), fwd.embedding)?;
                let loss = g.cross_entropy(logits, &y)?;
                g.backward(loss)?;
                let bindings = vec![
                    ParamBinding { name: "h.w".into(), var: head_w },
                    ParamBinding { name: "h.b".into(), var: head_b },
                ];
                accumulate_grads(&g, &bindings, &mut client.theta)?;
                head_opt.step(&mut client.theta, Some(RoleMask::of(&[Role::Head])))?;
                client.theta.zero_grads();
            }
            let frozen_after = client.theta.to_bytes(RoleMask::of(&[Role::Head]));
            if frozen_before != frozen_after {
                frozen_ok = false;
            }
            // Evaluate the finetuned model on the same test split.
            let (x, y) = full.gather(&full.test_idx);
            let mut g: Graph<T> = Graph::new();
            let fwd = classifier_forward(
                &mut g,
                &specs.classifier,
                &client.theta,
                &x,
                Mode::Eval,
                BindMode::Constant,
            )?;
            let logits = g.data(fwd.logits);
            let classes = specs.classifier.num_classes;
            let mut correct = 0usize;
            for (row, &label) in y.iter().enumerate() {
                let row_logits = &logits[row * classes..(row + 1) * classes];
                let mut best = 0usize;
                for c in 1..classes {
                    if row_logits[c] > row_logits[best] {
                        best = c;
                    }
                }
                if best == label {
                    correct += 1;
                }
            }
            let finetuned_acc = 100.0 * correct as f64 / y.len().max(1) as f64;

            match per_domain.iter_mut().find(|(d, _, _)| *d == domain) {
                Some((_, scarce_list, fine_list)) => {
                    scarce_list.push(scarce_acc);
                    fine_list.push(finetuned_acc);
                }
                None => per_domain.push((domain, vec![scarce_acc], vec![finetuned_acc])),
            }
        }
    }
    let rows: Vec<HeadStudyRow> = per_domain
        .iter()
        .map(|(domain, scarce, fine)| {
            let scarce = mean_std_of(scarce);
            let finetuned = mean_std_of(fine);
            HeadStudyRow {
                domain: domain.clone(),
                delta: finetuned.mean - scarce.mean,
                scarce,
                finetuned,
            }
        })
        .collect();
    let scarce_means: Vec<f64> = per_domain
        .iter()
        .flat_map(|(_, s, _)| s.iter().copied())
        .collect();
    let fine_means: Vec<f64> = per_domain
        .iter()
        .flat_map(|(_, _, f)| f.iter().copied())
        .collect();
    let average_scarce = mean_std_of(&scarce_means);
    let average_finetuned = mean_std_of(&fine_means);
    Ok(HeadStudyReport {
        rows,
        average_delta: average_finetuned.mean - average_scarce.mean,
        average_scarce,
        average_finetuned,
        frozen_extractor_intact: frozen_ok,
    })
}

// ---- ablation grid ----------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub use_vhat: bool,
    pub use_uhat: bool,
    pub use_uhat_c: bool,
    pub summary: Summary,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl std::fmt::Display for AblationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let domains: Vec<&String> = self
            .rows
            .first()
            .map(|r| r.summary.per_domain.keys().collect())
            .unwrap_or_default();
        write!(f, "{:<22}", "configuration")?;
        for d in &domains {
            write!(f, " {:>14}", d)?;
        }
        writeln!(f, " {:>14}", "avg")?;
        for row in &self.rows {
            write!(f, "{:<22}", row.label)?;
            for d in &domains {
                let cell = &row.summary.per_domain[*d];
                write!(f, " {:>7.2} ±{:>5.2}", cell.mean, cell.std)?;
            }
            writeln!(f, " {:>7.2} ±{:>5.2}", row.summary.average.mean, row.summary.average.std)?;
        }
        Ok(())
    }
}

/// The four component rows: generator only, generator plus prototypes,
/// generator plus residual net, and the full method.
pub fn ablation_rows() -> [(&'static str, bool, bool, bool); 4] {
    [
        ("generator-only", true, false, false),
        ("generator+prototypes", true, false, true),
        ("generator+residual", false, true, false),
        ("full", false, true, true),
    ]
}

pub fn ablation(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (label, use_vhat, use_uhat, use_uhat_c) in ablation_rows() {
        let mut row_cfg = cfg.clone();
        row_cfg.strategy = "fraug".into();
        row_cfg.toggles.use_vhat = use_vhat;
        row_cfg.toggles.use_uhat = use_uhat;
        row_cfg.toggles.use_uhat_c = use_uhat_c;
        let row_out = out_dir.map(|d| d.join(label));
        let output = run_experiment(&row_cfg, row_out.as_deref())?;
        rows.push(AblationRow {
            label: label.to_string(),
            use_vhat,
            use_uhat,
            use_uhat_c,
            summary: output.summary,
        });
    }
    let report = AblationReport { rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::config(format!("ablation serialize: {e}")))?;
        std::fs::write(dir.join("ablation.json"), json + "\n")?;
    }
    Ok(report)
}
