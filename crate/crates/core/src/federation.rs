//! Server-side protocol: broadcast, parallel client updates, aggregation,
//! strategy plug-ins and communication accounting.
//!
//! The server is a synchronization barrier; clients never talk to each
//! other. Payloads travel in the binary checkpoint format so byte-level
//! accounting falls out of the protocol itself. Per-client random streams
//! make the result independent of whether clients run sequentially or on a
//! thread pool.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::client::{
    Broadcast, ClientRoundResult, ClientState, FraugKnobs, LocalVariant, ModelSpecs,
    NoiseDistribution, OptimSettings, RoundPlan,
};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nets::{classifier_macs, generator_macs, rtnet_macs};
use crate::params::{aggregate_mean, ParameterSet, Role, RoleMask};
use crate::rng::{seeded_stream, stream};
use crate::tensor::Element;

/// Federated strategy: what the clients optimize and what the server
/// aggregates.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Fraug(FraugKnobs),
    FedAvg,
    FedBn,
    FedProx { mu: f64 },
    /// Purely local training, no communication.
    Single,
    /// One centralized model trained on the union of all domains.
    All,
    Noise { dist: NoiseDistribution, gamma: f64 },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Fraug(_) => "fraug",
            Strategy::FedAvg => "fedavg",
            Strategy::FedBn => "fedbn",
            Strategy::FedProx { .. } => "fedprox",
            Strategy::Single => "single",
            Strategy::All => "all",
            Strategy::Noise { dist: NoiseDistribution::Uniform, .. } => "noise-uniform",
            Strategy::Noise { dist: NoiseDistribution::Laplace, .. } => "noise-laplace",
            Strategy::Noise { dist: NoiseDistribution::Gauss, .. } => "noise-gauss",
        }
    }

    /// Whether rounds exchange parameters with a server at all.
    pub fn communicates(&self) -> bool {
        !matches!(self, Strategy::Single | Strategy::All)
    }

    /// Roles kept out of every payload (local batch normalization policy).
    pub fn payload_exclude(&self) -> RoleMask {
        match self {
            Strategy::Fraug(_) | Strategy::FedBn => RoleMask::of(&[Role::BatchNorm]),
            _ => RoleMask::EMPTY,
        }
    }

    pub fn shares_generator(&self) -> bool {
        matches!(self, Strategy::Fraug(_))
    }

    pub fn local_variant(&self) -> LocalVariant {
        match self {
            Strategy::Fraug(knobs) => LocalVariant::Fraug(knobs.clone()),
            Strategy::FedAvg | Strategy::FedBn | Strategy::Single | Strategy::All => {
                LocalVariant::Plain
            }
            Strategy::FedProx { mu } => LocalVariant::Proximal { mu: *mu },
            Strategy::Noise { dist, gamma } => LocalVariant::NoiseAugment {
                dist: *dist,
                gamma: *gamma,
            },
        }
    }
}

/// How client updates within a round are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Rayon thread pool when the `parallel` feature is enabled; falls back
    /// to the sequential path otherwise.
    Parallel,
}

fn map_clients<T, R, F>(
    clients: &mut [ClientState<T>],
    mode: ExecMode,
    f: F,
) -> Vec<Result<R>>
where
    T: Element,
    R: Send,
    F: Fn(&mut ClientState<T>) -> Result<R> + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if mode == ExecMode::Parallel {
            use rayon::prelude::*;
            return clients.par_iter_mut().map(|c| f(c)).collect();
        }
    }
    let _ = mode;
    clients.iter_mut().map(|c| f(c)).collect()
}

/// Per-round, per-client metrics.
#[derive(Debug, Clone)]
pub struct ClientRoundMetrics {
    pub client: usize,
    pub domain: String,
    pub train_losses: Vec<(String, f64)>,
    /// (domain, accuracy) pairs; one entry per evaluation group.
    pub accuracies: Vec<(String, f64)>,
    pub params_up: u64,
    pub params_down: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: u64,
    pub clients: Vec<ClientRoundMetrics>,
    /// Wall-clock time; informational only, never persisted to metrics.
    pub duration: Duration,
}

impl RoundRecord {
    /// Mean accuracy over all evaluation groups of all clients.
    pub fn average_accuracy(&self) -> Option<f64> {
        let values: Vec<f64> = self
            .clients
            .iter()
            .flat_map(|c| c.accuracies.iter().map(|(_, a)| *a))
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

pub struct ServerState<T: Element> {
    pub theta: ParameterSet<T>,
    pub omega: ParameterSet<T>,
}

/// A full federated training world for one seed.
pub struct Simulation<T: Element> {
    pub server: ServerState<T>,
    pub clients: Vec<ClientState<T>>,
    pub strategy: Strategy,
    pub exec: ExecMode,
    pub local_steps: u64,
    rounds_done: u64,
}

/// Everything needed to build a [`Simulation`].
pub struct SimulationConfig {
    pub strategy: Strategy,
    pub specs: ModelSpecs,
    pub optim: OptimSettings,
    pub batch_size: usize,
    pub local_steps: u64,
    pub exec: ExecMode,
    pub seed: u64,
}

impl<T: Element> Simulation<T> {
    /// Build server and clients. With the centralized strategy the domains
    /// are merged into one client that still reports per-domain accuracy.
    pub fn build(cfg: &SimulationConfig, datasets: Vec<DomainDataset<T>>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::config("at least one client dataset is required"));
        }
        for ds in &datasets {
            ds.validate()?;
            if ds.input_dim() != cfg.specs.classifier.input_dim {
                return Err(Error::ShapeMismatch {
                    context: format!("dataset '{}' vs classifier input", ds.domain),
                    left: vec![ds.input_dim()],
                    right: vec![cfg.specs.classifier.input_dim],
                });
            }
            if ds.num_classes != cfg.specs.classifier.num_classes {
                return Err(Error::config(format!(
                    "dataset '{}' has {} classes, classifier expects {}",
                    ds.domain, ds.num_classes, cfg.specs.classifier.num_classes
                )));
            }
        }
        let mut server_rng = seeded_stream(cfg.seed, &[stream::SERVER]);
        let theta0: ParameterSet<T> = cfg.specs.classifier.init_params(&mut server_rng)?;
        let omega0: ParameterSet<T> = cfg.specs.generator.init_params(&mut server_rng)?;
        let specs = Arc::new(cfg.specs.clone());
        let knobs = match &cfg.strategy {
            Strategy::Fraug(k) => k.clone(),
            _ => FraugKnobs::default(),
        };

        let clients = if matches!(cfg.strategy, Strategy::All) {
            vec![build_merged_client(
                &datasets, &specs, &theta0, &omega0, &cfg.optim, &knobs, cfg.batch_size, cfg.seed,
            )?]
        } else {
            let mut clients = Vec::with_capacity(datasets.len());
            for (id, ds) in datasets.into_iter().enumerate() {
                let eval = vec![(ds.domain.clone(), ds.test_idx.clone())];
                clients.push(ClientState::new(
                    id,
                    Arc::new(ds),
                    eval,
                    Arc::clone(&specs),
                    theta0.clone(),
                    omega0.clone(),
                    &cfg.optim,
                    &knobs,
                    cfg.batch_size,
                    cfg.seed,
                )?);
            }
            clients
        };
        Ok(Simulation {
            server: ServerState { theta: theta0, omega: omega0 },
            clients,
            strategy: cfg.strategy.clone(),
            exec: cfg.exec,
            local_steps: cfg.local_steps,
            rounds_done: 0,
        })
    }

    pub fn rounds_done(&self) -> u64 {
        self.rounds_done
    }

    /// Evaluate every client's current local model (used for round 0).
    pub fn evaluate_all(&mut self) -> Result<RoundRecord> {
        let start = Instant::now();
        let results = map_clients(&mut self.clients, self.exec, |client| client.evaluate());
        let mut clients = Vec::new();
        for (client, result) in self.clients.iter().zip(results) {
            clients.push(ClientRoundMetrics {
                client: client.id,
                domain: client.dataset.domain.clone(),
                train_losses: Vec::new(),
                accuracies: result?,
                params_up: 0,
                params_down: 0,
                bytes_up: 0,
                bytes_down: 0,
            });
        }
        Ok(RoundRecord {
            round: self.rounds_done,
            clients,
            duration: start.elapsed(),
        })
    }

    /// One communication round: broadcast, parallel client updates,
    /// aggregation, metrics.
    pub fn round(&mut self, evaluate: bool) -> Result<RoundRecord> {
        let start = Instant::now();
        let round = self.rounds_done + 1;
        let communicates = self.strategy.communicates();
        let exclude = self.strategy.payload_exclude();
        let broadcast = if communicates {
            Some(Broadcast {
                theta: self.server.theta.to_bytes(exclude),
                omega: self
                    .strategy
                    .shares_generator()
                    .then(|| self.server.omega.to_bytes(RoleMask::EMPTY)),
            })
        } else {
            None
        };
        let down_bytes = broadcast
            .as_ref()
            .map(|b| b.theta.len() as u64 + b.omega.as_ref().map_or(0, |o| o.len() as u64))
            .unwrap_or(0);
        let params_down = if communicates {
            let excluded = self.server.theta.count_params(Some(exclude));
            self.server.theta.count_params(None) - excluded
                + if self.strategy.shares_generator() {
                    self.server.omega.count_params(None)
                } else {
                    0
                }
        } else {
            0
        };

        let variant = self.strategy.local_variant();
        let local_steps = self.local_steps;
        let broadcast_ref = broadcast.as_ref();
        let upload_omega = self.strategy.shares_generator();
        let results: Vec<Result<ClientRoundResult>> =
            map_clients(&mut self.clients, self.exec, |client| {
                let plan = RoundPlan {
                    round,
                    local_steps,
                    variant: &variant,
                    broadcast: broadcast_ref,
                    upload: communicates,
                    upload_exclude: exclude,
                    upload_omega,
                    evaluate,
                };
                client.client_update(&plan)
            });
        let mut outputs = Vec::with_capacity(results.len());
        for (client, result) in self.clients.iter().zip(results) {
            let output = result.map_err(|e| {
                Error::config(format!(
                    "round {round}, client {} ({}): {e}",
                    client.id, client.dataset.domain
                ))
            })?;
            outputs.push(output);
        }

        let mut metrics = Vec::with_capacity(outputs.len());
        if communicates {
            let mut theta_payloads = Vec::with_capacity(outputs.len());
            let mut omega_payloads = Vec::with_capacity(outputs.len());
            for output in &outputs {
                let bytes = output
                    .upload_theta
                    .as_ref()
                    .ok_or_else(|| Error::structure("missing upload payload"))?;
                theta_payloads.push(ParameterSet::<T>::from_bytes(bytes)?);
                if upload_omega {
                    let bytes = output
                        .upload_omega
                        .as_ref()
                        .ok_or_else(|| Error::structure("missing generator payload"))?;
                    omega_payloads.push(ParameterSet::<T>::from_bytes(bytes)?);
                }
            }
            for set in theta_payloads.iter().chain(omega_payloads.iter()) {
                if set.count_params(Some(RoleMask::of(&[Role::RtNet]))) != 0 {
                    return Err(Error::structure(
                        "residual-net parameters must never be transmitted",
                    ));
                }
            }
            let refs: Vec<&ParameterSet<T>> = theta_payloads.iter().collect();
            let aggregated = aggregate_mean(&refs, RoleMask::EMPTY)?;
            self.server.theta.merge_overwrite(&aggregated)?;
            if upload_omega {
                let refs: Vec<&ParameterSet<T>> = omega_payloads.iter().collect();
                let aggregated = aggregate_mean(&refs, RoleMask::EMPTY)?;
                self.server.omega.merge_overwrite(&aggregated)?;
            }
        }
        for (client, output) in self.clients.iter().zip(outputs) {
            let bytes_up = output.upload_theta.as_ref().map_or(0, |b| b.len() as u64)
                + output.upload_omega.as_ref().map_or(0, |b| b.len() as u64);
            let params_up = if communicates { params_down } else { 0 };
            metrics.push(ClientRoundMetrics {
                client: client.id,
                domain: client.dataset.domain.clone(),
                train_losses: output.losses,
                accuracies: output.accuracies,
                params_up,
                params_down,
                bytes_up,
                bytes_down: down_bytes,
            });
        }
        self.rounds_done = round;
        Ok(RoundRecord {
            round,
            clients: metrics,
            duration: start.elapsed(),
        })
    }

    /// Run `rounds` rounds, evaluating on rounds where `eval_every` divides
    /// the index and always on the final round.
    pub fn run(&mut self, rounds: u64, eval_every: u64) -> Result<Vec<RoundRecord>> {
        let mut records = Vec::with_capacity(rounds as usize);
        for r in 1..=rounds {
            let evaluate = eval_every != 0 && (r % eval_every == 0 || r == rounds);
            records.push(self.round(evaluate)?);
        }
        Ok(records)
    }
}

#[allow(clippy::too_many_arguments)]
fn build_merged_client<T: Element>(
    datasets: &[DomainDataset<T>],
    specs: &Arc<ModelSpecs>,
    theta0: &ParameterSet<T>,
    omega0: &ParameterSet<T>,
    optim: &OptimSettings,
    knobs: &FraugKnobs,
    batch_size: usize,
    seed: u64,
) -> Result<ClientState<T>> {
    let dim = datasets[0].input_dim();
    let num_classes = datasets[0].num_classes;
    let mut features: Vec<T> = Vec::new();
    let mut labels = Vec::new();
    let mut train_idx = Vec::new();
    let mut eval_groups = Vec::new();
    let mut offset = 0usize;
    let mut test_idx = Vec::new();
    for ds in datasets {
        features.extend_from_slice(ds.features.data());
        labels.extend_from_slice(&ds.labels);
        train_idx.extend(ds.train_idx.iter().map(|&i| i + offset));
        let group: Vec<usize> = ds.test_idx.iter().map(|&i| i + offset).collect();
        test_idx.extend_from_slice(&group);
        eval_groups.push((ds.domain.clone(), group));
        offset += ds.len();
    }
    let merged = DomainDataset {
        domain: "all".to_string(),
        features: crate::tensor::Tensor::from_vec(vec![offset, dim], features)?,
        labels,
        train_idx,
        test_idx,
        num_classes,
        provenance: "merged".to_string(),
    };
    merged.validate()?;
    ClientState::new(
        0,
        Arc::new(merged),
        eval_groups,
        Arc::clone(specs),
        theta0.clone(),
        omega0.clone(),
        optim,
        knobs,
        batch_size,
        seed,
    )
}

/// Parameter and MAC accounting for the communication overhead report.
#[derive(Debug, Clone)]
pub struct CommReport {
    pub classifier_params: u64,
    pub generator_params: u64,
    pub rtnet_params: u64,
    pub classifier_macs: u64,
    pub generator_macs: u64,
    pub rtnet_macs: u64,
    pub generator_ratio: f64,
    pub rtnet_ratio: f64,
    /// Per-round parameter upload for the augmentation strategy vs plain
    /// averaging.
    pub upload_fraug: u64,
    pub upload_fedavg: u64,
}

/// Published reference row: large-scale model sizes the desk-scale numbers
/// mirror (parameters in millions, multiply-accumulates in billions).
pub const REFERENCE_MODEL_TABLE: &[(&str, f64, &str)] = &[
    ("ResNet18", 11.18, "1.84"),
    ("CNN for Digits", 18.15, "0.08"),
    ("Generator", 0.39, "<<0.01"),
    ("RTNet", 0.26, "<<0.01"),
];

pub fn communication_report(specs: &ModelSpecs) -> Result<CommReport> {
    let mut rng = seeded_stream(0, &[stream::SERVER]);
    let classifier: ParameterSet<f32> = specs.classifier.init_params(&mut rng)?;
    let generator: ParameterSet<f32> = specs.generator.init_params(&mut rng)?;
    let rtnet: ParameterSet<f32> = specs.rtnet.init_params(&mut rng)?;
    let classifier_params = classifier.count_params(None);
    let generator_params = generator.count_params(None);
    let rtnet_params = rtnet.count_params(None);
    let bn_params = classifier.count_params(Some(RoleMask::of(&[Role::BatchNorm])));
    Ok(CommReport {
        classifier_params,
        generator_params,
        rtnet_params,
        classifier_macs: classifier_macs(&specs.classifier),
        generator_macs: generator_macs(&specs.generator),
        rtnet_macs: rtnet_macs(&specs.rtnet),
        generator_ratio: generator_params as f64 / classifier_params as f64,
        rtnet_ratio: rtnet_params as f64 / classifier_params as f64,
        upload_fraug: classifier_params - bn_params + generator_params,
        upload_fedavg: classifier_params,
    })
}

impl std::fmt::Display for CommReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "component       params      MACs/sample")?;
        writeln!(f, "classifier      {:<11} {}", self.classifier_params, self.classifier_macs)?;
        writeln!(f, "generator       {:<11} {}", self.generator_params, self.generator_macs)?;
        writeln!(f, "rtnet           {:<11} {}", self.rtnet_params, self.rtnet_macs)?;
        writeln!(
            f,
            "generator/classifier = {:.4}, rtnet/classifier = {:.4}, combined = {:.4}",
            self.generator_ratio,
            self.rtnet_ratio,
            self.generator_ratio + self.rtnet_ratio
        )?;
        writeln!(
            f,
            "per-round upload: augmentation strategy {} params, plain averaging {} params",
            self.upload_fraug, self.upload_fedavg
        )?;
        writeln!(f, "the residual transform net is never transmitted")?;
        writeln!(f)?;
        writeln!(f, "published reference models (params in M, MACs in G):")?;
        for (name, params, macs) in REFERENCE_MODEL_TABLE {
            writeln!(f, "  {:<16} {:>6.2}  {}", name, params, macs)?;
        }
        Ok(())
    }
}
