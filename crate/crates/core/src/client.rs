//! Client-side local update: the two-stage step (classifier optimization on
//! real plus synthetic embeddings, then generator and residual-net
//! optimization), EMA class prototypes, and the exponential ramp schedules.
//!
//! Gradient routing is structural: synthetic embeddings enter the
//! classifier stage as detached constants so their cross-entropy only
//! reaches the prediction head, and stage two rebuilds them with the
//! generator (resp. residual net) bound trainable so each loss reaches
//! exactly its own parameters.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::graph::{accumulate_grads, Graph, Var};
use crate::nets::{
    apply_bn_updates, classifier_forward, generator_forward, head_logits, rtnet_forward,
    sample_noise, BindMode, ClassifierSpec, GeneratorSpec, Mode, RtNetSpec, BN_MOMENTUM,
};
use crate::objectives::{mmd_var, KernelSpec};
use crate::optim::{OptKind, Optimizer};
use crate::params::{ParameterSet, Role, RoleMask};
use crate::rng::{seeded_stream, stream};
use crate::tensor::{Element, Tensor};

/// Exponential ramp `v_max * exp(-5 * (1 - min(t/T, 1))^2)`: starts at
/// `v_max * e^-5`, monotone non-decreasing, saturates at `v_max` for t >= T.
pub fn ramp_value(t: u64, ramp_len: u64, v_max: f64) -> Result<f64> {
    if ramp_len == 0 {
        return Err(Error::config("ramp length must be at least 1"));
    }
    if v_max <= 0.0 {
        return Err(Error::config("ramp maximum must be positive"));
    }
    let progress = (t as f64 / ramp_len as f64).min(1.0);
    Ok(v_max * (-5.0 * (1.0 - progress) * (1.0 - progress)).exp())
}

/// Clock plus ramp parameters for a scheduled coefficient.
#[derive(Debug, Clone)]
pub struct ScheduleState {
    t: u64,
    ramp_len: u64,
    v_max: f64,
}

impl ScheduleState {
    /// A zero maximum pins the schedule to zero (the component is off).
    pub fn new(ramp_len: u64, v_max: f64) -> Result<Self> {
        if v_max < 0.0 {
            return Err(Error::config("schedule maximum must be non-negative"));
        }
        if v_max > 0.0 {
            ramp_value(0, ramp_len, v_max)?;
        }
        Ok(ScheduleState { t: 0, ramp_len, v_max })
    }

    pub fn value(&self) -> f64 {
        if self.v_max == 0.0 {
            0.0
        } else {
            ramp_value(self.t, self.ramp_len, self.v_max).expect("validated at construction")
        }
    }

    pub fn advance(&mut self) {
        self.t += 1;
    }

    pub fn clock(&self) -> u64 {
        self.t
    }
}

/// Per-class EMA of real embedding means.
///
/// Update order is fixed (row-ascending batch sums, then division by
/// `count + epsilon`, then the EMA blend) so an independent scalar
/// recurrence reproduces the bank bit-exactly.
#[derive(Debug, Clone)]
pub struct PrototypeBank<T: Element> {
    protos: Vec<Option<Vec<T>>>,
    embedding_dim: usize,
    schedule: ScheduleState,
    epsilon: f64,
    /// Apply the EMA blend with a zero batch mean to classes absent from
    /// the batch instead of leaving them unchanged.
    literal_absent_update: bool,
}

impl<T: Element> PrototypeBank<T> {
    pub fn new(
        num_classes: usize,
        embedding_dim: usize,
        ramp_len: u64,
        epsilon: f64,
        literal_absent_update: bool,
    ) -> Result<Self> {
        if epsilon < 0.0 {
            return Err(Error::config("prototype epsilon must be non-negative"));
        }
        Ok(PrototypeBank {
            protos: vec![None; num_classes],
            embedding_dim,
            schedule: ScheduleState::new(ramp_len, 1.0)?,
            epsilon,
            literal_absent_update,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.schedule.value()
    }

    pub fn get(&self, class: usize) -> Option<&[T]> {
        self.protos.get(class).and_then(|p| p.as_deref())
    }

    pub fn initialized_classes(&self) -> Vec<usize> {
        (0..self.protos.len()).filter(|&c| self.protos[c].is_some()).collect()
    }

    /// EMA update from one batch of real embeddings. The first observation
    /// of a class installs the batch class mean directly; classes absent
    /// from the batch are left unchanged unless `literal_absent_update`.
    pub fn update(&mut self, embeddings: &Tensor<T>, labels: &[usize]) -> Result<()> {
        let d = embeddings.cols();
        if d != self.embedding_dim {
            return Err(Error::ShapeMismatch {
                context: "prototype update embeddings".into(),
                left: vec![self.embedding_dim],
                right: embeddings.shape().to_vec(),
            });
        }
        if embeddings.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "prototype update labels".into(),
                left: vec![embeddings.rows()],
                right: vec![labels.len()],
            });
        }
        let classes = self.protos.len();
        let mut sums: Vec<Vec<T>> = vec![vec![T::zero(); d]; classes];
        let mut counts = vec![0usize; classes];
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let src = embeddings.row(row);
            let dst = &mut sums[label];
            for c in 0..d {
                dst[c] = dst[c] + src[c];
            }
            counts[label] += 1;
        }
        let lambda = self.schedule.value();
        let lam = T::from_f64(lambda);
        let keep = T::one() - lam;
        for class in 0..classes {
            let present = counts[class] > 0;
            if !present && !self.literal_absent_update {
                continue;
            }
            let denom = T::from_f64(counts[class] as f64 + self.epsilon);
            let mean: Vec<T> = if present {
                sums[class].iter().map(|&s| s / denom).collect()
            } else if self.epsilon > 0.0 {
                vec![T::zero(); d]
            } else {
                // 0/0 under the literal rule; skip to avoid NaNs.
                continue;
            };
            match &mut self.protos[class] {
                Some(proto) => {
                    for c in 0..d {
                        proto[c] = keep * proto[c] + lam * mean[c];
                    }
                }
                None if present => {
                    self.protos[class] = Some(mean);
                }
                None => {}
            }
        }
        self.schedule.advance();
        Ok(())
    }
}

/// Method-specific coefficients and component toggles.
#[derive(Debug, Clone, PartialEq)]
pub struct FraugKnobs {
    /// Weight of the distribution-repulsion term in the generator loss.
    pub alpha: f64,
    /// Weight of the distribution-attraction terms in the residual-net loss.
    pub beta: f64,
    pub synthetic_weight_max: f64,
    pub synthetic_ramp_steps: u64,
    pub prototype_ramp_steps: u64,
    pub prototype_epsilon: f64,
    /// Train the head on raw generated embeddings (no residual transform).
    pub use_vhat: bool,
    /// Train the head on residual-personalized batch embeddings; also
    /// enables the residual net and its optimization stage.
    pub use_uhat: bool,
    /// Train the head on prototype-anchored synthetic embeddings.
    pub use_uhat_c: bool,
    /// Run the generator/residual-net optimization stage.
    pub stage2: bool,
    pub literal_absent_update: bool,
    /// Take two optimizer steps in stage one (real loss on the full model,
    /// then synthetic loss on the head) instead of one combined step.
    pub sequential_stage1: bool,
    /// Repel the personalized embeddings (rather than the raw generated
    /// ones) from the real embeddings in the generator loss.
    pub gen_mmd_on_personalized: bool,
    /// Weight of the real-data cross-entropy; 0 isolates the synthetic
    /// route for gradient-routing checks.
    pub real_weight: f64,
}

impl Default for FraugKnobs {
    fn default() -> Self {
        FraugKnobs {
            alpha: 1.0,
            beta: 1.0,
            synthetic_weight_max: 1.0,
            synthetic_ramp_steps: 125,
            prototype_ramp_steps: 125,
            prototype_epsilon: 1e-8,
            use_vhat: false,
            use_uhat: true,
            use_uhat_c: true,
            stage2: true,
            literal_absent_update: false,
            sequential_stage1: false,
            gen_mmd_on_personalized: false,
            real_weight: 1.0,
        }
    }
}

impl FraugKnobs {
    pub fn any_synthetic_loss(&self) -> bool {
        self.use_vhat || self.use_uhat || self.use_uhat_c
    }

    fn needs_generator_draws(&self) -> bool {
        self.use_vhat || self.use_uhat || self.stage2
    }

    pub fn needs_rtnet(&self) -> bool {
        self.use_uhat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseDistribution {
    Uniform,
    Laplace,
    Gauss,
}

/// What a client does in its local steps, beyond plain cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalVariant {
    Plain,
    Proximal { mu: f64 },
    NoiseAugment { dist: NoiseDistribution, gamma: f64 },
    Fraug(FraugKnobs),
}

impl LocalVariant {
    pub fn fraug_knobs(&self) -> Option<&FraugKnobs> {
        match self {
            LocalVariant::Fraug(k) => Some(k),
            _ => None,
        }
    }
}

/// Immutable network shapes shared by every client.
#[derive(Debug, Clone)]
pub struct ModelSpecs {
    pub classifier: ClassifierSpec,
    pub generator: GeneratorSpec,
    pub rtnet: RtNetSpec,
}

/// Optimizer settings for the three parameter groups. The classifier uses
/// `kind`; the generator and residual net use `aux_kind`, adaptive by
/// default so adversarial gradient spikes cannot produce unbounded steps.
#[derive(Debug, Clone)]
pub struct OptimSettings {
    pub kind: OptKind,
    pub aux_kind: OptKind,
    pub lr: f64,
    pub lr_generator: f64,
    pub lr_rtnet: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            kind: OptKind::sgd_momentum(),
            aux_kind: OptKind::adam(),
            lr: 0.05,
            lr_generator: 1e-3,
            lr_rtnet: 1e-3,
        }
    }
}

/// Serialized server-to-client payloads for one round.
#[derive(Debug, Clone)]
pub struct Broadcast {
    pub theta: Vec<u8>,
    pub omega: Option<Vec<u8>>,
}

/// Instructions for one client round.
pub struct RoundPlan<'a> {
    pub round: u64,
    pub local_steps: u64,
    pub variant: &'a LocalVariant,
    pub broadcast: Option<&'a Broadcast>,
    pub upload: bool,
    pub upload_exclude: RoleMask,
    pub upload_omega: bool,
    pub evaluate: bool,
}

/// What a client hands back to the server after a round.
#[derive(Debug, Clone)]
pub struct ClientRoundResult {
    pub client: usize,
    pub upload_theta: Option<Vec<u8>>,
    pub upload_omega: Option<Vec<u8>>,
    /// Mean loss per term name over the round's local steps.
    pub losses: Vec<(String, f64)>,
    /// Accuracy per evaluation group (domain name, accuracy in [0, 1]).
    pub accuracies: Vec<(String, f64)>,
}

/// One client's local world: parameters, prototypes, schedules, optimizer
/// states, dataset handle and purpose-separated random streams.
pub struct ClientState<T: Element> {
    pub id: usize,
    pub dataset: Arc<DomainDataset<T>>,
    /// Test groups to evaluate on: (domain name, sample indices).
    pub eval_groups: Vec<(String, Vec<usize>)>,
    pub specs: Arc<ModelSpecs>,
    pub theta: ParameterSet<T>,
    pub omega: ParameterSet<T>,
    pub phi: Option<ParameterSet<T>>,
    pub bank: PrototypeBank<T>,
    pub syn_schedule: ScheduleState,
    pub opt_theta: Optimizer<T>,
    pub opt_generator: Optimizer<T>,
    pub opt_rtnet: Optimizer<T>,
    pub batch_size: usize,
    kernel: KernelSpec,
    data_rng: ChaCha8Rng,
    gen_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    init_seed: u64,
    prox_reference: Option<ParameterSet<T>>,
}

/// Draws shared by both stages of one local step.
struct SyntheticDraws<T: Element> {
    noise: Option<Tensor<T>>,
    /// Fresh per-class noise rows, ascending class order.
    proto_noise: Vec<(usize, Tensor<T>)>,
    synthetic_weight: f64,
}

struct StageOneOutcome<T: Element> {
    real_loss: f64,
    synthetic_loss: Option<f64>,
    extra: Vec<(String, f64)>,
    embeddings: Tensor<T>,
    labels: Vec<usize>,
    draws: Option<SyntheticDraws<T>>,
}

impl<T: Element> ClientState<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        dataset: Arc<DomainDataset<T>>,
        eval_groups: Vec<(String, Vec<usize>)>,
        specs: Arc<ModelSpecs>,
        theta: ParameterSet<T>,
        omega: ParameterSet<T>,
        optim: &OptimSettings,
        knobs: &FraugKnobs,
        batch_size: usize,
        global_seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let k = id as u64;
        Ok(ClientState {
            id,
            dataset,
            eval_groups,
            theta,
            omega,
            phi: None,
            bank: PrototypeBank::new(
                specs.classifier.num_classes,
                specs.classifier.embedding_dim,
                knobs.prototype_ramp_steps,
                knobs.prototype_epsilon,
                knobs.literal_absent_update,
            )?,
            syn_schedule: ScheduleState::new(knobs.synthetic_ramp_steps, knobs.synthetic_weight_max)?,
            opt_theta: Optimizer::new(optim.kind, optim.lr)?,
            opt_generator: Optimizer::new(optim.aux_kind, optim.lr_generator)?,
            opt_rtnet: Optimizer::new(optim.aux_kind, optim.lr_rtnet)?,
            batch_size,
            kernel: KernelSpec::default(),
            data_rng: seeded_stream(global_seed, &[stream::DATA, k]),
            gen_rng: seeded_stream(global_seed, &[stream::GEN, k]),
            noise_rng: seeded_stream(global_seed, &[stream::NOISE, k]),
            init_seed: global_seed,
            specs,
            prox_reference: None,
        })
    }

    fn sample_batch(&mut self) -> Result<(Tensor<T>, Vec<usize>)> {
        let train = &self.dataset.train_idx;
        if train.is_empty() {
            return Err(Error::DegenerateBatch {
                context: format!("client {} train split", self.id),
                size: 0,
                min: 1,
            });
        }
        let indices: Vec<usize> = (0..self.batch_size)
            .map(|_| train[self.data_rng.gen_range(0..train.len())])
            .collect();
        Ok(self.dataset.gather(&indices))
    }

    /// One round of local work: merge the broadcast (local batchnorm entries survive
    /// because they are absent from the payload), run `local_steps` local
    /// updates, optionally evaluate and serialize uploads.
    pub fn client_update(&mut self, plan: &RoundPlan) -> Result<ClientRoundResult> {
        if let LocalVariant::Fraug(knobs) = plan.variant {
            if plan.round == 1 && knobs.needs_rtnet() && self.phi.is_none() {
                let mut rng = seeded_stream(self.init_seed, &[stream::INIT, self.id as u64]);
                self.phi = Some(self.specs.rtnet.init_params(&mut rng)?);
            }
        }
        if let Some(broadcast) = plan.broadcast {
            let incoming: ParameterSet<T> = ParameterSet::from_bytes(&broadcast.theta)?;
            self.theta.merge_overwrite(&incoming)?;
            if let Some(omega_bytes) = &broadcast.omega {
                let incoming: ParameterSet<T> = ParameterSet::from_bytes(omega_bytes)?;
                self.omega.merge_overwrite(&incoming)?;
            }
            if matches!(plan.variant, LocalVariant::Proximal { .. }) {
                self.prox_reference = Some(self.theta.clone());
            }
        }

        let mut loss_sums: Vec<(String, f64, u64)> = Vec::new();
        let record = |name: &str, value: f64, sums: &mut Vec<(String, f64, u64)>| {
            if let Some(slot) = sums.iter_mut().find(|(n, _, _)| n == name) {
                slot.1 += value;
                slot.2 += 1;
            } else {
                sums.push((name.to_string(), value, 1));
            }
        };

        for _ in 0..plan.local_steps {
            let outcome = self.stage_one(plan.variant)?;
            record("loss_real", outcome.real_loss, &mut loss_sums);
            if let Some(syn) = outcome.synthetic_loss {
                record("loss_syn", syn, &mut loss_sums);
            }
            for (name, value) in &outcome.extra {
                record(name, *value, &mut loss_sums);
            }
            if let LocalVariant::Fraug(knobs) = plan.variant {
                if knobs.stage2 {
                    let (gen_loss, rt_loss) = self.stage_two(
                        knobs,
                        &outcome.embeddings,
                        &outcome.labels,
                        outcome.draws.as_ref().ok_or_else(|| {
                            Error::config("stage two requires generator draws")
                        })?,
                    )?;
                    record("loss_gen", gen_loss, &mut loss_sums);
                    if let Some(rt) = rt_loss {
                        record("loss_rt", rt, &mut loss_sums);
                    }
                }
                self.syn_schedule.advance();
            }
        }

        let losses = loss_sums
            .into_iter()
            .map(|(name, sum, count)| (name, sum / count.max(1) as f64))
            .collect();
        let accuracies = if plan.evaluate { self.evaluate()? } else { Vec::new() };
        let (upload_theta, upload_omega) = if plan.upload {
            let theta = self.theta.to_bytes(plan.upload_exclude);
            let omega = plan.upload_omega.then(|| self.omega.to_bytes(RoleMask::EMPTY));
            (Some(theta), omega)
        } else {
            (None, None)
        };
        Ok(ClientRoundResult {
            client: self.id,
            upload_theta,
            upload_omega,
            losses,
            accuracies,
        })
    }

    /// Classification-model optimization on one fresh minibatch.
    fn stage_one(&mut self, variant: &LocalVariant) -> Result<StageOneOutcome<T>> {
        let (x, y) = self.sample_batch()?;
        let specs = Arc::clone(&self.specs);
        let mut g: Graph<T> = Graph::new();
        let fwd = classifier_forward(
            &mut g,
            &specs.classifier,
            &self.theta,
            &x,
            Mode::Train,
            BindMode::Trainable,
        )?;
        apply_bn_updates(&mut self.theta, &fwd.bn_stats, BN_MOMENTUM)?;
        let embeddings = g.tensor(fwd.embedding);
        let real_loss_var = g.cross_entropy(fwd.logits, &y)?;
        let real_loss = g.scalar(real_loss_var).as_f64();

        let mut synthetic_loss = None;
        let mut extra = Vec::new();
        let mut draws = None;
        let mut bindings = fwd.bindings;
        let head = (fwd.head_w, fwd.head_b);

        let mut total: Option<Var> = None;
        let push_term = |g: &mut Graph<T>, total: &mut Option<Var>, term: Var| -> Result<()> {
            *total = Some(match *total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
            Ok(())
        };

        match variant {
            LocalVariant::Fraug(knobs) => {
                // Prototypes are updated from this batch's real embeddings
                // before any synthetic construction.
                self.bank.update(&embeddings, &y)?;
                let step_draws = self.draw_synthetic_inputs(knobs, y.len())?;
                if knobs.sequential_stage1 && knobs.any_synthetic_loss() {
                    // First step: real loss on the full model.
                    if knobs.real_weight != 0.0 {
                        let real_term = if knobs.real_weight == 1.0 {
                            real_loss_var
                        } else {
                            g.scale(real_loss_var, T::from_f64(knobs.real_weight))?
                        };
                        self.finish_stage_one_step(&mut g, real_term, &bindings, None)?;
                    }
                    // Second step: synthetic loss against the updated head,
                    // head parameters only.
                    let mut g2: Graph<T> = Graph::new();
                    let head_w = g2.param(&self.theta.get("h.w")?.tensor);
                    let head_b = g2.param(&self.theta.get("h.b")?.tensor);
                    let head_bindings = vec![
                        crate::graph::ParamBinding { name: "h.w".into(), var: head_w },
                        crate::graph::ParamBinding { name: "h.b".into(), var: head_b },
                    ];
                    let (syn_var, syn_value) = self.synthetic_head_loss(
                        &mut g2,
                        knobs,
                        &embeddings,
                        &y,
                        &step_draws,
                        (head_w, head_b),
                    )?;
                    self.finish_stage_one_step(
                        &mut g2,
                        syn_var,
                        &head_bindings,
                        Some(RoleMask::of(&[Role::Head])),
                    )?;
                    return Ok(StageOneOutcome {
                        real_loss,
                        synthetic_loss: Some(syn_value),
                        extra,
                        embeddings,
                        labels: y,
                        draws: Some(step_draws),
                    });
                }
                if knobs.real_weight == 1.0 {
                    push_term(&mut g, &mut total, real_loss_var)?;
                } else if knobs.real_weight != 0.0 {
                    let scaled = g.scale(real_loss_var, T::from_f64(knobs.real_weight))?;
                    push_term(&mut g, &mut total, scaled)?;
                }
                if knobs.any_synthetic_loss() {
                    let (syn_var, syn_value) =
                        self.synthetic_head_loss(&mut g, knobs, &embeddings, &y, &step_draws, head)?;
                    synthetic_loss = Some(syn_value);
                    push_term(&mut g, &mut total, syn_var)?;
                }
                draws = Some(step_draws);
            }
            LocalVariant::Plain => {
                push_term(&mut g, &mut total, real_loss_var)?;
            }
            LocalVariant::Proximal { mu } => {
                push_term(&mut g, &mut total, real_loss_var)?;
                let reference = self
                    .prox_reference
                    .as_ref()
                    .ok_or_else(|| Error::config("proximal variant requires a broadcast reference"))?;
                let (term, prox_bindings) =
                    crate::objectives::proximal_penalty_var(&mut g, &self.theta, reference, *mu)?;
                extra.push(("loss_prox".into(), g.scalar(term).as_f64()));
                bindings.extend(prox_bindings);
                push_term(&mut g, &mut total, term)?;
            }
            LocalVariant::NoiseAugment { dist, gamma } => {
                push_term(&mut g, &mut total, real_loss_var)?;
                if *gamma > 0.0 {
                    let delta = self.sample_noise_matrix(*dist, *gamma, y.len())?;
                    let u_const = g.constant(&embeddings);
                    let delta_const = g.constant(&delta);
                    let noisy = g.add(u_const, delta_const)?;
                    let logits = head_logits(&mut g, head, noisy)?;
                    let term = g.cross_entropy(logits, &y)?;
                    extra.push(("loss_noise".into(), g.scalar(term).as_f64()));
                    push_term(&mut g, &mut total, term)?;
                }
            }
        }

        // A step with every classifier term disabled (possible only with a
        // zero real-loss weight) leaves the classifier untouched.
        if let Some(total) = total {
            self.finish_stage_one_step(&mut g, total, &bindings, None)?;
        }
        Ok(StageOneOutcome {
            real_loss,
            synthetic_loss,
            extra,
            embeddings,
            labels: y,
            draws,
        })
    }

    fn finish_stage_one_step(
        &mut self,
        g: &mut Graph<T>,
        total: Var,
        bindings: &[crate::graph::ParamBinding],
        filter: Option<RoleMask>,
    ) -> Result<()> {
        g.backward(total)?;
        accumulate_grads(g, bindings, &mut self.theta)?;
        self.opt_theta.step(&mut self.theta, filter)?;
        self.theta.zero_grads();
        Ok(())
    }

    /// Sample the step's generator noise. Both stages of one local step see
    /// the same draws.
    fn draw_synthetic_inputs(
        &mut self,
        knobs: &FraugKnobs,
        batch: usize,
    ) -> Result<SyntheticDraws<T>> {
        let noise = knobs
            .needs_generator_draws()
            .then(|| sample_noise::<T>(batch, self.specs.generator.noise_dim, &mut self.gen_rng));
        let mut proto_noise = Vec::new();
        if knobs.use_uhat_c {
            for class in self.bank.initialized_classes() {
                proto_noise.push((
                    class,
                    sample_noise::<T>(1, self.specs.generator.noise_dim, &mut self.gen_rng),
                ));
            }
        }
        Ok(SyntheticDraws {
            noise,
            proto_noise,
            synthetic_weight: self.syn_schedule.value(),
        })
    }

    /// Head-only synthetic loss terms. Every synthetic embedding enters the
    /// graph as a constant, so gradients reach only the head leaves.
    fn synthetic_head_loss(
        &self,
        g: &mut Graph<T>,
        knobs: &FraugKnobs,
        embeddings: &Tensor<T>,
        labels: &[usize],
        draws: &SyntheticDraws<T>,
        head: (Var, Var),
    ) -> Result<(Var, f64)> {
        let specs = &self.specs;
        let lam = T::from_f64(draws.synthetic_weight);
        let mut terms: Vec<Var> = Vec::new();

        let generated = match &draws.noise {
            Some(noise) if knobs.use_vhat || knobs.use_uhat => {
                let zv = g.constant(noise);
                let (v, _) = generator_forward(
                    g,
                    &specs.generator,
                    &self.omega,
                    zv,
                    labels,
                    BindMode::Constant,
                )?;
                Some(v)
            }
            _ => None,
        };
        if knobs.use_vhat {
            let v = generated.ok_or_else(|| Error::config("missing generator draw"))?;
            let logits = head_logits(g, head, v)?;
            terms.push(g.cross_entropy(logits, labels)?);
        }
        if knobs.use_uhat {
            let v = generated.ok_or_else(|| Error::config("missing generator draw"))?;
            let phi = self
                .phi
                .as_ref()
                .ok_or_else(|| Error::config("residual net not initialized"))?;
            let (residual, _) = rtnet_forward(g, &specs.rtnet, phi, v, BindMode::Constant)?;
            let scaled = g.scale(residual, lam)?;
            let u_const = g.constant(embeddings);
            let personalized = g.add(u_const, scaled)?;
            let logits = head_logits(g, head, personalized)?;
            terms.push(g.cross_entropy(logits, labels)?);
        }
        if knobs.use_uhat_c {
            for (class, noise) in &draws.proto_noise {
                let proto = self
                    .bank
                    .get(*class)
                    .ok_or_else(|| Error::config("prototype disappeared"))?;
                let proto_const = g.constant_from(vec![1, proto.len()], proto.to_vec())?;
                let zc = g.constant(noise);
                let (vc, _) = generator_forward(
                    g,
                    &specs.generator,
                    &self.omega,
                    zc,
                    &[*class],
                    BindMode::Constant,
                )?;
                let residual = if knobs.needs_rtnet() {
                    let phi = self
                        .phi
                        .as_ref()
                        .ok_or_else(|| Error::config("residual net not initialized"))?;
                    let (r, _) = rtnet_forward(g, &specs.rtnet, phi, vc, BindMode::Constant)?;
                    r
                } else {
                    vc
                };
                let scaled = g.scale(residual, lam)?;
                let anchored = g.add(proto_const, scaled)?;
                let logits = head_logits(g, head, anchored)?;
                terms.push(g.cross_entropy(logits, &[*class])?);
            }
        }
        let mut iter = terms.into_iter();
        let mut total = iter
            .next()
            .ok_or_else(|| Error::config("no synthetic loss terms enabled"))?;
        for term in iter {
            total = g.add(total, term)?;
        }
        Ok((total, g.scalar(total).as_f64()))
    }

    /// Generator and residual-net optimization. The classifier is fixed
    /// (head enters as constants); synthetic quantities are recomputed here
    /// so gradients flow to the right parameters: the generator only
    /// through its own loss, the residual net only through its own.
    fn stage_two(
        &mut self,
        knobs: &FraugKnobs,
        embeddings: &Tensor<T>,
        labels: &[usize],
        draws: &SyntheticDraws<T>,
    ) -> Result<(f64, Option<f64>)> {
        let specs = Arc::clone(&self.specs);
        let mut g: Graph<T> = Graph::new();
        let head_w = g.constant(&self.theta.get("h.w")?.tensor);
        let head_b = g.constant(&self.theta.get("h.b")?.tensor);
        let head = (head_w, head_b);
        let u_const = g.constant(embeddings);
        let lam = T::from_f64(draws.synthetic_weight);

        let noise = draws
            .noise
            .as_ref()
            .ok_or_else(|| Error::config("stage two requires generator noise"))?;
        let zv = g.constant(noise);
        let (generated, gen_bindings) =
            generator_forward(&mut g, &specs.generator, &self.omega, zv, labels, BindMode::Trainable)?;
        let logits_gen = head_logits(&mut g, head, generated)?;
        let ce_gen = g.cross_entropy(logits_gen, labels)?;
        let repel_arg = if knobs.gen_mmd_on_personalized && knobs.needs_rtnet() {
            let phi = self
                .phi
                .as_ref()
                .ok_or_else(|| Error::config("residual net not initialized"))?;
            let (residual, _) = rtnet_forward(&mut g, &specs.rtnet, phi, generated, BindMode::Constant)?;
            let scaled = g.scale(residual, lam)?;
            g.add(u_const, scaled)?
        } else {
            generated
        };
        let repel = mmd_var(&mut g, repel_arg, u_const, &self.kernel)?;
        let gen_loss = if knobs.alpha == 0.0 {
            ce_gen
        } else {
            let neg = g.scale(repel, T::from_f64(-knobs.alpha))?;
            g.add(ce_gen, neg)?
        };
        let gen_loss_value = g.scalar(gen_loss).as_f64();
        let mut total = gen_loss;

        let mut rt_loss_value = None;
        let mut rt_bindings = Vec::new();
        if knobs.needs_rtnet() {
            let phi = self
                .phi
                .as_ref()
                .ok_or_else(|| Error::config("residual net not initialized"))?;
            // Personalized batch embeddings, generator detached.
            let generated_const = g.detach(generated);
            let (residual, b) = rtnet_forward(&mut g, &specs.rtnet, phi, generated_const, BindMode::Trainable)?;
            rt_bindings.extend(b);
            let scaled = g.scale(residual, lam)?;
            let personalized = g.add(u_const, scaled)?;
            let logits_pers = head_logits(&mut g, head, personalized)?;
            let mut entropy_total = g.entropy(logits_pers)?;
            let mut attract_total = mmd_var(&mut g, personalized, u_const, &self.kernel)?;
            if knobs.use_uhat_c {
                for (class, noise) in &draws.proto_noise {
                    let proto = self
                        .bank
                        .get(*class)
                        .ok_or_else(|| Error::config("prototype disappeared"))?;
                    let proto_const = g.constant_from(vec![1, proto.len()], proto.to_vec())?;
                    let zc = g.constant(noise);
                    let (vc, _) = generator_forward(
                        &mut g,
                        &specs.generator,
                        &self.omega,
                        zc,
                        &[*class],
                        BindMode::Constant,
                    )?;
                    let (rc, b) = rtnet_forward(&mut g, &specs.rtnet, phi, vc, BindMode::Trainable)?;
                    rt_bindings.extend(b);
                    let scaled = g.scale(rc, lam)?;
                    let anchored = g.add(proto_const, scaled)?;
                    let logits_c = head_logits(&mut g, head, anchored)?;
                    let ent_c = g.entropy(logits_c)?;
                    entropy_total = g.add(entropy_total, ent_c)?;
                    let mmd_c = mmd_var(&mut g, anchored, proto_const, &self.kernel)?;
                    attract_total = g.add(attract_total, mmd_c)?;
                }
            }
            let neg_entropy = g.scale(entropy_total, T::from_f64(-1.0))?;
            let rt_loss = if knobs.beta == 0.0 {
                neg_entropy
            } else {
                let attract = g.scale(attract_total, T::from_f64(knobs.beta))?;
                g.add(neg_entropy, attract)?
            };
            rt_loss_value = Some(g.scalar(rt_loss).as_f64());
            total = g.add(total, rt_loss)?;
        }

        g.backward(total)?;
        accumulate_grads(&g, &gen_bindings, &mut self.omega)?;
        self.opt_generator
            .step(&mut self.omega, Some(RoleMask::of(&[Role::Generator])))?;
        self.omega.zero_grads();
        if let Some(phi) = self.phi.as_mut() {
            if !rt_bindings.is_empty() {
                accumulate_grads(&g, &rt_bindings, phi)?;
                self.opt_rtnet.step(phi, Some(RoleMask::of(&[Role::RtNet])))?;
                phi.zero_grads();
            }
        }
        Ok((gen_loss_value, rt_loss_value))
    }

    /// Random-noise augmentation draw with the requested standard deviation.
    fn sample_noise_matrix(
        &mut self,
        dist: NoiseDistribution,
        gamma: f64,
        rows: usize,
    ) -> Result<Tensor<T>> {
        let d = self.specs.classifier.embedding_dim;
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows * d {
            let v = match dist {
                NoiseDistribution::Gauss => {
                    use rand_distr::{Distribution, StandardNormal};
                    let z: f64 = StandardNormal.sample(&mut self.noise_rng);
                    gamma * z
                }
                NoiseDistribution::Uniform => {
                    // Half-width gamma * sqrt(3) gives standard deviation gamma.
                    let half = gamma * 3.0f64.sqrt();
                    self.noise_rng.gen::<f64>() * 2.0 * half - half
                }
                NoiseDistribution::Laplace => {
                    // Inverse CDF; scale gamma / sqrt(2) gives std gamma.
                    let b = gamma / 2.0f64.sqrt();
                    let u: f64 = self.noise_rng.gen::<f64>() - 0.5;
                    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
                }
            };
            data.push(T::from_f64(v));
        }
        Tensor::from_vec(vec![rows, d], data)
    }

    /// Accuracy of the current local model on each evaluation group.
    pub fn evaluate(&self) -> Result<Vec<(String, f64)>> {
        let mut out = Vec::with_capacity(self.eval_groups.len());
        for (name, indices) in &self.eval_groups {
            let (x, y) = self.dataset.gather(indices);
            let mut g: Graph<T> = Graph::new();
            let fwd = classifier_forward(
                &mut g,
                &self.specs.classifier,
                &self.theta,
                &x,
                Mode::Eval,
                BindMode::Constant,
            )?;
            let logits = g.data(fwd.logits);
            let classes = self.specs.classifier.num_classes;
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
            let accuracy = if y.is_empty() { 0.0 } else { correct as f64 / y.len() as f64 };
            out.push((name.clone(), accuracy));
        }
        Ok(out)
    }
}
