//! The four networks of the training loop: feature extractor, prediction
//! head, shared class-conditional generator and per-client residual
//! transform net, with their parameter-role partitioning.
//!
//! Forward passes are written against a [`Graph`]; parameters enter either
//! as differentiable leaves (with bindings returned for gradient harvest)
//! or as detached constants, which is how loss terms are routed to the
//! right parameter subsets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, ParamBinding, Var};
use crate::params::{ParameterSet, Role, RoleMask};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether parameters enter a graph as trainable leaves or constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    Trainable,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Feature extractor (dense [+ batchnorm] + relu per hidden layer, then a
/// dense embedding layer) followed by a single dense prediction head.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub batchnorm: bool,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            input_dim: 20,
            hidden: vec![192, 192],
            embedding_dim: 32,
            num_classes: 5,
            batchnorm: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Concatenate a one-hot label vector to the noise input.
    OneHot,
    /// Concatenate a learned per-class embedding row to the noise input.
    Embedding,
}

/// Two-layer MLP mapping (noise, class) to an embedding-space vector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
    pub conditioning: Conditioning,
    /// Width of the learned label embedding (only used with
    /// `Conditioning::Embedding`).
    pub label_embed_dim: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            noise_dim: 16,
            num_classes: 5,
            hidden: 16,
            embedding_dim: 32,
            conditioning: Conditioning::OneHot,
            label_embed_dim: 8,
        }
    }
}

/// Two-layer MLP mapping embeddings to residuals of the same width. The
/// output layer has no activation so residuals span both signs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RtNetSpec {
    pub embedding_dim: usize,
    pub hidden: usize,
}

impl Default for RtNetSpec {
    fn default() -> Self {
        RtNetSpec {
            embedding_dim: 32,
            hidden: 16,
        }
    }
}

fn validate_positive(value: usize, what: &str) -> Result<()> {
    if value == 0 {
        return Err(Error::config(format!("{what} must be positive")));
    }
    Ok(())
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        validate_positive(self.input_dim, "classifier input_dim")?;
        validate_positive(self.embedding_dim, "classifier embedding_dim")?;
        for (i, &w) in self.hidden.iter().enumerate() {
            validate_positive(w, &format!("classifier hidden[{i}]"))?;
        }
        if self.num_classes < 2 {
            return Err(Error::config("classifier needs at least 2 classes"));
        }
        Ok(())
    }

    /// Fresh parameters with Kaiming-style uniform fan-in initialization.
    pub fn init_params<T: Element>(&self, rng: &mut ChaCha8Rng) -> Result<ParameterSet<T>> {
        self.validate()?;
        let mut params = ParameterSet::new();
        let mut prev = self.input_dim;
        for (i, &width) in self.hidden.iter().enumerate() {
            insert_dense(&mut params, &format!("f.{i}"), Role::Extractor, prev, width, rng)?;
            if self.batchnorm {
                insert_batchnorm(&mut params, &format!("f.{i}.bn"), width)?;
            }
            prev = width;
        }
        insert_dense(&mut params, "f.emb", Role::Extractor, prev, self.embedding_dim, rng)?;
        insert_dense(&mut params, "h", Role::Head, self.embedding_dim, self.num_classes, rng)?;
        Ok(params)
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        validate_positive(self.noise_dim, "generator noise_dim")?;
        validate_positive(self.hidden, "generator hidden")?;
        validate_positive(self.embedding_dim, "generator embedding_dim")?;
        if self.num_classes < 2 {
            return Err(Error::config("generator needs at least 2 classes"));
        }
        if self.conditioning == Conditioning::Embedding {
            validate_positive(self.label_embed_dim, "generator label_embed_dim")?;
        }
        Ok(())
    }

    fn conditioned_dim(&self) -> usize {
        match self.conditioning {
            Conditioning::OneHot => self.noise_dim + self.num_classes,
            Conditioning::Embedding => self.noise_dim + self.label_embed_dim,
        }
    }

    pub fn init_params<T: Element>(&self, rng: &mut ChaCha8Rng) -> Result<ParameterSet<T>> {
        self.validate()?;
        let mut params = ParameterSet::new();
        if self.conditioning == Conditioning::Embedding {
            let table = standard_normal_tensor::<T>(
                vec![self.num_classes, self.label_embed_dim],
                rng,
            )
            .with_requires_grad(true);
            params.insert("gen.label_table", Role::Generator, table)?;
        }
        insert_dense(&mut params, "gen.0", Role::Generator, self.conditioned_dim(), self.hidden, rng)?;
        insert_dense(&mut params, "gen.1", Role::Generator, self.hidden, self.embedding_dim, rng)?;
        Ok(params)
    }
}

impl RtNetSpec {
    pub fn validate(&self) -> Result<()> {
        validate_positive(self.embedding_dim, "rtnet embedding_dim")?;
        validate_positive(self.hidden, "rtnet hidden")?;
        Ok(())
    }

    pub fn init_params<T: Element>(&self, rng: &mut ChaCha8Rng) -> Result<ParameterSet<T>> {
        self.validate()?;
        let mut params = ParameterSet::new();
        insert_dense(&mut params, "rt.0", Role::RtNet, self.embedding_dim, self.hidden, rng)?;
        insert_dense(&mut params, "rt.1", Role::RtNet, self.hidden, self.embedding_dim, rng)?;
        Ok(params)
    }
}

fn kaiming_uniform<T: Element>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::from_f64(rng.gen::<f64>() * 2.0 * bound - bound))
        .collect();
    Tensor::from_vec(vec![rows, cols], data)
        .expect("shape matches data")
        .with_requires_grad(true)
}

fn standard_normal_tensor<T: Element>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64(v)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Draw a `[rows x cols]` matrix of standard normal noise.
pub fn sample_noise<T: Element>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    standard_normal_tensor(vec![rows, cols], rng)
}

fn insert_dense<T: Element>(
    params: &mut ParameterSet<T>,
    prefix: &str,
    role: Role,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    params.insert(format!("{prefix}.w"), role, kaiming_uniform(fan_in, fan_out, fan_in, rng))?;
    params.insert(
        format!("{prefix}.b"),
        role,
        Tensor::zeros(vec![fan_out]).with_requires_grad(true),
    )?;
    Ok(())
}

fn insert_batchnorm<T: Element>(params: &mut ParameterSet<T>, prefix: &str, dim: usize) -> Result<()> {
    params.insert(
        format!("{prefix}.gamma"),
        Role::BatchNorm,
        Tensor::filled(vec![dim], T::one()).with_requires_grad(true),
    )?;
    params.insert(
        format!("{prefix}.beta"),
        Role::BatchNorm,
        Tensor::zeros(vec![dim]).with_requires_grad(true),
    )?;
    params.insert(
        format!("{prefix}.running_mean"),
        Role::BatchNorm,
        Tensor::zeros(vec![dim]),
    )?;
    params.insert(
        format!("{prefix}.running_var"),
        Role::BatchNorm,
        Tensor::filled(vec![dim], T::one()),
    )?;
    Ok(())
}

/// Tracks leaves added to a graph for one parameter set.
pub struct Binder<'a, T: Element> {
    params: &'a ParameterSet<T>,
    mode: BindMode,
    pub bindings: Vec<ParamBinding>,
}

impl<'a, T: Element> Binder<'a, T> {
    pub fn new(params: &'a ParameterSet<T>, mode: BindMode) -> Self {
        Binder {
            params,
            mode,
            bindings: Vec::new(),
        }
    }

    pub fn leaf(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let entry = self.params.get(name)?;
        let var = match self.mode {
            BindMode::Trainable if entry.tensor.requires_grad() => {
                let v = g.param(&entry.tensor);
                self.bindings.push(ParamBinding {
                    name: name.to_string(),
                    var: v,
                });
                v
            }
            _ => g.constant(&entry.tensor),
        };
        Ok(var)
    }
}

fn dense<T: Element>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// Output of a classifier forward pass.
pub struct ClassifierOut {
    pub embedding: Var,
    pub logits: Var,
    pub head_w: Var,
    pub head_b: Var,
    pub bindings: Vec<ParamBinding>,
    /// Per train-mode batchnorm layer: (prefix, observed batch stats).
    pub bn_stats: Vec<(String, BatchStats<f64>)>,
}

/// Forward the extractor and head. In train mode batch statistics are
/// normalized against and reported; the caller applies them to the running
/// buffers via [`apply_bn_updates`].
pub fn classifier_forward<T: Element>(
    g: &mut Graph<T>,
    spec: &ClassifierSpec,
    params: &ParameterSet<T>,
    input: &Tensor<T>,
    mode: Mode,
    bind: BindMode,
) -> Result<ClassifierOut> {
    if input.cols() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            context: "classifier input".into(),
            left: input.shape().to_vec(),
            right: vec![spec.input_dim],
        });
    }
    let mut binder = Binder::new(params, bind);
    let mut h = g.constant(input);
    let mut bn_stats = Vec::new();
    for (i, _) in spec.hidden.iter().enumerate() {
        let w = binder.leaf(g, &format!("f.{i}.w"))?;
        let b = binder.leaf(g, &format!("f.{i}.b"))?;
        h = dense(g, h, w, b)?;
        if spec.batchnorm {
            let prefix = format!("f.{i}.bn");
            let gamma = binder.leaf(g, &format!("{prefix}.gamma"))?;
            let beta = binder.leaf(g, &format!("{prefix}.beta"))?;
            h = match mode {
                Mode::Train => {
                    let (out, stats) = g.batchnorm_train(h, gamma, beta, BN_EPS)?;
                    bn_stats.push((
                        prefix,
                        BatchStats {
                            mean: stats.mean.iter().map(|v| v.as_f64()).collect(),
                            var_biased: stats.var_biased.iter().map(|v| v.as_f64()).collect(),
                            batch: stats.batch,
                        },
                    ));
                    out
                }
                Mode::Eval => {
                    let mean = params.get(&format!("{prefix}.running_mean"))?.tensor.data().to_vec();
                    let var = params.get(&format!("{prefix}.running_var"))?.tensor.data().to_vec();
                    g.batchnorm_eval(h, gamma, beta, &mean, &var, BN_EPS)?
                }
            };
        }
        h = g.relu(h)?;
    }
    let w = binder.leaf(g, "f.emb.w")?;
    let b = binder.leaf(g, "f.emb.b")?;
    let embedding = dense(g, h, w, b)?;
    let head_w = binder.leaf(g, "h.w")?;
    let head_b = binder.leaf(g, "h.b")?;
    let logits = dense(g, embedding, head_w, head_b)?;
    Ok(ClassifierOut {
        embedding,
        logits,
        head_w,
        head_b,
        bindings: binder.bindings,
        bn_stats,
    })
}

/// Apply observed batch statistics to the running buffers:
/// `running <- (1 - momentum) * running + momentum * batch`, with the
/// unbiased variance (`* B / (B - 1)`) feeding the running variance.
pub fn apply_bn_updates<T: Element>(
    params: &mut ParameterSet<T>,
    bn_stats: &[(String, BatchStats<f64>)],
    momentum: f64,
) -> Result<()> {
    for (prefix, stats) in bn_stats {
        let b = stats.batch as f64;
        let unbias = b / (b - 1.0);
        let keep = T::from_f64(1.0 - momentum);
        let mom = T::from_f64(momentum);
        {
            let mean = params.get_mut(&format!("{prefix}.running_mean"))?;
            for (r, &m) in mean.tensor.data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + mom * T::from_f64(m);
            }
        }
        {
            let var = params.get_mut(&format!("{prefix}.running_var"))?;
            for (r, &v) in var.tensor.data_mut().iter_mut().zip(&stats.var_biased) {
                *r = keep * *r + mom * T::from_f64(v * unbias);
            }
        }
    }
    Ok(())
}

/// Apply the prediction head (one dense layer) to an embedding-space input.
pub fn head_logits<T: Element>(g: &mut Graph<T>, head: (Var, Var), input: Var) -> Result<Var> {
    dense(g, input, head.0, head.1)
}

/// Generator forward: `dense(relu(dense(concat(z, condition(labels)))))`.
pub fn generator_forward<T: Element>(
    g: &mut Graph<T>,
    spec: &GeneratorSpec,
    params: &ParameterSet<T>,
    noise: Var,
    labels: &[usize],
    bind: BindMode,
) -> Result<(Var, Vec<ParamBinding>)> {
    let rows = g.shape(noise)[0];
    if rows != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "generator labels".into(),
            left: vec![rows],
            right: vec![labels.len()],
        });
    }
    for &label in labels {
        if label >= spec.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: spec.num_classes,
            });
        }
    }
    let mut binder = Binder::new(params, bind);
    let condition = match spec.conditioning {
        Conditioning::OneHot => {
            let mut data = vec![T::zero(); rows * spec.num_classes];
            for (r, &label) in labels.iter().enumerate() {
                data[r * spec.num_classes + label] = T::one();
            }
            g.constant_from(vec![rows, spec.num_classes], data)?
        }
        Conditioning::Embedding => {
            let table = binder.leaf(g, "gen.label_table")?;
            g.gather_rows(table, labels)?
        }
    };
    let joined = g.concat_cols(noise, condition)?;
    let w0 = binder.leaf(g, "gen.0.w")?;
    let b0 = binder.leaf(g, "gen.0.b")?;
    let h = dense(g, joined, w0, b0)?;
    let h = g.relu(h)?;
    let w1 = binder.leaf(g, "gen.1.w")?;
    let b1 = binder.leaf(g, "gen.1.b")?;
    let out = dense(g, h, w1, b1)?;
    Ok((out, binder.bindings))
}

/// Residual transform forward: two dense layers with relu between, no final
/// activation.
pub fn rtnet_forward<T: Element>(
    g: &mut Graph<T>,
    spec: &RtNetSpec,
    params: &ParameterSet<T>,
    input: Var,
    bind: BindMode,
) -> Result<(Var, Vec<ParamBinding>)> {
    let cols = g.shape(input)[1];
    if cols != spec.embedding_dim {
        return Err(Error::ShapeMismatch {
            context: "rtnet input".into(),
            left: g.shape(input).to_vec(),
            right: vec![spec.embedding_dim],
        });
    }
    let mut binder = Binder::new(params, bind);
    let w0 = binder.leaf(g, "rt.0.w")?;
    let b0 = binder.leaf(g, "rt.0.b")?;
    let h = dense(g, input, w0, b0)?;
    let h = g.relu(h)?;
    let w1 = binder.leaf(g, "rt.1.w")?;
    let b1 = binder.leaf(g, "rt.1.b")?;
    let out = dense(g, h, w1, b1)?;
    Ok((out, binder.bindings))
}

/// Exact scalar-element count across matching roles.
pub fn count_parameters<T: Element>(params: &ParameterSet<T>, filter: Option<RoleMask>) -> u64 {
    params.count_params(filter)
}

/// Multiply-accumulate count of one forward pass per sample (dense layers
/// only; normalization and activations are negligible by comparison).
pub fn classifier_macs(spec: &ClassifierSpec) -> u64 {
    let mut macs = 0u64;
    let mut prev = spec.input_dim as u64;
    for &w in &spec.hidden {
        macs += prev * w as u64;
        prev = w as u64;
    }
    macs += prev * spec.embedding_dim as u64;
    macs += (spec.embedding_dim * spec.num_classes) as u64;
    macs
}

pub fn generator_macs(spec: &GeneratorSpec) -> u64 {
    (spec.conditioned_dim() * spec.hidden + spec.hidden * spec.embedding_dim) as u64
}

pub fn rtnet_macs(spec: &RtNetSpec) -> u64 {
    (spec.embedding_dim * spec.hidden + spec.hidden * spec.embedding_dim) as u64
}
