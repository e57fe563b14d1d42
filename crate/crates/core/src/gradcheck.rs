//! Central finite-difference verification of every layer and loss term,
//! including the composite stage losses with stop-gradient prototypes.
//!
//! Checks run in f64 with step 1e-6 against `|a - n| / max(1, |a|, |n|)`.
//! Kernel checks use fixed bandwidths: the median-heuristic bandwidth is a
//! constant by contract (no gradient flows through it), so differencing
//! through it would measure a term the implementation deliberately omits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nets::{
    classifier_forward, generator_forward, head_logits, rtnet_forward, BindMode, ClassifierSpec,
    GeneratorSpec, Mode, RtNetSpec,
};
use crate::objectives::{mmd_var, proximal_penalty_var, KernelSpec};
use crate::params::{ParameterSet, Role};
use crate::rng::seeded_stream;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_err: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub components: Vec<ComponentReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed())
    }

    pub fn failed_components(&self) -> Vec<&ComponentReport> {
        self.components.iter().filter(|c| !c.passed()).collect()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<28} {:>14}  status", "component", "max rel err")?;
        for c in &self.components {
            writeln!(
                f,
                "{:<28} {:>14.3e}  {}",
                c.name,
                c.max_rel_err,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

type Builder<'a> = dyn Fn(&[Vec<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)> + 'a;

/// Compare analytic gradients against central differences for one scalar
/// function of several flat inputs. `fault` perturbs the analytic gradient
/// of the named component, exercising the detection path.
fn check_component(
    name: &str,
    build: &Builder,
    inputs: &[Vec<f64>],
    fault: bool,
) -> Result<ComponentReport> {
    let (mut graph, loss, vars) = build(inputs)?;
    graph.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| graph.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    if fault {
        if let Some(first) = analytic.first_mut().and_then(|g| g.first_mut()) {
            *first += 1e-2;
        }
    }
    let mut worst = 0.0f64;
    for (slot, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[slot][i] += STEP;
            let (g, l, _) = build(&plus)?;
            let f_plus = g.scalar(l);
            let mut minus = inputs.to_vec();
            minus[slot][i] -= STEP;
            let (g, l, _) = build(&minus)?;
            let f_minus = g.scalar(l);
            numeric[i] = (f_plus - f_minus) / (2.0 * STEP);
        }
        worst = worst.max(max_rel_error(&analytic[slot], &numeric));
    }
    Ok(ComponentReport {
        name: name.to_string(),
        max_rel_err: worst,
    })
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>() * 2.0 * spread - spread).collect()
}

/// Clone `base` with the trainable entries' values replaced from flat data.
fn with_values(base: &ParameterSet<f64>, data: &[Vec<f64>]) -> Result<ParameterSet<f64>> {
    let mut out = base.clone();
    let names: Vec<String> = base
        .iter()
        .filter(|e| e.tensor.requires_grad())
        .map(|e| e.name.clone())
        .collect();
    for (name, values) in names.iter().zip(data) {
        let entry = out.get_mut(name)?;
        let shape = entry.tensor.shape().to_vec();
        entry.tensor = Tensor::from_vec(shape, values.clone())?.with_requires_grad(true);
    }
    Ok(out)
}

fn trainable_data(params: &ParameterSet<f64>) -> Vec<Vec<f64>> {
    params
        .iter()
        .filter(|e| e.tensor.requires_grad())
        .map(|e| e.tensor.data().to_vec())
        .collect()
}

/// Run every component check. `fault_in` injects a wrong analytic gradient
/// into the named component to exercise the failure path.
pub fn run_with_fault(fault_in: Option<&str>) -> Result<GradCheckReport> {
    let mut rng = seeded_stream(0xFD, &[1]);
    let mut components = Vec::new();
    let fault = |name: &str| fault_in == Some(name);

    // Dense layer through a quadratic so weight gradients are input-dependent.
    {
        let x = random_vec(&mut rng, 3 * 4, 1.0);
        let w = random_vec(&mut rng, 4 * 2, 1.0);
        let b = random_vec(&mut rng, 2, 1.0);
        let build: Box<Builder> = Box::new(|data: &[Vec<f64>]| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.param(&Tensor::from_vec(vec![3, 4], data[0].clone())?);
            let w = g.param(&Tensor::from_vec(vec![4, 2], data[1].clone())?);
            let b = g.param(&Tensor::from_vec(vec![2], data[2].clone())?);
            let xw = g.matmul(x, w)?;
            let out = g.add_bias(xw, b)?;
            let sq = g.mul(out, out)?;
            let loss = g.mean_all(sq)?;
            Ok((g, loss, vec![x, w, b]))
        });
        components.push(check_component("dense", &build, &[x, w, b], fault("dense"))?);
    }

    // Relu at points away from the kink.
    {
        let x: Vec<f64> = random_vec(&mut rng, 12, 1.0)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        let build: Box<Builder> = Box::new(|data: &[Vec<f64>]| {
            let mut g: Graph<f64> = Graph::new();
            let t = Tensor::from_vec(vec![3, 4], data[0].clone())?;
            let x = g.param(&t);
            let r = g.relu(x)?;
            let sq = g.mul(r, r)?;
            let loss = g.sum_all(sq)?;
            Ok((g, loss, vec![x]))
        });
        components.push(check_component("relu", &build, &[x], fault("relu"))?);
    }

    // Softmax contracted with a fixed random matrix.
    {
        let x = random_vec(&mut rng, 3 * 5, 2.0);
        let m = random_vec(&mut rng, 3 * 5, 1.0);
        let build: Box<Builder> = Box::new(move |data: &[Vec<f64>]| {
            let mut g: Graph<f64> = Graph::new();
            let t = Tensor::from_vec(vec![3, 5], data[0].clone())?;
            let x = g.param(&t);
            let s = g.softmax(x)?;
            let weights = g.constant_from(vec![3, 5], m.clone())?;
            let prod = g.mul(s, weights)?;
            let loss = g.sum_all(prod)?;
            Ok((g, loss, vec![x]))
        });
        components.push(check_component("softmax", &build, &[x], fault("softmax"))?);
    }

    // Batch normalization, train and eval modes.
    {
        let x = random_vec(&mut rng, 5 * 3, 1.5);
        let gamma = random_vec(&mut rng, 3, 1.0);
        let beta = random_vec(&mut rng, 3, 1.0);
        let build_train: Box<Builder> = Box::new(|data: &[Vec<f64>]| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.param(&Tensor::from_vec(vec![5, 3], data[0].clone())?);
            let gamma = g.param(&Tensor::from_vec(vec![3], data[1].clone())?);
            let beta = g.param(&Tensor::from_vec(vec![3], data[2].clone())?);
            let (out, _) = g.batchnorm_train(x, gamma, beta, 1e-5)?;
            let sq = g.mul(out, out)?;
            let loss = g.mean_all(sq)?;
            Ok((g, loss, vec![x, gamma, beta]))
        });
        components.push(check_component(
            "batchnorm-train",
            &build_train,
            &[x.clone(), gamma.clone(), beta.clone()],
            fault("batchnorm-train"),
        )?);
        let build_eval: Box<Builder> = Box::new(|data: &[Vec<f64>]| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.param(&Tensor::from_vec(vec![5, 3], data[0].clone())?);
            let gamma = g.param(&Tensor::from_vec(vec![3], data[1].clone())?);
            let beta = g.param(&Tensor::from_vec(vec![3], data[2].clone())?);
            let out = g.batchnorm_eval(x, gamma, beta, &[0.1, -0.2, 0.3], &[1.1, 0.9, 1.3], 1e-5)?;
            let sq = g.mul(out, out)?;
            let loss = g.mean_all(sq)?;
            Ok((g, loss, vec![x, gamma, beta]))
        });
        components.push(check_component(
            "batchnorm-eval",
            &build_eval,
            &[x, gamma, beta],
            fault("batchnorm-eval"),
        )?);
    }

    // Cross-entropy and entropy w.r.t. logits.
    {
        let logits = random_vec(&mut rng, 4 * 3, 2.0);
        let labels = vec![0usize, 2, 1, 1];
        let labels2 = labels.clone();
        let build: Box<Builder> = Box::new(move |data: &[Vec<f64>]| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.param(&Tensor::from_vec(vec![4, 3], data[0].clone())?);
            let loss = g.cross_entropy(x, &labels2)?;
            Ok((g, loss, vec![x]))
        });
        components.push(check_component(
            "cross-entropy",
            &build,
            &[logits.clone()],
            fault("cross-entropy"),
        )?);
        let build: Box<Builder> = Box::new(|data: &[Vec<f64>]| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.param(&Tensor::from_vec(vec![4, 3], data[0].clone())?);
            let loss = g.entropy(x)?;
            Ok((g, loss, vec![x]))
        });
        components.push(check_component("entropy", &build, &[logits], fault("entropy"))?);
    }

    // MMD w.r.t. both sample sets (fixed bandwidth mixture).
    {
        let x = random_vec(&mut rng, 4 * 3, 1.0);
        let y = random_vec(&mut rng, 5 * 3, 1.0);
        let build: Box<Builder> = Box::new(|data: &[Vec<f64>]| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.param(&Tensor::from_vec(vec![4, 3], data[0].clone())?);
            let y = g.param(&Tensor::from_vec(vec![5, 3], data[1].clone())?);
            let loss = g.mmd(x, y, &[0.5, 1.0, 2.3])?;
            Ok((g, loss, vec![x, y]))
        });
        components.push(check_component("mmd", &build, &[x, y], fault("mmd"))?);
    }

    // Full classifier loss w.r.t. every trainable parameter.
    {
        let spec = ClassifierSpec {
            input_dim: 3,
            hidden: vec![4],
            embedding_dim: 3,
            num_classes: 3,
            batchnorm: true,
        };
        let mut init_rng = seeded_stream(0xFD, &[2]);
        let params: ParameterSet<f64> = spec.init_params(&mut init_rng)?;
        let x = Tensor::from_vec(vec![4, 3], random_vec(&mut rng, 12, 1.0))?;
        let labels = vec![0usize, 1, 2, 0];
        let inputs = trainable_data(&params);
        let build: Box<Builder> = Box::new(move |data: &[Vec<f64>]| {
            let params = with_values(&params, data)?;
            let mut g: Graph<f64> = Graph::new();
            let fwd = classifier_forward(&mut g, &spec, &params, &x, Mode::Train, BindMode::Trainable)?;
            let loss = g.cross_entropy(fwd.logits, &labels)?;
            let vars = fwd.bindings.iter().map(|b| b.var).collect();
            Ok((g, loss, vars))
        });
        components.push(check_component(
            "classifier-loss",
            &build,
            &inputs,
            fault("classifier-loss"),
        )?);
    }

    // Generator loss: recognition term minus weighted repulsion.
    {
        let gen_spec = GeneratorSpec {
            noise_dim: 3,
            num_classes: 3,
            hidden: 4,
            embedding_dim: 3,
            ..GeneratorSpec::default()
        };
        let mut init_rng = seeded_stream(0xFD, &[3]);
        let omega: ParameterSet<f64> = gen_spec.init_params(&mut init_rng)?;
        let noise = Tensor::from_vec(vec![4, 3], random_vec(&mut rng, 12, 1.0))?;
        let labels = vec![0usize, 1, 2, 1];
        let head_w = Tensor::from_vec(vec![3, 3], random_vec(&mut rng, 9, 1.0))?;
        let head_b = Tensor::from_vec(vec![3], random_vec(&mut rng, 3, 0.5))?;
        let real = Tensor::from_vec(vec![4, 3], random_vec(&mut rng, 12, 1.0))?;
        let kernel = KernelSpec {
            bandwidth: crate::objectives::Bandwidth::Fixed(1.3),
            multipliers: vec![0.5, 1.0, 2.0],
        };
        let inputs = trainable_data(&omega);
        let build: Box<Builder> = Box::new(move |data: &[Vec<f64>]| {
            let omega = with_values(&omega, data)?;
            let mut g: Graph<f64> = Graph::new();
            let z = g.constant(&noise);
            let (generated, bindings) =
                generator_forward(&mut g, &gen_spec, &omega, z, &labels, BindMode::Trainable)?;
            let hw = g.constant(&head_w);
            let hb = g.constant(&head_b);
            let logits = head_logits(&mut g, (hw, hb), generated)?;
            let ce = g.cross_entropy(logits, &labels)?;
            let u = g.constant(&real);
            let repel = mmd_var(&mut g, generated, u, &kernel)?;
            let neg = g.scale(repel, -0.7)?;
            let loss = g.add(ce, neg)?;
            let vars = bindings.iter().map(|b| b.var).collect();
            Ok((g, loss, vars))
        });
        components.push(check_component(
            "generator-loss",
            &build,
            &inputs,
            fault("generator-loss"),
        )?);
    }

    // Residual-net loss: negative entropy terms plus weighted attraction,
    // with generated inputs and prototypes held constant.
    {
        let rt_spec = RtNetSpec {
            embedding_dim: 3,
            hidden: 4,
        };
        let mut init_rng = seeded_stream(0xFD, &[4]);
        let phi: ParameterSet<f64> = rt_spec.init_params(&mut init_rng)?;
        let generated = Tensor::from_vec(vec![4, 3], random_vec(&mut rng, 12, 1.0))?;
        let generated_proto = Tensor::from_vec(vec![1, 3], random_vec(&mut rng, 3, 1.0))?;
        let real = Tensor::from_vec(vec![4, 3], random_vec(&mut rng, 12, 1.0))?;
        let proto = Tensor::from_vec(vec![1, 3], random_vec(&mut rng, 3, 1.0))?;
        let head_w = Tensor::from_vec(vec![3, 3], random_vec(&mut rng, 9, 1.0))?;
        let head_b = Tensor::from_vec(vec![3], random_vec(&mut rng, 3, 0.5))?;
        let kernel = KernelSpec {
            bandwidth: crate::objectives::Bandwidth::Fixed(0.9),
            multipliers: vec![1.0, 2.0],
        };
        let inputs = trainable_data(&phi);
        let build: Box<Builder> = Box::new(move |data: &[Vec<f64>]| {
            let phi = with_values(&phi, data)?;
            let mut g: Graph<f64> = Graph::new();
            let lam = 0.6;
            let head = (g.constant(&head_w), g.constant(&head_b));
            let u = g.constant(&real);
            let v = g.constant(&generated);
            let (residual, mut bindings) = rtnet_forward(&mut g, &rt_spec, &phi, v, BindMode::Trainable)?;
            let scaled = g.scale(residual, lam)?;
            let personalized = g.add(u, scaled)?;
            let logits = head_logits(&mut g, head, personalized)?;
            let mut ent = g.entropy(logits)?;
            let mut attract = mmd_var(&mut g, personalized, u, &kernel)?;
            let vp = g.constant(&generated_proto);
            let (rp, b2) = rtnet_forward(&mut g, &rt_spec, &phi, vp, BindMode::Trainable)?;
            bindings.extend(b2);
            let scaled = g.scale(rp, lam)?;
            let pc = g.constant(&proto);
            let anchored = g.add(pc, scaled)?;
            let logits_c = head_logits(&mut g, head, anchored)?;
            let ent_c = g.entropy(logits_c)?;
            ent = g.add(ent, ent_c)?;
            let attract_c = mmd_var(&mut g, anchored, pc, &kernel)?;
            attract = g.add(attract, attract_c)?;
            let neg_ent = g.scale(ent, -1.0)?;
            let weighted = g.scale(attract, 0.8)?;
            let loss = g.add(neg_ent, weighted)?;
            Ok((g, loss, bindings.iter().map(|b| b.var).collect()))
        });
        // Each parameter appears twice in the bindings (two forward calls),
        // so compare summed analytic gradients per parameter.
        let report = {
            let (mut graph, loss, vars) = build(&inputs)?;
            graph.backward(loss)?;
            let n_params = inputs.len();
            let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(n_params);
            for i in 0..n_params {
                let first = graph.grad(vars[i]).unwrap().to_vec();
                let second = graph.grad(vars[i + n_params]).unwrap();
                analytic.push(first.iter().zip(second).map(|(a, b)| a + b).collect());
            }
            if fault("rtnet-loss") {
                analytic[0][0] += 1e-2;
            }
            let mut worst = 0.0f64;
            for (slot, input) in inputs.iter().enumerate() {
                let mut numeric = vec![0.0; input.len()];
                for i in 0..input.len() {
                    let mut plus = inputs.clone();
                    plus[slot][i] += STEP;
                    let (g, l, _) = build(&plus)?;
                    let f_plus = g.scalar(l);
                    let mut minus = inputs.clone();
                    minus[slot][i] -= STEP;
                    let (g, l, _) = build(&minus)?;
                    let f_minus = g.scalar(l);
                    numeric[i] = (f_plus - f_minus) / (2.0 * STEP);
                }
                worst = worst.max(max_rel_error(&analytic[slot], &numeric));
            }
            ComponentReport {
                name: "rtnet-loss".into(),
                max_rel_err: worst,
            }
        };
        components.push(report);
    }

    // Proximal penalty.
    {
        let mut base: ParameterSet<f64> = ParameterSet::new();
        base.insert(
            "h.w",
            Role::Head,
            Tensor::from_vec(vec![4], random_vec(&mut rng, 4, 1.0))?.with_requires_grad(true),
        )?;
        base.insert(
            "f.w",
            Role::Extractor,
            Tensor::from_vec(vec![3], random_vec(&mut rng, 3, 1.0))?.with_requires_grad(true),
        )?;
        let mut reference = base.clone();
        reference.get_mut("h.w")?.tensor =
            Tensor::from_vec(vec![4], random_vec(&mut rng, 4, 1.0))?.with_requires_grad(true);
        let inputs = trainable_data(&base);
        let build: Box<Builder> = Box::new(move |data: &[Vec<f64>]| {
            let local = with_values(&base, data)?;
            let mut g: Graph<f64> = Graph::new();
            let (loss, bindings) = proximal_penalty_var(&mut g, &local, &reference, 0.37)?;
            let vars = bindings.iter().map(|b| b.var).collect();
            Ok((g, loss, vars))
        });
        components.push(check_component("proximal", &build, &inputs, fault("proximal"))?);
    }

    Ok(GradCheckReport { components })
}

pub fn run_full() -> Result<GradCheckReport> {
    run_with_fault(None)
}
