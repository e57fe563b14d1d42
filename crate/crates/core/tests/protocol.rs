//! Federation-level behavior: broadcast/merge policies, gradient routing,
//! strategy mechanics and determinism, exercised through the public
//! simulation API.

use std::sync::Arc;

use fraug_core::client::{
    Broadcast, ClientState, FraugKnobs, LocalVariant, ModelSpecs, OptimSettings, RoundPlan,
};
use fraug_core::config::ExperimentConfig;
use fraug_core::data::generate_synthetic;
use fraug_core::federation::{Simulation, SimulationConfig, Strategy};
use fraug_core::harness::{build_simulation, run_experiment};
use fraug_core::metrics::MetricRow;
use fraug_core::nets::{ClassifierSpec, GeneratorSpec, RtNetSpec};
use fraug_core::params::{ParameterSet, Role, RoleMask};
use fraug_core::rng::seeded_stream;

fn small_config(strategy: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.strategy = strategy.into();
    cfg.rounds = 3;
    cfg.local_steps = 4;
    cfg.seeds = vec![11];
    cfg.data.train_per_domain = 60;
    cfg.data.test_per_domain = 30;
    cfg.data.shift.num_domains = 3;
    cfg.model.hidden = vec![16, 16];
    cfg.model.embedding_dim = 8;
    cfg.model.generator.noise_dim = 4;
    cfg.model.generator.hidden = 6;
    cfg.model.rtnet.hidden = 6;
    cfg
}

/// Serialized values of all trainable entries outside the given roles.
fn bytes_excluding(params: &ParameterSet<f32>, roles: &[Role]) -> Vec<u8> {
    let set: ParameterSet<f32> = ParameterSet::from_bytes(&params.to_bytes(RoleMask::of(roles))).unwrap();
    let mut out = Vec::new();
    for entry in set.iter() {
        if entry.tensor.requires_grad() {
            for v in entry.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn row_key(rows: &[MetricRow]) -> Vec<(u64, usize, String, String, u64)> {
    rows.iter()
        .filter(|r| r.split != "comm")
        .map(|r| (r.round, r.client, r.domain.clone(), r.metric.clone(), r.value.to_bits()))
        .collect()
}

fn specs_small() -> ModelSpecs {
    ModelSpecs {
        classifier: ClassifierSpec {
            input_dim: 6,
            hidden: vec![10],
            embedding_dim: 5,
            num_classes: 3,
            batchnorm: true,
        },
        generator: GeneratorSpec {
            noise_dim: 4,
            num_classes: 3,
            hidden: 6,
            embedding_dim: 5,
            ..GeneratorSpec::default()
        },
        rtnet: RtNetSpec {
            embedding_dim: 5,
            hidden: 6,
        },
    }
}

fn one_client(strategy: &Strategy, seed: u64) -> (ClientState<f32>, Broadcast) {
    let specs = specs_small();
    let shift = fraug_core::data::ShiftSpec {
        num_domains: 1,
        num_classes: 3,
        dim: 6,
        ..Default::default()
    };
    let ds = generate_synthetic::<f32>(&shift, 30, 12, seed).unwrap().remove(0);
    let mut rng = seeded_stream(seed, &[5]);
    let theta: ParameterSet<f32> = specs.classifier.init_params(&mut rng).unwrap();
    let omega: ParameterSet<f32> = specs.generator.init_params(&mut rng).unwrap();
    let broadcast = Broadcast {
        theta: theta.to_bytes(strategy.payload_exclude()),
        omega: strategy
            .shares_generator()
            .then(|| omega.to_bytes(RoleMask::EMPTY)),
    };
    let knobs = match strategy {
        Strategy::Fraug(k) => k.clone(),
        _ => FraugKnobs::default(),
    };
    let eval = vec![(ds.domain.clone(), ds.test_idx.clone())];
    let client = ClientState::new(
        0,
        Arc::new(ds),
        eval,
        Arc::new(specs),
        theta,
        omega,
        &OptimSettings::default(),
        &knobs,
        8,
        seed,
    )
    .unwrap();
    (client, broadcast)
}

fn plan<'a>(
    round: u64,
    steps: u64,
    variant: &'a LocalVariant,
    broadcast: Option<&'a Broadcast>,
) -> RoundPlan<'a> {
    RoundPlan {
        round,
        local_steps: steps,
        variant,
        broadcast,
        upload: false,
        upload_exclude: RoleMask::EMPTY,
        upload_omega: false,
        evaluate: false,
    }
}

#[test]
fn zero_local_steps_returns_merged_broadcast() {
    let strategy = Strategy::Fraug(FraugKnobs::default());
    let (mut client, broadcast) = one_client(&strategy, 3);
    // Make the incoming parameters recognizably different.
    let mut incoming: ParameterSet<f32> = ParameterSet::from_bytes(&broadcast.theta).unwrap();
    for entry in incoming.iter_mut() {
        for v in entry.tensor.data_mut() {
            *v += 1.0;
        }
    }
    let shifted = Broadcast {
        theta: incoming.to_bytes(RoleMask::EMPTY),
        omega: broadcast.omega.clone(),
    };
    let variant = strategy.local_variant();
    let result = client.client_update(&plan(1, 0, &variant, Some(&shifted))).unwrap();
    assert!(result.losses.is_empty());
    // Non-batchnorm entries took the broadcast values.
    for entry in client.theta.iter() {
        if entry.role != Role::BatchNorm {
            let incoming_entry = incoming.get(&entry.name).unwrap();
            assert_eq!(entry.tensor.data(), incoming_entry.tensor.data(), "{}", entry.name);
        }
    }
}

#[test]
fn local_batchnorm_survives_broadcast() {
    let strategy = Strategy::Fraug(FraugKnobs::default());
    let (mut client, broadcast) = one_client(&strategy, 4);
    // Perturb local batchnorm so retention is observable.
    for name in ["f.0.bn.gamma", "f.0.bn.running_mean"] {
        for v in client.theta.get_mut(name).unwrap().tensor.data_mut() {
            *v += 0.25;
        }
    }
    let bn_only = RoleMask::of(&[Role::Extractor, Role::Head, Role::Generator, Role::RtNet]);
    let bn_before = client.theta.to_bytes(bn_only);
    let variant = strategy.local_variant();
    client.client_update(&plan(1, 0, &variant, Some(&broadcast))).unwrap();
    let bn_after = client.theta.to_bytes(bn_only);
    assert_eq!(bn_before, bn_after);
}

#[test]
fn stage_one_with_only_synthetic_loss_routes_to_head() {
    let mut knobs = FraugKnobs {
        real_weight: 0.0,
        stage2: false,
        ..FraugKnobs::default()
    };
    knobs.synthetic_weight_max = 0.5;
    let strategy = Strategy::Fraug(knobs);
    let (mut client, broadcast) = one_client(&strategy, 5);
    let variant = strategy.local_variant();
    client.client_update(&plan(1, 1, &variant, Some(&broadcast))).unwrap();

    // Everything except the head (train-mode running statistics aside) must
    // stay bit-identical while the head moves.
    let non_head_before = bytes_excluding(&client.theta, &[Role::Head]);
    let head_before = client.theta.get("h.w").unwrap().tensor.data().to_vec();
    client.client_update(&plan(2, 1, &variant, None)).unwrap();
    let non_head_after = bytes_excluding(&client.theta, &[Role::Head]);
    let head_after = client.theta.get("h.w").unwrap().tensor.data().to_vec();
    assert_eq!(non_head_before, non_head_after);
    assert_ne!(head_before, head_after);
}

#[test]
fn stage_two_never_touches_classifier() {
    // Two identical clients; one runs stage two, the other does not. After
    // one local step the classifiers agree bit-exactly while the generator
    // and residual net differ.
    let knobs_on = FraugKnobs::default();
    let knobs_off = FraugKnobs {
        stage2: false,
        ..FraugKnobs::default()
    };
    let strategy_on = Strategy::Fraug(knobs_on);
    let strategy_off = Strategy::Fraug(knobs_off);
    let (mut a, broadcast) = one_client(&strategy_on, 6);
    let (mut b, _) = one_client(&strategy_off, 6);
    let va = strategy_on.local_variant();
    let vb = strategy_off.local_variant();
    a.client_update(&plan(1, 1, &va, Some(&broadcast))).unwrap();
    b.client_update(&plan(1, 1, &vb, Some(&broadcast))).unwrap();
    assert_eq!(
        a.theta.to_bytes(RoleMask::EMPTY),
        b.theta.to_bytes(RoleMask::EMPTY),
        "stage two must not change any classifier role"
    );
    assert_ne!(a.omega.to_bytes(RoleMask::EMPTY), b.omega.to_bytes(RoleMask::EMPTY));
    assert!(a.phi.is_some());
    let phi_a = a.phi.as_ref().unwrap().to_bytes(RoleMask::EMPTY);
    let phi_b = b.phi.as_ref().unwrap().to_bytes(RoleMask::EMPTY);
    assert_ne!(phi_a, phi_b);
}

#[test]
fn stage_one_never_touches_generator_or_rtnet() {
    let knobs = FraugKnobs {
        stage2: false,
        ..FraugKnobs::default()
    };
    let strategy = Strategy::Fraug(knobs);
    let (mut client, broadcast) = one_client(&strategy, 7);
    let variant = strategy.local_variant();
    client.client_update(&plan(1, 4, &variant, Some(&broadcast))).unwrap();
    let omega_after = client.omega.to_bytes(RoleMask::EMPTY);
    let incoming: ParameterSet<f32> =
        ParameterSet::from_bytes(broadcast.omega.as_ref().unwrap()).unwrap();
    assert_eq!(omega_after, incoming.to_bytes(RoleMask::EMPTY));
    let phi_first = client.phi.as_ref().unwrap().to_bytes(RoleMask::EMPTY);
    client.client_update(&plan(2, 4, &variant, Some(&broadcast))).unwrap();
    assert_eq!(client.phi.as_ref().unwrap().to_bytes(RoleMask::EMPTY), phi_first);
}

#[test]
fn client_update_is_deterministic() {
    let strategy = Strategy::Fraug(FraugKnobs::default());
    let (mut a, broadcast) = one_client(&strategy, 8);
    let (mut b, _) = one_client(&strategy, 8);
    let variant = strategy.local_variant();
    let ra = a.client_update(&plan(1, 3, &variant, Some(&broadcast))).unwrap();
    let rb = b.client_update(&plan(1, 3, &variant, Some(&broadcast))).unwrap();
    assert_eq!(a.theta.to_bytes(RoleMask::EMPTY), b.theta.to_bytes(RoleMask::EMPTY));
    assert_eq!(ra.losses, rb.losses);
}

#[test]
fn repeated_descent_on_a_frozen_batch() {
    // 50 classifier steps on one fixed batch at a small learning rate: the
    // real loss is non-increasing after warmup (1e-6 slack).
    use fraug_core::graph::{accumulate_grads, Graph};
    use fraug_core::nets::{classifier_forward, BindMode, Mode};
    use fraug_core::optim::{OptKind, Optimizer};

    let specs = specs_small();
    let shift = fraug_core::data::ShiftSpec {
        num_domains: 1,
        num_classes: 3,
        dim: 6,
        ..Default::default()
    };
    let ds = generate_synthetic::<f64>(&shift, 30, 12, 9).unwrap().remove(0);
    let (x, y) = ds.gather(&ds.train_idx);
    let mut rng = seeded_stream(9, &[5]);
    let mut theta: ParameterSet<f64> = specs.classifier.init_params(&mut rng).unwrap();
    let mut opt = Optimizer::new(OptKind::Sgd, 1e-3).unwrap();
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut g: Graph<f64> = Graph::new();
        let fwd =
            classifier_forward(&mut g, &specs.classifier, &theta, &x, Mode::Train, BindMode::Trainable)
                .unwrap();
        let loss = g.cross_entropy(fwd.logits, &y).unwrap();
        losses.push(g.scalar(loss));
        g.backward(loss).unwrap();
        accumulate_grads(&g, &fwd.bindings, &mut theta).unwrap();
        opt.step(&mut theta, None).unwrap();
        theta.zero_grads();
    }
    for w in losses.windows(2).skip(5) {
        assert!(w[1] <= w[0] + 1e-6, "loss increased: {:?}", w);
    }
}

#[test]
fn fedprox_pull_shrinks_displacement() {
    let run_with_mu = |mu: f64| -> f64 {
        let strategy = Strategy::FedProx { mu };
        let (mut client, broadcast) = one_client(&strategy, 10);
        let variant = strategy.local_variant();
        let reference: ParameterSet<f32> = ParameterSet::from_bytes(&broadcast.theta).unwrap();
        client.client_update(&plan(1, 1, &variant, Some(&broadcast))).unwrap();
        let mut sq = 0.0f64;
        for entry in client.theta.iter() {
            if !entry.tensor.requires_grad() {
                continue;
            }
            let reference = reference.get(&entry.name).unwrap();
            for (a, b) in entry.tensor.data().iter().zip(reference.tensor.data()) {
                sq += ((a - b) as f64).powi(2);
            }
        }
        sq.sqrt()
    };
    let strong = run_with_mu(1e6);
    let free = run_with_mu(0.0);
    assert!(strong <= free, "strong pull {strong} vs free {free}");
}

#[test]
fn fedavg_zero_lr_is_a_fixed_point() {
    // Batchnorm disabled: train-mode forwards move running statistics even
    // at zero learning rate, which is correct but not a fixed point.
    let mut cfg = small_config("fedavg");
    cfg.optim.lr = 0.0;
    cfg.model.batchnorm = false;
    cfg.rounds = 2;
    let mut sim: Simulation<f32> = build_simulation(&cfg, 11).unwrap();
    let before = sim.server.theta.to_bytes(RoleMask::EMPTY);
    sim.run(2, 1).unwrap();
    let after = sim.server.theta.to_bytes(RoleMask::EMPTY);
    assert_eq!(before, after);
}

#[test]
fn aggregation_shuffling_clients_changes_nothing() {
    let specs = specs_small();
    let mut rng = seeded_stream(12, &[9]);
    let sets: Vec<ParameterSet<f32>> = (0..5)
        .map(|_| specs.classifier.init_params(&mut rng).unwrap())
        .collect();
    let forward: Vec<&ParameterSet<f32>> = sets.iter().collect();
    let reversed: Vec<&ParameterSet<f32>> = sets.iter().rev().collect();
    let a = fraug_core::params::aggregate_mean(&forward, RoleMask::EMPTY).unwrap();
    let b = fraug_core::params::aggregate_mean(&reversed, RoleMask::EMPTY).unwrap();
    assert_eq!(a.to_bytes(RoleMask::EMPTY), b.to_bytes(RoleMask::EMPTY));
}

#[test]
fn rtnet_roles_never_in_payloads_and_bn_excluded_for_local_bn_strategies() {
    for strategy in ["fraug", "fedbn", "fedavg", "fedprox", "noise-gauss"] {
        let cfg = small_config(strategy);
        let mut sim: Simulation<f32> = build_simulation(&cfg, 13).unwrap();
        let record = sim.round(false).unwrap();
        assert!(record.clients.iter().all(|c| c.params_up > 0));
        let parsed_strategy = cfg.strategy().unwrap();
        let broadcast_bytes = sim.server.theta.to_bytes(parsed_strategy.payload_exclude());
        let broadcast: ParameterSet<f32> = ParameterSet::from_bytes(&broadcast_bytes).unwrap();
        assert_eq!(broadcast.count_params(Some(RoleMask::of(&[Role::RtNet]))), 0);
        let bn = broadcast.count_params(Some(RoleMask::of(&[Role::BatchNorm])));
        match strategy {
            "fraug" | "fedbn" => assert_eq!(bn, 0, "{strategy} must keep batchnorm local"),
            _ => assert!(bn > 0, "{strategy} aggregates batchnorm"),
        }
    }
}

#[test]
fn single_and_all_do_not_communicate() {
    for strategy in ["single", "all"] {
        let cfg = small_config(strategy);
        let mut sim: Simulation<f32> = build_simulation(&cfg, 14).unwrap();
        let record = sim.round(true).unwrap();
        for client in &record.clients {
            assert_eq!(client.params_up, 0);
            assert_eq!(client.params_down, 0);
        }
        if strategy == "all" {
            assert_eq!(record.clients.len(), 1);
            // Per-domain evaluation groups survive the merge.
            assert_eq!(record.clients[0].accuracies.len(), 3);
        }
    }
}

#[test]
fn zero_rounds_evaluates_initial_model_only() {
    let mut cfg = small_config("fedavg");
    cfg.rounds = 0;
    let output = run_experiment(&cfg, None).unwrap();
    let rows = output.all_rows();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.round == 0 && r.split == "test"));
}

#[test]
fn non_finite_abort_names_round_and_client() {
    let mut cfg = small_config("fedavg");
    cfg.optim.lr = 1e14;
    cfg.rounds = 30;
    let err = run_experiment(&cfg, None).unwrap_err().to_string();
    assert!(err.contains("round"), "{err}");
    assert!(err.contains("client"), "{err}");
}

#[test]
fn incompatible_broadcast_is_a_structural_error() {
    let strategy = Strategy::FedAvg;
    let (mut client, _) = one_client(&strategy, 15);
    let other_specs = ClassifierSpec {
        input_dim: 6,
        hidden: vec![4],
        embedding_dim: 5,
        num_classes: 3,
        batchnorm: true,
    };
    let mut rng = seeded_stream(15, &[6]);
    let foreign: ParameterSet<f32> = other_specs.init_params(&mut rng).unwrap();
    let broadcast = Broadcast {
        theta: foreign.to_bytes(RoleMask::EMPTY),
        omega: None,
    };
    let variant = strategy.local_variant();
    assert!(client.client_update(&plan(1, 1, &variant, Some(&broadcast))).is_err());
}

#[test]
fn simulation_rejects_zero_clients() {
    let cfg = small_config("fedavg");
    let sim_cfg = SimulationConfig {
        strategy: cfg.strategy().unwrap(),
        specs: specs_small(),
        optim: OptimSettings::default(),
        batch_size: 8,
        local_steps: 1,
        exec: fraug_core::federation::ExecMode::Sequential,
        seed: 1,
    };
    assert!(Simulation::<f32>::build(&sim_cfg, Vec::new()).is_err());
}

#[test]
fn noise_strategies_report_noise_loss_when_active() {
    let mut cfg = small_config("noise-laplace");
    cfg.noise.gamma = 0.3;
    cfg.rounds = 1;
    let output = run_experiment(&cfg, None).unwrap();
    assert!(output.all_rows().iter().any(|r| r.metric == "loss_noise"));

    cfg.noise.gamma = 0.0;
    let output = run_experiment(&cfg, None).unwrap();
    assert!(!output.all_rows().iter().any(|r| r.metric == "loss_noise"));
}

#[test]
fn zero_synthetic_weight_makes_personalized_embeddings_equal_real() {
    // With the residual weight pinned at zero the personalized embeddings
    // coincide with the real ones, so the synthetic head loss equals the
    // real loss on the same batch bit-for-bit.
    let knobs = FraugKnobs {
        synthetic_weight_max: 0.0,
        use_vhat: false,
        use_uhat: true,
        use_uhat_c: false,
        stage2: false,
        ..FraugKnobs::default()
    };
    let strategy = Strategy::Fraug(knobs);
    let (mut client, broadcast) = one_client(&strategy, 16);
    let variant = strategy.local_variant();
    let result = client.client_update(&plan(1, 1, &variant, Some(&broadcast))).unwrap();
    let real = result.losses.iter().find(|(n, _)| n == "loss_real").unwrap().1;
    let syn = result.losses.iter().find(|(n, _)| n == "loss_syn").unwrap().1;
    assert_eq!(real.to_bits(), syn.to_bits(), "real {real} vs synthetic {syn}");
}

#[test]
fn ablation_full_row_matches_independent_run() {
    let mut cfg = small_config("fraug");
    cfg.rounds = 2;
    let report = fraug_core::harness::ablation(&cfg, None).unwrap();
    let full = report.rows.iter().find(|r| r.label == "full").unwrap();
    let direct = run_experiment(&cfg, None).unwrap();
    assert_eq!(full.summary, direct.summary);
}

#[test]
fn written_summary_is_recomputable_from_metrics_files() {
    let mut cfg = small_config("fedbn");
    cfg.seeds = vec![11, 12];
    let dir = tempfile::tempdir().unwrap();
    let output = run_experiment(&cfg, Some(dir.path())).unwrap();
    let recomputed = fraug_core::harness::summary_from_dir(dir.path(), "fedbn").unwrap();
    assert_eq!(output.summary, recomputed);
    let written: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(
        written.get("average").and_then(|a| a.get("mean")).and_then(|m| m.as_f64()),
        Some(recomputed.average.mean)
    );
}

#[test]
fn row_keys_capture_training_signal() {
    let cfg = small_config("fraug");
    let output = run_experiment(&cfg, None).unwrap();
    let rows = output.all_rows();
    for metric in ["loss_real", "loss_syn", "loss_gen", "loss_rt", "accuracy"] {
        assert!(rows.iter().any(|r| r.metric == metric), "missing {metric}");
    }
    assert!(!row_key(&rows).is_empty());
}
