use unas_core::error::Error;
use unas_core::search::{
    run_eval, run_search, write_metrics_csv, ObjectiveBase, SearchConfig, METRICS_HEADER,
};
use unas_core::space::extract_final;

/// A small, fast supernet search.
fn small() -> SearchConfig {
    SearchConfig {
        n_nodes: 2,
        ops: Some(vec!["zero".into(), "identity".into(), "linear_tanh".into()]),
        task_train_size: 64,
        task_val_size: 64,
        batch_size: 16,
        warmup_steps: 5,
        total_steps: 20,
        arch_lr: 0.05,
        weight_lr: 0.01,
        eval_steps: 20,
        ..SearchConfig::default()
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    match SearchConfig::from_toml("seeed = 3") {
        Err(Error::Config(m)) => assert!(m.contains("seeed"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        SearchConfig::from_toml("warmup_steps = 10\ntotal_steps = 5"),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        SearchConfig::from_toml("arch_lr = -1.0"),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        SearchConfig::from_toml("objective = \"loss\""),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        SearchConfig::from_toml("skip_dropout_p = 1.0"),
        Err(Error::Config(_))
    ));
    // Latency needs the layer-wise space, and plain rebar cannot take it.
    assert!(matches!(
        SearchConfig::from_toml("objective = \"gen+latency\"\nestimator = \"relax-combined\""),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        SearchConfig::from_toml("space = \"layerwise\"\nobjective = \"gen+latency\""),
        Err(Error::Config(_))
    ));
    let ok = SearchConfig::from_toml(
        "space = \"layerwise\"\nobjective = \"gen+latency\"\nestimator = \"relax-combined\"",
    )
    .unwrap();
    assert!(ok.objective.latency && ok.objective.base == ObjectiveBase::Gen);
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small();
    assert_eq!(SearchConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn lambda_lat_is_linear_in_step() {
    let cfg = SearchConfig {
        total_steps: 37,
        ..SearchConfig::default()
    };
    for s in 0..=37 {
        assert!((cfg.lambda_lat_at(s) - 0.1 * s as f64 / 37.0).abs() < 1e-12);
    }
    let out = run_search(&small()).unwrap();
    for r in &out.metrics {
        assert!((r.lambda_lat - 0.1 * r.step as f64 / 20.0).abs() < 1e-12);
    }
}

#[test]
fn warmup_leaves_distribution_untouched() {
    let cfg = SearchConfig {
        warmup_steps: 10,
        total_steps: 10,
        ..small()
    };
    let out = run_search(&cfg).unwrap();
    let init = cfg.search_space().uniform_sites();
    // Checkpoints land every step here, so this covers every warmup step.
    assert_eq!(out.checkpoints.len(), 10);
    for c in &out.checkpoints {
        for (l, s) in c.logits.iter().zip(&init) {
            assert_eq!(l.as_slice(), s.logits());
        }
    }
    assert_eq!(out.extraction, extract_final(&init));
    assert_eq!(out.extraction.ties.len(), init.len());
}

#[test]
fn gen_with_zero_lambda_matches_train() {
    let train = run_search(&SearchConfig {
        objective: "train".parse().unwrap(),
        ..small()
    })
    .unwrap();
    let gen = run_search(&SearchConfig {
        lambda_gen: 0.0,
        ..small()
    })
    .unwrap();
    assert_eq!(train.logits, gen.logits);
    assert_eq!(train.weights, gen.weights);
    assert_eq!(train.checkpoints, gen.checkpoints);
    for (a, b) in train.metrics.iter().zip(&gen.metrics) {
        assert_eq!(a.objective, b.objective);
    }
}

#[test]
fn zero_skip_dropout_is_a_no_op() {
    let base = SearchConfig {
        skip_dropout_p: 0.0,
        ..small()
    };
    let a = run_search(&base).unwrap();
    // A rate too small to ever fire still exercises the masking path.
    let b = run_search(&SearchConfig {
        skip_dropout_p: 1e-300,
        ..base.clone()
    })
    .unwrap();
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.metrics, b.metrics);
    // A real rate changes the trajectory.
    let c = run_search(&SearchConfig {
        skip_dropout_p: 0.5,
        ..base
    })
    .unwrap();
    assert_ne!(a.logits, c.logits);
}

#[test]
fn runs_are_bit_reproducible_across_thread_counts() {
    let cfg = SearchConfig {
        arch_samples_per_step: 3,
        ..small()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_search(&cfg).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.logits, b.logits);
    let other = run_search(&SearchConfig {
        seed: 1,
        ..cfg.clone()
    })
    .unwrap();
    assert_ne!(a.logits, other.logits);
}

#[test]
fn every_estimator_runs() {
    for est in [
        "reinforce",
        "reinforce_baseline",
        "rebar",
        "relax-combined",
        "gs_only",
    ] {
        let cfg = SearchConfig {
            estimator: serde_json::from_str(&format!("\"{est}\"")).unwrap(),
            ..small()
        };
        let out = run_search(&cfg).unwrap();
        assert_eq!(out.metrics.len(), 20, "{est}");
        assert!(out.metrics.iter().all(|m| m.objective.is_finite()), "{est}");
        assert!(out.report().contains(&format!("estimator: {est}")));
    }
}

#[test]
fn enas_like_schedule_runs_and_is_logged() {
    let out = run_search(&SearchConfig {
        w_steps_per_phi_step: 8,
        ..small()
    })
    .unwrap();
    assert_eq!(out.metrics.len(), 20);
    assert!(out.report().contains("ENAS-like"));
}

#[test]
fn latency_search_runs_on_layerwise_space() {
    let cfg = SearchConfig::from_toml(
        r#"
space = "layerwise"
n_layers = 3
ops = ["skip", "mb3_k3", "mb6_k5"]
objective = "train+latency"
estimator = "relax-combined"
task_train_size = 64
task_val_size = 64
batch_size = 16
warmup_steps = 2
total_steps = 12
surrogate_samples = 200
"#,
    )
    .unwrap();
    let out = run_search(&cfg).unwrap();
    let t = out.latency_target.unwrap();
    assert!(t > 0.0);
    assert!(out.metrics.iter().all(|m| m.latency.is_some()));
    assert!(out.surrogate_fit.is_some());
    assert!(out.report().contains("latency_target"));
}

#[test]
fn metrics_are_ordered_and_checkpoints_every_tenth() {
    let cfg = SearchConfig {
        total_steps: 30,
        ..small()
    };
    let out = run_search(&cfg).unwrap();
    assert!(out.metrics.windows(2).all(|w| w[1].step == w[0].step + 1));
    let steps: Vec<usize> = out.checkpoints.iter().map(|c| c.step).collect();
    assert_eq!(steps, (0..10).map(|i| 3 * i + 2).collect::<Vec<_>>());
    assert!(out.checkpoints.iter().all(|c| c.weights.is_some()));
}

#[test]
fn csv_has_header_and_one_row_per_step() {
    let mut buf = Vec::new();
    write_metrics_csv(&[], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.trim_end(), METRICS_HEADER.join(","));

    let out = run_search(&small()).unwrap();
    let mut buf = Vec::new();
    write_metrics_csv(&out.metrics, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 21);
    assert!(lines[1].starts_with("0,"));
    // No latency column value without a latency objective.
    assert_eq!(lines[1].split(',').nth(5), Some(""));
}

#[test]
fn report_echoes_seed_and_config() {
    let cfg = SearchConfig {
        seed: 4242,
        ..small()
    };
    let out = run_search(&cfg).unwrap();
    let r = out.report();
    assert!(r.contains("seed: 4242"));
    assert!(r.contains("seed = 4242"));
    assert!(r.contains("node0.input_a"));
}

#[test]
fn empty_run_extracts_initial_argmax() {
    let cfg = SearchConfig {
        warmup_steps: 0,
        total_steps: 0,
        ..small()
    };
    let out = run_search(&cfg).unwrap();
    assert!(out.metrics.is_empty());
    assert!(out.extraction.arch.iter().all(|&c| c == 0));
}

#[test]
fn eval_is_deterministic_and_zero_cell_is_at_chance() {
    let cfg = SearchConfig {
        task_classes: 2,
        eval_steps: 60,
        ..small()
    };
    let space = cfg.search_space();
    let ident = space
        .arch_from_json(
            r#"{"node0.input_a":0,"node0.input_b":1,"node0.op_a":1,"node0.op_b":1,
        "node1.input_a":1,"node1.input_b":2,"node1.op_a":1,"node1.op_b":1}"#,
        )
        .unwrap();
    let a = run_eval(&cfg, &ident).unwrap();
    assert_eq!(a, run_eval(&cfg, &ident).unwrap());
    let zero = space
        .arch_from_json(
            r#"{"node0.input_a":0,"node0.input_b":1,"node0.op_a":0,"node0.op_b":0,
        "node1.input_a":1,"node1.input_b":2,"node1.op_a":0,"node1.op_b":0}"#,
        )
        .unwrap();
    let z = run_eval(&cfg, &zero).unwrap();
    // No signal reaches the head: the balanced classes are split by the bias.
    assert!((z.val_error - 0.5).abs() < 1e-12, "{}", z.val_error);
    assert!(a.val_error < 0.2, "{}", a.val_error);
}

#[test]
fn planted_search_finds_optimum_on_easy_instance() {
    let cfg = SearchConfig::from_toml(
        r#"
objective = "planted"
n_nodes = 2
ops = ["zero", "identity", "linear_tanh"]
arch_lr = 0.05
arch_lr_end = 0.005
warmup_steps = 0
total_steps = 600
arch_samples_per_step = 4
"#,
    )
    .unwrap();
    let out = run_search(&cfg).unwrap();
    let p = out.planted.as_ref().unwrap();
    let (_, best) = p.optimum();
    assert!((p.value(&out.extraction.arch) - best).abs() < 1e-12);
    assert_eq!(out.final_metrics.penalty, 0.0);
}
