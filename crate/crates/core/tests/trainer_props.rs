use std::time::Instant;

use apda::autodiff::{Tape, Tensor};
use apda::data::{generate_pda_gaussians, PdaDataset, ShiftConfig};
use apda::networks::{forward_main, init_params, Architecture, ForwardOptions, ParamSet, Role};
use apda::objectives::weighted_domain_loss;
use apda::trainer::{evaluate_target, train, MetricsLog, TrainConfig, TrainOutcome, Variant};

fn dataset(seed: u64) -> PdaDataset {
    generate_pda_gaussians(&ShiftConfig {
        seed,
        ..ShiftConfig::default()
    })
    .unwrap()
}

fn run(ds: &PdaDataset, cfg: TrainConfig) -> TrainOutcome {
    train(&cfg, ds).unwrap()
}

fn csv_bytes(log: &MetricsLog) -> Vec<u8> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    buf
}

fn assert_identical(a: &TrainOutcome, b: &TrainOutcome) {
    assert_eq!(a.log, b.log);
    assert_eq!(csv_bytes(&a.log), csv_bytes(&b.log));
    assert_eq!(a.params.to_json(), b.params.to_json());
}

fn short(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        epochs: 8,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn variant_lattice_holds_bit_for_bit() {
    for seed in 0..3 {
        let ds = dataset(seed);
        let apda0 = run(&ds, TrainConfig { lambda_c: 0.0, ..short(Variant::Apda, seed) });
        let crg = run(&ds, short(Variant::Crg, seed));
        assert_identical(&apda0, &crg);

        let crg_eye = run(&ds, TrainConfig { force_identity_adjacency: true, ..short(Variant::Crg, seed) });
        let base = run(&ds, short(Variant::Base, seed));
        assert_identical(&crg_eye, &base);

        let base_ones = run(&ds, TrainConfig { force_unit_weights: true, ..short(Variant::Base, seed) });
        let dann = run(&ds, short(Variant::Dann, seed));
        assert_identical(&base_ones, &dann);

        assert_ne!(crg.log, base.log);
        assert_ne!(base.log, dann.log);
    }
}

#[test]
fn logged_schedules_follow_closed_forms() {
    let ds = dataset(0);
    let cfg = short(Variant::Dann, 0);
    let out = run(&ds, cfg.clone());
    let steps = &out.log.steps;
    let total = steps.len();
    for (i, s) in steps.iter().enumerate() {
        assert_eq!(s.step, i);
        let p = i as f64 / (total - 1) as f64;
        assert_eq!(s.p, p);
        assert!((s.lr - cfg.lr0 * (1.0 + 10.0 * p).powf(-0.75)).abs() <= 1e-12);
        assert!((s.lambda - (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)).abs() <= 1e-12);
        assert!(s.losses.is_finite());
    }
    assert_eq!(steps[0].lambda, 0.0);
    assert_eq!(steps[total - 1].p, 1.0);
    assert!((steps[total - 1].lr - 1e-3 * 11f64.powf(-0.75)).abs() <= 1e-12);
    for pair in steps.windows(2) {
        assert!(pair[1].lr < pair[0].lr);
        assert!(pair[1].lambda >= pair[0].lambda);
    }
}

#[test]
fn reruns_are_identical() {
    let ds = dataset(1);
    for variant in [Variant::SourceOnly, Variant::Crg] {
        let a = run(&ds, short(variant, 5));
        let b = run(&ds, short(variant, 5));
        assert_identical(&a, &b);
    }
    let other_seed = run(&ds, short(Variant::Crg, 6));
    assert_ne!(other_seed.log, run(&ds, short(Variant::Crg, 5)).log);
}

#[test]
fn final_epoch_accuracy_matches_evaluation() {
    let ds = dataset(2);
    let out = run(&ds, short(Variant::Base, 2));
    let eval = evaluate_target(&out.params, &ds).unwrap().unwrap();
    assert_eq!(out.log.final_accuracy(), Some(eval.accuracy));
    let weighted: f64 = eval
        .per_class
        .iter()
        .map(|&(_, ok, _)| ok as f64)
        .sum::<f64>()
        / eval.num_samples as f64;
    assert!((weighted - eval.accuracy).abs() < 1e-15);
    assert_eq!(out.log.epochs.len(), 8);
    assert!(out.log.epochs.iter().all(|e| e.mean_w_common.is_some() && e.mean_w_private.is_some()));
}

#[test]
fn untrained_classifier_is_near_chance() {
    let ds = dataset(0);
    let arch = Architecture::standard(ds.dim(), ds.num_classes(), 2, 64);
    let accs: Vec<f64> = (0..200)
        .map(|s| {
            let params = init_params(&arch, ds.num_classes(), 100 + s).unwrap();
            evaluate_target(&params, &ds).unwrap().unwrap().accuracy
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 1.0 / 6.0).abs() <= 0.05, "{mean}");
}

fn domain_loss(params: &ParamSet, x: &Tensor, ns: usize, lambda: f64) -> (f64, Vec<(Role, Tensor)>) {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.constant(x.clone());
    let n = x.rows();
    let opts = ForwardOptions {
        grl_lambda: lambda,
        couple_aux: false,
    };
    let out = forward_main(&mut tape, &vars, xv, &Tensor::eye(n), opts).unwrap();
    let s = tape.slice_rows(out.prob_d, 0, ns).unwrap();
    let t = tape.slice_rows(out.prob_d, ns, n).unwrap();
    let loss = weighted_domain_loss(&mut tape, s, &vec![1.0; ns], t).unwrap();
    let g = vars.gradients(&tape.backward(loss).unwrap());
    let roles = params.tensors().iter().map(|(r, _)| *r).collect::<Vec<_>>();
    (tape.value(loss).item().unwrap(), roles.into_iter().zip(g).collect())
}

#[test]
fn minimax_sign_structure() {
    let ds = dataset(0);
    let params = init_params(&Architecture::standard(2, 6, 2, 64), 6, 9).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let x = Tensor::vstack(&ds.source_matrix().select_rows(&idx), &ds.target_matrix().select_rows(&idx)).unwrap();
    let (l0, grads) = domain_loss(&params, &x, 16, 1.0);
    let eps = 1e-4;
    let stepped = |roles: &[Role]| {
        let mut p = params.clone();
        for ((role, t), (_, g)) in p.tensors_mut().into_iter().zip(&grads) {
            if roles.contains(&role) {
                for (v, gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *v -= eps * gv;
                }
            }
        }
        domain_loss(&p, &x, 16, 1.0).0
    };
    assert!(stepped(&[Role::Discriminator]) < l0);
    assert!(stepped(&[Role::Extractor, Role::Graph]) > l0);
}

#[test]
fn stable_variants_finish_a_default_run_quickly() {
    let ds = dataset(0);
    let start = Instant::now();
    for variant in [Variant::SourceOnly, Variant::Dann, Variant::Base, Variant::Crg] {
        let out = run(&ds, TrainConfig { variant, ..TrainConfig::default() });
        assert_eq!(out.log.epochs.len(), 100);
    }
    assert!(start.elapsed().as_secs_f64() < 60.0);
}
