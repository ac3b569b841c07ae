use apda::autodiff::{Tape, Tensor};
use apda::crg::{build_adjacency, build_label_matrix, propagate, TargetLabelMode};
use apda::networks::{
    forward_inference, forward_main, init_params, Architecture, ForwardOptions, MainOutputs, ParamSet,
    Role,
};
use apda::objectives::{weighted_classifier_loss, weighted_domain_loss};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NC: usize = 4;

fn setup(seed: u64, n: usize) -> (ParamSet, Tensor, Vec<usize>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&Architecture::standard(3, NC, 2, 16), NC, seed).unwrap();
    let x = Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let ns = n / 2;
    let labels: Vec<usize> = (0..ns).map(|_| rng.random_range(0..NC)).collect();
    let probs = forward_inference(&params, &x).unwrap();
    let target: Vec<usize> = (ns..n).collect();
    let y = build_label_matrix(&labels, Some(&probs.select_rows(&target)), NC, TargetLabelMode::Soft).unwrap();
    (params, x, labels, build_adjacency(&y).a_hat().clone())
}

fn forward(tape: &mut Tape, params: &ParamSet, x: &Tensor, a_hat: &Tensor, lambda: f64) -> (apda::networks::ParamVars, MainOutputs) {
    let vars = params.register(tape);
    let xv = tape.constant(x.clone());
    let opts = ForwardOptions {
        grl_lambda: lambda,
        couple_aux: false,
    };
    let out = forward_main(tape, &vars, xv, a_hat, opts).unwrap();
    (vars, out)
}

fn grads_by_role(params: &ParamSet, vars: &apda::networks::ParamVars, tape: &Tape, loss: apda::autodiff::Var) -> Vec<(Role, Tensor)> {
    let g = vars.gradients(&tape.backward(loss).unwrap());
    params.tensors().iter().map(|(r, _)| *r).zip(g).collect()
}

#[test]
fn he_uniform_variance_within_twenty_percent() {
    let arch = Architecture::standard(2, 6, 2, 64);
    let sets: Vec<ParamSet> = (0..10).map(|s| init_params(&arch, 6, s).unwrap()).collect();
    let shapes: Vec<Vec<usize>> = sets[0]
        .tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    for (k, shape) in shapes.iter().enumerate() {
        if shape[0] == 1 {
            for set in &sets {
                assert!(set.tensors()[k].1.data().iter().all(|&b| b == 0.0));
            }
            continue;
        }
        let values: Vec<f64> = sets.iter().flat_map(|s| s.tensors()[k].1.data().to_vec()).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / shape[0] as f64;
        assert!((var / target - 1.0).abs() <= 0.2, "tensor {k} {shape:?}: {var} vs {target}");
    }
}

#[test]
fn auxiliary_losses_never_reach_extractor_or_graph() {
    for seed in 0..5 {
        let (params, x, labels, a_hat) = setup(seed, 8);
        let mut tape = Tape::new();
        let (vars, out) = forward(&mut tape, &params, &x, &a_hat, 0.7);
        let ns = labels.len();
        let c_src = tape.slice_rows(out.probs_c_aux, 0, ns).unwrap();
        let d_src = tape.slice_rows(out.prob_d_aux, 0, ns).unwrap();
        let d_tgt = tape.slice_rows(out.prob_d_aux, ns, 8).unwrap();
        let lc = weighted_classifier_loss(&mut tape, c_src, &labels, &vec![1.0; ns]).unwrap();
        let ld = weighted_domain_loss(&mut tape, d_src, &vec![1.0; ns], d_tgt).unwrap();
        let loss = tape.add(lc, ld).unwrap();
        for (role, g) in grads_by_role(&params, &vars, &tape, loss) {
            let zero = g.data().iter().all(|&v| v == 0.0);
            match role {
                Role::Extractor | Role::Graph | Role::Classifier | Role::Discriminator => {
                    assert!(zero, "{role:?} received an auxiliary gradient")
                }
                Role::AuxClassifier | Role::AuxDiscriminator => {}
            }
        }
    }
}

#[test]
fn discriminator_gradient_reaches_features_reversed() {
    for seed in 0..5 {
        let (params, x, labels, a_hat) = setup(seed, 8);
        let ns = labels.len();
        let lambda = 0.37;
        let domain_loss = |tape: &mut Tape, prob_d| {
            let s = tape.slice_rows(prob_d, 0, ns).unwrap();
            let t = tape.slice_rows(prob_d, ns, 8).unwrap();
            weighted_domain_loss(tape, s, &vec![1.0; ns], t).unwrap()
        };

        let mut tape = Tape::new();
        let (vars, out) = forward(&mut tape, &params, &x, &a_hat, lambda);
        let loss = domain_loss(&mut tape, out.prob_d);
        let reversed = grads_by_role(&params, &vars, &tape, loss);

        let mut tape = Tape::new();
        let vars2 = params.register(&mut tape);
        let xv = tape.constant(x.clone());
        let feat_f = vars2.extractor.forward(&mut tape, xv).unwrap();
        let feat_g = propagate(&mut tape, feat_f, &a_hat, &vars2.graph).unwrap();
        let prob_d = vars2.discriminator.forward(&mut tape, feat_g).unwrap();
        let loss = domain_loss(&mut tape, prob_d);
        let plain = grads_by_role(&params, &vars2, &tape, loss);

        let mut feature_grad_seen = false;
        for ((role, r), (_, p)) in reversed.iter().zip(&plain) {
            for (rv, pv) in r.data().iter().zip(p.data()) {
                match role {
                    Role::Extractor | Role::Graph => {
                        assert!((rv + lambda * pv).abs() <= 1e-12 * (1.0 + pv.abs()));
                        feature_grad_seen |= *pv != 0.0;
                    }
                    _ => assert_eq!(rv, pv),
                }
            }
        }
        assert!(feature_grad_seen);
    }
}

#[test]
fn classifier_ignores_graph_and_batch_mates() {
    let (params, x, _, a_hat) = setup(3, 8);
    let mut tape = Tape::new();
    let (_, with_graph) = forward(&mut tape, &params, &x, &a_hat, 0.5);
    let mut tape2 = Tape::new();
    let (_, with_eye) = forward(&mut tape2, &params, &x, &Tensor::eye(8), 0.5);
    assert_eq!(tape.value(with_graph.probs_c), tape2.value(with_eye.probs_c));
    for i in 0..8 {
        let single = forward_inference(&params, &x.select_rows(&[i])).unwrap();
        assert_eq!(single.row(0), tape.value(with_graph.probs_c).row(i));
        let s: f64 = single.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn identity_graph_is_per_node() {
    let (params, x, _, _) = setup(4, 6);
    let mut tape = Tape::new();
    let (_, out) = forward(&mut tape, &params, &x, &Tensor::eye(6), 0.0);
    for i in 0..6 {
        let mut t = Tape::new();
        let (_, single) = forward(&mut t, &params, &x.select_rows(&[i]), &Tensor::eye(1), 0.0);
        assert_eq!(t.value(single.feat_g).row(0), tape.value(out.feat_g).row(i));
    }
}

#[test]
fn adjacency_size_is_checked() {
    let (params, x, _, _) = setup(0, 6);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.constant(x);
    let opts = ForwardOptions {
        grl_lambda: 0.0,
        couple_aux: false,
    };
    assert!(forward_main(&mut tape, &vars, xv, &Tensor::eye(5), opts).is_err());
    assert!(forward_inference(&params, &Tensor::zeros(&[1, 2])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn forward_main_is_permutation_equivariant(seed in any::<u64>()) {
        let (params, x, _, a_hat) = setup(seed, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        let mut pa = Tensor::zeros(&[8, 8]);
        for i in 0..8 {
            for j in 0..8 {
                pa.set(i, j, a_hat.get(perm[i], perm[j]));
            }
        }
        let mut t1 = Tape::new();
        let (_, o1) = forward(&mut t1, &params, &x, &a_hat, 0.5);
        let mut t2 = Tape::new();
        let (_, o2) = forward(&mut t2, &params, &x.select_rows(&perm), &pa, 0.5);
        for (a, b) in [
            (o1.feat_f, o2.feat_f),
            (o1.feat_g, o2.feat_g),
            (o1.probs_c, o2.probs_c),
            (o1.prob_d, o2.prob_d),
            (o1.probs_c_aux, o2.probs_c_aux),
            (o1.prob_d_aux, o2.prob_d_aux),
        ] {
            let expected = t1.value(a).select_rows(&perm);
            for (u, v) in expected.data().iter().zip(t2.value(b).data()) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }
}
