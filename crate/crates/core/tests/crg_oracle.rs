use apda::autodiff::{Tape, Tensor};
use apda::crg::{build_adjacency, build_label_matrix, propagate, AdjacencyMatrix, TargetLabelMode};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    a_hat: Tensor,
    h0: Tensor,
    weights: Vec<Tensor>,
    labels: Vec<usize>,
    target_probs: Option<Tensor>,
    num_classes: usize,
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn instance(seed: u64, max_n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_n);
    let num_classes = rng.random_range(2..5);
    let ns = rng.random_range(0..=n);
    let labels: Vec<usize> = (0..ns).map(|_| rng.random_range(0..num_classes)).collect();
    let target_probs = (n > ns).then(|| {
        let mut t = random(&mut rng, n - ns, num_classes);
        for v in t.data_mut() {
            *v = v.abs() + 1e-3;
        }
        for i in 0..n - ns {
            let s: f64 = t.row(i).iter().sum();
            for j in 0..num_classes {
                t.set(i, j, t.get(i, j) / s);
            }
        }
        t
    });
    let mode = if rng.random_bool(0.5) {
        TargetLabelMode::Soft
    } else {
        TargetLabelMode::Hard
    };
    let y = build_label_matrix(&labels, target_probs.as_ref(), num_classes, mode).unwrap();
    let a_hat = build_adjacency(&y).a_hat().clone();
    let layers = rng.random_range(1..4);
    let mut widths = vec![rng.random_range(1..6)];
    for _ in 0..layers {
        widths.push(rng.random_range(1..6));
    }
    let weights = widths.windows(2).map(|w| random(&mut rng, w[0], w[1])).collect();
    Instance {
        h0: random(&mut rng, n, widths[0]),
        a_hat,
        weights,
        labels,
        target_probs,
        num_classes,
    }
}

fn run(a_hat: &Tensor, h0: &Tensor, weights: &[Tensor]) -> Tensor {
    let mut tape = Tape::new();
    let h = tape.constant(h0.clone());
    let ws: Vec<_> = weights.iter().map(|w| tape.constant(w.clone())).collect();
    let out = propagate(&mut tape, h, a_hat, &ws).unwrap();
    tape.value(out).clone()
}

/// `H <- sigma(sum_j A_ij (H W)_j)` with explicit loops.
fn brute_force(a_hat: &Tensor, h0: &Tensor, weights: &[Tensor]) -> Vec<Vec<f64>> {
    let n = h0.rows();
    let mut h: Vec<Vec<f64>> = (0..n).map(|i| h0.row(i).to_vec()).collect();
    for (l, w) in weights.iter().enumerate() {
        let mut hw = vec![vec![0.0; w.cols()]; n];
        for i in 0..n {
            for k in 0..w.cols() {
                for (m, hv) in h[i].iter().enumerate() {
                    hw[i][k] += hv * w.get(m, k);
                }
            }
        }
        let mut next = vec![vec![0.0; w.cols()]; n];
        for i in 0..n {
            for (j, row) in hw.iter().enumerate() {
                for k in 0..w.cols() {
                    next[i][k] += a_hat.get(i, j) * row[k];
                }
            }
            if l + 1 < weights.len() {
                for v in &mut next[i] {
                    *v = v.max(0.0);
                }
            }
        }
        h = next;
    }
    h
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    t.select_rows(perm)
}

fn permute_sym(a: &Tensor, perm: &[usize]) -> Tensor {
    let n = a.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, a.get(perm[i], perm[j]));
        }
    }
    out
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn propagate_matches_loopwise_sum(seed in any::<u64>()) {
        let inst = instance(seed, 8);
        let fast = run(&inst.a_hat, &inst.h0, &inst.weights);
        let slow = brute_force(&inst.a_hat, &inst.h0, &inst.weights);
        for (i, row) in slow.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                prop_assert!((fast.get(i, k) - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adjacency_invariants(seed in any::<u64>()) {
        let inst = instance(seed, 8);
        let y = build_label_matrix(
            &inst.labels,
            inst.target_probs.as_ref(),
            inst.num_classes,
            TargetLabelMode::Soft,
        ).unwrap();
        let adj = build_adjacency(&y);
        let (at, ah) = (adj.a_tilde(), adj.a_hat());
        let n = at.rows();
        let degree: Vec<f64> = (0..n).map(|i| at.row(i).iter().sum()).collect();
        for i in 0..n {
            prop_assert!(at.get(i, i) >= 1.0);
            for j in 0..n {
                prop_assert_eq!(at.get(i, j), at.get(j, i));
                prop_assert_eq!(ah.get(i, j), ah.get(j, i));
                if i != j {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&at.get(i, j)));
                }
                let expected = at.get(i, j) / (degree[i] * degree[j]).sqrt();
                prop_assert!((ah.get(i, j) - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_graphs_have_binary_edges(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..10);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let y = build_label_matrix(&labels, None, 4, TargetLabelMode::Soft).unwrap();
        let at = build_adjacency(&y).a_tilde().clone();
        for i in 0..n {
            prop_assert_eq!(at.get(i, i), 2.0);
            for j in (0..n).filter(|&j| j != i) {
                let expected = if labels[i] == labels[j] { 1.0 } else { 0.0 };
                prop_assert_eq!(at.get(i, j), expected);
            }
        }
    }
}

#[test]
fn permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..100 {
        let inst = instance(1000 + trial, 8);
        let n = inst.h0.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let base = run(&inst.a_hat, &inst.h0, &inst.weights);
        let permuted = run(
            &permute_sym(&inst.a_hat, &perm),
            &permute_rows(&inst.h0, &perm),
            &inst.weights,
        );
        let err = max_abs_diff(&permuted, &permute_rows(&base, &perm));
        assert!(err <= 1e-12, "trial {trial}: {err}");
    }
}

#[test]
fn adjacency_of_permuted_labels_is_permuted() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(2..9);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let a = build_adjacency(&build_label_matrix(&labels, None, 3, TargetLabelMode::Soft).unwrap());
        let b = build_adjacency(&build_label_matrix(&plabels, None, 3, TargetLabelMode::Soft).unwrap());
        assert!(max_abs_diff(b.a_hat(), &permute_sym(a.a_hat(), &perm)) <= 1e-15);
    }
}

#[test]
fn two_node_hand_cases() {
    let same = build_adjacency(&build_label_matrix(&[1, 1], None, 3, TargetLabelMode::Soft).unwrap());
    let expected = Tensor::matrix(2, 2, vec![2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]).unwrap();
    assert!(max_abs_diff(same.a_hat(), &expected) <= 1e-12);
    assert_eq!(same.a_tilde().data(), &[2.0, 1.0, 1.0, 2.0]);

    let diff = build_adjacency(&build_label_matrix(&[0, 2], None, 3, TargetLabelMode::Soft).unwrap());
    assert!(max_abs_diff(diff.a_hat(), &Tensor::eye(2)) <= 1e-12);
    assert_eq!(diff.a_tilde().data(), &[2.0, 0.0, 0.0, 2.0]);

    let single = build_adjacency(&build_label_matrix(&[0], None, 2, TargetLabelMode::Soft).unwrap());
    assert_eq!(single.a_hat().data(), &[1.0]);
    assert_eq!(AdjacencyMatrix::identity(3).a_hat(), &Tensor::eye(3));
}

fn mean_within_class_distance(h: &Tensor, labels: &[usize]) -> f64 {
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                let d: f64 = h.row(i).iter().zip(h.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                total += d.sqrt();
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

#[test]
fn propagation_smooths_within_source_classes() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ns, nt, nc, d) = (16, 16, 4, 8);
        let labels: Vec<usize> = (0..ns).map(|i| i % nc).collect();
        let mut tp = random(&mut rng, nt, nc);
        for v in tp.data_mut() {
            *v = v.abs() + 1e-3;
        }
        for i in 0..nt {
            let s: f64 = tp.row(i).iter().sum();
            for j in 0..nc {
                tp.set(i, j, tp.get(i, j) / s);
            }
        }
        let y = build_label_matrix(&labels, Some(&tp), nc, TargetLabelMode::Soft).unwrap();
        let a_hat = build_adjacency(&y).a_hat().clone();
        let h0 = random(&mut rng, ns + nt, d);
        let out = run(&a_hat, &h0, &[Tensor::eye(d)]);
        let src: Vec<usize> = (0..ns).collect();
        let before = mean_within_class_distance(&h0.select_rows(&src), &labels);
        let after = mean_within_class_distance(&out.select_rows(&src), &labels);
        assert!(after <= before, "seed {seed}: {after} > {before}");
    }
}
