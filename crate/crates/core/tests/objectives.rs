mod common;

use common::{mapped_stack, permute_batch, random_stack, scaled, slice, Similarity};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symcode::autodiff::Tensor;
use symcode::objectives::{
    barrier_terms, conformal_loss, euclidean_loss, finite_group_loss, informed_terms, invariant_feature_loss,
    orthogonal_loss, permutation_cost, BarrierKind, FiniteGroupLoss, InnerProductOptions, LatentAction,
    MatchingStrategy, PermutationGroup, Reduction, TripleSet,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn reductions() -> impl Strategy<Value = Reduction> {
    prop_oneof![Just(Reduction::Mean), Just(Reduction::Sum)]
}

fn inner(unitary: bool, include_diagonal: bool, reduction: Reduction) -> InnerProductOptions {
    InnerProductOptions {
        unitary,
        include_diagonal,
        reduction,
    }
}

/// Every stack loss, by name, for a `[S, B, n]` stack with even `n`.
fn stack_losses(z: &Tensor, reduction: Reduction) -> Vec<(&'static str, f64)> {
    let b = z.shape()[1];
    let triples = TripleSet::all(b).unwrap();
    vec![
        ("euclidean", euclidean_loss(z, reduction).unwrap().value),
        (
            "orthogonal",
            orthogonal_loss(z, inner(false, true, reduction)).unwrap().value,
        ),
        (
            "orthogonal_offdiag",
            orthogonal_loss(z, inner(false, false, reduction)).unwrap().value,
        ),
        (
            "unitary",
            orthogonal_loss(z, inner(true, true, reduction)).unwrap().value,
        ),
        ("conformal", conformal_loss(z, &triples, reduction).unwrap().value),
        ("invariance", invariant_feature_loss(z, reduction).unwrap().value),
    ]
}

fn finite(m: usize, block: usize, strategy: MatchingStrategy) -> FiniteGroupLoss {
    FiniteGroupLoss::new(block, PermutationGroup::symmetric(m).unwrap(), strategy).unwrap()
}

fn block_cost_matrix(z: &[f64], zt: &[f64], block: usize, m: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|a| {
            (0..m)
                .map(|c| {
                    (0..block)
                        .map(|t| (z[a * block + t] - zt[c * block + t]).powi(2))
                        .sum()
                })
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stack_losses_are_non_negative(
        seed in any::<u64>(), s in 2usize..5, b in 3usize..7, half in 1usize..4, reduction in reductions()
    ) {
        let z = random_stack(&mut rng(seed), s, b, 2 * half);
        for (name, v) in stack_losses(&z, reduction) {
            prop_assert!(v >= 0.0, "{name} = {v}");
        }
    }

    #[test]
    fn stack_losses_ignore_batch_order(
        seed in any::<u64>(), s in 2usize..5, b in 3usize..7, half in 1usize..4, reduction in reductions()
    ) {
        let mut r = rng(seed);
        let z = random_stack(&mut r, s, b, 2 * half);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut r);
        let zp = permute_batch(&z, &perm);
        for ((name, a), (_, c)) in stack_losses(&z, reduction).into_iter().zip(stack_losses(&zp, reduction)) {
            prop_assert!((a - c).abs() <= 1e-10, "{name}: {a} vs {c}");
        }
    }

    #[test]
    fn barriers_are_order_free_and_bounded_below(
        seed in any::<u64>(), b in 2usize..9, n in 1usize..5, eps in 0.1f64..3.0, reduction in reductions()
    ) {
        let mut r = rng(seed);
        let z = slice(&random_stack(&mut r, 1, b, n), 0);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut r);
        let zp = slice(&permute_batch(&z.clone().reshape(vec![1, b, n]).unwrap(), &perm), 0);
        for kind in [BarrierKind::Hinge { epsilon: eps }, BarrierKind::Reciprocal, BarrierKind::LogBarrier] {
            let a = barrier_terms(&z, kind, reduction).unwrap().value;
            let c = barrier_terms(&zp, kind, reduction).unwrap().value;
            prop_assert!((a - c).abs() <= 1e-10 * a.abs().max(1.0), "{kind:?}: {a} vs {c}");
            if kind != BarrierKind::LogBarrier {
                prop_assert!(a >= 0.0);
            }
        }
    }

    #[test]
    fn spreading_points_out_lowers_every_barrier(seed in any::<u64>(), b in 2usize..8, n in 1usize..4) {
        let z = slice(&random_stack(&mut rng(seed), 1, b, n), 0);
        let wide = scaled(&z, 2.0);
        for kind in [BarrierKind::Hinge { epsilon: 10.0 }, BarrierKind::Reciprocal, BarrierKind::LogBarrier] {
            let a = barrier_terms(&z, kind, Reduction::Sum).unwrap().value;
            let c = barrier_terms(&wide, kind, Reduction::Sum).unwrap().value;
            prop_assert!(c < a, "{kind:?}: {a} -> {c}");
        }
    }

    #[test]
    fn rigid_motions_zero_the_euclidean_and_conformal_losses(
        seed in any::<u64>(), s in 2usize..6, b in 3usize..9, n in 1usize..7
    ) {
        let z = mapped_stack(&mut rng(seed), s, b, n, |r| Similarity::random(r, n, 1.0));
        let e = euclidean_loss(&z, Reduction::Mean).unwrap().value;
        prop_assert!(e < 1e-18, "euclidean {e}");
        let c = conformal_loss(&z, &TripleSet::all(b).unwrap(), Reduction::Mean).unwrap().value;
        prop_assert!(c < 1e-10, "conformal {c}");
    }

    #[test]
    fn similarities_zero_the_conformal_loss(
        seed in any::<u64>(), s in 2usize..6, b in 3usize..9, n in 1usize..7
    ) {
        let z = mapped_stack(&mut rng(seed), s, b, n, |r| {
            let c = r.random_range(0.2..5.0);
            Similarity::random(r, n, c)
        });
        let c = conformal_loss(&z, &TripleSet::all(b).unwrap(), Reduction::Mean).unwrap().value;
        prop_assert!(c < 1e-10, "conformal {c}");
    }

    #[test]
    fn conformal_loss_ignores_global_scale(
        seed in any::<u64>(), s in 2usize..5, b in 3usize..8, n in 1usize..5, c in 0.01f64..100.0
    ) {
        let mut r = rng(seed);
        let z = random_stack(&mut r, s, b, n);
        let triples = TripleSet::sample(b, 50, &mut r).unwrap();
        let a = conformal_loss(&z, &triples, Reduction::Mean).unwrap().value;
        let d = conformal_loss(&scaled(&z, c), &triples, Reduction::Mean).unwrap().value;
        prop_assert!((a - d).abs() <= 1e-10, "{a} vs {d}");
    }

    #[test]
    fn orthogonal_maps_zero_the_inner_product_loss(
        seed in any::<u64>(), s in 2usize..5, b in 1usize..7, n in 1usize..6
    ) {
        let z = mapped_stack(&mut rng(seed), s, b, n, |r| {
            let mut t = Similarity::random(r, n, 1.0);
            t.shift.iter_mut().for_each(|x| *x = 0.0);
            t
        });
        let v = orthogonal_loss(&z, inner(false, true, Reduction::Mean)).unwrap().value;
        prop_assert!(v < 1e-18, "{v}");
    }

    #[test]
    fn finite_strategies_are_ordered(
        seed in any::<u64>(), rows in 1usize..5, m in 1usize..6, block in 1usize..4
    ) {
        let mut r = rng(seed);
        let z = slice(&random_stack(&mut r, 1, rows, m * block), 0);
        let zt = slice(&random_stack(&mut r, 1, rows, m * block), 0);
        let value = |s| finite_group_loss(&z, &zt, &finite(m, block, s)).unwrap().value;
        let (enumerate, assignment, chamfer) = (
            value(MatchingStrategy::Enumerate),
            value(MatchingStrategy::Assignment),
            value(MatchingStrategy::Chamfer),
        );
        prop_assert_eq!(enumerate, assignment);
        prop_assert!(chamfer <= assignment + 1e-12, "{chamfer} > {assignment}");
        prop_assert!(chamfer >= 0.0);

        let mut fixed: Vec<usize> = (0..m).collect();
        fixed.shuffle(&mut r);
        let fixed_cost: f64 = (0..rows)
            .map(|i| permutation_cost(&block_cost_matrix(z.row(i), zt.row(i), block, m), &fixed))
            .sum();
        prop_assert!(assignment <= fixed_cost + 1e-12, "{assignment} > {fixed_cost}");
    }

    #[test]
    fn finite_loss_vanishes_on_block_permuted_copies(
        seed in any::<u64>(), rows in 1usize..5, m in 1usize..6, block in 1usize..4
    ) {
        let mut r = rng(seed);
        let z = slice(&random_stack(&mut r, 1, rows, m * block), 0);
        let mut zt = Vec::with_capacity(z.len());
        for i in 0..rows {
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut r);
            for &a in &perm {
                zt.extend_from_slice(&z.row(i)[a * block..(a + 1) * block]);
            }
        }
        let zt = Tensor::new(z.shape().to_vec(), zt).unwrap();
        for s in [MatchingStrategy::Enumerate, MatchingStrategy::Assignment, MatchingStrategy::Chamfer] {
            prop_assert_eq!(finite_group_loss(&z, &zt, &finite(m, block, s)).unwrap().value, 0.0);
        }
    }

    #[test]
    fn informed_loss_is_non_negative_and_zero_on_exact_actions(
        seed in any::<u64>(), rows in 1usize..6, n in 1usize..5
    ) {
        let mut r = rng(seed);
        let q = common::random_orthogonal(&mut r, n);
        let actions = vec![LatentAction { element: 7, matrix: q.clone() }];
        let z = slice(&random_stack(&mut r, 1, rows, n), 0);
        let noise = slice(&random_stack(&mut r, 1, rows, n), 0);
        let labels = vec![7; rows];
        prop_assert!(informed_terms(&z, &noise, &labels, &actions).unwrap().value >= 0.0);

        let exact: Vec<f64> = (0..rows)
            .flat_map(|i| q.iter().map(|row| row.iter().zip(z.row(i)).map(|(a, b)| a * b).sum::<f64>()).collect::<Vec<_>>())
            .collect();
        let exact = Tensor::new(z.shape().to_vec(), exact).unwrap();
        prop_assert!(informed_terms(&z, &exact, &labels, &actions).unwrap().value < 1e-24);
    }
}

#[test]
fn enumeration_matches_assignment_exactly_up_to_six_blocks() {
    let mut r = rng(11);
    for m in 1..=6 {
        for _ in 0..20 {
            let block = r.random_range(1..4);
            let z = slice(&random_stack(&mut r, 1, 3, m * block), 0);
            let zt = slice(&random_stack(&mut r, 1, 3, m * block), 0);
            let e = finite_group_loss(&z, &zt, &finite(m, block, MatchingStrategy::Enumerate)).unwrap();
            let a = finite_group_loss(&z, &zt, &finite(m, block, MatchingStrategy::Assignment)).unwrap();
            assert_eq!(e, a, "m = {m}");
        }
    }
}

#[test]
fn reductions_differ_only_by_the_term_count() {
    let z = random_stack(&mut rng(3), 3, 5, 2);
    let mean = euclidean_loss(&z, Reduction::Mean).unwrap().value;
    let sum = euclidean_loss(&z, Reduction::Sum).unwrap().value;
    // 10 point pairs times 3 slice pairs
    assert!((sum / 30.0 - mean).abs() < 1e-14, "{sum} {mean}");
}
