mod common;

use diarkit::pit::{argmax, check_multilabel_gradient, check_powerset_gradient, EPS};
use diarkit::timeline::permute_columns;
use diarkit::{
    bce, hungarian, multilabel_pit_loss, pairwise_bce_costs, powerset_cross_entropy, powerset_pit_align,
    powerset_pit_loss, CostMatrix, PowersetCodec, SpeakerPermutation,
};
use ndarray::{array, Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::{
    bce_oracle, brute_force_assignment, brute_force_pit, central_differences, max_relative_error, random_binary,
    random_probabilities, rng,
};

fn random_perm(r: &mut impl Rng, k: usize) -> SpeakerPermutation {
    let mut p: Vec<usize> = (0..k).collect();
    p.shuffle(r);
    SpeakerPermutation::new(p).unwrap()
}

/// Softmax cross-entropy written independently of the library.
fn cross_entropy_oracle(classes: &[usize], logits: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (t, &c) in classes.iter().enumerate() {
        let row = logits.row(t);
        let denom: f64 = row.iter().map(|x| x.exp()).sum();
        total -= (row[c].exp() / denom).ln();
    }
    total / classes.len() as f64
}

#[test]
fn bce_examples() {
    let mut r = rng(1);
    let target = random_binary(&mut r, 4, 3, 0.5);
    let half = Array2::from_elem((4, 3), 0.5);
    assert!((bce(target.view(), half.view()).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(bce(target.view(), target.view()).unwrap() <= 1e-6);
    let pred = random_probabilities(&mut r, 4, 3);
    assert!((bce(target.view(), pred.view()).unwrap() - bce_oracle(&target, &pred)).abs() < 1e-14);
    assert!(bce(target.view(), half.slice(ndarray::s![.., ..2]).view()).is_err());
}

#[test]
fn pairwise_cost_examples() {
    let costs = pairwise_bce_costs(array![[1.0, 0.0]].view(), array![[0.9, 0.1]].view()).unwrap();
    let expected = [[-(0.9f64).ln(), -(0.1f64).ln()], [-(0.1f64).ln(), -(0.9f64).ln()]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((costs.view()[[i, j]] - expected[i][j]).abs() < 1e-12);
        }
    }
    let mut r = rng(2);
    let target = random_binary(&mut r, 30, 3, 0.4);
    let costs = pairwise_bce_costs(target.view(), Array2::from_elem((30, 3), 0.5).view()).unwrap();
    assert!(costs.view().iter().all(|c| (c - 2f64.ln()).abs() < 1e-12));

    // Near one-hot predictions of the target: the diagonal wins in every row.
    let target = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
    let pred = target.mapv(|y| if y > 0.5 { 0.95 } else { 0.05 });
    let costs = pairwise_bce_costs(target.view(), pred.view()).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert!(costs.view()[[i, i]] < costs.view()[[i, j]]);
            }
        }
    }
}

#[test]
fn hungarian_examples() {
    let (p, c) = hungarian(&CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap());
    assert!(p.is_identity() && c == 0.0);
    let (p, c) = hungarian(&CostMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap());
    assert_eq!(p.mapping(), &[1, 0]);
    assert_eq!(c, 0.0);
    assert!(CostMatrix::new(Array2::zeros((2, 3))).is_err());
    assert!(CostMatrix::new(array![[f64::NAN]]).is_err());
}

#[test]
fn hungarian_matches_brute_force() {
    let mut r = rng(3);
    for trial in 0..1500 {
        let k = 1 + trial % 5;
        // Mix continuous costs with small integers to exercise ties.
        let cost = if trial % 3 == 0 {
            Array2::from_shape_fn((k, k), |_| r.random_range(0..4) as f64)
        } else {
            Array2::from_shape_fn((k, k), |_| r.random_range(-5.0..5.0))
        };
        let (perm, total) = hungarian(&CostMatrix::new(cost.clone()).unwrap());
        let (_, best) = brute_force_assignment(&cost);
        assert!((total - best).abs() < 1e-12, "trial {trial}: {total} vs {best}");
        let realized: f64 = perm.mapping().iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        assert!((realized - total).abs() < 1e-12);
    }
}

#[test]
fn multilabel_pit_examples() {
    // Single frame: compare with the exhaustive 3! search.
    let target = array![[1.0, 0.0, 0.0]];
    let pred = array![[0.2, 0.7, 0.1]];
    let r = multilabel_pit_loss(target.view(), pred.view()).unwrap();
    assert!((r.value - brute_force_pit(&target, &pred)).abs() < 1e-12);
    let permuted = permute_columns(target.view(), &r.permutation).unwrap();
    assert_eq!(permuted, array![[0.0, 1.0, 0.0]]);

    // Perfect permuted prediction.
    let mut g = rng(4);
    let target = random_binary(&mut g, 50, 3, 0.5);
    let perm = SpeakerPermutation::new(vec![2, 0, 1]).unwrap();
    let pred = permute_columns(target.view(), &perm).unwrap().mapv(|y| y.clamp(EPS, 1.0 - EPS));
    let r = multilabel_pit_loss(target.view(), pred.view()).unwrap();
    assert!(r.value < 1e-6);
    assert_eq!(
        permute_columns(target.view(), &r.permutation).unwrap(),
        permute_columns(target.view(), &perm).unwrap()
    );
}

#[test]
fn multilabel_pit_matches_brute_force_and_is_invariant() {
    let mut g = rng(5);
    for trial in 0..200 {
        let k = 1 + trial % 4;
        let t = 1 + trial % 17;
        let target = random_binary(&mut g, t, k, 0.4);
        let pred = random_probabilities(&mut g, t, k);
        let base = multilabel_pit_loss(target.view(), pred.view()).unwrap();
        assert!(base.value >= 0.0);
        assert_eq!(base.gradient.dim(), pred.dim());
        assert!((base.value - brute_force_pit(&target, &pred)).abs() < 1e-12);
        let perm = random_perm(&mut g, k);
        let permuted = permute_columns(target.view(), &perm).unwrap();
        let other = multilabel_pit_loss(permuted.view(), pred.view()).unwrap();
        assert_eq!(other.value, base.value, "trial {trial}");
    }
}

#[test]
fn powerset_cross_entropy_examples() {
    let logits = Array2::zeros((4, 7));
    let (v, _) = powerset_cross_entropy(&[0, 3, 6, 2], logits.view()).unwrap();
    assert!((v - 1.945910149055313).abs() < 1e-12);
    assert!(powerset_cross_entropy(&[0, 3, 6, 7], logits.view()).is_err());

    let mut g = rng(6);
    let logits = Array2::from_shape_fn((8, 7), |_| g.random_range(-3.0..3.0));
    let classes: Vec<usize> = (0..8).map(|_| g.random_range(0..7)).collect();
    let (v, grad) = powerset_cross_entropy(&classes, logits.view()).unwrap();
    assert!((v - cross_entropy_oracle(&classes, &logits)).abs() < 1e-12);
    let numeric = central_differences(&logits, 1e-6, |x| Some(cross_entropy_oracle(&classes, x)));
    let (err, checked) = max_relative_error(&grad, &numeric);
    assert_eq!(checked, 56);
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn powerset_alignment_examples() {
    let codec = PowersetCodec::new(3, 2).unwrap();
    // Target {s1},{s1,s2}; prediction {s2},{s1,s2}.
    let mut logits = Array2::zeros((2, 7));
    logits[[0, 2]] = 20.0;
    logits[[1, 4]] = 20.0;
    let (aligned, perm) = powerset_pit_align(&codec, &[1, 4], logits.view()).unwrap();
    assert_eq!(aligned, vec![2, 4]);
    let pi = codec.induced_class_permutation(&perm).unwrap();
    assert_eq!(vec![pi[1], pi[4]], vec![2, 4]);

    // Logits matching the target: identity.
    let target = vec![0, 1, 5, 6, 3];
    let mut logits = Array2::zeros((5, 7));
    for (t, &c) in target.iter().enumerate() {
        logits[[t, c]] = 20.0;
    }
    let (aligned, perm) = powerset_pit_align(&codec, &target, logits.view()).unwrap();
    assert_eq!(aligned, target);
    assert!(perm.is_identity());

    // Uniform logits: ln 7 whatever the alignment.
    let r = powerset_pit_loss(&codec, &target, Array2::zeros((5, 7)).view()).unwrap();
    assert!((r.value - 7f64.ln()).abs() < 1e-12);
    assert!(powerset_pit_align(&codec, &target, Array2::zeros((5, 6)).view()).is_err());
}

/// Saturated logits of a speaker-relabelled target are recovered exactly.
#[test]
fn powerset_alignment_recovers_known_permutations() {
    let codec = PowersetCodec::new(3, 2).unwrap();
    let mut g = rng(7);
    for _ in 0..200 {
        let t = g.random_range(5..40);
        let target: Vec<usize> = (0..t).map(|_| g.random_range(0..7)).collect();
        let perm = random_perm(&mut g, 3);
        let pi = codec.induced_class_permutation(&perm).unwrap();
        let mut logits = Array2::zeros((t, 7));
        for (f, &c) in target.iter().enumerate() {
            logits[[f, pi[c]]] = 30.0;
        }
        let result = powerset_pit_loss(&codec, &target, logits.view()).unwrap();
        assert!(result.value < 1e-8);
        let (aligned, found) = powerset_pit_align(&codec, &target, logits.view()).unwrap();
        let predicted: Vec<usize> = logits.axis_iter(Axis(0)).map(argmax).collect();
        assert_eq!(aligned, predicted);
        // Equal to π up to speakers the target never distinguishes.
        let pi_found = codec.induced_class_permutation(&found).unwrap();
        assert!(target.iter().all(|&c| pi_found[c] == pi[c]));
    }
}

/// The BCE cost on binary inputs is an affine function of Hamming distance,
/// so the minimizing cost equals that of Hamming-distance matching.
#[test]
fn powerset_alignment_cost_equals_hamming_matching() {
    let codec = PowersetCodec::new(4, 2).unwrap();
    let mut g = rng(8);
    for _ in 0..200 {
        let t = g.random_range(1..25);
        let target: Vec<usize> = (0..t).map(|_| g.random_range(0..codec.num_classes())).collect();
        let logits = Array2::from_shape_fn((t, codec.num_classes()), |_| g.random_range(-2.0..2.0));
        let (aligned, _) = powerset_pit_align(&codec, &target, logits.view()).unwrap();
        let predicted: Vec<usize> = logits.axis_iter(Axis(0)).map(argmax).collect();
        let decode = |c: usize| codec.decode_class(c).unwrap();
        let hamming = |a: &[usize], perm: &[usize]| -> usize {
            a.iter()
                .zip(&predicted)
                .map(|(&x, &y)| {
                    let (x, y) = (decode(x), decode(y));
                    (0..4).filter(|&s| x[s] != y[perm[s]]).count()
                })
                .sum()
        };
        let identity = [0, 1, 2, 3];
        let best = (0..4)
            .permutations_oracle()
            .into_iter()
            .map(|p| hamming(&target, &p))
            .min()
            .unwrap();
        assert_eq!(hamming(&aligned, &identity), best);
    }
}

trait PermutationsOracle {
    fn permutations_oracle(self) -> Vec<Vec<usize>>;
}

impl PermutationsOracle for std::ops::Range<usize> {
    fn permutations_oracle(self) -> Vec<Vec<usize>> {
        use itertools::Itertools;
        let n = self.len();
        self.permutations(n).collect()
    }
}

/// Aligned targets reachable through every minimum-Hamming-cost permutation,
/// by exhaustive search.
fn optimal_alignments(codec: &PowersetCodec, target: &[usize], logits: &Array2<f64>) -> Vec<Vec<usize>> {
    use itertools::Itertools;
    let k = codec.num_speakers();
    let predicted: Vec<Vec<f64>> = logits
        .axis_iter(Axis(0))
        .map(|row| codec.decode_class(argmax(row)).unwrap())
        .collect();
    let decoded: Vec<Vec<f64>> = target.iter().map(|&c| codec.decode_class(c).unwrap()).collect();
    let scored: Vec<(usize, Vec<usize>)> = (0..k)
        .permutations(k)
        .map(|p| {
            let cost = decoded
                .iter()
                .zip(&predicted)
                .map(|(x, y)| (0..k).filter(|&s| x[s] != y[p[s]]).count())
                .sum();
            (cost, p)
        })
        .collect();
    let best = scored.iter().map(|(c, _)| *c).min().unwrap();
    scored
        .into_iter()
        .filter(|(c, _)| *c == best)
        .map(|(_, p)| {
            let perm = SpeakerPermutation::new(p).unwrap();
            let pi = codec.induced_class_permutation(&perm).unwrap();
            target.iter().map(|&c| pi[c]).collect::<Vec<_>>()
        })
        .sorted()
        .dedup()
        .collect()
}

/// Relabelling the target leaves the loss unchanged whenever the optimal
/// alignment is unique (tied alignments may legitimately differ in value).
#[test]
fn powerset_loss_is_invariant_to_target_relabelling() {
    let mut g = rng(9);
    let mut accepted = 0;
    for trial in 0..400 {
        let k = 2 + trial % 3;
        let codec = PowersetCodec::new(k, 2.min(k)).unwrap();
        let t = g.random_range(10..60);
        let target: Vec<usize> = (0..t).map(|_| g.random_range(0..codec.num_classes())).collect();
        let logits = Array2::from_shape_fn((t, codec.num_classes()), |_| g.random_range(-4.0..4.0));
        let pi = codec.induced_class_permutation(&random_perm(&mut g, k)).unwrap();
        let relabelled: Vec<usize> = target.iter().map(|&c| pi[c]).collect();
        let base = powerset_pit_loss(&codec, &target, logits.view()).unwrap();
        assert!(base.value >= 0.0);
        if optimal_alignments(&codec, &target, &logits).len() != 1 {
            continue;
        }
        accepted += 1;
        let other = powerset_pit_loss(&codec, &relabelled, logits.view()).unwrap();
        assert!((other.value - base.value).abs() < 1e-12, "trial {trial}");
    }
    assert!(accepted >= 200, "only {accepted} tie-free instances");
}

#[test]
fn gradients_match_independent_finite_differences() {
    let h = 1e-6;
    let mut g = rng(10);
    for trial in 0..100 {
        let t = g.random_range(2..10);
        let k = 2 + trial % 3;
        let target = random_binary(&mut g, t, k, 0.4);
        let pred = random_probabilities(&mut g, t, k);
        let base = multilabel_pit_loss(target.view(), pred.view()).unwrap();
        let numeric = central_differences(&pred, h, |x| {
            let r = multilabel_pit_loss(target.view(), x.view()).unwrap();
            (r.permutation == base.permutation).then(|| bce_oracle(&permute_columns(target.view(), &r.permutation).unwrap(), x))
        });
        let (err, checked) = max_relative_error(&base.gradient, &numeric);
        assert!(checked > 0 && err < 1e-5, "multilabel trial {trial}: {err}");

        let codec = PowersetCodec::new(3, 2).unwrap();
        let classes: Vec<usize> = (0..t).map(|_| g.random_range(0..7)).collect();
        let logits = Array2::from_shape_fn((t, 7), |_| g.random_range(-3.0..3.0));
        let base = powerset_pit_loss(&codec, &classes, logits.view()).unwrap();
        let numeric = central_differences(&logits, h, |x| {
            let (aligned, perm) = powerset_pit_align(&codec, &classes, x.view()).unwrap();
            (perm == base.permutation).then(|| cross_entropy_oracle(&aligned, x))
        });
        let (err, checked) = max_relative_error(&base.gradient, &numeric);
        assert!(checked > 0 && err < 1e-5, "powerset trial {trial}: {err}");
    }
}

#[test]
fn library_gradient_checks_agree() {
    let mut g = rng(12);
    let target = random_binary(&mut g, 6, 3, 0.5);
    let pred = random_probabilities(&mut g, 6, 3);
    assert!(check_multilabel_gradient(target.view(), pred.view(), 1e-6).unwrap().passes(1e-5));
    let codec = PowersetCodec::new(3, 2).unwrap();
    let logits = Array2::from_shape_fn((6, 7), |_| g.random_range(-3.0..3.0));
    let check = check_powerset_gradient(&codec, &[0, 1, 2, 4, 5, 6], logits.view(), 1e-6).unwrap();
    assert!(check.passes(1e-5));
}

proptest! {
    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), t in 1usize..20, k in 1usize..5) {
        let mut g = rng(seed);
        let target = random_binary(&mut g, t, k, 0.5);
        let pred = random_probabilities(&mut g, t, k);
        prop_assert!(multilabel_pit_loss(target.view(), pred.view()).unwrap().value >= 0.0);
        let codec = PowersetCodec::new(k, k.min(2)).unwrap();
        let classes: Vec<usize> = (0..t).map(|_| g.random_range(0..codec.num_classes())).collect();
        let logits = Array2::from_shape_fn((t, codec.num_classes()), |_| g.random_range(-10.0..10.0));
        prop_assert!(powerset_pit_loss(&codec, &classes, logits.view()).unwrap().value >= 0.0);
    }
}
