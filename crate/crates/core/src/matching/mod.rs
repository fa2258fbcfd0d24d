//! Bipartite matching of predictions to ground truths and the set loss.

mod assign;
mod loss;

pub use assign::{brute_force_match, hungarian_match, CostMatrix, MatchAssignment};
pub use loss::{
    box_l1, cost_matrix, match_detections, pair_cost, set_loss, GroundTruthSet, LossTerms, SetLoss,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::config::LossConfig;
    use crate::detection::{DetectionSet, DetectionVars};
    use crate::geometry::{rotated_iou, RotatedBox};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rbox(rng: &mut ChaCha8Rng) -> RotatedBox {
        RotatedBox::new(
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.05..0.4),
            rng.gen_range(0.05..0.4),
            rng.gen_range(-PI..PI),
        )
        .unwrap()
    }

    #[test]
    fn perfect_pair_costs_minus_cls() {
        let c = LossConfig::default();
        let b = RotatedBox::new(0.4, 0.5, 0.2, 0.1, 0.3).unwrap();
        assert_eq!(pair_cost(&b, &[0.0, 1.0, 0.0, 0.0], &b, 1, &c), -2.0);
        let third = pair_cost(&b, &[1.0 / 3.0; 3], &b, 0, &c);
        assert!((third + 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pair_cost_term_by_term() {
        let c = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (a, b) = (rbox(&mut rng), rbox(&mut rng));
            let probs = [0.2, 0.5, 0.3];
            let (pa, pb) = (a.to_array(), b.to_array());
            let mut l1 = 0.0;
            for i in 0..4 {
                l1 += (pa[i] - pb[i]).abs();
            }
            let da = (pa[4] - pb[4]).abs();
            l1 += da.min(PI - da) / PI;
            let expect = 2.0 * -0.5 + 5.0 * l1 + 2.0 * (1.0 - rotated_iou(&a, &b));
            assert!((pair_cost(&a, &probs, &b, 1, &c) - expect).abs() < 1e-12);
        }
    }

    fn vars(tape: &mut Tape, boxes: &[RotatedBox], logits: Tensor) -> DetectionVars {
        let data = boxes.iter().flat_map(|b| b.to_array()).collect();
        DetectionVars {
            boxes: tape.param(Tensor::new(&[boxes.len(), 5], data).unwrap()),
            logits: tape.param(logits),
        }
    }

    #[test]
    fn no_ground_truth_leaves_only_no_object_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let boxes: Vec<_> = (0..3).map(|_| rbox(&mut rng)).collect();
        let logits = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::default();
        let d = vars(&mut tape, &boxes, logits.clone());
        let c = LossConfig::default();
        let out = set_loss(&mut tape, &[d], &GroundTruthSet::default(), &c, None).unwrap();
        let mut expect = 0.0;
        for q in 0..3 {
            let row = logits.row(q);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += 0.1 * (lse - row[3]);
        }
        assert!((tape.value(out.total).item() - 2.0 * expect).abs() < 1e-12);
        let g = tape.backward(out.total).unwrap();
        assert!(g.get(d.boxes).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_perfect_prediction_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gts = GroundTruthSet::new(vec![rbox(&mut rng), rbox(&mut rng)], vec![2, 0], 3).unwrap();
        let mut logits = Tensor::zeros(&[3, 4]);
        for (q, t) in [2usize, 0, 3].iter().enumerate() {
            logits.data_mut()[q * 4 + t] = 60.0;
        }
        let boxes = vec![gts.boxes[0], gts.boxes[1], rbox(&mut rng)];
        let mut tape = Tape::default();
        let d = vars(&mut tape, &boxes, logits);
        let out = set_loss(&mut tape, &[d], &gts, &LossConfig::default(), None).unwrap();
        assert_eq!(out.assignments[0].pairs, vec![(0, 0), (1, 1)]);
        assert!(out.terms[0].l1.abs() < 1e-15);
        assert!(out.terms[0].iou.abs() < 1e-12);
        assert!(tape.value(out.total).item() < 1e-12);
    }

    #[test]
    fn auxiliary_layers_are_summed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gts = GroundTruthSet::new(vec![rbox(&mut rng)], vec![1], 3).unwrap();
        let mut tape = Tape::default();
        let b1: Vec<_> = (0..2).map(|_| rbox(&mut rng)).collect();
        let b2: Vec<_> = (0..2).map(|_| rbox(&mut rng)).collect();
        let d1 = vars(
            &mut tape,
            &b1,
            Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng),
        );
        let d2 = vars(
            &mut tape,
            &b2,
            Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng),
        );
        let c = LossConfig::default();
        let both = set_loss(&mut tape, &[d1, d2], &gts, &c, None).unwrap();
        let one = set_loss(&mut tape, &[d1], &gts, &c, None).unwrap();
        let two = set_loss(&mut tape, &[d2], &gts, &c, None).unwrap();
        let sum = tape.value(one.total).item() + tape.value(two.total).item();
        assert!((tape.value(both.total).item() - sum).abs() < 1e-12);
    }

    #[test]
    fn detection_set_cost_matrix_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let preds = DetectionSet {
            boxes: (0..4).map(|_| rbox(&mut rng)).collect(),
            logits: Tensor::zeros(&[4, 3]),
        };
        let gts = GroundTruthSet::new(vec![rbox(&mut rng)], vec![1], 2).unwrap();
        let c = cost_matrix(&preds, &gts, &LossConfig::default()).unwrap();
        assert_eq!((c.rows(), c.cols()), (4, 1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn loss_nonnegative_and_permutation_invariant(seed in any::<u64>(), n in 1usize..6, m in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts = GroundTruthSet::new(
                (0..m).map(|_| rbox(&mut rng)).collect(),
                (0..m).map(|_| rng.gen_range(0..3)).collect(),
                3,
            ).unwrap();
            let boxes: Vec<_> = (0..n).map(|_| rbox(&mut rng)).collect();
            let logits = Tensor::uniform(&[n, 4], -2.0, 2.0, &mut rng);
            let c = LossConfig::default();
            let mut tape = Tape::default();
            let d = vars(&mut tape, &boxes, logits.clone());
            let base = set_loss(&mut tape, &[d], &gts, &c, None).unwrap();
            let v0 = tape.value(base.total).item();
            prop_assert!(v0 >= 0.0);

            // reverse the query order
            let rb: Vec<_> = boxes.iter().rev().copied().collect();
            let mut rl = Tensor::zeros(&[n, 4]);
            for q in 0..n {
                rl.data_mut()[q * 4..q * 4 + 4].copy_from_slice(logits.row(n - 1 - q));
            }
            let dr = vars(&mut tape, &rb, rl);
            let rev = set_loss(&mut tape, &[dr], &gts, &c, None).unwrap();
            let v1 = tape.value(rev.total).item();
            prop_assert!((v0 - v1).abs() <= 1e-12 * (1.0 + v0.abs()));
        }
    }
}
