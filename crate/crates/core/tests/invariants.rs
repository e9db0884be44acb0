use ndarray::{Array1, Array2};
use proptest::prelude::*;
use spide_core::backward::{backward_stage_from_current, BackwardConfig, BackwardMode};
use spide_core::forward::{encode_constant, forward_stage, ForwardConfig};
use spide_core::network::{build_network, make_dropout_masks, DropoutMasks, LinearOp};
use spide_core::neuron::{coupled_pair_step, ternary_step, CoupledPairState, NeuronHyper, NeuronState, SpikeMode};
use spide_core::rng;

fn drives(n: usize, len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, n), len)
}

proptest! {
    #[test]
    fn coupled_pair_matches_ternary_rule(seq in drives(4, 64), v_th in 0.1f64..2.0) {
        let hyper = NeuronHyper::new(v_th, -v_th, 1.0).unwrap();
        let mut direct = NeuronState::zeros(4);
        let mut pair = CoupledPairState::zeros(4);
        for d in &seq {
            let (s1, next) = ternary_step(&direct, d, &hyper).unwrap();
            let (s2, next_pair) = coupled_pair_step(&pair, d, &hyper).unwrap();
            prop_assert_eq!(s1.values(), s2.values());
            prop_assert_eq!(&next.u, &next_pair.positive.u);
            prop_assert!(next_pair.negation_holds());
            direct = next;
            pair = next_pair;
        }
    }

    #[test]
    fn adjoint_identity(w in prop::collection::vec(-1.0f64..1.0, 12), x in prop::collection::vec(-1.0f64..1.0, 4), y in prop::collection::vec(-1.0f64..1.0, 3)) {
        let op = LinearOp::new(Array2::from_shape_vec((3, 4), w).unwrap());
        let x = Array1::from(x);
        let y = Array1::from(y);
        let lhs = op.apply(x.view()).unwrap().dot(&y);
        let rhs = x.dot(&op.apply_transpose(y.view()).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn stage_outputs_stay_in_their_domains(
        seed in 0u64..1000,
        width in 2usize..10,
        t_f in 1usize..60,
        t_b in 1usize..60,
        dropout in 0.0f64..0.5,
        c in prop::collection::vec(-1.0f64..1.0, 10),
    ) {
        let params = build_network(&[5, width, width], 3, true, seed).unwrap();
        let mut r = rng::stream(seed, rng::DOMAIN_DROPOUT, 0, 0);
        let d = make_dropout_masks(&params.layer_widths(), dropout, &mut r).unwrap();
        let x: Array1<f64> = (0..5).map(|i| (i as f64 * 0.37 + seed as f64 * 0.01).fract()).collect();
        let fwd_cfg = ForwardConfig { t_f, hyper: NeuronHyper::forward_default() };
        let fwd = forward_stage(&params, &encode_constant(x.view()), &fwd_cfg, &d).unwrap();
        for (a, m) in fwd.alpha.iter().zip(&fwd.masks) {
            prop_assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        prop_assert!(fwd.spike_counts.iter().zip(params.layer_widths()).all(|(&s, n)| s <= (n * t_f) as u64));

        let current = Array1::from(c[..width].to_vec());
        for mode in [BackwardMode::Fast, BackwardMode::CoupledPair] {
            let cfg = BackwardConfig { t_b, hyper: NeuronHyper::backward_default(), mode };
            let bwd = backward_stage_from_current(&params, &fwd, &current, &cfg, &d).unwrap();
            for b in &bwd.beta {
                prop_assert!(b.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn dropout_masks_are_zero_or_rescaled(rate in 0.0f64..0.9, seed in 0u64..1000) {
        let mut r = rng::stream(seed, rng::DOMAIN_DROPOUT, 1, 2);
        let d = make_dropout_masks(&[7, 5], rate, &mut r).unwrap();
        let keep = 1.0 / (1.0 - rate);
        for m in d.layers.iter().chain(std::iter::once(&d.feedback)) {
            prop_assert!(m.iter().all(|&v| v == 0.0 || (v - keep).abs() < 1e-12));
        }
    }
}

#[test]
fn spike_vectors_reject_values_outside_their_mode() {
    use spide_core::neuron::SpikeVector;
    assert!(SpikeVector::new(vec![0, 1], SpikeMode::Forward).is_ok());
    assert!(SpikeVector::new(vec![-1], SpikeMode::Forward).is_err());
    assert!(SpikeVector::new(vec![-1, 0, 1], SpikeMode::Backward).is_ok());
    assert!(SpikeVector::new(vec![2], SpikeMode::Backward).is_err());
}

#[test]
fn identity_dropout_is_all_ones() {
    let d = DropoutMasks::identity(&[3, 2]);
    assert!(d.layers.iter().all(|m| m.iter().all(|&v| v == 1.0)));
    assert_eq!(d.feedback.len(), 3);
}
