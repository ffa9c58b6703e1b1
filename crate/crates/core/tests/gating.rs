//! Gate conservation and the masked/collapsed equivalence.

use moep_core::graph::Graph;
use moep_core::model::{MixerKind, Model, ModelConfig};
use moep_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(experts: usize, mixer: MixerKind) -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        hidden_size: 8,
        ffn_inner: 12,
        num_heads: 2,
        num_experts: experts,
        moe_blocks: vec![0, 1],
        input_dim: 5,
        num_classes: 3,
        mixer,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn mask_from(bits: u32, experts: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..experts).map(|i| bits & (1 << i) != 0).collect();
    if !m.iter().any(|b| *b) {
        m[bits as usize % experts] = true;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn alphas_conserve_mass(seed in any::<u64>(), experts in 1usize..=8, bits in any::<u32>(), scale in 0.1f64..50.0) {
        let model = Model::init(config(experts, MixerKind::Attention), seed).unwrap();
        let mask = mask_from(bits, experts);
        let mut masked = model.clone();
        masked.set_active(0, &mask).unwrap();
        let layer = masked.moe_layer(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1000, 8], scale);
        let gate = layer.gate_values(masked.params().values(), &x).unwrap();
        prop_assert_eq!(gate.num_tokens(), 1000);
        for t in 0..1000 {
            let row = gate.alphas.row(t);
            let mut sum = 0.0;
            for (e, &a) in row.iter().enumerate() {
                if mask[e] {
                    prop_assert!(a >= 0.0);
                    sum += a;
                } else {
                    prop_assert_eq!(a.to_bits(), 0.0f64.to_bits(), "masked alpha {} at expert {}", a, e);
                }
            }
            prop_assert!((sum - 1.0).abs() < 1e-9, "sum {}", sum);
            let top = gate.top1[t];
            prop_assert!(mask[top]);
            prop_assert!(row.iter().enumerate().all(|(e, &a)| !mask[e] || a <= row[top]));
        }
    }
}

#[test]
fn collapsed_layer_matches_single_survivor() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let experts = [2, 4, 8][trial % 3];
        let mut model = Model::init(config(experts, MixerKind::Attention), trial as u64).unwrap();
        let mut mask = vec![false; experts];
        mask[rng.random_range(0..experts)] = true;
        model.set_active(0, &mask).unwrap();
        let layer = model.moe_layer(0).unwrap();
        let params = model.params().values();
        let x = random(&mut rng, &[16, 8], 3.0);

        let masked = layer.forward_values(params, &x).unwrap();
        let dense = layer.collapse_to_dense().unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = dense.forward(&mut g, params, xv).unwrap();
        let collapsed = g.value(y);
        assert_eq!(masked.shape(), collapsed.shape());
        worst = worst.max(masked.max_abs_diff(collapsed));
    }
    assert!(worst <= 1e-12, "max elementwise difference {worst}");
}

#[test]
fn collapsed_model_matches_masked_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100u64 {
        let mixer = if trial % 2 == 0 { MixerKind::Attention } else { MixerKind::MeanPool };
        let mut model = Model::init(config(4, mixer), trial).unwrap();
        for layer in 0..2 {
            let mut mask = vec![false; 4];
            mask[rng.random_range(0..4)] = true;
            model.set_active(layer, &mask).unwrap();
        }
        let collapsed = model.collapse().unwrap();
        assert_eq!(collapsed.num_moe_layers(), 0);
        assert!(collapsed.parameter_count() < model.parameter_count());
        let features = random(&mut rng, &[3, 4, 5], 3.0);
        let a = model.predict(&features).unwrap();
        let b = collapsed.predict(&features).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12, "trial {trial}: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn collapse_refuses_multiple_survivors() {
    let mut model = Model::init(config(4, MixerKind::Attention), 0).unwrap();
    model.set_active(0, &[true, true, false, false]).unwrap();
    assert!(model.collapse().is_err());
}
