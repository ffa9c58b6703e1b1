//! Scheduler state machine driven by scripted share sequences.

use moep_core::moe::GateResult;
use moep_core::prune::{on_window_end, replay, threshold, DecisionKind, Ledger, PruneConfig, PruneMode, ScheduleState};
use moep_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
enum Script {
    Uniform,
    Geometric,
    Dominant,
    Rotating,
    Random(u64),
}

const SCRIPTS: [Script; 7] = [
    Script::Uniform,
    Script::Geometric,
    Script::Dominant,
    Script::Rotating,
    Script::Random(1),
    Script::Random(2),
    Script::Random(3),
];

fn raw_shares(script: Script, step: u64, experts: usize) -> Vec<f64> {
    match script {
        Script::Uniform => vec![1.0; experts],
        Script::Geometric => (0..experts).map(|i| 0.5f64.powi(i as i32)).collect(),
        Script::Dominant => (0..experts).map(|i| if i == experts - 1 { 0.9 } else { 0.1 / experts as f64 }).collect(),
        Script::Rotating => {
            let lead = (step / 7) as usize % experts;
            (0..experts).map(|i| if i == lead { 3.0 } else { 1.0 }).collect()
        }
        Script::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003) ^ step);
            (0..experts).map(|_| rng.random_range(0.01..1.0)).collect()
        }
    }
}

/// One token per step whose alphas are the scripted shares renormalized over
/// the current survivors. Returns the final state and the survivor sets
/// observed after every step.
fn drive(config: &PruneConfig, script: Script) -> (ScheduleState, Vec<Vec<usize>>) {
    let e = config.num_experts;
    let mut state = ScheduleState::new(&[vec![true; e]]).unwrap();
    let mut ledger = Ledger::new(1, e);
    let mut history = Vec::new();
    for step in 1..=config.total_steps {
        let mask = state.layers[0].survivors.clone();
        let mut s = raw_shares(script, step, e);
        let total: f64 = s.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v).sum();
        for (v, m) in s.iter_mut().zip(&mask) {
            *v = if *m { *v / total } else { 0.0 };
        }
        let top = (0..e).filter(|&i| mask[i]).fold(None, |best: Option<usize>, i| match best {
            Some(b) if s[b] >= s[i] => Some(b),
            _ => Some(i),
        });
        ledger
            .accumulate(&[GateResult {
                alphas: Tensor::new(vec![1, e], s).unwrap(),
                top1: vec![top.unwrap()],
                balance_loss: 0.0,
            }])
            .unwrap();
        if config.is_boundary(step) {
            on_window_end(&mut state, &mut ledger, config, step).unwrap();
        }
        history.push(state.layers[0].survivor_ids());
    }
    (state, history)
}

fn check_run(config: &PruneConfig, script: Script) -> u64 {
    let tag = format!("{config:?} {script:?}");
    let (state, history) = drive(config, script);
    let e = config.num_experts;
    let mut prev: Vec<usize> = (0..e).collect();
    for (i, now) in history.iter().enumerate() {
        let step = i as u64 + 1;
        assert!(!now.is_empty(), "{tag}: empty at step {step}");
        assert!(now.iter().all(|x| prev.contains(x)), "{tag}: survivors grew at step {step}");
        if step >= config.total_steps / 2 {
            assert_eq!(now.len(), 1, "{tag}: {} survivors at step {step}", now.len());
        }
        prev = now.clone();
    }
    if config.beta <= 1.0 {
        assert_eq!(state.clamp_activations, 0, "{tag}: clamp fired with beta <= 1");
    }
    for ev in &state.events {
        if ev.clamped {
            assert!(ev.beta > 1.0 && ev.kind == DecisionKind::Threshold, "{tag}");
        }
    }

    let logged: Vec<Vec<usize>> = state.events.iter().map(|ev| ev.dropped.clone()).collect();
    assert_eq!(replay(&[vec![true; e]], &state.events), logged, "{tag}: replay differs");
    let mut mask = vec![true; e];
    for d in logged.iter().flatten() {
        mask[*d] = false;
    }
    assert_eq!(vec![mask], state.masks(), "{tag}: replayed masks differ");
    state.clamp_activations
}

#[test]
fn exhaustive_grid() {
    let mut runs = 0;
    let mut clamps_above_one = 0;
    for e in [2usize, 4, 8] {
        for gamma in [0.25, 0.5, 1.0] {
            for beta in [0.0, 0.5, 1.0, 1.5] {
                for mode in [PruneMode::Staged, PruneMode::Eager] {
                    for n in [64u64, 100, 37] {
                        for script in SCRIPTS {
                            let config = PruneConfig {
                                beta,
                                gamma,
                                ..PruneConfig::new(mode, n, e)
                            };
                            let c = check_run(&config, script);
                            if beta > 1.0 {
                                clamps_above_one += c;
                            }
                            runs += 1;
                        }
                    }
                }
            }
        }
    }
    assert_eq!(runs, 3 * 3 * 4 * 2 * 3 * SCRIPTS.len());
    // Uniform shares sit below 1.5 / Z for everyone, so the clamp must engage.
    assert!(clamps_above_one > 0);
}

#[test]
fn eager_drops_exactly_below_threshold() {
    let config = PruneConfig {
        beta: 1.0,
        ..PruneConfig::new(PruneMode::Eager, 80, 4)
    };
    let (state, _) = drive(&config, Script::Geometric);
    let first = &state.events[0];
    // Shares 8/15, 4/15, 2/15, 1/15 against T = 1/4.
    assert_eq!(first.step, 20);
    assert_eq!(first.dropped, vec![2, 3]);
    let t = threshold(1.0, 4);
    for (i, s) in first.shares.iter().enumerate() {
        assert_eq!(first.dropped.contains(&i), *s < t, "expert {i} share {s}");
    }
}

#[test]
fn threshold_values_are_exact() {
    assert_eq!(threshold(1.0, 32), 0.03125);
    assert_eq!(threshold(0.5, 4), 0.125);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_configs_keep_invariants(
        e in 2usize..=10,
        n in 2u64..300,
        gamma in 0.05f64..2.0,
        beta in 0.0f64..2.0,
        eager in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mode = if eager { PruneMode::Eager } else { PruneMode::Staged };
        let config = PruneConfig { beta, gamma, ..PruneConfig::new(mode, n, e) };
        check_run(&config, Script::Random(seed));
    }
}
