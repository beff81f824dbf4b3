//! Small end-to-end runs through the library: data, flows, gaps, training.

use compflow::agent::{run_compflow, AgentConfig, Method, TrainerConfig};
use compflow::envs::{generate_offline_dataset, BehaviorPolicy, EnvPair, GaussianLinearPair, ShiftRegion};
use compflow::flow::{
    train_offline_flow, train_online_flow, CompositeFlow, ConditionalFlow, FlowArch, FlowTrainConfig,
};
use compflow::gap::{dataset_gaps, estimate_gap_batch, quantile_select, state_action_matrices};
use compflow::persist::{dataset_text, metrics_text, parse_dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_flow(iterations: usize) -> FlowTrainConfig {
    FlowTrainConfig {
        arch: FlowArch {
            hidden_layers: 2,
            hidden_width: 32,
        },
        batch_size: 128,
        iterations,
        lr: 1e-3,
        ..FlowTrainConfig::default()
    }
}

fn half_shifted() -> (GaussianLinearPair, EnvPair) {
    let g = GaussianLinearPair::isotropic(
        2,
        0.5,
        0.5,
        0.3,
        0.3,
        vec![2.0, 0.0],
        ShiftRegion::PositiveHalf { axis: 0 },
    )
    .unwrap();
    (g.clone(), EnvPair::GaussianLinear(g))
}

#[test]
fn gaps_separate_shifted_from_unshifted_states() {
    let (g, pair) = half_shifted();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let off = generate_offline_dataset(&pair.offline(), &BehaviorPolicy::Uniform, 4000, &mut rng).unwrap();
    let on = generate_offline_dataset(&pair.online(), &BehaviorPolicy::Uniform, 1000, &mut rng).unwrap();
    let (off_flow, _) = train_offline_flow(&off, &small_flow(600), &mut rng).unwrap();
    let (on_flow, report) = train_online_flow(&off_flow, &on, None, &small_flow(300), &mut rng).unwrap();
    assert_eq!(report.coupling.violations, 0);
    let composite = CompositeFlow::new(off_flow, on_flow).unwrap();

    let gaps = dataset_gaps(&off[..400], &composite, 16, &mut rng).unwrap();
    let (shifted, plain): (Vec<_>, Vec<_>) = off[..400]
        .iter()
        .zip(&gaps)
        .partition(|(t, _)| g.in_shifted_region(&t.state));
    let mean = |v: &[(&_, &f64)]| v.iter().map(|p| *p.1).sum::<f64>() / v.len() as f64;
    let (hi, lo) = (mean(&shifted), mean(&plain));
    assert!(hi > 1.0 && lo < 0.5 * hi, "shifted mean gap {hi}, unshifted {lo}");

    // the lowest-gap half of a batch comes mostly from the unshifted half-space
    let (kept, _) = quantile_select(&gaps[..128], 0.5).unwrap();
    let unshifted = kept.iter().filter(|&&i| !g.in_shifted_region(&off[i].state)).count();
    assert!(unshifted as f64 >= 0.8 * kept.len() as f64);
}

#[test]
fn flows_and_datasets_survive_serialization() {
    let (_, pair) = half_shifted();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = generate_offline_dataset(&pair.offline(), &BehaviorPolicy::Uniform, 300, &mut rng).unwrap();
    let back = parse_dataset(&dataset_text(&data).unwrap(), "mem").unwrap();
    assert_eq!(back, data);

    let (off_flow, _) = train_offline_flow(&data, &small_flow(20), &mut rng).unwrap();
    let (on_flow, _) = train_online_flow(&off_flow, &data, None, &small_flow(5), &mut rng).unwrap();
    let mut buf = Vec::new();
    on_flow.write_checkpoint(&mut buf).unwrap();
    let restored = ConditionalFlow::read_checkpoint(&buf[..]).unwrap();
    assert_eq!(restored.interval(), (1.0, 2.0));
    assert!(restored.is_frozen());

    let (s, a) = state_action_matrices(&data[..50]);
    let original = CompositeFlow::new(off_flow.clone(), on_flow).unwrap();
    let reloaded = CompositeFlow::new(off_flow, restored).unwrap();
    let g1 = estimate_gap_batch(&original, s.view(), a.view(), 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let g2 = estimate_gap_batch(&reloaded, s.view(), a.view(), 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn short_compflow_run_is_reproducible() {
    let (_, pair) = half_shifted();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = generate_offline_dataset(&pair.offline(), &BehaviorPolicy::Uniform, 500, &mut rng).unwrap();
    let (flow, _) = train_offline_flow(&data, &small_flow(50), &mut rng).unwrap();
    let config = TrainerConfig {
        method: Method::CompFlow,
        agent: AgentConfig {
            hidden_width: 16,
            batch_size: 32,
            ..AgentConfig::default()
        },
        gradient_steps: 1,
        warmup: 50,
        total_steps: 300,
        eval_interval: 100,
        eval_episodes: 3,
        train_freq: 100,
        gap_samples: 8,
        online_flow: FlowTrainConfig {
            batch_size: 64,
            ..small_flow(10)
        },
        ..TrainerConfig::default()
    };
    let (a, ra) = run_compflow(&pair, data.clone(), Some(flow.clone()), config.clone(), 9).unwrap();
    let (_, rb) = run_compflow(&pair, data, Some(flow), config, 9).unwrap();
    assert_eq!(metrics_text(&ra), metrics_text(&rb));
    assert_eq!(ra.iter().map(|r| r.step).collect::<Vec<_>>(), vec![100, 200, 300]);
    assert_eq!(a.coupling.checked, 20);
    assert_eq!((a.filter_log.size_violations, a.filter_log.order_violations), (0, 0));
}
