use flowvo::flowmatch::{tail_loss, train, LossRecord, TrainConfig};
use flowvo::rng::seeded;
use flowvo::sampler::{estimate_pose, SolverConfig};
use flowvo::synthworld::{dirac_target, make_dirac_dataset, ConditionLift};
use flowvo::NetConfig;

fn dirac_config(steps: usize) -> TrainConfig {
    TrainConfig {
        net: NetConfig {
            cond_dim: 16,
            time_embed_dim: 6,
            ..NetConfig::default()
        },
        steps,
        lr: 2e-3,
        lr_decay_factor: 0.1,
        lr_decay_step: steps / 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn head_loss(history: &[LossRecord], window: usize) -> f64 {
    history[..window].iter().map(|r| r.loss).sum::<f64>() / window as f64
}

#[test]
fn dirac_training_collapses_samples_onto_target() {
    let lift = ConditionLift::new(16, 3).unwrap();
    let data = make_dirac_dataset(64, dirac_target(), &lift).unwrap();
    let (net, history) = train(&data, &dirac_config(20_000)).unwrap();

    let ratio = tail_loss(&history, 200) / head_loss(&history, 20);
    assert!(ratio < 0.05, "loss ratio {ratio}");

    let mut rng = seeded(9);
    let set = estimate_pose(&net, &data[0].cond, &SolverConfig::default(), 10, &mut rng).unwrap();
    let target = dirac_target().to_array();
    for i in 0..6 {
        assert!((set.mean_state.to_array()[i] - target[i]).abs() < 0.05);
        assert!(set.std_state[i] < 0.05);
    }
}

// The exact Dirac field (x1 - x_tau) / (1 - tau) steepens without bound as
// tau -> 1; the small tanh network leaves a residual near tau = 1 that keeps
// this ratio near 4e-3 at desk-scale budgets.
#[test]
#[ignore = "not reached at desk scale; see README"]
fn dirac_loss_ratio_below_one_thousandth() {
    let lift = ConditionLift::new(16, 3).unwrap();
    let data = make_dirac_dataset(64, dirac_target(), &lift).unwrap();
    let (_, history) = train(&data, &dirac_config(40_000)).unwrap();
    let ratio = tail_loss(&history, 200) / head_loss(&history, 20);
    assert!(ratio < 1e-3, "loss ratio {ratio}");
}
