use fairfed::engine::{TrainOptions, Trainer};
use fairfed::metrics::momentum_direction_diagnostic;
use fairfed::toy::{grid_minimax_2d, group_risks, max_group_risk, toy_dataset, QuadraticToy, ToySpec};
use fairfed::{Algorithm, RunConfig};

fn toy_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(Algorithm::FmdaM, 50, 300, 1);
    cfg.eta = 0.001;
    cfg.gamma = 0.001;
    cfg.seed = seed;
    cfg
}

#[test]
fn momentum_direction_beats_raw_on_most_rounds() {
    let toy = QuadraticToy { dim: 1 };
    for seed in 0..5 {
        let data = toy_dataset(&ToySpec::two_groups(), seed).unwrap();
        let tr = Trainer::new(toy_config(seed), &toy, &data)
            .unwrap()
            .train(TrainOptions { eval: None, record_theta: true })
            .unwrap();
        // the last step ends at the final iterate, where the direction is undefined
        let steps = &tr.theta_steps[..tr.theta_steps.len() - 1];
        let c = momentum_direction_diagnostic(steps, tr.final_state.theta.as_slice()).unwrap();
        let share = c.iter().filter(|d| d.momentum >= d.raw).count() as f64 / c.len() as f64;
        assert!(share >= 0.6, "seed {seed}: momentum at least as aligned on {share:.3} of rounds");
    }
}

#[test]
fn max_group_loss_approaches_the_minimax_value() {
    let toy = QuadraticToy { dim: 1 };
    let data = toy_dataset(&ToySpec::two_groups(), 3).unwrap();
    let risks = group_risks(&data);
    let (_, optimum) = grid_minimax_2d(&risks, -2.0, 2.0, 1e-4, 1e-3);
    let tr = Trainer::new(toy_config(3), &toy, &data)
        .unwrap()
        .train(TrainOptions { eval: None, record_theta: true })
        .unwrap();
    let at = |k: usize| max_group_risk(&risks, &tr.theta_steps[k].after) - optimum;
    assert!(at(0) > at(299));
    assert!(at(299) / optimum < 0.05);
    // more weight ends on the group farther from the start: the smaller group at +1
    let lambda = &tr.records.last().unwrap().lambda;
    assert_eq!(lambda.len(), 2);
    assert!(lambda[1] > 0.25);
}
