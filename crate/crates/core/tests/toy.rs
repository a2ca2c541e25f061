use perimeter_core::ppo::toy::{ToyEnv, ToyPlant};
use perimeter_core::ppo::{rollout, PpoConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ppo_approaches_the_best_threshold_rule() {
    let plant = ToyPlant::default();
    let config = PpoConfig {
        episodes: 1000,
        hidden: vec![64, 64],
        minibatch: 256,
        ..PpoConfig::default()
    };
    let (best, _) = plant.best_threshold_return(config.gamma);
    let mut env = ToyEnv::new(plant);
    let mut trainer = Trainer::new(config.clone(), 2, 0);
    trainer.train(&mut env, None, |_| Ok(())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let traj = rollout(&mut env, 0, &trainer.state.best, &mut rng, true, 1000).unwrap();
    let ret = traj.discounted_return(config.gamma);
    assert!(ret >= 0.9 * best, "return {ret:.4} vs optimum {best:.4}");
}

#[test]
fn training_resumes_to_the_same_state() {
    let config = PpoConfig {
        episodes: 100,
        batch_episodes: 10,
        hidden: vec![8],
        minibatch: 64,
        ..PpoConfig::default()
    };
    let mut env = ToyEnv::new(ToyPlant::default());
    let mut whole = Trainer::new(config.clone(), 2, 3);
    whole.train(&mut env, None, |_| Ok(())).unwrap();

    let mut first = Trainer::new(config.clone(), 2, 3);
    first.train(&mut env, Some(4), |_| Ok(())).unwrap();
    let saved = serde_json::to_string(&first.state).unwrap();
    let mut second = Trainer::resume(config, 3, serde_json::from_str(&saved).unwrap());
    second.train(&mut env, None, |_| Ok(())).unwrap();
    assert_eq!(whole.state, second.state);
}
