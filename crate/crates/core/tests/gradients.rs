use perimeter_core::nn::{Activation, DenseNet};
use perimeter_core::ppo::{actor_loss_grad, critic_loss_grad, log_prob, ActorCritic, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_net(rng: &mut ChaCha8Rng) -> DenseNet {
    let depth = rng.gen_range(1..=3);
    let mut sizes = vec![rng.gen_range(1..=6)];
    for _ in 0..depth {
        sizes.push(rng.gen_range(2..=12));
    }
    sizes.push(rng.gen_range(1..=3));
    let acts: Vec<Activation> = (0..sizes.len() - 1)
        .map(|_| match rng.gen_range(0..3) {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            _ => Activation::None,
        })
        .collect();
    let gains = vec![1.0; acts.len()];
    let mut net = DenseNet::orthogonal(&sizes, &acts, &gains, rng);
    for l in &mut net.layers {
        l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
    net
}

/// Weighted sum of outputs, the scalar used for the check.
fn loss(net: &DenseNet, x: &[f64], rows: usize, w: &[f64]) -> f64 {
    let c = net.forward_batch(x, rows).unwrap();
    c.output().iter().zip(w).map(|(y, w)| y * w).sum()
}

#[test]
fn backprop_matches_central_differences_on_random_nets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut net = random_net(&mut rng);
        let rows = rng.gen_range(1..=4);
        let x: Vec<f64> = (0..rows * net.input_size()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..rows * net.output_size()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cache = net.forward_batch(&x, rows).unwrap();
        let (grads, dx) = net.backward(&cache, &w).unwrap();

        for li in 0..net.layers.len() {
            for (pi, analytic) in [(0, &grads.weights[li]), (1, &grads.bias[li])] {
                for k in 0..analytic.len() {
                    let orig = if pi == 0 { net.layers[li].weights[k] } else { net.layers[li].bias[k] };
                    let set = |net: &mut DenseNet, v: f64| {
                        if pi == 0 {
                            net.layers[li].weights[k] = v;
                        } else {
                            net.layers[li].bias[k] = v;
                        }
                    };
                    set(&mut net, orig + H);
                    let up = loss(&net, &x, rows, &w);
                    set(&mut net, orig - H);
                    let down = loss(&net, &x, rows, &w);
                    set(&mut net, orig);
                    let numeric = (up - down) / (2.0 * H);
                    worst = worst.max(rel_err(analytic[k], numeric));
                }
            }
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += H;
            let mut xm = x.clone();
            xm[k] -= H;
            let numeric = (loss(&net, &xp, rows, &w) - loss(&net, &xm, rows, &w)) / (2.0 * H);
            worst = worst.max(rel_err(dx[k], numeric));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

fn samples(ac: &ActorCritic, rng: &mut ChaCha8Rng, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let state: Vec<f64> = (0..ac.state_dim()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mu = ac.mean(&state).unwrap();
            let raw = mu + rng.gen_range(-0.4..0.4);
            // Old policy differs a little so that ratios spread around 1.
            let old = log_prob(raw, mu + rng.gen_range(-0.05..0.05), ac.log_std + 0.05);
            Sample {
                state,
                raw_action: raw,
                old_log_prob: old,
                advantage: rng.gen_range(-2.0..2.0),
                target: rng.gen_range(-1.0..1.0),
            }
        })
        .collect()
}

#[test]
fn ppo_actor_and_critic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut ac = ActorCritic::new(3, &[8, 8], &mut rng);
    // Move the actor output off the ReLU kink and away from its initial scale.
    ac.actor.layers.last_mut().unwrap().weights.iter_mut().for_each(|w| *w *= 20.0);
    let data = samples(&ac, &mut rng, 40);
    let refs: Vec<&Sample> = data.iter().collect();
    // A wide clip keeps the finite difference away from the clip boundary.
    let clip = 10.0;
    let ent = 0.01;
    let g = actor_loss_grad(&ac, &refs, clip, ent).unwrap();
    let actor_loss = |ac: &ActorCritic| actor_loss_grad(ac, &refs, clip, ent).unwrap().loss;

    let mut worst: f64 = 0.0;
    for li in 0..ac.actor.layers.len() {
        for k in 0..ac.actor.layers[li].weights.len() {
            let orig = ac.actor.layers[li].weights[k];
            ac.actor.layers[li].weights[k] = orig + H;
            let up = actor_loss(&ac);
            ac.actor.layers[li].weights[k] = orig - H;
            let down = actor_loss(&ac);
            ac.actor.layers[li].weights[k] = orig;
            worst = worst.max(rel_err(g.grads.weights[li][k], (up - down) / (2.0 * H)));
        }
    }
    let orig = ac.log_std;
    ac.log_std = orig + H;
    let up = actor_loss(&ac);
    ac.log_std = orig - H;
    let down = actor_loss(&ac);
    ac.log_std = orig;
    worst = worst.max(rel_err(g.log_std_grad, (up - down) / (2.0 * H)));

    let (_, cg) = critic_loss_grad(&ac, &refs, 0.5).unwrap();
    for li in 0..ac.critic.layers.len() {
        for k in 0..ac.critic.layers[li].bias.len() {
            let orig = ac.critic.layers[li].bias[k];
            ac.critic.layers[li].bias[k] = orig + H;
            let up = critic_loss_grad(&ac, &refs, 0.5).unwrap().0;
            ac.critic.layers[li].bias[k] = orig - H;
            let down = critic_loss_grad(&ac, &refs, 0.5).unwrap().0;
            ac.critic.layers[li].bias[k] = orig;
            worst = worst.max(rel_err(cg.bias[li][k], (up - down) / (2.0 * H)));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn clipped_samples_contribute_no_mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ac = ActorCritic::new(2, &[6], &mut rng);
    let mut data = samples(&ac, &mut rng, 10);
    for s in &mut data {
        // Ratio far above 1 + clip with a positive advantage.
        let mu = ac.mean(&s.state).unwrap();
        s.raw_action = mu;
        s.old_log_prob = log_prob(mu, mu, ac.log_std) - 3.0;
        s.advantage = 1.0;
    }
    let refs: Vec<&Sample> = data.iter().collect();
    let g = actor_loss_grad(&ac, &refs, 0.2, 0.0).unwrap();
    assert_eq!(g.clip_fraction, 1.0);
    assert!(g.grads.slices().iter().all(|s| s.iter().all(|x| *x == 0.0)));
    assert_eq!(g.log_std_grad, 0.0);
}
