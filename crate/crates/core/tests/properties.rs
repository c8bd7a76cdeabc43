use perla_core::estimators::{marginalized_q, sample_counterfactual_joint_actions, PayoffCritic};
use perla_core::nn::{AdamState, MlpCritic};
use perla_core::policy::{softmax, SoftmaxPolicy, StochasticPolicy};
use perla_core::rng::SeededRng;
use proptest::prelude::*;

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 2..=max_len)
}

proptest! {
    #[test]
    fn score_has_zero_mean_under_the_policy(l in logits(8)) {
        let obs = [0.25];
        let mut p = SoftmaxPolicy::new(l.len());
        p.set_logits(&obs, l.clone()).unwrap();
        let dist = p.action_probabilities(&obs).unwrap();
        let mut total = vec![0.0; l.len()];
        for a in 0..l.len() {
            let g = p.log_prob_gradient(&obs, a).unwrap().flatten();
            for (t, gi) in total.iter_mut().zip(g) {
                *t += dist.prob(a) * gi;
            }
        }
        for t in total {
            prop_assert!(t.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_constant_shift(l in logits(10), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
        let a = softmax(&l, 1.0).unwrap();
        let b = softmax(&shifted, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_is_bounded_by_lr(
        grads in prop::collection::vec(-1e3f64..1e3, 1..20),
        lr in 1e-5f64..1.0,
    ) {
        let mut params = vec![0.0; grads.len()];
        let mut adam = AdamState::new(grads.len(), lr);
        adam.step(&mut params, &grads).unwrap();
        for (p, g) in params.iter().zip(&grads) {
            prop_assert!(p.abs() <= lr * (1.0 + 1e-12));
            prop_assert!(*g == 0.0 || p.signum() == -g.signum());
        }
    }

    #[test]
    fn critic_gradient_matches_finite_differences(seed in 0u64..1000, dim in 1usize..5) {
        let mut rng = SeededRng::new(seed, 3);
        let net = MlpCritic::new(dim, &[5], &mut rng);
        let x: Vec<f64> = (0..dim).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let g = net.backward(&x, 1.0).unwrap();
        let h = 1e-6;
        for p in 0..net.n_params() {
            let eval = |d: f64| {
                let mut n = net.clone();
                n.params_mut()[p] += d;
                n.forward(&x).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let curvature = (eval(h) - 2.0 * eval(0.0) + eval(-h)).abs();
            if curvature < 1e-10 {
                prop_assert!((g[p] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn counterfactual_samples_keep_own_action(
        seed in 0u64..10_000,
        n_agents in 2usize..6,
        agent_pick in 0usize..6,
        k in 1usize..20,
    ) {
        let agent = agent_pick % n_agents;
        let joint_policy = vec![SoftmaxPolicy::new(4); n_agents];
        let obs = vec![vec![0.0]; n_agents];
        let mut rng = SeededRng::new(seed, 0);
        let own = seed as usize % 4;
        let s = sample_counterfactual_joint_actions(&joint_policy, &obs, agent, own, k, &mut rng).unwrap();
        prop_assert_eq!(s.k(), k);
        for j in 0..k {
            let joint = s.joint(j, own);
            prop_assert_eq!(joint.len(), n_agents);
            prop_assert_eq!(joint[agent], own);
            prop_assert!(joint.iter().all(|&a| a < 4));
        }
    }

    #[test]
    fn marginalised_constant_critic_is_exact(seed in 0u64..1000, c in -10.0f64..10.0, k in 1usize..30) {
        let joint_policy = vec![SoftmaxPolicy::new(3); 3];
        let obs = vec![vec![0.0]; 3];
        let mut rng = SeededRng::new(seed, 0);
        let s = sample_counterfactual_joint_actions(&joint_policy, &obs, 1, 2, k, &mut rng).unwrap();
        let critic = PayoffCritic(move |_: &[usize]| Ok(c));
        let q = marginalized_q(&critic, &[0.0], 2, &s).unwrap();
        prop_assert!((q - c).abs() < 1e-12);
    }
}
