use super::*;
use crate::datasets::OfflineDataset;
use crate::numeric::fd::{central_diff, grad_floor, max_rel_error};
use crate::numeric::{Activation, MlpParams};

const FD_H: f64 = 1e-6;

struct Instance {
    agent: Agent,
    states: Vec<f64>,
    actions: Vec<f64>,
    noise: Vec<f64>,
    degrees: Vec<f64>,
    n: usize,
}

fn instance(algo: Algorithm, seed: u64) -> Instance {
    let mut rng = Rng::new(seed);
    let agent = Agent::new(algo, AdapterConfig::default(), 4, 2, &[6, 5], 1.0, &mut rng).unwrap();
    let n = 5;
    let states: Vec<f64> = (0..n * 4).map(|_| rng.normal()).collect();
    let actions: Vec<f64> = (0..n * 2).map(|_| rng.uniform_in(-0.9, 0.9)).collect();
    let noise: Vec<f64> = (0..agent.actor.noise_len(n)).map(|_| rng.normal()).collect();
    let degrees: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    Instance {
        agent,
        states,
        actions,
        noise,
        degrees,
        n,
    }
}

fn fd_policy_check(algo: Algorithm, seed: u64) -> f64 {
    let inst = instance(algo, seed);
    let a = &inst.agent;
    let terms = a.policy_terms(&inst.states, &inst.actions, inst.n, &inst.noise).unwrap();
    let analytic = terms.actor_grad(&a.actor, &inst.degrees).unwrap();
    let numeric = central_diff(a.actor.net.as_slice(), FD_H, |x| {
        let mut actor = a.actor.clone();
        actor.net.as_mut_slice().copy_from_slice(x);
        policy_terms(
            algo,
            &a.cfg,
            &actor,
            &a.critics,
            &inst.states,
            &inst.actions,
            inst.n,
            &inst.noise,
            Some(terms.lambda_hat),
        )?
        .loss(&inst.degrees)
    })
    .unwrap();
    max_rel_error(analytic.as_slice(), &numeric, grad_floor(analytic.as_slice()))
}

#[test]
fn policy_gradients_match_finite_differences() {
    for algo in Algorithm::ALL {
        for seed in 0..13 {
            let err = fd_policy_check(algo, seed);
            assert!(err < 1e-4, "{algo:?} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn decomposition_is_improvement_plus_weighted_constraint() {
    for algo in Algorithm::ALL {
        let inst = instance(algo, 11);
        let t = inst
            .agent
            .policy_terms(&inst.states, &inst.actions, inst.n, &inst.noise)
            .unwrap();
        let full = t.actor_grad(&inst.agent.actor, &inst.degrees).unwrap();
        let zeros = vec![0.0; inst.n];
        let mut recomposed = t.actor_grad(&inst.agent.actor, &zeros).unwrap();
        let per = t.constraint_param_grads(&inst.agent.actor).unwrap();
        for (g, d) in per.iter().zip(&inst.degrees) {
            recomposed.add_scaled(g, d / inst.n as f64);
        }
        let err = max_rel_error(full.as_slice(), recomposed.as_slice(), 1e-12);
        assert!(err < 1e-9, "{algo:?}: {err}");
    }
}

#[test]
fn td3bc_zero_degrees_is_pure_q_maximization() {
    let inst = instance(Algorithm::Td3Bc, 2);
    let a = &inst.agent;
    let t = a.policy_terms(&inst.states, &inst.actions, inst.n, &[]).unwrap();
    let g0 = t.output_grad(&vec![0.0; inst.n]).unwrap();
    let acts = a.actor.mean_actions(t.cache.output(), inst.n);
    let (_, gq) = q_with_action_grad(&a.critics.q1, &inst.states, &acts, inst.n, 2).unwrap();
    for k in 0..inst.n * 2 {
        assert!((g0[k] + t.lambda_hat * gq[k] / inst.n as f64).abs() < 1e-14);
    }
}

#[test]
fn td3bc_lambda_zero_full_degree_is_behavior_cloning() {
    let mut inst = instance(Algorithm::Td3Bc, 3);
    inst.agent.cfg.lambda = 0.0;
    let a = &inst.agent;
    let t = a.policy_terms(&inst.states, &inst.actions, inst.n, &[]).unwrap();
    let g = t.actor_grad(&a.actor, &vec![1.0; inst.n]).unwrap();
    let bc = guide_grad_average(&a.actor, &inst.states, &inst.actions, inst.n).unwrap();
    assert!(max_rel_error(g.as_slice(), bc.as_slice(), 1e-12) < 1e-12);
}

#[test]
fn degrees_are_checked() {
    let inst = instance(Algorithm::Td3Bc, 4);
    let t = inst
        .agent
        .policy_terms(&inst.states, &inst.actions, inst.n, &[])
        .unwrap();
    assert!(t.loss(&[0.5, 0.5, 0.5, 0.5, 1.5]).is_err());
    assert!(t.loss(&[0.5, 0.5, 0.5, 0.5, -0.1]).is_err());
    assert!(t.loss(&[0.5; 4]).is_err());
}

#[test]
fn sacbc_deterministic_limit_approaches_td3bc() {
    let mut rng = Rng::new(21);
    let cfg = AdapterConfig {
        alpha: 0.0,
        ..Default::default()
    };
    let det = Agent::new(Algorithm::Td3Bc, cfg.clone(), 4, 2, &[6], 1.0, &mut rng).unwrap();
    let mut sac = Agent::new(Algorithm::SacBc, cfg, 4, 2, &[6], 1.0, &mut rng).unwrap();
    // same critic in both slots, mean head copied from the deterministic net
    sac.critics.q1 = det.critics.q1.clone();
    sac.critics.q2 = det.critics.q1.clone();
    {
        let (w0, b0) = det.actor.net.layer(0);
        let (w0, b0) = (w0.to_vec(), b0.to_vec());
        let (sw0, sb0) = sac.actor.net.layer_mut(0);
        sw0.copy_from_slice(&w0);
        sb0.copy_from_slice(&b0);
        let (w1, b1) = det.actor.net.layer(1);
        let (w1, b1) = (w1.to_vec(), b1.to_vec());
        let (sw1, sb1) = sac.actor.net.layer_mut(1);
        sw1[..w1.len()].copy_from_slice(&w1);
        sw1[w1.len()..].iter_mut().for_each(|w| *w = 0.0);
        sb1[..2].copy_from_slice(&b1);
        sb1[2..].iter_mut().for_each(|b| *b = LOG_STD_MIN);
    }
    let n = 8;
    let states: Vec<f64> = (0..n * 4).map(|_| rng.normal()).collect();
    let actions: Vec<f64> = (0..n * 2).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let noise: Vec<f64> = (0..n * 2).map(|_| rng.normal()).collect();
    let deg = vec![0.7; n];
    let ld = det.policy_terms(&states, &actions, n, &[]).unwrap().loss(&deg).unwrap();
    let ls = sac.policy_terms(&states, &actions, n, &noise).unwrap().loss(&deg).unwrap();
    assert!((ld - ls).abs() < 1e-2 * ld.abs().max(1.0), "{ld} vs {ls}");
}

#[test]
fn large_entropy_weight_pushes_log_std_up() {
    let mut inst = instance(Algorithm::SacBc, 6);
    inst.agent.cfg.alpha = 100.0;
    // narrow policy: the squashing Jacobian term is second order in σ
    let net = &mut inst.agent.actor.net;
    let (w, b) = net.layer_mut(net.num_layers() - 1);
    let cols = w.len() / 4;
    w[2 * cols..].iter_mut().for_each(|v| *v = 0.0);
    b[2..].iter_mut().for_each(|v| *v = -2.0);
    let t = inst
        .agent
        .policy_terms(&inst.states, &inst.actions, inst.n, &inst.noise)
        .unwrap();
    let g = t.output_grad(&vec![0.0; inst.n]).unwrap();
    let ls_grad: f64 = (0..inst.n).map(|k| g[k * 4 + 2] + g[k * 4 + 3]).sum();
    assert!(ls_grad < 0.0, "descent should raise log-std, grad {ls_grad}");
}

#[test]
fn iql_zero_betas_give_zero_gradient() {
    let inst = instance(Algorithm::Iql, 7);
    let t = inst
        .agent
        .policy_terms(&inst.states, &inst.actions, inst.n, &inst.noise)
        .unwrap();
    let g = t.actor_grad(&inst.agent.actor, &vec![0.0; inst.n]).unwrap();
    assert!(g.as_slice().iter().all(|v| *v == 0.0));
}

#[test]
fn iql_equal_q_and_v_reduces_to_likelihood_cloning() {
    let mut inst = instance(Algorithm::Iql, 8);
    let c = &mut inst.agent.critics;
    for net in [&mut c.q1_target, &mut c.q2_target, c.v.as_mut().unwrap()] {
        net.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
    }
    let a = &inst.agent;
    let w = iql_weights(&a.cfg, &a.critics, &inst.states, &inst.actions, inst.n).unwrap();
    assert!(w.iter().all(|w| *w == 1.0));
    let t = a.policy_terms(&inst.states, &inst.actions, inst.n, &inst.noise).unwrap();
    let g = t.actor_grad(&a.actor, &vec![1.0; inst.n]).unwrap();
    let bc = guide_grad_average(&a.actor, &inst.states, &inst.actions, inst.n).unwrap();
    assert!(max_rel_error(g.as_slice(), bc.as_slice(), 1e-12) < 1e-10);
}

#[test]
fn iql_exponent_is_clamped() {
    let mut inst = instance(Algorithm::Iql, 9);
    let last = inst.agent.critics.q1_target.num_params() - 1;
    inst.agent.critics.q1_target.as_mut_slice()[last] = 1e6;
    inst.agent.critics.q2_target.as_mut_slice()[last] = 1e6;
    let a = &inst.agent;
    let w = iql_weights(&a.cfg, &a.critics, &inst.states, &inst.actions, inst.n).unwrap();
    assert!(w.iter().all(|w| (*w - IQL_EXP_CLAMP.exp()).abs() < 1e-6));
}

#[test]
fn cql_degree_endpoints() {
    let inst = instance(Algorithm::Cql, 10);
    let a = &inst.agent;
    let t = a.policy_terms(&inst.states, &inst.actions, inst.n, &inst.noise).unwrap();
    let l0 = t.loss(&vec![0.0; inst.n]).unwrap();
    let out = t.cache.output().to_vec();
    let (acts, logp) = a.actor.sample_actions(&out, inst.n, &inst.noise).unwrap();
    let mean_logp = logp.iter().sum::<f64>() / inst.n as f64;
    assert!((l0 - a.cfg.alpha * mean_logp).abs() < 1e-12);
    let q = a.critics.min_q(&inst.states, &acts, inst.n, false).unwrap();
    let l1 = t.loss(&vec![1.0; inst.n]).unwrap();
    let sac_form = (0..inst.n).map(|k| a.cfg.alpha * logp[k] - q[k]).sum::<f64>() / inst.n as f64;
    assert!((l1 - sac_form).abs() < 1e-12);
}

fn batch_from(
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
    next: &[Vec<f64>],
    rewards: &[f64],
    dones: &[bool],
) -> Batch {
    let mut ds = OfflineDataset::empty(states[0].len(), actions[0].len());
    for i in 0..states.len() {
        ds.push(&states[i], &actions[i], &next[i], rewards[i], dones[i]);
    }
    ds.gather(&(0..states.len()).collect::<Vec<_>>())
}

fn td3_agent(seed: u64) -> Agent {
    let mut rng = Rng::new(seed);
    Agent::new(Algorithm::Td3Bc, AdapterConfig::default(), 2, 1, &[16, 16], 1.0, &mut rng).unwrap()
}

#[test]
fn myopic_and_terminal_targets_are_rewards() {
    // With γ=0 (or done=1) every update regresses on r alone, so two agents
    // seeing different next states must end up identical.
    let run = |gamma: f64, done: bool, next: f64| {
        let mut agent = td3_agent(1);
        let batch = batch_from(
            &[vec![0.3, -0.2], vec![-0.5, 0.1]],
            &[vec![0.4], vec![-0.6]],
            &[vec![next, next], vec![-next, 2.0 * next]],
            &[-1.0, -0.25],
            &[done, done],
        );
        let hp = CriticHyper {
            gamma,
            ..Default::default()
        };
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            agent.critic_update(&batch, &hp, &mut rng).unwrap();
        }
        agent.critics.q1
    };
    assert_eq!(run(0.0, false, 0.5), run(0.0, false, -3.0));
    assert_eq!(run(0.99, true, 0.5), run(0.99, true, -3.0));
}

#[test]
fn self_loop_converges_to_geometric_fixed_point() {
    let mut agent = td3_agent(5);
    let a_star = 0.3;
    // actor outputs a constant action equal to the stored one
    let net = &mut agent.actor.net;
    let last = net.num_layers() - 1;
    net.layer_mut(last).0.iter_mut().for_each(|w| *w = 0.0);
    net.layer_mut(last).1[0] = f64::atanh(a_star);
    agent.actor_target = Some(agent.actor.clone());
    let s = vec![0.2, -0.4];
    let batch = batch_from(&[s.clone()], &[vec![a_star]], &[s.clone()], &[-1.0], &[false]);
    let hp = CriticHyper {
        gamma: 0.9,
        lr: 3e-3,
        policy_noise: 0.0,
        noise_clip: 0.5,
    };
    let mut rng = Rng::new(6);
    for _ in 0..6000 {
        agent.critic_update(&batch, &hp, &mut rng).unwrap();
        agent.critics.soft_update(0.05);
    }
    let q = q_values(&agent.critics.q1, &s, &[a_star], 1).unwrap()[0];
    let expected = -1.0 / (1.0 - 0.9);
    assert!((q - expected).abs() < 0.01 * expected.abs(), "q {q}");
}

fn fixed_value_net(seed: u64) -> (MlpParams, AdamState) {
    let mut rng = Rng::new(seed);
    let v = MlpParams::init_uniform(&[1, 8, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
    let opt = AdamState::for_params(&v);
    (v, opt)
}

#[test]
fn expectile_half_is_mean_and_point_nine_is_two_point_expectile() {
    let states = vec![0.5; 8];
    for (tau, targets, expected) in [
        (0.5, vec![1.0, 2.0, 3.0, 6.0, 1.0, 2.0, 3.0, 6.0], 3.0),
        (0.9, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0], 0.9),
    ] {
        let (mut v, mut opt) = fixed_value_net(3);
        for _ in 0..5000 {
            expectile_step(&mut v, &mut opt, &states, &targets, tau, 1e-2).unwrap();
        }
        let got = v.predict(&[0.5]).unwrap()[0];
        assert!((got - expected).abs() < 1e-3, "tau {tau}: {got}");
    }
}

#[test]
fn expectile_zero_residual_has_zero_gradient() {
    let (v, _) = fixed_value_net(4);
    let states = [0.1, 0.2, -0.3];
    let target = v.forward_batch(&states, 3).unwrap().into_output();
    let (loss, grad) = expectile_loss_grad(&v, &states, &target, 0.7).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.as_slice().iter().all(|g| *g == 0.0));
}

#[test]
fn critic_and_value_gradients_match_finite_differences() {
    let mut rng = Rng::new(30);
    let q = MlpParams::init_uniform(&[6, 5, 4, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
    let n = 4;
    let x: Vec<f64> = (0..n * 6).map(|_| rng.normal()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let sampled: Vec<f64> = (0..n * 3 * 6).map(|_| rng.normal()).collect();
    let (_, g) = bellman_loss_grad(&q, &x, &y).unwrap();
    let num = central_diff(q.as_slice(), FD_H, |p| {
        let mut q = q.clone();
        q.as_mut_slice().copy_from_slice(p);
        Ok(bellman_loss_grad(&q, &x, &y)?.0)
    })
    .unwrap();
    assert!(max_rel_error(g.as_slice(), &num, grad_floor(g.as_slice())) < 1e-4);
    let (_, _, g) = cql_loss_grad(&q, &x, &y, &sampled, 3, 2.0).unwrap();
    let num = central_diff(q.as_slice(), FD_H, |p| {
        let mut q = q.clone();
        q.as_mut_slice().copy_from_slice(p);
        let (l, pen, _) = cql_loss_grad(&q, &x, &y, &sampled, 3, 2.0)?;
        Ok(l + 2.0 * pen)
    })
    .unwrap();
    assert!(max_rel_error(g.as_slice(), &num, grad_floor(g.as_slice())) < 1e-4);
    let v = MlpParams::init_uniform(&[4, 5, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
    let s: Vec<f64> = (0..n * 4).map(|_| rng.normal()).collect();
    let (_, g) = expectile_loss_grad(&v, &s, &y, 0.7).unwrap();
    let num = central_diff(v.as_slice(), FD_H, |p| {
        let mut v = v.clone();
        v.as_mut_slice().copy_from_slice(p);
        Ok(expectile_loss_grad(&v, &s, &y, 0.7)?.0)
    })
    .unwrap();
    assert!(max_rel_error(g.as_slice(), &num, grad_floor(g.as_slice())) < 1e-4);
}

#[test]
fn cql_penalty_two_action_arithmetic() {
    // Q(s, a1) = 1, Q(s, a2) = 3, data action is a1
    let (pen, gs, gd) = cql_penalty(&[1.0, 3.0], &[1.0], 2, 1.0);
    let expected = (1f64.exp() + 3f64.exp()).ln() - 1.0;
    assert!((pen - expected).abs() < 1e-14);
    let p2 = 3f64.exp() / (1f64.exp() + 3f64.exp());
    assert!((gs[1] - p2).abs() < 1e-14 && (gs[0] - (1.0 - p2)).abs() < 1e-14);
    assert_eq!(gd, vec![-1.0]);
}

fn cql_agent_and_batch(weight: f64) -> (Agent, Batch) {
    let mut rng = Rng::new(40);
    let cfg = AdapterConfig {
        min_q_weight: weight,
        ..Default::default()
    };
    let agent = Agent::new(Algorithm::Cql, cfg, 2, 1, &[16, 16], 1.0, &mut rng).unwrap();
    let n = 16;
    let states: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect();
    let actions: Vec<Vec<f64>> = states.iter().map(|s| vec![(0.5 * s[0]).tanh()]).collect();
    let next: Vec<Vec<f64>> = states.iter().map(|s| vec![0.9 * s[0], 0.9 * s[1]]).collect();
    let rewards: Vec<f64> = states.iter().map(|s| -(s[0] * s[0])).collect();
    let batch = batch_from(&states, &actions, &next, &rewards, &vec![false; n]);
    (agent, batch)
}

#[test]
fn zero_min_q_weight_is_plain_soft_bellman() {
    let (mut cql, batch) = cql_agent_and_batch(0.0);
    let mut sac = cql.clone();
    sac.algo = Algorithm::SacBc;
    let hp = CriticHyper::default();
    let (mut r1, mut r2) = (Rng::new(1), Rng::new(1));
    for _ in 0..5 {
        cql.critic_update(&batch, &hp, &mut r1).unwrap();
        sac.critic_update(&batch, &hp, &mut r2).unwrap();
    }
    assert_eq!(cql.critics, sac.critics);
}

#[test]
fn cql_is_conservative_on_unseen_actions() {
    let (mut agent, batch) = cql_agent_and_batch(5.0);
    let hp = CriticHyper {
        lr: 1e-3,
        ..Default::default()
    };
    let mut rng = Rng::new(2);
    for _ in 0..500 {
        agent.critic_update(&batch, &hp, &mut rng).unwrap();
        agent.soft_update_targets(5e-3);
    }
    let n = batch.len;
    let q_data = agent.critics.min_q(&batch.states, &batch.actions, n, false).unwrap();
    let mut q_rand = 0.0;
    for _ in 0..20 {
        let a: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        q_rand += agent.critics.min_q(&batch.states, &a, n, false).unwrap().iter().sum::<f64>();
    }
    let mean_rand = q_rand / (20 * n) as f64;
    let mean_data = q_data.iter().sum::<f64>() / n as f64;
    assert!(mean_rand <= mean_data, "random {mean_rand} vs data {mean_data}");
}

#[test]
fn pure_cloning_fits_a_small_dataset() {
    let mut rng = Rng::new(50);
    let cfg = AdapterConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let mut agent = Agent::new(Algorithm::Td3Bc, cfg, 4, 2, &[32, 32], 1.0, &mut rng).unwrap();
    let n = 32;
    let states: Vec<f64> = (0..n * 4).map(|_| rng.normal()).collect();
    let actions: Vec<f64> = (0..n)
        .flat_map(|k| {
            let s = &states[k * 4..k * 4 + 4];
            [(0.5 * s[0] - 0.3 * s[2]).tanh(), (0.4 * s[1] + 0.2 * s[3]).tanh()]
        })
        .collect();
    let ones = vec![1.0; n];
    for _ in 0..5000 {
        let t = agent.policy_terms(&states, &actions, n, &[]).unwrap();
        let g = t.actor_grad(&agent.actor, &ones).unwrap();
        agent.apply_actor_grad(&g, 1e-3).unwrap();
    }
    let mse = guide_loss(&agent.actor, &states, &actions, n).unwrap();
    assert!(mse < 1e-3, "mse {mse}");
}

#[test]
fn config_validation_lists_every_problem() {
    let cfg = AdapterConfig {
        expectile: 1.0,
        min_q_weight: -1.0,
        cql_actions: 1,
        ..Default::default()
    };
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("expectile") && msg.contains("min_q_weight") && msg.contains("cql_actions"));
}


#[test]
fn tanh_slope_keeps_precision_when_saturated() {
    use super::actor::tanh_slope;
    for z in [-2.0, 0.0, 0.3, 1.7] {
        let t: f64 = f64::tanh(z);
        assert!((tanh_slope(z) - (1.0 - t * t)).abs() < 1e-15);
    }
    // sech²(z) = 4e^{-2|z|} / (1 + e^{-2|z|})²
    for z in [9.0, -12.0, 18.0] {
        let e = (-2.0 * f64::abs(z)).exp();
        let exact = 4.0 * e / ((1.0 + e) * (1.0 + e));
        assert!((tanh_slope(z) / exact - 1.0).abs() < 1e-13, "{z}");
    }
}
