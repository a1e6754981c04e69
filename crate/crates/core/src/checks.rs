//! Self-checks against independent oracles: finite differences, a naive
//! MMD, analytic divergences and a hand-written soft actor-critic step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critics::TargetCombiner;
use crate::data::Batch;
use crate::divergences::{
    estimate_kl_primal, mmd_squared, DivergenceKind, DualConfig, DualEstimator,
};
use crate::error::Result;
use crate::nn::Mlp;
use crate::optim::{soft_update, Adam, AdamConfig};
use crate::policies::TanhGaussianPolicy;
use crate::rng::{derive_seed, seeded, standard_normal, BracRng};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{AdaptiveAlpha, Algo, AlphaMode, Mode, Trainer, TrainerConfig};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Plain forward pass that also reports the ReLU activation pattern.
fn forward_with_pattern(net: &Mlp, x: &Tensor) -> (Tensor, Vec<bool>) {
    let p = net.params();
    let layers = p.len() / 2;
    let mut h = x.clone();
    let mut pattern = Vec::new();
    for l in 0..layers {
        let (w, b) = (&p[2 * l], &p[2 * l + 1]);
        let (rows, inp, out) = (h.rows(), w.rows(), w.cols());
        let mut next = vec![0.0; rows * out];
        for r in 0..rows {
            for j in 0..out {
                let mut acc = b.data()[j];
                for i in 0..inp {
                    acc += h.data()[r * inp + i] * w.data()[i * out + j];
                }
                next[r * out + j] = acc;
            }
        }
        if l + 1 < layers {
            for v in next.iter_mut() {
                pattern.push(*v > 0.0);
                *v = v.max(0.0);
            }
        }
        h = Tensor::from_vec(rows, out, next);
    }
    (h, pattern)
}

fn probe_loss(y: &Tensor, c: &[f64]) -> f64 {
    y.data().iter().zip(c.iter().cycle()).map(|(v, c)| c * v.tanh()).sum()
}

/// Largest relative error between reverse-mode parameter gradients and
/// central differences over `cases` random MLPs (hidden widths up to
/// `max_hidden`). Coordinates whose perturbation flips a ReLU are redrawn.
pub fn gradient_check(cases: usize, max_hidden: usize, coords_per_net: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let inp = rng.gen_range(1..=8);
        let depth = rng.gen_range(1..=2);
        let mut sizes = vec![inp];
        for d in 0..depth {
            // Make sure the largest allowed shape is exercised.
            let w = if case == 0 { max_hidden } else { rng.gen_range(1..=max_hidden) };
            sizes.push(if d == 0 { w } else { w.max(1) });
        }
        sizes.push(rng.gen_range(1..=4));
        let net = Mlp::new(&sizes, &mut rng)?;
        let x = standard_normal(4, inp, &mut rng);
        let c: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let y = net.forward_tape(&mut tape, &vars, xv)?;
        let t = tape.tanh(y);
        let cv = tape.constant(Tensor::from_vec(1, c.len(), c.clone()));
        let w = tape.mul_row(t, cv);
        let loss = tape.sum(w);
        let grads = vars.grads(&tape.backward(loss)?);

        let (_, base_pattern) = forward_with_pattern(&net, &x);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < coords_per_net && attempts < 50 * coords_per_net {
            attempts += 1;
            let pi = rng.gen_range(0..net.params().len());
            let k = rng.gen_range(0..net.params()[pi].numel());
            let mut up = net.clone();
            let mut down = net.clone();
            up.params_mut()[pi].data_mut()[k] += h;
            down.params_mut()[pi].data_mut()[k] -= h;
            let (yu, pu) = forward_with_pattern(&up, &x);
            let (yd, pd) = forward_with_pattern(&down, &x);
            if pu != base_pattern || pd != base_pattern {
                continue;
            }
            let fd = (probe_loss(&yu, &c) - probe_loss(&yd, &c)) / (2.0 * h);
            let g = grads[pi].data()[k];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(worst)
}

/// Biased squared MMD with the Laplacian kernel, by explicit double loops.
pub fn mmd_oracle(x: &Tensor, y: &Tensor, sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| (-a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>() / sigma).exp();
    let mean_k = |p: &Tensor, q: &Tensor| {
        let mut s = 0.0;
        for i in 0..p.rows() {
            for j in 0..q.rows() {
                s += k(p.row(i), q.row(j));
            }
        }
        s / (p.rows() * q.rows()) as f64
    };
    mean_k(x, x) - 2.0 * mean_k(x, y) + mean_k(y, y)
}

/// `(max |vectorized − oracle|, all self-distances exactly 0)`.
pub fn mmd_check(instances: usize, seed: u64) -> (f64, bool) {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    let mut self_zero = true;
    for _ in 0..instances {
        let (n, m, d) = (rng.gen_range(1..=32), rng.gen_range(1..=32), rng.gen_range(1..=8));
        let sigma = rng.gen_range(0.1..30.0);
        let x = standard_normal(n, d, &mut rng);
        let y = standard_normal(m, d, &mut rng).map(|v| 2.0 * v + 0.5);
        worst = worst.max((mmd_squared(&x, &y, sigma) - mmd_oracle(&x, &y, sigma)).abs());
        self_zero &= mmd_squared(&x, &x, sigma) == 0.0;
    }
    (worst, self_zero)
}

/// The combiner's worked examples: `({1, 3}, λ=0.75) → 1.5`, min → 1,
/// single member → itself.
pub fn combiner_check() -> Result<Vec<CheckResult>> {
    let pair = Tensor::from_vec(1, 2, vec![1.0, 3.0]);
    let w = TargetCombiner::weighted(0.75)?.combine(&pair)?.item();
    let m = TargetCombiner::min().combine(&pair)?.item();
    let single = Tensor::from_vec(3, 1, vec![-2.5, 0.0, 7.25]);
    let id_min = TargetCombiner::min().combine(&single)?;
    let id_w = TargetCombiner::weighted(0.75)?.combine(&single)?;
    Ok(vec![
        CheckResult::new("weighted 0.75 of {1,3}", w == 1.5, format!("{w}")),
        CheckResult::new("min of {1,3}", m == 1.0, format!("{m}")),
        CheckResult::new("k=1 identity", id_min == single && id_w == single, format!("{:?}", id_w.data())),
    ])
}

/// Monte-Carlo KL primal estimate between 1-D squashed Gaussians with
/// pre-squash N(0, 1) and N(1, 1) and shared bounds.
pub fn kl_primal_estimate(samples: usize, seed: u64) -> Result<f64> {
    let p = TanhGaussianPolicy::constant(1, &[4], vec![-1.0], vec![1.0], &[0.0], &[0.0])?;
    let b = TanhGaussianPolicy::constant(1, &[4], vec![-1.0], vec![1.0], &[1.0], &[0.0])?;
    let mut rng = seeded(seed);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, false);
    let s = tape.constant(Tensor::zeros(1, 1));
    let draws = p.sample_tape(&mut tape, &vars, s, samples, &mut rng)?;
    let est = estimate_kl_primal(&mut tape, &draws, s, &b, samples)?;
    Ok(tape.value(est).item())
}

/// Trains a fresh discriminator for `steps` steps on batches of `batch`
/// states (state fixed at 0), then averages the estimate over
/// `eval_samples` fresh pairs. `draw` yields `(policy, behavior)` actions.
pub fn dual_estimate(
    form: DivergenceKind,
    steps: usize,
    batch: usize,
    eval_samples: usize,
    seed: u64,
    draw: impl Fn(usize, &mut BracRng) -> (Tensor, Tensor),
) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut est = DualEstimator::new(form, 1, 1, DualConfig::default(), &mut rng)?;
    let states = Tensor::zeros(batch, 1);
    for step in 0..steps {
        let (pa, ba) = draw(batch, &mut rng);
        est.discriminator_step(&states, &pa, &ba, &mut rng, step as u64)?;
    }
    let (pa, ba) = draw(eval_samples, &mut rng);
    Ok(est.estimate(&Tensor::zeros(eval_samples, 1), &pa, &ba)?.mean())
}

/// KL dual between N(0, 1) and N(1, 1) draws.
pub fn kl_dual_gaussians(steps: usize, seed: u64) -> Result<f64> {
    dual_estimate(DivergenceKind::KlDual, steps, 256, 10_000, seed, |n, rng| {
        let p = standard_normal(n, 1, rng);
        let b = standard_normal(n, 1, rng).map(|v| v + 1.0);
        (p, b)
    })
}

/// Wasserstein dual between point masses at 0 and 1.
pub fn wasserstein_point_masses(steps: usize, seed: u64) -> Result<f64> {
    dual_estimate(DivergenceKind::Wasserstein, steps, 256, 10_000, seed, |n, _| {
        (Tensor::zeros(n, 1), Tensor::filled(n, 1, 1.0))
    })
}

/// Policy-regularization critic targets against value-penalty targets with
/// α = 0, for every divergence kind, from identical RNG states. Returns the
/// kinds whose targets differ in any bit.
pub fn mode_contract_check(seed: u64) -> Result<Vec<DivergenceKind>> {
    let mut rng = seeded(seed);
    let behavior = TanhGaussianPolicy::new(3, &[16], vec![-1.0; 2], vec![1.0; 2], &mut rng)?;
    let batch = random_batch(32, 3, 2, &mut rng);
    let mut bad = Vec::new();
    for (algo, kind) in [
        (Algo::MmdPr, DivergenceKind::Mmd),
        (Algo::KlPr, DivergenceKind::KlPrimal),
        (Algo::KldualPr, DivergenceKind::KlDual),
        (Algo::WPr, DivergenceKind::Wasserstein),
    ] {
        let mut pr = TrainerConfig::preset(algo, 10.0, 2);
        pr.policy_hidden = vec![16];
        pr.q_hidden = vec![16];
        pr.divergence.dual.hidden = vec![16];
        pr.seed = derive_seed(seed, &[kind as u64]);
        let mut vp = pr.clone();
        vp.mode = Mode::ValuePenalty;
        vp.alpha_mode = AlphaMode::Fixed { alpha: 0.0 };
        let t1 = Trainer::new(pr, &behavior)?.critic_targets(&batch)?;
        let t2 = Trainer::new(vp, &behavior)?.critic_targets(&batch)?;
        let same = t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            bad.push(kind);
        }
    }
    Ok(bad)
}

/// Runs `updates` adaptive-α steps with random divergences around ε and
/// returns `(direction rule held on every step, α stayed positive and finite)`.
pub fn adaptive_alpha_check(updates: usize, seed: u64) -> Result<(bool, bool)> {
    let mut rng = seeded(seed);
    let mut a = AdaptiveAlpha::new(1.0, 0.5, 0.01)?;
    let (mut direction, mut positive) = (true, true);
    for _ in 0..updates {
        let before = a.alpha();
        let d = 0.5 + rng.gen_range(-0.4..0.4);
        let after = a.update(d)?;
        direction &= if d > 0.5 {
            after > before
        } else if d < 0.5 {
            after < before
        } else {
            after == before
        };
        positive &= after > 0.0 && after.is_finite();
    }
    Ok((direction, positive))
}

/// A batch of Gaussian transitions with actions inside (-0.9, 0.9).
pub fn random_batch(n: usize, state_dim: usize, action_dim: usize, rng: &mut BracRng) -> Batch {
    Batch {
        states: standard_normal(n, state_dim, rng),
        actions: standard_normal(n, action_dim, rng).map(|x| 0.9 * x.tanh()),
        rewards: standard_normal(n, 1, rng),
        next_states: standard_normal(n, state_dim, rng),
        dones: Tensor::from_vec(n, 1, (0..n).map(|i| (i % 4 == 0) as u8 as f64).collect()),
    }
}

/// Textbook SAC state, updated by [`sac_reference_step`].
struct SacReference {
    policy: Mlp,
    q: Vec<Mlp>,
    q_target: Vec<Mlp>,
    policy_adam: Adam,
    q_adams: Vec<Adam>,
    log_alpha: f64,
    alpha_lr: f64,
    target_entropy: f64,
    gamma: f64,
    tau: f64,
    low: f64,
    high: f64,
}

/// Squashed-Gaussian sample and log-density written out directly:
/// `a = c·tanh(μ + σz) + m`, `log π = log N(u) − Σ log(c·(1 − tanh²u))`.
fn reference_sample(
    tape: &mut Tape,
    net: &Mlp,
    vars: &crate::nn::MlpVars,
    s: crate::tape::Var,
    z: &Tensor,
    low: f64,
    high: f64,
) -> Result<(crate::tape::Var, crate::tape::Var)> {
    let ad = z.cols();
    let out = net.forward_tape(tape, vars, s)?;
    let mu = tape.slice_cols(out, 0, ad);
    let ls = tape.slice_cols(out, ad, 2 * ad);
    let ls = tape.clamp(ls, -5.0, 2.0);
    let sigma = tape.exp(ls);
    let zv = tape.constant(z.clone());
    let eps = tape.mul(sigma, zv);
    let u = tape.add(mu, eps);
    let t = tape.tanh(u);
    let (c, m) = (0.5 * (high - low), 0.5 * (high + low));
    let a = tape.scale(t, c);
    let a = tape.add_scalar(a, m);
    // log N(u; μ, σ) = −z²/2 − log σ − log √(2π)
    let z2 = tape.constant(z.map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()));
    let logn = tape.sub(z2, ls);
    let t2 = tape.square(t);
    let one_minus = tape.neg(t2);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let jac = tape.log(one_minus);
    let jac = tape.add_scalar(jac, c.ln());
    let per = tape.sub(logn, jac);
    Ok((a, tape.sum_cols(per)))
}

fn reference_min_q(tape: &mut Tape, nets: &[Mlp], trainable: bool, sa: crate::tape::Var) -> Result<crate::tape::Var> {
    let mut acc = None;
    for n in nets {
        let v = n.bind(tape, trainable);
        let q = n.forward_tape(tape, &v, sa)?;
        acc = Some(match acc {
            None => q,
            Some(prev) => {
                // min(a, b) = b − relu(b − a)
                let d = tape.sub(q, prev);
                let r = tape.relu(d);
                tape.sub(q, r)
            }
        });
    }
    Ok(acc.expect("at least one critic"))
}

fn sac_reference_step(r: &mut SacReference, batch: &Batch, rng: &mut BracRng) -> Result<()> {
    let ad = batch.actions.cols();
    let alpha = r.log_alpha.exp();
    // Critic.
    let z_next = standard_normal(batch.len(), ad, rng);
    let target = {
        let mut tape = Tape::new();
        let pv = r.policy.bind(&mut tape, false);
        let s2 = tape.constant(batch.next_states.clone());
        let (a2, lp2) = reference_sample(&mut tape, &r.policy, &pv, s2, &z_next, r.low, r.high)?;
        let sa2 = tape.concat_cols(s2, a2);
        let qn = reference_min_q(&mut tape, &r.q_target, false, sa2)?;
        let qn = tape.value(qn).clone();
        let lp2 = tape.value(lp2).clone();
        Tensor::from_vec(
            batch.len(),
            1,
            (0..batch.len())
                .map(|i| {
                    let notdone = 1.0 - batch.dones.data()[i];
                    batch.rewards.data()[i] + r.gamma * notdone * (qn.data()[i] - alpha * lp2.data()[i])
                })
                .collect(),
        )
    };
    let sa = batch.states.concat_cols(&batch.actions);
    for (net, adam) in r.q.iter_mut().zip(r.q_adams.iter_mut()) {
        let mut tape = Tape::new();
        let v = net.bind(&mut tape, true);
        let x = tape.constant(sa.clone());
        let q = net.forward_tape(&mut tape, &v, x)?;
        let y = tape.constant(target.clone());
        let d = tape.sub(q, y);
        let d2 = tape.square(d);
        let loss = tape.mean(d2);
        let g = v.grads(&tape.backward(loss)?);
        adam.step(net.params_mut(), &g)?;
    }
    for (t, s) in r.q_target.iter_mut().zip(&r.q) {
        soft_update(t.params_mut(), s.params(), r.tau)?;
    }
    // Actor.
    let z = standard_normal(batch.len(), ad, rng);
    let mut tape = Tape::new();
    let pv = r.policy.bind(&mut tape, true);
    let s = tape.constant(batch.states.clone());
    let (a, lp) = reference_sample(&mut tape, &r.policy, &pv, s, &z, r.low, r.high)?;
    let sa = tape.concat_cols(s, a);
    let q = reference_min_q(&mut tape, &r.q, false, sa)?;
    let alp = tape.scale(lp, alpha);
    let per = tape.sub(alp, q);
    let loss = tape.mean(per);
    let mean_lp = tape.value(lp).mean();
    let g = pv.grads(&tape.backward(loss)?);
    r.policy_adam.step(r.policy.params_mut(), &g)?;
    // Temperature: descend −log α · (log π + H̄).
    r.log_alpha += r.alpha_lr * (mean_lp + r.target_entropy);
    Ok(())
}

/// Runs `steps` BRAC updates (value penalty, single-sample entropy
/// divergence) and the same number of reference SAC updates on one frozen
/// batch from identical initial parameters and noise; returns the largest
/// absolute difference over all policy, critic and target parameters and
/// the temperature.
pub fn sac_equivalence(steps: usize, seed: u64) -> Result<f64> {
    let (sd, ad) = (3, 2);
    let mut rng = seeded(seed);
    let behavior = TanhGaussianPolicy::new(sd, &[8], vec![-1.0; ad], vec![1.0; ad], &mut rng)?;
    let batch = random_batch(64, sd, ad, &mut rng);
    let mut cfg = TrainerConfig::preset(Algo::Sac, 0.0, ad);
    cfg.policy_hidden = vec![32, 32];
    cfg.q_hidden = vec![32, 32];
    cfg.policy_lr = 3e-4;
    cfg.q_lr = 3e-4;
    cfg.seed = derive_seed(seed, &[1]);
    let mut trainer = Trainer::new(cfg.clone(), &behavior)?;
    let (epsilon, dual_lr, initial_alpha) = match cfg.alpha_mode {
        AlphaMode::Adaptive {
            epsilon,
            dual_lr,
            initial_alpha,
        } => (epsilon, dual_lr, initial_alpha),
        AlphaMode::Fixed { .. } => unreachable!("SAC preset is adaptive"),
    };
    let policy = trainer.policy().trunk().clone();
    let q: Vec<Mlp> = trainer.critic().sources().to_vec();
    let mut reference = SacReference {
        policy_adam: Adam::new(AdamConfig::with_lr(cfg.policy_lr), policy.params()),
        q_adams: q.iter().map(|n| Adam::new(AdamConfig::with_lr(cfg.q_lr), n.params())).collect(),
        q_target: trainer.critic().targets().to_vec(),
        policy,
        q,
        log_alpha: initial_alpha.ln(),
        alpha_lr: dual_lr,
        target_entropy: -epsilon,
        gamma: cfg.gamma,
        tau: cfg.tau,
        low: -1.0,
        high: 1.0,
    };
    let mut ref_rng = trainer.rng_mut().clone();
    for _ in 0..steps {
        trainer.step_on_batch(&batch)?;
        sac_reference_step(&mut reference, &batch, &mut ref_rng)?;
    }
    let mut worst: f64 = 0.0;
    let mut cmp = |a: &Mlp, b: &Mlp| {
        for (x, y) in a.flat_params().iter().zip(b.flat_params()) {
            worst = worst.max((x - y).abs());
        }
    };
    cmp(trainer.policy().trunk(), &reference.policy);
    for (a, b) in trainer.critic().sources().iter().zip(&reference.q) {
        cmp(a, b);
    }
    for (a, b) in trainer.critic().targets().iter().zip(&reference.q_target) {
        cmp(a, b);
    }
    worst = worst.max((trainer.alpha() - reference.log_alpha.exp()).abs());
    // Both sides must have consumed the same noise.
    let probe = |r: &mut BracRng| r.gen::<u64>();
    if probe(trainer.rng_mut()) != probe(&mut ref_rng) {
        worst = f64::INFINITY;
    }
    Ok(worst)
}
