mod common;

use common::*;
use drl_core::model::{load_checkpoint, save_checkpoint, ModelError};
use drl_core::numerics::{softplus, Adam, AdamConfig, Session, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn zero_confounder_dims_match_ablation_bitwise() {
    let decon = tiny_model(3, 0, true);
    let alt = tiny_model(3, 2, false);
    assert_eq!(decon.store, alt.store);
    let batch = random_batch(1, 4, 3, 4);
    let tape = Tape::new();
    let (_, a) = decon
        .elbo_decon(&Session::new(&tape, &decon.store), &batch, &mut rng(9))
        .unwrap();
    let tape = Tape::new();
    let (_, b) = alt
        .elbo_alt(&Session::new(&tape, &alt.store), &batch, &mut rng(9))
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(b.kl_u, 0.0);
}

#[test]
fn variant_guards() {
    let alt = tiny_model(0, 2, false);
    let decon = tiny_model(0, 1, true);
    let batch = random_batch(1, 2, 3, 4);
    let tape = Tape::new();
    assert!(matches!(
        alt.elbo_decon(&Session::new(&tape, &alt.store), &batch, &mut rng(0)),
        Err(ModelError::Config(_))
    ));
    assert!(matches!(
        decon.elbo_alt(&Session::new(&tape, &decon.store), &batch, &mut rng(0)),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn kl_terms_nonnegative_and_action_term_removable() {
    let mut m = tiny_model(5, 1, true);
    let batch = random_batch(2, 5, 3, 4);
    for seed in 0..10 {
        let tape = Tape::new();
        let (_, bd) = m.elbo(&Session::new(&tape, &m.store), &batch, &mut rng(seed)).unwrap();
        assert!(bd.kl_u >= 0.0 && bd.kl_z1 >= 0.0 && bd.kl_z_transitions >= 0.0);
        let manual = bd.recon_x + bd.recon_a + bd.recon_r - bd.kl_u - bd.kl_z1 - bd.kl_z_transitions;
        assert!((bd.total - manual).abs() < 1e-9);
    }
    m.config.include_action_likelihood = false;
    let tape = Tape::new();
    let (_, bd) = m.elbo(&Session::new(&tape, &m.store), &batch, &mut rng(0)).unwrap();
    assert_eq!(bd.recon_a, 0.0);
}

#[test]
fn frozen_posterior_at_prior_has_zero_kl_u() {
    let mut m = tiny_model(6, 1, true);
    for name in ["q_u.mean.w", "q_u.mean.b", "q_u.var.w"] {
        let id = m.store.find(name).unwrap();
        m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let id = m.store.find("q_u.var.b").unwrap();
    // softplus(ln(e − 1)) = 1
    let raw = (std::f64::consts::E - 1.0).ln();
    assert!((softplus(raw) - 1.0).abs() < 1e-15);
    m.store.get_mut(id).data_mut()[0] = raw;
    let batch = random_batch(3, 4, 3, 4);
    let tape = Tape::new();
    let (_, bd) = m.elbo(&Session::new(&tape, &m.store), &batch, &mut rng(1)).unwrap();
    assert!(bd.kl_u.abs() < 1e-12, "{}", bd.kl_u);
}

#[test]
fn auxiliary_terms_add_on_top_of_bound() {
    let m = tiny_model(7, 1, true);
    let batch = random_batch(4, 3, 3, 4);
    let tape = Tape::new();
    let s = Session::new(&tape, &m.store);
    let (loss, with_aux) = m.loss_drl(&s, &batch, &mut rng(2), 1.0).unwrap();
    let tape2 = Tape::new();
    let (_, plain) = m.elbo(&Session::new(&tape2, &m.store), &batch, &mut rng(2)).unwrap();
    assert_eq!(plain.aux_a, 0.0);
    assert!((loss.scalar() + plain.total + with_aux.aux_a + with_aux.aux_r).abs() < 1e-9);
    assert!((with_aux.total - plain.total - with_aux.aux_a - with_aux.aux_r).abs() < 1e-9);
}

fn loss_at(m: &drl_core::model::Model, batch: &drl_core::model::Batch, seed: u64) -> f64 {
    let tape = Tape::new();
    let s = Session::new(&tape, &m.store);
    m.loss_drl(&s, batch, &mut rng(seed), 1.0).unwrap().0.scalar()
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut m = tiny_model(8, 1, true);
    let batch = random_batch(5, 3, 3, 4);
    let tape = Tape::new();
    let grads = {
        let s = Session::new(&tape, &m.store);
        let (loss, _) = m.loss_drl(&s, &batch, &mut rng(11), 1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        s.collect(&g)
    };
    let mut pick = rng(12);
    let ids: Vec<_> = m.store.ids().collect();
    let h = 1e-5;
    // every parameter group once, plus random extra entries
    let mut checks: Vec<(usize, usize)> = ids.iter().map(|id| (id.index(), 0)).collect();
    for _ in 0..20 {
        let p = pick.gen_range(0..ids.len());
        checks.push((p, pick.gen_range(0..m.store.get(ids[p]).numel())));
    }
    for (p, k) in checks {
        let id = ids[p];
        let orig = m.store.get(id).data()[k];
        m.store.get_mut(id).data_mut()[k] = orig + h;
        let up = loss_at(&m, &batch, 11);
        m.store.get_mut(id).data_mut()[k] = orig - h;
        let down = loss_at(&m, &batch, 11);
        m.store.get_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[p].data()[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        assert!(rel < 1e-3, "{}[{k}]: {analytic} vs {numeric}", m.store.name(id));
    }
}

#[test]
fn emission_and_reward_input_gradients() {
    let m = tiny_model(9, 1, true);
    let mut r = rng(3);
    for _ in 0..5 {
        let z0: Vec<f64> = (0..2).map(|_| r.gen_range(-1.0..1.0)).collect();
        let u0 = r.gen_range(-1.0..1.0);
        let a0 = r.gen_range(-1.0..1.0);
        let x = Tensor::row(&[0.2, 0.9, 0.4, 0.6]);
        let f = |z: &[f64], a: f64| {
            let tape = Tape::new();
            let s = Session::new(&tape, &m.store);
            let zv = tape.param(Tensor::row(z));
            let av = tape.param(Tensor::scalar(a));
            let uv = tape.constant(Tensor::scalar(u0));
            let lx = drl_core::numerics::gaussian_logpdf(s.constant(x.clone()), &m.gen_x(&s, zv, Some(uv)).unwrap()).unwrap();
            let lr = drl_core::numerics::gaussian_logpdf(s.constant(Tensor::scalar(0.3)), &m.gen_r(&s, zv, av, Some(uv)).unwrap()).unwrap();
            let total = lx.add(lr).unwrap();
            let v = total.scalar();
            let g = tape.backward(total).unwrap();
            (v, g.get(zv).unwrap().clone(), g.get(av).unwrap().data()[0])
        };
        let (_, gz, ga) = f(&z0, a0);
        let h = 1e-5;
        for j in 0..2 {
            let mut zp = z0.clone();
            zp[j] += h;
            let mut zm = z0.clone();
            zm[j] -= h;
            let num = (f(&zp, a0).0 - f(&zm, a0).0) / (2.0 * h);
            assert!((gz.data()[j] - num).abs() / num.abs().max(1e-4) < 1e-4);
        }
        let num = (f(&z0, a0 + h).0 - f(&z0, a0 - h).0) / (2.0 * h);
        assert!((ga - num).abs() / num.abs().max(1e-4) < 1e-4);
    }
}

#[test]
fn bound_sits_below_importance_estimate() {
    let batch = random_batch(21, 1, 3, 4);
    for draw in 0..20 {
        let m = tiny_model(100 + draw, 1, true);
        let mut r = rng(draw);
        let lw: Vec<f64> = (0..1000)
            .map(|_| m.log_weights(&batch, &mut r).unwrap().data()[0])
            .collect();
        let is = logmeanexp(&lw);
        let is_se = logmeanexp_se(&lw);
        let elbos: Vec<f64> = (0..200)
            .map(|k| {
                let tape = Tape::new();
                m.elbo(&Session::new(&tape, &m.store), &batch, &mut rng(10_000 + k))
                    .unwrap()
                    .1
                    .total
            })
            .collect();
        let (elbo, elbo_se) = mean_se(&elbos);
        let slack = 3.0 * (is_se * is_se + elbo_se * elbo_se).sqrt();
        assert!(elbo <= is + slack, "draw {draw}: elbo {elbo} > IS {is} + {slack}");
    }
}

#[test]
fn single_sample_bound_is_unbiased() {
    let m = tiny_model(31, 1, true);
    let batch = random_batch(22, 1, 3, 4);
    let closed: Vec<f64> = (0..1000)
        .map(|k| {
            let tape = Tape::new();
            m.elbo(&Session::new(&tape, &m.store), &batch, &mut rng(k)).unwrap().1.total
        })
        .collect();
    let mut r = rng(77);
    let sampled: Vec<f64> = (0..1000)
        .map(|_| m.log_weights(&batch, &mut r).unwrap().data()[0])
        .collect();
    let (a, sa) = mean_se(&closed);
    let (b, sb) = mean_se(&sampled);
    assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt(), "{a} vs {b}");
}

#[test]
fn fixed_batch_loss_decreases() {
    let mut m = tiny_model(41, 1, true);
    let batch = random_batch(23, 8, 3, 4);
    let mut adam = Adam::new(
        AdamConfig {
            lr: 1e-4,
            ..Default::default()
        },
        &m.store,
    );
    let mut prev = loss_at(&m, &batch, 5);
    let mut decreases = 0;
    for _ in 0..50 {
        let tape = Tape::new();
        let grads = {
            let s = Session::new(&tape, &m.store);
            let (loss, _) = m.loss_drl(&s, &batch, &mut rng(5), 1.0).unwrap();
            let g = tape.backward(loss).unwrap();
            s.collect(&g)
        };
        adam.step(&mut m.store, &grads).unwrap();
        let now = loss_at(&m, &batch, 5);
        if now < prev {
            decreases += 1;
        }
        prev = now;
    }
    assert!(decreases >= 45, "{decreases}");
}

#[test]
fn posterior_is_stateless_across_items() {
    let m = tiny_model(51, 2, true);
    let batch = random_batch(24, 4, 3, 4);
    let swapped = batch.select(&[1, 0, 2, 3]);
    let a = m.posterior_u_mean(&batch).unwrap().unwrap();
    let b = m.posterior_u_mean(&swapped).unwrap().unwrap();
    assert_eq!(a.row_slice(0), b.row_slice(1));
    assert_eq!(a.row_slice(1), b.row_slice(0));
    assert_eq!(a.row_slice(2), b.row_slice(2));
    let (_, var) = m.posterior_u(&batch).unwrap().unwrap();
    assert!(var.data().iter().all(|&v| v > 0.0));
    assert_eq!(var.shape(), &[4, 2]);
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let m = tiny_model(61, 1, true);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&p, &m).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.store, m.store);
    assert_eq!(back.config, m.config);
    let q = dir.path().join("m2.ckpt");
    save_checkpoint(&q, &back).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn reconstruction_and_rollout_shapes() {
    let m = tiny_model(71, 1, true);
    let batch = random_batch(25, 3, 3, 4);
    let rec = m.reconstruct(&batch, &mut rng(0)).unwrap();
    assert_eq!(rec.len(), 3);
    assert!(rec.iter().all(|t| t.shape() == [3, 4]));
    assert_eq!(rec, m.reconstruct(&batch, &mut rng(0)).unwrap());
    let frame = batch.x[0].select_rows(&[0]);
    let ro = m.counterfactual_rollout(&frame, None, 1, &mut rng(1)).unwrap();
    assert_eq!(ro.frames.len(), 1);
    assert!(ro.frames[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(matches!(
        m.counterfactual_rollout(&frame, None, 0, &mut rng(1)),
        Err(ModelError::Horizon)
    ));
    let long = m.counterfactual_rollout(&frame, Some(&[0.5; 200]), 200, &mut rng(1)).unwrap();
    assert!(long.frames.iter().all(|f| f.is_finite()));
    assert!(long.rewards.iter().all(|r| r.is_finite()));
}
