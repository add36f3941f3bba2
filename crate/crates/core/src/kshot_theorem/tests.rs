use super::*;
use crate::backbone::{BackboneConfig, BackboneParams};
use crate::diffusion::{forward_noise, make_schedule, sample};
use crate::metrics::ssd;
use crate::rng::{self, Rng};
use proptest::prelude::*;

fn sched() -> NoiseSchedule {
    make_schedule(6, 0.01, 0.3).unwrap()
}

fn normals(k: usize, shape: &[usize], r: &mut Rng) -> Vec<Tensor> {
    (0..k).map(|_| rng::standard_normal(shape, r)).collect()
}

fn random_simplex(k: usize, r: &mut Rng) -> Vec<f64> {
    let raw = rng::uniform(&[k], 0.0, 1.0, r);
    let total = raw.sum();
    raw.data().iter().map(|v| v / total).collect()
}

fn small_model(seed: u64) -> BackboneParams {
    let mut config = BackboneConfig::toy(2);
    config.width = 6;
    BackboneParams::init(&config, &mut rng::seeded(seed)).unwrap()
}

#[test]
fn one_shot_is_plain_sample() {
    let p = small_model(1);
    let x_bar = rng::standard_normal(&[2, 2, 16], &mut rng::seeded(2));
    let a = kshot_average(&p, &x_bar, &sched(), 1, 77).unwrap();
    let b = sample(&p, &x_bar, &sched(), &mut rng::seeded(77)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identical_shots_average_to_the_shot() {
    let p = small_model(3);
    let x_bar = rng::standard_normal(&[1, 2, 16], &mut rng::seeded(4));
    let e = shots_from_seeds(&p, &x_bar, &sched(), &[9, 9, 9]).unwrap();
    assert!(e.mean().unwrap().max_abs_diff(&e.shots[0]).unwrap() < 1e-12);
}

#[test]
fn averaged_ssd_never_exceeds_worst_shot() {
    let p = small_model(5);
    let mut r = rng::seeded(6);
    let truth = rng::standard_normal(&[2, 2, 16], &mut r);
    let e = kshot_ensemble(&p, &truth, &sched(), 4, 8).unwrap();
    let worst = e.shots.iter().map(|s| ssd(&truth, s).unwrap()).fold(0.0, f64::max);
    let mean_ssd = e.shots.iter().map(|s| ssd(&truth, s).unwrap()).sum::<f64>() / 4.0;
    let avg = ssd(&truth, &e.mean().unwrap()).unwrap();
    assert!(avg <= mean_ssd + 1e-12 && mean_ssd <= worst);
}

#[test]
fn shots_differ_across_streams() {
    let p = small_model(7);
    let x_bar = rng::standard_normal(&[1, 2, 16], &mut rng::seeded(8));
    let e = kshot_ensemble(&p, &x_bar, &sched(), 2, 5).unwrap();
    assert_ne!(e.shots[0], e.shots[1]);
}

#[test]
fn convex_combination_degenerate_cases() {
    let mut r = rng::seeded(10);
    let x = rng::standard_normal(&[3, 8], &mut r);
    let z = rng::standard_normal(&[3, 8], &mut r);
    let eps = normals(4, &[3, 8], &mut r);
    assert_eq!(verify_convex_combination(&x, &eps[..1], &[1.0], 3, &sched(), &z).unwrap(), 0.0);
    assert_eq!(verify_convex_combination(&x, &eps, &[0.0, 0.0, 1.0, 0.0], 3, &sched(), &z).unwrap(), 0.0);
    assert!(verify_convex_combination(&x, &eps, &[0.5, 0.5, 0.5, -0.5], 3, &sched(), &z).is_err());
    assert!(verify_convex_combination(&x, &eps, &[0.2, 0.2, 0.2, 0.2], 3, &sched(), &z).is_err());
}

#[test]
fn convex_combination_random_k5() {
    let mut r = rng::seeded(11);
    for _ in 0..50 {
        let x = rng::standard_normal(&[2, 10], &mut r);
        let z = rng::standard_normal(&[2, 10], &mut r);
        let eps = normals(5, &[2, 10], &mut r);
        let w = random_simplex(5, &mut r);
        assert!(verify_convex_combination(&x, &eps, &w, 4, &sched(), &z).unwrap() <= 1e-10);
    }
}

#[test]
fn jensen_examples() {
    let p = Tensor::vector(&[1.5, -2.0]);
    let pts = vec![p.clone(), p.clone(), p];
    let target = Tensor::vector(&[0.0, 1.0]);
    assert_eq!(jensen_check(&pts, &[0.2, 0.3, 0.5], &target, &ConvexLoss::Mse).unwrap(), 0.0);
    let margin = jensen_check(
        &[Tensor::vector(&[0.0]), Tensor::vector(&[2.0])],
        &[0.5, 0.5],
        &Tensor::vector(&[1.0]),
        &ConvexLoss::Mse,
    )
    .unwrap();
    assert_eq!(margin, 1.0);
}

#[test]
fn sweep_single_expert() {
    let mut r = rng::seeded(12);
    let x = rng::standard_normal(&[8], &mut r);
    let z = rng::standard_normal(&[8], &mut r);
    let target = rng::standard_normal(&[8], &mut r);
    let s = sched();
    let ctx = StepContext { x_t: &x, t: 2, sched: &s, z: &z, target: &target };
    let res = weight_sweep(&normals(1, &[8], &mut r), &ctx, &ConvexLoss::Mse, 0.05, None).unwrap();
    assert_eq!(res.best_weights, [1.0]);
    assert_eq!(res.best_loss, res.uniform_loss);
}

#[test]
fn sweep_finds_the_true_noise_expert() {
    let mut r = rng::seeded(13);
    let s = sched();
    let x0 = rng::standard_normal(&[2, 12], &mut r);
    let eps_true = rng::standard_normal(&[2, 12], &mut r);
    let z = rng::standard_normal(&[2, 12], &mut r);
    let x_t = forward_noise(&x0, 3, &eps_true, &s).unwrap();
    let target = reverse_step(&x_t, &eps_true, 3, &s, &z).unwrap();
    let mut experts = normals(3, &[2, 12], &mut r);
    experts[1] = eps_true;
    let ctx = StepContext { x_t: &x_t, t: 3, sched: &s, z: &z, target: &target };
    let alone = ctx.loss_at(&experts, &[0.0, 1.0, 0.0], &ConvexLoss::Mse).unwrap();
    for res in [0.5, 0.25, 0.1, 0.05] {
        let out = weight_sweep(&experts, &ctx, &ConvexLoss::Mse, res, None).unwrap();
        assert!(out.best_loss <= alone);
        assert_eq!(out.best_weights, [0.0, 1.0, 0.0]);
    }
}

#[test]
fn grid_sweep_matches_brute_force_k3() {
    let mut r = rng::seeded(14);
    let s = sched();
    for loss in [ConvexLoss::Mse, ConvexLoss::Mae] {
        let x = rng::standard_normal(&[16], &mut r);
        let z = rng::standard_normal(&[16], &mut r);
        let target = rng::standard_normal(&[16], &mut r);
        let experts = normals(3, &[16], &mut r);
        let ctx = StepContext { x_t: &x, t: 5, sched: &s, z: &z, target: &target };
        let out = weight_sweep(&experts, &ctx, &loss, 0.05, None).unwrap();
        let mut brute = f64::INFINITY;
        for i in 0..=20 {
            for j in 0..=(20 - i) {
                let w = [i as f64 / 20.0, j as f64 / 20.0, (20 - i - j) as f64 / 20.0];
                let fused = reverse_step(&x, &mix(&experts, &w).unwrap(), 5, &s, &z).unwrap();
                brute = brute.min(loss.eval(&fused.sub(&target).unwrap()));
            }
        }
        assert!((out.best_loss - brute).abs() <= 1e-12, "{} vs {brute}", out.best_loss);
        assert!(out.best_loss <= out.uniform_loss + 1e-12);
    }
}

#[test]
fn descent_improves_on_uniform_for_many_experts() {
    let mut r = rng::seeded(15);
    let s = sched();
    let x = rng::standard_normal(&[32], &mut r);
    let z = rng::standard_normal(&[32], &mut r);
    let target = rng::standard_normal(&[32], &mut r);
    let experts = normals(7, &[32], &mut r);
    let ctx = StepContext { x_t: &x, t: 6, sched: &s, z: &z, target: &target };
    let out = weight_sweep(&experts, &ctx, &ConvexLoss::Mse, 0.05, None).unwrap();
    assert!(out.best_loss < out.uniform_loss);
    assert!((out.best_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(out.best_weights.iter().all(|&w| w >= 0.0));
}

#[test]
fn count_sweep_is_monotone() {
    let mut r = rng::seeded(16);
    let s = sched();
    let x = rng::standard_normal(&[24], &mut r);
    let z = rng::standard_normal(&[24], &mut r);
    let target = rng::standard_normal(&[24], &mut r);
    let pool = normals(8, &[24], &mut r);
    let ctx = StepContext { x_t: &x, t: 4, sched: &s, z: &z, target: &target };
    let out = expert_count_sweep(&pool, &[1, 2, 4, 8], &ctx, &ConvexLoss::Mae, 0.05).unwrap();
    for w in out.windows(2) {
        assert!(w[1].1.best_loss <= w[0].1.best_loss);
    }
}

#[test]
fn simplex_projection() {
    assert_eq!(project_simplex(&[0.2, 0.3, 0.5]), [0.2, 0.3, 0.5]);
    assert_eq!(project_simplex(&[2.0, 0.0]), [1.0, 0.0]);
    let p = project_simplex(&[0.0, 0.0, 0.0]);
    assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    assert_eq!(simplex_grid(3, 2).len(), 6);
}

#[test]
fn uniform_fusion_equals_averaging_at_last_step() {
    let mut r = rng::seeded(17);
    let s = sched();
    let x1 = rng::standard_normal(&[3, 20], &mut r);
    let eps = normals(4, &[3, 20], &mut r);
    let zero = Tensor::zeros(&[3, 20]);
    let fused = reverse_step(&x1, &Tensor::mean_of(&eps).unwrap(), 1, &s, &zero).unwrap();
    let stepped: Vec<Tensor> = eps.iter().map(|e| reverse_step(&x1, e, 1, &s, &zero).unwrap()).collect();
    assert!(fused.max_abs_diff(&Tensor::mean_of(&stepped).unwrap()).unwrap() <= 1e-12);
}

#[test]
fn error_table_examples() {
    let truth = Tensor::from_vec(vec![1, 2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
    let shot = Tensor::from_vec(vec![1, 2, 3], vec![9.0, 9.0, 9.0, 1.5, 1.0, 3.0]).unwrap();
    let t = error_distribution(&truth, &[shot.clone()], &shot, 0, 1, "shot", "average").unwrap();
    assert_eq!(t.columns[0], [0.5, -1.0, 0.0]);
    assert_eq!(t.columns[0], t.columns[1]);
    let minus = truth.sub(&shot.sub(&truth).unwrap()).unwrap();
    let avg = Tensor::mean_of(&[shot.clone(), minus.clone()]).unwrap();
    let t = error_distribution(&truth, &[shot, minus], &avg, 0, 1, "shot", "average").unwrap();
    assert!(t.columns[2].iter().all(|&v| v == 0.0));
    assert_eq!(t.mean_gap(), 0.0);
    assert_eq!(t.to_csv().lines().next().unwrap(), "t,shot_0,shot_1,average");
    assert!(error_distribution(&truth, &[avg.clone()], &avg, 0, 2, "shot", "average").is_err());
}

#[test]
fn fixed_experts_cover_the_head() {
    let p = small_model(18);
    let x_bar = rng::standard_normal(&[1, 2, 16], &mut rng::seeded(19));
    let outs = fixed_expert_outputs(&p, &x_bar, &sched(), 3).unwrap();
    assert_eq!(outs.len(), p.head.num_experts());
}

proptest! {
    #[test]
    fn jensen_margin_nonnegative(seed in any::<u64>(), k in 1usize..7, mae in any::<bool>()) {
        let mut r = rng::seeded(seed);
        let pts = normals(k, &[5], &mut r);
        let target = rng::standard_normal(&[5], &mut r);
        let w = random_simplex(k, &mut r);
        let loss = if mae { ConvexLoss::Mae } else { ConvexLoss::Mse };
        prop_assert!(jensen_check(&pts, &w, &target, &loss).unwrap() >= -1e-12);
    }

    #[test]
    fn sweep_never_worse_than_uniform(seed in any::<u64>(), k in 1usize..7) {
        let mut r = rng::seeded(seed);
        let s = sched();
        let x = rng::standard_normal(&[6], &mut r);
        let z = rng::standard_normal(&[6], &mut r);
        let target = rng::standard_normal(&[6], &mut r);
        let experts = normals(k, &[6], &mut r);
        let ctx = StepContext { x_t: &x, t: 2, sched: &s, z: &z, target: &target };
        let out = weight_sweep(&experts, &ctx, &ConvexLoss::Mse, 0.1, None).unwrap();
        prop_assert!(out.best_loss <= out.uniform_loss + 1e-12);
    }
}
