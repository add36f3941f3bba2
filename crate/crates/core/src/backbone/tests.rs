use super::checkpoint;
use super::*;
use crate::moe_blocks::param_gradcheck;
use crate::rng;
use crate::tensor_core::DEFAULT_STEP;

fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        channels: 2,
        width: 4,
        depth: 1,
        kernels: vec![3, 5],
        head_experts: 2,
        d_emb: 8,
        gate_mode: GateMode::Renormalized,
    }
}

#[test]
fn output_shape_matches_input() {
    let mut r = rng::seeded(1);
    let p = BackboneParams::init(&BackboneConfig::toy(3), &mut r).unwrap();
    let x = rng::standard_normal(&[2, 3, 64], &mut r);
    let c = rng::standard_normal(&[2, 3, 64], &mut r);
    let out = noise_estimate(&x, &c, 5, &p).unwrap();
    assert_eq!(out.shape(), &[2, 3, 64]);
    assert!(out.is_finite());
}

#[test]
fn zero_network_emits_zero() {
    let mut r = rng::seeded(2);
    let p = BackboneParams::zeros(&BackboneConfig::toy(3)).unwrap();
    let x = rng::standard_normal(&[2, 3, 32], &mut r);
    let out = noise_estimate(&x, &x, 3, &p).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn hand_traced_forward() {
    let config = BackboneConfig {
        channels: 1,
        width: 2,
        depth: 1,
        kernels: vec![1],
        head_experts: 1,
        d_emb: 4,
        gate_mode: GateMode::Renormalized,
    };
    let mut p = BackboneParams::zeros(&config).unwrap();
    let t3 = |v: &[f64]| Tensor::from_vec(vec![v.len(), 1, 1], v.to_vec()).unwrap();
    p.lift_xt.weight = t3(&[1.0, -1.0]);
    p.lift_xt.bias = Tensor::vector(&[0.0, 1.0]);
    p.lift_cond.weight = t3(&[2.0, 0.0]);
    p.lift_cond.bias = Tensor::vector(&[0.0, 0.5]);
    let identity = Tensor::from_vec(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let lv = &mut p.levels[0];
    // Zero gamma makes each normalized channel equal to its beta.
    lv.main.norm_beta = Tensor::vector(&[1.0, 2.0]);
    lv.main.gate_proj.weight = t3(&[1.0, 0.0]);
    lv.main.fuse.weight = identity.clone();
    lv.cond.norm_beta = Tensor::vector(&[-1.0, 0.5]);
    lv.cond.gate_proj.weight = t3(&[1.0, 0.0]);
    lv.cond.fuse.weight = identity;
    lv.bridge.film.bias = Tensor::vector(&[2.0, -1.0, 0.25, 0.0]);
    p.head.experts[0].weight = Tensor::from_vec(vec![1, 2, 1], vec![0.5, -1.0]).unwrap();
    p.head.experts[0].bias = Tensor::vector(&[0.1]);

    let x_t = [1.0, 2.0, 3.0, 4.0];
    let x_bar = [0.5, 0.0, -1.0, 2.0];
    let gelu_1 = 0.841_344_746_068_542_9;
    let gelu_m1 = -0.158_655_253_931_457_07;
    let expected: Vec<f64> = (0..4)
        .map(|i| {
            let h0 = x_t[i] + gelu_1 * 2.0;
            let h1 = 1.0 - x_t[i];
            let c0 = 2.0 * x_bar[i] + gelu_m1 * 0.5;
            let c1 = 0.5;
            let m0 = h0 + 2.0 * c0 + 0.25;
            let m1 = h1 - c1;
            0.5 * m0 - m1 + 0.1
        })
        .collect();
    let xt = Tensor::from_vec(vec![1, 1, 4], x_t.to_vec()).unwrap();
    let xb = Tensor::from_vec(vec![1, 1, 4], x_bar.to_vec()).unwrap();
    let out = noise_estimate(&xt, &xb, 7, &p).unwrap();
    for (a, b) in out.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{:?} vs {:?}", out.data(), expected);
    }
}

#[test]
fn deterministic() {
    let mut r = rng::seeded(3);
    let p = BackboneParams::init(&BackboneConfig::toy(2), &mut r).unwrap();
    let x = rng::standard_normal(&[2, 2, 40], &mut r);
    let c = rng::standard_normal(&[2, 2, 40], &mut r);
    let a = noise_estimate(&x, &c, 4, &p).unwrap();
    let b = noise_estimate(&x, &c, 4, &p).unwrap();
    assert_eq!(a.data(), b.data());
}

fn permute_channels(x: &Tensor, perm: &[usize]) -> Tensor {
    let (b, c, t) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(x.shape());
    for n in 0..b {
        for (new, &old) in perm.iter().enumerate() {
            let src = (n * c + old) * t;
            let dst = (n * c + new) * t;
            out.data_mut()[dst..dst + t].copy_from_slice(&x.data()[src..src + t]);
        }
    }
    out
}

fn permute_fuse(fuse: &Tensor, perm: &[usize], width: usize) -> Tensor {
    let cl = fuse.dim(0);
    let mut out = Tensor::zeros(fuse.shape());
    let idx = |c: usize, l: usize| c * width + l;
    for (ci, &oi) in perm.iter().enumerate() {
        for (cj, &oj) in perm.iter().enumerate() {
            for li in 0..width {
                for lj in 0..width {
                    out.data_mut()[idx(ci, li) * cl + idx(cj, lj)] = fuse.data()[idx(oi, li) * cl + idx(oj, lj)];
                }
            }
        }
    }
    out
}

#[test]
fn channel_permutation_commutes() {
    let mut r = rng::seeded(4);
    let mut config = BackboneConfig::toy(3);
    config.depth = 2;
    config.width = 6;
    let p = BackboneParams::init(&config, &mut r).unwrap();
    let x = rng::standard_normal(&[2, 3, 24], &mut r);
    let c = rng::standard_normal(&[2, 3, 24], &mut r);
    let perm = [2, 0, 1];
    let mut q = p.clone();
    for lv in &mut q.levels {
        for block in [&mut lv.main, &mut lv.cond] {
            block.fuse.weight = permute_fuse(&block.fuse.weight, &perm, 6);
            let b = block.fuse.bias.reshape(&[3, 6, 1]).unwrap();
            block.fuse.bias = permute_channels(&b, &perm).reshape(&[18]).unwrap();
        }
    }
    let lhs = noise_estimate(&permute_channels(&x, &perm), &permute_channels(&c, &perm), 6, &q).unwrap();
    let rhs = permute_channels(&noise_estimate(&x, &c, 6, &p).unwrap(), &perm);
    assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let mut r = rng::seeded(5);
    let p = BackboneParams::init(&tiny_config(), &mut r).unwrap();
    let x_t = rng::standard_normal(&[1, 2, 16], &mut r);
    let x_bar = rng::standard_normal(&[1, 2, 16], &mut r);
    let eps = rng::standard_normal(&[1, 2, 16], &mut r);
    let mut worst = 0.0f64;
    for name in p.names() {
        let err = param_gradcheck(&p, &name, DEFAULT_STEP, |g, q| q.loss_node(g, &x_t, &x_bar, &[3], &eps)).unwrap();
        assert!(err <= 1e-4, "{name}: {err}");
        worst = worst.max(err);
    }
    assert!(worst > 0.0);
}

#[test]
fn loss_and_grads_cover_every_parameter() {
    let mut r = rng::seeded(6);
    let p = BackboneParams::init(&tiny_config(), &mut r).unwrap();
    let x = rng::standard_normal(&[2, 2, 16], &mut r);
    let (loss, grads) = p.loss_and_grads(&x, &x, &[1, 2], &x).unwrap();
    assert!(loss.is_finite());
    let names: Vec<_> = grads.iter().map(|(n, _)| n.clone()).collect();
    assert_eq!(names, p.names());
    for ((_, g), name) in grads.iter().zip(&names) {
        assert_eq!(Some(g.shape().to_vec()), p.get(name).map(|t| t.shape().to_vec()));
    }
}

#[test]
fn zero_depth_counts_lift_and_head() {
    let mut config = BackboneConfig::toy(3);
    config.depth = 0;
    let p = BackboneParams::zeros(&config).unwrap();
    let (l, k) = (16, 4);
    assert_eq!(param_count(&p), 2 * (l + l) + k * (l + 1) + k * l + k);
}

#[test]
fn doubling_head_experts() {
    let base = BackboneConfig::toy(3);
    let mut doubled = base.clone();
    doubled.head_experts *= 2;
    let a = BackboneParams::zeros(&base).unwrap();
    let b = BackboneParams::zeros(&doubled).unwrap();
    let (l, k) = (base.width, base.head_experts);
    let experts = |p: &BackboneParams| p.head.experts.iter().map(|e| e.param_count()).sum::<usize>();
    assert_eq!(experts(&b) - experts(&a), k * (l + 1));
    // The router gains K rows of L weights plus K biases as well.
    assert_eq!(param_count(&b) - param_count(&a), 2 * k * (l + 1));
}

#[test]
fn param_count_matches_checkpoint_walk() {
    let mut r = rng::seeded(7);
    let p = BackboneParams::init(&BackboneConfig::toy(3), &mut r).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckp");
    checkpoint::save(&p, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    assert_eq!(&bytes[..4], b"CKP1");
    let records = u32_at(4);
    let mut pos = 8;
    let mut total = 0;
    for _ in 0..records {
        let name_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2 + name_len;
        assert_eq!(&bytes[pos..pos + 4], b"TSB1");
        let rank = u32_at(pos + 4);
        let numel: usize = (0..rank).map(|d| u32_at(pos + 8 + 4 * d)).product();
        pos += 8 + 4 * rank + 8 * numel;
        total += numel;
    }
    assert_eq!(pos, bytes.len());
    assert_eq!(total, param_count(&p));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let mut r = rng::seeded(8);
    let config = BackboneConfig::toy(2);
    let p = BackboneParams::init(&config, &mut r).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckp");
    checkpoint::save(&p, &path).unwrap();
    assert_eq!(checkpoint::load(&config, &path).unwrap(), p);
    let mut wider = config.clone();
    wider.width = 8;
    let err = checkpoint::load(&wider, &path).unwrap_err().to_string();
    assert!(err.contains("lift_xt.weight"), "{err}");
    let mut deeper = config;
    deeper.depth = 2;
    assert!(checkpoint::load(&deeper, &path).unwrap_err().to_string().contains("levels.1"));
}

#[test]
fn rejects_wrong_channel_count() {
    let p = BackboneParams::zeros(&BackboneConfig::toy(3)).unwrap();
    let x = Tensor::zeros(&[1, 2, 8]);
    assert!(noise_estimate(&x, &x, 1, &p).is_err());
}
