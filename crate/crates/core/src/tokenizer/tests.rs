use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::*;
use crate::evalkit::iou_binary;
use crate::numerics::{grad_check_store, Graph};

fn tiny_config(grid: [usize; 3], d: usize) -> TokenizerConfig {
    TokenizerConfig {
        grid,
        num_classes: 3,
        d,
        latent_channels: 4,
        codebook_size: 8,
        class_dim: 2,
        hidden: 3,
        seed: 5,
        ..Default::default()
    }
}

fn random_grid(rng: &mut Xoshiro256StarStar, dims: [usize; 3], classes: u8) -> OccGrid {
    let n = dims.iter().product();
    OccGrid::new(dims, classes, (0..n).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

#[test]
fn embed_bev_direct_lookup() {
    let mut cfg = tiny_config([4, 4, 2], 2);
    cfg.class_dim = 2;
    let mut tok = Tokenizer::new(cfg).unwrap();
    let id = tok.class_embed;
    *tok.params.get_mut(id) = Tensor::new(&[3, 2], vec![0.5, 0.5, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let grid = OccGrid::new([1, 1, 2], 3, vec![1, 2]).unwrap();
    let mut g = Graph::with_params(&tok.params);
    let f = tok.embed_bev(&mut g, &grid).unwrap();
    assert_eq!(g.shape(f), &[1, 1, 4]);
    assert_eq!(g.value(f).data(), &[1.0, 0.0, 0.0, 1.0]);

    let free = OccGrid::empty([2, 2, 2], 3).unwrap();
    let f = tok.embed_bev(&mut g, &free).unwrap();
    assert!(g.value(f).data().chunks(2).all(|r| r == [0.5, 0.5]));
}

#[test]
fn encode_and_decode_shapes() {
    let tok = Tokenizer::new(TokenizerConfig::default()).unwrap();
    let grid = OccGrid::empty([64, 64, 8], 6).unwrap();
    let mut g = Graph::inference(&tok.params);
    let bev = tok.embed_bev(&mut g, &grid).unwrap();
    let z = tok.encode(&mut g, bev).unwrap();
    assert_eq!(g.shape(z), &[16, 16, 128]);
    let z2 = tok.encode(&mut g, bev).unwrap();
    assert_eq!(g.value(z), g.value(z2));
    let logits = tok.decode(&mut g, z).unwrap();
    assert_eq!(g.shape(logits), &[64 * 64 * 8, 6]);
    let probs = g.softmax(logits).unwrap();
    for row in g.value(probs).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let bad = g.constant(Tensor::zeros(&[6, 8, 16]));
    assert!(matches!(tok.encode(&mut g, bad), Err(Error::Shape { .. })));
}

#[test]
fn grad_check_encode_8x8() {
    let mut tok = Tokenizer::new(tiny_config([8, 8, 2], 4)).unwrap();
    let mut rng = Xoshiro256StarStar::seed_from_u64(1);
    let grid = random_grid(&mut rng, [8, 8, 2], 3);
    let w: Vec<f64> = (0..2 * 2 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let enc = tok.clone();
    let report = grad_check_store(
        |g| {
            let bev = enc.embed_bev(g, &grid)?;
            let z = enc.encode(g, bev)?;
            let wv = g.constant(Tensor::new(&[2, 2, 4], w.clone())?);
            let p = g.mul(z, wv)?;
            g.sum(p)
        },
        &mut tok.params,
        1e-6,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn grad_check_decode_4x4_tokens() {
    let mut tok = Tokenizer::new(tiny_config([8, 8, 2], 2)).unwrap();
    let mut rng = Xoshiro256StarStar::seed_from_u64(2);
    let z: Vec<f64> = (0..4 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let targets: Vec<usize> = (0..8 * 8 * 2).map(|_| rng.random_range(0..3)).collect();
    let dec = tok.clone();
    let report = grad_check_store(
        |g| {
            let zv = g.constant(Tensor::new(&[4, 4, 4], z.clone())?);
            let logits = dec.decode(g, zv)?;
            g.cross_entropy(logits, &targets)
        },
        &mut tok.params,
        1e-6,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

/// Exhaustive scan written independently of the library routine.
fn brute_force_nearest(z: &[f64], book: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (j, e) in book.iter().enumerate() {
        let d: f64 = z.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 || (d == best.0 && j < best.1) {
            best = (d, j);
        }
    }
    best.1
}

#[test]
fn quantize_matches_exhaustive_scan() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(3);
    for n in [256usize, 512, 1024] {
        let c = 16;
        let book: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let flat: Vec<f64> = book.iter().flatten().copied().collect();
        let codebook = Tensor::new(&[n, c], flat).unwrap();
        let sites: Vec<f64> = (0..100 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let latent = Tensor::new(&[10, 10, c], sites.clone()).unwrap();
        let t = quantize(&latent, &codebook).unwrap();
        for (s, &idx) in sites.chunks(c).zip(&t.indices) {
            assert_eq!(idx, brute_force_nearest(s, &book));
        }
        for (i, &idx) in t.indices.iter().enumerate() {
            assert_eq!(&t.embeddings.data()[i * c..(i + 1) * c], &book[idx][..]);
        }
    }
}

#[test]
fn straight_through_contract() {
    let tok = Tokenizer::new(tiny_config([8, 8, 2], 4)).unwrap();
    let mut g = Graph::with_params(&tok.params);
    let latent = g.leaf(Tensor::new(&[2, 2, 4], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap());
    let q = tok.quantize_graph(&mut g, latent).unwrap();
    let w = g.constant(Tensor::new(&[2, 2, 4], (0..16).map(|i| (i as f64).sin()).collect()).unwrap());
    let p = g.mul(q.st, w).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(latent).unwrap(), grads.get(q.st).unwrap());
}

#[test]
fn lovasz_hard_binary_equals_one_minus_iou() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(4);
    for _ in 0..50 {
        let gt = random_grid(&mut rng, [3, 3, 1], 2);
        let pred = random_grid(&mut rng, [3, 3, 1], 2);
        let probs: Vec<f64> = pred
            .labels()
            .iter()
            .flat_map(|&l| if l == 1 { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect();
        let out = lovasz_softmax_with_grad(&probs, 2, gt.labels()).unwrap();
        let iou = iou_binary(&pred, &gt).unwrap();
        match out.per_class[1] {
            Some(l) => assert!((l - (1.0 - iou)).abs() < 1e-12),
            None => assert!(gt.labels().iter().all(|&l| l == 0)),
        }
        for c in out.per_class.iter().flatten() {
            assert!((0.0..=1.0).contains(c));
        }
    }
}

fn one_hot_logits(g: &mut Graph, grid: &OccGrid, k: usize, scale: f64) -> Var {
    let mut data = vec![0.0; grid.labels().len() * k];
    for (i, &l) in grid.labels().iter().enumerate() {
        data[i * k + l as usize] = scale;
    }
    g.leaf(Tensor::new(&[grid.labels().len(), k], data).unwrap())
}

#[test]
fn loss_global_minimum_and_linearity() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(5);
    let grid = random_grid(&mut rng, [4, 4, 2], 6);
    let codes = Tensor::new(&[2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap();

    let mut g = Graph::new();
    let logits = one_hot_logits(&mut g, &grid, 6, 200.0);
    let latent = g.leaf(codes.clone());
    let cv = g.leaf(codes.clone());
    let (_, parts) = tokenizer_loss(&mut g, logits, &grid, latent, cv, 1.0, 0.25).unwrap();
    assert!(parts.total.abs() < 1e-12, "{parts:?}");

    let mut g = Graph::new();
    let logits = g.leaf(Tensor::new(&[32, 6], (0..192).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
    let latent = g.leaf(codes.clone());
    let cv = g.leaf(Tensor::zeros(&[2, 2, 3]));
    let (_, a) = tokenizer_loss(&mut g, logits, &grid, latent, cv, 1.0, 0.25).unwrap();
    let (_, b) = tokenizer_loss(&mut g, logits, &grid, latent, cv, 2.0, 0.25).unwrap();
    assert_eq!(b.lovasz, 2.0 * a.lovasz);
    assert_eq!(a.soft, b.soft);

    let mut g = Graph::new();
    let logits = g.leaf(Tensor::zeros(&[32, 6]));
    let (z, e) = (latent_leaf(&mut g), latent_leaf(&mut g));
    let (_, u) = tokenizer_loss(&mut g, logits, &grid, z, e, 1.0, 0.25).unwrap();
    assert!((u.soft - 6f64.ln()).abs() < 1e-12);
}

fn latent_leaf(g: &mut Graph) -> Var {
    g.leaf(Tensor::zeros(&[1, 1, 2]))
}

#[test]
fn reconstruction_aligned_with_input() {
    let tok = Tokenizer::new(tiny_config([8, 16, 2], 4)).unwrap();
    let grid = OccGrid::empty([8, 16, 2], 3).unwrap();
    let rec = tok.reconstruct(&grid).unwrap();
    assert_eq!(rec.dims(), grid.dims());
}

#[test]
fn memorizes_constant_world() {
    let grid = OccGrid::new([16, 16, 2], 3, vec![1; 16 * 16 * 2]).unwrap();
    let cfg = TokenizerConfig {
        steps: 200,
        batch: 1,
        eval_every: 0,
        hidden: 8,
        latent_channels: 8,
        codebook_size: 16,
        ..tiny_config([16, 16, 2], 4)
    };
    let out = train_tokenizer(std::slice::from_ref(&grid), std::slice::from_ref(&grid), &cfg, &mut |_| {}).unwrap();
    let last = out.history.last().unwrap();
    assert_eq!(last.miou, 1.0);
    assert_eq!(out.tokenizer.reconstruct(&grid).unwrap(), grid);
}

#[test]
fn training_is_deterministic() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(6);
    let frames: Vec<OccGrid> = (0..3).map(|_| random_grid(&mut rng, [8, 8, 2], 3)).collect();
    let cfg = TokenizerConfig {
        steps: 5,
        batch: 2,
        ..tiny_config([8, 8, 2], 4)
    };
    let a = train_tokenizer(&frames, &frames, &cfg, &mut |_| {}).unwrap();
    let b = train_tokenizer(&frames, &frames, &cfg, &mut |_| {}).unwrap();
    assert_eq!(a.tokenizer.params.tensors(), b.tokenizer.params.tensors());
    assert_eq!(a.history, b.history);
}

#[test]
fn checkpoint_round_trip() {
    let tok = Tokenizer::new(tiny_config([8, 8, 2], 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    tok.to_checkpoint(3, DType::F64).save(dir.path()).unwrap();
    let back = Tokenizer::from_checkpoint(&Checkpoint::load(dir.path()).unwrap()).unwrap();
    assert_eq!(back.params.tensors(), tok.params.tensors());
    assert_eq!(back.config, tok.config);
}

#[test]
fn dead_code_restart_revives_unused_codes() {
    let frames: Vec<OccGrid> = (0..6)
        .map(|s| crate::occgrid::generate_synthetic_world(&crate::occgrid::SceneConfig::random([16, 16, 2], s), 1).unwrap())
        .map(|seq| seq.grid(0).clone())
        .collect();
    let cfg = TokenizerConfig {
        num_classes: 6,
        steps: 60,
        batch: 2,
        eval_every: 0,
        codebook_size: 32,
        codebook_init: "uniform".into(),
        restart_every: 0,
        ..tiny_config([16, 16, 2], 4)
    };
    let used = |cfg: &TokenizerConfig| {
        let out = train_tokenizer(&frames, &frames, cfg, &mut |_| {}).unwrap();
        evaluate_reconstruction(&out.tokenizer, &frames).unwrap().2
    };
    let without = used(&cfg);
    let with = used(&TokenizerConfig { restart_every: 10, ..cfg.clone() });
    assert!(with > without, "{with} <= {without}");
}
