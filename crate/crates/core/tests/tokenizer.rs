use crosstok_core::geometry::{group, NeighborIndex};
use crosstok_core::tokenizer::{Image, ImageTokenizer, InputMode, PointTokenizer, PointTokenizerConfig};
use crosstok_core::{PointCloud, RngStream};
use proptest::prelude::*;

mod common;
use common::{close, gelu, linear, random_cloud};

/// Straight-line graph convolution over one center and its neighbors.
fn token_oracle(
    tok: &PointTokenizer<f64>,
    cloud: &PointCloud<f64>,
    center: usize,
    nbrs: &[usize],
    mode: InputMode,
) -> Vec<f64> {
    let gc = &tok.stages[0];
    let pi = cloud.positions[center];
    let xi = cloud.feature(center);
    let edges: Vec<Vec<f64>> = nbrs
        .iter()
        .map(|&j| {
            let pj = cloud.positions[j];
            let xj = cloud.feature(j);
            let mut u = Vec::new();
            for a in 0..3 {
                u.push(if mode == InputMode::AbsPos {
                    pj[a]
                } else {
                    pj[a] - pi[a]
                });
            }
            for c in 0..xj.len() {
                u.push(if mode == InputMode::AbsFeat {
                    xj[c]
                } else {
                    xj[c] - xi[c]
                });
            }
            linear(&gc.h1.weight, &gc.h1.bias, &u).into_iter().map(gelu).collect()
        })
        .collect();
    let hidden = edges[0].len();
    let inner: Vec<f64> = (0..hidden)
        .map(|q| edges.iter().map(|e| e[q]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let outs: Vec<Vec<f64>> = edges
        .iter()
        .map(|e| {
            let z: Vec<f64> = e.iter().chain(&inner).copied().collect();
            linear(&gc.h2.weight, &gc.h2.bias, &z)
        })
        .collect();
    (0..outs[0].len())
        .map(|q| outs.iter().map(|o| o[q]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

#[test]
fn batched_tokens_match_loop_oracle() {
    for (seed, n, c, mode) in [
        (1u64, 8usize, 2usize, InputMode::Relative),
        (2, 32, 3, InputMode::Relative),
        (3, 32, 3, InputMode::AbsPos),
        (4, 40, 1, InputMode::AbsFeat),
        (5, 64, 0, InputMode::Relative),
    ] {
        let mut rng = RngStream::new(seed, 0);
        let mut cfg = PointTokenizerConfig::new(c, 8);
        cfg.k = 4;
        cfg.downsample_ratio = 4;
        cfg.input_mode = mode;
        let tok = PointTokenizer::<f64>::new(&cfg, &mut rng);
        let cloud = random_cloud(n, c, &mut rng);
        let (ts, _) = tok.forward(&cloud, &cfg, 0).unwrap();
        let nbr = group(&cloud.positions, cfg.n_centers(n), cfg.k, 0).unwrap();
        assert_eq!(ts.len(), n / 4);
        for (i, &center) in nbr.center_ids.iter().enumerate() {
            let want = token_oracle(&tok, &cloud, center, nbr.row(i), mode);
            assert!(close(ts.tokens.row(i), &want, 1e-5), "seed {seed} token {i}");
            assert_eq!(ts.center_pos[i], cloud.positions[center]);
        }
        assert_eq!(ts.cls, tok.cls);
    }
}

#[test]
fn default_ratio_gives_two_tokens_for_32_points() {
    let cfg = PointTokenizerConfig::new(0, 8);
    let tok = PointTokenizer::<f64>::new(&cfg, &mut RngStream::new(0, 0));
    let cloud = random_cloud(32, 0, &mut RngStream::new(1, 0));
    assert_eq!(tok.forward(&cloud, &cfg, 0).unwrap().0.len(), 2);
}

#[test]
fn identical_points_give_identical_tokens() {
    let mut cfg = PointTokenizerConfig::new(2, 8);
    cfg.downsample_ratio = 4;
    let tok = PointTokenizer::<f64>::new(&cfg, &mut RngStream::new(3, 0));
    let cloud = PointCloud::new(vec![[0.3, -1.0, 2.0]; 16], vec![0.5; 32], 2).unwrap();
    let (ts, _) = tok.forward(&cloud, &cfg, 0).unwrap();
    let want = token_oracle(&tok, &cloud, 0, &[0, 0], InputMode::Relative);
    for i in 0..ts.len() {
        assert!(close(ts.tokens.row(i), &want, 1e-12));
    }
}

#[test]
fn feature_width_mismatch_is_a_shape_error() {
    let cfg = PointTokenizerConfig::new(3, 8);
    let tok = PointTokenizer::<f64>::new(&cfg, &mut RngStream::new(0, 0));
    let cloud = random_cloud(32, 2, &mut RngStream::new(1, 0));
    let mut wrong = cfg.clone();
    wrong.c_in = 2;
    assert!(tok.forward(&cloud, &wrong, 0).is_err());
    assert!(tok.forward(&cloud, &cfg, 0).is_err());
}

#[test]
fn image_patch_oracle() {
    let mut rng = RngStream::new(9, 0);
    let tok = ImageTokenizer::<f64>::new(4, 1, 6, &mut rng);
    let pixels: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
    let img = Image::new(4, 4, 1, pixels.clone()).unwrap();
    let (ts, _) = tok.forward(&img).unwrap();
    assert_eq!(ts.len(), 1);
    assert!(close(
        ts.tokens.row(0),
        &linear(&tok.proj.weight, &tok.proj.bias, &pixels),
        1e-12
    ));

    let tok = ImageTokenizer::<f64>::new(4, 3, 5, &mut rng);
    let img = Image::new(8, 8, 3, (0..192).map(|_| rng.normal()).collect()).unwrap();
    let (ts, _) = tok.forward(&img).unwrap();
    assert_eq!(ts.len(), 4);
    for (t, (pr, pc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let mut flat = vec![];
        for dy in 0..4 {
            for dx in 0..4 {
                for ch in 0..3 {
                    flat.push(img.at(pr * 4 + dy, pc * 4 + dx, ch));
                }
            }
        }
        assert!(close(
            ts.tokens.row(t),
            &linear(&tok.proj.weight, &tok.proj.bias, &flat),
            1e-12
        ));
        assert_eq!(ts.center_pos[t], [pr as f64, pc as f64, 0.0]);
    }

    let mut zero = ImageTokenizer::<f64>::new(2, 1, 3, &mut rng);
    zero.proj.bias.fill(0.0);
    let (ts, _) = zero.forward(&Image::new(4, 4, 1, vec![0.0; 16]).unwrap()).unwrap();
    assert!(ts.tokens.data().iter().all(|&v| v == 0.0));
    assert!(zero.forward(&Image::new(5, 4, 1, vec![0.0; 20]).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokens_ignore_neighbor_order(seed in 0u64..10_000, perm_seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed, 0);
        let mut cfg = PointTokenizerConfig::new(2, 8);
        cfg.k = 6;
        cfg.downsample_ratio = 4;
        let tok = PointTokenizer::<f64>::new(&cfg, &mut rng);
        let cloud = random_cloud(24, 2, &mut rng);
        let nbr = group(&cloud.positions, 6, cfg.k, 0).unwrap();
        let mut shuffled = nbr.clone();
        let mut prng = RngStream::new(perm_seed, 1);
        for row in shuffled.neighbor_ids.chunks_mut(cfg.k) {
            prng.shuffle(row);
        }
        let run = |n: &NeighborIndex| {
            tok.stages[0].forward(&cloud.positions, &cloud.features, 2, n, cfg.input_mode).unwrap().0
        };
        prop_assert_eq!(run(&nbr), run(&shuffled));
    }

    #[test]
    fn relative_tokens_follow_translation(
        seed in 0u64..10_000,
        t in prop::array::uniform3(-50.0f64..50.0),
    ) {
        let mut rng = RngStream::new(seed, 0);
        let mut cfg = PointTokenizerConfig::new(1, 8);
        cfg.k = 5;
        cfg.downsample_ratio = 4;
        let tok = PointTokenizer::<f64>::new(&cfg, &mut rng);
        let cloud = random_cloud(20, 1, &mut rng);
        let mut moved = cloud.clone();
        for p in moved.positions.iter_mut() {
            *p = [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
        }
        let (a, _) = tok.forward(&cloud, &cfg, 0).unwrap();
        let (b, _) = tok.forward(&moved, &cfg, 0).unwrap();
        for (pa, pb) in a.center_pos.iter().zip(&b.center_pos) {
            for d in 0..3 {
                prop_assert!((pa[d] + t[d] - pb[d]).abs() <= 1e-9 * (1.0 + pb[d].abs()));
            }
        }
        prop_assert!(close(a.tokens.data(), b.tokens.data(), 1e-5));

        let mut abs = cfg.clone();
        abs.input_mode = InputMode::AbsPos;
        if t.iter().any(|v| v.abs() > 1.0) {
            let (a, _) = tok.forward(&cloud, &abs, 0).unwrap();
            let (b, _) = tok.forward(&moved, &abs, 0).unwrap();
            prop_assert!(!close(a.tokens.data(), b.tokens.data(), 1e-5));
        }
    }
}
