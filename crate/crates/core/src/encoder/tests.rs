use super::*;
use crate::tensor::nn::mlp_forward;
use crate::tensor::Real;
use proptest::prelude::{prop_assert_eq, proptest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect()
}

fn set_layer(store: &mut ParamStore, mlp: &Mlp, layer: usize, w: &[Real], b: &[Real]) {
    let l = &mlp.layers()[layer];
    store.value_mut(l.weight).data_mut().copy_from_slice(w);
    store.value_mut(l.bias.unwrap()).data_mut().copy_from_slice(b);
}

#[test]
fn set_conv_with_self_neighbor_is_mlp_of_own_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let pts = cloud(&mut rng, 6);
    let feats = Tensor::new(&[6, 2], (0..12).map(|v| v as Real * 0.1).collect()).unwrap();
    let conv = SetConv::new(&mut store, "c", 2, &[4, 5], 1, &mut rng).unwrap();
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let out = conv.forward(&mut g, &store, &pts, f, &[4, 1]).unwrap();
    for (r, &i) in [4usize, 1].iter().enumerate() {
        let fi = feats.row(i);
        let x = Tensor::new(&[1, 7], vec![0.0, 0.0, 0.0, fi[0], fi[1], fi[0], fi[1]]).unwrap();
        let e = mlp_forward(&x, &conv.mlp, &store).unwrap();
        for (a, b) in g.value(out).row(r).iter().zip(e.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn set_conv_hand_computed() {
    // Points on a line, 1-d features, one ReLU layer with a single output:
    // y = relu(dx + 2 f_k - f_i + 0.5).
    let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0], [3.5, 0.0, 0.0]];
    let feats = Tensor::new(&[4, 1], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conv = SetConv::new(&mut store, "c", 1, &[1], 2, &mut rng).unwrap();
    set_layer(&mut store, &conv.mlp, 0, &[1.0, 0.0, 0.0, 2.0, -1.0], &[0.5]);
    let mut g = Graph::new();
    let f = g.constant(feats);
    let out = conv.forward(&mut g, &store, &pts, f, &[0, 2]).unwrap();
    // Sampled 0: neighbors {0, 1}: relu(0 + 2 - 1 + .5) = 1.5, relu(1 - 2 - 1 + .5) = 0 -> 1.5
    // Sampled 2: neighbors {2, 3}: relu(0 + 1 - .5 + .5) = 1, relu(.5 + 4 - .5 + .5) = 4.5 -> 4.5
    assert_eq!(g.value(out).data(), &[1.5, 4.5]);
}

#[test]
fn set_conv_rejects_width_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let pts = cloud(&mut rng, 5);
    let conv = SetConv::new(&mut store, "c", 3, &[4], 2, &mut rng).unwrap();
    let mut g = Graph::new();
    let f = g.constant(Tensor::zeros(&[5, 2]));
    assert!(conv.forward(&mut g, &store, &pts, f, &[0]).is_err());
}

#[test]
fn pyramid_shapes_full_and_reduced() {
    for cfg in [PyramidConfig::full(), PyramidConfig::reduced()] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", &cfg, &mut rng).unwrap();
        let pts = cloud(&mut rng, cfg.input_points);
        let mut g = Graph::new();
        let levels = build_pyramid(&mut g, &store, &enc, &pts).unwrap();
        assert_eq!(levels.len(), PYRAMID_LEVELS + 1);
        for (l, lv) in levels.iter().enumerate() {
            assert_eq!(lv.points.len(), cfg.size(l));
            assert_eq!(g.value(lv.features).shape(), &[cfg.size(l), cfg.width(l)]);
        }
        assert!(build_pyramid(&mut g, &store, &enc, &pts[1..]).is_err());
    }
    assert_eq!(PyramidConfig::full().level_sizes, [2048, 1024, 256, 64]);
    assert_eq!(PyramidConfig::full().input_points, 8192);
}

#[test]
fn pyramid_is_siamese() {
    let cfg = PyramidConfig::reduced();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", &cfg, &mut rng).unwrap();
    let pts = cloud(&mut rng, cfg.input_points);
    let mut g = Graph::new();
    let a = build_pyramid(&mut g, &store, &enc, &pts).unwrap();
    let b = build_pyramid(&mut g, &store, &enc, &pts).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(g.value(x.features), g.value(y.features));
    }
}

#[test]
fn pyramid_permutation_with_fixed_seed_point() {
    let cfg = PyramidConfig::reduced();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", &cfg, &mut rng).unwrap();
    let pts = cloud(&mut rng, cfg.input_points);
    // Reverse every point except index 0 so the FPS seed is the same point.
    let mut perm = pts.clone();
    perm[1..].reverse();
    let mut g = Graph::new();
    let a = build_pyramid(&mut g, &store, &enc, &pts).unwrap();
    let b = build_pyramid(&mut g, &store, &enc, &perm).unwrap();
    let sorted_rows = |t: &Tensor| {
        let mut rows: Vec<Vec<Real>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
        rows.sort_by(|x, y| x.partial_cmp(y).unwrap());
        rows
    };
    let (fa, fb) = (sorted_rows(g.value(a[4].features)), sorted_rows(g.value(b[4].features)));
    for (x, y) in fa.iter().zip(&fb) {
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn index_chains_compose() {
    let cfg = PyramidConfig::reduced();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pts = cloud(&mut rng, cfg.input_points);
    let geom = PyramidGeometry::build(&pts, &cfg).unwrap();
    let idx = geom.indices_between(2, 4).unwrap();
    for (i, &j) in idx.iter().enumerate() {
        assert_eq!(geom.points[4][i], geom.points[2][j]);
    }
    let idx = geom.indices_between(0, 3).unwrap();
    for (i, &j) in idx.iter().enumerate() {
        assert_eq!(geom.points[3][i], pts[j]);
    }
    assert!(geom.indices_between(3, 3).is_err());
}

#[test]
fn set_upconv_identity_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let pts = cloud(&mut rng, 5);
    let up = SetUpconv::new(&mut store, "u", 2, 3, 4, 1, &mut rng).unwrap();
    let cf = Tensor::new(&[5, 2], (0..10).map(|v| (v as Real).sin()).collect()).unwrap();
    let ff = Tensor::new(&[5, 3], (0..15).map(|v| (v as Real).cos()).collect()).unwrap();
    let mut g = Graph::new();
    let (c, f) = (g.constant(cf.clone()), g.constant(ff.clone()));
    let out = up.forward(&mut g, &store, &pts, c, &pts, f).unwrap();
    for i in 0..5 {
        let x = Tensor::new(&[1, 5], [&[0.0, 0.0, 0.0][..], cf.row(i)].concat()).unwrap();
        let h = mlp_forward(&x, &up.gather_mlp, &store).unwrap();
        let y = Tensor::new(&[1, 7], [h.data(), ff.row(i)].concat()).unwrap();
        let e = mlp_forward(&y, &up.fuse_mlp, &store).unwrap();
        for (a, b) in g.value(out).row(i).iter().zip(e.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn set_upconv_hand_computed() {
    // 3 coarse / 5 fine points on the x axis, K = 2, scalar features:
    // h = relu(dx + c_k), out = relu(max h + 2 f_fine - 1).
    let coarse = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [4.0, 0.0, 0.0]];
    let fine: Vec<Point> = (0..5).map(|i| [i as Real, 0.0, 0.0]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let up = SetUpconv::new(&mut store, "u", 1, 1, 1, 2, &mut rng).unwrap();
    set_layer(&mut store, &up.gather_mlp, 0, &[1.0, 0.0, 0.0, 1.0], &[0.0]);
    set_layer(&mut store, &up.fuse_mlp, 0, &[1.0, 2.0], &[-1.0]);
    let mut g = Graph::new();
    let c = g.constant(Tensor::new(&[3, 1], vec![1.0, -1.0, 3.0]).unwrap());
    let f = g.constant(Tensor::new(&[5, 1], vec![0.0, 0.5, 1.0, 0.0, -2.0]).unwrap());
    let out = up.forward(&mut g, &store, &coarse, c, &fine, f).unwrap();
    // fine 0: nb {0,1}: relu(0+1)=1, relu(2-1)=1 -> 1; out relu(1 + 0 - 1) = 0
    // fine 1: nb {0,1} (tie -> lower index first): relu(-1+1)=0, relu(1-1)=0 -> 0; out relu(0 + 1 - 1) = 0
    // fine 2: nb {1,0}/{1,2} tie at distance 2 -> {1, 0}: relu(0-1)=0, relu(-2+1)=0 -> 0; out relu(0 + 2 - 1) = 1
    // fine 3: nb {1,2}: relu(-1-1)=0, relu(1+3)=4 -> 4; out relu(4 + 0 - 1) = 3
    // fine 4: nb {2,1}: relu(0+3)=3, relu(-2-1)=0 -> 3; out relu(3 - 4 - 1) = 0
    assert_eq!(g.value(out).data(), &[0.0, 0.0, 1.0, 3.0, 0.0]);
    assert_eq!(g.value(out).rows(), fine.len());
}

#[test]
fn set_upconv_rejects_large_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let up = SetUpconv::new(&mut store, "u", 1, 1, 2, 4, &mut rng).unwrap();
    let mut g = Graph::new();
    let c = g.constant(Tensor::zeros(&[3, 1]));
    let f = g.constant(Tensor::zeros(&[5, 1]));
    let coarse = cloud(&mut rng, 3);
    let fine = cloud(&mut rng, 5);
    assert!(up.forward(&mut g, &store, &coarse, c, &fine, f).is_err());
}

#[test]
fn config_validation() {
    let mut c = PyramidConfig::reduced();
    c.validate().unwrap();
    c.level_sizes = [256, 256, 64, 32];
    assert!(c.validate().is_err());
    let mut c = PyramidConfig::reduced();
    c.k_up = 33;
    assert!(c.validate().is_err());
}

proptest! {
    #[test]
    fn set_conv_ignores_neighbor_order(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pts = cloud(&mut rng, 12);
        let conv = SetConv::new(&mut store, "c", 2, &[3, 4], 4, &mut rng).unwrap();
        let feats = Tensor::new(&[12, 2], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let sampled = [3usize, 7, 0];
        let nb = conv.neighbors(&pts, &sampled).unwrap();
        let mut shuffled = nb.clone();
        for row in shuffled.chunks_mut(4) {
            row.reverse();
        }
        let mut g = Graph::new();
        let f = g.constant(feats);
        let a = conv.forward_with(&mut g, &store, &pts, f, &sampled, &nb).unwrap();
        let b = conv.forward_with(&mut g, &store, &pts, f, &sampled, &shuffled).unwrap();
        prop_assert_eq!(g.value(a), g.value(b));
    }
}
