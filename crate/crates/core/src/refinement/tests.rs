use super::*;
use crate::encoder::Encoder;
use crate::geometry::Quaternion;
use crate::init_heads::{FlowInit, PoseInit};
use crate::tensor::{finite_diff_check, Real, Tensor};
use crate::testutil::{assert_close, cloud, encode, frames, random, tiny_pyramid, tiny_widths, Frames};
use proptest::prelude::{prop_assert, proptest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(p: &[Point]) -> Tensor {
    points_tensor(p)
}

fn column(v: &[Real]) -> Tensor {
    Tensor::new(&[v.len(), 1], v.to_vec()).unwrap()
}

fn row(v: &[Real]) -> Tensor {
    Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
}

fn random_quat(rng: &mut impl Rng) -> Quaternion {
    let axis = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    Quaternion::from_axis_angle(axis, rng.random_range(-3.0..3.0)).unwrap()
}

fn random_t(rng: &mut impl Rng) -> [Real; 3] {
    [
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    ]
}

struct WarpInputs {
    g: Graph,
    pts: Var,
    sf: Var,
    q: Var,
    t: Var,
}

fn warp_inputs(seed: u64, identity: bool) -> WarpInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let pts = g.constant(tensor(&cloud(&mut rng, 10)));
    let (sf, q, t) = if identity {
        (Tensor::zeros(&[10, 3]), row(&[1.0, 0.0, 0.0, 0.0]), row(&[0.0; 3]))
    } else {
        (
            random(&mut rng, 10, 3),
            row(&random_quat(&mut rng).to_array()),
            row(&random_t(&mut rng)),
        )
    };
    let sf = g.constant(sf);
    let q = g.constant(q);
    let t = g.constant(t);
    WarpInputs { g, pts, sf, q, t }
}

#[test]
fn warp_limits_are_bit_exact() {
    for (hval, pose_side) in [(1.0, true), (0.0, false)] {
        let mut w = warp_inputs(1, false);
        let h = w.g.constant(Tensor::full(&[10, 1], hval));
        let out = warp_with_weight(&mut w.g, w.pts, w.sf, w.q, w.t, h).unwrap();
        let expect = if pose_side { out.p_pose } else { out.p_sf };
        assert_eq!(w.g.value(out.p_warp).data(), w.g.value(expect).data());
    }
}

#[test]
fn identity_pose_and_zero_flow_leave_points_unmoved() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut w = warp_inputs(2, true);
    let h = w.g.constant(random(&mut rng, 10, 1).map(|v| v.abs()));
    let out = warp_with_weight(&mut w.g, w.pts, w.sf, w.q, w.t, h).unwrap();
    assert_eq!(w.g.value(out.p_warp).data(), w.g.value(w.pts).data());
}

#[test]
fn half_weight_blends_linearly() {
    let mut g = Graph::new();
    let pts = g.constant(tensor(&[[0.0, 0.0, 0.0]]));
    let sf = g.constant(Tensor::zeros(&[1, 3]));
    let q = g.constant(row(&[1.0, 0.0, 0.0, 0.0]));
    let t = g.constant(row(&[2.0, 0.0, 0.0]));
    let h = g.constant(column(&[0.5]));
    let out = warp_with_weight(&mut g, pts, sf, q, t, h).unwrap();
    assert_eq!(g.value(out.p_warp).data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn blend_weight_modes() {
    let mut g = Graph::new();
    let m = g.constant(column(&[0.5, 1.0, 0.2]));
    let o = g.constant(column(&[0.25, 0.0, 1.0]));
    let h = blend_weight(&mut g, m, o, WarpMask::Literal).unwrap();
    assert_eq!(g.value(h).data(), &[0.375, 1.0, 0.0]);
    let h = blend_weight(&mut g, m, o, WarpMask::Inverted).unwrap();
    assert_eq!(g.value(h).data(), &[0.125, 0.0, 0.2]);
    let h = blend_weight(&mut g, m, o, WarpMask::PointSoftmax).unwrap();
    let e: Vec<Real> = [0.375f64, 1.0, 0.0].iter().map(|v| (*v as Real).exp()).collect();
    let s: Real = e.iter().sum();
    assert_close(g.value(h).data(), &e.iter().map(|v| v / s).collect::<Vec<_>>(), 1e-15);
}

#[test]
fn blend_weight_rejects_out_of_range_masks() {
    let mut g = Graph::new();
    let good = g.constant(column(&[0.5, 0.5]));
    let bad = g.constant(column(&[0.5, 1.5]));
    assert!(blend_weight(&mut g, bad, good, WarpMask::Literal).is_err());
    assert!(blend_weight(&mut g, good, bad, WarpMask::Literal).is_err());
    let wide = g.constant(Tensor::full(&[2, 2], 0.5));
    assert!(blend_weight(&mut g, wide, good, WarpMask::Literal).is_err());
}

#[test]
fn warp_blend_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let pid = store.insert("p", tensor(&cloud(&mut rng, 6))).unwrap();
    let sid = store.insert("sf", random(&mut rng, 6, 3)).unwrap();
    let tid = store.insert("t", row(&random_t(&mut rng))).unwrap();
    let mid = store
        .insert("m", random(&mut rng, 6, 1).map(|v| 0.1 + 0.8 * v.abs()))
        .unwrap();
    let oid = store
        .insert("o", random(&mut rng, 6, 1).map(|v| 0.1 + 0.8 * v.abs()))
        .unwrap();
    let qv = row(&random_quat(&mut rng).to_array());
    let mix = random(&mut rng, 6, 3);
    for mode in [WarpMask::Literal, WarpMask::Inverted, WarpMask::PointSoftmax] {
        let r = finite_diff_check(
            |g, s| {
                let q = g.constant(qv.clone());
                let (p, sf, t, m, o) = (
                    g.param(s, pid),
                    g.param(s, sid),
                    g.param(s, tid),
                    g.param(s, mid),
                    g.param(s, oid),
                );
                let w = warp_layer(g, p, sf, q, t, m, o, mode)?;
                let x = g.mul_const(w.p_warp, &mix)?;
                Ok(g.sum_all(x))
            },
            &mut store,
            1e-4,
        )
        .unwrap();
        assert!(r.passes(1e-7, 0.0), "{mode:?}: {r:?}");
    }
}

/// Rotation block `R_prev · R_Δ` and translation `R_Δ t_prev + Δt`, by
/// explicit 3 x 3 matrix arithmetic.
fn oracle_compose(prev: (&Quaternion, &[Real; 3]), d: (&Quaternion, &[Real; 3])) -> ([[Real; 3]; 3], [Real; 3]) {
    let (a, b) = (prev.0.to_matrix(), d.0.to_matrix());
    let mut r = [[0.0; 3]; 3];
    let mut t = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
        t[i] = (0..3).map(|k| b[i][k] * prev.1[k]).sum::<Real>() + d.1[i];
    }
    (r, t)
}

fn compose_graph(prev: (&Quaternion, &[Real; 3]), d: (&Quaternion, &[Real; 3])) -> (Quaternion, [Real; 3]) {
    let mut g = Graph::new();
    let qp = g.constant(row(&prev.0.to_array()));
    let tp = g.constant(row(prev.1));
    let dq = g.constant(row(&d.0.to_array()));
    let dt = g.constant(row(d.1));
    let (q, t) = compose_residual(&mut g, qp, tp, dq, dt).unwrap();
    let qd = g.value(q).data();
    let td = g.value(t).data();
    (Quaternion::new(qd[0], qd[1], qd[2], qd[3]), [td[0], td[1], td[2]])
}

#[test]
fn identity_residual_keeps_pose() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random_quat(&mut rng);
    let t = random_t(&mut rng);
    let (qn, tn) = compose_graph((&q, &t), (&Quaternion::IDENTITY, &[0.0; 3]));
    assert_eq!(qn.to_array(), q.to_array());
    assert_eq!(tn, t);
}

#[test]
fn identity_previous_pose_returns_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dq = random_quat(&mut rng);
    let dt = random_t(&mut rng);
    let (qn, tn) = compose_graph((&Quaternion::IDENTITY, &[0.0; 3]), (&dq, &dt));
    assert_eq!(qn.to_array(), dq.to_array());
    assert_eq!(tn, dt);
}

#[test]
fn composition_matches_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let (qp, tp, dq, dt) = (
            random_quat(&mut rng),
            random_t(&mut rng),
            random_quat(&mut rng),
            random_t(&mut rng),
        );
        let (q, t) = compose_graph((&qp, &tp), (&dq, &dt));
        let (r, to) = oracle_compose((&qp, &tp), (&dq, &dt));
        let rq = q.to_matrix();
        for i in 0..3 {
            assert_close(&rq[i], &r[i], 1e-12);
        }
        assert_close(&t, &to, 1e-12);
    }
}

#[test]
fn chained_composition_matches_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let (mut q, mut t) = (random_quat(&mut rng), random_t(&mut rng));
        let (mut r_or, mut t_or) = (q.to_matrix(), t);
        for _ in 0..3 {
            let (dq, dt) = (random_quat(&mut rng), random_t(&mut rng));
            let (q2, t2) = compose_graph((&q, &t), (&dq, &dt));
            let b = dq.to_matrix();
            let mut r = [[0.0; 3]; 3];
            let mut tn = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    r[i][j] = (0..3).map(|k| r_or[i][k] * b[k][j]).sum();
                }
                tn[i] = (0..3).map(|k| b[i][k] * t_or[k]).sum::<Real>() + dt[i];
            }
            (r_or, t_or, q, t) = (r, tn, q2, t2);
        }
        let rq = q.to_matrix();
        for i in 0..3 {
            assert_close(&rq[i], &r_or[i], 1e-7);
        }
        assert_close(&t, &t_or, 1e-7);
    }
}

#[test]
fn compose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let ids: Vec<_> = [
        row(&random_quat(&mut rng).to_array()),
        row(&random_t(&mut rng)),
        row(&random_quat(&mut rng).to_array()),
        row(&random_t(&mut rng)),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, t)| store.insert(format!("x{i}"), t).unwrap())
    .collect();
    let mix = Tensor::new(&[1, 7], vec![0.5, -1.0, 2.0, 0.3, 1.0, -0.7, 0.2]).unwrap();
    let r = finite_diff_check(
        |g, s| {
            let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let (q, t) = compose_residual(g, v[0], v[1], v[2], v[3])?;
            let c = g.concat(&[q, t])?;
            let x = g.mul_const(c, &mix)?;
            Ok(g.sum_all(x))
        },
        &mut store,
        1e-4,
    )
    .unwrap();
    assert!(r.passes(1e-8, 0.0), "{r:?}");
}

struct Net {
    store: ParamStore,
    enc: Encoder,
    flow: FlowInit,
    pose: PoseInit,
    levels: Vec<RefineLevel>,
    frames: Frames,
    cv_init: Tensor,
}

fn level_widths(l: usize) -> LevelWidths {
    let cfg = tiny_pyramid();
    let iw = tiny_widths();
    let head = |l: usize| [4, 4, 5, 6][l];
    let (cf, cp) = if l == 2 {
        (iw.flow, iw.pose)
    } else {
        (head(l + 1), head(l + 1))
    };
    LevelWidths {
        feature: cfg.width(l),
        coarse_flow: cf,
        coarse_pose: cp,
        flow: head(l),
        pose: head(l),
        occ: 2,
        k_up: 3,
        k1: 3,
        k2: 2,
        k_local: 3,
    }
}

fn net(seed: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_pyramid();
    let w = tiny_widths();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", &cfg, &mut rng).unwrap();
    let flow = FlowInit::new(&mut store, "flow.init", cfg.width(3), &w, &mut rng).unwrap();
    let pose = PoseInit::new(&mut store, "pose.init", cfg.width(4), &w, &mut rng).unwrap();
    let levels = (0..3)
        .rev()
        .map(|l| {
            let names = [format!("flow.l{l}"), format!("pose.l{l}"), format!("cv.l{l}")];
            RefineLevel::new(
                &mut store,
                [&names[0], &names[1], &names[2]],
                &level_widths(l),
                &mut rng,
            )
            .unwrap()
        })
        .collect();
    let frames = frames(&mut rng, &cfg, [0.05, -0.02, 0.0]);
    let cv_init = random(&mut rng, cfg.size(2), w.cv);
    Net {
        store,
        enc,
        flow,
        pose,
        levels,
        frames,
        cv_init,
    }
}

fn run(n: &Net, g: &mut Graph, store: &ParamStore, cv: Var, opts: &RefineOptions) -> Vec<LevelEstimate> {
    let (p, q) = encode(g, store, &n.enc, &n.frames);
    let fi = n.flow.forward(g, store, &n.frames.geom_p, &p, &q, cv).unwrap();
    let mut d = Dropout::disabled();
    let pi = n.pose.forward(g, store, &n.frames.geom_p, &p, cv, &mut d).unwrap();
    let init = LevelEstimate {
        flow_points: p[3].points.clone(),
        flow: fi.state,
        pose_points: p[4].points.clone(),
        pose: pi,
    };
    refine_all(g, store, init, &n.levels, &[2, 1, 0], &p, &q, opts, &mut d).unwrap()
}

#[test]
fn refine_all_shapes() {
    let n = net(9);
    let mut g = Graph::new();
    let cv = g.constant(n.cv_init.clone());
    let est = run(&n, &mut g, &n.store, cv, &RefineOptions::default());
    let cfg = tiny_pyramid();
    let sizes: Vec<usize> = est.iter().map(|e| g.value(e.flow.sf).rows()).collect();
    assert_eq!(sizes, vec![cfg.size(3), cfg.size(2), cfg.size(1), cfg.size(0)]);
    for e in &est {
        let qn: Real = g.value(e.pose.q).data().iter().map(|v| v * v).sum::<Real>().sqrt();
        assert!((qn - 1.0).abs() < 1e-6);
        assert!(g.value(e.flow.sf).all_finite());
        assert!(g.value(e.pose.m).data().iter().all(|&m| m > 0.0 && m < 1.0));
    }
}

#[test]
fn zeroed_flow_heads_give_zero_flow_everywhere() {
    let mut n = net(10);
    n.store.zero_prefix("flow.");
    let mut g = Graph::new();
    let cv = g.constant(n.cv_init.clone());
    let est = run(&n, &mut g, &n.store, cv, &RefineOptions::default());
    for e in &est {
        assert!(g.value(e.flow.sf).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zeroed_flow_head_passes_upsampled_flow_through() {
    let mut n = net(11);
    let head = n.levels[0].flow_head().layers()[0].clone();
    n.store.value_mut(head.weight).data_mut().fill(0.0);
    n.store.value_mut(head.bias.unwrap()).data_mut().fill(0.0);
    for base in [ResidualBase::Upsampled, ResidualBase::Blended] {
        let opts = RefineOptions {
            residual_base: base,
            ..Default::default()
        };
        let mut g = Graph::new();
        let cv = g.constant(n.cv_init.clone());
        let (p, q) = encode(&mut g, &n.store, &n.enc, &n.frames);
        let fi = n.flow.forward(&mut g, &n.store, &n.frames.geom_p, &p, &q, cv).unwrap();
        let mut d = Dropout::disabled();
        let pi = n
            .pose
            .forward(&mut g, &n.store, &n.frames.geom_p, &p, cv, &mut d)
            .unwrap();
        let init = LevelEstimate {
            flow_points: p[3].points.clone(),
            flow: fi.state,
            pose_points: p[4].points.clone(),
            pose: pi,
        };
        let r = n.levels[0]
            .forward(&mut g, &n.store, &init, &p[2], &q[2], &opts, &mut d)
            .unwrap();
        match base {
            ResidualBase::Upsampled => assert_eq!(g.value(r.flow.sf).data(), g.value(r.up.sf).data()),
            ResidualBase::Blended => {
                let pts = g.constant(points_tensor(&p[2].points));
                let disp = g.sub(r.warp.p_warp, pts).unwrap();
                assert_eq!(g.value(r.flow.sf).data(), g.value(disp).data());
            }
        }
    }
}

#[test]
fn upsampling_onto_the_same_cloud_reproduces_values() {
    let n = net(12);
    let mut g = Graph::new();
    let (p, _) = encode(&mut g, &n.store, &n.enc, &n.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(120);
    let pts = p[2].points.clone();
    let k = pts.len();
    let sf = g.constant(random(&mut rng, k, 3));
    let occ = g.constant(random(&mut rng, k, 1).map(|v| v.abs()));
    let m = g.constant(random(&mut rng, k, 1).map(|v| v.abs()));
    let ff = g.constant(random(&mut rng, k, level_widths(2).coarse_flow));
    let ef = g.constant(random(&mut rng, k, level_widths(2).coarse_pose));
    let dummy = g.constant(Tensor::zeros(&[1, 4]));
    let prev = LevelEstimate {
        flow_points: pts.clone(),
        flow: FlowState { sf, occ, ff },
        pose_points: pts.clone(),
        pose: PoseState {
            q: dummy,
            t: dummy,
            m,
            w: dummy,
            ef,
            pooled: dummy,
        },
    };
    let up = n.levels[0].upsample(&mut g, &n.store, &prev, &p[2]).unwrap();
    assert_close(g.value(up.sf).data(), g.value(sf).data(), 1e-6);
    assert_close(g.value(up.occ).data(), g.value(occ).data(), 1e-6);
    assert_close(g.value(up.m).data(), g.value(m).data(), 1e-6);
}

#[test]
fn constant_coarse_flow_upsamples_to_constant() {
    let n = net(13);
    let mut g = Graph::new();
    let (p, _) = encode(&mut g, &n.store, &n.enc, &n.frames);
    let coarse = &p[3].points;
    let c = [0.3, -0.2, 0.7];
    let sf_t = Tensor::from_rows(&vec![c; coarse.len()]).unwrap();
    let sf = g.constant(sf_t);
    let up = three_nn_interpolate_var(&mut g, &p[2].points, coarse, sf).unwrap();
    for r in 0..p[2].points.len() {
        assert_close(g.value(up).row(r), &c, 1e-12);
    }
}

#[test]
fn end_to_end_gradients() {
    let n = net(14);
    let mut store = n.store.clone();
    let cid = store.insert("cv_init", n.cv_init.clone()).unwrap();
    let opts = RefineOptions::default();
    let r = crate::tensor::gradcheck::finite_diff_check_sampled(
        |g, s| {
            let cv = g.param(s, cid);
            let est = run(&n, g, s, cv, &opts);
            let last = est.last().unwrap();
            let a = g.sum_all(last.flow.sf);
            let sq = g.square(last.flow.sf);
            let b = g.sum_all(sq);
            let c = g.concat(&[last.pose.q, last.pose.t])?;
            let c = g.sum_all(c);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        },
        &mut store,
        1e-4,
        Some(12),
    )
    .unwrap();
    assert!(r.passes_pooled(1e-5, 0.01), "{r:?}");
}

proptest! {
    #[test]
    fn blend_weight_in_unit_range_and_monotone_in_static_mask(
        m in 0.0f64..1.0, dm in 0.0f64..1.0, o in 0.0f64..1.0, inverted in proptest::bool::ANY
    ) {
        let mode = if inverted { WarpMask::Inverted } else { WarpMask::Literal };
        let m2 = (m + dm).min(1.0);
        let mut g = Graph::new();
        let mv = g.constant(column(&[m as Real, m2 as Real]));
        let ov = g.constant(column(&[o as Real, o as Real]));
        let h = blend_weight(&mut g, mv, ov, mode).unwrap();
        let hv = g.value(h).data();
        prop_assert!(hv.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(hv[1] >= hv[0]);
    }
}
