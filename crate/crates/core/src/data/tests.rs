use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::geometry::{dist2, Point, Quaternion};

fn still_recipe() -> SceneRecipe {
    SceneRecipe {
        n_points: 200,
        n_objects: 0,
        object_extent: 0.3,
        ego_rotation_deg: 0.0,
        ego_translation: 0.0,
        object_motion: 0.0,
        occlusion_fraction: 0.0,
        noise_sigma: 0.0,
        seed: 3,
    }
}

#[test]
fn zero_motion_scene_is_identical() {
    let pair = gen_synthetic_pair(&still_recipe()).unwrap();
    assert_eq!(pair.p, pair.q);
    assert!(pair.gt_flow.unwrap().vectors().iter().flatten().all(|&v| v == 0.0));
    assert_eq!(pair.gt_pose.unwrap(), Pose::IDENTITY);
}

#[test]
fn pure_rotation_flow_matches_rotation_matrix() {
    let mut r = still_recipe();
    r.ego_rotation_deg = 10.0;
    let pair = gen_synthetic_pair(&r).unwrap();
    let pose = pair.gt_pose.unwrap();
    assert!(pose.q.angle_deg(Quaternion::IDENTITY) <= 10.0 + 1e-9);
    let m = pose.q.to_matrix();
    for (p, f) in pair.p.points().iter().zip(pair.gt_flow.unwrap().vectors()) {
        for i in 0..3 {
            let rp: f64 = (0..3).map(|j| m[i][j] * p[j]).sum();
            assert!((f[i] - (rp - p[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn ten_degree_z_rotation_flow() {
    // An exact 10 degree yaw applied to a generated background.
    let pair = gen_synthetic_pair(&still_recipe()).unwrap();
    let angle = 10f64.to_radians();
    let pose = Pose::new(Quaternion::from_axis_angle([0.0, 0.0, 1.0], angle).unwrap(), [0.0; 3]);
    let (s, c) = angle.sin_cos();
    for p in pair.p.points() {
        let q = pose.apply(p).unwrap();
        let expect = [c * p[0] - s * p[1] - p[0], s * p[0] + c * p[1] - p[1], 0.0];
        let flow = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
        for i in 0..3 {
            assert!((flow[i] - expect[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn occlusion_count_and_removal() {
    let r = SceneRecipe {
        occlusion_fraction: 0.2,
        noise_sigma: 0.0,
        n_points: 256,
        seed: 11,
        ..SceneRecipe::default()
    };
    let pair = gen_synthetic_pair(&r).unwrap();
    let occ = pair.occluded.as_ref().unwrap();
    let expected = (0.2 * 256.0f64).ceil() as usize;
    assert_eq!(occ.iter().filter(|&&o| o).count(), expected);
    let warped = pair.p.warped(pair.gt_flow.as_ref().unwrap()).unwrap();
    for (i, w) in warped.points().iter().enumerate() {
        let present = pair.q.points().iter().any(|q| dist2(q, w) < 1e-20);
        assert_eq!(present, !occ[i], "point {i}");
    }
}

#[test]
fn occluded_points_form_an_angular_sector() {
    let r = SceneRecipe {
        occlusion_fraction: 0.25,
        seed: 5,
        ..SceneRecipe::default()
    };
    let pair = gen_synthetic_pair(&r).unwrap();
    let occ = pair.occluded.unwrap();
    let mut by_angle: Vec<(f64, bool)> = pair
        .p
        .points()
        .iter()
        .zip(&occ)
        .map(|(p, &o)| (p[1].atan2(p[0]), o))
        .collect();
    by_angle.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Around the circle the hidden points form a single run.
    let n = by_angle.len();
    let switches = (0..n).filter(|&i| by_angle[i].1 != by_angle[(i + 1) % n].1).count();
    assert_eq!(switches, 2);
}

#[test]
fn gt_flow_is_exact_without_noise() {
    let r = SceneRecipe {
        noise_sigma: 0.0,
        seed: 8,
        ..SceneRecipe::default()
    };
    let pair = gen_synthetic_pair(&r).unwrap();
    let pose = pair.gt_pose.unwrap();
    let warped = pair.p.warped(pair.gt_flow.as_ref().unwrap()).unwrap();
    let occ = pair.occluded.as_ref().unwrap();
    let dynamic = pair.dynamic.as_ref().unwrap();
    assert!(dynamic.iter().any(|&d| d));
    for i in 0..pair.p.len() {
        if !occ[i] {
            assert!(dist2(&warped.points()[i], &pair.q.points()[i]) < 1e-24);
        }
        if !dynamic[i] {
            let ego = pose.apply(&pair.p.points()[i]).unwrap();
            let f = pair.gt_flow.as_ref().unwrap().vectors()[i];
            let p = pair.p.points()[i];
            assert_eq!(f, [ego[0] - p[0], ego[1] - p[1], ego[2] - p[2]]);
        }
    }
}

#[test]
fn noise_is_applied_with_the_requested_scale() {
    let r = SceneRecipe {
        n_points: 2000,
        occlusion_fraction: 0.0,
        noise_sigma: 0.01,
        seed: 2,
        ..SceneRecipe::default()
    };
    let pair = gen_synthetic_pair(&r).unwrap();
    let warped = pair.p.warped(pair.gt_flow.as_ref().unwrap()).unwrap();
    let var: f64 = warped
        .points()
        .iter()
        .zip(pair.q.points())
        .map(|(a, b)| dist2(a, b))
        .sum::<f64>()
        / (3.0 * 2000.0);
    assert!((var.sqrt() - 0.01).abs() < 0.001, "{}", var.sqrt());
}

#[test]
fn generator_is_deterministic() {
    let r = SceneRecipe::default();
    assert_eq!(gen_synthetic_pair(&r).unwrap(), gen_synthetic_pair(&r).unwrap());
    let mut other = r.clone();
    other.seed += 1;
    assert_ne!(gen_synthetic_pair(&r).unwrap().p, gen_synthetic_pair(&other).unwrap().p);
}

#[test]
fn degenerate_recipes_are_rejected() {
    let base = SceneRecipe::default();
    let cases = [
        SceneRecipe {
            n_points: 0,
            ..base.clone()
        },
        SceneRecipe {
            ego_translation: -0.1,
            ..base.clone()
        },
        SceneRecipe {
            noise_sigma: f64::NAN,
            ..base.clone()
        },
        SceneRecipe {
            occlusion_fraction: 1.0,
            ..base.clone()
        },
        SceneRecipe {
            object_extent: 0.0,
            ..base.clone()
        },
        SceneRecipe {
            n_objects: 20,
            ..base.clone()
        },
        SceneRecipe {
            ego_rotation_deg: 200.0,
            ..base.clone()
        },
    ];
    for c in cases {
        assert!(gen_synthetic_pair(&c).is_err(), "{c:?}");
    }
}

#[test]
fn kitti_bin_two_records() {
    let mut bytes = Vec::new();
    for v in [1.0f32, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.1] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let pts = parse_kitti_bin(&bytes, Path::new("x.bin")).unwrap();
    assert_eq!(pts, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
}

#[test]
fn kitti_bin_empty_and_truncated() {
    let empty = parse_kitti_bin(&[], Path::new("e.bin")).unwrap();
    assert!(empty.is_empty());
    assert!(PointCloud::new(empty).is_err());
    match parse_kitti_bin(&[0u8; 37], Path::new("t.bin")) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 32),
        other => panic!("{other:?}"),
    }
}

#[test]
fn kitti_poses_identity_line() {
    let poses = parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 0\n", Path::new("p.txt")).unwrap();
    assert_eq!(poses, vec![Pose::IDENTITY]);
}

#[test]
fn kitti_poses_reject_bad_lines() {
    let p = Path::new("p.txt");
    assert!(matches!(
        parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1\n", p),
        Err(Error::Parse { line: 1, .. })
    ));
    assert!(matches!(
        parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 0\n\n1 0 0 0 0 1 0 0 0 0 1 0\n", p),
        Err(Error::Parse { line: 2, .. })
    ));
    assert!(matches!(
        parse_kitti_poses("1 0 0 0 0 1.01 0 0 0 0 1 0\n", p),
        Err(Error::Parse { line: 1, .. })
    ));
    assert_eq!(parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 0\n\n\n", p).unwrap().len(), 1);
}

#[test]
fn relative_pose_of_identical_poses_is_identity() {
    let a = Pose::new(
        Quaternion::from_axis_angle([1.0, 2.0, 3.0], 0.7).unwrap(),
        [4.0, -1.0, 2.0],
    );
    let rel = relative_pose(&a, &a);
    assert!(rel.q.angle_deg(Quaternion::IDENTITY) < 1e-6);
    assert!(rel.t.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn relative_pose_matches_matrix_product() {
    let a = Pose::new(
        Quaternion::from_axis_angle([0.3, -1.0, 0.2], 0.4).unwrap(),
        [1.0, 2.0, 3.0],
    );
    let b = Pose::new(
        Quaternion::from_axis_angle([0.0, 1.0, 1.0], -0.9).unwrap(),
        [-2.0, 0.5, 1.0],
    );
    let (ma, mb) = (a.to_matrix(), b.to_matrix());
    // Inverse of a rigid 4 x 4 matrix: [Rᵀ | −Rᵀ t].
    let mut ia = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            ia[i][j] = ma[j][i];
        }
        ia[i][3] = -(0..3).map(|k| ma[k][i] * ma[k][3]).sum::<f64>();
    }
    ia[3][3] = 1.0;
    let rel = relative_pose(&a, &b).to_matrix();
    for i in 0..4 {
        for j in 0..4 {
            let e: f64 = (0..4).map(|k| ia[i][k] * mb[k][j]).sum();
            assert!((rel[i][j] - e).abs() < 1e-12);
        }
    }
}

#[test]
fn kitti_pair_pose_maps_first_frame_into_second() {
    let a = Pose::new(
        Quaternion::from_axis_angle([0.0, 0.0, 1.0], 0.1).unwrap(),
        [0.0, 0.0, 0.0],
    );
    let b = Pose::new(
        Quaternion::from_axis_angle([0.0, 0.0, 1.0], 0.3).unwrap(),
        [1.0, 0.0, 0.0],
    );
    let world: Point = [5.0, 2.0, 0.0];
    let p1 = a.inverse().apply(&world).unwrap();
    let p2 = b.inverse().apply(&world).unwrap();
    let pts = vec![p1, [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
    let prep = KittiPrep {
        n_points: 3,
        ground_z: -10.0,
        seed: 0,
    };
    let pair = kitti_pair(&pts, &pts, Some((&a, &b)), &prep).unwrap();
    let mapped = pair.gt_pose.unwrap().apply(&p1).unwrap();
    assert!(dist2(&mapped, &p2) < 1e-20);
}

#[test]
fn remove_ground_cases() {
    let above = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 1.0, -1.0]]).unwrap();
    assert_eq!(remove_ground(&above, DEFAULT_GROUND_Z).unwrap(), above);
    assert_eq!(remove_ground(&above, f64::NEG_INFINITY).unwrap(), above);
    let mixed = PointCloud::new(vec![
        [0.0, 0.0, -2.0],
        [1.0, 0.0, 0.5],
        [2.0, 0.0, -1.5],
        [3.0, 0.0, -1.0],
        [4.0, 0.0, -3.0],
    ])
    .unwrap();
    let kept = remove_ground(&mixed, DEFAULT_GROUND_Z).unwrap();
    assert_eq!(kept.points(), &[[1.0, 0.0, 0.5], [3.0, 0.0, -1.0]]);
    assert!(remove_ground(&mixed, 10.0).is_err());
}

#[test]
fn sample_to_n_cases() {
    let pc = PointCloud::new((0..6).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
    let perm = sample_to_n(&pc, 6, 1);
    let mut xs: Vec<f64> = perm.points().iter().map(|p| p[0]).collect();
    xs.sort_by(f64::total_cmp);
    assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);

    let two = PointCloud::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
    let up = sample_to_n(&two, 4, 9);
    assert_eq!(up.len(), 4);
    assert!(up.points().iter().all(|p| two.points().contains(p)));

    assert_eq!(sample_to_n(&pc, 4, 7), sample_to_n(&pc, 4, 7));
    let sub = sample_to_n(&pc, 4, 7);
    let mut idx: Vec<f64> = sub.points().iter().map(|p| p[0]).collect();
    idx.dedup();
    assert_eq!(idx.len(), 4);
}

#[test]
fn dataset_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = DatasetRecipe {
        scene: SceneRecipe {
            n_points: 64,
            ..SceneRecipe::default()
        },
        count: 3,
        objects: Some([1, 2]),
    };
    let pairs = recipe.generate().unwrap();
    assert_eq!(pairs[0].dynamic.as_ref().unwrap().iter().filter(|&&d| d).count(), 5);
    assert_eq!(pairs[1].dynamic.as_ref().unwrap().iter().filter(|&&d| d).count(), 10);
    save_dataset(dir.path(), &pairs).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, pairs);
}

#[test]
fn dataset_reads_velodyne_entries() {
    let dir = tempfile::tempdir().unwrap();
    let pts = vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
    write_kitti_bin(&dir.path().join("a.bin"), &pts, None).unwrap();
    let manifest = Manifest {
        pairs: vec![ManifestEntry {
            p: "a.bin".into(),
            q: "a.bin".into(),
            meta: None,
        }],
    };
    std::fs::write(
        dir.path().join(MANIFEST_FILE),
        serde_json::to_string(&manifest).unwrap(),
    )
    .unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded[0].p.points(), pts.as_slice());
    assert!(loaded[0].gt_pose.is_none());
}

#[test]
fn sidecar_with_wrong_label_length_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let pair = gen_synthetic_pair(&SceneRecipe {
        n_points: 32,
        n_objects: 1,
        ..SceneRecipe::default()
    })
    .unwrap();
    save_dataset(dir.path(), &[pair]).unwrap();
    let meta_path = dir.path().join("00000.json");
    let mut meta: PairMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
    meta.dynamic.as_mut().unwrap().pop();
    std::fs::write(&meta_path, serde_json::to_string(&meta).unwrap()).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

proptest! {
    #[test]
    fn kitti_bin_round_trip(raw in prop::collection::vec((-100.0f32..100.0, -100.0f32..100.0, -5.0f32..5.0, 0.0f32..1.0), 1..50)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let pts: Vec<Point> = raw.iter().map(|r| [r.0 as f64, r.1 as f64, r.2 as f64]).collect();
        let inten: Vec<f32> = raw.iter().map(|r| r.3).collect();
        write_kitti_bin(&path, &pts, Some(&inten)).unwrap();
        prop_assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 * pts.len() as u64);
        prop_assert_eq!(load_kitti_bin(&path).unwrap(), pts);
    }

    #[test]
    fn kitti_pose_quaternion_round_trips(axis in prop::array::uniform3(-1.0f64..1.0), angle in -3.1f64..3.1, t in prop::array::uniform3(-50.0f64..50.0)) {
        prop_assume!(axis.iter().map(|v| v * v).sum::<f64>() > 1e-4);
        let pose = Pose::new(Quaternion::from_axis_angle(axis, angle).unwrap(), t);
        let m = pose.to_matrix();
        let line: Vec<String> = (0..3).flat_map(|i| (0..4).map(move |j| format!("{:?}", m[i][j]))).collect();
        let parsed = parse_kitti_poses(&line.join(" "), Path::new("p.txt")).unwrap();
        let r = parsed[0].q.to_matrix();
        prop_assert!(parsed[0].q.w >= 0.0);
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((r[i][j] - m[i][j]).abs() < 1e-9);
            }
            prop_assert_eq!(parsed[0].t[i], t[i]);
        }
    }

    #[test]
    fn synthetic_labels_have_cloud_length(seed in 0u64..1000, occ in 0.0f64..0.5) {
        let r = SceneRecipe { n_points: 100, seed, occlusion_fraction: occ, ..SceneRecipe::default() };
        let pair = gen_synthetic_pair(&r).unwrap();
        prop_assert!(pair.validate().is_ok());
        prop_assert_eq!(pair.q.len(), 100);
        prop_assert!((pair.gt_pose.unwrap().q.norm() - 1.0).abs() < 1e-12);
        let warped = pair.p.warped(pair.gt_flow.as_ref().unwrap()).unwrap();
        let occluded = pair.occluded.as_ref().unwrap();
        for (i, &occ) in occluded.iter().enumerate() {
            if !occ {
                let (a, b) = (warped.points()[i], pair.q.points()[i]);
                prop_assert!((0..3).all(|k| (a[k] - b[k]).abs() < 7.0 * r.noise_sigma));
            }
        }
    }
}
