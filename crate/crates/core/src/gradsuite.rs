//! Finite-difference verification of every differentiable operation, every
//! differentiable building block and the end-to-end training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costvolume::{
    occlusion_blend, occlusion_head, position_encoding, AttentiveCostVolume, OccPerceptionCostVolume,
};
use crate::data::{gen_synthetic_pair, SceneRecipe};
use crate::error::{Error, Result};
use crate::geometry::{knn, pose_apply_var, three_nn_interpolate_var, Point, Quaternion};
use crate::init_heads::{normalize_quat, point_softmax, weighted_pool, Dropout, MaskHeads, PoseRegressor};
use crate::losses::{
    chamfer_loss, idw3_interpolate, laplacian_loss, laplacian_vectors, pose_loss_level, smoothness_loss, PoseTarget,
    Uncertainty,
};
use crate::model::NetConfig;
use crate::refinement::{blend_weight, compose_residual, warp_with_weight, WarpMask};
use crate::tensor::{
    finite_diff_check_where, GradCheckReport, Graph, Mlp, MlpSpec, ParamId, ParamStore, Part, Real, Tensor, Var,
};
use crate::train::{Model, Stage, TrainConfig};

#[cfg(not(feature = "f32"))]
pub const GRAD_TOL: Real = 1e-5;
#[cfg(feature = "f32")]
pub const GRAD_TOL: Real = 1e-3;

#[cfg(not(feature = "f32"))]
const STEP: Real = 1e-6;
#[cfg(feature = "f32")]
const STEP: Real = 1e-2;

#[cfg(not(feature = "f32"))]
const NETWORK_STEP: Real = 1e-4;
#[cfg(feature = "f32")]
const NETWORK_STEP: Real = 1e-2;

/// Largest share of perturbed entries allowed to sit on a kink.
pub const MAX_KINK_FRACTION: Real = 0.01;

/// Entries perturbed per parameter tensor in the network checks.
const NETWORK_ENTRIES: usize = 3;

pub const MODULES: [&str; 7] = [
    "tensor",
    "geometry",
    "losses",
    "costvolume",
    "init_heads",
    "refinement",
    "network",
];

/// Parameter groups of the end-to-end check, by name prefix.
const NETWORK_GROUPS: [(&str, &[&str]); 6] = [
    ("encoder", &["enc."]),
    ("cost volumes", &["cvinit.", "cv."]),
    ("flow heads", &["flow."]),
    ("pose heads", &["pose.init"]),
    ("pose refinement", &["pose.l"]),
    ("loss weights", &["loss."]),
];

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: String,
    pub report: GradCheckReport,
    /// Judged by the error pooled over the whole parameter group rather
    /// than the worst single parameter.
    pub pooled: bool,
}

impl CheckResult {
    pub fn rel_err(&self) -> Real {
        if self.pooled {
            self.report.pooled_rel_err
        } else {
            self.report.max_rel_err
        }
    }

    pub fn passed(&self) -> bool {
        if self.pooled {
            self.report.passes_pooled(GRAD_TOL, MAX_KINK_FRACTION)
        } else {
            self.report.passes(GRAD_TOL, MAX_KINK_FRACTION)
        }
    }
}

/// Runs the checks of one module, or of all of them.
pub fn run(module: Option<&str>) -> Result<Vec<CheckResult>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!(
                "unknown module '{m}', expected one of {}",
                MODULES.join(", ")
            )));
        }
    }
    let mut out = Vec::new();
    for m in MODULES {
        if module.is_some_and(|x| x != m) {
            continue;
        }
        let mut s = Suite {
            module: m,
            results: &mut out,
        };
        match m {
            "tensor" => tensor_ops(&mut s)?,
            "geometry" => geometry(&mut s)?,
            "losses" => losses(&mut s)?,
            "costvolume" => costvolume(&mut s)?,
            "init_heads" => init_heads(&mut s)?,
            "refinement" => refinement(&mut s)?,
            _ => network(&mut s)?,
        }
    }
    Ok(out)
}

struct Suite<'a> {
    module: &'static str,
    results: &'a mut Vec<CheckResult>,
}

/// Fixed pseudo-random weights that turn an output into a scalar.
fn mix(shape: &[usize]) -> Tensor {
    let n = shape.iter().product::<usize>();
    let data = (0..n).map(|i| (i as Real * 0.7389 + 0.31).sin()).collect();
    Tensor::new(shape, data).expect("mix shape")
}

fn contract(g: &mut Graph, out: Var) -> Result<Var> {
    let w = mix(g.value(out).shape());
    let m = g.mul_const(out, &w)?;
    Ok(g.sum_all(m))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    let n = shape.iter().product::<usize>();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("uniform shape")
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
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

fn points(p: &[Point]) -> Tensor {
    Tensor::from_rows(p).expect("point rows")
}

fn unit_quat(rng: &mut ChaCha8Rng) -> Quaternion {
    let v: Vec<Real> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    Quaternion::new(v[0] + 1.5, v[1], v[2], v[3]).normalized()
}

fn quat_tensor(q: Quaternion) -> Tensor {
    Tensor::new(&[1, 4], q.to_array().to_vec()).expect("quaternion shape")
}

impl Suite<'_> {
    fn record(&mut self, name: &str, report: GradCheckReport, pooled: bool) {
        self.results.push(CheckResult {
            module: self.module,
            name: name.to_string(),
            report,
            pooled,
        });
    }

    /// Checks `f` with respect to every parameter already in `store`.
    fn check<F>(&mut self, name: &str, store: &mut ParamStore, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    {
        let objective = |g: &mut Graph, s: &ParamStore| {
            let o = f(g, s)?;
            contract(g, o)
        };
        let r = finite_diff_check_where(objective, store, STEP, None, |_| true)?;
        self.record(name, r, false);
        Ok(())
    }

    /// Checks `f` with respect to fresh inputs holding `inputs`.
    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.insert(format!("x{i}"), t))
            .collect::<Result<_>>()?;
        self.check(name, &mut store, |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            f(g, &vars)
        })
    }
}

fn tensor_ops(s: &mut Suite) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = &mut rng;
    let m43 = |r: &mut ChaCha8Rng| uniform(r, &[4, 3], -1.0, 1.0);

    s.op(
        "linear",
        vec![
            uniform(r, &[5, 4], -1.0, 1.0),
            uniform(r, &[4, 3], -1.0, 1.0),
            uniform(r, &[3], -1.0, 1.0),
        ],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    )?;
    s.op(
        "linear_rows",
        vec![
            uniform(r, &[5, 2], -1.0, 1.0),
            uniform(r, &[6, 3], -1.0, 1.0),
            uniform(r, &[3], -1.0, 1.0),
        ],
        |g, v| g.linear_rows(v[0], v[1], 2, Some(v[2])),
    )?;
    s.op(
        "matmul",
        vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
        |g, v| g.matmul(v[0], v[1]),
    )?;
    s.op("add", vec![m43(r), m43(r)], |g, v| g.add(v[0], v[1]))?;
    s.op("sub", vec![m43(r), m43(r)], |g, v| g.sub(v[0], v[1]))?;
    s.op("mul", vec![m43(r), m43(r)], |g, v| g.mul(v[0], v[1]))?;
    s.op("lerp", vec![uniform(r, &[4, 3], 0.0, 1.0), m43(r), m43(r)], |g, v| {
        g.lerp(v[0], v[1], v[2])
    })?;
    s.op("mul_scalar", vec![m43(r), uniform(r, &[1], -2.0, 2.0)], |g, v| {
        g.mul_scalar(v[0], v[1])
    })?;
    let c = m43(r);
    s.op("mul_const", vec![m43(r)], move |g, v| g.mul_const(v[0], &c))?;
    s.op("affine", vec![m43(r)], |g, v| Ok(g.affine(v[0], 1.7, -0.3)))?;
    s.op("scale", vec![m43(r)], |g, v| Ok(g.scale(v[0], -0.6)))?;
    s.op("neg", vec![m43(r)], |g, v| Ok(g.neg(v[0])))?;
    s.op("one_minus", vec![m43(r)], |g, v| Ok(g.one_minus(v[0])))?;
    s.op("relu", vec![m43(r)], |g, v| Ok(g.relu(v[0])))?;
    s.op("sigmoid", vec![uniform(r, &[4, 3], -3.0, 3.0)], |g, v| {
        Ok(g.sigmoid(v[0]))
    })?;
    s.op("exp", vec![m43(r)], |g, v| Ok(g.exp(v[0])))?;
    s.op("abs", vec![m43(r)], |g, v| Ok(g.abs(v[0])))?;
    s.op("sqrt", vec![uniform(r, &[4, 3], 0.2, 2.0)], |g, v| Ok(g.sqrt(v[0])))?;
    s.op("square", vec![m43(r)], |g, v| Ok(g.square(v[0])))?;
    s.op("recip", vec![uniform(r, &[4, 3], 0.5, 2.0)], |g, v| Ok(g.recip(v[0])))?;
    s.op("gather", vec![uniform(r, &[5, 3], -1.0, 1.0)], |g, v| {
        g.gather(v[0], &[4, 0, 0, 2, 1, 4])
    })?;
    let w: Vec<Real> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
    s.op("weighted_gather", vec![uniform(r, &[5, 3], -1.0, 1.0)], move |g, v| {
        g.weighted_gather(v[0], &[1, 3, 0, 0, 4, 2], &w, 2)
    })?;
    s.op(
        "concat",
        vec![uniform(r, &[4, 2], -1.0, 1.0), m43(r), uniform(r, &[4, 1], -1.0, 1.0)],
        |g, v| g.concat(v),
    )?;
    s.op("slice_cols", vec![uniform(r, &[4, 5], -1.0, 1.0)], |g, v| {
        g.slice_cols(v[0], 1, 4)
    })?;
    s.op("reshape", vec![m43(r)], |g, v| g.reshape(v[0], &[2, 6]))?;
    s.op("transpose", vec![m43(r)], |g, v| g.transpose(v[0]))?;
    s.op("softmax (rows)", vec![m43(r)], |g, v| g.softmax(v[0], 0))?;
    s.op("softmax (columns)", vec![m43(r)], |g, v| g.softmax(v[0], 1))?;
    s.op(
        "softmax (inner axis)",
        vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
        |g, v| g.softmax(v[0], 1),
    )?;
    s.op("group_softmax", vec![uniform(r, &[6, 3], -1.0, 1.0)], |g, v| {
        g.group_softmax(v[0], 3)
    })?;
    s.op("sum_axis", vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], |g, v| {
        g.sum_axis(v[0], 1)
    })?;
    s.op("group_sum", vec![uniform(r, &[6, 3], -1.0, 1.0)], |g, v| {
        g.group_sum(v[0], 2)
    })?;
    s.op("row_sum", vec![m43(r)], |g, v| g.row_sum(v[0]))?;
    s.op("group_max", vec![uniform(r, &[6, 3], -1.0, 1.0)], |g, v| {
        g.group_max(v[0], 3)
    })?;
    s.op("sum_all", vec![m43(r)], |g, v| Ok(g.sum_all(v[0])))?;
    s.op("expand_cols", vec![uniform(r, &[4, 1], -1.0, 1.0)], |g, v| {
        g.expand_cols(v[0], 3)
    })?;
    s.op(
        "quat_mul",
        vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
        |g, v| g.quat_mul(v[0], v[1]),
    )?;
    s.op("quat_to_rot", vec![quat_tensor(unit_quat(r))], |g, v| {
        g.quat_to_rot(v[0])
    })?;

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", MlpSpec::relu(&[5, 6, 4]), r)?;
    let a = store.insert("a", uniform(r, &[4, 2], -1.0, 1.0))?;
    let b = store.insert("b", uniform(r, &[3, 3], -1.0, 1.0))?;
    let rows = [0, 2, 1, 1];
    s.check("mlp forward_parts", &mut store, |g, st| {
        let (a, b) = (g.param(st, a), g.param(st, b));
        mlp.forward_parts(g, st, &[Part::dense(a), Part::gathered(b, &rows)])
    })?;
    s.op("dropout", vec![uniform(r, &[6, 4], -1.0, 1.0)], |g, v| {
        Dropout::new(0.5, 11)?.apply(g, v[0])
    })
}

fn geometry(s: &mut Suite) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = quat_tensor(unit_quat(&mut rng));
    let t = uniform(&mut rng, &[1, 3], -1.0, 1.0);
    let p = points(&cloud(&mut rng, 10));
    s.op("pose_apply_var", vec![q, t, p], |g, v| {
        pose_apply_var(g, v[0], v[1], v[2])
    })?;
    let targets = cloud(&mut rng, 12);
    let sources = cloud(&mut rng, 8);
    s.op(
        "three_nn_interpolate_var",
        vec![uniform(&mut rng, &[8, 4], -1.0, 1.0)],
        |g, v| three_nn_interpolate_var(g, &targets, &sources, v[0]),
    )
}

fn losses(s: &mut Suite) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pw = points(&cloud(&mut rng, 14));
    let q = points(&cloud(&mut rng, 12));
    s.op("chamfer_loss", vec![pw.clone(), q.clone()], |g, v| {
        chamfer_loss(g, v[0], v[1])
    })?;
    s.op("laplacian_vectors", vec![q.clone()], |g, v| {
        laplacian_vectors(g, v[0], 4)
    })?;
    s.op(
        "idw3_interpolate",
        vec![pw.clone(), q.clone(), uniform(&mut rng, &[12, 3], -1.0, 1.0)],
        |g, v| idw3_interpolate(g, v[0], v[1], v[2]),
    )?;
    s.op("laplacian_loss", vec![pw, q], |g, v| laplacian_loss(g, v[0], v[1], 4))?;
    let p = cloud(&mut rng, 16);
    s.op(
        "smoothness_loss",
        vec![uniform(&mut rng, &[16, 3], -1.0, 1.0)],
        |g, v| smoothness_loss(g, &p, v[0], 8),
    )?;
    let target = PoseTarget {
        q: unit_quat(&mut rng),
        t: [0.4, -0.1, 0.25],
    };
    let qp = quat_tensor(unit_quat(&mut rng));
    let inputs = vec![
        qp,
        uniform(&mut rng, &[1, 3], -1.0, 1.0),
        Tensor::new(&[1], vec![0.3])?,
        Tensor::new(&[1], vec![-1.2])?,
    ];
    s.op("pose_loss_level", inputs, |g, v| {
        pose_loss_level(g, v[0], v[1], &target, Uncertainty { w_x: v[2], w_q: v[3] })
    })
}

fn costvolume(s: &mut Suite) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, m) = (9, 10);
    let pc = cloud(&mut rng, n);
    let qc = cloud(&mut rng, m);
    let nb = knn(&pc, &qc, 3)?;
    s.op("position_encoding", vec![points(&pc), points(&qc)], |g, v| {
        position_encoding(g, v[0], v[1], &nb, 3)
    })?;

    let mut store = ParamStore::new();
    let cv = AttentiveCostVolume::new(&mut store, "cv", 3, 4, 5, 2, 3, 2, &mut rng)?;
    let ids = [
        store.insert("p", points(&pc))?,
        store.insert("fp", uniform(&mut rng, &[n, 3], -1.0, 1.0))?,
        store.insert("q", points(&qc))?,
        store.insert("fq", uniform(&mut rng, &[m, 4], -1.0, 1.0))?,
    ];
    s.check("attentive cost volume", &mut store, |g, st| {
        let v: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
        cv.forward(g, st, v[0], v[1], v[2], v[3])
    })?;

    let mut store = ParamStore::new();
    let fc = Mlp::fc(&mut store, "occ", 4, 1, &mut rng)?;
    let f = store.insert("f_o", uniform(&mut rng, &[n, 4], -1.0, 1.0))?;
    s.check("occlusion_head", &mut store, |g, st| {
        let f = g.param(st, f);
        occlusion_head(g, st, &fc, f)
    })?;

    let inputs = vec![
        uniform(&mut rng, &[n, 5], -1.0, 1.0),
        uniform(&mut rng, &[n, 1], 0.05, 0.95),
    ];
    s.op("occlusion_blend", inputs, |g, v| {
        let (cv_o, cv_local) = occlusion_blend(g, v[0], v[1], &pc, 3)?;
        g.concat(&[cv_o, cv_local])
    })?;

    let mut store = ParamStore::new();
    let occ = OccPerceptionCostVolume::new(&mut store, "occcv", 3, 5, 4, 2, 3, 2, 3, &mut rng)?;
    let ids = [
        store.insert("p", points(&pc))?,
        store.insert("fp", uniform(&mut rng, &[n, 3], -1.0, 1.0))?,
        store.insert("q", points(&qc))?,
        store.insert("fq", uniform(&mut rng, &[m, 3], -1.0, 1.0))?,
        store.insert("prior", uniform(&mut rng, &[n, 2], -1.0, 1.0))?,
    ];
    s.check("occlusion-aware cost volume", &mut store, |g, st| {
        let v: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
        let o = occ.forward(g, st, v[0], v[1], v[2], v[3], v[4])?;
        g.concat(&[o.cv_o, o.occ])
    })
}

fn init_heads(s: &mut Suite) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    s.op("normalize_quat", vec![uniform(&mut rng, &[1, 4], -1.0, 1.0)], |g, v| {
        normalize_quat(g, v[0])
    })?;
    s.op("point_softmax", vec![uniform(&mut rng, &[7, 3], -1.0, 1.0)], |g, v| {
        point_softmax(g, v[0])
    })?;
    s.op(
        "weighted_pool",
        vec![
            uniform(&mut rng, &[7, 3], 0.0, 1.0),
            uniform(&mut rng, &[7, 3], -1.0, 1.0),
        ],
        |g, v| weighted_pool(g, v[0], v[1]),
    )?;

    let mut store = ParamStore::new();
    let reg = PoseRegressor::new(&mut store, "reg", 5, 6, &mut rng)?;
    let pooled = store.insert("pooled", uniform(&mut rng, &[1, 5], -1.0, 1.0))?;
    s.check("pose regressor", &mut store, |g, st| {
        let x = g.param(st, pooled);
        let (q, t) = reg.forward(g, st, x, &mut Dropout::new(0.5, 3)?)?;
        g.concat(&[q, t])
    })?;

    let mut store = ParamStore::new();
    let heads = MaskHeads::new(&mut store, "mask", 5, 4, &mut rng)?;
    let a = store.insert("a", uniform(&mut rng, &[6, 2], -1.0, 1.0))?;
    let b = store.insert("b", uniform(&mut rng, &[4, 3], -1.0, 1.0))?;
    let rows = [0, 3, 1, 1, 2, 0];
    s.check("mask heads", &mut store, |g, st| {
        let (a, b) = (g.param(st, a), g.param(st, b));
        let (w, m) = heads.forward(g, st, &[Part::dense(a), Part::gathered(b, &rows)])?;
        g.concat(&[w, m])
    })
}

fn refinement(s: &mut Suite) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (name, mode) in [
        ("blend_weight (literal)", WarpMask::Literal),
        ("blend_weight (inverted)", WarpMask::Inverted),
        ("blend_weight (point softmax)", WarpMask::PointSoftmax),
    ] {
        let inputs = vec![
            uniform(&mut rng, &[6, 1], 0.05, 0.95),
            uniform(&mut rng, &[6, 1], 0.05, 0.95),
        ];
        s.op(name, inputs, move |g, v| blend_weight(g, v[0], v[1], mode))?;
    }
    let inputs = vec![
        points(&cloud(&mut rng, 6)),
        uniform(&mut rng, &[6, 3], -0.5, 0.5),
        quat_tensor(unit_quat(&mut rng)),
        uniform(&mut rng, &[1, 3], -1.0, 1.0),
        uniform(&mut rng, &[6, 1], 0.05, 0.95),
    ];
    s.op("warp_with_weight", inputs, |g, v| {
        Ok(warp_with_weight(g, v[0], v[1], v[2], v[3], v[4])?.p_warp)
    })?;
    let inputs = vec![
        quat_tensor(unit_quat(&mut rng)),
        uniform(&mut rng, &[1, 3], -1.0, 1.0),
        quat_tensor(unit_quat(&mut rng)),
        uniform(&mut rng, &[1, 3], -1.0, 1.0),
    ];
    s.op("compose_residual", inputs, |g, v| {
        let (q, t) = compose_residual(g, v[0], v[1], v[2], v[3])?;
        g.concat(&[q, t])
    })
}

/// Total joint-stage loss of the smallest network configuration on a
/// synthetic pair, checked per parameter group.
fn network(s: &mut Suite) -> Result<()> {
    let net = NetConfig::reduced_tiny();
    let recipe = SceneRecipe {
        n_points: net.pyramid.input_points,
        n_objects: 1,
        seed: 9,
        ..SceneRecipe::default()
    };
    let pair = gen_synthetic_pair(&recipe)?;
    let cfg = TrainConfig {
        net: Some(net),
        ..TrainConfig::default()
    };
    let model = Model::new(&cfg)?;
    let geom = model.geometry(&pair)?;
    let gt = pair.gt_pose;
    let mut store = model.store.clone();
    let objective = |g: &mut Graph, st: &ParamStore| {
        model.loss_with(g, st, &geom, gt.as_ref(), Stage::Joint, &cfg, &mut Dropout::disabled())
    };
    let mut unchecked: Vec<String> = model.store.ids().map(|id| model.store.name(id).to_string()).collect();
    for (group, prefixes) in NETWORK_GROUPS {
        let select = |name: &str| prefixes.iter().any(|p| name.starts_with(p));
        unchecked.retain(|n| !select(n));
        let r = finite_diff_check_where(objective, &mut store, NETWORK_STEP, Some(NETWORK_ENTRIES), select)?;
        s.record(&format!("total loss wrt {group}"), r, true);
    }
    if !unchecked.is_empty() {
        return Err(Error::Config(format!(
            "parameters outside every gradient-check group: {unchecked:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
