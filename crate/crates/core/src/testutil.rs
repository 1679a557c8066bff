//! Small fixtures shared by unit tests.

use rand::Rng;

use crate::encoder::{Encoder, PyramidConfig, PyramidGeometry, PyramidLevel};
use crate::geometry::Point;
use crate::init_heads::InitWidths;
use crate::tensor::{Graph, ParamStore, Real, Tensor};

pub fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Point> {
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

pub fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn shifted(points: &[Point], d: Point) -> Vec<Point> {
    points.iter().map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]).collect()
}

/// 32 input points, levels of 16 / 12 / 8 / 4.
pub fn tiny_pyramid() -> PyramidConfig {
    PyramidConfig {
        input_points: 32,
        level_sizes: [16, 12, 8, 4],
        widths: [4, 5, 6, 7],
        k_enc: 4,
        k_up: 3,
    }
}

pub fn tiny_widths() -> InitWidths {
    InitWidths {
        cv: 5,
        flow: 6,
        occ: 3,
        pose: 4,
        k_enc: 4,
        k_up: 3,
        k1: 3,
        k2: 2,
        k_local: 3,
    }
}

pub struct Frames {
    pub geom_p: PyramidGeometry,
    pub geom_q: PyramidGeometry,
}

pub fn frames(rng: &mut impl Rng, cfg: &PyramidConfig, motion: Point) -> Frames {
    let p = cloud(rng, cfg.input_points);
    let q: Vec<Point> = shifted(&p, motion)
        .into_iter()
        .map(|x| [x[0] + rng.random_range(-0.01..0.01), x[1], x[2]])
        .collect();
    Frames {
        geom_p: PyramidGeometry::build(&p, cfg).unwrap(),
        geom_q: PyramidGeometry::build(&q, cfg).unwrap(),
    }
}

pub fn encode(g: &mut Graph, store: &ParamStore, enc: &Encoder, f: &Frames) -> (Vec<PyramidLevel>, Vec<PyramidLevel>) {
    (
        enc.forward(g, store, &f.geom_p).unwrap(),
        enc.forward(g, store, &f.geom_q).unwrap(),
    )
}

pub fn assert_close(a: &[Real], b: &[Real], tol: Real) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

/// Whole network on the tiny pyramid with narrow heads.
pub fn tiny_net() -> crate::model::NetConfig {
    crate::model::NetConfig {
        pyramid: tiny_pyramid(),
        head_widths: [6, 6, 8, 8],
        k1: 3,
        k2: 2,
        k_local: 3,
        dropout: 0.5,
        refine: Default::default(),
    }
}
