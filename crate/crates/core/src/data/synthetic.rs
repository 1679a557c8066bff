use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FramePair;
use crate::error::{Error, Result};
use crate::geometry::{pose_apply, sub, FlowField, Point, PointCloud, Pose, Quaternion};
use crate::tensor::Real;

/// Mean radius of the background band (m).
const BAND_RADIUS: f64 = 2.0;
/// Half height of the background band (m); the floor sits at `-BAND_HALF_HEIGHT`.
const BAND_HALF_HEIGHT: f64 = 0.5;
/// Share of background points on the floor disk.
const FLOOR_SHARE: f64 = 0.25;
/// Share of the cloud given to each object.
const OBJECT_SHARE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneRecipe {
    pub n_points: usize,
    pub n_objects: usize,
    /// Edge length of the object boxes (m).
    pub object_extent: f64,
    /// Bound on the ego rotation angle (degrees).
    pub ego_rotation_deg: f64,
    /// Bound on the ego translation norm (m).
    pub ego_translation: f64,
    /// Bound on each object's translation (m).
    pub object_motion: f64,
    /// Fraction of first-frame points hidden in the second frame.
    pub occlusion_fraction: f64,
    /// Standard deviation of the Gaussian noise added to the second frame (m).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        Self {
            n_points: 512,
            n_objects: 2,
            object_extent: 0.4,
            ego_rotation_deg: 5.0,
            ego_translation: 0.2,
            object_motion: 0.2,
            occlusion_fraction: 0.1,
            noise_sigma: 0.005,
            seed: 0,
        }
    }
}

impl SceneRecipe {
    pub fn validate(&self) -> Result<()> {
        let bounds = [
            ("object_extent", self.object_extent),
            ("ego_rotation_deg", self.ego_rotation_deg),
            ("ego_translation", self.ego_translation),
            ("object_motion", self.object_motion),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, v) in bounds {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return Err(Error::Config(format!(
                "occlusion_fraction = {} outside [0, 1)",
                self.occlusion_fraction
            )));
        }
        if self.ego_rotation_deg > 180.0 {
            return Err(Error::Config(format!(
                "ego_rotation_deg = {} exceeds 180",
                self.ego_rotation_deg
            )));
        }
        if self.n_objects > 0 && self.object_extent <= 0.0 {
            return Err(Error::Config("objects need a positive extent".into()));
        }
        if self.object_extent > BAND_RADIUS / 2.0 {
            return Err(Error::Config(format!(
                "object_extent = {} does not fit inside the scene",
                self.object_extent
            )));
        }
        let object_points = self.n_objects * self.object_points();
        if self.n_points == 0 || object_points >= self.n_points {
            return Err(Error::Config(format!(
                "{} points cannot hold a background and {} objects",
                self.n_points, self.n_objects
            )));
        }
        Ok(())
    }

    fn object_points(&self) -> usize {
        ((self.n_points as f64 * OBJECT_SHARE).round() as usize).max(1)
    }

    /// Number of first-frame points labeled occluded: `⌈fraction · N⌉`.
    pub fn occluded_count(&self) -> usize {
        (self.occlusion_fraction * self.n_points as f64).ceil() as usize
    }
}

/// Smooth random radial profile of the background band.
struct Band {
    harmonics: Vec<(f64, f64, f64)>,
}

impl Band {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let harmonics = (2..=5)
            .map(|k| (k as f64, rng.random_range(0.03..0.1), rng.random_range(0.0..2.0 * PI)))
            .collect();
        Self { harmonics }
    }

    fn radius(&self, theta: f64, z: f64) -> f64 {
        let wobble: f64 = self.harmonics.iter().map(|(k, a, ph)| a * (k * theta + ph).sin()).sum();
        BAND_RADIUS * (1.0 + wobble + 0.08 * (3.0 * z + theta).cos())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        let theta = rng.random_range(0.0..2.0 * PI);
        if rng.random_bool(FLOOR_SHARE) {
            let r = self.radius(theta, -BAND_HALF_HEIGHT) * rng.random::<f64>().sqrt();
            to_point([r * theta.cos(), r * theta.sin(), -BAND_HALF_HEIGHT])
        } else {
            let z = rng.random_range(-BAND_HALF_HEIGHT..BAND_HALF_HEIGHT);
            let r = self.radius(theta, z);
            to_point([r * theta.cos(), r * theta.sin(), z])
        }
    }
}

fn to_point(p: [f64; 3]) -> Point {
    [p[0] as Real, p[1] as Real, p[2] as Real]
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn random_ego(rng: &mut ChaCha8Rng, r: &SceneRecipe) -> Result<Pose> {
    let axis = random_unit(rng);
    let angle = if r.ego_rotation_deg > 0.0 {
        rng.random_range(-r.ego_rotation_deg..=r.ego_rotation_deg).to_radians()
    } else {
        0.0
    };
    let q = if angle == 0.0 {
        Quaternion::IDENTITY
    } else {
        Quaternion::from_axis_angle(to_point(axis), angle as Real)?
    };
    let dir = random_unit(rng);
    let mag = if r.ego_translation > 0.0 {
        rng.random_range(0.0..=r.ego_translation)
    } else {
        0.0
    };
    Ok(Pose::new(q, to_point([dir[0] * mag, dir[1] * mag, dir[2] * mag])))
}

/// One labeled pair: a static background band and floor, plus boxes that
/// translate independently of the ego motion.
pub fn gen_synthetic_pair(recipe: &SceneRecipe) -> Result<FramePair> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let n = recipe.n_points;
    let band = Band::new(&mut rng);
    let gt_pose = random_ego(&mut rng, recipe)?;

    let mut p: Vec<Point> = Vec::with_capacity(n);
    let mut motion: Vec<Option<Point>> = Vec::with_capacity(n);
    let per_object = recipe.object_points();
    let half = recipe.object_extent / 2.0;
    for _ in 0..recipe.n_objects {
        let theta = rng.random_range(0.0..2.0 * PI);
        let rho = rng.random_range(0.35..0.7) * BAND_RADIUS;
        let center = [rho * theta.cos(), rho * theta.sin(), -BAND_HALF_HEIGHT + half];
        let heading = rng.random_range(0.0..2.0 * PI);
        let mag = if recipe.object_motion > 0.0 {
            rng.random_range(0.5 * recipe.object_motion..=recipe.object_motion)
        } else {
            0.0
        };
        let d = to_point([mag * heading.cos(), mag * heading.sin(), 0.0]);
        for _ in 0..per_object {
            let o: [f64; 3] = [
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
            ];
            p.push(to_point([center[0] + o[0], center[1] + o[1], center[2] + o[2]]));
            motion.push(Some(d));
        }
    }
    while p.len() < n {
        p.push(band.sample(&mut rng));
        motion.push(None);
    }

    // Objects move in first-frame coordinates; the sensor motion is applied on top.
    let mut q = Vec::with_capacity(n);
    let mut flow = Vec::with_capacity(n);
    for (pt, m) in p.iter().zip(&motion) {
        let moved = match m {
            Some(d) => [pt[0] + d[0], pt[1] + d[1], pt[2] + d[2]],
            None => *pt,
        };
        let qt = pose_apply(&gt_pose, &moved)?;
        flow.push(sub(&qt, pt));
        q.push(qt);
    }

    let n_occ = recipe.occluded_count();
    let mut occluded = vec![false; n];
    if n_occ > 0 {
        let center = rng.random_range(-PI..PI);
        let mut order: Vec<(f64, usize)> = p
            .iter()
            .enumerate()
            .map(|(i, pt)| {
                let a = (pt[1] as f64).atan2(pt[0] as f64) - center;
                (a.sin().atan2(a.cos()).abs(), i)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        // The hidden slots of the second frame are refilled with newly
        // revealed background so both frames keep N points.
        for &(_, i) in order.iter().take(n_occ) {
            occluded[i] = true;
            q[i] = pose_apply(&gt_pose, &band.sample(&mut rng))?;
        }
    }

    if recipe.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, recipe.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for pt in &mut q {
            for v in pt.iter_mut() {
                *v += normal.sample(&mut rng) as Real;
            }
        }
    }

    let pair = FramePair {
        p: PointCloud::new(p)?,
        q: PointCloud::new(q)?,
        gt_flow: Some(FlowField::new(flow)?),
        gt_pose: Some(gt_pose),
        dynamic: Some(motion.iter().map(Option::is_some).collect()),
        occluded: Some(occluded),
    };
    pair.validate()?;
    Ok(pair)
}
