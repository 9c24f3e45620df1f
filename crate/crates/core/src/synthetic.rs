//! Seeded multi-plane scenes with Gaussian noise and uniform outliers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{rotation_about, PointCloud, RigidTransform, UnitVec3, Vec3};
use crate::kent::OrthonormalFrame;

/// Normals whose |cosine| exceeds this count as parallel.
const PARALLEL_COS: f64 = 1.0 - 1e-6;

/// Square patch of side `extent` centred at `offset·normal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: UnitVec3,
    pub offset: f64,
    pub extent: f64,
    pub point_count: usize,
}

impl Plane {
    pub fn new(normal: Vec3, offset: f64, extent: f64, point_count: usize) -> Result<Self> {
        let normal = UnitVec3::try_new(normal, 1e-12)
            .ok_or_else(|| Error::InvalidInput("plane normal must be non-zero".into()))?;
        Ok(Self {
            normal,
            offset,
            extent,
            point_count,
        })
    }

    pub fn centre(&self) -> Vec3 {
        self.normal.into_inner() * self.offset
    }

    /// Signed distance of `p` from the (infinite) plane.
    pub fn residual(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        let frame = OrthonormalFrame::about(&self.normal);
        let (u, v) = (frame.gamma1().into_inner(), frame.gamma2().into_inner());
        let a = (rng.random::<f64>() - 0.5) * self.extent;
        let b = (rng.random::<f64>() - 0.5) * self.extent;
        self.centre() + u * a + v * b
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl OutlierBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| !(min[i] <= max[i])) {
            return Err(Error::InvalidInput("outlier box min must not exceed max".into()));
        }
        Ok(Self { min, max })
    }

    pub fn bounding(points: &[Vec3]) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Self { min, max }
    }

    /// The box scaled by `factor` about its centre.
    pub fn scaled(&self, factor: f64) -> Self {
        let centre = (self.min + self.max) / 2.0;
        let half = (self.max - self.min) / 2.0 * factor;
        Self {
            min: centre - half,
            max: centre + half,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        Vec3::from_fn(|i, _| self.min[i] + rng.random::<f64>() * (self.max[i] - self.min[i]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub planes: Vec<Plane>,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Defaults to the clean points' bounding box scaled by 1.5.
    pub outlier_box: Option<OutlierBox>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.planes.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a scene needs at least 2 planes, got {}",
                self.planes.len()
            )));
        }
        for p in &self.planes {
            if !(p.extent > 0.0 && p.extent.is_finite() && p.offset.is_finite()) {
                return Err(Error::InvalidInput("plane extent must be positive and finite".into()));
            }
            if p.point_count == 0 {
                return Err(Error::InvalidInput("every plane needs at least one point".into()));
            }
        }
        let distinct = self.planes.iter().enumerate().any(|(i, a)| {
            self.planes[i + 1..]
                .iter()
                .any(|b| a.normal.dot(&b.normal).abs() < PARALLEL_COS)
        });
        if !distinct {
            return Err(Error::InvalidInput("plane normals are all parallel".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidInput("noise sigma must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::InvalidInput(format!(
                "outlier fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        Ok(())
    }

    pub fn point_count(&self) -> usize {
        self.planes.iter().map(|p| p.point_count).sum()
    }

    /// Two walls and a floor, the default benchmark scene.
    pub fn room_corner(points_per_plane: usize, seed: u64) -> Self {
        let plane = |n: Vec3, d: f64| Plane::new(n, d, 4.0, points_per_plane).expect("non-zero normal");
        Self {
            planes: vec![
                plane(Vec3::new(-1.0, 0.0, 0.0), -3.0),
                plane(Vec3::new(0.0, -1.0, 0.0), -3.0),
                plane(Vec3::new(0.0, 0.0, 1.0), -1.5),
            ],
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_box: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub outlier: Vec<bool>,
    /// Source plane of each point; `None` for outliers.
    pub plane: Vec<Option<usize>>,
}

impl Scene {
    pub fn outlier_count(&self) -> usize {
        self.outlier.iter().filter(|&&o| o).count()
    }
}

pub(crate) fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step, so nearby seeds give unrelated streams
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn clean_points(spec: &SceneSpec) -> (Vec<Vec3>, Vec<Option<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, 0));
    let mut points = Vec::with_capacity(spec.point_count());
    let mut labels = Vec::with_capacity(spec.point_count());
    for (i, plane) in spec.planes.iter().enumerate() {
        for _ in 0..plane.point_count {
            points.push(plane.sample(&mut rng));
            labels.push(Some(i));
        }
    }
    (points, labels)
}

fn corrupt(spec: &SceneSpec, mut points: Vec<Vec3>, mut plane: Vec<Option<usize>>, stream: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, stream));
    let bounds = spec
        .outlier_box
        .unwrap_or_else(|| OutlierBox::bounding(&points).scaled(1.5));
    if spec.noise_sigma > 0.0 {
        for p in points.iter_mut() {
            let e = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            *p += e * spec.noise_sigma;
        }
    }
    let n = points.len();
    let count = (spec.outlier_fraction * n as f64).floor() as usize;
    let mut outlier = vec![false; n];
    let mut chosen = rand::seq::index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        points[i] = bounds.sample(&mut rng);
        outlier[i] = true;
        plane[i] = None;
    }
    Ok(Scene {
        cloud: PointCloud::new(points)?,
        outlier,
        plane,
    })
}

/// Uniform points on each plane patch, Gaussian noise of `noise_sigma`, then
/// `⌊outlier_fraction·N⌋` points replaced by uniform draws in the outlier box.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (points, plane) = clean_points(spec);
    corrupt(spec, points, plane, 1)
}

/// A model scene and an observed scene `T_true(model)` that share the clean
/// plane samples but draw their noise and outliers independently.
pub fn make_pair(spec: &SceneSpec, t_true: &RigidTransform) -> Result<(Scene, Scene)> {
    spec.validate()?;
    let (points, plane) = clean_points(spec);
    let model = corrupt(spec, points.clone(), plane.clone(), 1)?;
    let mut observed = corrupt(spec, points, plane, 2)?;
    observed.cloud = observed.cloud.transformed(t_true);
    Ok((model, observed))
}

/// Rotation about a uniform random axis by an angle uniform in
/// `[0, max_angle]`, translation in a uniform random direction with length
/// uniform in `[0, max_translation]`.
pub fn random_transform<R: Rng + ?Sized>(rng: &mut R, max_angle: f64, max_translation: f64) -> RigidTransform {
    let mut direction = || loop {
        let v = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() > 1e-9 {
            return v.normalize();
        }
    };
    let axis = direction();
    let shift = direction();
    let angle = rng.random::<f64>() * max_angle;
    let length = rng.random::<f64>() * max_translation;
    RigidTransform::new(rotation_about(&axis, angle), shift * length)
}
