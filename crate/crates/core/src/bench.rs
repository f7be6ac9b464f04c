//! Synthetic scenes, simulated branch descriptors and the evaluation harness.
//!
//! All randomness comes from `ChaCha8Rng` seeded with `seed_from_u64`. The
//! scene, image branch and geometric branch of a trial draw from streams 0,
//! 1 and 2 of their respective seeds, so the branches stay independent even
//! when their seeds coincide.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureField, ViewFeatureStack};
use crate::geometry::{PointCloud, RigidTransform};
use crate::pipeline::{BranchInputs, FusionMode, GeoBranch, ImageBranch, PipelineConfig, Scorer};
use crate::pose::{mutual_nn_match, robust_register, rre, rte};

pub const GENERATOR: &str = "ChaCha8";

const SCENE_STREAM: u64 = 0;
const IMG_STREAM: u64 = 1;
const GEO_STREAM: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub n_points: usize,
    /// Edge length of the cube points are drawn from (meters).
    pub extent: f64,
    /// Fraction of source points that have a true partner in the target.
    pub overlap: f64,
    /// Rotation angle of the ground-truth transform about a random axis.
    pub rotation_deg: f64,
    /// Length of the ground-truth translation along a random direction.
    pub translation_m: f64,
    /// Gaussian noise added to target points (meters).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_points: 1000,
            extent: 3.0,
            overlap: 0.5,
            rotation_deg: 30.0,
            translation_m: 1.0,
            noise_sigma: 0.005,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("scene: {m}")));
        if self.n_points == 0 {
            return bad("n_points must be at least 1");
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad("extent must be positive");
        }
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            return bad("overlap must lie in (0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        if !(self.rotation_deg.is_finite() && self.translation_m.is_finite()) {
            return bad("transform magnitudes must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub src: PointCloud,
    pub tgt: PointCloud,
    pub gt: RigidTransform,
    /// `(src, tgt)` index pairs of true correspondences.
    pub gt_pairs: Vec<(usize, usize)>,
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Builds a source cloud, a transformed noisy target and the true pairs.
///
/// The first `round(overlap * n)` source points reappear, transformed and
/// perturbed, at the same target indices. The remaining target points are
/// distractors drawn from the transformed cube, so both clouds hold points
/// without a partner.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, SCENE_STREAM);
    let axis = unit_vector(&mut rng);
    let dir = unit_vector(&mut rng);
    let gt = if spec.rotation_deg == 0.0 {
        let t = dir * spec.translation_m;
        RigidTransform::from_translation(t.x, t.y, t.z)
    } else {
        RigidTransform::from_axis_angle(axis, spec.rotation_deg.to_radians(), dir * spec.translation_m)
    };

    let n = spec.n_points;
    let n_ov = ((spec.overlap * n as f64).round() as usize).clamp(1, n);
    let cube = |rng: &mut ChaCha8Rng| {
        Point3::new(
            rng.random_range(0.0..spec.extent),
            rng.random_range(0.0..spec.extent),
            rng.random_range(0.0..spec.extent),
        )
    };
    let src: Vec<Point3<f64>> = (0..n).map(|_| cube(&mut rng)).collect();
    let mut tgt = Vec::with_capacity(n);
    for p in &src[..n_ov] {
        let noise = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) * spec.noise_sigma;
        tgt.push(gt.apply_point(p) + noise);
    }
    for _ in n_ov..n {
        let p = cube(&mut rng);
        tgt.push(gt.apply_point(&p));
    }
    Ok(Scene {
        src: PointCloud::from_points(src),
        tgt: PointCloud::from_points(tgt),
        gt,
        gt_pairs: (0..n_ov).map(|i| (i, i)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchSimSpec {
    pub d: usize,
    /// Weight of the view-independent latent in `[0, 1]`. At 1 every view
    /// of a point carries the same descriptor; lower values make views of
    /// the same point differ, with true partners still agreeing view by view.
    pub signal: f64,
    /// Norm of the independent Gaussian perturbation added to each side.
    pub noise: f64,
    /// Fraction of points per side whose descriptors are replaced by
    /// independent random ones.
    pub outlier_fraction: f64,
    /// Views per side are `k * k`; the geometric branch uses `k = 1`.
    pub k: usize,
    pub seed: u64,
}

impl BranchSimSpec {
    pub fn default_img() -> Self {
        Self {
            d: 24,
            signal: 0.3,
            noise: 1.0,
            outlier_fraction: 0.3,
            k: 4,
            seed: 0,
        }
    }

    pub fn default_geo() -> Self {
        Self {
            d: 256,
            signal: 1.0,
            noise: 2.0,
            outlier_fraction: 0.3,
            k: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("branch simulation: {m}")));
        if self.d == 0 || self.k == 0 {
            return bad("d and k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return bad("signal must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

impl Default for BranchSimSpec {
    fn default() -> Self {
        Self::default_geo()
    }
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Simulates one branch: `(src, tgt)` stacks of shape `(k*k, N, d)`.
///
/// A point's view-`v` descriptor is
/// `normalize(signal * z + sqrt(1 - signal^2) * u_v + noise * g)` with unit
/// latents `z`, `u_v` shared by true partners and `g ~ N(0, I/d)` drawn per
/// side. Outlier points get independent random unit descriptors in every
/// view.
pub fn simulate_branch(
    spec: &BranchSimSpec,
    scene: &Scene,
    stream: u64,
) -> Result<(Array3<f32>, Array3<f32>)> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, stream);
    let (d, views) = (spec.d, spec.k * spec.k);
    let (n_src, n_tgt) = (scene.src.len(), scene.tgt.len());
    let (a, b) = (spec.signal, (1.0 - spec.signal * spec.signal).max(0.0).sqrt());

    // latents: z followed by one u per view
    let latent = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..=views).map(|_| random_direction(rng, d)).collect()
    };
    let src_latent: Vec<Vec<Vec<f64>>> = (0..n_src).map(|_| latent(&mut rng)).collect();
    let mut partner = vec![None; n_tgt];
    for &(i, j) in &scene.gt_pairs {
        partner[j] = Some(i);
    }
    let tgt_latent: Vec<Option<Vec<Vec<f64>>>> = partner
        .iter()
        .map(|p| match p {
            Some(_) => None,
            None => Some(latent(&mut rng)),
        })
        .collect();

    let scale = spec.noise / (d as f64).sqrt();
    let mut draw_side = |lat: &[&Vec<Vec<f64>>]| {
        let n = lat.len();
        let mut out = Array3::<f32>::zeros((views, n, d));
        for i in 0..n {
            let outlier = rng.random_bool(spec.outlier_fraction);
            for v in 0..views {
                let desc: Vec<f64> = if outlier {
                    random_direction(&mut rng, d)
                } else {
                    let l = lat[i];
                    (0..d)
                        .map(|c| {
                            a * l[0][c] + b * l[v + 1][c] + scale * rng.sample::<f64, _>(StandardNormal)
                        })
                        .collect()
                };
                let norm = desc.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (c, x) in desc.iter().enumerate() {
                    out[[v, i, c]] = if norm > 0.0 { (x / norm) as f32 } else { 0.0 };
                }
            }
        }
        out
    };
    let src_refs: Vec<&Vec<Vec<f64>>> = src_latent.iter().collect();
    let tgt_refs: Vec<&Vec<Vec<f64>>> = (0..n_tgt)
        .map(|j| match &tgt_latent[j] {
            Some(l) => l,
            None => &src_latent[partner[j].unwrap()],
        })
        .collect();
    let src = draw_side(&src_refs);
    let tgt = draw_side(&tgt_refs);
    Ok((src, tgt))
}

#[derive(Debug, Clone)]
pub struct SimulatedBranches {
    pub img_src: ViewFeatureStack,
    pub img_tgt: ViewFeatureStack,
    pub geo_src: FeatureField,
    pub geo_tgt: FeatureField,
}

impl SimulatedBranches {
    pub fn inputs(&self) -> BranchInputs<'_> {
        BranchInputs {
            img: Some(ImageBranch {
                src: &self.img_src,
                tgt: &self.img_tgt,
                src_coverage: None,
            }),
            geo: Some(GeoBranch {
                src: &self.geo_src,
                tgt: &self.geo_tgt,
            }),
        }
    }
}

pub fn simulate_branches(
    scene: &Scene,
    img: &BranchSimSpec,
    geo: &BranchSimSpec,
) -> Result<SimulatedBranches> {
    let (is, it) = simulate_branch(img, scene, IMG_STREAM)?;
    let geo_single = BranchSimSpec { k: 1, ..geo.clone() };
    let (gs, gt) = simulate_branch(&geo_single, scene, GEO_STREAM)?;
    let flat = |a: Array3<f32>| a.index_axis_move(ndarray::Axis(0), 0);
    Ok(SimulatedBranches {
        img_src: ViewFeatureStack::new(img.k, is)?,
        img_tgt: ViewFeatureStack::new(img.k, it)?,
        geo_src: FeatureField::new(flat(gs))?,
        geo_tgt: FeatureField::new(flat(gt))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Matches with confidence at or above this value are emitted.
    pub threshold: f64,
    /// Interpolated precision: the best raw precision at this or any lower
    /// threshold.
    pub precision: f64,
    pub recall: f64,
    pub emitted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub radius: f64,
    pub n_gt: usize,
    /// Ordered by decreasing threshold. The first point has threshold
    /// `+inf`, no emitted matches, precision 1 and recall 0.
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// Raw precision of the full mutual-NN match set (1 when empty).
    pub fn final_precision(&self) -> f64 {
        let last = self.points.last().unwrap();
        if last.emitted == 0 {
            1.0
        } else {
            last.correct as f64 / last.emitted as f64
        }
    }

    /// Interpolated precision at recall `r`, or `None` if never reached.
    pub fn precision_at_recall(&self, r: f64) -> Option<f64> {
        self.points.iter().find(|p| p.recall >= r).map(|p| p.precision)
    }

    pub fn max_recall(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.recall)
    }
}

/// Precision-recall sweep over the mutual nearest neighbors of `scores`.
///
/// A match `(i, j)` is correct when `|gt(src_i) - tgt_j| <= radius`; recall
/// divides by `n_gt`. Matches with equal confidence enter together.
pub fn pr_curve(
    scores: &Array2<f64>,
    src: &PointCloud,
    tgt: &PointCloud,
    gt: &RigidTransform,
    n_gt: usize,
    radius: f64,
) -> Result<PrCurve> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidParameter(format!("radius must be positive, got {radius}")));
    }
    if scores.dim() != (src.len(), tgt.len()) {
        return Err(Error::DimensionMismatch(format!(
            "score matrix {:?} vs clouds {}x{}",
            scores.dim(),
            src.len(),
            tgt.len()
        )));
    }
    let mut matches: Vec<(f64, bool)> = mutual_nn_match(scores)
        .pairs
        .iter()
        .map(|c| {
            let d = (gt.apply_point(&src.points()[c.src]) - tgt.points()[c.tgt]).norm();
            (c.confidence, d <= radius)
        })
        .collect();
    matches.sort_by(|x, y| y.0.total_cmp(&x.0));

    let recall = |correct: usize| {
        if n_gt == 0 {
            0.0
        } else {
            (correct as f64 / n_gt as f64).min(1.0)
        }
    };
    let mut points = vec![PrPoint {
        threshold: f64::INFINITY,
        precision: 1.0,
        recall: 0.0,
        emitted: 0,
        correct: 0,
    }];
    let (mut emitted, mut correct) = (0, 0);
    let mut i = 0;
    while i < matches.len() {
        let t = matches[i].0;
        while i < matches.len() && matches[i].0 == t {
            emitted += 1;
            correct += matches[i].1 as usize;
            i += 1;
        }
        points.push(PrPoint {
            threshold: t,
            precision: correct as f64 / emitted as f64,
            recall: recall(correct),
            emitted,
            correct,
        });
    }
    let mut best: f64 = 0.0;
    for p in points.iter_mut().skip(1).rev() {
        best = best.max(p.precision);
        p.precision = best;
    }
    Ok(PrCurve {
        radius,
        n_gt,
        points,
    })
}

pub fn scene_pr_curve(scores: &Array2<f64>, scene: &Scene, radius: f64) -> Result<PrCurve> {
    pr_curve(scores, &scene.src, &scene.tgt, &scene.gt, scene.gt_pairs.len(), radius)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Number of trials; trial `t` adds `t` to every spec seed.
    pub seeds: usize,
    pub methods: Vec<FusionMode>,
    pub scene: SceneSpec,
    pub img: BranchSimSpec,
    pub geo: BranchSimSpec,
    pub pipeline: PipelineConfig,
    /// Match-correctness radius for precision and recall (meters).
    pub match_radius: f64,
    pub rotation_thresholds_deg: Vec<f64>,
    pub translation_thresholds_m: Vec<f64>,
    /// Recall step of the aggregated precision-recall table.
    pub recall_step: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            methods: FusionMode::ALL.to_vec(),
            scene: SceneSpec::default(),
            img: BranchSimSpec {
                seed: 1,
                ..BranchSimSpec::default_img()
            },
            geo: BranchSimSpec {
                seed: 2,
                ..BranchSimSpec::default_geo()
            },
            pipeline: PipelineConfig::default(),
            match_radius: 0.05,
            rotation_thresholds_deg: vec![5.0, 10.0, 45.0],
            translation_thresholds_m: vec![0.05, 0.10, 0.25],
            recall_step: 0.05,
        }
    }
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: BenchConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::InvalidParameter("seeds must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter("methods must not be empty".into()));
        }
        if !(self.match_radius > 0.0 && self.match_radius.is_finite()) {
            return Err(Error::InvalidParameter("match_radius must be positive".into()));
        }
        if !(self.recall_step > 0.0 && self.recall_step <= 1.0) {
            return Err(Error::InvalidParameter("recall_step must lie in (0, 1]".into()));
        }
        self.scene.validate()?;
        self.img.validate()?;
        self.geo.validate()?;
        self.pipeline.validate()
    }

    fn trial_specs(&self, t: usize) -> (SceneSpec, BranchSimSpec, BranchSimSpec) {
        let off = t as u64;
        (
            SceneSpec {
                seed: self.scene.seed.wrapping_add(off),
                ..self.scene.clone()
            },
            BranchSimSpec {
                seed: self.img.seed.wrapping_add(off),
                ..self.img.clone()
            },
            BranchSimSpec {
                seed: self.geo.seed.wrapping_add(off),
                ..self.geo.clone()
            },
        )
    }

    pub fn recall_grid(&self) -> Vec<f64> {
        let steps = (1.0 / self.recall_step).floor() as usize;
        (1..=steps).map(|i| i as f64 * self.recall_step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: FusionMode,
    pub seed: usize,
    /// For failed trials these are the errors of the identity estimate.
    pub rre_deg: f64,
    pub rte_m: f64,
    pub n_matches: usize,
    pub n_inliers: usize,
    pub precision: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: FusionMode,
    pub trials: usize,
    pub failures: usize,
    pub mean_rre_deg: f64,
    pub median_rre_deg: f64,
    pub mean_rte_m: f64,
    pub median_rte_m: f64,
    /// Fraction of trials with RRE at or below each rotation threshold.
    pub rotation_accuracy: Vec<f64>,
    /// Fraction of trials with RTE at or below each translation threshold.
    pub translation_accuracy: Vec<f64>,
    pub mean_precision: f64,
    /// Mean interpolated precision per recall grid point, over the trials
    /// whose curve reaches it.
    pub pr_mean_precision: Vec<Option<f64>>,
    /// Number of trials whose curve reaches each recall grid point.
    pub pr_reached: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AndOrComparison {
    /// Recall grid points reached by both operators in every trial.
    pub compared_recalls: Vec<f64>,
    /// Grid points among those where the mean noisy-AND precision falls
    /// below noisy-OR.
    pub violations: Vec<f64>,
    /// Trials in which noisy-AND is below noisy-OR at some recall both
    /// curves reach.
    pub flagged_seeds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub generator: String,
    pub note: String,
    pub config: BenchConfig,
    pub trial_seeds: Vec<usize>,
    pub recall_grid: Vec<f64>,
    pub methods: Vec<MethodSummary>,
    pub and_vs_or: Option<AndOrComparison>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub trials: Vec<TrialRecord>,
    pub curves: Vec<(FusionMode, usize, PrCurve)>,
    pub summary: Summary,
}

impl Report {
    pub fn method(&self, m: FusionMode) -> Option<&MethodSummary> {
        self.summary.methods.iter().find(|s| s.method == m)
    }
}

fn run_trial(cfg: &BenchConfig, t: usize) -> Result<Vec<(TrialRecord, PrCurve)>> {
    let (scene_spec, img_spec, geo_spec) = cfg.trial_specs(t);
    let scene = gen_scene(&scene_spec)?;
    let branches = simulate_branches(&scene, &img_spec, &geo_spec)?;
    let scorer = Scorer::new(branches.inputs(), scene.src.len(), scene.tgt.len())?;
    let robust = cfg.pipeline.robust();
    cfg.methods
        .iter()
        .map(|&method| {
            let scores = scorer.scores(&cfg.pipeline, method)?;
            let curve = scene_pr_curve(&scores, &scene, cfg.match_radius)?;
            let matches = mutual_nn_match(&scores);
            let (transform, n_inliers, success) =
                match robust_register(&matches, &scene.src, &scene.tgt, &robust) {
                    Ok(r) => (r.transform, r.inlier_indices.len(), true),
                    Err(Error::RegistrationFailed(_) | Error::TooFewCorrespondences(_)) => {
                        (RigidTransform::identity(), 0, false)
                    }
                    Err(e) => return Err(e),
                };
            let record = TrialRecord {
                method,
                seed: t,
                rre_deg: rre(&transform.rotation, &scene.gt.rotation),
                rte_m: rte(&transform.translation, &scene.gt.translation),
                n_matches: matches.len(),
                n_inliers,
                precision: curve.final_precision(),
                success,
            };
            Ok((record, curve))
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn summarize(
    cfg: &BenchConfig,
    method: FusionMode,
    trials: &[&TrialRecord],
    curves: &[&PrCurve],
    grid: &[f64],
) -> MethodSummary {
    let rre_v: Vec<f64> = trials.iter().map(|t| t.rre_deg).collect();
    let rte_v: Vec<f64> = trials.iter().map(|t| t.rte_m).collect();
    let frac = |n: usize| n as f64 / trials.len() as f64;
    let mut pr_mean_precision = Vec::with_capacity(grid.len());
    let mut pr_reached = Vec::with_capacity(grid.len());
    for &r in grid {
        let hits: Vec<f64> = curves.iter().filter_map(|c| c.precision_at_recall(r)).collect();
        pr_reached.push(hits.len());
        pr_mean_precision.push((!hits.is_empty()).then(|| mean(&hits)));
    }
    MethodSummary {
        method,
        trials: trials.len(),
        failures: trials.iter().filter(|t| !t.success).count(),
        mean_rre_deg: mean(&rre_v),
        median_rre_deg: median(&rre_v),
        mean_rte_m: mean(&rte_v),
        median_rte_m: median(&rte_v),
        rotation_accuracy: cfg
            .rotation_thresholds_deg
            .iter()
            .map(|&th| frac(rre_v.iter().filter(|&&e| e <= th).count()))
            .collect(),
        translation_accuracy: cfg
            .translation_thresholds_m
            .iter()
            .map(|&th| frac(rte_v.iter().filter(|&&e| e <= th).count()))
            .collect(),
        mean_precision: mean(&trials.iter().map(|t| t.precision).collect::<Vec<_>>()),
        pr_mean_precision,
        pr_reached,
    }
}

fn compare_and_or(
    grid: &[f64],
    and: &MethodSummary,
    or: &MethodSummary,
    and_curves: &[&PrCurve],
    or_curves: &[&PrCurve],
) -> AndOrComparison {
    let mut compared = Vec::new();
    let mut violations = Vec::new();
    for (g, &r) in grid.iter().enumerate() {
        if and.pr_reached[g] == and.trials && or.pr_reached[g] == or.trials {
            compared.push(r);
            if and.pr_mean_precision[g] < or.pr_mean_precision[g] {
                violations.push(r);
            }
        }
    }
    let flagged_seeds = and_curves
        .iter()
        .zip(or_curves)
        .enumerate()
        .filter(|(_, (a, o))| {
            grid.iter().any(|&r| match (a.precision_at_recall(r), o.precision_at_recall(r)) {
                (Some(pa), Some(po)) => pa < po,
                _ => false,
            })
        })
        .map(|(t, _)| t)
        .collect();
    AndOrComparison {
        compared_recalls: compared,
        violations,
        flagged_seeds,
    }
}

/// Runs every method on every trial. Trials run in parallel; the report
/// depends only on the configuration.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<Report> {
    cfg.validate()?;
    let per_trial: Vec<Vec<(TrialRecord, PrCurve)>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|t| run_trial(cfg, t))
        .collect::<Result<_>>()?;

    let mut trials = Vec::new();
    let mut curves = Vec::new();
    for rows in per_trial {
        for (rec, curve) in rows {
            curves.push((rec.method, rec.seed, curve));
            trials.push(rec);
        }
    }

    let grid = cfg.recall_grid();
    let by_method = |m: FusionMode| -> (Vec<&TrialRecord>, Vec<&PrCurve>) {
        (
            trials.iter().filter(|t| t.method == m).collect(),
            curves.iter().filter(|c| c.0 == m).map(|c| &c.2).collect(),
        )
    };
    let mut methods = Vec::new();
    for &m in &cfg.methods {
        if methods.iter().any(|s: &MethodSummary| s.method == m) {
            continue;
        }
        let (t, c) = by_method(m);
        methods.push(summarize(cfg, m, &t, &c, &grid));
    }
    let find = |m| methods.iter().find(|s: &&MethodSummary| s.method == m);
    let and_vs_or = match (find(FusionMode::NoisyAnd), find(FusionMode::NoisyOr)) {
        (Some(a), Some(o)) => Some(compare_and_or(
            &grid,
            a,
            o,
            &by_method(FusionMode::NoisyAnd).1,
            &by_method(FusionMode::NoisyOr).1,
        )),
        _ => None,
    };

    let summary = Summary {
        generator: GENERATOR.into(),
        note: "synthetic scenes and descriptors; noise parameters are chosen for this benchmark \
               and do not model any particular sensor or network"
            .into(),
        config: cfg.clone(),
        trial_seeds: (0..cfg.seeds).collect(),
        recall_grid: grid,
        methods,
        and_vs_or,
    };
    Ok(Report {
        trials,
        curves,
        summary,
    })
}

pub const TRIALS_FILE: &str = "trials.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVES_FILE: &str = "pr_curves.csv";

pub fn trials_csv(report: &Report) -> String {
    let mut s = String::from("method,seed,rre_deg,rte_m,n_matches,n_inliers,precision_at_radius,status\n");
    for t in &report.trials {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            t.method,
            t.seed,
            t.rre_deg,
            t.rte_m,
            t.n_matches,
            t.n_inliers,
            t.precision,
            if t.success { "ok" } else { "failed" }
        );
    }
    s
}

pub fn curves_csv(curves: &[(FusionMode, usize, PrCurve)]) -> String {
    let mut s = String::from("method,seed,threshold,precision,recall,emitted,correct\n");
    for (m, seed, c) in curves {
        for p in &c.points {
            let _ = writeln!(
                s,
                "{m},{seed},{},{},{},{},{}",
                p.threshold, p.precision, p.recall, p.emitted, p.correct
            );
        }
    }
    s
}

/// Writes `trials.csv`, `summary.json` and `pr_curves.csv` into `dir`.
pub fn write_report(report: &Report, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    write(TRIALS_FILE, trials_csv(report))?;
    write(SUMMARY_FILE, serde_json::to_string_pretty(&report.summary)? + "\n")?;
    write(CURVES_FILE, curves_csv(&report.curves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::{posterior_softmax, similarity_geo};
    use crate::features::l2_normalize_rows;

    fn quiet() -> (BranchSimSpec, BranchSimSpec) {
        let img = BranchSimSpec {
            noise: 0.0,
            outlier_fraction: 0.0,
            k: 2,
            ..BranchSimSpec::default_img()
        };
        let geo = BranchSimSpec {
            noise: 0.0,
            outlier_fraction: 0.0,
            ..BranchSimSpec::default_geo()
        };
        (img, geo)
    }

    #[test]
    fn identity_scene_copies_source() {
        let s = gen_scene(&SceneSpec {
            n_points: 200,
            overlap: 1.0,
            noise_sigma: 0.0,
            rotation_deg: 0.0,
            translation_m: 0.0,
            ..SceneSpec::default()
        })
        .unwrap();
        assert_eq!(s.src, s.tgt);
        assert!(s.gt_pairs.iter().enumerate().all(|(i, &p)| p == (i, i)));
    }

    #[test]
    fn half_overlap_pair_count() {
        let s = gen_scene(&SceneSpec {
            n_points: 1000,
            overlap: 0.5,
            ..SceneSpec::default()
        })
        .unwrap();
        assert_eq!(s.gt_pairs.len(), 500);
        assert_eq!(s.tgt.len(), 1000);
    }

    #[test]
    fn scene_is_seed_determined() {
        let spec = SceneSpec {
            seed: 9,
            ..SceneSpec::default()
        };
        let (a, b) = (gen_scene(&spec).unwrap(), gen_scene(&spec).unwrap());
        assert_eq!(a.src, b.src);
        assert_eq!(a.tgt, b.tgt);
        assert_eq!(a.gt, b.gt);
        let c = gen_scene(&SceneSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.src, c.src);
    }

    #[test]
    fn scene_transform_has_requested_magnitude() {
        let s = gen_scene(&SceneSpec::default()).unwrap();
        assert!((rre(&s.gt.rotation, &nalgebra::Matrix3::identity()) - 30.0).abs() < 1e-9);
        assert!((s.gt.translation.norm() - 1.0).abs() < 1e-12);
        for &(i, j) in &s.gt_pairs {
            assert!((s.gt.apply_point(&s.src.points()[i]) - s.tgt.points()[j]).norm() < 0.05);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_scene(&SceneSpec {
            overlap: 0.0,
            ..SceneSpec::default()
        })
        .is_err());
        assert!(gen_scene(&SceneSpec {
            noise_sigma: -1.0,
            ..SceneSpec::default()
        })
        .is_err());
        assert!(BranchSimSpec {
            k: 0,
            ..BranchSimSpec::default_img()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn noiseless_branches_are_exact() {
        let scene = gen_scene(&SceneSpec {
            n_points: 150,
            ..SceneSpec::default()
        })
        .unwrap();
        let (img, geo) = quiet();
        let b = simulate_branches(&scene, &img, &geo).unwrap();
        assert_eq!(b.img_src.views(), 4);
        let sim_geo = similarity_geo(&b.geo_src, &b.geo_tgt).unwrap();
        let sim_img =
            crate::correspondence::similarity_img_maxpool(&b.img_src, &b.img_tgt).unwrap();
        for &(i, j) in &scene.gt_pairs {
            assert!((sim_geo.values[[i, j]] - 1.0).abs() < 1e-6);
            assert!((sim_img.values[[i, j]] - 1.0).abs() < 1e-6);
        }
        let cfg = PipelineConfig::default();
        let scorer = Scorer::new(b.inputs(), 150, 150).unwrap();
        for m in FusionMode::ALL {
            let s = scorer.scores(&cfg, m).unwrap();
            for &(i, j) in &scene.gt_pairs {
                let row = s.row(i);
                let arg = (0..row.len()).fold(0, |a, k| if row[k] > row[a] { k } else { a });
                assert_eq!(arg, j, "{m}");
            }
        }
    }

    #[test]
    fn noisier_descriptors_are_less_similar() {
        let scene = gen_scene(&SceneSpec {
            n_points: 400,
            ..SceneSpec::default()
        })
        .unwrap();
        let mean_true = |noise: f64| {
            let geo = BranchSimSpec {
                noise,
                outlier_fraction: 0.0,
                ..BranchSimSpec::default_geo()
            };
            let b = simulate_branches(&scene, &quiet().0, &geo).unwrap();
            let s = similarity_geo(&b.geo_src, &b.geo_tgt).unwrap();
            mean(&scene.gt_pairs.iter().map(|&(i, j)| s.values[[i, j]]).collect::<Vec<_>>())
        };
        let (lo, mid, hi) = (mean_true(0.2), mean_true(0.8), mean_true(2.0));
        assert!(lo > mid && mid > hi, "{lo} {mid} {hi}");
    }

    #[test]
    fn branches_draw_independent_streams() {
        let scene = gen_scene(&SceneSpec {
            n_points: 50,
            ..SceneSpec::default()
        })
        .unwrap();
        let spec = BranchSimSpec {
            k: 1,
            seed: 5,
            ..BranchSimSpec::default_geo()
        };
        let b = simulate_branches(&scene, &spec, &spec).unwrap();
        assert_ne!(
            b.img_src.view(0).row(0).to_vec(),
            b.geo_src.descriptors().row(0).to_vec()
        );
    }

    #[test]
    fn all_outliers_give_chance_precision() {
        let n = 300;
        let scene = gen_scene(&SceneSpec {
            n_points: n,
            overlap: 1.0,
            ..SceneSpec::default()
        })
        .unwrap();
        let geo = BranchSimSpec {
            outlier_fraction: 1.0,
            ..BranchSimSpec::default_geo()
        };
        // pool several scenes' worth of matches for a tighter estimate
        let mut emitted = 0usize;
        let mut correct = 0usize;
        for seed in 0..10 {
            let b = simulate_branches(&scene, &quiet().0, &BranchSimSpec { seed, ..geo.clone() })
                .unwrap();
            let post = posterior_softmax(
                &similarity_geo(&l2_normalize_rows(&b.geo_src), &l2_normalize_rows(&b.geo_tgt))
                    .unwrap(),
                0.1,
            )
            .unwrap();
            let c = scene_pr_curve(post.values(), &scene, 0.05).unwrap();
            let last = c.points.last().unwrap();
            emitted += last.emitted;
            correct += last.correct;
        }
        // a point's partner is the only target within 5 cm in this sparse scene
        let p0 = 1.0 / n as f64;
        let observed = correct as f64 / emitted as f64;
        let sigma = (p0 * (1.0 - p0) / emitted as f64).sqrt();
        assert!((observed - p0).abs() <= 3.0 * sigma + 1e-12, "{observed} vs {p0} ± {sigma}");
    }

    fn brute_force_counts(scores: &Array2<f64>, scene: &Scene, radius: f64, threshold: f64) -> (usize, usize) {
        let (n, m) = scores.dim();
        let mut emitted = 0;
        let mut correct = 0;
        for i in 0..n {
            for j in 0..m {
                let row_best = (0..m).all(|k| scores[[i, k]] < scores[[i, j]] || (scores[[i, k]] == scores[[i, j]] && k >= j));
                let col_best = (0..n).all(|k| scores[[k, j]] < scores[[i, j]] || (scores[[k, j]] == scores[[i, j]] && k >= i));
                if row_best && col_best && scores[[i, j]] >= threshold {
                    emitted += 1;
                    let d = (scene.gt.apply_point(&scene.src.points()[i]) - scene.tgt.points()[j]).norm();
                    correct += (d <= radius) as usize;
                }
            }
        }
        (emitted, correct)
    }

    #[test]
    fn pr_counts_match_exhaustive_check() {
        let scene = gen_scene(&SceneSpec {
            n_points: 120,
            ..SceneSpec::default()
        })
        .unwrap();
        let b = simulate_branches(&scene, &BranchSimSpec::default_img(), &BranchSimSpec::default_geo()).unwrap();
        let scores = Scorer::new(b.inputs(), 120, 120)
            .unwrap()
            .scores(&PipelineConfig::default(), FusionMode::NoisyAnd)
            .unwrap();
        for radius in [0.01, 0.05, 0.5] {
            let c = scene_pr_curve(&scores, &scene, radius).unwrap();
            for p in c.points.iter().skip(1) {
                assert_eq!(brute_force_counts(&scores, &scene, radius, p.threshold), (p.emitted, p.correct));
            }
        }
    }

    #[test]
    fn pr_curve_shape() {
        let scene = gen_scene(&SceneSpec {
            n_points: 200,
            ..SceneSpec::default()
        })
        .unwrap();
        let b = simulate_branches(&scene, &BranchSimSpec::default_img(), &BranchSimSpec::default_geo()).unwrap();
        let scorer = Scorer::new(b.inputs(), 200, 200).unwrap();
        for m in FusionMode::ALL {
            let c = scene_pr_curve(&scorer.scores(&PipelineConfig::default(), m).unwrap(), &scene, 0.05).unwrap();
            assert_eq!(c.points[0].threshold, f64::INFINITY);
            assert_eq!((c.points[0].precision, c.points[0].recall), (1.0, 0.0));
            for w in c.points.windows(2) {
                assert!(w[1].threshold < w[0].threshold);
                assert!(w[1].precision <= w[0].precision);
                assert!(w[1].recall >= w[0].recall);
                assert!((0.0..=1.0).contains(&w[1].precision) && (0.0..=1.0).contains(&w[1].recall));
            }
        }
    }

    #[test]
    fn perfect_posterior_has_unit_precision() {
        let scene = gen_scene(&SceneSpec {
            n_points: 100,
            overlap: 1.0,
            ..SceneSpec::default()
        })
        .unwrap();
        let scores = Array2::from_shape_fn((100, 100), |(i, j)| if i == j { 0.5 + i as f64 / 1000.0 } else { 0.0 });
        let c = scene_pr_curve(&scores, &scene, 0.05).unwrap();
        assert_eq!(c.points.len(), 101);
        assert!(c.points.iter().all(|p| p.precision == 1.0));
        assert_eq!(c.max_recall(), 1.0);
    }

    #[test]
    fn empty_match_set_convention() {
        let scene = gen_scene(&SceneSpec {
            n_points: 10,
            ..SceneSpec::default()
        })
        .unwrap();
        let c = pr_curve(&Array2::zeros((0, 10)), &PointCloud::default(), &scene.tgt, &scene.gt, 5, 0.05).unwrap();
        assert_eq!(c.points.len(), 1);
        assert_eq!(c.final_precision(), 1.0);
        assert!(pr_curve(&Array2::zeros((10, 10)), &scene.src, &scene.tgt, &scene.gt, 5, 0.0).is_err());
    }

    fn tiny_bench(seeds: usize) -> BenchConfig {
        BenchConfig {
            seeds,
            scene: SceneSpec {
                n_points: 150,
                ..SceneSpec::default()
            },
            pipeline: PipelineConfig {
                hypotheses: 200,
                ..PipelineConfig::default()
            },
            ..BenchConfig::default()
        }
    }

    #[test]
    fn noiseless_bench_is_exact_for_every_method() {
        let (img, geo) = quiet();
        let cfg = BenchConfig {
            img: BranchSimSpec { seed: 1, ..img },
            geo: BranchSimSpec { seed: 2, ..geo },
            scene: SceneSpec {
                n_points: 150,
                noise_sigma: 0.0,
                ..SceneSpec::default()
            },
            seeds: 1,
            ..BenchConfig::default()
        };
        let r = run_benchmark(&cfg).unwrap();
        assert_eq!(r.trials.len(), 5);
        for t in &r.trials {
            assert!(t.success);
            assert!(t.rre_deg <= 1e-6, "{t:?}");
            assert!(t.rte_m <= 1e-8, "{t:?}");
        }
    }

    #[test]
    fn summary_means_match_trial_rows() {
        let r = run_benchmark(&tiny_bench(3)).unwrap();
        let csv = trials_csv(&r);
        for s in &r.summary.methods {
            let rows: Vec<f64> = csv
                .lines()
                .skip(1)
                .map(|l| l.split(',').collect::<Vec<_>>())
                .filter(|f| f[0] == s.method.as_str())
                .map(|f| f[2].parse().unwrap())
                .collect();
            assert_eq!(rows.len(), 3);
            assert!((mean(&rows) - s.mean_rre_deg).abs() <= 1e-12 * s.mean_rre_deg.max(1.0));
        }
    }

    #[test]
    fn report_is_reproducible() {
        let cfg = tiny_bench(2);
        let (a, b) = (run_benchmark(&cfg).unwrap(), run_benchmark(&cfg).unwrap());
        assert_eq!(trials_csv(&a), trials_csv(&b));
        assert_eq!(curves_csv(&a.curves), curves_csv(&b.curves));
        assert_eq!(
            serde_json::to_string(&a.summary).unwrap(),
            serde_json::to_string(&b.summary).unwrap()
        );
    }

    #[test]
    fn bench_config_round_trips() {
        let cfg = BenchConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(BenchConfig::from_json(&text).unwrap(), cfg);
        assert!(BenchConfig::from_json(r#"{"seedz": 3}"#).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
