//! End-to-end registration: branch posteriors, fusion, mutual matching and
//! robust pose estimation, driven by a flat JSON configuration.

use std::cell::OnceCell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::correspondence::{
    posterior_softmax, similarity_geo, similarity_img_maxpool, PosteriorMatrix,
    DEFAULT_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::features::{
    best_view_descriptors, l2_normalize_rows, l2_normalize_stack, FeatureField, ViewFeatureStack,
};
use crate::fusion::{fuse_concat_baseline, fuse_noisy_and, fuse_noisy_or, MatchPrior};
use crate::geometry::PointCloud;
use crate::pose::{mutual_nn_match, robust_register, CorrespondenceSet, RegistrationResult, RobustConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "img-only")]
    ImgOnly,
    #[serde(rename = "geo-only")]
    GeoOnly,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "or")]
    NoisyOr,
    #[serde(rename = "and")]
    NoisyAnd,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::ImgOnly,
        FusionMode::GeoOnly,
        FusionMode::Concat,
        FusionMode::NoisyOr,
        FusionMode::NoisyAnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::ImgOnly => "img-only",
            FusionMode::GeoOnly => "geo-only",
            FusionMode::Concat => "concat",
            FusionMode::NoisyOr => "or",
            FusionMode::NoisyAnd => "and",
        }
    }

    pub fn needs_img(self) -> bool {
        self != FusionMode::GeoOnly
    }

    pub fn needs_geo(self) -> bool {
        self != FusionMode::ImgOnly
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// `1 / (N_src * N_tgt)`
    Uniform,
    /// The constant `prior_value`.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub tau_img: f64,
    pub tau_geo: f64,
    pub prior_mode: PriorMode,
    pub prior_value: f64,
    pub fusion: FusionMode,
    pub voxel_size: f64,
    /// Defaults to `2 * voxel_size`.
    pub d_comp: Option<f64>,
    /// Defaults to `2 * voxel_size`.
    pub d_inlier: Option<f64>,
    pub hypotheses: usize,
    pub seeds: usize,
    pub neighbors: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let robust = RobustConfig::default();
        Self {
            tau_img: DEFAULT_TEMPERATURE,
            tau_geo: DEFAULT_TEMPERATURE,
            prior_mode: PriorMode::Uniform,
            prior_value: 0.5,
            fusion: FusionMode::NoisyAnd,
            voxel_size: 0.025,
            d_comp: None,
            d_inlier: None,
            hypotheses: robust.hypotheses,
            seeds: robust.seeds,
            neighbors: robust.neighbors,
            min_inliers: robust.min_inliers,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.tau_img, "tau_img")?;
        positive(self.tau_geo, "tau_geo")?;
        positive(self.voxel_size, "voxel_size")?;
        if let Some(v) = self.d_comp {
            positive(v, "d_comp")?;
        }
        if let Some(v) = self.d_inlier {
            positive(v, "d_inlier")?;
        }
        if !(self.prior_value > 0.0 && self.prior_value < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "prior_value must lie in (0, 1), got {}",
                self.prior_value
            )));
        }
        self.robust().validate()
    }

    pub fn robust(&self) -> RobustConfig {
        RobustConfig {
            d_comp: self.d_comp.unwrap_or(2.0 * self.voxel_size),
            d_inlier: self.d_inlier.unwrap_or(2.0 * self.voxel_size),
            hypotheses: self.hypotheses,
            seeds: self.seeds,
            neighbors: self.neighbors,
            min_inliers: self.min_inliers,
            rng_seed: self.seed,
        }
    }

    fn prior(&self, n_src: usize, n_tgt: usize) -> Result<MatchPrior> {
        match self.prior_mode {
            PriorMode::Uniform => MatchPrior::uniform(n_src, n_tgt),
            PriorMode::Scalar => Ok(MatchPrior::Scalar(self.prior_value)),
        }
    }
}

/// Image branch input: per-slice descriptors plus optional coverage masks
/// from 2D-to-3D lifting (`false` = no image support).
#[derive(Debug, Clone, Copy)]
pub struct ImageBranch<'a> {
    pub src: &'a ViewFeatureStack,
    pub tgt: &'a ViewFeatureStack,
    pub src_coverage: Option<&'a [bool]>,
}

#[derive(Debug, Clone, Copy)]
pub struct GeoBranch<'a> {
    pub src: &'a FeatureField,
    pub tgt: &'a FeatureField,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BranchInputs<'a> {
    pub img: Option<ImageBranch<'a>>,
    pub geo: Option<GeoBranch<'a>>,
}

pub fn image_posterior(b: &ImageBranch<'_>, tau: f64) -> Result<PosteriorMatrix> {
    let s = similarity_img_maxpool(&l2_normalize_stack(b.src), &l2_normalize_stack(b.tgt))?;
    let p = posterior_softmax(&s, tau)?;
    match b.src_coverage {
        Some(mask) => p.with_uniform_rows(mask),
        None => Ok(p),
    }
}

pub fn geo_posterior(b: &GeoBranch<'_>, tau: f64) -> Result<PosteriorMatrix> {
    posterior_softmax(&similarity_geo(&l2_normalize_rows(b.src), &l2_normalize_rows(b.tgt))?, tau)
}

fn check_counts(what: &str, src: usize, tgt: usize, n_src: usize, n_tgt: usize) -> Result<()> {
    if src != n_src || tgt != n_tgt {
        return Err(Error::DimensionMismatch(format!(
            "{what} features cover {src}/{tgt} points, clouds have {n_src}/{n_tgt}"
        )));
    }
    Ok(())
}

/// Computes match scores for any fusion mode, reusing branch posteriors
/// across modes.
pub struct Scorer<'a> {
    inputs: BranchInputs<'a>,
    n_src: usize,
    n_tgt: usize,
    img: OnceCell<PosteriorMatrix>,
    geo: OnceCell<PosteriorMatrix>,
}

impl<'a> Scorer<'a> {
    /// Checks that every supplied branch covers exactly the two clouds.
    pub fn new(inputs: BranchInputs<'a>, n_src: usize, n_tgt: usize) -> Result<Self> {
        if let Some(b) = inputs.img {
            check_counts("image", b.src.len(), b.tgt.len(), n_src, n_tgt)?;
        }
        if let Some(b) = inputs.geo {
            check_counts("geometric", b.src.len(), b.tgt.len(), n_src, n_tgt)?;
        }
        Ok(Self {
            inputs,
            n_src,
            n_tgt,
            img: OnceCell::new(),
            geo: OnceCell::new(),
        })
    }

    fn img_branch(&self, mode: FusionMode) -> Result<ImageBranch<'a>> {
        self.inputs.img.ok_or_else(|| {
            Error::InvalidParameter(format!("fusion mode {mode} needs image-branch features"))
        })
    }

    fn geo_branch(&self, mode: FusionMode) -> Result<GeoBranch<'a>> {
        self.inputs.geo.ok_or_else(|| {
            Error::InvalidParameter(format!("fusion mode {mode} needs geometric-branch features"))
        })
    }

    fn img_posterior(&self, cfg: &PipelineConfig, mode: FusionMode) -> Result<&PosteriorMatrix> {
        let b = self.img_branch(mode)?;
        if self.img.get().is_none() {
            let _ = self.img.set(image_posterior(&b, cfg.tau_img)?);
        }
        Ok(self.img.get().unwrap())
    }

    fn geo_posterior(&self, cfg: &PipelineConfig, mode: FusionMode) -> Result<&PosteriorMatrix> {
        let b = self.geo_branch(mode)?;
        if self.geo.get().is_none() {
            let _ = self.geo.set(geo_posterior(&b, cfg.tau_geo)?);
        }
        Ok(self.geo.get().unwrap())
    }

    /// Score matrix for `mode`. The temperatures must not change between
    /// calls on the same scorer.
    pub fn scores(&self, cfg: &PipelineConfig, mode: FusionMode) -> Result<Array2<f64>> {
        if mode.needs_img() {
            self.img_branch(mode)?;
        }
        if mode.needs_geo() {
            self.geo_branch(mode)?;
        }
        Ok(match mode {
            FusionMode::ImgOnly => self.img_posterior(cfg, mode)?.values().clone(),
            FusionMode::GeoOnly => self.geo_posterior(cfg, mode)?.values().clone(),
            FusionMode::NoisyAnd => fuse_noisy_and(
                self.img_posterior(cfg, mode)?.values(),
                self.geo_posterior(cfg, mode)?.values(),
                &cfg.prior(self.n_src, self.n_tgt)?,
            )?,
            FusionMode::NoisyOr => fuse_noisy_or(
                self.img_posterior(cfg, mode)?.values(),
                self.geo_posterior(cfg, mode)?.values(),
            )?,
            FusionMode::Concat => {
                let (img, geo) = (self.img_branch(mode)?, self.geo_branch(mode)?);
                fuse_concat_baseline(
                    &best_view_descriptors(img.src),
                    &best_view_descriptors(img.tgt),
                    geo.src,
                    geo.tgt,
                    cfg.tau_geo,
                )?
                .into_values()
            }
        })
    }
}

/// Match score matrix for the configured fusion mode.
pub fn match_scores(
    cfg: &PipelineConfig,
    inputs: &BranchInputs<'_>,
    n_src: usize,
    n_tgt: usize,
) -> Result<Array2<f64>> {
    Scorer::new(*inputs, n_src, n_tgt)?.scores(cfg, cfg.fusion)
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub matches: CorrespondenceSet,
    pub registration: Result<RegistrationResult>,
}

/// Runs matching and robust estimation. Matching errors are returned
/// directly; an estimator failure is reported inside the output so callers
/// still see the match set.
pub fn register(
    cfg: &PipelineConfig,
    src: &PointCloud,
    tgt: &PointCloud,
    inputs: &BranchInputs<'_>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let scores = match_scores(cfg, inputs, src.len(), tgt.len())?;
    let matches = mutual_nn_match(&scores);
    let registration = robust_register(&matches, src, tgt, &cfg.robust());
    Ok(PipelineOutput {
        matches,
        registration,
    })
}
