//! Match-then-fuse operators over per-branch match posteriors.
//!
//! Both operators act elementwise on `N_src x N_tgt` probability matrices and
//! do not renormalize rows: the result is a per-pair posterior.

use ndarray::{concatenate, Array2, Axis, Zip};

use crate::correspondence::{posterior_softmax, similarity_geo, PosteriorMatrix};
use crate::error::{Error, Result};
use crate::features::{l2_normalize_rows, FeatureField};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking odds.
pub const CLAMP_EPS: f64 = 1e-12;

/// Prior probability that a given pair matches.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchPrior {
    Scalar(f64),
    PerPair(Array2<f64>),
}

impl MatchPrior {
    /// `1 / (N_src * N_tgt)`.
    pub fn uniform(n_src: usize, n_tgt: usize) -> Result<Self> {
        let prior = MatchPrior::Scalar(1.0 / (n_src as f64 * n_tgt as f64));
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v < 1.0;
        let valid = match self {
            MatchPrior::Scalar(v) => ok(*v),
            MatchPrior::PerPair(m) => m.iter().all(|&v| ok(v)),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "prior probabilities must lie strictly inside (0, 1)".into(),
            ))
        }
    }
}

fn check_shapes(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "posterior shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

#[inline]
fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

/// Joint posterior under conditional independence of the two branches:
///
/// `p = p_i p_g (1 - pi) / (p_i p_g (1 - pi) + (1 - p_i)(1 - p_g) pi)`,
///
/// i.e. `odds(p) = odds(p_i) odds(p_g) / odds(pi)`.
#[inline]
pub fn noisy_and(p_img: f64, p_geo: f64, prior: f64) -> f64 {
    let (a, b) = (clamp(p_img), clamp(p_geo));
    let agree = a * b * (1.0 - prior);
    agree / (agree + (1.0 - a) * (1.0 - b) * prior)
}

#[inline]
pub fn noisy_or(p_img: f64, p_geo: f64) -> f64 {
    1.0 - (1.0 - p_img) * (1.0 - p_geo)
}

pub fn fuse_noisy_and(
    p_img: &Array2<f64>,
    p_geo: &Array2<f64>,
    prior: &MatchPrior,
) -> Result<Array2<f64>> {
    check_shapes(p_img, p_geo)?;
    prior.validate()?;
    let mut out = Array2::zeros(p_img.dim());
    match prior {
        MatchPrior::Scalar(pi) => {
            Zip::from(&mut out)
                .and(p_img)
                .and(p_geo)
                .par_for_each(|o, &a, &b| *o = noisy_and(a, b, *pi));
        }
        MatchPrior::PerPair(pi) => {
            check_shapes(p_img, pi)?;
            Zip::from(&mut out)
                .and(p_img)
                .and(p_geo)
                .and(pi)
                .par_for_each(|o, &a, &b, &pi| *o = noisy_and(a, b, pi));
        }
    }
    Ok(out)
}

pub fn fuse_noisy_or(p_img: &Array2<f64>, p_geo: &Array2<f64>) -> Result<Array2<f64>> {
    check_shapes(p_img, p_geo)?;
    let mut out = Array2::zeros(p_img.dim());
    Zip::from(&mut out)
        .and(p_img)
        .and(p_geo)
        .par_for_each(|o, &a, &b| *o = noisy_or(a, b));
    Ok(out)
}

/// Concatenates per-branch normalized descriptors per point, renormalizes,
/// then matches the joint descriptor like a single branch.
pub fn concat_features(img: &FeatureField, geo: &FeatureField) -> Result<FeatureField> {
    if img.len() != geo.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} image descriptors but {} geometric descriptors",
            img.len(),
            geo.len()
        )));
    }
    let img = l2_normalize_rows(img);
    let geo = l2_normalize_rows(geo);
    let joint = concatenate(Axis(1), &[img.descriptors().view(), geo.descriptors().view()])
        .expect("row counts checked above");
    Ok(l2_normalize_rows(&FeatureField::new(joint)?))
}

/// Fuse-then-match ablation baseline.
pub fn fuse_concat_baseline(
    img_src: &FeatureField,
    img_tgt: &FeatureField,
    geo_src: &FeatureField,
    geo_tgt: &FeatureField,
    tau: f64,
) -> Result<PosteriorMatrix> {
    let src = concat_features(img_src, geo_src)?;
    let tgt = concat_features(img_tgt, geo_tgt)?;
    posterior_softmax(&similarity_geo(&src, &tgt)?, tau)
}
