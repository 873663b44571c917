//! Gram-matrix style statistics and Log-Euclidean style ranking.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::tensor::Tensor;

/// Asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-6;
const EPS_REL: f64 = 1e-6;
const EPS_MIN: f64 = 1e-12;

/// `F Fᵀ / (C H W)` for a `C x H x W` (or `1 x C x H x W`) feature map.
pub fn gram_matrix(features: &Tensor) -> Result<DMatrix<f64>> {
    let (c, h, w) = match *features.shape() {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        ref s => return Err(Error::Shape(format!("gram_matrix expects C x H x W, got {s:?}"))),
    };
    if c == 0 || h * w == 0 {
        return Err(Error::Shape("gram_matrix needs non-empty features".into()));
    }
    let f = DMatrix::from_row_slice(c, h * w, features.data());
    let g = &f * f.transpose() / (c * h * w) as f64;
    Ok((&g + g.transpose()) * 0.5)
}

/// Default regularizer for a pair of Gram matrices: `1e-6` times their
/// average per-channel trace, symmetric in the arguments.
pub fn default_eps(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let c = a.nrows().max(1) as f64;
    (EPS_REL * (a.trace() + b.trace()) / (2.0 * c)).max(EPS_MIN)
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Validation(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL || !asym.is_finite() {
        return Err(Error::Validation(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    Ok(())
}

/// Matrix logarithm of `m + eps I` through a symmetric eigendecomposition.
pub fn spd_log(m: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5 + DMatrix::identity(n, n) * eps;
    let eig = SymmetricEigen::new(sym);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l <= 0.0 || !l.is_finite()) {
        return Err(Error::Validation(format!(
            "matrix is not positive definite after regularization (eigenvalue {bad:e})"
        )));
    }
    let logs = eig.eigenvalues.map(f64::ln);
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&logs) * v.transpose())
}

/// `‖log(A + eps I) − log(B + eps I)‖_F`.
pub fn log_euclidean_distance(a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?} matrices", a.shape(), b.shape())));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Validation(format!("eps must be positive, got {eps}")));
    }
    let la = spd_log(a, eps)?;
    let lb = spd_log(b, eps)?;
    Ok((la - lb).norm())
}

/// Per-layer Gram matrices summarizing one style.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDescriptor {
    pub style_id: String,
    pub grams: Vec<DMatrix<f64>>,
}

impl StyleDescriptor {
    pub fn new(style_id: impl Into<String>, grams: Vec<DMatrix<f64>>) -> Result<Self> {
        for g in &grams {
            check_symmetric(g)?;
        }
        Ok(StyleDescriptor {
            style_id: style_id.into(),
            grams,
        })
    }

    /// Averages per-image Gram matrices of a style's images.
    pub fn from_images(style_id: impl Into<String>, extractor: &dyn FeatureExtractor, images: &[Tensor]) -> Result<Self> {
        let grams = images
            .iter()
            .map(|img| image_grams(extractor, img))
            .collect::<Result<Vec<_>>>()?;
        StyleDescriptor::new(style_id, mean_grams(grams)?)
    }
}

/// Gram matrices of every extractor tap for a single `1 x 3 x H x W` image.
pub fn image_grams(extractor: &dyn FeatureExtractor, image: &Tensor) -> Result<Vec<DMatrix<f64>>> {
    extractor.taps(image)?.iter().map(gram_matrix).collect()
}

/// Per-layer mean of a stream of Gram-matrix lists.
pub fn mean_grams<I>(items: I) -> Result<Vec<DMatrix<f64>>>
where
    I: IntoIterator<Item = Vec<DMatrix<f64>>>,
{
    let mut sum: Option<Vec<DMatrix<f64>>> = None;
    let mut count = 0usize;
    for grams in items {
        match &mut sum {
            None => sum = Some(grams),
            Some(acc) => {
                if acc.len() != grams.len() || acc.iter().zip(&grams).any(|(a, g)| a.shape() != g.shape()) {
                    return Err(Error::Shape("Gram lists disagree in layer count or size".into()));
                }
                for (a, g) in acc.iter_mut().zip(&grams) {
                    *a += g;
                }
            }
        }
        count += 1;
    }
    let sum = sum.ok_or_else(|| Error::Empty("no feature maps to average".into()))?;
    Ok(sum.into_iter().map(|g| g / count as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedStyle {
    pub style_id: String,
    pub distance: f64,
}

/// Scores every style against the mean real-face Grams and sorts by
/// decreasing distance, then by style id. `eps = None` uses
/// [`default_eps`] per layer.
pub fn score_styles(styles: &[StyleDescriptor], means: &[DMatrix<f64>], eps: Option<f64>) -> Result<Vec<RankedStyle>> {
    if styles.is_empty() {
        return Err(Error::Empty("style list".into()));
    }
    let mut ranked = styles
        .iter()
        .map(|s| {
            if s.grams.len() != means.len() {
                return Err(Error::Shape(format!(
                    "style {} has {} layers, real faces have {}",
                    s.style_id,
                    s.grams.len(),
                    means.len()
                )));
            }
            let mut distance = 0.0;
            for (g, m) in s.grams.iter().zip(means) {
                let e = eps.unwrap_or_else(|| default_eps(g, m));
                distance += log_euclidean_distance(g, m, e)?;
            }
            Ok(RankedStyle {
                style_id: s.style_id.clone(),
                distance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.distance
            .partial_cmp(&a.distance)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.style_id.cmp(&b.style_id))
    });
    Ok(ranked)
}

/// The `k` styles farthest from the average real-face Gram matrices.
pub fn rank_styles<I>(styles: &[StyleDescriptor], real_face_grams: I, k: usize, eps: Option<f64>) -> Result<Vec<String>>
where
    I: IntoIterator<Item = Vec<DMatrix<f64>>>,
{
    if styles.is_empty() {
        return Err(Error::Empty("style list".into()));
    }
    if k > styles.len() {
        return Err(Error::Config(format!("k = {k} exceeds {} styles", styles.len())));
    }
    let means = mean_grams(real_face_grams)?;
    Ok(score_styles(styles, &means, eps)?
        .into_iter()
        .take(k)
        .map(|r| r.style_id)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = Tensor::randn(&[n, n], 1.0, rng);
        let a = DMatrix::from_row_slice(n, n, a.data());
        let m = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
        (&m + m.transpose()) * 0.5
    }

    #[test]
    fn gram_cases() {
        let z = gram_matrix(&Tensor::zeros(&[3, 2, 2])).unwrap();
        assert_eq!(z, DMatrix::zeros(3, 3));
        let f = Tensor::new(&[2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        let g = gram_matrix(&f).unwrap();
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 1.0, 2.0]));
    }

    #[test]
    fn gram_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::randn(&[6, 5, 4], 1.0, &mut rng);
        let g = gram_matrix(&f).unwrap();
        assert_eq!(g, g.transpose());
        let min = SymmetricEigen::new(g).eigenvalues.min();
        assert!(min >= -1e-9);
    }

    #[test]
    fn diagonal_distance() {
        let a = DMatrix::from_diagonal_element(2, 2, 1.0);
        let b = DMatrix::from_row_slice(2, 2, &[std::f64::consts::E.powi(2), 0.0, 0.0, 1.0]);
        let d = log_euclidean_distance(&a, &b, 1e-15).unwrap();
        assert!((d - 2.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn rejects_bad_input() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let i = DMatrix::identity(2, 2);
        assert!(matches!(log_euclidean_distance(&a, &i, 1e-6), Err(Error::Validation(_))));
        assert!(log_euclidean_distance(&i, &DMatrix::identity(3, 3), 1e-6).is_err());
        assert!(log_euclidean_distance(&i, &i, 0.0).is_err());
        let neg = DMatrix::from_diagonal_element(2, 2, -1.0);
        assert!(log_euclidean_distance(&neg, &i, 1e-6).is_err());
    }

    #[test]
    fn ranking_basic() {
        let i = DMatrix::<f64>::identity(2, 2);
        let s = StyleDescriptor::new("only", vec![i.clone() * 3.0]).unwrap();
        assert_eq!(rank_styles(&[s.clone()], vec![vec![i.clone()]], 1, None).unwrap(), vec!["only"]);
        assert!(matches!(rank_styles(&[], vec![vec![i.clone()]], 0, None), Err(Error::Empty(_))));
        assert!(rank_styles(&[s.clone()], vec![vec![i.clone()]], 2, None).is_err());
        assert!(rank_styles(&[s], Vec::<Vec<DMatrix<f64>>>::new(), 1, None).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let i = DMatrix::<f64>::identity(2, 2);
        let far = i.clone() * 5.0;
        let styles = vec![
            StyleDescriptor::new("zeta", vec![far.clone()]).unwrap(),
            StyleDescriptor::new("alpha", vec![far]).unwrap(),
            StyleDescriptor::new("mid", vec![i.clone() * 2.0]).unwrap(),
        ];
        let r = rank_styles(&styles, vec![vec![i]], 3, None).unwrap();
        assert_eq!(r, vec!["alpha", "zeta", "mid"]);
    }

    #[test]
    fn descriptor_from_images_uses_extractor_taps() {
        let psi = crate::losses::RandomConvExtractor::new(Default::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng)).collect();
        let d = StyleDescriptor::from_images("x", &psi, &imgs).unwrap();
        assert_eq!(d.grams.len(), 3);
        let single: Vec<_> = imgs.iter().map(|t| image_grams(&psi, t).unwrap()).collect();
        let expect = (&single[0][1] + &single[1][1]) / 2.0;
        assert!((&d.grams[1] - expect).amax() < 1e-15);
    }

    proptest! {
        #[test]
        fn symmetric_and_zero_on_diagonal(seed in 0u64..1000, n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(n, &mut rng);
            let b = random_spd(n, &mut rng);
            let eps = default_eps(&a, &b);
            prop_assert_eq!(
                log_euclidean_distance(&a, &b, eps).unwrap(),
                log_euclidean_distance(&b, &a, eps).unwrap()
            );
            prop_assert!(log_euclidean_distance(&a, &a, default_eps(&a, &a)).unwrap() <= 1e-9);
        }

        #[test]
        fn gram_invariant_to_spatial_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::randn(&[3, 2, 3], 1.0, &mut rng);
            let perm = [4usize, 0, 5, 2, 1, 3];
            let mut data = Vec::new();
            for c in 0..3 {
                for &p in &perm {
                    data.push(f.data()[c * 6 + p]);
                }
            }
            let g = Tensor::new(&[3, 2, 3], data).unwrap();
            let d = (gram_matrix(&f).unwrap() - gram_matrix(&g).unwrap()).amax();
            prop_assert!(d < 1e-14);
        }
    }
}
