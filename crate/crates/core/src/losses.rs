//! Supervised pixel loss, pairwise margin ranking loss and their mix.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::patches::RankPairSet;

/// One hinge value of the ranking loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    pub image: usize,
    pub level: usize,
    pub small: usize,
    pub large: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub ranking: f64,
    pub total: f64,
    pub lambda: f64,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pair_terms: Vec<PairTerm>,
}

impl LossBreakdown {
    pub fn new(supervised: f64, ranking: f64, lambda: f64, epsilon: f64, pair_terms: Vec<PairTerm>) -> Self {
        Self {
            supervised,
            ranking,
            total: total_loss(supervised, ranking, lambda),
            lambda,
            epsilon,
            pair_terms,
        }
    }
}

/// `(1 / 2N) Σ_i ‖pred_i − gt_i‖²` over a batch of density tensors with a
/// leading batch dimension.
pub fn supervised_l2(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::InvalidInput(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dims(),
            gt.dims()
        )));
    }
    let n = pred.dims().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::InvalidInput("supervised loss needs a non-empty batch".into()));
    }
    Ok(((pred - gt)?.sqr()?.sum_all()? / (2.0 * n as f64))?)
}

/// Same loss over [`DensityMap`]s, accumulated in f64.
pub fn supervised_l2_maps(pred: &[DensityMap], gt: &[DensityMap]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "batch sizes {} and {} must match and be non-zero",
            pred.len(),
            gt.len()
        )));
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if (p.height(), p.width()) != (g.height(), g.width()) {
            return Err(Error::InvalidInput("density map shapes differ".into()));
        }
        sum += p
            .data()
            .iter()
            .zip(g.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>();
    }
    Ok(sum / (2.0 * pred.len() as f64))
}

/// `max(0, small − large + ε)`.
pub fn margin_rank_pair(count_small: f64, count_large: f64, epsilon: f64) -> f64 {
    (count_small - count_large + epsilon).max(0.0)
}

/// Counts of one batch for the ranking loss, indexed `[image][level][patch]`
/// where patch `m` runs from the smallest crop to the full map.
pub type PyramidCounts = Vec<Vec<Vec<f64>>>;

fn check_counts(counts: &PyramidCounts, crops: usize) -> Result<(usize, usize)> {
    let n = counts.len();
    if n == 0 {
        return Err(Error::InvalidInput("ranking loss needs at least one image".into()));
    }
    let k = counts[0].len();
    if k == 0 || crops == 0 {
        return Err(Error::InvalidInput("ranking loss needs K >= 1 and M >= 1".into()));
    }
    for (i, image) in counts.iter().enumerate() {
        if image.len() != k {
            return Err(Error::InvalidInput(format!(
                "image {i} has {} levels, expected {k}",
                image.len()
            )));
        }
        for (l, level) in image.iter().enumerate() {
            if level.len() != crops + 1 {
                return Err(Error::InvalidInput(format!(
                    "image {i} level {l} has {} patches, expected {}",
                    level.len(),
                    crops + 1
                )));
            }
        }
    }
    Ok((n, k))
}

/// Normalizer `2 / (N K M (M+1))`: one over the number of pairs.
pub fn pyramid_normalizer(images: usize, levels: usize, crops: usize) -> f64 {
    2.0 / (images as f64 * levels as f64 * crops as f64 * (crops as f64 + 1.0))
}

/// Mean hinge over every ordered pair of every level of every image.
pub fn pyramid_rank_loss(counts: &PyramidCounts, crops: usize, epsilon: f64) -> Result<f64> {
    Ok(pyramid_rank_loss_with_grad(counts, crops, epsilon)?.0)
}

/// Loss and its subgradient with respect to every count. At the kink
/// (`small − large + ε = 0`) the subgradient is taken as zero.
pub fn pyramid_rank_loss_with_grad(
    counts: &PyramidCounts,
    crops: usize,
    epsilon: f64,
) -> Result<(f64, PyramidCounts)> {
    let (n, k) = check_counts(counts, crops)?;
    let scale = pyramid_normalizer(n, k, crops);
    let pairs = RankPairSet::for_crops(crops);
    let mut grad: PyramidCounts = counts
        .iter()
        .map(|img| img.iter().map(|lvl| vec![0.0; lvl.len()]).collect())
        .collect();
    let mut sum = 0.0;
    for (i, image) in counts.iter().enumerate() {
        for (l, level) in image.iter().enumerate() {
            for &(m, q) in &pairs.pairs {
                let h = margin_rank_pair(level[m], level[q], epsilon);
                sum += h;
                if h > 0.0 {
                    grad[i][l][m] += scale;
                    grad[i][l][q] -= scale;
                }
            }
        }
    }
    Ok((sum * scale, grad))
}

/// Differentiable ranking loss. Each entry of `level_counts` is an
/// `N x (M+1)` tensor of patch counts for one pyramid level. Returns the loss
/// tensor and the individual hinge values.
pub fn pyramid_rank_loss_tensor(
    level_counts: &[Tensor],
    crops: usize,
    epsilon: f64,
) -> Result<(Tensor, Vec<PairTerm>)> {
    let first = level_counts
        .first()
        .ok_or_else(|| Error::InvalidInput("ranking loss needs at least one level".into()))?;
    let (n, patches) = first.dims2()?;
    if patches != crops + 1 || n == 0 {
        return Err(Error::InvalidInput(format!(
            "expected N x {} counts with N >= 1, got {:?}",
            crops + 1,
            first.dims()
        )));
    }
    let pairs = RankPairSet::for_crops(crops);
    let diff_matrix = pairs.difference_matrix(first.dtype(), first.device())?;
    let mut hinges = Vec::with_capacity(level_counts.len());
    let mut terms = Vec::new();
    for (l, counts) in level_counts.iter().enumerate() {
        if counts.dims() != first.dims() {
            return Err(Error::InvalidInput(format!(
                "level {l} counts {:?} do not match {:?}",
                counts.dims(),
                first.dims()
            )));
        }
        let h = (counts.matmul(&diff_matrix)? + epsilon)?.relu()?;
        let values = h.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
        for (i, row) in values.iter().enumerate() {
            for (p, &value) in row.iter().enumerate() {
                let (small, large) = pairs.pairs[p];
                terms.push(PairTerm {
                    image: i,
                    level: l,
                    small,
                    large,
                    value,
                });
            }
        }
        hinges.push(h.sum_all()?);
    }
    let scale = pyramid_normalizer(n, level_counts.len(), crops);
    let loss = (Tensor::stack(&hinges, 0)?.sum_all()? * scale)?;
    Ok((loss, terms))
}

/// `L_s + λ L_u`.
pub fn total_loss(supervised: f64, ranking: f64, lambda: f64) -> f64 {
    supervised + lambda * ranking
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn supervised_examples() {
        let gt = Tensor::zeros((1, 1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(supervised_l2(&gt, &gt).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let pred = Tensor::new(&[[[[3.0f64, 0.0, 0.0], [0.0, 0.0, 4.0]]]], &Device::Cpu).unwrap();
        assert_eq!(supervised_l2(&pred, &gt).unwrap().to_scalar::<f64>().unwrap(), 12.5);
        let pred2 = Tensor::cat(&[&pred, &pred], 0).unwrap();
        let gt2 = Tensor::cat(&[&gt, &gt], 0).unwrap();
        assert_eq!(supervised_l2(&pred2, &gt2).unwrap().to_scalar::<f64>().unwrap(), 12.5);
        let bad = Tensor::zeros((1, 1, 3, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(supervised_l2(&pred, &bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn supervised_maps_match_tensor() {
        let a = DensityMap::from_vec(1, 3, vec![3.0, 0.0, 1.0]).unwrap();
        let b = DensityMap::from_vec(1, 3, vec![0.0, 0.0, 5.0]).unwrap();
        assert_eq!(supervised_l2_maps(&[a], &[b]).unwrap(), 12.5);
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(margin_rank_pair(3.0, 5.0, 0.0), 0.0);
        assert_eq!(margin_rank_pair(5.0, 3.0, 0.0), 2.0);
        assert_eq!(margin_rank_pair(5.0, 5.0, 1.0), 1.0);
    }

    #[test]
    fn pyramid_examples() {
        let monotone = vec![vec![vec![1.0, 2.0, 3.0, 4.0, 5.0]; 3]];
        assert_eq!(pyramid_rank_loss(&monotone, 4, 1.0).unwrap(), 0.0);
        let single = vec![vec![vec![2.0, 1.0]]];
        assert_eq!(pyramid_rank_loss(&single, 1, 0.0).unwrap(), 1.0);
        assert_eq!(pyramid_normalizer(1, 3, 4), 1.0 / 30.0);
    }

    #[test]
    fn pyramid_rejects_ragged_counts() {
        let ragged = vec![vec![vec![1.0, 2.0], vec![1.0]]];
        assert!(matches!(pyramid_rank_loss(&ragged, 1, 0.0), Err(Error::InvalidInput(_))));
        assert!(pyramid_rank_loss(&vec![], 1, 0.0).is_err());
    }

    #[test]
    fn tensor_route_matches_scalar_route() {
        let counts: PyramidCounts = vec![
            vec![vec![3.0, 1.0, 2.0], vec![0.5, 0.7, 0.1]],
            vec![vec![1.0, 1.0, 1.0], vec![4.0, 2.0, 0.0]],
        ];
        let expected = pyramid_rank_loss(&counts, 2, 0.25).unwrap();
        let levels: Vec<Tensor> = (0..2)
            .map(|l| {
                let rows: Vec<f64> = counts.iter().flat_map(|img| img[l].clone()).collect();
                Tensor::from_vec(rows, (2, 3), &Device::Cpu).unwrap()
            })
            .collect();
        let (loss, terms) = pyramid_rank_loss_tensor(&levels, 2, 0.25).unwrap();
        assert!((loss.to_scalar::<f64>().unwrap() - expected).abs() < 1e-12);
        assert_eq!(terms.len(), 2 * 2 * 3);
        assert!(terms.iter().all(|t| t.value >= 0.0));
    }

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown::new(2.0, 0.5, 4.0, 0.0, vec![]);
        assert_eq!(b.total, 4.0);
        assert_eq!(total_loss(3.0, 7.0, 0.0), 3.0);
    }
}
