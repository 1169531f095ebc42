//! Registration quality measures: MSE, nearest-neighbour label transfer,
//! Dice overlap, Jacobian statistics and round-trip residuals.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::demons::mean_squared;
use crate::error::{Error, Result};
use crate::field::{compose, jacobian_determinant, warp_unchecked, DisplacementTransform, Grid, Interpolation, ScalarImage};
use crate::geodesic::{path_metric, run_broken_geodesic, BrokenGeodesic, DriverConfig};

/// Integer segmentation on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelImage {
    grid: Grid,
    data: Vec<u32>,
}

impl LabelImage {
    pub fn new(grid: Grid, data: Vec<u32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::contract(format!(
                "label image has {} samples for {} voxels",
                data.len(),
                grid.len()
            )));
        }
        Ok(LabelImage { grid, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn labels(&self) -> BTreeSet<u32> {
        self.data.iter().copied().collect()
    }

    pub fn count(&self, label: u32) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    /// Non-background label with the most voxels.
    pub fn dominant_label(&self) -> Option<u32> {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in &self.data {
            if l != 0 {
                *counts.entry(l).or_default() += 1;
            }
        }
        counts.into_iter().max_by_key(|&(l, n)| (n, std::cmp::Reverse(l))).map(|(l, _)| l)
    }
}

/// Mean squared intensity difference.
pub fn mse(a: &ScalarImage, b: &ScalarImage) -> Result<f64> {
    a.grid().ensure_same(b.grid(), "mse")?;
    Ok(mean_squared(a, b))
}

/// Pulls labels through `t` with nearest-neighbour sampling:
/// `out(x) = labels(round(x + d(x)))`, clamped to the grid.
pub fn transfer_labels(labels: &LabelImage, t: &DisplacementTransform) -> Result<LabelImage> {
    labels.grid().ensure_same(t.grid(), "transfer_labels")?;
    let grid = labels.grid();
    let dims = grid.dims3();
    let disp = t.displacement();
    let data = (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            let d = disp.vector(i);
            let mut q = [0usize; 3];
            for a in 0..3 {
                let p = (c[a] as f64 + d[a]).round();
                q[a] = p.clamp(0.0, (dims[a] - 1) as f64) as usize;
            }
            labels.data[grid.index(q)]
        })
        .collect();
    Ok(LabelImage { grid: grid.clone(), data })
}

/// Dice overlap of `label` between two segmentations. Both empty gives 1;
/// exactly one empty gives 0.
pub fn dice(a: &LabelImage, b: &LabelImage, label: u32) -> Result<f64> {
    a.grid.ensure_same(&b.grid, "dice")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse_before: f64,
    pub mse_after: f64,
    pub dice_per_label: BTreeMap<u32, f64>,
    pub jac_min: f64,
    pub jac_mean: f64,
    /// Fraction of voxels whose Jacobian determinant is ≤ 0.
    pub jac_negative_fraction: f64,
    /// Largest displacement of forward ∘ backward, in voxels.
    pub roundtrip_max_disp: f64,
    pub metric: f64,
}

/// Scores a forward registration `g` of `moving` onto `fixed`. The backward
/// registration needed for the round-trip residual is computed here with
/// `cfg`. Label inputs are optional; Dice is reported for every label found
/// in either segmentation when both are given.
pub fn evaluate_pair(
    moving: &ScalarImage,
    fixed: &ScalarImage,
    labels_moving: Option<&LabelImage>,
    labels_fixed_truth: Option<&LabelImage>,
    g: &BrokenGeodesic,
    cfg: &DriverConfig,
) -> Result<EvalReport> {
    moving.grid().ensure_same(fixed.grid(), "evaluate_pair images")?;
    moving.grid().ensure_same(g.composed.grid(), "evaluate_pair transform")?;

    let registered = warp_unchecked(moving, g.composed.displacement(), Interpolation::Linear);
    let jac = jacobian_determinant(&g.composed);
    let n = jac.data().len() as f64;
    let (jac_min, _) = jac.min_max();
    let jac_mean = jac.data().iter().sum::<f64>() / n;
    let jac_negative_fraction = jac.data().iter().filter(|&&v| v <= 0.0).count() as f64 / n;

    let backward = run_broken_geodesic(fixed, moving, cfg)?;
    let roundtrip = compose(&g.composed, &backward.composed)?;

    let mut dice_per_label = BTreeMap::new();
    if let (Some(lm), Some(lf)) = (labels_moving, labels_fixed_truth) {
        let transferred = transfer_labels(lm, &g.composed)?;
        let all: BTreeSet<u32> = lm.labels().union(&lf.labels()).copied().collect();
        for l in all {
            dice_per_label.insert(l, dice(&transferred, lf, l)?);
        }
    }

    Ok(EvalReport {
        mse_before: mean_squared(moving, fixed),
        mse_after: mean_squared(&registered, fixed),
        dice_per_label,
        jac_min,
        jac_mean,
        jac_negative_fraction,
        roundtrip_max_disp: roundtrip.displacement().max_norm(),
        metric: path_metric(g),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Provenance, VectorField};
    use proptest::prelude::*;

    fn mask(grid: &Grid, f: impl Fn([usize; 3]) -> bool) -> LabelImage {
        let data = (0..grid.len()).map(|i| f(grid.coords(i)) as u32).collect();
        LabelImage::new(grid.clone(), data).unwrap()
    }

    #[test]
    fn mse_examples() {
        let g = Grid::unit(&[6, 6]).unwrap();
        let a = ScalarImage::from_fn(g.clone(), |c| (c[0] * c[1]) as f64).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = ScalarImage::new(g.clone(), a.data().iter().map(|v| v + 2.0).collect()).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 4.0);
        let ca = ScalarImage::from_fn(g.clone(), |c| ((c[0] + c[1]) % 2) as f64).unwrap();
        let cb = ScalarImage::from_fn(g, |c| ((c[0] + c[1] + 1) % 2) as f64).unwrap();
        assert_eq!(mse(&ca, &cb).unwrap(), 1.0);
    }

    #[test]
    fn dice_examples() {
        let g = Grid::unit(&[8, 8]).unwrap();
        let left = mask(&g, |c| c[0] < 4);
        let right = mask(&g, |c| c[0] >= 4);
        let middle = mask(&g, |c| (2..6).contains(&c[0]));
        assert_eq!(dice(&left, &left, 1).unwrap(), 1.0);
        assert_eq!(dice(&left, &right, 1).unwrap(), 0.0);
        assert_eq!(dice(&left, &middle, 1).unwrap(), 0.5);
        assert_eq!(dice(&left, &right, 7).unwrap(), 1.0);
        let empty = mask(&g, |_| false);
        assert_eq!(dice(&left, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn transfer_identity_and_translation() {
        let g = Grid::unit(&[7, 5]).unwrap();
        let labels = LabelImage::new(g.clone(), (0..35).map(|i| (i % 4) as u32).collect()).unwrap();
        let id = DisplacementTransform::identity(g.clone());
        assert_eq!(transfer_labels(&labels, &id).unwrap(), labels);
        let shift = DisplacementTransform::from_displacement(
            VectorField::constant(g.clone(), &[0.0, 1.0]).unwrap(),
            Provenance::External,
        );
        let out = transfer_labels(&labels, &shift).unwrap();
        for y in 0..4 {
            for x in 0..7 {
                assert_eq!(out.data()[g.index([x, y, 0])], labels.data()[g.index([x, y + 1, 0])]);
            }
        }
    }

    #[test]
    fn dominant_label_ignores_background() {
        let g = Grid::unit(&[4, 4]).unwrap();
        let l = LabelImage::new(g, vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 2, 2, 2, 5, 5, 5, 5]).unwrap();
        assert_eq!(l.dominant_label(), Some(5));
    }

    #[test]
    fn identical_images_evaluate_cleanly() {
        let g = Grid::unit(&[24, 24]).unwrap();
        let img = ScalarImage::from_fn(g.clone(), |c| (c[0] as f64 * 0.4).sin() + (c[1] as f64 * 0.3).cos()).unwrap();
        let labels = mask(&g, |c| c[0] > 10);
        let geo = BrokenGeodesic::identity(g, 0.0);
        let r = evaluate_pair(&img, &img, Some(&labels), Some(&labels), &geo, &DriverConfig::default()).unwrap();
        assert_eq!(r.mse_before, 0.0);
        assert_eq!(r.mse_after, 0.0);
        assert_eq!(r.jac_min, 1.0);
        assert_eq!(r.metric, 0.0);
        assert_eq!(r.roundtrip_max_disp, 0.0);
        assert!(r.dice_per_label.values().all(|&d| d == 1.0));
    }

    #[test]
    fn report_field_names() {
        let r = EvalReport {
            mse_before: 1.0,
            mse_after: 0.5,
            dice_per_label: BTreeMap::from([(2, 0.9)]),
            jac_min: 0.8,
            jac_mean: 1.0,
            jac_negative_fraction: 0.0,
            roundtrip_max_disp: 0.1,
            metric: 2.0,
        };
        let v = serde_json::to_value(&r).unwrap();
        for k in [
            "mse_before",
            "mse_after",
            "dice_per_label",
            "jac_min",
            "jac_mean",
            "jac_negative_fraction",
            "roundtrip_max_disp",
            "metric",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["dice_per_label"]["2"], 0.9);
    }

    proptest! {
        #[test]
        fn dice_is_symmetric(a in proptest::collection::vec(0u32..4, 36), b in proptest::collection::vec(0u32..4, 36), l in 0u32..5) {
            let g = Grid::unit(&[6, 6]).unwrap();
            let la = LabelImage::new(g.clone(), a).unwrap();
            let lb = LabelImage::new(g, b).unwrap();
            let d = dice(&la, &lb, l).unwrap();
            prop_assert_eq!(d, dice(&lb, &la, l).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn transfer_never_invents_labels(
            a in proptest::collection::vec(0u32..6, 48),
            dx in -3.0f64..3.0,
            dy in -3.0f64..3.0,
            wobble in 0.0f64..2.0,
        ) {
            let g = Grid::unit(&[8, 6]).unwrap();
            let labels = LabelImage::new(g.clone(), a).unwrap();
            let d = VectorField::from_fn(g, |c| [dx + wobble * (c[1] as f64).sin(), dy - wobble * (c[0] as f64).cos(), 0.0]).unwrap();
            let out = transfer_labels(&labels, &DisplacementTransform::from_displacement(d, Provenance::External)).unwrap();
            prop_assert!(out.labels().is_subset(&labels.labels()));
        }
    }
}
