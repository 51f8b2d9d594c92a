//! Registration quality: intensity RMSE, Jacobian folding statistics and
//! Dice overlap of warped label maps.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::field::{jacobian_determinant_map, warp_image, warp_labels, Deformation, ScalarField};
use crate::io::report::Report;
use crate::optimizer::RegistrationResult;

pub fn rmse(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    Error::check_shape(a.shape(), b.shape())?;
    let sse: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((sse / a.values().len() as f64).sqrt())
}

/// Voxels where `det(J_phi) < 0`. Boundary voxels (one-sided stencils) are
/// counted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldingStats {
    pub negative_count: usize,
    /// `|sum of det(J)|` over the folded voxels.
    pub negative_abs_sum: f64,
    /// `1000 * negative_count / total_voxels`.
    pub ratio_permille: f64,
    pub total_voxels: usize,
}

pub fn folding_stats(phi: &Deformation) -> Result<FoldingStats> {
    let det = jacobian_determinant_map(phi)?;
    let mut negative_count = 0;
    let mut sum = 0.0;
    for &d in det.values() {
        if d < 0.0 {
            negative_count += 1;
            sum += d;
        }
    }
    let total_voxels = det.values().len();
    Ok(FoldingStats {
        negative_count,
        negative_abs_sum: sum.abs(),
        ratio_permille: 1000.0 * negative_count as f64 / total_voxels as f64,
        total_voxels,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    /// `(label, score)` for every requested label present in either map.
    pub scores: Vec<(i64, f64)>,
    /// Requested labels found in neither map; not scored.
    pub absent: Vec<i64>,
    /// Mean over `scores`; `None` when nothing was scored.
    pub mean: Option<f64>,
}

fn label_values(field: &ScalarField) -> Result<Vec<i64>> {
    field
        .values()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v.abs() < 2f64.powi(53) {
                Ok(v as i64)
            } else {
                Err(Error::InvalidField(format!(
                    "label value {v} is not an integer"
                )))
            }
        })
        .collect()
}

/// Sorted distinct labels of an integer-valued map.
pub fn unique_labels(field: &ScalarField) -> Result<Vec<i64>> {
    Ok(label_values(field)?
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect())
}

/// Per-label `2 |A ∩ B| / (|A| + |B|)`.
pub fn dice(
    labels_a: &ScalarField,
    labels_b: &ScalarField,
    label_ids: &[i64],
) -> Result<DiceReport> {
    Error::check_shape(labels_a.shape(), labels_b.shape())?;
    let a = label_values(labels_a)?;
    let b = label_values(labels_b)?;
    let mut scores = Vec::new();
    let mut absent = Vec::new();
    for &l in label_ids {
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.iter().zip(&b) {
            na += (x == l) as usize;
            nb += (y == l) as usize;
            both += (x == l && y == l) as usize;
        }
        if na + nb == 0 {
            absent.push(l);
        } else {
            scores.push((l, 2.0 * both as f64 / (na + nb) as f64));
        }
    }
    let mean = if scores.is_empty() {
        None
    } else {
        Some(scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64)
    };
    Ok(DiceReport {
        scores,
        absent,
        mean,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub rmse_before: f64,
    pub rmse_after: f64,
    pub folding: FoldingStats,
    pub dice: Option<DiceReport>,
}

/// RMSE of `warp(I0, phi_full)` against `I1`, folding statistics of
/// `phi_full`, and Dice of the warped source labels when labels are given.
pub fn evaluate_deformation(
    source: &ScalarField,
    target: &ScalarField,
    labels: Option<(&ScalarField, &ScalarField)>,
    phi: &Deformation,
) -> Result<EvaluationReport> {
    let warped = warp_image(source, phi)?;
    let dice = match labels {
        Some((l0, l1)) => {
            let warped_labels = warp_labels(l0, phi)?;
            let mut ids: BTreeSet<i64> = unique_labels(l0)?.into_iter().collect();
            ids.extend(unique_labels(l1)?);
            ids.remove(&0);
            let ids: Vec<i64> = ids.into_iter().collect();
            Some(dice(&warped_labels, l1, &ids)?)
        }
        None => None,
    };
    Ok(EvaluationReport {
        rmse_before: rmse(source, target)?,
        rmse_after: rmse(&warped, target)?,
        folding: folding_stats(phi)?,
        dice,
    })
}

pub fn evaluate_registration(
    source: &ScalarField,
    target: &ScalarField,
    labels: Option<(&ScalarField, &ScalarField)>,
    result: &RegistrationResult,
) -> Result<EvaluationReport> {
    evaluate_deformation(source, target, labels, &result.phi_full)
}

impl EvaluationReport {
    pub fn write_into(&self, report: &mut Report) {
        report.push("rmse_before", self.rmse_before);
        report.push("rmse_after", self.rmse_after);
        report.push("folding_count", self.folding.negative_count);
        report.push("folding_abs_sum", self.folding.negative_abs_sum);
        report.push("folding_ratio_permille", self.folding.ratio_permille);
        report.push("total_voxels", self.folding.total_voxels);
        if let Some(d) = &self.dice {
            for (l, s) in &d.scores {
                report.push(&format!("dice_label_{l}"), s);
            }
            if !d.absent.is_empty() {
                let absent: Vec<String> = d.absent.iter().map(|l| l.to_string()).collect();
                report.push("dice_absent_labels", absent.join(","));
            }
            match d.mean {
                Some(m) => report.push("dice_mean", m),
                None => report.push("dice_mean", "none"),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GridShape, VectorField};

    fn s2(n: usize, m: usize) -> GridShape {
        GridShape::new2(n, m).unwrap()
    }

    #[test]
    fn rmse_examples() {
        let s = s2(2, 2);
        let a = ScalarField::new(s, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let z = ScalarField::zeros(s);
        assert_eq!(rmse(&a, &z).unwrap(), 2.5);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let shifted = ScalarField::constant(s, -0.75);
        assert_eq!(rmse(&shifted, &z).unwrap(), 0.75);
        assert!(rmse(&a, &ScalarField::zeros(s2(2, 3))).is_err());
    }

    #[test]
    fn folding_identity_and_fold() {
        let s = s2(6, 5);
        let id = folding_stats(&Deformation::identity(s)).unwrap();
        assert_eq!(id.negative_count, 0);
        assert_eq!(id.negative_abs_sum, 0.0);
        assert_eq!(id.ratio_permille, 0.0);

        let fold = Deformation::from_displacement(VectorField::from_fn(s, |[x, _, _]| {
            [-2.0 * x as f64, 0.0, 0.0]
        }));
        let st = folding_stats(&fold).unwrap();
        // Linear displacement: one-sided stencils are exact too.
        assert_eq!(st.negative_count, 30);
        assert_eq!(st.negative_abs_sum, 30.0);
        assert_eq!(st.ratio_permille, 1000.0);
    }

    #[test]
    fn dice_examples() {
        let s = s2(4, 2);
        let a = ScalarField::new(s, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = ScalarField::new(s, vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let r = dice(&a, &b, &[1]).unwrap();
        assert_eq!(r.scores, vec![(1, 0.5)]);
        assert_eq!(dice(&a, &a, &[0, 1]).unwrap().mean, Some(1.0));

        let c = ScalarField::new(s, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(dice(&a, &c, &[1]).unwrap().scores, vec![(1, 0.0)]);

        let r = dice(&a, &b, &[1, 7]).unwrap();
        assert_eq!(r.absent, vec![7]);
        assert_eq!(r.mean, Some(0.5));
    }

    #[test]
    fn dice_rejects_fractional_labels() {
        let s = s2(2, 2);
        let a = ScalarField::constant(s, 1.5);
        assert!(dice(&a, &a, &[1]).is_err());
    }
}
