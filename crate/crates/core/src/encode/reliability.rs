use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::correlation::pearson_r;
use crate::error::{Error, Result};
use crate::tensorio::ResponseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilitySelection {
    pub per_voxel_reliability: Vec<f64>,
    /// Selected voxel indices, ascending.
    pub selected: Vec<usize>,
    pub fraction: f64,
}

/// `ceil(fraction · n)`, tolerant of products like `0.1 · 30 = 3.0000000000000004`.
fn selection_size(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = raw.round();
    let count = if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) {
        rounded
    } else {
        raw.ceil()
    };
    (count as usize).clamp(1, n)
}

fn spearman_brown(r: f64) -> f64 {
    if 1.0 + r <= 0.0 {
        -1.0
    } else {
        (2.0 * r / (1.0 + r)).clamp(-1.0, 1.0)
    }
}

/// Split-half reliability per voxel (Spearman-Brown corrected Pearson r
/// between the two halves) and the top `fraction` of voxels by reliability.
///
/// A voxel that is constant in either half gets reliability −1. Ties are
/// broken toward the lower index.
pub fn reliability_select(
    half_a: &ResponseMatrix,
    half_b: &ResponseMatrix,
    fraction: f64,
) -> Result<ReliabilitySelection> {
    if half_a.data().shape() != half_b.data().shape() {
        return Err(Error::DimensionMismatch(format!(
            "split halves have shapes {:?} and {:?}",
            half_a.data().shape(),
            half_b.data().shape()
        )));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let (a, b) = (half_a.to_f64(), half_b.to_f64());
    let reliability = a
        .column_iter()
        .zip(b.column_iter())
        .map(|(ca, cb)| {
            let pr = pearson_r(ca.as_slice(), cb.as_slice())?;
            Ok(if pr.degenerate { -1.0 } else { spearman_brown(pr.r) })
        })
        .collect::<Result<Vec<f64>>>()?;

    let n_select = selection_size(fraction, reliability.len());
    // Rank on a 1e-12 grid so values equal up to rounding tie, then a stable
    // sort keeps lower indices first among ties.
    let keys: Vec<i64> = reliability.iter().map(|r| (r * 1e12).round() as i64).collect();
    let mut order: Vec<usize> = (0..reliability.len()).collect();
    order.sort_by(|&i, &j| keys[j].cmp(&keys[i]));
    let mut selected: Vec<usize> = order[..n_select].to_vec();
    selected.sort_unstable();

    Ok(ReliabilitySelection {
        per_voxel_reliability: reliability,
        selected,
        fraction,
    })
}

fn check_subjects(responses: &[ResponseMatrix]) -> Result<()> {
    if responses.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "noise ceiling needs at least 3 subjects, got {}",
            responses.len()
        )));
    }
    let shape = responses[0].data().shape();
    if let Some(bad) = responses.iter().find(|r| r.data().shape() != shape) {
        return Err(Error::DimensionMismatch(format!(
            "subject {} has shape {:?}, expected {shape:?}",
            bad.subject_id,
            bad.data().shape()
        )));
    }
    Ok(())
}

/// Leave-one-subject-out correlation per subject: each subject's voxels
/// against the mean of the remaining subjects, averaged over voxels.
pub fn noise_ceiling_per_subject(responses: &[ResponseMatrix]) -> Result<Vec<f64>> {
    check_subjects(responses)?;
    let data: Vec<DMatrix<f64>> = responses.iter().map(|r| r.to_f64()).collect();
    let total: DMatrix<f64> = data.iter().fold(DMatrix::zeros(data[0].nrows(), data[0].ncols()), |acc, m| acc + m);
    let others = (data.len() - 1) as f64;
    data.iter()
        .map(|subject| {
            let rest = (&total - subject) / others;
            let mut sum = 0.0;
            for (cs, cr) in subject.column_iter().zip(rest.column_iter()) {
                sum += pearson_r(cs.as_slice(), cr.as_slice())?.r;
            }
            Ok(sum / subject.ncols() as f64)
        })
        .collect()
}

/// Mean leave-one-out correlation across subjects, clamped to `[1e-6, 1]`.
pub fn noise_ceiling(responses: &[ResponseMatrix]) -> Result<f64> {
    let per_subject = noise_ceiling_per_subject(responses)?;
    let mean = per_subject.iter().sum::<f64>() / per_subject.len() as f64;
    Ok(mean.clamp(1e-6, 1.0))
}
