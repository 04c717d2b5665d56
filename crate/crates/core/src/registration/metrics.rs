use super::{check_dims, GrayImage};
use crate::error::Result;
use crate::labeling::{connected_components, BinaryMask};

/// Foreground threshold applied to `|I − background|`.
pub const FOREGROUND_THRESHOLD: f64 = 0.05;

#[inline]
pub(crate) fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

/// Hard-binned joint intensity histogram with `bins` equal-width bins on
/// `[0, 1]` per axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointHistogram {
    bins: usize,
    total: u64,
    joint: Vec<u64>,
    first: Vec<u64>,
    second: Vec<u64>,
}

impl JointHistogram {
    pub fn new(a: &GrayImage, b: &GrayImage, bins: usize) -> Result<Self> {
        check_dims(a.dims(), b.dims())?;
        assert!(bins >= 2, "need at least two bins");
        let mut joint = vec![0u64; bins * bins];
        let mut first = vec![0u64; bins];
        let mut second = vec![0u64; bins];
        for (&va, &vb) in a.data().iter().zip(b.data()) {
            let (i, j) = (bin_of(va, bins), bin_of(vb, bins));
            joint[i * bins + j] += 1;
            first[i] += 1;
            second[j] += 1;
        }
        Ok(Self {
            bins,
            total: a.data().len() as u64,
            joint,
            first,
            second,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.joint[i * self.bins + j]
    }

    /// `I(A; B) = H(A) + H(B) − H(A, B)` in nats.
    ///
    /// The joint term is summed in ascending count order so the value is
    /// bit-identical when the roles of the two images are swapped.
    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let mut cells: Vec<u64> = self.joint.iter().copied().filter(|&c| c > 0).collect();
        cells.sort_unstable();
        let s_joint = sum_c_ln_c(&cells);
        let s_marginals = sum_c_ln_c(&self.first) + sum_c_ln_c(&self.second);
        (n.ln() + (s_joint - s_marginals) / n).max(0.0)
    }
}

fn sum_c_ln_c(counts: &[u64]) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 1)
        .map(|&c| c as f64 * (c as f64).ln())
        .sum()
}

/// Mutual information (nats) of the hard-binned joint histogram.
pub fn mutual_information(a: &GrayImage, b: &GrayImage, bins: usize) -> Result<f64> {
    Ok(JointHistogram::new(a, b, bins)?.mutual_information())
}

/// Shannon entropy (nats) of the `bins`-bin intensity histogram.
pub fn histogram_entropy(a: &GrayImage, bins: usize) -> f64 {
    let mut counts = vec![0u64; bins];
    for &v in a.data() {
        counts[bin_of(v, bins)] += 1;
    }
    let n = a.data().len() as f64;
    (n.ln() - sum_c_ln_c(&counts) / n).max(0.0)
}

/// `2|A ∩ B| / (|A| + |B|)`, defined as 1 for two empty masks.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&pa, &pb) in a.bits().iter().zip(b.bits()) {
        na += pa as usize;
        nb += pb as usize;
        inter += (pa && pb) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Binarizes a tissue image for Dice evaluation.
///
/// The background level is the median of the border pixels; pixels deviating
/// from it by more than [`FOREGROUND_THRESHOLD`] are foreground. Only the
/// largest 4-connected foreground component is kept and its holes are filled.
pub fn foreground_mask(image: &GrayImage) -> BinaryMask {
    let (w, h) = image.dims();
    let mut border: Vec<f64> = Vec::with_capacity(2 * (w + h));
    for x in 0..w {
        border.push(image.get(x, 0));
        border.push(image.get(x, h - 1));
    }
    for y in 1..h.saturating_sub(1) {
        border.push(image.get(0, y));
        border.push(image.get(w - 1, y));
    }
    border.sort_by(f64::total_cmp);
    let background = border[border.len() / 2];

    let raw = BinaryMask::from_fn(w, h, |x, y| {
        (image.get(x, y) - background).abs() > FOREGROUND_THRESHOLD
    });
    let components = connected_components(&raw);
    let mut mask = BinaryMask::new_empty(w, h);
    let Some(largest) = components.iter().reduce(|best, c| {
        if c.pixels.len() > best.pixels.len() {
            c
        } else {
            best
        }
    }) else {
        return mask;
    };
    for &(x, y) in &largest.pixels {
        mask.set(x, y, true);
    }

    // Fill holes: background components that never reach the border.
    let inverse = BinaryMask::from_fn(w, h, |x, y| !mask.get(x, y));
    for hole in connected_components(&inverse) {
        if !hole.touches_border {
            for &(x, y) in &hole.pixels {
                mask.set(x, y, true);
            }
        }
    }
    mask
}
