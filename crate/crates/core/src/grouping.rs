//! Patch extraction, block matching within a search window, group mean
//! subtraction, and weighted aggregation of processed groups back into an
//! image.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Geometry of patch grouping: patch side `d`, group size `m`, search window
/// side `window`, and the reference-patch step `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub d: usize,
    pub m: usize,
    pub window: usize,
    pub stride: usize,
}

impl PatchSpec {
    pub fn new(d: usize, m: usize, window: usize, stride: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidPatchSpec("patch side d must be >= 1".into()));
        }
        if m == 0 {
            return Err(Error::InvalidPatchSpec("group size m must be >= 1".into()));
        }
        if window < d {
            return Err(Error::InvalidPatchSpec(format!(
                "window {window} smaller than patch side {d}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidPatchSpec("stride must be >= 1".into()));
        }
        Ok(PatchSpec {
            d,
            m,
            window,
            stride,
        })
    }

    pub fn patch_dim(&self) -> usize {
        self.d * self.d
    }
}

/// A group of `m` vectorized similar patches.
///
/// Column `j` of `matrix` is the `j`-th most similar patch (row-major within
/// the patch), with column 0 the best match. `mean_patch` holds the per-pixel
/// mean that was subtracted from every column; it is all zero until
/// [`subtract_group_mean`] runs, so centering is invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroup {
    pub matrix: DMatrix<f64>,
    pub positions: Vec<(usize, usize)>,
    pub mean_patch: DVector<f64>,
    pub reference_index: usize,
    pub d: usize,
}

impl PatchGroup {
    pub fn members(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn patch_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Adds the stored mean back onto every column and clears it.
    pub fn restore_mean(&mut self) {
        for mut col in self.matrix.column_iter_mut() {
            col += &self.mean_patch;
        }
        self.mean_patch.fill(0.0);
    }
}

/// Reference-patch positions in raster order at the given stride.
///
/// The last valid row/column offset is always included so the image is fully
/// covered.
pub fn reference_positions(img: &GrayImage, spec: &PatchSpec) -> Result<Vec<(usize, usize)>> {
    let (w, h, d) = (img.width(), img.height(), spec.d);
    if w < d || h < d {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            d,
        });
    }
    let axis = |max_off: usize| -> Vec<usize> {
        let mut offs: Vec<usize> = (0..=max_off).step_by(spec.stride).collect();
        if *offs.last().expect("non-empty") != max_off {
            offs.push(max_off);
        }
        offs
    };
    let rows = axis(h - d);
    let cols = axis(w - d);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            out.push((r, c));
        }
    }
    Ok(out)
}

#[inline]
fn patch_sq_distance(img: &GrayImage, a: (usize, usize), b: (usize, usize), d: usize) -> f64 {
    let w = img.width();
    let data = img.data();
    let mut acc = 0.0;
    for i in 0..d {
        let ra = (a.0 + i) * w + a.1;
        let rb = (b.0 + i) * w + b.1;
        for j in 0..d {
            let diff = data[ra + j] - data[rb + j];
            acc += diff * diff;
        }
    }
    acc
}

fn copy_patch_into(img: &GrayImage, pos: (usize, usize), d: usize, col: &mut [f64]) {
    let w = img.width();
    let data = img.data();
    for i in 0..d {
        let row = (pos.0 + i) * w + pos.1;
        col[i * d..(i + 1) * d].copy_from_slice(&data[row..row + d]);
    }
}

/// Selects the `m` best-matched patches for `ref_pos` inside a `window`-sided
/// search window centered on it (clipped at image borders).
///
/// Candidates are ranked by squared Euclidean distance to the reference
/// patch, ties broken by raster order; if the window holds fewer than `m`
/// candidates the selection is repeated cyclically. The group mean is not
/// yet subtracted.
pub fn block_match(img: &GrayImage, ref_pos: (usize, usize), spec: &PatchSpec) -> Result<PatchGroup> {
    let d = spec.d;
    let (w, h) = (img.width(), img.height());
    if w < d || h < d {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            d,
        });
    }
    let (max_r, max_c) = (h - d, w - d);
    if ref_pos.0 > max_r || ref_pos.1 > max_c {
        return Err(Error::PositionOutOfBounds(ref_pos.0, ref_pos.1, w, h));
    }

    let (row_lo, row_hi) = window_range(ref_pos.0, spec.window, max_r);
    let (col_lo, col_hi) = window_range(ref_pos.1, spec.window, max_c);

    let mut candidates: Vec<((usize, usize), f64)> =
        Vec::with_capacity((row_hi - row_lo + 1) * (col_hi - col_lo + 1));
    for r in row_lo..=row_hi {
        for c in col_lo..=col_hi {
            candidates.push(((r, c), patch_sq_distance(img, ref_pos, (r, c), d)));
        }
    }
    // Stable sort over raster-ordered candidates keeps raster order on ties.
    candidates.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"));

    let m = spec.m;
    let available = candidates.len();
    let mut positions = Vec::with_capacity(m);
    let mut matrix = DMatrix::zeros(d * d, m);
    for j in 0..m {
        let (pos, _) = candidates[j % available];
        positions.push(pos);
        copy_patch_into(img, pos, d, matrix.column_mut(j).as_mut_slice());
    }
    let reference_index = positions.iter().position(|&p| p == ref_pos).unwrap_or(0);

    Ok(PatchGroup {
        matrix,
        positions,
        mean_patch: DVector::zeros(d * d),
        reference_index,
        d,
    })
}

/// Top-left offsets whose patches fall in the clipped window `[lo, hi]`.
fn window_range(center: usize, window: usize, max_off: usize) -> (usize, usize) {
    let lo = center.saturating_sub((window - 1) / 2);
    let hi = (center + window / 2).min(max_off);
    (lo, hi)
}

/// Subtracts the per-pixel mean across the group's columns, storing it in
/// `mean_patch` so the operation can be undone.
pub fn subtract_group_mean(mut group: PatchGroup) -> PatchGroup {
    let m = group.members() as f64;
    let mut mean = DVector::zeros(group.patch_dim());
    for col in group.matrix.column_iter() {
        mean += col;
    }
    mean /= m;
    for mut col in group.matrix.column_iter_mut() {
        col -= &mean;
    }
    group.mean_patch = mean;
    group
}

/// Averages patch-pixel contributions back into an image.
///
/// Each pixel becomes the mean of all patch samples covering it; pixels no
/// patch covers are taken from `fallback`. Accumulation runs in the given
/// group order, so the result does not depend on how groups were produced in
/// parallel.
pub fn aggregate(
    groups: &[PatchGroup],
    width: usize,
    height: usize,
    fallback: Option<&GrayImage>,
) -> Result<GrayImage> {
    if groups.is_empty() && fallback.is_none() {
        return Err(Error::NothingToAggregate);
    }
    if let Some(fb) = fallback {
        if fb.width() != width || fb.height() != height {
            return Err(Error::DimensionMismatch(
                width,
                height,
                fb.width(),
                fb.height(),
            ));
        }
    }
    let mut sums = vec![0.0f64; width * height];
    let mut counts = vec![0u32; width * height];
    for group in groups {
        let d = group.d;
        for (j, &(r, c)) in group.positions.iter().enumerate() {
            if r + d > height || c + d > width {
                return Err(Error::PositionOutOfBounds(r, c, width, height));
            }
            let col = group.matrix.column(j);
            for i in 0..d {
                let base = (r + i) * width + c;
                for k in 0..d {
                    sums[base + k] += col[i * d + k];
                    counts[base + k] += 1;
                }
            }
        }
    }
    let mut data = vec![0.0f64; width * height];
    for idx in 0..data.len() {
        if counts[idx] > 0 {
            data[idx] = sums[idx] / counts[idx] as f64;
        } else {
            match fallback {
                Some(fb) => data[idx] = fb.data()[idx],
                None => return Err(Error::NothingToAggregate),
            }
        }
    }
    GrayImage::new(width, height, data)
}
