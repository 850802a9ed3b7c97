//! Patching of windows into tokens and the inverse averaging of patch logits.

use crate::error::{Error, Result};
use crate::substrate::{Real, Tensor};

/// Start offsets of the patches of a length-`len` window. When `len - p` is
/// not a multiple of `hop`, one extra patch is right-aligned to end at `len`.
pub fn patch_starts(len: usize, p: usize, hop: usize) -> Vec<usize> {
    if p == 0 || hop == 0 || len < p {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..=(len - p) / hop).map(|i| i * hop).collect();
    if (len - p) % hop != 0 {
        starts.push(len - p);
    }
    starts
}

/// Where each patch sits inside its window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub len: usize,
    pub patch_len: usize,
    pub starts: Vec<usize>,
}

impl PatchLayout {
    pub fn new(len: usize, patch_len: usize, hop: usize) -> Result<Self> {
        if patch_len == 0 || hop == 0 || hop > patch_len {
            return Err(Error::Config(format!(
                "invalid patching: P={patch_len}, hop={hop}"
            )));
        }
        if len < patch_len {
            return Err(Error::Config(format!(
                "window of length {len} is shorter than patch length {patch_len}"
            )));
        }
        Ok(Self {
            len,
            patch_len,
            starts: patch_starts(len, patch_len, hop),
        })
    }

    pub fn num_patches(&self) -> usize {
        self.starts.len()
    }

    /// `[start, end)` timesteps covered by patch `i`.
    pub fn coverage(&self, i: usize) -> std::ops::Range<usize> {
        self.starts[i]..self.starts[i] + self.patch_len
    }

    /// Number of patches covering each timestep.
    pub fn cover_counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.len];
        for i in 0..self.num_patches() {
            for c in &mut n[self.coverage(i)] {
                *c += 1;
            }
        }
        n
    }

    /// Patch centres, in timesteps from the window start.
    pub fn centres(&self) -> Vec<f64> {
        self.starts
            .iter()
            .map(|&s| s as f64 + (self.patch_len as f64 - 1.0) / 2.0)
            .collect()
    }

    /// `len x T_p` matrix `A` with `A[t, i] = 1 / n_t` when patch `i` covers
    /// `t`, so that `A * patch_logits` averages over covering patches.
    pub fn averaging_matrix<R: Real>(&self) -> Result<Tensor<R>> {
        let counts = self.cover_counts();
        if let Some(t) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Shape(format!("timestep {t} is covered by no patch")));
        }
        let tp = self.num_patches();
        let mut a = Tensor::zeros(self.len, tp);
        for i in 0..tp {
            for t in self.coverage(i) {
                a.set(t, i, R::of(1.0 / counts[t] as f64));
            }
        }
        Ok(a)
    }

    /// Validity of each patch given per-timestep validity: a patch is valid
    /// iff any timestep it covers is.
    pub fn patch_mask(&self, valid: &[bool]) -> Vec<bool> {
        (0..self.num_patches())
            .map(|i| valid[self.coverage(i)].iter().any(|&v| v))
            .collect()
    }
}

/// Flatten rows `[s, s + P)` of a row-major `len x channels` window for each
/// patch start `s`, giving `T_p x (C P)`.
pub fn patchify<R: Real>(window: &[f64], channels: usize, layout: &PatchLayout) -> Result<Tensor<R>> {
    if window.len() != layout.len * channels {
        return Err(Error::Shape(format!(
            "window has {} values, expected {} x {channels}",
            window.len(),
            layout.len
        )));
    }
    let width = channels * layout.patch_len;
    let mut data = Vec::with_capacity(layout.num_patches() * width);
    for &s in &layout.starts {
        data.extend(
            window[s * channels..(s + layout.patch_len) * channels]
                .iter()
                .map(|&v| R::of(v)),
        );
    }
    Tensor::from_vec(layout.num_patches(), width, data)
}

/// Per-timestep logits and probabilities of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<R> {
    pub logits: Tensor<R>,
    pub probabilities: Tensor<R>,
}

impl<R: Real> Prediction<R> {
    pub fn from_logits(logits: Tensor<R>) -> Self {
        Self {
            probabilities: logits.softmax_rows(),
            logits,
        }
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.logits.argmax_rows()
    }
}

/// Average patch logits over the patches covering each timestep, then
/// softmax per timestep.
pub fn depatchify<R: Real>(patch_logits: &Tensor<R>, layout: &PatchLayout) -> Result<Prediction<R>> {
    if patch_logits.rows() != layout.num_patches() {
        return Err(Error::Shape(format!(
            "{} patch rows for {} patches",
            patch_logits.rows(),
            layout.num_patches()
        )));
    }
    let a = layout.averaging_matrix::<R>()?;
    Ok(Prediction::from_logits(a.matmul(patch_logits)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        assert_eq!(patch_starts(256, 16, 8).len(), 31);
        assert_eq!(patch_starts(512, 16, 8).len(), 63);
        assert_eq!(patch_starts(16, 16, 8), vec![0]);
        assert_eq!(patch_starts(20, 16, 8), vec![0, 4]);
        assert_eq!(patch_starts(30, 8, 4), vec![0, 4, 8, 12, 16, 20, 22]);
    }

    #[test]
    fn single_patch_is_flattened_window() {
        let w: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let layout = PatchLayout::new(16, 16, 8).unwrap();
        let p = patchify::<f64>(&w, 2, &layout).unwrap();
        assert_eq!(p.shape(), [1, 32]);
        assert_eq!(p.data(), &w[..]);
    }

    #[test]
    fn short_window_is_config_error() {
        assert!(PatchLayout::new(8, 16, 8).unwrap_err().is_config());
    }

    #[test]
    fn two_patch_overlap() {
        let layout = PatchLayout::new(24, 16, 8).unwrap();
        let logits = Tensor::from_rows(&[vec![0.2, 1.0], vec![0.6, -1.0]]).unwrap();
        let p = depatchify(&logits, &layout).unwrap();
        for t in 0..24 {
            let want = match t {
                0..=7 => [0.2, 1.0],
                8..=15 => [0.4, 0.0],
                _ => [0.6, -1.0],
            };
            assert!((p.logits.get(t, 0) - want[0]).abs() < 1e-12);
            assert!((p.logits.get(t, 1) - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_any_valid() {
        let layout = PatchLayout::new(8, 4, 2).unwrap();
        let mut valid = vec![false; 8];
        valid[5] = true;
        assert_eq!(layout.patch_mask(&valid), vec![false, true, true]);
    }
}
