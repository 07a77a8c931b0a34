//! Term-conditioned soft spatial masks over the image feature patch.
//!
//! For a term with summed word embedding `w` and visual patch `v`:
//!
//! ```text
//! ṽ = ReLU(conv1x1(v))
//! m̃ = ReLU(conv3x3(ṽ + w))        w replicated over every cell
//! m = MinMaxNorm(conv3x3(m̃))       one channel, values in [0, 1]
//! ```
//!
//! The mask gates the raw patch, whose spatial mean goes through the shared
//! backbone projection.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvKind, Tape, Var};
use crate::backbone::{Backbone, BoundingBox};
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskLossKind {
    #[default]
    Mse,
    Bce,
}

impl std::str::FromStr for MaskLossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mse" => Ok(Self::Mse),
            "bce" => Ok(Self::Bce),
            other => Err(format!("unknown mask loss '{other}' (expected mse or bce)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaskAttention {
    pub proj: Conv,
    pub conv1: Conv,
    pub conv2: Conv,
}

impl MaskAttention {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        d_c: usize,
        d: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Conv::register(store, rng, "mask_att.proj", d_c, d, 1)?,
            conv1: Conv::register(store, rng, "mask_att.conv1", d, d, 3)?,
            // min-max normalization cancels any constant offset
            conv2: Conv::register_unbiased(store, rng, "mask_att.conv2", d, 1, 3)?,
        })
    }

    /// `ṽ = ReLU(conv1x1(v_s))`, shared by every term of an image.
    pub fn project_patch<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, patch: Var) -> Result<Var> {
        let v = self.proj.forward(tape, store, patch, ConvKind::OneByOne)?;
        Ok(tape.relu(v))
    }

    /// Mask `(1, d_h, d_w)` from a projected patch and a `(1, d)` term
    /// embedding.
    pub fn mask_from_projected<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        projected: Var,
        word: Var,
    ) -> Result<Var> {
        let d = tape.shape(projected)[0];
        let w = tape.reshape(word, &[d, 1, 1])?;
        let fused = tape.add(projected, w)?;
        let h = self.conv1.forward(tape, store, fused, ConvKind::ThreeByThreePad1)?;
        let h = tape.relu(h);
        let pre = self.conv2.forward(tape, store, h, ConvKind::ThreeByThreePad1)?;
        Ok(tape.min_max_norm(pre))
    }

    pub fn compute_attention_mask<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        patch: Var,
        word: Var,
    ) -> Result<Var> {
        let projected = self.project_patch(tape, store, patch)?;
        self.mask_from_projected(tape, store, projected, word)
    }
}

/// Sum of token-table rows for a term's words, `(1, d)`.
pub fn term_word_embedding<T: Real>(tape: &mut Tape<T>, token_table: Var, word_ids: &[usize]) -> Result<Var> {
    let rows = tape.gather_rows(token_table, word_ids)?;
    tape.sum_rows(rows)
}

/// Channel vector of the masked patch: spatial mean of `v_s ∘ m`, `(1, d_c)`.
pub fn masked_mean<T: Real>(tape: &mut Tape<T>, patch: Var, mask: Var) -> Result<Var> {
    let gated = tape.mul(patch, mask)?;
    let pooled = tape.mean_pool(gated)?;
    let c = tape.shape(pooled)[0];
    tape.reshape(pooled, &[1, c])
}

/// Gates the patch with the mask and projects the pooled result to `(1, d)`.
pub fn apply_mask<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    backbone: &Backbone,
    patch: Var,
    mask: Var,
) -> Result<Var> {
    let m = masked_mean(tape, patch, mask)?;
    backbone.project(tape, store, m)
}

/// Binary `d_h × d_w` target (row-major, rows = y): a cell is set when its
/// centre, mapped to image coordinates, lies inside `bbox`. If no centre
/// does, the cell nearest the box centre is set.
pub fn ground_truth_mask(bbox: &BoundingBox, image_w: f64, image_h: f64, d_w: usize, d_h: usize) -> Result<Vec<f64>> {
    if !bbox.is_valid_in(image_w, image_h) {
        return Err(Error::invalid(
            "ground_truth_mask",
            format!("box {:?} outside a {image_w}x{image_h} image", bbox.to_array()),
        ));
    }
    let cx = |j: usize| (j as f64 + 0.5) * image_w / d_w as f64;
    let cy = |i: usize| (i as f64 + 0.5) * image_h / d_h as f64;
    let mut out = vec![0.0; d_w * d_h];
    let mut any = false;
    for i in 0..d_h {
        for j in 0..d_w {
            if bbox.contains_point(cx(j), cy(i)) {
                out[i * d_w + j] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        let (bx, by) = ((bbox.x0 + bbox.x1) / 2.0, (bbox.y0 + bbox.y1) / 2.0);
        let j = ((bx * d_w as f64 / image_w).floor() as usize).min(d_w - 1);
        let i = ((by * d_h as f64 / image_h).floor() as usize).min(d_h - 1);
        out[i * d_w + j] = 1.0;
    }
    Ok(out)
}

pub fn mask_loss<T: Real>(tape: &mut Tape<T>, mask: Var, target: &[T], kind: MaskLossKind) -> Result<Var> {
    match kind {
        MaskLossKind::Mse => tape.mse(mask, target),
        MaskLossKind::Bce => tape.bce(mask, target),
    }
}

/// Writes a binary (P5) 8-bit greyscale image, `round(255·v)` per cell.
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape("write_pgm", &[height, width], &[values.len()], None));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses a P5 file written by [`write_pgm`]: `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::invalid("read_pgm", format!("{} is not a P5 image", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gt_mask_full_and_left_half() {
        let full = ground_truth_mask(&BoundingBox::full(128.0, 128.0), 128.0, 128.0, 14, 14).unwrap();
        assert!(full.iter().all(|&v| v == 1.0));
        let left = ground_truth_mask(&BoundingBox::new(0.0, 0.0, 64.0, 128.0), 128.0, 128.0, 14, 14).unwrap();
        for i in 0..14 {
            for j in 0..14 {
                assert_eq!(left[i * 14 + j], if j < 7 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn gt_mask_tiny_box_marks_nearest_cell() {
        let m = ground_truth_mask(&BoundingBox::new(1.0, 1.0, 2.0, 2.0), 128.0, 128.0, 14, 14).unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(m[0], 1.0);
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        let (w, h, px) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![0, 128, 255, 64]);
    }
}
