//! Convolutional feature extractor, region pooling and box geometry.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{bilinear_plan, BilinearTaps};
use crate::autodiff::{ConvKind, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{lecun_std, Conv, Linear};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Total downsampling factor of the feature extractor.
pub const STRIDE: usize = 4;
pub const MIN_IMAGE_SIDE: usize = 32;

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x0, y0, x1, y1]: [f64; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn full(width: f64, height: f64) -> Self {
        Self::new(0.0, 0.0, width, height)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// `0 <= x0 < x1 <= width` and likewise vertically, all finite.
    pub fn is_valid_in(&self, width: f64, height: f64) -> bool {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        finite
            && 0.0 <= self.x0
            && self.x0 < self.x1
            && self.x1 <= width
            && 0.0 <= self.y0
            && self.y0 < self.y1
            && self.y1 <= height
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x <= self.x1 && self.y0 <= y && y <= self.y1
    }

    pub fn to_array(self) -> [f64; 4] {
        self.into()
    }
}

/// Smallest box containing both inputs.
pub fn union_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    BoundingBox::new(a.x0.min(b.x0), a.y0.min(b.y0), a.x1.max(b.x1), a.y1.max(b.y1))
}

/// `(x0/w, y0/h, x1/w, y1/h)`.
pub fn normalize_box(b: &BoundingBox, width: f64, height: f64) -> Result<[f64; 4]> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::invalid(
            "normalize_box",
            format!("non-positive image size {width}x{height}"),
        ));
    }
    if !b.is_valid_in(width, height) {
        return Err(Error::invalid(
            "normalize_box",
            format!("box {:?} outside a {width}x{height} image", b.to_array()),
        ));
    }
    Ok([b.x0 / width, b.y0 / height, b.x1 / width, b.y1 / height])
}

/// RGB image, channel-major `(3, height, width)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCanvas {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl ImageCanvas {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(Error::invalid(
                "image",
                format!("{width}x{height} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"),
            ));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::shape("image", &[3, height, width], &[pixels.len()], None));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn blank(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; 3 * width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(vec![3, self.height, self.width], self.pixels.clone())
            .expect("validated at construction")
            .cast()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub d_c: usize,
    pub d: usize,
    pub d_w: usize,
    pub d_h: usize,
}

/// Output of [`Backbone::roi_feature`].
pub struct RoiOutput {
    /// `(d_c, d_h, d_w)` bilinear samples.
    pub patch: Var,
    /// `(1, d)` projected spatial mean of the patch.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub conv1: Conv,
    pub conv2: Conv,
    /// Shared `d_c -> d` projection for every pooled region feature.
    pub proj: Linear,
}

impl Backbone {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: BackboneConfig,
    ) -> Result<Self> {
        Ok(Self {
            cfg,
            conv1: Conv::register(store, rng, "backbone.conv1", 3, cfg.hidden, 3)?,
            conv2: Conv::register(store, rng, "backbone.conv2", cfg.hidden, cfg.d_c, 3)?,
            proj: Linear::register(store, rng, "backbone.proj", cfg.d_c, cfg.d, lecun_std(cfg.d_c))?,
        })
    }

    /// `(3, H, W)` image to a `(d_c, H/4, W/4)` map.
    pub fn extract_feature_map<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::invalid(
                "extract_feature_map",
                format!("expected (3, H, W), got {s:?}"),
            ));
        }
        if s[1] < MIN_IMAGE_SIDE || s[2] < MIN_IMAGE_SIDE {
            return Err(Error::invalid(
                "extract_feature_map",
                format!(
                    "image {}x{} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                    s[2], s[1]
                ),
            ));
        }
        let h = self.conv1.forward(tape, store, image, ConvKind::ThreeByThreePad1)?;
        let h = tape.relu(h);
        let h = tape.avg_pool2(h)?;
        let h = self.conv2.forward(tape, store, h, ConvKind::ThreeByThreePad1)?;
        let h = tape.relu(h);
        tape.avg_pool2(h)
    }

    /// Bilinear sampling plan of `bbox` (image pixels) on a map of the
    /// given size.
    pub fn region_plan<T: Real>(
        &self,
        map_h: usize,
        map_w: usize,
        bbox: &BoundingBox,
        image_w: f64,
        image_h: f64,
    ) -> Result<Vec<BilinearTaps<T>>> {
        if !bbox.is_valid_in(image_w, image_h) {
            return Err(Error::invalid(
                "roi_feature",
                format!("box {:?} outside a {image_w}x{image_h} image", bbox.to_array()),
            ));
        }
        let sx = map_w as f64 / image_w;
        let sy = map_h as f64 / image_h;
        let region = [bbox.x0 * sx, bbox.y0 * sy, bbox.x1 * sx, bbox.y1 * sy];
        if region[2] - region[0] <= 0.0 || region[3] - region[1] <= 0.0 {
            return Err(Error::invalid(
                "roi_feature",
                format!("degenerate box {:?}", bbox.to_array()),
            ));
        }
        Ok(bilinear_plan(map_h, map_w, region, self.cfg.d_h, self.cfg.d_w))
    }

    pub fn roi_feature<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        map: Var,
        bbox: &BoundingBox,
        image_w: f64,
        image_h: f64,
    ) -> Result<RoiOutput> {
        let (mh, mw) = map_hw(tape, map)?;
        let plan = self.region_plan(mh, mw, bbox, image_w, image_h)?;
        let patch = tape.bilinear(map, Arc::new(plan), self.cfg.d_h, self.cfg.d_w)?;
        let pooled = self.pooled_regions(tape, store, map, std::slice::from_ref(bbox), image_w, image_h)?;
        Ok(RoiOutput { patch, pooled })
    }

    /// Full-image pooled feature.
    pub fn whole_image_feature<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        map: Var,
        image_w: f64,
        image_h: f64,
    ) -> Result<Var> {
        Ok(self
            .roi_feature(tape, store, map, &BoundingBox::full(image_w, image_h), image_w, image_h)?
            .pooled)
    }

    /// Pooled features of several boxes at once, `(boxes, d)`. The spatial
    /// mean of a bilinear patch is a fixed linear functional of the map, so
    /// every box becomes one row of an averaging matrix.
    pub fn pooled_regions<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        map: Var,
        boxes: &[BoundingBox],
        image_w: f64,
        image_h: f64,
    ) -> Result<Var> {
        let (mh, mw) = map_hw(tape, map)?;
        let cells = mh * mw;
        let inv = T::lit(1.0 / (self.cfg.d_h * self.cfg.d_w) as f64);
        let mut avg = vec![T::zero(); boxes.len() * cells];
        for (r, b) in boxes.iter().enumerate() {
            let row = &mut avg[r * cells..(r + 1) * cells];
            for taps in self.region_plan::<T>(mh, mw, b, image_w, image_h)? {
                for (i, w) in taps {
                    row[i] = row[i] + w * inv;
                }
            }
        }
        let avg = tape.constant(Tensor::new(vec![boxes.len(), cells], avg)?);
        let flat = tape.reshape(map, &[self.cfg.d_c, cells])?;
        let means = tape.matmul_t(avg, flat, false, true)?;
        self.proj.forward(tape, store, means)
    }

    /// Projects `(rows, d_c)` channel vectors through the shared projection.
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.proj.forward(tape, store, x)
    }
}

fn map_hw<T: Real>(tape: &Tape<T>, map: Var) -> Result<(usize, usize)> {
    match tape.shape(map) {
        [_, h, w] => Ok((*h, *w)),
        s => Err(Error::invalid(
            "roi_feature",
            format!("feature map must be (C, H, W), got {s:?}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_is_hull() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(union_box(&a, &b), BoundingBox::new(0.0, 0.0, 3.0, 3.0));
        assert_eq!(union_box(&a, &a), a);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_box(&BoundingBox::full(64.0, 48.0), 64.0, 48.0).unwrap(),
            [0.0, 0.0, 1.0, 1.0]
        );
        let c = normalize_box(&BoundingBox::new(10.0, 20.0, 30.0, 40.0), 100.0, 200.0).unwrap();
        assert_eq!(c, [0.1, 0.1, 0.3, 0.2]);
        assert!(normalize_box(&BoundingBox::new(10.0, 20.0, 130.0, 40.0), 100.0, 200.0).is_err());
    }

    #[test]
    fn box_serializes_as_array() {
        let b = BoundingBox::new(1.0, 2.0, 3.5, 4.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.5,4.0]");
    }
}
