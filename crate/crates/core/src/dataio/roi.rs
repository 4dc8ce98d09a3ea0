//! RoI crops around an instance's visible box, and the inverse mapping of
//! predictions back into the scene.

use crate::error::{contract_err, Result};
use crate::raster::{BBox, Mask, RgbImage};
use crate::scalar::Scalar;
use crate::scenegen::{InstanceRecord, SceneSample};
use crate::train::TrainSample;

/// Model input for one instance plus the metadata needed to map outputs
/// back into scene coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RoIInput {
    /// `side x side` RGB crop, bilinear.
    pub image: RgbImage,
    /// `side x side` visible-mask crop, nearest neighbor.
    pub visible: Mask,
    /// Visible box before enlargement.
    pub source_bbox: BBox,
    /// Enlarged and clamped crop rectangle in scene pixels.
    pub crop: BBox,
    pub scene_width: usize,
    pub scene_height: usize,
    pub side: usize,
}

impl RoIInput {
    /// Scene pixels per crop pixel along x and y.
    pub fn scale(&self) -> (f64, f64) {
        (self.crop.w as f64 / self.side as f64, self.crop.h as f64 / self.side as f64)
    }

    /// `[4, side, side]` model input: RGB mapped to [-1, 1], then the mask
    /// as 0/1.
    pub fn to_input<T: Scalar>(&self) -> Vec<T> {
        let plane = self.side * self.side;
        let mut out = Vec::with_capacity(4 * plane);
        for c in 0..3 {
            out.extend((0..plane).map(|i| T::lit(self.image.data[i * 3 + c] as f64 / 255.0 * 2.0 - 1.0)));
        }
        out.extend(self.visible.data.iter().map(|&b| if b { T::one() } else { T::zero() }));
        out
    }

    /// Crops a scene-size mask through this RoI (nearest neighbor).
    pub fn crop_mask(&self, mask: &Mask) -> Result<Mask> {
        if mask.width != self.scene_width || mask.height != self.scene_height {
            return contract_err(format!(
                "mask is {}x{}, RoI scene is {}x{}",
                mask.width, mask.height, self.scene_width, self.scene_height
            ));
        }
        Ok(resize_nearest(mask, self.crop, self.side))
    }
}

/// Enlarges `bbox` so that width and height are each scaled by 1.2 about the
/// center, rounded outward to whole pixels, then clamps to the scene.
pub fn enlarge_bbox(bbox: BBox, scene_width: usize, scene_height: usize) -> BBox {
    // Integer form of x - 0.1 w (floored) and x + 1.1 w (ceiled).
    let axis = |x: usize, w: usize, limit: usize| {
        let (x, w) = (x as i64, w as i64);
        let lo = (10 * x - w).div_euclid(10);
        let hi = -(-(10 * x + 11 * w)).div_euclid(10);
        let lo = lo.clamp(0, limit as i64) as usize;
        let hi = hi.clamp(0, limit as i64) as usize;
        (lo, hi - lo)
    };
    let (x, w) = axis(bbox.x, bbox.w, scene_width);
    let (y, h) = axis(bbox.y, bbox.h, scene_height);
    BBox { x, y, w, h }
}

/// Source coordinate of destination pixel `d` under align-corners-false
/// resampling from `src` to `dst` samples.
fn source_coord(d: usize, src: usize, dst: usize) -> f64 {
    ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

fn lerp_weights(d: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let s = source_coord(d, src, dst);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, s - i0 as f64)
}

fn resize_nearest(mask: &Mask, rect: BBox, side: usize) -> Mask {
    let pick = |d: usize, len: usize| (((d as f64 + 0.5) * len as f64 / side as f64).floor() as usize).min(len - 1);
    Mask::from_fn(side, side, |x, y| mask.get(rect.x + pick(x, rect.w), rect.y + pick(y, rect.h)))
}

fn resize_bilinear_rgb(img: &RgbImage, rect: BBox, side: usize) -> RgbImage {
    let mut out = RgbImage::filled(side, side, [0, 0, 0]);
    let xs: Vec<_> = (0..side).map(|d| lerp_weights(d, rect.w, side)).collect();
    for y in 0..side {
        let (y0, y1, fy) = lerp_weights(y, rect.h, side);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p = |xx: usize, yy: usize| img.pixel(rect.x + xx, rect.y + yy);
            let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
            let px = [0, 1, 2].map(|k| {
                let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
                let bot = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
                (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8
            });
            out.set_pixel(x, y, px);
        }
    }
    out
}

/// Crops the instance's enlarged visible box out of the scene and resamples
/// it to `side x side`.
pub fn extract_roi(scene: &SceneSample, instance: &InstanceRecord, side: usize) -> Result<RoIInput> {
    if instance.visible.is_empty() {
        return contract_err(format!("instance in scene {} has an empty visible mask", scene.id));
    }
    crop_roi(&scene.image, &instance.visible, side)
}

/// [`extract_roi`] for a bare image and scene-size visible mask.
pub fn crop_roi(image: &RgbImage, visible: &Mask, side: usize) -> Result<RoIInput> {
    if side == 0 {
        return contract_err("RoI side must be positive");
    }
    let (sw, sh) = (image.width, image.height);
    if visible.width != sw || visible.height != sh {
        return contract_err(format!("visible mask is {}x{}, image is {sw}x{sh}", visible.width, visible.height));
    }
    let Some(source_bbox) = visible.bbox() else {
        return contract_err("visible mask is empty");
    };
    let crop = enlarge_bbox(source_bbox, sw, sh);
    Ok(RoIInput {
        image: resize_bilinear_rgb(image, crop, side),
        visible: resize_nearest(visible, crop, side),
        source_bbox,
        crop,
        scene_width: sw,
        scene_height: sh,
        side,
    })
}

/// Resizes a `side x side` probability map to the crop rectangle
/// (bilinear), thresholds it (`>= thr`), and places it into an empty
/// scene-size mask.
pub fn paste_back<T: Scalar>(prob: &[T], roi: &RoIInput, thr: f64) -> Result<Mask> {
    let side = roi.side;
    if prob.len() != side * side {
        return contract_err(format!("probability map has {} values, expected {}", prob.len(), side * side));
    }
    let mut out = Mask::empty(roi.scene_width, roi.scene_height);
    let BBox { x: cx, y: cy, w, h } = roi.crop;
    let xs: Vec<_> = (0..w).map(|d| lerp_weights(d, side, w)).collect();
    let at = |x: usize, y: usize| prob[y * side + x].to_f64().unwrap_or(f64::NAN);
    for y in 0..h {
        let (y0, y1, fy) = lerp_weights(y, side, h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
            let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
            if top * (1.0 - fy) + bot * fy >= thr {
                out.set(cx + x, cy + y, true);
            }
        }
    }
    Ok(out)
}

/// Ground-truth crops of one instance in RoI space.
#[derive(Clone, Debug, PartialEq)]
pub struct RoITargets {
    pub amodal: Mask,
    pub visible: Mask,
    pub occluded: Mask,
}

/// An instance prepared for the model: input crop plus ground truth in the
/// same frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RoISample {
    pub scene_id: String,
    pub instance_id: usize,
    pub roi: RoIInput,
    pub targets: RoITargets,
    pub occ_rate: f64,
    pub occ_bin: crate::scenegen::OcclusionBin,
}

impl RoISample {
    pub fn new(scene: &SceneSample, instance_id: usize, side: usize) -> Result<Self> {
        let Some(inst) = scene.instances.get(instance_id) else {
            return contract_err(format!("scene {} has no instance {instance_id}", scene.id));
        };
        let roi = extract_roi(scene, inst, side)?;
        let targets = RoITargets {
            amodal: roi.crop_mask(&inst.amodal)?,
            visible: roi.visible.clone(),
            occluded: roi.crop_mask(&inst.occluded)?,
        };
        Ok(Self {
            scene_id: scene.id.clone(),
            instance_id,
            roi,
            targets,
            occ_rate: inst.occ_rate,
            occ_bin: inst.occ_bin,
        })
    }

    pub fn to_train_sample<T: Scalar>(&self) -> TrainSample<T> {
        let bits = |m: &Mask| m.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        TrainSample {
            input: self.roi.to_input(),
            amodal: bits(&self.targets.amodal),
            occluded: bits(&self.targets.occluded),
        }
    }
}

/// RoI samples for every non-excluded instance in the given split (all
/// splits when `None`), in scene then instance order.
pub fn roi_samples(scenes: &[SceneSample], split: Option<crate::scenegen::Split>, side: usize) -> Result<Vec<RoISample>> {
    let mut out = Vec::new();
    for scene in scenes {
        for (i, inst) in scene.instances.iter().enumerate() {
            if inst.excluded || split.is_some_and(|s| s != inst.split) {
                continue;
            }
            out.push(RoISample::new(scene, i, side)?);
        }
    }
    Ok(out)
}
