//! Procedural layered scenes with exact amodal, visible, and occluded
//! ground truth.
//!
//! Objects are dropped in z-order; visibility follows the painter's
//! algorithm. The occlusion-rate distribution of a dataset is steered
//! toward a target mix by choosing, per scene, among several candidate
//! layouts of different clutter.

mod shapes;

pub use shapes::{derive_seed, mix64, rasterize_shape, Geometry, ShapeCatalog, ShapeSpec, Split};

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::raster::{BBox, Mask, RgbImage};

/// Scene background; object pixels never take this color.
pub const BACKGROUND: [u8; 3] = [20, 20, 24];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionBin {
    Low,
    Medium,
    High,
}

impl OcclusionBin {
    pub const ALL: [OcclusionBin; 3] = [OcclusionBin::Low, OcclusionBin::Medium, OcclusionBin::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OcclusionBin::Low => "low",
            OcclusionBin::Medium => "medium",
            OcclusionBin::High => "high",
        }
    }
}

/// `[0, 0.2)` low, `[0.2, 0.5)` medium, `[0.5, 1]` high.
pub fn occlusion_bin(occ_rate: f64) -> Result<OcclusionBin> {
    if !(0.0..=1.0).contains(&occ_rate) {
        return contract_err(format!("occlusion rate {occ_rate} outside [0, 1]"));
    }
    Ok(if occ_rate < 0.2 {
        OcclusionBin::Low
    } else if occ_rate < 0.5 {
        OcclusionBin::Medium
    } else {
        OcclusionBin::High
    })
}

/// Painter's algorithm over amodal masks ordered bottom to top: returns
/// `(visible, occluded)` per instance.
pub fn compute_masks(stack: &[Mask]) -> Result<Vec<(Mask, Mask)>> {
    let Some(top) = stack.last() else {
        return contract_err("compute_masks needs at least one instance");
    };
    let mut above = Mask::empty(top.width, top.height);
    let mut out = Vec::with_capacity(stack.len());
    for amodal in stack.iter().rev() {
        let visible = amodal.and_not(&above)?;
        let occluded = amodal.and_not(&visible)?;
        above = above.or(amodal)?;
        out.push((visible, occluded));
    }
    out.reverse();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub amodal: Mask,
    pub visible: Mask,
    pub occluded: Mask,
    /// Tight box of the visible mask; all zeros when fully hidden.
    pub bbox: BBox,
    pub occ_rate: f64,
    pub occ_bin: OcclusionBin,
    pub split: Split,
    /// Fully hidden instances are kept but not used for training.
    pub excluded: bool,
    pub prototype: u64,
}

/// One scene: image plus instances ordered bottom to top.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub image: RgbImage,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_scenes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub scene_side: usize,
    pub seed: u64,
    /// Fraction of scenes (and of catalog prototypes) in the train split.
    pub train_fraction: f64,
    /// Target percentage per occlusion bin (low, medium, high); `None`
    /// disables steering and the mix check.
    pub target_mix: Option<[f64; 3]>,
    /// Allowed deviation from `target_mix`, in percentage points.
    pub mix_tolerance: f64,
    /// Candidate layouts tried per scene when steering.
    pub candidates: usize,
    pub catalog_size: u64,
}

/// Occlusion-bin mix of a large reference dataset (percent).
pub const DEFAULT_TARGET_MIX: [f64; 3] = [43.50, 33.69, 22.81];

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_scenes: 50,
            objects_min: 8,
            objects_max: 12,
            scene_side: 256,
            seed: 0,
            train_fraction: 0.8,
            target_mix: Some(DEFAULT_TARGET_MIX),
            mix_tolerance: 10.0,
            candidates: 6,
            catalog_size: 512,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_scenes == 0 {
            return bad("n_scenes must be at least 1".into());
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad(format!("bad object range {}..={}", self.objects_min, self.objects_max));
        }
        if self.scene_side < 96 {
            return bad(format!("scene side {} is below the 96-pixel minimum", self.scene_side));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad(format!("train fraction {} outside [0, 1]", self.train_fraction));
        }
        if self.candidates == 0 || self.catalog_size == 0 {
            return bad("candidates and catalog size must be positive".into());
        }
        Ok(())
    }

    pub fn catalog(&self) -> ShapeCatalog {
        ShapeCatalog {
            seed: derive_seed(self.seed, 0x6361_7461, 0),
            size: self.catalog_size,
            train_fraction: self.train_fraction,
        }
    }

    /// Split of scene `i`: the first `round(n * train_fraction)` scenes are
    /// train.
    pub fn split_of(&self, i: usize) -> Split {
        let n_train = (self.n_scenes as f64 * self.train_fraction).round() as usize;
        if i < n_train {
            Split::Train
        } else {
            Split::Val
        }
    }
}

/// Clutter of candidate `k` of `n`: the fraction of the scene over which
/// object centers spread, from 1.0 (sparse) down to 0.3 (dense).
fn spread(k: usize, n: usize) -> f64 {
    if n == 1 {
        return 0.75;
    }
    1.0 - 0.7 * k as f64 / (n - 1) as f64
}

fn texture(color: [u8; 3], seed: u64, x: usize, y: usize) -> [u8; 3] {
    let h = derive_seed(seed, x as u64, y as u64);
    let mut out = color;
    for (c, o) in out.iter_mut().enumerate() {
        let noise = ((h >> (c * 8)) & 0x1f) as i32 - 16;
        *o = (*o as i32 + noise).clamp(40, 255) as u8;
    }
    out
}

/// Lays out and renders one scene from `seed`.
pub fn generate_scene(cfg: &SceneConfig, catalog: &ShapeCatalog, id: String, split: Split, seed: u64, spread: f64) -> Result<SceneSample> {
    let side = cfg.scene_side;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let n = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut specs = Vec::with_capacity(n);
    let mut stack = Vec::with_capacity(n);
    for _ in 0..n {
        let mut spec = None;
        for _ in 0..10_000 {
            let pid = rng.random_range(0..catalog.size);
            if catalog.pool_of(pid) == split {
                spec = Some(catalog.prototype(pid));
                break;
            }
        }
        let Some(mut spec) = spec else {
            return Err(Error::Generation(format!("shape catalog has no {} prototypes", split.as_str())));
        };
        spec.geometry = spec.geometry.rotated(rng.random_range(0.0..std::f64::consts::TAU));
        let r = spec.geometry.bounding_radius().ceil() as i64 + 1;
        let half = side as f64 / 2.0;
        let reach = spread * (half - r as f64).max(0.0);
        let pos = |rng: &mut ChaCha8Rng| (half + rng.random_range(-1.0..=1.0) * reach).floor() as i64;
        let (cx, cy) = (pos(&mut rng), pos(&mut rng));
        let clamp = |v: i64| v.clamp(r, side as i64 - 1 - r);
        stack.push(rasterize_shape(&spec.geometry, (clamp(cx), clamp(cy)), side)?);
        specs.push(spec);
    }
    let masks = compute_masks(&stack)?;
    let mut image = RgbImage::filled(side, side, BACKGROUND);
    for (spec, amodal) in specs.iter().zip(&stack) {
        for y in 0..side {
            for x in 0..side {
                if amodal.get(x, y) {
                    image.set_pixel(x, y, texture(spec.color, spec.texture_seed, x, y));
                }
            }
        }
    }
    let mut instances = Vec::with_capacity(n);
    for ((spec, amodal), (visible, occluded)) in specs.into_iter().zip(stack).zip(masks) {
        let area = amodal.count();
        if area == 0 {
            return Err(Error::Generation("shape rasterized to zero pixels".into()));
        }
        let occ_rate = occluded.count() as f64 / area as f64;
        let bbox = visible.bbox().unwrap_or(BBox { x: 0, y: 0, w: 0, h: 0 });
        instances.push(InstanceRecord {
            excluded: visible.is_empty(),
            amodal,
            visible,
            occluded,
            bbox,
            occ_rate,
            occ_bin: occlusion_bin(occ_rate)?,
            split,
            prototype: spec.prototype,
        });
    }
    Ok(SceneSample { id, image, instances })
}

/// Percentage of instances per occlusion bin.
pub fn bin_mix<'a>(instances: impl IntoIterator<Item = &'a InstanceRecord>) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for inst in instances {
        counts[inst.occ_bin.index()] += 1;
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.map(|c| 100.0 * c as f64 / total)
}

/// Generates `cfg.n_scenes` scenes in memory.
///
/// With a target mix, each scene is chosen among `cfg.candidates` layouts
/// (each from its own derived seed, at decreasing spread) as the one that
/// moves the running bin mix closest to the target. Fails if the final mix
/// is off by more than `cfg.mix_tolerance` points in any bin.
pub fn generate_scenes(cfg: &SceneConfig) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    let catalog = cfg.catalog();
    let mut counts = [0usize; 3];
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes {
        let id = format!("{i:05}");
        let split = cfg.split_of(i);
        let scene_seed = derive_seed(cfg.seed, 0x7363_656e, i as u64);
        let Some(target) = cfg.target_mix else {
            scenes.push(generate_scene(cfg, &catalog, id, split, scene_seed, spread(0, 1))?);
            continue;
        };
        let mut best: Option<(f64, SceneSample, [usize; 3])> = None;
        for k in 0..cfg.candidates {
            let seed = derive_seed(scene_seed, 0x6361_6e64, k as u64);
            let scene = generate_scene(cfg, &catalog, id.clone(), split, seed, spread(k, cfg.candidates))?;
            let mut c = counts;
            for inst in &scene.instances {
                c[inst.occ_bin.index()] += 1;
            }
            let total = c.iter().sum::<usize>() as f64;
            let dist: f64 = (0..3).map(|b| (100.0 * c[b] as f64 / total - target[b]).powi(2)).sum();
            if best.as_ref().is_none_or(|(d, _, _)| dist < *d) {
                best = Some((dist, scene, c));
            }
        }
        let (_, scene, c) = best.expect("at least one candidate");
        counts = c;
        scenes.push(scene);
    }
    if let Some(target) = cfg.target_mix {
        let mix = bin_mix(scenes.iter().flat_map(|s| &s.instances));
        if (0..3).any(|b| (mix[b] - target[b]).abs() > cfg.mix_tolerance) {
            return Err(Error::Generation(format!(
                "occlusion mix {:.2}/{:.2}/{:.2}% misses target {:.2}/{:.2}/{:.2}% by more than {} points",
                mix[0], mix[1], mix[2], target[0], target[1], target[2], cfg.mix_tolerance
            )));
        }
    }
    Ok(scenes)
}

/// Generates scenes and writes them as a dataset directory.
pub fn generate_dataset(cfg: &SceneConfig, root: impl AsRef<Path>) -> Result<Vec<SceneSample>> {
    let scenes = generate_scenes(cfg)?;
    crate::dataio::write_dataset(root, &scenes)?;
    Ok(scenes)
}
