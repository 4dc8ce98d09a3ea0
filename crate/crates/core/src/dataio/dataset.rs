use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
use crate::error::{format_err, Result};
use crate::raster::BBox;
use crate::scenegen::{InstanceRecord, OcclusionBin, SceneSample, Split};

pub const INDEX_FILE: &str = "index.jsonl";

/// One line of `index.jsonl`. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub scene_id: String,
    pub instance_id: usize,
    pub split: Split,
    pub bbox: BBox,
    pub occ_rate: f64,
    pub occ_bin: OcclusionBin,
    pub image: String,
    pub visible: String,
    pub amodal: String,
    pub occluded: String,
    /// Fully hidden instance, not used for training.
    pub excluded: bool,
    /// Shape prototype the instance was drawn from.
    pub prototype: u64,
}

fn mask_path(scene: &str, inst: usize, kind: char) -> String {
    format!("masks/{scene}_{inst}_{kind}.pgm")
}

fn index_record(scene: &SceneSample, i: usize, inst: &InstanceRecord) -> IndexRecord {
    IndexRecord {
        scene_id: scene.id.clone(),
        instance_id: i,
        split: inst.split,
        bbox: inst.bbox,
        occ_rate: inst.occ_rate,
        occ_bin: inst.occ_bin,
        image: format!("scenes/{}.ppm", scene.id),
        visible: mask_path(&scene.id, i, 'v'),
        amodal: mask_path(&scene.id, i, 'a'),
        occluded: mask_path(&scene.id, i, 'o'),
        excluded: inst.excluded,
        prototype: inst.prototype,
    }
}

/// Writes `root/index.jsonl`, `root/scenes/<id>.ppm`, and
/// `root/masks/<id>_<instance>_{v,a,o}.pgm`.
pub fn write_dataset(root: impl AsRef<Path>, scenes: &[SceneSample]) -> Result<()> {
    let root = root.as_ref();
    std::fs::create_dir_all(root.join("scenes"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    let mut index = std::io::BufWriter::new(std::fs::File::create(root.join(INDEX_FILE))?);
    for scene in scenes {
        write_ppm(root.join(format!("scenes/{}.ppm", scene.id)), &scene.image)?;
        for (i, inst) in scene.instances.iter().enumerate() {
            let rec = index_record(scene, i, inst);
            write_pgm(root.join(&rec.visible), &inst.visible)?;
            write_pgm(root.join(&rec.amodal), &inst.amodal)?;
            write_pgm(root.join(&rec.occluded), &inst.occluded)?;
            serde_json::to_writer(&mut index, &rec)?;
            index.write_all(b"\n")?;
        }
    }
    index.flush()?;
    Ok(())
}

/// An opened dataset directory; files are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<IndexRecord>,
}

pub fn read_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref().to_path_buf();
    let index_path = root.join(INDEX_FILE);
    let text = std::fs::read(&index_path)?;
    let file = index_path.display().to_string();
    let mut records = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive(|&b| b == b'\n') {
        let body = line.strip_suffix(b"\n").unwrap_or(line);
        if !body.iter().all(u8::is_ascii_whitespace) {
            let rec: IndexRecord = serde_json::from_slice(body)
                .map_err(|e| format_err(&file, (offset + e.column().saturating_sub(1)) as u64, format!("bad index record: {e}")))?;
            for p in [&rec.image, &rec.visible, &rec.amodal, &rec.occluded] {
                if Path::new(p).is_absolute() || p.split('/').any(|c| c == "..") {
                    return Err(format_err(&file, offset as u64, format!("path {p:?} escapes the dataset root")));
                }
            }
            records.push(rec);
        }
        offset += line.len();
    }
    Ok(Dataset { root, records })
}

impl Dataset {
    pub fn instance_count(&self) -> usize {
        self.records.len()
    }

    /// Scene ids in index order.
    pub fn scene_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.records {
            if ids.last() != Some(&r.scene_id) {
                ids.push(r.scene_id.clone());
            }
        }
        ids
    }

    /// Loads every scene with its masks.
    pub fn load_all(&self) -> Result<Vec<SceneSample>> {
        let mut groups: BTreeMap<usize, Vec<&IndexRecord>> = BTreeMap::new();
        let ids = self.scene_ids();
        let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        for r in &self.records {
            groups.entry(pos[r.scene_id.as_str()]).or_default().push(r);
        }
        groups.into_values().map(|recs| self.load_records(&recs)).collect()
    }

    pub fn load_scene(&self, scene_id: &str) -> Result<SceneSample> {
        let recs: Vec<&IndexRecord> = self.records.iter().filter(|r| r.scene_id == scene_id).collect();
        if recs.is_empty() {
            return crate::error::contract_err(format!("no scene {scene_id:?} in dataset"));
        }
        self.load_records(&recs)
    }

    fn load_records(&self, recs: &[&IndexRecord]) -> Result<SceneSample> {
        let mut recs = recs.to_vec();
        recs.sort_by_key(|r| r.instance_id);
        let image = read_ppm(self.root.join(&recs[0].image))?;
        let mut instances = Vec::with_capacity(recs.len());
        for r in recs.iter() {
            instances.push(InstanceRecord {
                amodal: read_pgm(self.root.join(&r.amodal))?,
                visible: read_pgm(self.root.join(&r.visible))?,
                occluded: read_pgm(self.root.join(&r.occluded))?,
                bbox: r.bbox,
                occ_rate: r.occ_rate,
                occ_bin: r.occ_bin,
                split: r.split,
                excluded: r.excluded,
                prototype: r.prototype,
            });
        }
        Ok(SceneSample {
            id: recs[0].scene_id.clone(),
            image,
            instances,
        })
    }
}
