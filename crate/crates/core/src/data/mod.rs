//! Synthetic datasets, their on-disk formats and evaluation.

pub mod annotations;
pub mod checkpoint;
pub mod eval;
pub mod scene;

use std::path::Path;

pub use annotations::{read_annotations, write_annotations, Annotation};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use eval::{eval_ap, ApReport, ScoredPose};
pub use scene::{gen_scene, SceneSpec, Skeleton};

use crate::error::{Error, Result};
use crate::geometry::{normalize_instance, PersonInstance};
use crate::numeric::Tensor;

pub const SCENES_FILE: &str = "scenes.ntc";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Images with their annotations, index-aligned.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub annotations: Vec<Annotation>,
}

impl Dataset {
    /// Scenes `0..num` of `spec`.
    pub fn generate(spec: &SceneSpec, num: usize) -> Result<Self> {
        Self::generate_range(spec, 0, num)
    }

    /// Scenes `first..first + num` of `spec`.
    pub fn generate_range(spec: &SceneSpec, first: u64, num: usize) -> Result<Self> {
        let mut d = Dataset::default();
        for id in first..first + num as u64 {
            let (img, ann) = gen_scene(spec, id)?;
            d.images.push(img);
            d.annotations.push(ann);
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Instances of scene `i` scaled into the unit square.
    pub fn normalized(&self, i: usize) -> Result<Vec<PersonInstance>> {
        let a = &self.annotations[i];
        a.instances
            .iter()
            .map(|p| normalize_instance(p, a.width as f64, a.height as f64))
            .collect()
    }

    /// Writes `scenes.ntc` and `annotations.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names: Vec<String> = self.annotations.iter().map(|a| image_name(a.id)).collect();
        save_checkpoint(
            dir.join(SCENES_FILE),
            names.iter().map(String::as_str).zip(self.images.iter()),
        )?;
        write_annotations(dir.join(ANNOTATIONS_FILE), &self.annotations)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let annotations = read_annotations(dir.join(ANNOTATIONS_FILE))?;
        let mut images: std::collections::HashMap<String, Tensor<f32>> =
            load_checkpoint(dir.join(SCENES_FILE))?.into_iter().collect();
        let mut d = Dataset::default();
        for a in annotations {
            let img = images
                .remove(&image_name(a.id))
                .ok_or_else(|| Error::Format(format!("no image for scene {}", a.id)))?;
            if img.shape() != [a.height, a.width] {
                return Err(Error::Format(format!(
                    "scene {} image {:?} does not match {}x{}",
                    a.id,
                    img.shape(),
                    a.width,
                    a.height
                )));
            }
            d.images.push(img);
            d.annotations.push(a);
        }
        Ok(d)
    }
}

pub fn image_name(id: u64) -> String {
    format!("scene{id:06}")
}
