//! Pixel-wise majority-vote label fusion and the three fusion topologies.
//!
//! A pixel is foreground iff strictly more than half of the voting masks mark
//! it, so exact ties go to background at every level.

use crate::error::{Error, Result};
use crate::image::BinaryMask;

/// Masks predicted for one image, indexed by (stain style `p`, model `q`).
/// Stain 0 is the original, un-normalized image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    stains: usize,
    models: usize,
    masks: Vec<BinaryMask>,
}

impl MaskGrid {
    /// `masks` in stain-major order: index `p * models + q`.
    pub fn new(stains: usize, models: usize, masks: Vec<BinaryMask>) -> Result<Self> {
        if stains == 0 || models == 0 {
            return Err(Error::Config(format!("mask grid must be non-empty, got {stains}x{models}")));
        }
        if masks.len() != stains * models {
            return Err(Error::Dimensions(format!(
                "{stains}x{models} grid needs {} masks, got {}",
                stains * models,
                masks.len()
            )));
        }
        let dims = masks[0].dims();
        if let Some(i) = masks.iter().position(|m| m.dims() != dims) {
            return Err(Error::Dimensions(format!(
                "mask (stain {}, model {}) is {:?}, expected {dims:?}",
                i / models,
                i % models,
                masks[i].dims()
            )));
        }
        Ok(Self { stains, models, masks })
    }

    pub fn from_rows(rows: Vec<Vec<BinaryMask>>) -> Result<Self> {
        let stains = rows.len();
        let models = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != models) {
            return Err(Error::Dimensions("ragged mask grid rows".into()));
        }
        Self::new(stains, models, rows.into_iter().flatten().collect())
    }

    pub fn stains(&self) -> usize {
        self.stains
    }

    pub fn models(&self) -> usize {
        self.models
    }

    pub fn dims(&self) -> (usize, usize) {
        self.masks[0].dims()
    }

    pub fn get(&self, stain: usize, model: usize) -> &BinaryMask {
        assert!(stain < self.stains && model < self.models, "grid index out of range");
        &self.masks[stain * self.models + model]
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn stain_row(&self, stain: usize) -> &[BinaryMask] {
        &self.masks[stain * self.models..(stain + 1) * self.models]
    }

    pub fn model_column(&self, model: usize) -> Vec<&BinaryMask> {
        (0..self.stains).map(|p| self.get(p, model)).collect()
    }

    /// Swap the roles of stains and models.
    pub fn transpose(&self) -> Self {
        let masks = (0..self.models)
            .flat_map(|q| (0..self.stains).map(move |p| (p, q)))
            .map(|(p, q)| self.get(p, q).clone())
            .collect();
        Self { stains: self.models, models: self.stains, masks }
    }

    /// Keep the given stains and models, in the given order.
    pub fn select(&self, stains: &[usize], models: &[usize]) -> Result<Self> {
        if let Some(&p) = stains.iter().find(|&&p| p >= self.stains) {
            return Err(Error::IndexOutOfRange { index: p, len: self.stains });
        }
        if let Some(&q) = models.iter().find(|&&q| q >= self.models) {
            return Err(Error::IndexOutOfRange { index: q, len: self.models });
        }
        let masks = stains
            .iter()
            .flat_map(|&p| models.iter().map(move |&q| (p, q)))
            .map(|(p, q)| self.get(p, q).clone())
            .collect();
        Self::new(stains.len(), models.len(), masks)
    }
}

/// Strict-majority vote over a set of same-sized masks.
pub fn majority_vote<'a, I>(masks: I) -> Result<BinaryMask>
where
    I: IntoIterator<Item = &'a BinaryMask>,
{
    let mut iter = masks.into_iter();
    let first = iter.next().ok_or_else(|| Error::Config("majority vote over an empty mask list".into()))?;
    let (w, h) = first.dims();
    let mut votes: Vec<u32> = first.data().iter().map(|&v| u32::from(v)).collect();
    let mut total = 1u32;
    for (i, m) in iter.enumerate() {
        if m.dims() != (w, h) {
            return Err(Error::Dimensions(format!("mask {} is {:?}, expected {:?}", i + 1, m.dims(), (w, h))));
        }
        for (acc, &v) in votes.iter_mut().zip(m.data()) {
            *acc += u32::from(v);
        }
        total += 1;
    }
    // votes > total / 2  <=>  2 * votes > total
    let data = votes.into_iter().map(|v| u8::from(2 * v > total)).collect();
    BinaryMask::new(w, h, data)
}

/// One vote over all `(m+1) * n` masks.
pub fn fuse_all(grid: &MaskGrid) -> Result<BinaryMask> {
    majority_vote(grid.masks())
}

/// Vote across models within each stain, then across the per-stain results.
pub fn fuse_model_stain(grid: &MaskGrid) -> Result<BinaryMask> {
    let per_stain = (0..grid.stains()).map(|p| majority_vote(grid.stain_row(p))).collect::<Result<Vec<_>>>()?;
    majority_vote(&per_stain)
}

/// Vote across stains within each model, then across the per-model results.
pub fn fuse_stain_model(grid: &MaskGrid) -> Result<BinaryMask> {
    let per_model = (0..grid.models()).map(|q| majority_vote(grid.model_column(q))).collect::<Result<Vec<_>>>()?;
    majority_vote(&per_model)
}

/// The three topologies that consume a full grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    All,
    ModelStain,
    StainModel,
}

impl Topology {
    pub fn fuse(self, grid: &MaskGrid) -> Result<BinaryMask> {
        match self {
            Topology::All => fuse_all(grid),
            Topology::ModelStain => fuse_model_stain(grid),
            Topology::StainModel => fuse_stain_model(grid),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Topology::All => "all",
            Topology::ModelStain => "model-stain",
            Topology::StainModel => "stain-model",
        }
    }
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Topology::All),
            "model-stain" => Ok(Topology::ModelStain),
            "stain-model" => Ok(Topology::StainModel),
            other => {
                Err(Error::Config(format!("unknown topology {other:?}; expected all, model-stain or stain-model")))
            }
        }
    }
}
