use std::collections::HashMap;
use std::sync::OnceLock;

use crate::clipgen::{unlabeled_pool, ClipRecord, Split, SyntheticDataset, VideoClip};
use crate::enhance::{retinex_enhance, RetinexParams};
use crate::error::{invalid, Result};
use crate::par;

/// Rendered dark clips of a dataset, plus their retinex counterparts built
/// on first request. Student code only ever calls [`ClipStore::dark`].
pub struct ClipStore {
    index: HashMap<u32, usize>,
    records: Vec<ClipRecord>,
    dark: Vec<VideoClip>,
    retinex: OnceLock<Vec<VideoClip>>,
    retinex_params: RetinexParams,
}

impl ClipStore {
    pub fn new(dataset: &SyntheticDataset, retinex_params: RetinexParams) -> Result<Self> {
        retinex_params.validate()?;
        let dark = par::map(&dataset.clips, |r| dataset.render(r)).into_iter().collect::<Result<Vec<_>>>()?;
        let index = dataset.clips.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        Ok(Self { index, records: dataset.clips.clone(), dark, retinex: OnceLock::new(), retinex_params })
    }

    fn position(&self, id: u32) -> Result<usize> {
        self.index.get(&id).copied().ok_or_else(|| invalid(format!("clip {id} is not in the dataset")))
    }

    pub fn dark(&self, id: u32) -> Result<&VideoClip> {
        Ok(&self.dark[self.position(id)?])
    }

    pub fn retinex(&self, id: u32) -> Result<&VideoClip> {
        let i = self.position(id)?;
        if self.retinex.get().is_none() {
            let built = par::map(&self.dark, |c| retinex_enhance(c, &self.retinex_params)).into_iter().collect::<Result<Vec<_>>>()?;
            let _ = self.retinex.set(built);
        }
        Ok(&self.retinex.get().expect("just built")[i])
    }

    pub fn retinex_params(&self) -> &RetinexParams {
        &self.retinex_params
    }

    pub fn retinex_built(&self) -> bool {
        self.retinex.get().is_some()
    }

    /// `(clip_id, class_id)` of every clip in `split`, in manifest order.
    pub fn split(&self, split: Split) -> Vec<(u32, usize)> {
        self.records.iter().filter(|r| r.split == split).map(|r| (r.id, r.class_id)).collect()
    }
}

/// Rendered unlabeled pool: train clips without labels plus extra second-family clips.
pub fn ssl_pool(dataset: &SyntheticDataset, extra: usize, seed: u64) -> Result<Vec<VideoClip>> {
    let specs = unlabeled_pool(dataset, extra, seed);
    par::map(&specs, |u| u.render(dataset.dims)).into_iter().collect()
}
