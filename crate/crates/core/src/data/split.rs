use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::io::{list_images, read_gray_raw, read_mask};
use crate::data::{CtSlice, LabeledPair, Source};
use crate::error::{Error, Result};
use crate::par;

/// Partition sizes for the labeled pool plus the shuffle seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 45,
            val: 5,
            test: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Val,
    Test,
    Unlabeled,
    /// Labeled images beyond the requested partition sizes.
    Unused,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
            Partition::Unlabeled => "unlabeled",
            Partition::Unused => "unused",
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<LabeledPair>,
    pub val: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
    pub unlabeled: Vec<CtSlice>,
    pub unused: Vec<String>,
}

impl DatasetSplit {
    /// Every id with its partition, sorted by id.
    pub fn assignments(&self) -> BTreeMap<String, Partition> {
        let mut out = BTreeMap::new();
        for (part, pairs) in [
            (Partition::Train, &self.train),
            (Partition::Val, &self.val),
            (Partition::Test, &self.test),
        ] {
            for p in pairs {
                out.insert(p.id().to_string(), part);
            }
        }
        for s in &self.unlabeled {
            out.insert(s.id().to_string(), Partition::Unlabeled);
        }
        for id in &self.unused {
            out.insert(id.clone(), Partition::Unused);
        }
        out
    }

    /// Assigns already-loaded pairs to partitions with a seeded shuffle.
    pub fn from_pairs(
        mut pairs: Vec<LabeledPair>,
        unlabeled: Vec<CtSlice>,
        spec: &SplitSpec,
    ) -> Result<Self> {
        let needed = spec.train + spec.val + spec.test;
        if needed > pairs.len() {
            return Err(Error::Validation(format!(
                "split needs {needed} labeled images ({}/{}/{}), found {}",
                spec.train,
                spec.val,
                spec.test,
                pairs.len()
            )));
        }
        let mut ids: Vec<&str> = pairs
            .iter()
            .map(|p| p.id())
            .chain(unlabeled.iter().map(|s| s.id()))
            .collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!(
                "duplicate id `{}` across labeled/unlabeled pools",
                w[0]
            )));
        }
        pairs.sort_by(|a, b| a.id().cmp(b.id()));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        pairs.shuffle(&mut rng);
        let unused = pairs.split_off(needed);
        let test = pairs.split_off(spec.train + spec.val);
        let val = pairs.split_off(spec.train);
        let mut unlabeled = unlabeled;
        unlabeled.sort_by(|a, b| a.id().cmp(b.id()));
        Ok(DatasetSplit {
            train: pairs,
            val,
            test,
            unlabeled,
            unused: unused.into_iter().map(|p| p.id().to_string()).collect(),
        })
    }
}

/// Loads `root/images` with masks from `root/masks` plus `root/unlabeled`,
/// then partitions the labeled pool.
pub fn load_dataset(root: &Path, spec: &SplitSpec) -> Result<DatasetSplit> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !images_dir.is_dir() {
        return Err(Error::io(
            &images_dir,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let images = list_images(&images_dir)?;
    let masks: BTreeMap<String, std::path::PathBuf> =
        list_images(&masks_dir)?.into_iter().collect();
    for (id, _) in &images {
        if !masks.contains_key(id) {
            return Err(Error::MissingMask { id: id.clone() });
        }
    }
    let pairs = par::map_slice(&images, |(id, path)| -> Result<LabeledPair> {
        let image = CtSlice::from_raw(id.clone(), read_gray_raw(path)?, Source::Labeled)?;
        let mask = read_mask(&masks[id], id)?;
        LabeledPair::new(image, mask)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let unlabeled = par::map_slice(&list_images(&root.join("unlabeled"))?, |(id, path)| {
        CtSlice::from_raw(id.clone(), read_gray_raw(path)?, Source::Unlabeled)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    DatasetSplit::from_pairs(pairs, unlabeled, spec)
}

/// Writes `id<TAB>partition` lines sorted by id.
pub fn write_manifest(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut text = String::new();
    for (id, part) in split.assignments() {
        text.push_str(&format!("{id}\t{part}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{SyntheticConfig, SyntheticGenerator};

    fn pools(labeled: usize, unlabeled: usize) -> (Vec<LabeledPair>, Vec<CtSlice>) {
        let g = SyntheticGenerator::new(SyntheticConfig::default());
        (
            (0..labeled).map(|i| g.labeled(i).unwrap()).collect(),
            (0..unlabeled).map(|i| g.unlabeled(i).unwrap()).collect(),
        )
    }

    #[test]
    fn default_sizes_are_respected() {
        let (l, u) = pools(100, 16);
        let s = DatasetSplit::from_pairs(l, u, &SplitSpec::default()).unwrap();
        assert_eq!(
            (s.train.len(), s.val.len(), s.test.len(), s.unlabeled.len()),
            (45, 5, 50, 16)
        );
    }

    #[test]
    fn same_seed_same_partition_and_disjoint() {
        let spec = SplitSpec {
            train: 4,
            val: 2,
            test: 3,
            seed: 11,
        };
        let (l, u) = pools(10, 3);
        let a = DatasetSplit::from_pairs(l.clone(), u.clone(), &spec).unwrap();
        let b = DatasetSplit::from_pairs(l.into_iter().rev().collect(), u, &spec).unwrap();
        assert_eq!(a.assignments(), b.assignments());
        assert_eq!(a.assignments().len(), 13);
        assert_eq!(a.unused.len(), 1);
    }

    #[test]
    fn too_few_images_is_a_validation_error() {
        let (l, u) = pools(3, 0);
        assert!(matches!(
            DatasetSplit::from_pairs(l, u, &SplitSpec::default()),
            Err(Error::Validation(_))
        ));
    }
}
