//! Feature-level synthetic datasets where the label lives in a few patches
//! and the rest is class-agnostic clutter, plus the `CPFC1` feature cache.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const CACHE_MAGIC: &[u8; 5] = b"CPFC1";
const CACHE_HEADER: usize = 5 + 16;

const SALT_PROTOTYPES: u64 = 0x7072_6f74;
const SALT_CLUTTER: u64 = 0x636c_7574;
const SALT_SPLIT: u64 = 0x7370_6c74;
const SALT_SAMPLES: u64 = 0x736d_706c;
const SALT_KSHOT: u64 = 0x6b73_6874;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    New,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub id: usize,
    pub prototype: Vec<f64>,
    pub split: Split,
}

/// Parameters of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetDescriptor {
    pub num_classes: usize,
    pub split_fraction: f64,
    pub patches: usize,
    pub image_dim: usize,
    pub foreground_patches: usize,
    pub clutter_pool_size: usize,
    pub noise_sigma: f64,
    /// Probability that a sample contains any foreground patches.
    pub salience: f64,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Seed of the clutter pool; defaults to `seed`. Two descriptors with the
    /// same clutter seed but different seeds share clutter, not classes.
    pub clutter_seed: Option<u64>,
}

impl Default for DatasetDescriptor {
    fn default() -> Self {
        Self {
            num_classes: 8,
            split_fraction: 0.5,
            patches: 9,
            image_dim: 16,
            foreground_patches: 3,
            clutter_pool_size: 32,
            noise_sigma: 0.3,
            salience: 1.0,
            samples_per_class: 50,
            seed: 0,
            clutter_seed: None,
        }
    }
}

impl DatasetDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.foreground_patches > self.patches {
            return Err(Error::invalid(format!(
                "foreground_patches ({}) must not exceed patches ({})",
                self.foreground_patches, self.patches
            )));
        }
        if self.patches == 0 || self.image_dim == 0 {
            return Err(Error::invalid("patches and image_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.salience) {
            return Err(Error::invalid("salience must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.split_fraction) {
            return Err(Error::invalid("split_fraction must lie in [0, 1]"));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be a finite non-negative number"));
        }
        let needs_clutter = self.foreground_patches < self.patches || self.salience < 1.0;
        if needs_clutter && self.clutter_pool_size == 0 {
            return Err(Error::invalid(
                "clutter_pool_size must be positive when any patch is clutter",
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class must be positive"));
        }
        Ok(())
    }

    pub fn num_base(&self) -> usize {
        (self.num_classes as f64 * self.split_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub patches: Tensor,
    /// Which patches came from the class prototype. Diagnostic only.
    pub foreground_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<ClassSpec>,
    pub samples: Vec<Sample>,
    pub patches: usize,
    pub image_dim: usize,
}

/// Base/new partition: a seeded permutation of class ids, first `n_base` base.
fn partition(num_classes: usize, num_base: usize, seed: u64) -> Vec<Split> {
    let mut ids: Vec<usize> = (0..num_classes).collect();
    Rng::derived(seed, SALT_SPLIT).shuffle(&mut ids);
    let mut split = vec![Split::New; num_classes];
    for &id in &ids[..num_base.min(num_classes)] {
        split[id] = Split::Base;
    }
    split
}

fn gaussian_rows(rng: &mut Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gaussian()).collect()).collect()
}

pub fn generate(desc: &DatasetDescriptor) -> Result<Dataset> {
    desc.validate()?;
    let (k, p, dim) = (desc.num_classes, desc.patches, desc.image_dim);
    let prototypes = gaussian_rows(&mut Rng::derived(desc.seed, SALT_PROTOTYPES), k, dim);
    let clutter_seed = desc.clutter_seed.unwrap_or(desc.seed);
    let pool = gaussian_rows(
        &mut Rng::derived(clutter_seed, SALT_CLUTTER),
        desc.clutter_pool_size,
        dim,
    );
    let split = partition(k, desc.num_base(), desc.seed);
    let classes = prototypes
        .into_iter()
        .zip(split)
        .enumerate()
        .map(|(id, (prototype, split))| ClassSpec { id, prototype, split })
        .collect::<Vec<_>>();

    let mut rng = Rng::derived(desc.seed, SALT_SAMPLES);
    let mut samples = Vec::with_capacity(k * desc.samples_per_class);
    let mut positions: Vec<usize> = (0..p).collect();
    for class in &classes {
        for _ in 0..desc.samples_per_class {
            let salient = rng.next_f64() < desc.salience;
            rng.shuffle(&mut positions);
            let mut mask = vec![false; p];
            if salient {
                for &pos in &positions[..desc.foreground_patches] {
                    mask[pos] = true;
                }
            }
            let mut data = Vec::with_capacity(p * dim);
            for &fg in &mask {
                let base = if fg {
                    &class.prototype
                } else {
                    &pool[rng.below(pool.len())]
                };
                data.extend(base.iter().map(|b| b + desc.noise_sigma * rng.gaussian()));
            }
            samples.push(Sample {
                label: class.id,
                patches: Tensor::matrix(p, dim, data)?,
                foreground_mask: mask,
            });
        }
    }
    Ok(Dataset {
        classes,
        samples,
        patches: p,
        image_dim: dim,
    })
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn ids_in(&self, split: Split) -> Vec<usize> {
        self.classes.iter().filter(|c| c.split == split).map(|c| c.id).collect()
    }

    /// Prototypes as a `K × d_img` matrix, one row per class id.
    pub fn prototypes(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.classes.iter().map(|c| c.prototype.as_slice()).collect();
        Tensor::from_rows(&rows).expect("finite prototypes")
    }

    pub fn indices_of(&self, class_id: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].label == class_id)
            .collect()
    }

    pub fn to_cache(&self) -> FeatureCache {
        FeatureCache {
            num_classes: self.num_classes(),
            patches: self.patches,
            image_dim: self.image_dim,
            records: self.samples.iter().map(|s| (s.label, s.patches.clone())).collect(),
        }
    }

    /// Builds a dataset from externally computed features.
    ///
    /// A cache holds no prototypes, so each class is represented by the
    /// centroid of its samples' mean patch features. The base/new partition
    /// is drawn from `(seed, split_fraction)` as for generated data. Masks are
    /// all false since foreground is unknown.
    pub fn from_cache(cache: &FeatureCache, split_fraction: f64, seed: u64) -> Result<Self> {
        let k = cache.num_classes;
        let mut sums = vec![vec![0.0; cache.image_dim]; k];
        let mut counts = vec![0usize; k];
        for (label, patches) in &cache.records {
            for (s, m) in sums[*label].iter_mut().zip(patches.mean_rows()) {
                *s += m;
            }
            counts[*label] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InsufficientSamples {
                class: empty,
                available: 0,
                requested: 1,
            });
        }
        let num_base = (k as f64 * split_fraction).round() as usize;
        let split = partition(k, num_base, seed);
        let classes = sums
            .into_iter()
            .zip(counts)
            .zip(split)
            .enumerate()
            .map(|(id, ((sum, n), split))| ClassSpec {
                id,
                prototype: sum.into_iter().map(|s| s / n as f64).collect(),
                split,
            })
            .collect();
        let samples = cache
            .records
            .iter()
            .map(|(label, patches)| Sample {
                label: *label,
                patches: patches.clone(),
                foreground_mask: vec![false; cache.patches],
            })
            .collect();
        Ok(Self {
            classes,
            samples,
            patches: cache.patches,
            image_dim: cache.image_dim,
        })
    }
}

/// Exactly `k` sample indices per base class, class ids ascending.
pub fn sample_kshot(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for class in dataset.ids_in(Split::Base) {
        let mut pool = dataset.indices_of(class);
        if pool.len() < k {
            return Err(Error::InsufficientSamples {
                class,
                available: pool.len(),
                requested: k,
            });
        }
        Rng::derived(seed ^ class as u64, SALT_KSHOT).shuffle(&mut pool);
        let mut chosen = pool[..k].to_vec();
        chosen.sort_unstable();
        out.extend(chosen);
    }
    Ok(out)
}

/// Labels and patch features only; what an external encoder would produce.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub num_classes: usize,
    pub patches: usize,
    pub image_dim: usize,
    pub records: Vec<(usize, Tensor)>,
}

impl FeatureCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let record = 4 + 8 * self.patches * self.image_dim;
        let mut out = Vec::with_capacity(CACHE_HEADER + record * self.records.len());
        out.extend_from_slice(CACHE_MAGIC);
        for v in [self.num_classes, self.patches, self.image_dim, self.records.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (label, patches) in &self.records {
            out.extend_from_slice(&(*label as u32).to_le_bytes());
            for v in patches.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CACHE_MAGIC.len() || &bytes[..CACHE_MAGIC.len()] != CACHE_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < CACHE_HEADER {
            return Err(Error::Truncated {
                needed: CACHE_HEADER,
                found: bytes.len(),
            });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (k, p, dim, count) = (word(5), word(9), word(13), word(17));
        if k == 0 || p == 0 || dim == 0 {
            return Err(Error::DimInconsistent(format!(
                "zero dimension in header (K={k}, P={p}, d_img={dim})"
            )));
        }
        let record = 4 + 8 * p * dim;
        let body = bytes.len() - CACHE_HEADER;
        if body != record * count {
            // Records that are internally well formed but sized for a
            // different patch count are reported as such; anything else is a
            // short or overlong file.
            if count > 0 && body.is_multiple_of(count) && body / count > 4 && (body / count - 4).is_multiple_of(8 * dim)
            {
                return Err(Error::RecordLengthMismatch {
                    expected: record,
                    found: body / count,
                });
            }
            if body < record * count {
                return Err(Error::Truncated {
                    needed: CACHE_HEADER + record * count,
                    found: bytes.len(),
                });
            }
            return Err(Error::DimInconsistent(format!(
                "{} trailing bytes after {count} records",
                body - record * count
            )));
        }
        let mut records = Vec::with_capacity(count);
        for chunk in bytes[CACHE_HEADER..].chunks_exact(record) {
            let label = u32::from_le_bytes(chunk[..4].try_into().unwrap()) as usize;
            if label >= k {
                return Err(Error::DimInconsistent(format!("label {label} with K = {k}")));
            }
            let data = chunk[4..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push((label, Tensor::new(vec![p, dim], data)?));
        }
        Ok(Self {
            num_classes: k,
            patches: p,
            image_dim: dim,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_feature_cache(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.to_cache().save(path)
}

pub fn load_feature_cache(path: impl AsRef<Path>) -> Result<FeatureCache> {
    FeatureCache::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_sim;
    use proptest::prelude::*;

    fn small(seed: u64) -> DatasetDescriptor {
        DatasetDescriptor {
            num_classes: 4,
            samples_per_class: 20,
            image_dim: 6,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn partition_arithmetic() {
        let ds = generate(&small(1)).unwrap();
        assert_eq!(ds.ids_in(Split::Base).len(), 2);
        assert_eq!(ds.ids_in(Split::New).len(), 2);
        assert_eq!(ds.samples.len(), 80);
    }

    #[test]
    fn noiseless_full_foreground_is_prototype() {
        let desc = DatasetDescriptor {
            noise_sigma: 0.0,
            foreground_patches: 9,
            ..small(2)
        };
        let ds = generate(&desc).unwrap();
        for s in &ds.samples {
            for row in s.patches.iter_rows() {
                assert_eq!(row, ds.classes[s.label].prototype.as_slice());
            }
            assert!(s.foreground_mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn zero_salience_has_no_foreground() {
        let ds = generate(&DatasetDescriptor {
            salience: 0.0,
            ..small(3)
        })
        .unwrap();
        assert!(ds.samples.iter().all(|s| s.foreground_mask.iter().all(|&m| !m)));
        let ds = generate(&small(3)).unwrap();
        assert!(ds
            .samples
            .iter()
            .all(|s| s.foreground_mask.iter().filter(|&&m| m).count() == 3));
    }

    #[test]
    fn rejects_bad_descriptors() {
        let err = generate(&DatasetDescriptor {
            foreground_patches: 10,
            ..small(0)
        })
        .unwrap_err();
        assert!(err.to_string().contains("foreground_patches"));
        assert!(generate(&DatasetDescriptor {
            num_classes: 1,
            ..small(0)
        })
        .is_err());
        assert!(generate(&DatasetDescriptor {
            salience: 1.5,
            ..small(0)
        })
        .is_err());
    }

    #[test]
    fn kshot_examples() {
        let ds = generate(&small(4)).unwrap();
        assert_eq!(sample_kshot(&ds, 1, 0).unwrap().len(), 2);
        assert_eq!(sample_kshot(&ds, 5, 9).unwrap(), sample_kshot(&ds, 5, 9).unwrap());

        let ds = generate(&DatasetDescriptor {
            samples_per_class: 50,
            ..small(5)
        })
        .unwrap();
        let base = ds.ids_in(Split::Base);
        let picked = sample_kshot(&ds, 16, 3).unwrap();
        assert_eq!(picked.len(), 32);
        assert!(picked.iter().all(|&i| base.contains(&ds.samples[i].label)));

        match sample_kshot(&ds, 51, 0) {
            Err(Error::InsufficientSamples {
                class,
                available: 50,
                requested: 51,
            }) => {
                assert!(base.contains(&class))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cache_round_trip_and_errors() {
        let ds = generate(&small(6)).unwrap();
        let cache = ds.to_cache();
        let bytes = cache.to_bytes();
        assert_eq!(FeatureCache::from_bytes(&bytes).unwrap(), cache);

        let mut bad = bytes.clone();
        bad[1] = b'Q';
        assert!(matches!(FeatureCache::from_bytes(&bad), Err(Error::BadMagic)));
        assert!(matches!(
            FeatureCache::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            FeatureCache::from_bytes(&bytes[..10]),
            Err(Error::Truncated { .. })
        ));

        // Header says 9 patches, records carry 8.
        let short = FeatureCache {
            num_classes: 4,
            patches: 8,
            image_dim: 6,
            records: cache
                .records
                .iter()
                .map(|(l, t)| (*l, Tensor::matrix(8, 6, t.data()[..48].to_vec()).unwrap()))
                .collect(),
        };
        let mut lying = short.to_bytes();
        lying[9..13].copy_from_slice(&9u32.to_le_bytes());
        match FeatureCache::from_bytes(&lying) {
            Err(e @ Error::RecordLengthMismatch { .. }) => {
                assert!(e.to_string().starts_with("record length mismatch"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn from_cache_keeps_samples() {
        let ds = generate(&small(7)).unwrap();
        let back = Dataset::from_cache(&ds.to_cache(), 0.5, 7).unwrap();
        assert_eq!(back.samples.len(), ds.samples.len());
        assert_eq!(back.ids_in(Split::Base), ds.ids_in(Split::Base));
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!((a.label, &a.patches), (b.label, &b.patches));
        }
    }

    #[test]
    fn local_signal_beats_global_mean() {
        let ds = generate(&DatasetDescriptor {
            samples_per_class: 125,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(ds.samples.len(), 1000);
        let (mut global, mut local) = (0.0, 0.0);
        for s in &ds.samples {
            let mu = &ds.classes[s.label].prototype;
            global += cosine_sim(&s.patches.mean_rows(), mu).unwrap();
            local += s
                .patches
                .iter_rows()
                .zip(&s.foreground_mask)
                .filter(|(_, &fg)| fg)
                .map(|(row, _)| cosine_sim(row, mu).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
        }
        assert!(global < local, "global {global} local {local}");
    }

    proptest! {
        #[test]
        fn partition_disjoint_and_exhaustive(k in 2usize..20, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let split = partition(k, (k as f64 * frac).round() as usize, seed);
            prop_assert_eq!(split.len(), k);
            let base = split.iter().filter(|s| **s == Split::Base).count();
            prop_assert_eq!(base, (k as f64 * frac).round() as usize);
        }

        #[test]
        fn generation_is_pure(seed in 0u64..1000) {
            let desc = DatasetDescriptor { samples_per_class: 3, ..small(seed) };
            prop_assert_eq!(generate(&desc).unwrap(), generate(&desc).unwrap());
        }
    }
}
