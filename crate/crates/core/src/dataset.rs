//! Embedding bundles, few-shot splits and synthetic bundle generation.
//!
//! Random draws use `ChaCha8Rng::seed_from_u64(seed)`; each consumer uses its
//! own ChaCha stream id (see [`stream`]) so splits and synthetic data are
//! reproducible from the seed alone.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{l2_normalize_rows, Matrix};

/// ChaCha stream ids, one per random consumer.
pub mod stream {
    pub const FEW_SHOT: u64 = 1;
    pub const SYNTHETIC: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Precomputed image and text features for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Candidate pool for few-shot sampling, `[num_train × C]`.
    pub train_features: Matrix,
    pub train_labels: Vec<usize>,
    pub test_features: Matrix,
    pub test_labels: Vec<usize>,
    /// One class-text feature per class, `[N × C]`.
    pub text_features: Matrix,
    /// Frozen zero-shot classifier, `[C × N]`.
    pub zeroshot_weights: Matrix,
}

impl EmbeddingBundle {
    pub fn num_train(&self) -> usize {
        self.train_labels.len()
    }

    pub fn num_test(&self) -> usize {
        self.test_labels.len()
    }

    /// Checks shapes, label ranges, class coverage and zero rows.
    pub fn validate(&self) -> Result<()> {
        let c = self.feature_dim;
        let n = self.num_classes;
        if n == 0 || c == 0 {
            return Err(Error::InvalidConfig("bundle needs at least one class and feature".into()));
        }
        if self.class_names.len() != n {
            return Err(Error::ClassCountMismatch {
                expected: n,
                found: self.class_names.len(),
            });
        }
        let check = |op: &'static str, m: &Matrix, rows: usize, cols: usize| {
            if m.shape() != (rows, cols) {
                Err(Error::Shape {
                    op,
                    left: m.shape(),
                    right: (rows, cols),
                })
            } else {
                Ok(())
            }
        };
        check("train_features", &self.train_features, self.num_train(), c)?;
        check("test_features", &self.test_features, self.num_test(), c)?;
        check("text_features", &self.text_features, n, c)?;
        check("zeroshot_weights", &self.zeroshot_weights, c, n)?;
        for labels in [&self.train_labels, &self.test_labels] {
            for (index, &label) in labels.iter().enumerate() {
                if label >= n {
                    return Err(Error::LabelOutOfRange {
                        index,
                        label,
                        num_classes: n,
                    });
                }
            }
        }
        let mut seen = alloc::vec![false; n];
        for &l in &self.train_labels {
            seen[l] = true;
        }
        if let Some(class) = seen.iter().position(|s| !s) {
            return Err(Error::MissingClass { class });
        }
        for (op, m) in [
            ("train_features", &self.train_features),
            ("test_features", &self.test_features),
            ("text_features", &self.text_features),
        ] {
            for i in 0..m.rows() {
                if m.row(i).iter().all(|&x| x == 0.0) {
                    return Err(Error::DegenerateRow { op, row: i });
                }
            }
            if !m.is_finite() {
                return Err(Error::NonFinite { op });
            }
        }
        if !self.zeroshot_weights.is_finite() {
            return Err(Error::NonFinite { op: "zeroshot_weights" });
        }
        Ok(())
    }

    /// Indices of training rows per class, ascending.
    pub fn train_indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = alloc::vec![Vec::new(); self.num_classes];
        for (i, &l) in self.train_labels.iter().enumerate() {
            if l < self.num_classes {
                by_class[l].push(i);
            }
        }
        by_class
    }

    /// Copy of this bundle whose test features are rotated by `angle` radians
    /// in every coordinate plane `(2i, 2i+1)`. Every test vector moves by
    /// exactly `angle` (an odd trailing coordinate is left in place).
    pub fn with_rotated_test(&self, angle: f64) -> EmbeddingBundle {
        let (s, c) = (libm::sin(angle), libm::cos(angle));
        let mut out = self.clone();
        let dim = self.feature_dim;
        for i in 0..out.test_features.rows() {
            let row = out.test_features.row_mut(i);
            for p in 0..dim / 2 {
                let (a, b) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = c * a - s * b;
                row[2 * p + 1] = s * a + c * b;
            }
            to_f32_precision(row);
        }
        out
    }
}

/// K selected training rows per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSplit {
    pub shots: usize,
    pub seed: u64,
    /// `selected[class]` holds exactly `shots` indices into `train_features`.
    pub selected: Vec<Vec<usize>>,
}

impl FewShotSplit {
    pub fn num_classes(&self) -> usize {
        self.selected.len()
    }

    /// Class-major flattening: class 0's shots first.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.selected.iter().flatten().copied().collect()
    }

    pub fn flat_labels(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .flat_map(|(c, idx)| core::iter::repeat_n(c, idx.len()))
            .collect()
    }

    /// Checks the split against `bundle`: K distinct indices per class, each
    /// carrying that class's label.
    pub fn validate_for(&self, bundle: &EmbeddingBundle) -> Result<()> {
        if self.selected.len() != bundle.num_classes {
            return Err(Error::ClassCountMismatch {
                expected: bundle.num_classes,
                found: self.selected.len(),
            });
        }
        for (class, idx) in self.selected.iter().enumerate() {
            if idx.len() != self.shots {
                return Err(Error::InvalidConfig(format!(
                    "class {class} has {} shots in split, expected {}",
                    idx.len(),
                    self.shots
                )));
            }
            for (k, &i) in idx.iter().enumerate() {
                if i >= bundle.num_train() || bundle.train_labels[i] != class {
                    return Err(Error::InvalidConfig(format!(
                        "split index {i} is not a training row of class {class}"
                    )));
                }
                if idx[..k].contains(&i) {
                    return Err(Error::InvalidConfig(format!("duplicate split index {i}")));
                }
            }
        }
        Ok(())
    }
}

/// Draws `k` distinct training rows per class with a seeded partial
/// Fisher-Yates shuffle over each class's ascending index list.
pub fn sample_few_shot(bundle: &EmbeddingBundle, k: usize, seed: u64) -> Result<FewShotSplit> {
    if k == 0 {
        return Err(Error::InvalidConfig("shot count must be at least 1".into()));
    }
    let mut rng = rng_for(seed, stream::FEW_SHOT);
    let mut selected = Vec::with_capacity(bundle.num_classes);
    for (class, mut pool) in bundle.train_indices_by_class().into_iter().enumerate() {
        if pool.len() < k {
            return Err(Error::InsufficientSamples {
                class,
                available: pool.len(),
                requested: k,
            });
        }
        for i in 0..k {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(k);
        selected.push(pool);
    }
    Ok(FewShotSplit { shots: k, seed, selected })
}

/// Parameters of the synthetic bundle generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    /// Training-pool rows per class.
    pub shots: usize,
    pub feature_dim: usize,
    pub test_per_class: usize,
    /// Scale of the class centroid relative to unit-norm isotropic noise.
    pub class_separation: f64,
    /// Noise added to the class centroid before it becomes the text feature.
    pub modality_noise: f64,
    pub seed: u64,
    /// Sub-clusters per class; `> 1` makes classes multimodal.
    pub modes_per_class: usize,
    /// Extra noise confined to a nuisance subspace of the features.
    pub nuisance_noise: f64,
    /// Fraction of feature dimensions forming the nuisance subspace.
    pub nuisance_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 16,
            shots: 16,
            feature_dim: 64,
            test_per_class: 50,
            class_separation: 2.0,
            modality_noise: 0.0,
            seed: 0,
            modes_per_class: 1,
            nuisance_noise: 0.0,
            nuisance_fraction: 0.5,
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum());
    v.into_iter().map(|x| x / n).collect()
}

fn to_f32_precision(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// Generates per-class Gaussian clusters on the unit sphere.
///
/// Image features are `normalize(separation·μ + z)` with `z ~ N(0, I/C)`;
/// text features are `normalize(μ + modality_noise·z')`; the zero-shot
/// classifier has the unit centroids `μ` as columns. With several modes per
/// class, `μ` is the normalized mean of the mode centroids. All values are
/// rounded to `f32` so a bundle round-trips through storage bit-exactly.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<EmbeddingBundle> {
    let n = cfg.num_classes;
    let c = cfg.feature_dim;
    if n == 0 || cfg.shots == 0 || cfg.test_per_class == 0 || cfg.modes_per_class == 0 {
        return Err(Error::InvalidConfig("synthetic counts must be at least 1".into()));
    }
    if c < 2 {
        return Err(Error::InvalidConfig("feature_dim must be at least 2".into()));
    }
    if !(cfg.class_separation >= 0.0 && cfg.modality_noise >= 0.0 && cfg.nuisance_noise >= 0.0) {
        return Err(Error::InvalidConfig("noise and separation scales must be non-negative".into()));
    }
    if !(0.0..=1.0).contains(&cfg.nuisance_fraction) {
        return Err(Error::InvalidConfig("nuisance_fraction must lie in [0, 1]".into()));
    }
    let mut rng = rng_for(cfg.seed, stream::SYNTHETIC);
    let noise_scale = 1.0 / libm::sqrt(c as f64);
    let nuisance_dims = ((c as f64) * cfg.nuisance_fraction) as usize;
    let signal_dims = c - nuisance_dims;

    // Mode centroids live in the signal subspace (leading coordinates).
    let modes: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| {
            (0..cfg.modes_per_class)
                .map(|_| {
                    let mut v = gaussian_vec(&mut rng, signal_dims.max(1), 1.0);
                    v.resize(c, 0.0);
                    normalized(v)
                })
                .collect()
        })
        .collect();
    let centroids: Vec<Vec<f64>> = modes
        .iter()
        .map(|ms| {
            let mut mean = alloc::vec![0.0; c];
            for m in ms {
                mean.iter_mut().zip(m).for_each(|(a, b)| *a += b);
            }
            normalized(mean)
        })
        .collect();

    let sample = |rng: &mut ChaCha8Rng, class: usize, i: usize| -> Vec<f64> {
        let mode = &modes[class][i % cfg.modes_per_class];
        let mut v = gaussian_vec(rng, c, noise_scale);
        for (x, m) in v.iter_mut().zip(mode) {
            *x += cfg.class_separation * m;
        }
        if nuisance_dims > 0 && cfg.nuisance_noise > 0.0 {
            let extra = gaussian_vec(rng, nuisance_dims, cfg.nuisance_noise / libm::sqrt(nuisance_dims as f64));
            for (x, e) in v[signal_dims..].iter_mut().zip(extra) {
                *x += e;
            }
        }
        normalized(v)
    };

    let mut train = Vec::with_capacity(n * cfg.shots * c);
    let mut train_labels = Vec::with_capacity(n * cfg.shots);
    for i in 0..cfg.shots {
        for class in 0..n {
            train.extend(sample(&mut rng, class, i));
            train_labels.push(class);
        }
    }
    let mut test = Vec::with_capacity(n * cfg.test_per_class * c);
    let mut test_labels = Vec::with_capacity(n * cfg.test_per_class);
    for i in 0..cfg.test_per_class {
        for class in 0..n {
            test.extend(sample(&mut rng, class, i));
            test_labels.push(class);
        }
    }
    let mut text = Vec::with_capacity(n * c);
    for mu in &centroids {
        let mut v = gaussian_vec(&mut rng, c, noise_scale * cfg.modality_noise);
        v.iter_mut().zip(mu).for_each(|(a, b)| *a += b);
        text.extend(normalized(v));
    }
    let mut zeroshot = Matrix::from_fn(c, n, |i, j| centroids[j][i]);

    to_f32_precision(&mut train);
    to_f32_precision(&mut test);
    to_f32_precision(&mut text);
    to_f32_precision(zeroshot.data_mut());

    let bundle = EmbeddingBundle {
        feature_dim: c,
        num_classes: n,
        class_names: (0..n).map(|i| format!("class_{i}")).collect(),
        train_features: Matrix::new(n * cfg.shots, c, train)?,
        train_labels,
        test_features: Matrix::new(n * cfg.test_per_class, c, test)?,
        test_labels,
        text_features: Matrix::new(n, c, text)?,
        zeroshot_weights: zeroshot,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Zero-shot predictions `argmax(normalize(x)·W_c)`, ties to the lowest class.
pub fn zeroshot_predictions(bundle: &EmbeddingBundle, features: &Matrix) -> Result<Vec<usize>> {
    let q = l2_normalize_rows(features)?;
    let logits = crate::linalg::matmul(&q, &bundle.zeroshot_weights)?;
    Ok((0..logits.rows()).map(|i| crate::linalg::argmax(logits.row(i))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            num_classes: 4,
            shots: 3,
            feature_dim: 8,
            test_per_class: 2,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small(5)).unwrap();
        let b = generate_synthetic(&small(5)).unwrap();
        let c = generate_synthetic(&small(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn default_sized_bundle_passes_invariants() {
        let b = generate_synthetic(&SyntheticConfig::default()).unwrap();
        b.validate().unwrap();
        assert_eq!(b.train_features.shape(), (256, 64));
        let tally = b.train_indices_by_class();
        assert!(tally.iter().all(|v| v.len() == 16));
    }

    #[test]
    fn separable_limit_gives_perfect_nearest_centroid() {
        let cfg = SyntheticConfig {
            class_separation: 1e6,
            ..small(1)
        };
        let b = generate_synthetic(&cfg).unwrap();
        let pred = zeroshot_predictions(&b, &b.test_features).unwrap();
        assert_eq!(pred, b.test_labels);
    }

    #[test]
    fn validate_catches_bad_labels_and_rows() {
        let mut b = generate_synthetic(&small(2)).unwrap();
        b.train_labels[3] = 4;
        assert!(matches!(b.validate(), Err(Error::LabelOutOfRange { index: 3, label: 4, .. })));

        let mut b = generate_synthetic(&small(2)).unwrap();
        b.test_features.row_mut(1).iter_mut().for_each(|x| *x = 0.0);
        assert!(matches!(b.validate(), Err(Error::DegenerateRow { op: "test_features", row: 1 })));

        let mut b = generate_synthetic(&small(2)).unwrap();
        for l in b.train_labels.iter_mut() {
            if *l == 2 {
                *l = 1;
            }
        }
        assert_eq!(b.validate(), Err(Error::MissingClass { class: 2 }));
    }

    #[test]
    fn few_shot_forced_selection() {
        let b = generate_synthetic(&SyntheticConfig { shots: 1, ..small(3) }).unwrap();
        for seed in [0, 1, 99] {
            let s = sample_few_shot(&b, 1, seed).unwrap();
            for (class, idx) in s.selected.iter().enumerate() {
                assert_eq!(idx, &b.train_indices_by_class()[class]);
            }
        }
    }

    #[test]
    fn few_shot_is_deterministic_and_valid() {
        let b = generate_synthetic(&small(4)).unwrap();
        let s1 = sample_few_shot(&b, 2, 17).unwrap();
        let s2 = sample_few_shot(&b, 2, 17).unwrap();
        assert_eq!(s1, s2);
        s1.validate_for(&b).unwrap();
        assert_eq!(s1.flat_indices().len(), 8);
        assert_eq!(s1.flat_labels(), alloc::vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn sixteen_shots_ten_classes_tally() {
        let cfg = SyntheticConfig {
            num_classes: 10,
            shots: 20,
            feature_dim: 8,
            test_per_class: 1,
            ..Default::default()
        };
        let b = generate_synthetic(&cfg).unwrap();
        let s = sample_few_shot(&b, 16, 3).unwrap();
        let flat = s.flat_indices();
        assert_eq!(flat.len(), 160);
        let mut counts = [0usize; 10];
        for &i in &flat {
            counts[b.train_labels[i]] += 1;
        }
        assert_eq!(counts, [16; 10]);
        let mut sorted = flat.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 160);
    }

    #[test]
    fn insufficient_samples_names_class() {
        let mut b = generate_synthetic(&small(4)).unwrap();
        // relabel one class-2 row as class 0: class 2 keeps 2 rows
        let i = b.train_labels.iter().position(|&l| l == 2).unwrap();
        b.train_labels[i] = 0;
        assert_eq!(
            sample_few_shot(&b, 3, 0).unwrap_err(),
            Error::InsufficientSamples {
                class: 2,
                available: 2,
                requested: 3
            }
        );
    }

    #[test]
    fn rotation_moves_every_vector_by_angle() {
        let b = generate_synthetic(&small(8)).unwrap();
        let r = b.with_rotated_test(0.3);
        let cos = crate::linalg::cosine_rows(&b.test_features, &r.test_features).unwrap();
        for i in 0..b.num_test() {
            assert!((cos.get(i, i) - libm::cos(0.3)).abs() < 1e-6);
        }
    }
}
