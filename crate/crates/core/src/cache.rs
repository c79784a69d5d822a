//! Image key-value cache and the affine projections feeding the text-side
//! cache (MetaNet for class text, Img2TxtNet for queries).

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{EmbeddingBundle, FewShotSplit};
use crate::error::{Error, Result};
use crate::linalg::{self, l2_normalize_rows, matmul, matmul_tn, Matrix};

/// Few-shot cache: one normalized key and one one-hot value per training shot.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheModel {
    /// `[NK × C]`, unit rows at construction.
    pub image_keys: Matrix,
    /// `[NK × N]` one-hot rows.
    pub values: Matrix,
    pub entry_labels: Vec<usize>,
    /// Row of `train_features` each entry came from.
    pub source_indices: Vec<usize>,
}

impl CacheModel {
    pub fn len(&self) -> usize {
        self.entry_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.values.cols()
    }

    /// Rebuilds a cache from keys and labels (values are derived).
    pub fn from_parts(
        image_keys: Matrix,
        entry_labels: Vec<usize>,
        source_indices: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if image_keys.rows() != entry_labels.len() || source_indices.len() != entry_labels.len() {
            return Err(Error::Shape {
                op: "cache_from_parts",
                left: image_keys.shape(),
                right: (entry_labels.len(), source_indices.len()),
            });
        }
        let values = one_hot(&entry_labels, num_classes)?;
        Ok(Self {
            image_keys,
            values,
            entry_labels,
            source_indices,
        })
    }

    /// Reorders entries (keys, values, labels together).
    pub fn permuted(&self, order: &[usize]) -> Result<CacheModel> {
        Ok(CacheModel {
            image_keys: self.image_keys.gather_rows(order)?,
            values: self.values.gather_rows(order)?,
            entry_labels: order.iter().map(|&i| self.entry_labels[i]).collect(),
            source_indices: order.iter().map(|&i| self.source_indices[i]).collect(),
        })
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Matrix> {
    if labels.is_empty() {
        return Err(Error::EmptyInput { what: "labels" });
    }
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (index, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        m.set(index, label, 1.0);
    }
    Ok(m)
}

/// Builds the cache in class-major order from a validated split.
pub fn build_cache(bundle: &EmbeddingBundle, split: &FewShotSplit) -> Result<CacheModel> {
    split.validate_for(bundle)?;
    let indices = split.flat_indices();
    let keys = l2_normalize_rows(&bundle.train_features.gather_rows(&indices)?)?;
    CacheModel::from_parts(keys, split.flat_labels(), indices, bundle.num_classes)
}

/// One affine layer, `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[in × out]`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: alloc::vec![0.0; output],
        }
    }

    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut weight = Matrix::zeros(input, output);
        weight.data_mut().iter_mut().for_each(|w| *w = normal.sample(rng));
        Self {
            weight,
            bias: alloc::vec![0.0; output],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        matmul(x, &self.weight)?.add_row_vector(&self.bias)
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    fn max_abs(&self) -> f64 {
        self.bias.iter().fold(self.weight.max_abs(), |m, b| m.max(b.abs()))
    }
}

/// Affine projection `C → D`, optionally through one tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionNet {
    pub hidden: Option<Dense>,
    pub output: Dense,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectionTrace {
    input: Matrix,
    hidden_act: Option<Matrix>,
}

impl ProjectionNet {
    pub fn linear(output: Dense) -> Self {
        Self { hidden: None, output }
    }

    /// Weights `N(0, std²)`, zero biases.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, hidden: Option<usize>, std: f64, rng: &mut R) -> Self {
        match hidden {
            None => Self::linear(Dense::random(input, output, std, rng)),
            Some(h) => {
                let first = Dense::random(input, h, std, rng);
                Self {
                    hidden: Some(first),
                    output: Dense::random(h, output, std, rng),
                }
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.output.weight.cols()
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.hidden.as_ref().map(|h| h.weight.cols())
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden.iter().chain(core::iter::once(&self.output))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden.iter_mut().chain(core::iter::once(&mut self.output))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(Dense::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers().fold(0.0, |m, l| m.max(l.max_abs()))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_traced(x).map(|(y, _)| y)
    }

    pub fn forward_traced(&self, x: &Matrix) -> Result<(Matrix, ProjectionTrace)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "projection",
                left: x.shape(),
                right: (self.input_dim(), self.output_dim()),
            });
        }
        match &self.hidden {
            None => Ok((
                self.output.forward(x)?,
                ProjectionTrace {
                    input: x.clone(),
                    hidden_act: None,
                },
            )),
            Some(h) => {
                let act = h.forward(x)?.map(libm::tanh);
                let y = self.output.forward(&act)?;
                Ok((
                    y,
                    ProjectionTrace {
                        input: x.clone(),
                        hidden_act: Some(act),
                    },
                ))
            }
        }
    }

    /// Same architecture with every parameter zeroed; gradient buffers use this layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.as_ref().map(|h| Dense::zeros(h.weight.rows(), h.weight.cols())),
            output: Dense::zeros(self.output.weight.rows(), self.output.weight.cols()),
        }
    }

    /// Parameter gradients given `∂L/∂output`, laid out like `self`.
    pub fn backward(&self, trace: &ProjectionTrace, grad_out: &Matrix) -> Result<ProjectionNet> {
        match (&self.hidden, &trace.hidden_act) {
            (None, _) => Ok(ProjectionNet::linear(dense_grad(&trace.input, grad_out)?)),
            (Some(_), Some(act)) => {
                let output = dense_grad(act, grad_out)?;
                let g_act = linalg::matmul_nt(grad_out, &self.output.weight)?;
                let g_pre = linalg::hadamard(&g_act, &act.map(|a| 1.0 - a * a))?;
                Ok(ProjectionNet {
                    hidden: Some(dense_grad(&trace.input, &g_pre)?),
                    output,
                })
            }
            (Some(_), None) => Err(Error::InvalidConfig("projection trace lacks hidden activations".into())),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers()
            .all(|l| l.weight.data().iter().chain(&l.bias).all(|&x| x == 0.0))
    }

    /// Every parameter buffer, in a fixed order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.layers_mut() {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in self.layers() {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out
    }
}

fn dense_grad(input: &Matrix, grad_out: &Matrix) -> Result<Dense> {
    Ok(Dense {
        weight: matmul_tn(input, grad_out)?,
        bias: grad_out.column_sums(),
    })
}

/// Projects the `[N × C]` class-text matrix to `[N × D]`.
pub fn project_class_text(meta_net: &ProjectionNet, text_features: &Matrix) -> Result<Matrix> {
    meta_net.forward(text_features)
}

/// Per-entry text keys: row `i` is `MetaNet(text[entry_labels[i]])`.
pub fn text_entry_keys(meta_net: &ProjectionNet, bundle: &EmbeddingBundle, cache: &CacheModel) -> Result<Matrix> {
    project_class_text(meta_net, &bundle.text_features)?.gather_rows(&cache.entry_labels)
}

/// `Img2TxtNet(x)` for a batch of image features.
pub fn project_queries(img2txt: &ProjectionNet, image_features: &Matrix) -> Result<Matrix> {
    img2txt.forward(image_features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, sample_few_shot, SyntheticConfig};
    use crate::dataset::rng_for;

    fn bundle() -> EmbeddingBundle {
        generate_synthetic(&SyntheticConfig {
            num_classes: 3,
            shots: 4,
            feature_dim: 6,
            test_per_class: 2,
            seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn two_class_one_shot_values_are_identity() {
        let b = generate_synthetic(&SyntheticConfig {
            num_classes: 2,
            shots: 1,
            feature_dim: 4,
            test_per_class: 1,
            ..Default::default()
        })
        .unwrap();
        let split = sample_few_shot(&b, 1, 0).unwrap();
        let cache = build_cache(&b, &split).unwrap();
        assert_eq!(cache.values, Matrix::identity(2));
    }

    #[test]
    fn cache_shape_order_and_norms() {
        let b = bundle();
        let split = sample_few_shot(&b, 3, 4).unwrap();
        let cache = build_cache(&b, &split).unwrap();
        assert_eq!(cache.len(), 9);
        assert_eq!(cache.entry_labels, alloc::vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        for i in 0..cache.len() {
            let n: f64 = cache.image_keys.row(i).iter().map(|x| x * x).sum();
            assert!((libm::sqrt(n) - 1.0).abs() < 1e-6);
            // one-hot row-sum oracle
            assert_eq!(cache.values.row(i).iter().sum::<f64>(), 1.0);
            assert_eq!(cache.values.get(i, cache.entry_labels[i]), 1.0);
        }
    }

    #[test]
    fn build_cache_rejects_foreign_split() {
        let b = bundle();
        let mut split = sample_few_shot(&b, 2, 4).unwrap();
        split.selected[0][0] = split.selected[1][0];
        assert!(build_cache(&b, &split).is_err());
    }

    #[test]
    fn text_entry_keys_gather_semantics() {
        let b = bundle();
        let cache = build_cache(&b, &sample_few_shot(&b, 2, 1).unwrap()).unwrap();
        let mut rng = rng_for(0, 0);
        let net = ProjectionNet::random(6, 3, None, 0.5, &mut rng);
        let keys = text_entry_keys(&net, &b, &cache).unwrap();
        assert_eq!(keys.row(0), keys.row(1));
        // per-entry loop oracle
        for i in 0..cache.len() {
            let t = b.text_features.row(cache.entry_labels[i]);
            for d in 0..3 {
                let mut v = net.output.bias[d];
                for c in 0..6 {
                    v += t[c] * net.output.weight.get(c, d);
                }
                assert!((keys.get(i, d) - v).abs() < 1e-14);
            }
        }
        let zero = ProjectionNet::linear(Dense::zeros(6, 3));
        assert!(text_entry_keys(&zero, &b, &cache).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn text_keys_have_one_distinct_row_per_class() {
        let b = bundle();
        let cache = build_cache(&b, &sample_few_shot(&b, 3, 2).unwrap()).unwrap();
        let mut rng = rng_for(1, 0);
        let net = ProjectionNet::random(6, 4, None, 0.3, &mut rng);
        let keys = text_entry_keys(&net, &b, &cache).unwrap();
        let mut distinct: Vec<&[f64]> = Vec::new();
        for i in 0..keys.rows() {
            if !distinct.contains(&keys.row(i)) {
                distinct.push(keys.row(i));
            }
        }
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn project_queries_examples() {
        let x = Matrix::from_rows(&[&[1.0, -2.0, 0.5]]).unwrap();
        let ident = ProjectionNet::linear(Dense {
            weight: Matrix::identity(3),
            bias: alloc::vec![0.0; 3],
        });
        assert_eq!(project_queries(&ident, &x).unwrap(), x);

        let mut rng = rng_for(2, 0);
        let mut net = ProjectionNet::random(3, 2, None, 1.0, &mut rng);
        net.output.bias = alloc::vec![0.25, -1.0];
        let zero = Matrix::zeros(2, 3);
        let out = project_queries(&net, &zero).unwrap();
        assert_eq!(out.row(0), &[0.25, -1.0]);
        assert_eq!(out.row(1), &[0.25, -1.0]);

        let y = project_queries(&net, &x).unwrap();
        for d in 0..2 {
            let v: f64 = (0..3).map(|c| x.get(0, c) * net.output.weight.get(c, d)).sum::<f64>() + net.output.bias[d];
            assert!((y.get(0, d) - v).abs() < 1e-14);
        }
        assert!(project_queries(&net, &Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn hidden_layer_shapes() {
        let mut rng = rng_for(3, 0);
        let net = ProjectionNet::random(5, 2, Some(7), 0.1, &mut rng);
        assert_eq!(net.input_dim(), 5);
        assert_eq!(net.hidden_dim(), Some(7));
        assert_eq!(net.param_count(), 5 * 7 + 7 + 7 * 2 + 2);
        let y = net.forward(&Matrix::filled(3, 5, 0.2)).unwrap();
        assert_eq!(y.shape(), (3, 2));
    }
}
