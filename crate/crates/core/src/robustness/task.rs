//! Synthetic K-class proxy task and the nearest-prototype classifier.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{align, AlignmentWeights};
use crate::encoder::{encode, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numcore::{Tensor, tensor::COSINE_GUARD};
use crate::toolkit::rng::SeedStreams;
use crate::toolkit::synth::{add_noise, render_grating, Grating};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Uniform phase jitter in radians applied per image.
    pub phase_jitter: f64,
    pub contrast: f64,
    /// Amplitude of the per-class colour offset.
    pub colour: f64,
    /// Grating frequency along the class wave vector, in cycles per patch.
    pub cycles_per_patch: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 16,
            eval_per_class: 50,
            noise: 0.1,
            phase_jitter: 0.0,
            contrast: 0.05,
            colour: 0.0,
            cycles_per_patch: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoTask {
    pub spec: TaskSpec,
    /// One grating per class.
    pub archetypes: Vec<Grating>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl ProtoTask {
    pub fn eval_images(&self) -> Vec<Tensor> {
        self.eval.iter().map(|s| s.image.clone()).collect()
    }

    pub fn eval_labels(&self) -> Vec<usize> {
        self.eval.iter().map(|s| s.label).collect()
    }

    /// Noise-free archetype image of class `k`.
    pub fn archetype_image(&self, k: usize, enc: &EncoderConfig) -> Result<Tensor> {
        let g = self
            .archetypes
            .get(k)
            .ok_or_else(|| Error::invalid(format!("class {k} out of range")))?;
        render_grating(g, self.spec.contrast, enc)
    }
}

/// The `k`-th integer wave vector `(a, b)`, skipping zero and sign-duplicates:
/// `(1,0), (0,1), (1,1), (1,-1), (2,0), (0,2), (2,1), (1,2), …`.
pub fn wave_vector(k: usize) -> (i64, i64) {
    let mut seen = 0;
    for r in 1i64.. {
        let mut ring: Vec<(i64, i64)> = Vec::new();
        for a in 0..=r {
            for b in -r..=r {
                if a.abs().max(b.abs()) != r || (a == 0 && b < 0) {
                    continue;
                }
                ring.push((a, b));
            }
        }
        ring.sort_by_key(|&(a, b)| (a * a + b * b, b < 0, std::cmp::Reverse(a)));
        if k < seen + ring.len() {
            return ring[k - seen];
        }
        seen += ring.len();
    }
    unreachable!()
}

/// Class `k` gets a grey grating along [`wave_vector`]`(k)`. At the default
/// one cycle per patch every patch of the clean archetype carries the same
/// texture, so patch averaging keeps the class signal.
pub fn class_archetype(k: usize, enc: &EncoderConfig, spec: &TaskSpec) -> Grating {
    let (colour, classes) = (spec.colour, spec.classes);
    let (a, b) = wave_vector(k);
    let pi = std::f64::consts::PI;
    let side = (enc.image_size / enc.patch_size) as f64;
    Grating {
        orientation: (b as f64).atan2(a as f64),
        frequency: side * spec.cycles_per_patch * ((a * a + b * b) as f64).sqrt(),
        phase: 0.0,
        tint: vec![1.0; enc.channels],
        bias: (0..enc.channels)
            .map(|c| colour * (2.0 * pi * (k as f64 / classes as f64 + c as f64 / enc.channels as f64)).cos())
            .collect(),
    }
}

pub fn gen_task(spec: &TaskSpec, enc: &EncoderConfig) -> Result<ProtoTask> {
    if spec.classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.train_per_class == 0 || spec.eval_per_class == 0 {
        return Err(Error::invalid("every class needs train and eval images"));
    }
    if !(spec.noise >= 0.0) || !(spec.phase_jitter >= 0.0) || !(0.0..=0.5).contains(&spec.contrast) {
        return Err(Error::invalid("noise and jitter must be non-negative, contrast in [0, 0.5]"));
    }
    if !(spec.cycles_per_patch > 0.0) {
        return Err(Error::invalid("cycles_per_patch must be positive"));
    }
    if !(0.0..=0.5).contains(&spec.colour) {
        return Err(Error::invalid("colour must lie in [0, 0.5]"));
    }
    enc.validate()?;
    let streams = SeedStreams::new(spec.seed);
    let archetypes: Vec<Grating> = (0..spec.classes)
        .map(|k| class_archetype(k, enc, spec))
        .collect();
    let draw = |split: &str, per_class: usize| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(per_class * spec.classes);
        for i in 0..per_class {
            for (k, arch) in archetypes.iter().enumerate() {
                let mut rng = streams.stream(&format!("task.{split}.class{k}.image{i}"));
                let jitter = if spec.phase_jitter > 0.0 {
                    rng.random_range(-spec.phase_jitter..=spec.phase_jitter)
                } else {
                    0.0
                };
                let g = Grating {
                    phase: arch.phase + jitter,
                    ..arch.clone()
                };
                let image = add_noise(&render_grating(&g, spec.contrast, enc)?, spec.noise, &mut rng);
                out.push(Sample { image, label: k });
            }
        }
        Ok(out)
    };
    Ok(ProtoTask {
        spec: spec.clone(),
        train: draw("train", spec.train_per_class)?,
        eval: draw("eval", spec.eval_per_class)?,
        archetypes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean over patch tokens of `z_m`.
    #[default]
    TokenMean,
    /// Class token mapped through `W_a`.
    ClsToken,
    /// The whole aligned token sequence, flattened to `1 x (n_v d_m)`.
    Sequence,
}

/// Pooled aligned feature, `1 x d_m`.
pub fn pooled_feature(
    image: &Tensor,
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    alignment: &AlignmentWeights,
    pooling: Pooling,
) -> Result<Tensor> {
    let states = encode(image, weights, enc)?;
    match pooling {
        Pooling::TokenMean => {
            let z_m = align(&states.z_v(), alignment)?;
            let (n, d) = z_m.dims2()?;
            let mut acc = vec![0.0; d];
            for i in 0..n {
                for (a, v) in acc.iter_mut().zip(z_m.row(i)) {
                    *a += v;
                }
            }
            Tensor::new(vec![1, d], acc.into_iter().map(|v| v / n as f64).collect())
        }
        Pooling::ClsToken => align(&states.z_cls(), alignment),
        Pooling::Sequence => {
            let z_m = align(&states.z_v(), alignment)?;
            let n = z_m.len();
            z_m.reshape(vec![1, n])
        }
    }
}

/// Nearest-prototype classifier in aligned space.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// One row per class: the mean pooled train feature.
    pub prototypes: Tensor,
    pub pooling: Pooling,
}

impl Classifier {
    pub fn fit(
        task: &ProtoTask,
        weights: &EncoderWeights,
        enc: &EncoderConfig,
        alignment: &AlignmentWeights,
        pooling: Pooling,
    ) -> Result<Self> {
        let k = task.spec.classes;
        let feats = task
            .train
            .par_iter()
            .map(|s| pooled_feature(&s.image, weights, enc, alignment, pooling))
            .collect::<Result<Vec<_>>>()?;
        let d = feats.first().map(Tensor::len).unwrap_or(0);
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        // sequential accumulation in sample order keeps the fit bit-stable
        for (s, f) in task.train.iter().zip(&feats) {
            counts[s.label] += 1;
            for (a, v) in sums[s.label * d..(s.label + 1) * d].iter_mut().zip(f.data()) {
                *a += v;
            }
        }
        for (c, chunk) in counts.iter().zip(sums.chunks_mut(d)) {
            if *c == 0 {
                return Err(Error::invalid("a class has no train images"));
            }
            chunk.iter_mut().for_each(|v| *v /= *c as f64);
        }
        Ok(Self {
            prototypes: Tensor::new(vec![k, d], sums)?,
            pooling,
        })
    }

    /// Argmax cosine to the prototypes; ties go to the lowest index.
    pub fn predict_feature(&self, pooled: &Tensor) -> usize {
        let p = pooled.data();
        let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_GUARD);
        let (k, _) = self.prototypes.dims2().expect("prototypes are a matrix");
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..k {
            let row = self.prototypes.row(c);
            let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_GUARD);
            let cos = row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (pn * rn);
            if cos > best.1 {
                best = (c, cos);
            }
        }
        best.0
    }

    pub fn classify(
        &self,
        image: &Tensor,
        weights: &EncoderWeights,
        enc: &EncoderConfig,
        alignment: &AlignmentWeights,
    ) -> Result<usize> {
        Ok(self.predict_feature(&pooled_feature(image, weights, enc, alignment, self.pooling)?))
    }

    pub fn accuracy(
        &self,
        images: &[Tensor],
        labels: &[usize],
        weights: &EncoderWeights,
        enc: &EncoderConfig,
        alignment: &AlignmentWeights,
    ) -> Result<f64> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::invalid("images and labels must be non-empty and aligned"));
        }
        let correct = images
            .par_iter()
            .zip(labels)
            .map(|(img, &y)| Ok(usize::from(self.classify(img, weights, enc, alignment)? == y)))
            .collect::<Result<Vec<_>>>()?;
        Ok(correct.iter().sum::<usize>() as f64 / images.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_weights;

    fn small_enc() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            d_v: 16,
            layers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn wave_vectors_are_distinct() {
        let v: Vec<_> = (0..12).map(wave_vector).collect();
        assert_eq!(&v[..6], &[(1, 0), (0, 1), (1, 1), (1, -1), (2, 0), (0, 2)]);
        for (i, a) in v.iter().enumerate() {
            assert!(*a != (0, 0));
            for b in &v[..i] {
                assert!(a != b && *a != (-b.0, -b.1));
            }
        }
    }

    #[test]
    fn single_class_rejected() {
        let spec = TaskSpec {
            classes: 1,
            ..Default::default()
        };
        assert!(gen_task(&spec, &small_enc()).is_err());
    }

    #[test]
    fn deterministic_and_in_range() {
        let spec = TaskSpec {
            train_per_class: 2,
            eval_per_class: 3,
            ..Default::default()
        };
        let a = gen_task(&spec, &small_enc()).unwrap();
        assert_eq!(a, gen_task(&spec, &small_enc()).unwrap());
        assert_eq!(a.eval.len(), 12);
        assert!(a.eval.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        for k in 0..4 {
            assert!(a.eval.iter().any(|s| s.label == k));
        }
    }

    #[test]
    fn archetypes_classify_as_their_class_and_fit_is_idempotent() {
        let enc = small_enc();
        let spec = TaskSpec {
            train_per_class: 4,
            eval_per_class: 4,
            noise: 0.0,
            ..Default::default()
        };
        let task = gen_task(&spec, &enc).unwrap();
        let w = init_weights(&enc, 1, 1.0).unwrap();
        let a = AlignmentWeights::init(16, 24, 1).unwrap();
        let c = Classifier::fit(&task, &w, &enc, &a, Pooling::TokenMean).unwrap();
        assert_eq!(c, Classifier::fit(&task, &w, &enc, &a, Pooling::TokenMean).unwrap());
        for k in 0..4 {
            let img = task.archetype_image(k, &enc).unwrap();
            assert_eq!(c.classify(&img, &w, &enc, &a).unwrap(), k);
        }
        let acc = c.accuracy(&task.eval_images(), &task.eval_labels(), &w, &enc, &a).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let c = Classifier {
            prototypes: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            pooling: Pooling::TokenMean,
        };
        assert_eq!(c.predict_feature(&Tensor::zeros(&[1, 2])), 0);
        assert_eq!(c.predict_feature(&Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()), 0);
        assert_eq!(c.predict_feature(&Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap()), 1);
    }
}
