//! Cross-encoder transfer attacks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentWeights;
use crate::attack::pgd::attack_batch;
use crate::attack::AttackConfig;
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::robustness::task::{Classifier, Pooling, ProtoTask};
use crate::toolkit::io::fingerprint;

#[derive(Debug, Clone)]
pub struct NamedEncoder {
    pub name: String,
    pub weights: EncoderWeights,
    pub alignment: AlignmentWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub names: Vec<String>,
    /// Content hash of each encoder's weight bundle.
    pub fingerprints: Vec<String>,
    /// Clean accuracy of each target.
    pub clean: Vec<f64>,
    /// `accuracy[source][target]` on images attacked against `source`.
    pub accuracy: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
}

impl TransferMatrix {
    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("no encoder named {name}")))
    }

    /// `acc(standard → robust) − acc(robust → standard)`. Non-negative means
    /// the robust encoder's adversarial images transfer at least as well.
    pub fn mobius_margin(&self, robust: &str, standard: &str) -> Result<f64> {
        let (r, s) = (self.index(robust)?, self.index(standard)?);
        Ok(self.accuracy[s][r] - self.accuracy[r][s])
    }

    /// Header `source, target…` then a `clean` row and one row per source.
    pub fn csv_rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["source".to_string()];
        header.extend(self.names.iter().cloned());
        let mut rows = vec![std::iter::once("clean".to_string())
            .chain(self.clean.iter().map(f64::to_string))
            .collect::<Vec<_>>()];
        for (name, row) in self.names.iter().zip(&self.accuracy) {
            rows.push(std::iter::once(name.clone()).chain(row.iter().map(f64::to_string)).collect());
        }
        (header, rows)
    }
}

/// Attacks the eval split against each source and classifies the results
/// under each target, every target with prototypes fit on its own features.
pub fn transfer_matrix(
    encoders: &[NamedEncoder],
    enc: &EncoderConfig,
    task: &ProtoTask,
    cfg: &AttackConfig,
    pooling: Pooling,
) -> Result<TransferMatrix> {
    if encoders.len() < 2 {
        return Err(Error::invalid("transfer needs at least two encoders"));
    }
    let images = task.eval_images();
    let labels = task.eval_labels();
    let classifiers = encoders
        .iter()
        .map(|e| Classifier::fit(task, &e.weights, enc, &e.alignment, pooling))
        .collect::<Result<Vec<_>>>()?;
    let clean = encoders
        .iter()
        .zip(&classifiers)
        .map(|(e, c)| c.accuracy(&images, &labels, &e.weights, enc, &e.alignment))
        .collect::<Result<Vec<_>>>()?;
    let mut accuracy = Vec::with_capacity(encoders.len());
    for src in encoders {
        let adv: Vec<_> = attack_batch(&images, &src.weights, enc, &src.alignment, cfg)?
            .into_par_iter()
            .map(|o| o.adversarial)
            .collect();
        accuracy.push(
            encoders
                .iter()
                .zip(&classifiers)
                .map(|(t, c)| c.accuracy(&adv, &labels, &t.weights, enc, &t.alignment))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(TransferMatrix {
        names: encoders.iter().map(|e| e.name.clone()).collect(),
        fingerprints: encoders
            .iter()
            .map(|e| fingerprint(&e.weights, Some(&e.alignment)))
            .collect::<Result<Vec<_>>>()?,
        clean,
        accuracy,
        epsilon: cfg.epsilon,
        steps: cfg.steps,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_weights;
    use crate::robustness::task::{gen_task, TaskSpec};

    #[test]
    fn shape_clean_row_and_reproducibility() {
        let enc = EncoderConfig {
            image_size: 16,
            patch_size: 8,
            d_v: 8,
            layers: 1,
            ..Default::default()
        };
        let task = gen_task(
            &TaskSpec {
                classes: 2,
                train_per_class: 2,
                eval_per_class: 3,
                ..Default::default()
            },
            &enc,
        )
        .unwrap();
        let mk = |name: &str, s| NamedEncoder {
            name: name.into(),
            weights: init_weights(&enc, s, 1.0).unwrap(),
            alignment: AlignmentWeights::init(8, 12, s).unwrap(),
        };
        let encs = vec![mk("a", 1), mk("b", 2)];
        let cfg = AttackConfig {
            steps: 3,
            epsilon: 8.0 / 255.0,
            ..Default::default()
        };
        let m = transfer_matrix(&encs, &enc, &task, &cfg, Pooling::TokenMean).unwrap();
        assert_eq!(m, transfer_matrix(&encs, &enc, &task, &cfg, Pooling::TokenMean).unwrap());
        let (h, rows) = m.csv_rows();
        assert_eq!(h.len(), 3);
        assert_eq!(rows.len(), 3);
        assert!(m.accuracy.iter().flatten().all(|a| (0.0..=1.0).contains(a)));
        assert_ne!(m.fingerprints[0], m.fingerprints[1]);
        let c = Classifier::fit(&task, &encs[0].weights, &enc, &encs[0].alignment, Pooling::TokenMean).unwrap();
        let r = crate::robustness::attack_eval(&task, &c, &encs[0].weights, &enc, &encs[0].alignment, &cfg).unwrap();
        assert_eq!(r.clean_acc, m.clean[0]);
        assert_eq!(r.adv_acc, m.accuracy[0][0]);
        assert!(transfer_matrix(&encs[..1], &enc, &task, &cfg, Pooling::TokenMean).is_err());
    }
}
