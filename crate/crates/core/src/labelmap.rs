//! Output label mapping between the source classifier and the target task.
//!
//! Classification tasks use a bijection between source class ids and target
//! label names. Regression tasks bin real targets into the source classes
//! with quantile thresholds and map probabilities back to a value through
//! per-bin representatives.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelMapError {
    #[error("unknown source class {0}")]
    UnknownSourceClass(usize),
    #[error("unknown target label {0:?}")]
    UnknownTargetLabel(String),
    #[error("label pairs do not form a bijection: {0}")]
    NotBijective(String),
    #[error("need at least {bins} distinct values for {bins} bins, got {distinct}")]
    TooFewDistinct { bins: usize, distinct: usize },
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("thresholds must be strictly ascending and finite")]
    BadThresholds,
    #[error("{thresholds} thresholds need {expected} representatives, got {got}")]
    RepresentativeCount {
        thresholds: usize,
        expected: usize,
        got: usize,
    },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("expected {expected} probabilities, got {got}")]
    ProbabilityCount { expected: usize, got: usize },
    #[error("operation needs a {0} mapping")]
    WrongKind(&'static str),
    #[error("mapping has {mapping} classes but the model has {model}")]
    ClassCountMismatch { mapping: usize, model: usize },
    #[error("mapping file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mapping json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabelMapError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LabelMapping {
    Classification {
        /// `(source class id, target label)`
        pairs: Vec<(usize, String)>,
    },
    Regression {
        thresholds: Vec<f64>,
        representatives: Vec<f64>,
    },
}

impl LabelMapping {
    pub fn classification<S: Into<String>>(
        pairs: impl IntoIterator<Item = (usize, S)>,
    ) -> Result<Self> {
        let map = Self::Classification {
            pairs: pairs.into_iter().map(|(s, t)| (s, t.into())).collect(),
        };
        map.validate()?;
        Ok(map)
    }

    pub fn regression(thresholds: Vec<f64>, representatives: Vec<f64>) -> Result<Self> {
        let map = Self::Regression {
            thresholds,
            representatives,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Classification { pairs } => {
                let n = pairs.len();
                let mut sources = HashSet::new();
                let mut targets = HashSet::new();
                for (s, t) in pairs {
                    if *s >= n {
                        return Err(LabelMapError::NotBijective(format!(
                            "source class {s} outside 0..{n}"
                        )));
                    }
                    if !sources.insert(*s) {
                        return Err(LabelMapError::NotBijective(format!(
                            "source class {s} repeated"
                        )));
                    }
                    if !targets.insert(t.as_str()) {
                        return Err(LabelMapError::NotBijective(format!(
                            "target label {t:?} repeated"
                        )));
                    }
                }
                Ok(())
            }
            Self::Regression {
                thresholds,
                representatives,
            } => {
                if thresholds.iter().any(|t| !t.is_finite())
                    || thresholds.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(LabelMapError::BadThresholds);
                }
                if representatives.len() != thresholds.len() + 1 {
                    return Err(LabelMapError::RepresentativeCount {
                        thresholds: thresholds.len(),
                        expected: thresholds.len() + 1,
                        got: representatives.len(),
                    });
                }
                if representatives.len() < 2 {
                    return Err(LabelMapError::TooFewBins(representatives.len()));
                }
                Ok(())
            }
        }
    }

    /// Number of source classes the mapping covers.
    pub fn n_classes(&self) -> usize {
        match self {
            Self::Classification { pairs } => pairs.len(),
            Self::Regression {
                representatives, ..
            } => representatives.len(),
        }
    }

    pub fn is_regression(&self) -> bool {
        matches!(self, Self::Regression { .. })
    }

    pub fn check_model_classes(&self, model_classes: usize) -> Result<()> {
        if self.n_classes() != model_classes {
            return Err(LabelMapError::ClassCountMismatch {
                mapping: self.n_classes(),
                model: model_classes,
            });
        }
        Ok(())
    }

    pub fn map_label(&self, source_class: usize) -> Result<&str> {
        let Self::Classification { pairs } = self else {
            return Err(LabelMapError::WrongKind("classification"));
        };
        pairs
            .iter()
            .find(|(s, _)| *s == source_class)
            .map(|(_, t)| t.as_str())
            .ok_or(LabelMapError::UnknownSourceClass(source_class))
    }

    pub fn invert(&self, target: &str) -> Result<usize> {
        let Self::Classification { pairs } = self else {
            return Err(LabelMapError::WrongKind("classification"));
        };
        pairs
            .iter()
            .find(|(_, t)| t == target)
            .map(|(s, _)| *s)
            .ok_or_else(|| LabelMapError::UnknownTargetLabel(target.into()))
    }

    /// Bin of `y`: the index of the first threshold strictly above `y`, or
    /// the last bin. A value equal to a threshold lands in the higher bin.
    pub fn bin_label(&self, y: f64) -> Result<usize> {
        let Self::Regression { thresholds, .. } = self else {
            return Err(LabelMapError::WrongKind("regression"));
        };
        Ok(thresholds.partition_point(|&t| t <= y))
    }

    /// `Σ_i p_i · r_i`
    pub fn expected_value(&self, probs: &[f64]) -> Result<f64> {
        let Self::Regression {
            representatives, ..
        } = self
        else {
            return Err(LabelMapError::WrongKind("regression"));
        };
        if probs.len() != representatives.len() {
            return Err(LabelMapError::ProbabilityCount {
                expected: representatives.len(),
                got: probs.len(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LabelMapError::NotNormalized(sum));
        }
        Ok(probs.iter().zip(representatives).map(|(p, r)| p * r).sum())
    }

    /// Representative of the most probable bin.
    pub fn argmax_value(&self, probs: &[f64]) -> Result<f64> {
        self.expected_value(probs)?;
        let Self::Regression {
            representatives, ..
        } = self
        else {
            unreachable!()
        };
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |b, (i, p)| if *p > probs[b] { i } else { b });
        Ok(representatives[best])
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("mapping serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| LabelMapError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LabelMapError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Quantile thresholds for `n_bins` bins over the training targets.
///
/// Each cut sits at the midpoint between the two sorted neighbours nearest
/// the `i/n` quantile. When ties make that point land inside a run of equal
/// values, the cut moves to the nearest gap between distinct values so every
/// bin stays non-empty. Representatives are the per-bin means.
pub fn fit_thresholds(values: &[f64], n_bins: usize) -> Result<LabelMapping> {
    if n_bins < 2 {
        return Err(LabelMapError::TooFewBins(n_bins));
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Positions s where sorted[s-1] < sorted[s].
    let gaps: Vec<usize> = (1..sorted.len())
        .filter(|&s| sorted[s - 1] < sorted[s])
        .collect();
    let distinct = if sorted.is_empty() { 0 } else { gaps.len() + 1 };
    if distinct < n_bins {
        return Err(LabelMapError::TooFewDistinct {
            bins: n_bins,
            distinct,
        });
    }

    let n = sorted.len() as f64;
    let cuts_needed = n_bins - 1;
    let mut chosen: Vec<usize> = Vec::with_capacity(cuts_needed);
    let mut lo = 0;
    for i in 1..=cuts_needed {
        let target = i as f64 * n / n_bins as f64;
        // Leave room for the cuts still to come.
        let hi = gaps.len() - (cuts_needed - i);
        let window = &gaps[lo..hi];
        let pick = window
            .iter()
            .enumerate()
            .min_by(|(_, &a), (_, &b)| {
                (a as f64 - target)
                    .abs()
                    .total_cmp(&(b as f64 - target).abs())
            })
            .map(|(k, _)| lo + k)
            .expect("enough gaps remain");
        chosen.push(gaps[pick]);
        lo = pick + 1;
    }

    let thresholds: Vec<f64> = chosen
        .iter()
        .map(|&s| 0.5 * (sorted[s - 1] + sorted[s]))
        .collect();
    let mut bounds = vec![0];
    bounds.extend(&chosen);
    bounds.push(sorted.len());
    let representatives: Vec<f64> = bounds
        .windows(2)
        .map(|w| sorted[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
        .collect();
    LabelMapping::regression(thresholds, representatives)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::spearman_rho;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn amp() -> LabelMapping {
        LabelMapping::classification([(0, "AMP"), (1, "non-AMP")]).unwrap()
    }

    #[test]
    fn binary_mapping() {
        let h = amp();
        assert_eq!(h.map_label(0).unwrap(), "AMP");
        for s in 0..2 {
            assert_eq!(h.invert(h.map_label(s).unwrap()).unwrap(), s);
        }
        assert!(matches!(
            h.invert("toxic"),
            Err(LabelMapError::UnknownTargetLabel(_))
        ));
        assert!(matches!(
            h.map_label(2),
            Err(LabelMapError::UnknownSourceClass(2))
        ));
    }

    #[test]
    fn three_class_round_trip() {
        let h = LabelMapping::classification([(0, "Helix"), (1, "Strand"), (2, "Other")]).unwrap();
        for t in ["Helix", "Strand", "Other"] {
            assert_eq!(h.map_label(h.invert(t).unwrap()).unwrap(), t);
        }
    }

    #[test]
    fn non_bijective_rejected() {
        assert!(LabelMapping::classification([(0, "a"), (0, "b")]).is_err());
        assert!(LabelMapping::classification([(0, "a"), (1, "a")]).is_err());
    }

    #[test]
    fn thresholds_uniform_values() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let h = fit_thresholds(&values, 2).unwrap();
        let LabelMapping::Regression {
            thresholds,
            representatives,
        } = &h
        else {
            panic!()
        };
        // Oracle: median split of 1..=100 sits between 50 and 51.
        let lower: Vec<f64> = values.iter().copied().filter(|v| *v <= 50.0).collect();
        let upper: Vec<f64> = values.iter().copied().filter(|v| *v > 50.0).collect();
        assert_eq!(thresholds, &vec![50.5]);
        assert_eq!(
            representatives[0],
            lower.iter().sum::<f64>() / lower.len() as f64
        );
        assert_eq!(
            representatives[1],
            upper.iter().sum::<f64>() / upper.len() as f64
        );
        assert_eq!(representatives, &vec![25.5, 75.5]);
    }

    #[test]
    fn thresholds_midpoint_convention() {
        let h = fit_thresholds(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(h.bin_label(0.5).unwrap(), 1);
        let LabelMapping::Regression { thresholds, .. } = &h else {
            panic!()
        };
        assert_eq!(thresholds, &vec![0.5]);
    }

    #[test]
    fn thresholds_with_ties_keep_bins_nonempty() {
        let values = [1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 3.0, 4.0];
        let h = fit_thresholds(&values, 4).unwrap();
        let mut counts = [0usize; 4];
        for v in values {
            counts[h.bin_label(v).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn constant_values_rejected() {
        assert!(matches!(
            fit_thresholds(&[3.0; 10], 2),
            Err(LabelMapError::TooFewDistinct { distinct: 1, .. })
        ));
        assert!(matches!(
            fit_thresholds(&[1.0, 2.0], 1),
            Err(LabelMapError::TooFewBins(1))
        ));
    }

    #[test]
    fn expected_value_cases() {
        let h = LabelMapping::regression(vec![0.0], vec![-2.0, 4.0]).unwrap();
        assert_eq!(h.expected_value(&[1.0, 0.0]).unwrap(), -2.0);
        assert_eq!(h.expected_value(&[0.0, 1.0]).unwrap(), 4.0);
        assert_eq!(h.expected_value(&[0.5, 0.5]).unwrap(), 1.0);
        assert!(matches!(
            h.expected_value(&[0.5, 0.6]),
            Err(LabelMapError::NotNormalized(_))
        ));
        assert_eq!(h.argmax_value(&[0.3, 0.7]).unwrap(), 4.0);
        assert_eq!(h.bin_label(0.0).unwrap(), 1);
        assert_eq!(h.bin_label(-0.1).unwrap(), 0);
    }

    #[test]
    fn json_round_trip() {
        for h in [
            amp(),
            LabelMapping::regression(vec![0.5, 1.5], vec![0.0, 1.0, 2.0]).unwrap(),
        ] {
            let text = h.to_json();
            let back = LabelMapping::from_json(&text).unwrap();
            assert_eq!(back, h);
            assert_eq!(back.to_json(), text);
        }
        assert!(LabelMapping::from_json(
            r#"{"kind":"regression","thresholds":[1.0,0.5],"representatives":[0,1,2]}"#
        )
        .is_err());
    }

    #[test]
    fn spearman_of_binned_values_grows_with_bins() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let values: Vec<f64> = (0..400).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut last = 0.0;
        for n in [2, 4, 8] {
            let h = fit_thresholds(&values, n).unwrap();
            let LabelMapping::Regression {
                representatives, ..
            } = &h
            else {
                panic!()
            };
            let binned: Vec<f64> = values
                .iter()
                .map(|&y| representatives[h.bin_label(y).unwrap()])
                .collect();
            let rho = spearman_rho(&values, &binned).unwrap();
            assert!(rho >= 0.0 && rho > last, "n={n} rho={rho} last={last}");
            last = rho;
        }
    }

    proptest! {
        #[test]
        fn bin_label_monotone(values in prop::collection::vec(-100.0f64..100.0, 8..60), a in -150.0f64..150.0, b in -150.0f64..150.0) {
            let Ok(h) = fit_thresholds(&values, 3) else { return Ok(()) };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(h.bin_label(lo).unwrap() <= h.bin_label(hi).unwrap());
        }

        #[test]
        fn expected_value_bounded_and_linear(p in 0.0f64..1.0, q in 0.0f64..1.0, lam in 0.0f64..1.0) {
            let h = LabelMapping::regression(vec![0.0], vec![-1.5, 2.5]).unwrap();
            let e1 = h.expected_value(&[p, 1.0 - p]).unwrap();
            let e2 = h.expected_value(&[q, 1.0 - q]).unwrap();
            let mix = lam * p + (1.0 - lam) * q;
            let em = h.expected_value(&[mix, 1.0 - mix]).unwrap();
            prop_assert!((em - (lam * e1 + (1.0 - lam) * e2)).abs() < 1e-12);
            prop_assert!((-1.5..=2.5).contains(&e1));
        }
    }
}
