use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One discretized control dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub bins: usize,
    pub low: f64,
    pub high: f64,
}

impl Factor {
    /// Bin centers are evenly spaced and include both range endpoints.
    pub fn center(&self, idx: usize) -> f64 {
        if self.bins == 1 {
            return 0.5 * (self.low + self.high);
        }
        let t = idx as f64 / (self.bins - 1) as f64;
        self.low * (1.0 - t) + self.high * t
    }

    pub fn nearest_bin(&self, value: f64) -> usize {
        (0..self.bins)
            .min_by(|&a, &b| {
                (self.center(a) - value)
                    .abs()
                    .total_cmp(&(self.center(b) - value).abs())
            })
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSpec {
    /// Named discrete choices.
    Discrete { labels: Vec<String> },
    /// Continuous controls discretized per dimension, encoded as concatenated one-hots.
    Factored { factors: Vec<Factor> },
}

/// An action as handed to an environment.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    /// One bin index per factor (a single index for plain discrete specs).
    Discrete(Vec<usize>),
    /// Raw control values, one per factor; used by classical controllers.
    Continuous(Vec<f64>),
}

impl ActionSpec {
    pub fn steer_throttle(steer_bins: usize, throttle_bins: usize) -> Result<Self> {
        if steer_bins == 0 || throttle_bins == 0 {
            return Err(Error::config("bin counts must be positive"));
        }
        Ok(ActionSpec::Factored {
            factors: vec![
                Factor {
                    name: "steer".into(),
                    bins: steer_bins,
                    low: -0.8,
                    high: 0.8,
                },
                Factor {
                    name: "throttle".into(),
                    bins: throttle_bins,
                    low: 0.6,
                    high: 1.0,
                },
            ],
        })
    }

    pub fn left_straight_right() -> Self {
        ActionSpec::Discrete {
            labels: vec!["left".into(), "straight".into(), "right".into()],
        }
    }

    /// Size of each one-hot block.
    pub fn blocks(&self) -> Vec<usize> {
        match self {
            ActionSpec::Discrete { labels } => vec![labels.len()],
            ActionSpec::Factored { factors } => factors.iter().map(|f| f.bins).collect(),
        }
    }

    pub fn encoding_dim(&self) -> usize {
        self.blocks().iter().sum()
    }

    pub fn validate(&self, action: &Action) -> Result<()> {
        let blocks = self.blocks();
        match action {
            Action::Discrete(idx) => {
                if idx.len() != blocks.len() || idx.iter().zip(&blocks).any(|(&i, &n)| i >= n) {
                    return Err(Error::Usage(format!(
                        "action {idx:?} invalid for blocks {blocks:?}"
                    )));
                }
            }
            Action::Continuous(v) => {
                let ActionSpec::Factored { factors } = self else {
                    return Err(Error::Usage("continuous action on a discrete spec".into()));
                };
                if v.len() != factors.len() {
                    return Err(Error::Usage(format!(
                        "continuous action has {} values, spec has {} factors",
                        v.len(),
                        factors.len()
                    )));
                }
                for (x, f) in v.iter().zip(factors) {
                    if !(x.is_finite() && *x >= f.low - 1e-12 && *x <= f.high + 1e-12) {
                        return Err(Error::Usage(format!(
                            "{} = {x} outside [{}, {}]",
                            f.name, f.low, f.high
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Concatenated one-hot encoding of a discrete action.
    pub fn encode(&self, idx: &[usize]) -> Result<Vec<f64>> {
        self.validate(&Action::Discrete(idx.to_vec()))?;
        let mut out = vec![0.0; self.encoding_dim()];
        let mut off = 0;
        for (&i, n) in idx.iter().zip(self.blocks()) {
            out[off + i] = 1.0;
            off += n;
        }
        Ok(out)
    }

    /// Control values for an action; discrete bins map to their centers.
    pub fn controls(&self, action: &Action) -> Result<Vec<f64>> {
        self.validate(action)?;
        match (self, action) {
            (ActionSpec::Factored { factors }, Action::Discrete(idx)) => {
                Ok(idx.iter().zip(factors).map(|(&i, f)| f.center(i)).collect())
            }
            (_, Action::Continuous(v)) => Ok(v.clone()),
            (ActionSpec::Discrete { .. }, Action::Discrete(idx)) => Ok(vec![idx[0] as f64]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_linetrack_spec() {
        let spec = ActionSpec::steer_throttle(7, 3).unwrap();
        assert_eq!(spec.blocks(), vec![7, 3]);
        assert_eq!(spec.encoding_dim(), 10);
        let ActionSpec::Factored { factors } = &spec else { unreachable!() };
        for f in factors {
            for i in 0..f.bins {
                let c = f.center(i);
                assert!(c >= f.low && c <= f.high);
            }
        }
        assert_eq!(factors[0].center(3), 0.0);
        assert_eq!(factors[1].center(1), 0.8);
        let e = spec.encode(&[6, 0]).unwrap();
        assert_eq!(e.iter().sum::<f64>(), 2.0);
        assert_eq!(e[6], 1.0);
        assert_eq!(e[7], 1.0);
    }

    #[test]
    fn invalid_actions_rejected() {
        let spec = ActionSpec::steer_throttle(7, 3).unwrap();
        assert!(spec.validate(&Action::Discrete(vec![7, 0])).is_err());
        assert!(spec.validate(&Action::Continuous(vec![0.0, 0.5])).is_err());
        assert!(spec.validate(&Action::Continuous(vec![0.9, 0.7])).is_err());
        assert!(spec.validate(&Action::Continuous(vec![-0.8, 1.0])).is_ok());
    }
}
