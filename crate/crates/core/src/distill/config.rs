use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::kd::KlDirection;
use super::DistillError;

/// Align the first `first` and the last `last` student layers with the
/// teacher, anchored at both ends of each network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub first: usize,
    pub last: usize,
}

impl Default for LayerSelection {
    fn default() -> Self {
        Self { first: 1, last: 1 }
    }
}

impl LayerSelection {
    /// `(student_layer, teacher_layer)` pairs: `i <-> i` for the first block,
    /// `(S-1-i) <-> (T-1-i)` for the last block.
    pub fn pairs(&self, student_depth: usize, teacher_depth: usize) -> Result<Vec<(usize, usize)>, DistillError> {
        for (depth, side) in [(student_depth, "student"), (teacher_depth, "teacher")] {
            if self.first + self.last > depth {
                return Err(DistillError::Selection {
                    first: self.first,
                    last: self.last,
                    depth,
                    side,
                });
            }
        }
        let mut pairs: Vec<(usize, usize)> = (0..self.first).map(|i| (i, i)).collect();
        pairs.extend(
            (0..self.last)
                .rev()
                .map(|i| (student_depth - 1 - i, teacher_depth - 1 - i)),
        );
        Ok(pairs)
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "first:{},last:{}", self.first, self.last)
    }
}

impl FromStr for LayerSelection {
    type Err = DistillError;

    /// Parses `first:X,last:Y`; either part may be omitted and defaults to 0.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DistillError::SelectionSyntax(s.to_string());
        let mut sel = LayerSelection { first: 0, last: 0 };
        let mut seen = false;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once(':').ok_or_else(bad)?;
            let n: usize = value.trim().parse().map_err(|_| bad())?;
            match key.trim() {
                "first" => sel.first = n,
                "last" => sel.last = n,
                _ => return Err(bad()),
            }
            seen = true;
        }
        if !seen {
            return Err(bad());
        }
        Ok(sel)
    }
}

/// Hyperparameters shared by the distillation objectives and analyses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub layers: LayerSelection,
    pub n_bins: usize,
    pub kl_direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.2,
            temperature: 1.0,
            layers: LayerSelection::default(),
            n_bins: 100,
            kl_direction: KlDirection::TeacherReference,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DistillError::Alpha(self.alpha));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(DistillError::Beta(self.beta));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(DistillError::Temperature(self.temperature));
        }
        if self.n_bins == 0 {
            return Err(DistillError::Bins);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = DistillConfig::default();
        assert_eq!((c.temperature, c.alpha, c.beta, c.n_bins), (1.0, 0.9, 0.2, 100));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn validation() {
        let mut c = DistillConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert_eq!(c.validate(), Err(DistillError::Alpha(1.5)));
        c.alpha = 0.5;
        c.temperature = 0.0;
        assert_eq!(c.validate(), Err(DistillError::Temperature(0.0)));
        c.temperature = 2.0;
        c.beta = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parse_and_display() {
        let s: LayerSelection = "first:2,last:3".parse().unwrap();
        assert_eq!(s, LayerSelection { first: 2, last: 3 });
        assert_eq!(s.to_string(), "first:2,last:3");
        assert_eq!(
            "last:1".parse::<LayerSelection>().unwrap(),
            LayerSelection { first: 0, last: 1 }
        );
        assert!("first=1".parse::<LayerSelection>().is_err());
        assert!("".parse::<LayerSelection>().is_err());
        assert!("middle:1".parse::<LayerSelection>().is_err());
    }

    #[test]
    fn endpoint_anchored_pairs() {
        let s = LayerSelection { first: 2, last: 2 };
        assert_eq!(s.pairs(12, 24).unwrap(), vec![(0, 0), (1, 1), (10, 22), (11, 23)]);
        assert!(s.pairs(3, 24).is_err());
        assert!(s.pairs(12, 3).is_err());
        assert_eq!(LayerSelection { first: 0, last: 0 }.pairs(1, 1).unwrap(), vec![]);
    }
}
