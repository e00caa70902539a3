use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::rules::{all_bins, BinId, RuleFamily};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSide {
    Train,
    Test,
}

impl std::str::FromStr for SplitSide {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(SplitSide::Train),
            "test" => Ok(SplitSide::Test),
            other => Err(format!("unknown split side `{other}` (expected train or test)")),
        }
    }
}

/// Rule bins partitioned into a training side and a held-out test side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    train: BTreeSet<BinId>,
    test: BTreeSet<BinId>,
}

/// The shipped holdout table: one bin per family, 7 of 35 (20%).
///
/// | family          | held-out bin | parameter range    |
/// |-----------------|--------------|--------------------|
/// | CHANNEL_PERMUTE | 2            | perm (2, 1, 0)     |
/// | BRIGHTNESS      | 4            | delta in [0.1, 0.2)|
/// | HUE_SHIFT       | 3            | [180°, 240°)       |
/// | H_FLIP          | 3            | blend in [0.6, 0.8)|
/// | ROT90           | 1            | 2 turns            |
/// | REGION_RECOLOR  | 3            | bottom-right quadrant |
/// | CONTRAST        | 4            | factor in [1.2, 1.4) |
pub fn default_holdout() -> BTreeSet<BinId> {
    [
        (RuleFamily::ChannelPermute, 2),
        (RuleFamily::Brightness, 4),
        (RuleFamily::HueShift, 3),
        (RuleFamily::HFlip, 3),
        (RuleFamily::Rot90, 1),
        (RuleFamily::RegionRecolor, 3),
        (RuleFamily::Contrast, 4),
    ]
    .into_iter()
    .map(|(f, i)| BinId::new(f, i))
    .collect()
}

pub fn make_split(holdout: &BTreeSet<BinId>) -> Result<Split> {
    let all: BTreeSet<BinId> = all_bins().into_iter().collect();
    if let Some(bad) = holdout.iter().find(|b| !all.contains(b)) {
        return Err(Error::Split(format!("bin {bad} does not exist")));
    }
    if holdout.is_empty() {
        return Err(Error::Split("holdout is empty, so the test side has no rules".into()));
    }
    if holdout.len() == all.len() {
        return Err(Error::Split("holdout covers every bin, so the train side has no rules".into()));
    }
    Ok(Split {
        train: all.difference(holdout).copied().collect(),
        test: holdout.clone(),
    })
}

impl Split {
    pub fn side(&self, side: SplitSide) -> &BTreeSet<BinId> {
        match side {
            SplitSide::Train => &self.train,
            SplitSide::Test => &self.test,
        }
    }

    pub fn train(&self) -> &BTreeSet<BinId> {
        &self.train
    }

    pub fn test(&self) -> &BTreeSet<BinId> {
        &self.test
    }

    pub fn side_of(&self, bin: BinId) -> Option<SplitSide> {
        if self.train.contains(&bin) {
            Some(SplitSide::Train)
        } else if self.test.contains(&bin) {
            Some(SplitSide::Test)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_bin_never_trains() {
        let hue3: BTreeSet<_> = [BinId::new(RuleFamily::HueShift, 3)].into_iter().collect();
        let s = make_split(&hue3).unwrap();
        assert!(!s.train().contains(&BinId::new(RuleFamily::HueShift, 3)));
        assert_eq!(s.train().len() + s.test().len(), all_bins().len());
        assert_eq!(s.train().intersection(s.test()).count(), 0);
    }

    #[test]
    fn default_split_shape() {
        let h = default_holdout();
        let s = make_split(&h).unwrap();
        assert_eq!(s.test().len() * 5, all_bins().len());
        for f in RuleFamily::ALL {
            assert!(s.test().iter().any(|b| b.family == f), "{f}");
            assert!(s.train().iter().any(|b| b.family == f), "{f}");
        }
    }

    #[test]
    fn degenerate_splits_rejected() {
        assert!(make_split(&BTreeSet::new()).is_err());
        let all: BTreeSet<_> = all_bins().into_iter().collect();
        assert!(make_split(&all).is_err());
    }
}
