//! Few-shot episodes: a rule, `k` exemplar pairs, a query and its target.
//!
//! Episodes serialize as [`EpisodeRecord`] JSON; images are regenerated from
//! their `(family, seed)` references:
//!
//! ```json
//! {
//!   "rule": {"family": "HUE_SHIFT", "degrees": 200.5},
//!   "setting": "out_dist",
//!   "k": 2,
//!   "seed": 17,
//!   "grid": 8,
//!   "query": {"family": "BLOBS", "seed": 991},
//!   "exemplars": [{"family": "CHECKER", "seed": 12}, {"family": "CHECKER", "seed": 40}]
//! }
//! ```

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{sample_image, ContentFamily, Image};
use super::rules::{apply_rule, Rule};
use super::split::{Split, SplitSide};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Exemplars and query share one content family.
    InDist,
    /// All exemplars share one content family, different from the query's.
    OutDist,
    /// Exemplars use pairwise-distinct families, none equal to the query's.
    OutDistDiverse,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::InDist, Setting::OutDist, Setting::OutDistDiverse];

    pub fn name(self) -> &'static str {
        match self {
            Setting::InDist => "in_dist",
            Setting::OutDist => "out_dist",
            Setting::OutDistDiverse => "out_dist_diverse",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Setting::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown setting `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub family: ContentFamily,
    pub seed: u64,
}

impl ImageRef {
    pub fn render(&self, grid: usize) -> Image {
        sample_image(self.family, self.seed, grid)
    }
}

/// Serializable form of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub rule: Rule,
    pub setting: Setting,
    pub k: usize,
    pub seed: u64,
    pub grid: usize,
    pub query: ImageRef,
    pub exemplars: Vec<ImageRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub record: EpisodeRecord,
    pub rule: Rule,
    /// `(source, target)` pairs.
    pub exemplars: Vec<(Image, Image)>,
    pub query: Image,
    pub target: Image,
    pub setting: Setting,
}

impl Episode {
    pub fn from_record(record: &EpisodeRecord) -> Result<Episode> {
        if record.exemplars.len() != record.k || record.k == 0 {
            return Err(Error::Episode(format!(
                "record declares k={} but lists {} exemplars",
                record.k,
                record.exemplars.len()
            )));
        }
        let exemplars = record
            .exemplars
            .iter()
            .map(|r| {
                let src = r.render(record.grid);
                let tgt = apply_rule(&record.rule, &src)?;
                Ok((src, tgt))
            })
            .collect::<Result<Vec<_>>>()?;
        let query = record.query.render(record.grid);
        let target = apply_rule(&record.rule, &query)?;
        Ok(Episode {
            record: record.clone(),
            rule: record.rule.clone(),
            exemplars,
            query,
            target,
            setting: record.setting,
        })
    }

    pub fn k(&self) -> usize {
        self.exemplars.len()
    }
}

/// Largest `k` the diverse setting supports: every exemplar needs its own
/// family, distinct from the query's.
pub const MAX_DIVERSE_SHOTS: usize = ContentFamily::ALL.len() - 1;

/// Samples an episode deterministically from `seed`, drawing the rule from
/// the requested side of `split`.
pub fn sample_episode(
    split: &Split,
    side: SplitSide,
    setting: Setting,
    k: usize,
    seed: u64,
    grid: usize,
) -> Result<Episode> {
    Episode::from_record(&sample_record(split, side, setting, k, seed, grid)?)
}

pub fn sample_record(
    split: &Split,
    side: SplitSide,
    setting: Setting,
    k: usize,
    seed: u64,
    grid: usize,
) -> Result<EpisodeRecord> {
    if k == 0 {
        return Err(Error::Episode("k must be at least 1".into()));
    }
    if setting == Setting::OutDistDiverse && k > MAX_DIVERSE_SHOTS {
        return Err(Error::Episode(format!(
            "the diverse setting needs {k} distinct exemplar families but only {MAX_DIVERSE_SHOTS} differ from the query's"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins: Vec<_> = split.side(side).iter().copied().collect();
    let bin = *bins
        .choose(&mut rng)
        .ok_or_else(|| Error::Episode(format!("split side {side:?} is empty")))?;
    let rule = Rule::sample_in_bin(bin, &mut rng);

    let query_family = *ContentFamily::ALL.choose(&mut rng).unwrap();
    let mut others: Vec<ContentFamily> = ContentFamily::ALL
        .into_iter()
        .filter(|&f| f != query_family)
        .collect();
    let families: Vec<ContentFamily> = match setting {
        Setting::InDist => vec![query_family; k],
        Setting::OutDist => vec![*others.choose(&mut rng).unwrap(); k],
        Setting::OutDistDiverse => {
            others.shuffle(&mut rng);
            others.truncate(k);
            others
        }
    };

    let query_seed: u64 = rng.gen();
    let mut used = vec![query_seed];
    let exemplars = families
        .into_iter()
        .map(|family| {
            let mut s: u64 = rng.gen();
            while used.contains(&s) {
                s = rng.gen();
            }
            used.push(s);
            ImageRef { family, seed: s }
        })
        .collect();

    Ok(EpisodeRecord {
        rule,
        setting,
        k,
        seed,
        grid,
        query: ImageRef {
            family: query_family,
            seed: query_seed,
        },
        exemplars,
    })
}
