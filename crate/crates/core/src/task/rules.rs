//! Parametric image transformations and their discretized parameter bins.
//!
//! | family          | parameter            | range        | bins            |
//! |-----------------|----------------------|--------------|-----------------|
//! | CHANNEL_PERMUTE | channel permutation  | 5 non-identity perms | one per perm |
//! | BRIGHTNESS      | additive delta       | [-0.3, 0.3]  | 6 × 0.1         |
//! | HUE_SHIFT       | rotation (degrees)   | [0, 360)     | 6 × 60°         |
//! | H_FLIP          | blend with mirror    | [0, 1]       | 5 × 0.2         |
//! | ROT90           | counter-clockwise turns | {1, 2, 3} | one per turn    |
//! | REGION_RECOLOR  | quadrant + palette color | 4 quadrants | one per quadrant |
//! | CONTRAST        | factor about 0.5     | [0.4, 1.6]   | 6 × 0.2         |
//!
//! 35 bins in total. Results are clamped to `[0, 1]`; BRIGHTNESS and
//! CONTRAST clamp on saturated content, the other families stay in range
//! except HUE_SHIFT on strongly saturated colors.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuleFamily {
    ChannelPermute,
    Brightness,
    HueShift,
    HFlip,
    Rot90,
    RegionRecolor,
    Contrast,
}

pub const PERMUTATIONS: [[usize; 3]; 5] = [[1, 0, 2], [0, 2, 1], [2, 1, 0], [1, 2, 0], [2, 0, 1]];

pub const PALETTE: [[f64; 3]; 4] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
];

/// `(low, bin width)` of the continuous families.
const BRIGHTNESS_BINS: (f64, f64) = (-0.3, 0.1);
const HUE_BINS: (f64, f64) = (0.0, 60.0);
const FLIP_BINS: (f64, f64) = (0.0, 0.2);
const CONTRAST_BINS: (f64, f64) = (0.4, 0.2);

impl RuleFamily {
    pub const ALL: [RuleFamily; 7] = [
        RuleFamily::ChannelPermute,
        RuleFamily::Brightness,
        RuleFamily::HueShift,
        RuleFamily::HFlip,
        RuleFamily::Rot90,
        RuleFamily::RegionRecolor,
        RuleFamily::Contrast,
    ];

    pub fn n_bins(self) -> usize {
        match self {
            RuleFamily::ChannelPermute => 5,
            RuleFamily::Brightness => 6,
            RuleFamily::HueShift => 6,
            RuleFamily::HFlip => 5,
            RuleFamily::Rot90 => 3,
            RuleFamily::RegionRecolor => 4,
            RuleFamily::Contrast => 6,
        }
    }

    pub fn index(self) -> usize {
        RuleFamily::ALL.iter().position(|&f| f == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            RuleFamily::ChannelPermute => "CHANNEL_PERMUTE",
            RuleFamily::Brightness => "BRIGHTNESS",
            RuleFamily::HueShift => "HUE_SHIFT",
            RuleFamily::HFlip => "H_FLIP",
            RuleFamily::Rot90 => "ROT90",
            RuleFamily::RegionRecolor => "REGION_RECOLOR",
            RuleFamily::Contrast => "CONTRAST",
        }
    }

    pub fn from_name(s: &str) -> Option<RuleFamily> {
        RuleFamily::ALL.into_iter().find(|f| f.name() == s)
    }
}

impl fmt::Display for RuleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A discretized parameter bin; the unit of train/test holdout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BinId {
    pub family: RuleFamily,
    pub index: usize,
}

impl BinId {
    pub fn new(family: RuleFamily, index: usize) -> Self {
        BinId { family, index }
    }
}

impl fmt::Display for BinId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.family, self.index)
    }
}

impl std::str::FromStr for BinId {
    type Err = String;

    /// Parses `FAMILY/index`, e.g. `HUE_SHIFT/3`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (fam, idx) = s.split_once('/').ok_or_else(|| format!("bin `{s}` is not FAMILY/index"))?;
        let family = RuleFamily::from_name(fam).ok_or_else(|| format!("unknown rule family `{fam}`"))?;
        let index: usize = idx.parse().map_err(|_| format!("bad bin index `{idx}`"))?;
        if index >= family.n_bins() {
            return Err(format!("{family} has only {} bins", family.n_bins()));
        }
        Ok(BinId { family, index })
    }
}

impl From<BinId> for String {
    fn from(b: BinId) -> String {
        b.to_string()
    }
}

impl TryFrom<String> for BinId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

/// Every bin of every family, in family order.
pub fn all_bins() -> Vec<BinId> {
    RuleFamily::ALL
        .into_iter()
        .flat_map(|f| (0..f.n_bins()).map(move |i| BinId::new(f, i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum Rule {
    ChannelPermute { perm: [usize; 3] },
    Brightness { delta: f64 },
    HueShift { degrees: f64 },
    #[serde(rename = "H_FLIP")]
    HFlip { blend: f64 },
    #[serde(rename = "ROT90")]
    Rot90 { turns: u8 },
    RegionRecolor { quadrant: u8, color: [f64; 3] },
    Contrast { factor: f64 },
}

fn continuous_bin(x: f64, (lo, width): (f64, f64), n: usize) -> usize {
    let i = ((x - lo) / width).floor();
    (i.max(0.0) as usize).min(n - 1)
}

impl Rule {
    pub fn family(&self) -> RuleFamily {
        match self {
            Rule::ChannelPermute { .. } => RuleFamily::ChannelPermute,
            Rule::Brightness { .. } => RuleFamily::Brightness,
            Rule::HueShift { .. } => RuleFamily::HueShift,
            Rule::HFlip { .. } => RuleFamily::HFlip,
            Rule::Rot90 { .. } => RuleFamily::Rot90,
            Rule::RegionRecolor { .. } => RuleFamily::RegionRecolor,
            Rule::Contrast { .. } => RuleFamily::Contrast,
        }
    }

    /// Checks parameters against the family's documented range.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Rule(msg));
        match *self {
            Rule::ChannelPermute { perm } => {
                if !PERMUTATIONS.contains(&perm) {
                    return bad(format!("{perm:?} is not a non-identity channel permutation"));
                }
            }
            Rule::Brightness { delta } if !(-0.3..=0.3).contains(&delta) => {
                return bad(format!("brightness delta {delta} outside [-0.3, 0.3]"));
            }
            Rule::HueShift { degrees } if !(0.0..360.0).contains(&degrees) => {
                return bad(format!("hue shift {degrees} outside [0, 360)"));
            }
            Rule::HFlip { blend } if !(0.0..=1.0).contains(&blend) => {
                return bad(format!("flip blend {blend} outside [0, 1]"));
            }
            Rule::Rot90 { turns } if !(1..=3).contains(&turns) => {
                return bad(format!("rotation turns {turns} outside 1..=3"));
            }
            Rule::RegionRecolor { quadrant, color } => {
                if quadrant > 3 || !color.iter().all(|c| (0.0..=1.0).contains(c)) {
                    return bad(format!("region recolor quadrant {quadrant} / color {color:?} invalid"));
                }
            }
            Rule::Contrast { factor } if !(0.4..=1.6).contains(&factor) => {
                return bad(format!("contrast factor {factor} outside [0.4, 1.6]"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn bin_id(&self) -> BinId {
        let f = self.family();
        let index = match *self {
            Rule::ChannelPermute { perm } => PERMUTATIONS.iter().position(|p| *p == perm).unwrap_or(0),
            Rule::Brightness { delta } => continuous_bin(delta, BRIGHTNESS_BINS, f.n_bins()),
            Rule::HueShift { degrees } => continuous_bin(degrees, HUE_BINS, f.n_bins()),
            Rule::HFlip { blend } => continuous_bin(blend, FLIP_BINS, f.n_bins()),
            Rule::Rot90 { turns } => usize::from(turns.clamp(1, 3)) - 1,
            Rule::RegionRecolor { quadrant, .. } => usize::from(quadrant.min(3)),
            Rule::Contrast { factor } => continuous_bin(factor, CONTRAST_BINS, f.n_bins()),
        };
        BinId::new(f, index)
    }

    /// Draws a rule uniformly from within `bin`.
    pub fn sample_in_bin<R: Rng>(bin: BinId, rng: &mut R) -> Rule {
        let within = |(lo, w): (f64, f64), rng: &mut R| lo + w * (bin.index as f64 + rng.gen::<f64>());
        match bin.family {
            RuleFamily::ChannelPermute => Rule::ChannelPermute {
                perm: PERMUTATIONS[bin.index],
            },
            RuleFamily::Brightness => Rule::Brightness {
                delta: within(BRIGHTNESS_BINS, rng),
            },
            RuleFamily::HueShift => Rule::HueShift {
                degrees: within(HUE_BINS, rng),
            },
            RuleFamily::HFlip => Rule::HFlip {
                blend: within(FLIP_BINS, rng),
            },
            RuleFamily::Rot90 => Rule::Rot90 {
                turns: bin.index as u8 + 1,
            },
            RuleFamily::RegionRecolor => Rule::RegionRecolor {
                quadrant: bin.index as u8,
                color: PALETTE[rng.gen_range(0..PALETTE.len())],
            },
            RuleFamily::Contrast => Rule::Contrast {
                factor: within(CONTRAST_BINS, rng),
            },
        }
    }
}

fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    // rotation about the gray axis (1,1,1)/√3
    let (s, c) = degrees.to_radians().sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = s / 3f64.sqrt();
    [
        [c + a, a - b, a + b],
        [a + b, c + a, a - b],
        [a - b, a + b, c + a],
    ]
}

/// Applies `rule` to `image`; the result is clamped to `[0, 1]`.
pub fn apply_rule(rule: &Rule, image: &Image) -> Result<Image> {
    rule.validate()?;
    let g = image.size();
    let out = match *rule {
        Rule::ChannelPermute { perm } => image.map_pixels(|_, _, p| [p[perm[0]], p[perm[1]], p[perm[2]]]),
        Rule::Brightness { delta } => image.map_pixels(|_, _, p| p.map(|v| v + delta)),
        Rule::HueShift { degrees } => {
            let m = hue_matrix(degrees);
            image.map_pixels(|_, _, p| {
                [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
            })
        }
        Rule::HFlip { blend } => image.map_pixels(|y, x, p| {
            let q = image.pixel(y, g - 1 - x);
            [0, 1, 2].map(|c| (1.0 - blend) * p[c] + blend * q[c])
        }),
        Rule::Rot90 { turns } => {
            let mut cur = image.clone();
            for _ in 0..turns {
                let src = cur.clone();
                cur = src.map_pixels(|y, x, _| src.pixel(x, g - 1 - y));
            }
            cur
        }
        Rule::RegionRecolor { quadrant, color } => {
            let half = g / 2;
            image.map_pixels(|y, x, p| {
                let q = 2 * u8::from(y >= half) + u8::from(x >= half);
                if q == quadrant {
                    [0, 1, 2].map(|c| 0.5 * p[c] + 0.5 * color[c])
                } else {
                    p
                }
            })
        }
        Rule::Contrast { factor } => image.map_pixels(|_, _, p| p.map(|v| 0.5 + factor * (v - 0.5))),
    };
    Ok(out.clamped())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::image::{sample_image, ContentFamily};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Image {
        sample_image(ContentFamily::Blobs, 4, 8)
    }

    #[test]
    fn flip_is_an_involution() {
        let r = Rule::HFlip { blend: 1.0 };
        let x = img();
        assert_eq!(apply_rule(&r, &apply_rule(&r, &x).unwrap()).unwrap(), x);
    }

    #[test]
    fn zero_brightness_is_identity() {
        let x = img();
        assert_eq!(apply_rule(&Rule::Brightness { delta: 0.0 }, &x).unwrap(), x);
    }

    #[test]
    fn channel_permute_hand_case() {
        let mut x = Image::zeros(1);
        x.set_pixel(0, 0, [1.0, 0.0, 0.5]);
        let y = apply_rule(&Rule::ChannelPermute { perm: [2, 0, 1] }, &x).unwrap();
        assert_eq!(y.pixel(0, 0), [0.5, 1.0, 0.0]);
    }

    #[test]
    fn four_quarter_turns_and_hue_wrap() {
        let x = img();
        let r1 = apply_rule(&Rule::Rot90 { turns: 1 }, &x).unwrap();
        let r3 = apply_rule(&Rule::Rot90 { turns: 3 }, &r1).unwrap();
        assert_eq!(r3, x);
        // 2x2 counter-clockwise: [[a,b],[c,d]] -> [[b,d],[a,c]]
        let mut s = Image::zeros(2);
        for (i, (y, xx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            s.set_pixel(y, xx, [i as f64 / 4.0; 3]);
        }
        let r = apply_rule(&Rule::Rot90 { turns: 1 }, &s).unwrap();
        assert_eq!(r.pixel(0, 0), s.pixel(0, 1));
        assert_eq!(r.pixel(0, 1), s.pixel(1, 1));
        assert_eq!(r.pixel(1, 0), s.pixel(0, 0));
        // gray pixels are fixed points of a hue rotation
        let gray = Image::from_data(1, vec![0.3, 0.3, 0.3]).unwrap();
        let h = apply_rule(&Rule::HueShift { degrees: 123.0 }, &gray).unwrap();
        for v in h.data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_stay_in_range_and_bins_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for bin in all_bins() {
            for _ in 0..20 {
                let r = Rule::sample_in_bin(bin, &mut rng);
                r.validate().unwrap();
                assert_eq!(r.bin_id(), bin, "{r:?}");
                assert!(apply_rule(&r, &img()).unwrap().in_unit_range());
            }
        }
        assert_eq!(all_bins().len(), 35);
    }

    #[test]
    fn invalid_params_and_unknown_family_rejected() {
        assert!(apply_rule(&Rule::ChannelPermute { perm: [0, 1, 2] }, &img()).is_err());
        assert!(apply_rule(&Rule::Rot90 { turns: 4 }, &img()).is_err());
        let unknown = r#"{"family":"SEPIA","strength":0.5}"#;
        assert!(serde_json::from_str::<Rule>(unknown).is_err());
        let ok = r#"{"family":"H_FLIP","blend":1.0}"#;
        assert_eq!(serde_json::from_str::<Rule>(ok).unwrap(), Rule::HFlip { blend: 1.0 });
        assert_eq!("HUE_SHIFT/3".parse::<BinId>().unwrap(), BinId::new(RuleFamily::HueShift, 3));
        assert!("ROT90/3".parse::<BinId>().is_err());
    }
}
