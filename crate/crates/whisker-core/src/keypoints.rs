//! The fixed 12-keypoint anatomical schema and its four-region partition.
//!
//! Regions: ears (2), back (3), paws (4), tail (3). The declaration order of
//! [`Keypoint`] is the canonical processing order used everywhere a stable
//! keypoint iteration matters.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Anatomical region grouping of the keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "ears")]
    Ears,
    #[serde(rename = "back")]
    Back,
    #[serde(rename = "paws")]
    Paws,
    #[serde(rename = "tail")]
    Tail,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Ears, Region::Back, Region::Paws, Region::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Region::Ears => "ears",
            Region::Back => "back",
            Region::Paws => "paws",
            Region::Tail => "tail",
        }
    }

    /// Keypoints belonging to this region, in canonical order.
    pub fn keypoints(self) -> &'static [Keypoint] {
        match self {
            Region::Ears => &[Keypoint::EarL, Keypoint::EarR],
            Region::Back => &[Keypoint::BackTop, Keypoint::BackMiddle, Keypoint::BackBottom],
            Region::Paws => &[
                Keypoint::ForepawL,
                Keypoint::ForepawR,
                Keypoint::HindpawL,
                Keypoint::HindpawR,
            ],
            Region::Tail => &[Keypoint::TailBase, Keypoint::TailMiddle, Keypoint::TailTip],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Region> {
        Region::ALL.iter().copied().find(|r| r.name() == name)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One of the 12 named anatomical keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Keypoint {
    #[serde(rename = "ear_L")]
    EarL,
    #[serde(rename = "ear_R")]
    EarR,
    #[serde(rename = "back_top")]
    BackTop,
    #[serde(rename = "back_middle")]
    BackMiddle,
    #[serde(rename = "back_bottom")]
    BackBottom,
    #[serde(rename = "forepaw_L")]
    ForepawL,
    #[serde(rename = "forepaw_R")]
    ForepawR,
    #[serde(rename = "hindpaw_L")]
    HindpawL,
    #[serde(rename = "hindpaw_R")]
    HindpawR,
    #[serde(rename = "tail_base")]
    TailBase,
    #[serde(rename = "tail_middle")]
    TailMiddle,
    #[serde(rename = "tail_tip")]
    TailTip,
}

impl Keypoint {
    pub const ALL: [Keypoint; 12] = [
        Keypoint::EarL,
        Keypoint::EarR,
        Keypoint::BackTop,
        Keypoint::BackMiddle,
        Keypoint::BackBottom,
        Keypoint::ForepawL,
        Keypoint::ForepawR,
        Keypoint::HindpawL,
        Keypoint::HindpawR,
        Keypoint::TailBase,
        Keypoint::TailMiddle,
        Keypoint::TailTip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Keypoint::EarL => "ear_L",
            Keypoint::EarR => "ear_R",
            Keypoint::BackTop => "back_top",
            Keypoint::BackMiddle => "back_middle",
            Keypoint::BackBottom => "back_bottom",
            Keypoint::ForepawL => "forepaw_L",
            Keypoint::ForepawR => "forepaw_R",
            Keypoint::HindpawL => "hindpaw_L",
            Keypoint::HindpawR => "hindpaw_R",
            Keypoint::TailBase => "tail_base",
            Keypoint::TailMiddle => "tail_middle",
            Keypoint::TailTip => "tail_tip",
        }
    }

    pub fn region(self) -> Region {
        match self {
            Keypoint::EarL | Keypoint::EarR => Region::Ears,
            Keypoint::BackTop | Keypoint::BackMiddle | Keypoint::BackBottom => Region::Back,
            Keypoint::ForepawL | Keypoint::ForepawR | Keypoint::HindpawL | Keypoint::HindpawR => {
                Region::Paws
            }
            Keypoint::TailBase | Keypoint::TailMiddle | Keypoint::TailTip => Region::Tail,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Keypoint> {
        Keypoint::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for Keypoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn schema_has_four_disjoint_regions_covering_twelve_keypoints() {
        assert_eq!(Region::ALL.len(), 4);
        let mut seen = BTreeSet::new();
        let mut total = 0;
        for region in Region::ALL {
            for &kp in region.keypoints() {
                assert_eq!(kp.region(), region);
                assert!(seen.insert(kp), "{kp} listed in two regions");
                total += 1;
            }
        }
        assert_eq!(total, 12);
        assert_eq!(seen.len(), Keypoint::ALL.len());
    }

    #[test]
    fn canonical_order_flattens_regions_in_order() {
        let flattened: Vec<Keypoint> = Region::ALL
            .iter()
            .flat_map(|r| r.keypoints().iter().copied())
            .collect();
        assert_eq!(flattened, Keypoint::ALL);
    }

    #[test]
    fn names_round_trip() {
        for kp in Keypoint::ALL {
            assert_eq!(Keypoint::from_name(kp.name()), Some(kp));
        }
        assert_eq!(Keypoint::from_name("nose"), None);
        let json = serde_json::to_string(&Keypoint::EarL).unwrap();
        assert_eq!(json, "\"ear_L\"");
    }
}
