//! Ablation groups: each switches off part of the objective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Adversary;
use crate::training::HyperParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationGroup {
    /// No generated-unknown supervision.
    A,
    B1,
    B2,
    B3,
    C,
    D,
    E1,
    /// Instance-level domain discriminator in place of the dandelion discriminator.
    E2,
    /// Source supervision only.
    F,
    #[serde(rename = "full")]
    Full,
}

impl AblationGroup {
    pub const ALL: [AblationGroup; 10] = [
        AblationGroup::A,
        AblationGroup::B1,
        AblationGroup::B2,
        AblationGroup::B3,
        AblationGroup::C,
        AblationGroup::D,
        AblationGroup::E1,
        AblationGroup::E2,
        AblationGroup::F,
        AblationGroup::Full,
    ];

    pub fn id(self) -> &'static str {
        match self {
            AblationGroup::A => "A",
            AblationGroup::B1 => "B1",
            AblationGroup::B2 => "B2",
            AblationGroup::B3 => "B3",
            AblationGroup::C => "C",
            AblationGroup::D => "D",
            AblationGroup::E1 => "E1",
            AblationGroup::E2 => "E2",
            AblationGroup::F => "F",
            AblationGroup::Full => "full",
        }
    }

    /// `hp` with this group's toggles applied.
    pub fn apply(self, hp: &HyperParams) -> HyperParams {
        let mut hp = hp.clone();
        let w = &mut hp.weights;
        match self {
            AblationGroup::A => w.alpha_u = 0.0,
            AblationGroup::B1 => w.beta_s = 0.0,
            AblationGroup::B2 => w.beta_t = 0.0,
            AblationGroup::B3 => {
                w.beta_s = 0.0;
                w.beta_t = 0.0;
            }
            AblationGroup::C => w.delta = 0.0,
            AblationGroup::D => w.theta = 0.0,
            AblationGroup::E1 => w.gamma = 0.0,
            AblationGroup::E2 => hp.adversary = Adversary::Instance,
            AblationGroup::F => {
                w.beta_s = 0.0;
                w.beta_t = 0.0;
                w.delta = 0.0;
                w.theta = 0.0;
                w.gamma = 0.0;
            }
            AblationGroup::Full => {}
        }
        hp
    }

    /// Comma-separated ids.
    pub fn parse_list(s: &str) -> Result<Vec<AblationGroup>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for AblationGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for AblationGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationGroup::ALL
            .into_iter()
            .find(|g| g.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant {
                kind: "ablation group",
                value: s.into(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::LossWeights;

    #[test]
    fn toggles() {
        let hp = HyperParams::default();
        assert_eq!(AblationGroup::A.apply(&hp).weights.alpha_u, 0.0);
        let b3 = AblationGroup::B3.apply(&hp).weights;
        assert_eq!((b3.beta_s, b3.beta_t), (0.0, 0.0));
        assert_eq!(AblationGroup::D.apply(&hp).weights.theta, 0.0);
        assert_eq!(AblationGroup::E2.apply(&hp).adversary, Adversary::Instance);
        assert_eq!(AblationGroup::Full.apply(&hp), hp);
        let f = AblationGroup::F.apply(&hp).weights;
        let d = LossWeights::default();
        assert_eq!(
            f,
            LossWeights {
                alpha_s: d.alpha_s,
                alpha_u: d.alpha_u,
                ..LossWeights::zero()
            }
        );
    }

    #[test]
    fn parsing() {
        assert_eq!(
            AblationGroup::parse_list("full, D,e2").unwrap(),
            vec![AblationGroup::Full, AblationGroup::D, AblationGroup::E2]
        );
        assert!(AblationGroup::parse_list("G").is_err());
    }
}
