//! Demographic binning, subgroup partitions and leakage-safe fold plans.

mod plan;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Cohort, Demographics, Gender};

pub use plan::{
    plan_phase1, plan_phase2, verify_no_leakage, FoldSplit, Phase1Plan, Phase2Fold, Phase2Plan, PlanError,
    Violation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    Under50,
    From50To65,
    Over65,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AhiSeverity {
    Normal,
    Mild,
    Moderate,
    Severe,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 3] = [AgeGroup::Under50, AgeGroup::From50To65, AgeGroup::Over65];

    pub fn label(self) -> &'static str {
        match self {
            AgeGroup::Under50 => "U50",
            AgeGroup::From50To65 => "50-65",
            AgeGroup::Over65 => "O65",
        }
    }
}

impl AhiSeverity {
    pub const ALL: [AhiSeverity; 4] =
        [AhiSeverity::Normal, AhiSeverity::Mild, AhiSeverity::Moderate, AhiSeverity::Severe];

    pub fn label(self) -> &'static str {
        match self {
            AhiSeverity::Normal => "Normal",
            AhiSeverity::Mild => "Mild",
            AhiSeverity::Moderate => "Moderate",
            AhiSeverity::Severe => "Severe",
        }
    }
}

pub fn age_group(age: u32) -> AgeGroup {
    match age {
        0..=49 => AgeGroup::Under50,
        50..=65 => AgeGroup::From50To65,
        _ => AgeGroup::Over65,
    }
}

/// Half-open bins: [0,5) normal, [5,15) mild, [15,30) moderate, [30,∞) severe.
pub fn ahi_severity(ahi: f64) -> AhiSeverity {
    if ahi < 5.0 {
        AhiSeverity::Normal
    } else if ahi < 15.0 {
        AhiSeverity::Mild
    } else if ahi < 30.0 {
        AhiSeverity::Moderate
    } else {
        AhiSeverity::Severe
    }
}

pub fn classify_demographics(d: &Demographics) -> (AgeGroup, AhiSeverity) {
    (age_group(d.age), ahi_severity(d.ahi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratificationAxis {
    Gender,
    Age,
    Ahi,
    GenderXAhi,
    GenderXAge,
    AgeXAhi,
}

impl StratificationAxis {
    pub const ALL: [StratificationAxis; 6] = [
        StratificationAxis::Gender,
        StratificationAxis::Age,
        StratificationAxis::Ahi,
        StratificationAxis::GenderXAhi,
        StratificationAxis::GenderXAge,
        StratificationAxis::AgeXAhi,
    ];

    pub fn is_two_way(self) -> bool {
        matches!(self, Self::GenderXAhi | Self::GenderXAge | Self::AgeXAhi)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gender => "gender",
            Self::Age => "age",
            Self::Ahi => "ahi",
            Self::GenderXAhi => "gender_x_ahi",
            Self::GenderXAge => "gender_x_age",
            Self::AgeXAhi => "age_x_ahi",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Every possible subgroup of this axis in table order.
    pub fn keys(self) -> Vec<SubgroupKey> {
        let genders = [Gender::Male, Gender::Female];
        let key = |gender, age_group, ahi_severity| SubgroupKey { axis: self, gender, age_group, ahi_severity };
        match self {
            Self::Gender => genders.iter().map(|&g| key(Some(g), None, None)).collect(),
            Self::Age => AgeGroup::ALL.iter().map(|&a| key(None, Some(a), None)).collect(),
            Self::Ahi => AhiSeverity::ALL.iter().map(|&s| key(None, None, Some(s))).collect(),
            Self::GenderXAhi => genders
                .iter()
                .flat_map(|&g| AhiSeverity::ALL.iter().map(move |&s| (g, s)))
                .map(|(g, s)| key(Some(g), None, Some(s)))
                .collect(),
            Self::GenderXAge => genders
                .iter()
                .flat_map(|&g| AgeGroup::ALL.iter().map(move |&a| (g, a)))
                .map(|(g, a)| key(Some(g), Some(a), None))
                .collect(),
            Self::AgeXAhi => AgeGroup::ALL
                .iter()
                .flat_map(|&a| AhiSeverity::ALL.iter().map(move |&s| (a, s)))
                .map(|(a, s)| key(None, Some(a), Some(s)))
                .collect(),
        }
    }

    /// The subgroup a subject falls into on this axis.
    pub fn key_for(self, d: &Demographics) -> SubgroupKey {
        let (age, ahi) = classify_demographics(d);
        let uses = |g: bool, a: bool, s: bool| SubgroupKey {
            axis: self,
            gender: g.then_some(d.gender),
            age_group: a.then_some(age),
            ahi_severity: s.then_some(ahi),
        };
        match self {
            Self::Gender => uses(true, false, false),
            Self::Age => uses(false, true, false),
            Self::Ahi => uses(false, false, true),
            Self::GenderXAhi => uses(true, false, true),
            Self::GenderXAge => uses(true, true, false),
            Self::AgeXAhi => uses(false, true, true),
        }
    }
}

impl fmt::Display for StratificationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubgroupKey {
    pub axis: StratificationAxis,
    pub gender: Option<Gender>,
    pub age_group: Option<AgeGroup>,
    pub ahi_severity: Option<AhiSeverity>,
}

impl SubgroupKey {
    /// Table label such as `Male`, `O65` or `F-Severe`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(g) = self.gender {
            parts.push(if self.axis.is_two_way() {
                g.code()
            } else {
                match g {
                    Gender::Male => "Male",
                    Gender::Female => "Female",
                }
            });
        }
        if let Some(a) = self.age_group {
            parts.push(a.label());
        }
        if let Some(s) = self.ahi_severity {
            parts.push(s.label());
        }
        parts.join("-")
    }

    /// File-name-safe identifier, unique across axes.
    pub fn slug(&self) -> String {
        format!("{}_{}", self.axis.name(), self.label().to_lowercase())
    }

    pub fn matches(&self, d: &Demographics) -> bool {
        self.axis.key_for(d) == *self
    }
}

impl fmt::Display for SubgroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Partitions the cohort along `axis`. Empty subgroups are omitted.
pub fn stratify(cohort: &Cohort, axis: StratificationAxis) -> BTreeMap<SubgroupKey, BTreeSet<String>> {
    let mut out: BTreeMap<SubgroupKey, BTreeSet<String>> = BTreeMap::new();
    for s in cohort.subjects() {
        out.entry(axis.key_for(&s.demographics)).or_default().insert(s.subject_id.clone());
    }
    out
}
