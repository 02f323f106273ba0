//! Pod QoS requirements, 5QI profiles, and the rule that maps one onto the
//! other.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Illustrative profile table shipped with the daemon.
///
/// These rows are NOT the standardized 3GPP values. Operators are expected to
/// supply a table matching their network.
pub const DEFAULT_PROFILE_TABLE: &str = r#"# Illustrative 5QI profiles (not normative).
default = 9

[[profile]]
five_qi = 9
resource_type = "non-gbr"
priority_level = 90
packet_delay_budget_ms = 300
packet_error_rate = 1e-6

[[profile]]
five_qi = 8
resource_type = "non-gbr"
priority_level = 80
packet_delay_budget_ms = 50
packet_error_rate = 1e-6

[[profile]]
five_qi = 80
resource_type = "non-gbr"
priority_level = 68
packet_delay_budget_ms = 10
packet_error_rate = 1e-6

[[profile]]
five_qi = 2
resource_type = "gbr"
priority_level = 40
packet_delay_budget_ms = 150
packet_error_rate = 1e-3
averaging_window_ms = 2000

[[profile]]
five_qi = 3
resource_type = "gbr"
priority_level = 30
packet_delay_budget_ms = 50
packet_error_rate = 1e-3
averaging_window_ms = 2000

[[profile]]
five_qi = 82
resource_type = "gbr"
priority_level = 19
packet_delay_budget_ms = 10
packet_error_rate = 1e-4
averaging_window_ms = 2000
max_data_burst_bytes = 255
"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorityClass {
    Guaranteed,
    Burstable,
    #[serde(alias = "best-effort")]
    BestEffort,
}

impl std::str::FromStr for PriorityClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "guaranteed" => Ok(Self::Guaranteed),
            "burstable" => Ok(Self::Burstable),
            "besteffort" | "best-effort" => Ok(Self::BestEffort),
            other => Err(format!("unknown priority class {other:?}")),
        }
    }
}

/// What a pod asks of the network.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct QosRequirement {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guaranteed_kbps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_kbps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority_class: Option<PriorityClass>,
    #[serde(default, rename = "fiveQi", skip_serializing_if = "Option::is_none")]
    pub explicit_five_qi: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RequirementError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("guaranteedKbps ({guaranteed}) exceeds maxKbps ({max})")]
    GuaranteedAboveMax { guaranteed: u32, max: u32 },
    #[error("fiveQi must be in 1..=255")]
    ZeroFiveQi,
}

impl QosRequirement {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn validate(&self) -> Result<(), RequirementError> {
        for (name, v) in [
            ("latencyMs", self.latency_ms),
            ("guaranteedKbps", self.guaranteed_kbps),
            ("maxKbps", self.max_kbps),
        ] {
            if v == Some(0) {
                return Err(RequirementError::NotPositive(name));
            }
        }
        if self.explicit_five_qi == Some(0) {
            return Err(RequirementError::ZeroFiveQi);
        }
        if let (Some(g), Some(m)) = (self.guaranteed_kbps, self.max_kbps) {
            if g > m {
                return Err(RequirementError::GuaranteedAboveMax { guaranteed: g, max: m });
            }
        }
        Ok(())
    }

    /// Resource-type constraint implied by the requirement. GBR is required
    /// exactly when a guaranteed rate or the guaranteed class is stated.
    pub fn gbr_constraint(&self) -> ResourceConstraint {
        let wants_gbr =
            self.guaranteed_kbps.is_some() || self.priority_class == Some(PriorityClass::Guaranteed);
        let forbids_gbr = matches!(
            self.priority_class,
            Some(PriorityClass::Burstable | PriorityClass::BestEffort)
        );
        match (wants_gbr, forbids_gbr) {
            (true, true) => ResourceConstraint::Contradictory,
            (true, false) => ResourceConstraint::Gbr,
            (false, _) => ResourceConstraint::NonGbr,
        }
    }

    /// True when nothing beyond the default profile is asked for.
    fn wants_default(&self) -> bool {
        self.latency_ms.is_none()
            && self.guaranteed_kbps.is_none()
            && matches!(self.priority_class, None | Some(PriorityClass::BestEffort))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResourceConstraint {
    Gbr,
    NonGbr,
    Contradictory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResourceType {
    #[serde(rename = "gbr", alias = "GBR")]
    Gbr,
    #[serde(rename = "non-gbr", alias = "non-GBR")]
    NonGbr,
}

impl fmt::Display for ResourceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gbr => "gbr",
            Self::NonGbr => "non-gbr",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiveQiProfile {
    pub five_qi: u8,
    pub resource_type: ResourceType,
    /// Lower is more important.
    pub priority_level: u32,
    pub packet_delay_budget_ms: u32,
    pub packet_error_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaging_window_ms: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_data_burst_bytes: Option<u32>,
}

impl FiveQiProfile {
    fn validate(&self) -> Result<(), ProfileTableError> {
        let bad = |reason: &str| ProfileTableError::InvalidProfile {
            five_qi: self.five_qi,
            reason: reason.to_string(),
        };
        if self.five_qi == 0 {
            return Err(bad("five_qi must be in 1..=255"));
        }
        if self.packet_delay_budget_ms == 0 {
            return Err(bad("packet_delay_budget_ms must be positive"));
        }
        if !(self.packet_error_rate > 0.0 && self.packet_error_rate <= 1.0) {
            return Err(bad("packet_error_rate must be in (0, 1]"));
        }
        match (self.resource_type, self.averaging_window_ms) {
            (ResourceType::Gbr, None) => return Err(bad("GBR profile needs averaging_window_ms")),
            (ResourceType::NonGbr, Some(_)) => {
                return Err(bad("averaging_window_ms is only allowed on GBR profiles"))
            }
            (_, Some(0)) => return Err(bad("averaging_window_ms must be positive")),
            _ => {}
        }
        if self.max_data_burst_bytes == Some(0) {
            return Err(bad("max_data_burst_bytes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileTableError {
    #[error("profile table does not parse: {0}")]
    Parse(String),
    #[error("profile table is empty")]
    Empty,
    #[error("duplicate five_qi {0}")]
    DuplicateFiveQi(u8),
    #[error("default five_qi {0} is not in the table")]
    MissingDefault(u8),
    #[error("default profile {0} must be non-GBR")]
    DefaultNotBestEffort(u8),
    #[error("profile {five_qi}: {reason}")]
    InvalidProfile { five_qi: u8, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("no profile satisfies the requirement")]
    Unmappable,
    #[error("5QI {0} is not in the profile table")]
    UnknownFiveQi(u8),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileTableDoc {
    default: u8,
    #[serde(default)]
    profile: Vec<FiveQiProfile>,
}

/// Validated, immutable set of profiles plus the best-effort default.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    profiles: Vec<FiveQiProfile>,
    default_five_qi: u8,
}

impl ProfileTable {
    pub fn new(profiles: Vec<FiveQiProfile>, default_five_qi: u8) -> Result<Self, ProfileTableError> {
        if profiles.is_empty() {
            return Err(ProfileTableError::Empty);
        }
        let mut seen = BTreeSet::new();
        for p in &profiles {
            p.validate()?;
            if !seen.insert(p.five_qi) {
                return Err(ProfileTableError::DuplicateFiveQi(p.five_qi));
            }
        }
        let default = profiles
            .iter()
            .find(|p| p.five_qi == default_five_qi)
            .ok_or(ProfileTableError::MissingDefault(default_five_qi))?;
        if default.resource_type != ResourceType::NonGbr {
            return Err(ProfileTableError::DefaultNotBestEffort(default_five_qi));
        }
        Ok(Self {
            profiles,
            default_five_qi,
        })
    }

    pub fn profiles(&self) -> &[FiveQiProfile] {
        &self.profiles
    }

    pub fn default_profile(&self) -> &FiveQiProfile {
        self.get(self.default_five_qi)
            .expect("default profile checked at construction")
    }

    pub fn get(&self, five_qi: u8) -> Option<&FiveQiProfile> {
        self.profiles.iter().find(|p| p.five_qi == five_qi)
    }
}

impl Default for ProfileTable {
    fn default() -> Self {
        load_profile_table(DEFAULT_PROFILE_TABLE).expect("shipped profile table is valid")
    }
}

/// Parses and validates a TOML profile table document.
pub fn load_profile_table(document: &str) -> Result<ProfileTable, ProfileTableError> {
    let doc: ProfileTableDoc =
        toml::from_str(document).map_err(|e| ProfileTableError::Parse(e.to_string()))?;
    ProfileTable::new(doc.profile, doc.default)
}

/// Picks the least restrictive profile that still meets every stated
/// constraint.
///
/// An explicit 5QI short-circuits everything else. Otherwise a profile
/// qualifies when its delay budget is within `latency_ms` and its resource type
/// matches the GBR constraint; among qualifiers the largest delay budget wins,
/// then the lowest priority level, then the lowest 5QI.
pub fn map_requirement<'t>(
    req: &QosRequirement,
    table: &'t ProfileTable,
) -> Result<&'t FiveQiProfile, MappingError> {
    if let Some(five_qi) = req.explicit_five_qi {
        return table.get(five_qi).ok_or(MappingError::UnknownFiveQi(five_qi));
    }
    if req.wants_default() {
        return Ok(table.default_profile());
    }
    let constraint = req.gbr_constraint();
    table
        .profiles()
        .iter()
        .filter(|p| satisfies(p, req.latency_ms, constraint))
        .min_by(|a, b| {
            b.packet_delay_budget_ms
                .cmp(&a.packet_delay_budget_ms)
                .then(a.priority_level.cmp(&b.priority_level))
                .then(a.five_qi.cmp(&b.five_qi))
        })
        .ok_or(MappingError::Unmappable)
}

fn satisfies(p: &FiveQiProfile, latency_ms: Option<u32>, constraint: ResourceConstraint) -> bool {
    let latency_ok = latency_ms.is_none_or(|l| p.packet_delay_budget_ms <= l);
    let type_ok = match constraint {
        ResourceConstraint::Gbr => p.resource_type == ResourceType::Gbr,
        ResourceConstraint::NonGbr => p.resource_type == ResourceType::NonGbr,
        ResourceConstraint::Contradictory => false,
    };
    latency_ok && type_ok
}
