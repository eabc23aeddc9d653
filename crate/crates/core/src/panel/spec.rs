//! Declarative covariate specification: which covariate enters which stage,
//! with which effect type and transform.
//!
//! The on-disk format is TOML:
//!
//! ```toml
//! [basis]
//! pspline_k = 10
//!
//! [[covariate]]
//! name = "milex"
//! stages = [1, 2, 3]
//! effect = "linear"
//! transform = "log"
//!
//! [[covariate]]
//! name = "mcw_st"
//! stages = [2, 3]
//! effect = "interaction"
//! with = "cap_dist"
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SpecError {
    #[error("invalid spec file: {0}")]
    Parse(String),

    #[error("covariate `{name}` appears twice in stage {stage}")]
    Duplicate { name: String, stage: u8 },

    #[error("`{name}` {effect} references `{other}`, which is not a stage-{stage} covariate")]
    DanglingReference {
        name: String,
        effect: &'static str,
        other: String,
        stage: u8,
    },

    #[error("stage must be 1, 2 or 3, got {0}")]
    BadStage(u8),

    #[error("unknown effect `{0}`")]
    UnknownEffect(String),

    #[error("effect `{0}` requires a `with` covariate")]
    MissingWith(String),

    #[error("unknown transform `{0}`")]
    UnknownTransform(String),

    #[error("basis setting {0}")]
    BadBasis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Country-month incidence.
    Country = 1,
    /// Cell-month incidence given country incidence.
    Cell = 2,
    /// Cell-month count given cell incidence.
    Count = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Country, Stage::Cell, Stage::Count];

    pub fn number(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Stage {
    type Error = SpecError;
    fn try_from(v: u8) -> Result<Self, SpecError> {
        match v {
            1 => Ok(Stage::Country),
            2 => Ok(Stage::Cell),
            3 => Ok(Stage::Count),
            other => Err(SpecError::BadStage(other)),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Identity,
    Log,
    Log1p,
    /// Marks a binary target; never valid on a covariate.
    LogitLinkTarget,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Log => "log",
            Transform::Log1p => "log1p",
            Transform::LogitLinkTarget => "logit-link-target",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SpecError> {
        match s {
            "identity" => Ok(Transform::Identity),
            "log" => Ok(Transform::Log),
            "log1p" => Ok(Transform::Log1p),
            "logit-link-target" => Ok(Transform::LogitLinkTarget),
            other => Err(SpecError::UnknownTransform(other.to_string())),
        }
    }

    /// Applies the transform to a raw covariate value.
    pub fn apply(self, name: &str, x: f64) -> Result<f64, super::PanelError> {
        let domain = |transform| super::PanelError::Domain {
            name: name.to_string(),
            transform,
            value: x,
        };
        match self {
            Transform::Identity => Ok(x),
            Transform::Log if x > 0.0 => Ok(x.ln()),
            Transform::Log => Err(domain("log")),
            Transform::Log1p if x >= 0.0 => Ok(x.ln_1p()),
            Transform::Log1p => Err(domain("log1p")),
            Transform::LogitLinkTarget => {
                Err(super::PanelError::TargetTransform("logit-link-target"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Effect {
    Linear,
    /// Month-of-year dummies, January as reference.
    DummySet,
    PSpline,
    TemporalTrend,
    /// Tensor-product smooth of this covariate (longitude) and another (latitude).
    TensorSpatial(String),
    RandomEffect,
    /// Product of this covariate with another one from the same stage.
    Interaction(String),
}

impl Effect {
    pub fn name(&self) -> &'static str {
        match self {
            Effect::Linear => "linear",
            Effect::DummySet => "dummy-set",
            Effect::PSpline => "p-spline",
            Effect::TemporalTrend => "temporal-trend",
            Effect::TensorSpatial(_) => "tensor-spatial",
            Effect::RandomEffect => "random-effect",
            Effect::Interaction(_) => "interaction",
        }
    }

    fn partner(&self) -> Option<&str> {
        match self {
            Effect::TensorSpatial(o) | Effect::Interaction(o) => Some(o),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovariateSpec {
    pub name: String,
    pub stages: BTreeSet<Stage>,
    pub effect: Effect,
    pub transform: Transform,
    /// Lag override in months. `None` uses the model step `s`.
    pub lag_months: Option<u32>,
}

impl CovariateSpec {
    pub fn new(name: &str, stages: &[u8], effect: Effect, transform: Transform) -> Self {
        Self {
            name: name.to_string(),
            stages: stages
                .iter()
                .map(|&s| Stage::try_from(s).expect("stage literal"))
                .collect(),
            effect,
            transform,
            lag_months: None,
        }
    }

    /// Term label, unique within a stage. Interactions are labelled `a:b`.
    pub fn label(&self) -> String {
        match &self.effect {
            Effect::Interaction(other) => format!("{}:{}", self.name, other),
            Effect::TensorSpatial(other) => format!("{}*{}", self.name, other),
            _ => self.name.clone(),
        }
    }
}

/// Basis dimensions shared by all smooth terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisSettings {
    pub pspline_k: usize,
    pub trend_k: usize,
    pub tensor_k: usize,
    pub degree: usize,
    pub penalty_order: usize,
}

impl Default for BasisSettings {
    fn default() -> Self {
        Self {
            pspline_k: 10,
            trend_k: 10,
            tensor_k: 5,
            degree: 3,
            penalty_order: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub basis: BasisSettings,
    pub covariates: Vec<CovariateSpec>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    #[serde(default)]
    basis: BasisSettings,
    #[serde(default, rename = "covariate")]
    covariates: Vec<RawCovariate>,
}

#[derive(Serialize, Deserialize)]
struct RawCovariate {
    name: String,
    stages: Vec<u8>,
    effect: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    with: Option<String>,
    #[serde(default = "default_transform")]
    transform: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lag_months: Option<u32>,
}

fn default_transform() -> String {
    "identity".to_string()
}

impl ModelSpec {
    pub fn new(basis: BasisSettings, covariates: Vec<CovariateSpec>) -> Result<Self, SpecError> {
        let spec = Self { basis, covariates };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let b = &self.basis;
        if b.degree < 1 {
            return Err(SpecError::BadBasis("degree must be >= 1".into()));
        }
        if b.penalty_order < 1 {
            return Err(SpecError::BadBasis("penalty_order must be >= 1".into()));
        }
        for (what, k) in [("pspline_k", b.pspline_k), ("tensor_k", b.tensor_k)] {
            if k <= b.degree.max(b.penalty_order) {
                return Err(SpecError::BadBasis(format!(
                    "{what}={k} must exceed degree and penalty order"
                )));
            }
        }
        if b.trend_k < 5 {
            return Err(SpecError::BadBasis("trend_k must be >= 5".into()));
        }
        for stage in Stage::ALL {
            let mut seen = BTreeSet::new();
            let in_stage: Vec<&CovariateSpec> = self.stage_terms(stage).collect();
            for c in &in_stage {
                if !seen.insert(c.label()) {
                    return Err(SpecError::Duplicate {
                        name: c.label(),
                        stage: stage.number(),
                    });
                }
            }
            for c in &in_stage {
                if let Effect::Interaction(other) = &c.effect {
                    let known = in_stage
                        .iter()
                        .any(|o| &o.name == other && !matches!(o.effect, Effect::Interaction(_)));
                    if !known {
                        return Err(SpecError::DanglingReference {
                            name: c.name.clone(),
                            effect: "interaction",
                            other: other.clone(),
                            stage: stage.number(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn stage_terms(&self, stage: Stage) -> impl Iterator<Item = &CovariateSpec> {
        self.covariates
            .iter()
            .filter(move |c| c.stages.contains(&stage))
    }

    /// Transform used for `name` in `stage` by its non-interaction entry.
    pub fn transform_of(&self, stage: Stage, name: &str) -> Option<Transform> {
        self.stage_terms(stage)
            .find(|c| c.name == name && !matches!(c.effect, Effect::Interaction(_)))
            .map(|c| c.transform)
    }

    /// Raw feature names the spec reads, including interaction and tensor partners.
    pub fn referenced_features(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for c in &self.covariates {
            match c.effect {
                Effect::DummySet | Effect::TemporalTrend | Effect::RandomEffect => {}
                _ => {
                    out.insert(c.name.clone());
                }
            }
            if let Some(p) = c.effect.partner() {
                out.insert(p.to_string());
            }
        }
        out
    }

    pub fn from_toml_str(s: &str) -> Result<Self, SpecError> {
        let raw: RawSpec = toml::from_str(s).map_err(|e| SpecError::Parse(e.to_string()))?;
        let mut covariates = Vec::with_capacity(raw.covariates.len());
        for r in raw.covariates {
            let stages = r
                .stages
                .iter()
                .map(|&s| Stage::try_from(s))
                .collect::<Result<BTreeSet<_>, _>>()?;
            let need_with = |with: Option<String>| with.ok_or_else(|| SpecError::MissingWith(r.effect.clone()));
            let effect = match r.effect.as_str() {
                "linear" => Effect::Linear,
                "dummy-set" => Effect::DummySet,
                "p-spline" => Effect::PSpline,
                "temporal-trend" => Effect::TemporalTrend,
                "tensor-spatial" => Effect::TensorSpatial(need_with(r.with.clone())?),
                "random-effect" => Effect::RandomEffect,
                "interaction" => Effect::Interaction(need_with(r.with.clone())?),
                other => return Err(SpecError::UnknownEffect(other.to_string())),
            };
            covariates.push(CovariateSpec {
                name: r.name,
                stages,
                effect,
                transform: Transform::parse(&r.transform)?,
                lag_months: r.lag_months,
            });
        }
        Self::new(raw.basis, covariates)
    }

    pub fn to_toml_string(&self) -> String {
        let raw = RawSpec {
            basis: self.basis,
            covariates: self
                .covariates
                .iter()
                .map(|c| RawCovariate {
                    name: c.name.clone(),
                    stages: c.stages.iter().map(|s| s.number()).collect(),
                    effect: c.effect.name().to_string(),
                    with: c.effect.partner().map(str::to_string),
                    transform: c.transform.name().to_string(),
                    lag_months: c.lag_months,
                })
                .collect(),
        };
        toml::to_string(&raw).expect("spec serializes")
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical TOML rendering; identifies the spec a model was fit with.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    /// Stage and covariate layout of the conflict-forecasting model.
    ///
    /// Event-history features (`*_any`, `sb_count`, `*_since`) are derived by
    /// the lagging step; in stage 1 they and `lon`/`lat` resolve to their
    /// country-level versions. `sb_count` enters stages 1 and 2 linearly and
    /// stage 3 as a P-spline.
    pub fn default_conflict() -> Self {
        use Effect::*;
        use Transform::*;
        let c = CovariateSpec::new;
        let covariates = vec![
            c("time", &[1, 2, 3], TemporalTrend, Identity),
            c("month", &[1, 2, 3], DummySet, Identity),
            c("sb_since", &[1, 2, 3], PSpline, Identity),
            c("os_since", &[1, 2, 3], PSpline, Identity),
            c("ns_since", &[1, 2, 3], PSpline, Identity),
            c("sb_any", &[1, 2, 3], Linear, Identity),
            c("os_any", &[1, 2, 3], Linear, Identity),
            c("ns_any", &[1, 2, 3], Linear, Identity),
            c("sb_count", &[1, 2], Linear, Log1p),
            c("sb_count", &[3], PSpline, Log1p),
            c("lon", &[1, 2, 3], TensorSpatial("lat".into()), Identity),
            c("country", &[1], RandomEffect, Identity),
            c("milex", &[1, 2, 3], Linear, Log),
            c("cap_dist", &[2, 3], Linear, Identity),
            c("mcw_st", &[1, 2, 3], Linear, Identity),
            c("mcw_lt", &[1, 2, 3], Linear, Identity),
            c("mcw_st", &[2, 3], Interaction("cap_dist".into()), Identity),
            c("mcw_lt", &[2, 3], Interaction("cap_dist".into()), Identity),
            c("polity", &[1, 2, 3], Linear, Identity),
            c("gdp_country", &[1], Linear, Log),
            c("pop_country", &[1], Linear, Log),
            c("gdp_cell", &[2, 3], Linear, Log),
            c("pop_cell", &[2, 3], Linear, Log),
            c("nightlights", &[2, 3], Linear, Identity),
            c("imr", &[2, 3], Linear, Identity),
        ];
        Self::new(BasisSettings::default(), covariates).expect("default spec is valid")
    }
}
