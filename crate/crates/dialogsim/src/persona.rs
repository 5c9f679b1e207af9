//! User persona sampling and the attitude state space.
//!
//! A persona spec is a list of attribute distributions (categorical,
//! boolean, or numeric range) plus an optional personality signifier pool
//! (e.g. the twelve Zodiac signs) and an optional block of
//! business-context attributes. Sampling is seeded and reproducible: the
//! same spec and seed always produce the same personas, and persona ids are
//! content digests so identical attribut maps still get distinct ids via a
//! trailing counter.

use std::fmt;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::short_digest;

/// The twelve Zodiac signs, the built-in pool for the `sign` group.
pub const ZODIAC_SIGNS: [&str; 12] = [
    "Aries",
    "Taurus",
    "Gemini",
    "Cancer",
    "Leo",
    "Virgo",
    "Libra",
    "Scorpio",
    "Sagittarius",
    "Capricorn",
    "Aquarius",
    "Pisces",
];

/// The sixteen MBTI types, the built-in pool for the `mbti` group.
pub const MBTI_TYPES: [&str; 16] = [
    "INTJ", "INTP", "ENTJ", "ENTP", "INFJ", "INFP", "ENFJ", "ENFP", "ISTJ", "ISFJ", "ESTJ",
    "ESFJ", "ISTP", "ISFP", "ESTP", "ESFP",
];

/// Which family of persona a spec describes. The group determines the
/// structural invariants checked by [`PersonaSpec::validate`] and is carried
/// on every sampled persona so downstream reports can be grouped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaGroup {
    /// Demographics only.
    Base,
    /// Demographics plus a Zodiac-style signifier.
    Sign,
    /// Demographics plus an MBTI-style signifier.
    Mbti,
    /// Demographics plus signifier plus business-context attributes.
    Busi,
    /// Anything goes; the spec is taken at face value.
    Custom,
}

impl PersonaGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            PersonaGroup::Base => "base",
            PersonaGroup::Sign => "sign",
            PersonaGroup::Mbti => "mbti",
            PersonaGroup::Busi => "busi",
            PersonaGroup::Custom => "custom",
        }
    }
}

impl fmt::Display for PersonaGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A sampled attribute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Flag(bool),
    Number(f64),
    Text(String),
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Flag(b) => write!(f, "{b}"),
            AttrValue::Number(n) => {
                if n.fract() == 0.0 && n.abs() < 1e15 {
                    write!(f, "{}", *n as i64)
                } else {
                    write!(f, "{n}")
                }
            }
            AttrValue::Text(s) => f.write_str(s),
        }
    }
}

/// One weighted candidate of a categorical distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub value: AttrValue,
    pub p: f64,
}

/// The three supported distribution kinds.
#[derive(Debug, Clone)]
pub enum Distribution {
    /// Weighted discrete candidates; probabilities must sum to 1.
    Categorical { candidates: Vec<Candidate> },
    /// Bernoulli draw with an explicit prior.
    Boolean { p_true: f64 },
    /// Uniform draw over `lower..=upper` on a grid of `step`.
    NumericRange { lower: f64, upper: f64, step: f64 },
}

/// A named attribute with its sampling distribution.
#[derive(Debug, Clone)]
pub struct AttributeDistribution {
    pub name: String,
    pub dist: Distribution,
}

/// Tolerance for the "probabilities sum to one" check.
const PROB_SUM_EPSILON: f64 = 1e-9;

impl AttributeDistribution {
    pub fn validate(&self) -> Result<()> {
        match &self.dist {
            Distribution::Categorical { candidates } => {
                if candidates.is_empty() {
                    return Err(Error::InvalidPersonaSpec {
                        group: String::new(),
                        message: format!("attribute `{}` has no candidates", self.name),
                    });
                }
                let mut sum = 0.0;
                for c in candidates {
                    if c.p < 0.0 {
                        return Err(Error::NegativeProbability {
                            attribute: self.name.clone(),
                            value: c.value.to_string(),
                            p: c.p,
                        });
                    }
                    sum += c.p;
                }
                if (sum - 1.0).abs() > PROB_SUM_EPSILON {
                    return Err(Error::ProbabilitySum {
                        attribute: self.name.clone(),
                        sum,
                    });
                }
            }
            Distribution::Boolean { p_true } => {
                if !(0.0..=1.0).contains(p_true) {
                    return Err(Error::ProbabilitySum {
                        attribute: self.name.clone(),
                        sum: *p_true,
                    });
                }
            }
            Distribution::NumericRange { lower, upper, step } => {
                if lower > upper || *step <= 0.0 || !lower.is_finite() || !upper.is_finite() {
                    return Err(Error::InvalidRange {
                        attribute: self.name.clone(),
                        lower: *lower,
                        upper: *upper,
                        step: *step,
                    });
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> AttrValue {
        match &self.dist {
            Distribution::Categorical { candidates } => {
                let roll: f64 = rng.random();
                let mut acc = 0.0;
                for c in candidates {
                    acc += c.p;
                    if roll < acc {
                        return c.value.clone();
                    }
                }
                // Guard against the roll landing on the residual rounding
                // sliver above the accumulated sum.
                candidates.last().expect("validated non-empty").value.clone()
            }
            Distribution::Boolean { p_true } => {
                let roll: f64 = rng.random();
                AttrValue::Flag(roll < *p_true)
            }
            Distribution::NumericRange { lower, upper, step } => {
                let steps = ((upper - lower) / step).floor() as u64;
                let k = rng.random_range(0..=steps);
                AttrValue::Number(lower + step * k as f64)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Serde representation of specs
// ---------------------------------------------------------------------------

/// Raw attribute entry as it appears in a spec file. The `type` tag is kept
/// as a plain string so an unknown kind can be reported by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawAttribute {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    candidates: Option<Vec<Candidate>>,
    /// Boolean prior keyed by `"true"` / `"false"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior: Option<IndexMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<f64>,
}

impl RawAttribute {
    fn into_typed(self, name: &str) -> Result<AttributeDistribution> {
        let dist = match self.kind.as_str() {
            "categorical" => Distribution::Categorical {
                candidates: self.candidates.unwrap_or_default(),
            },
            "boolean" => {
                let mut p_true = 0.5;
                if let Some(prior) = &self.prior {
                    let mut sum = 0.0;
                    for (key, p) in prior {
                        match key.as_str() {
                            "true" => p_true = *p,
                            "false" => {}
                            other => {
                                return Err(Error::InvalidPersonaSpec {
                                    group: String::new(),
                                    message: format!(
                                        "attribute `{name}`: boolean prior key `{other}`"
                                    ),
                                })
                            }
                        }
                        sum += p;
                    }
                    if (sum - 1.0).abs() > PROB_SUM_EPSILON {
                        return Err(Error::ProbabilitySum {
                            attribute: name.to_string(),
                            sum,
                        });
                    }
                }
                Distribution::Boolean { p_true }
            }
            "numeric_range" => Distribution::NumericRange {
                lower: self.lower.unwrap_or(f64::NAN),
                upper: self.upper.unwrap_or(f64::NAN),
                step: self.step.unwrap_or(1.0),
            },
            other => {
                return Err(Error::UnknownKind {
                    attribute: name.to_string(),
                    kind: other.to_string(),
                })
            }
        };
        Ok(AttributeDistribution {
            name: name.to_string(),
            dist,
        })
    }
}

fn to_raw(attr: &AttributeDistribution) -> RawAttribute {
    match &attr.dist {
        Distribution::Categorical { candidates } => RawAttribute {
            kind: "categorical".into(),
            candidates: Some(candidates.clone()),
            prior: None,
            lower: None,
            upper: None,
            step: None,
        },
        Distribution::Boolean { p_true } => {
            let mut prior = IndexMap::new();
            prior.insert("true".to_string(), *p_true);
            prior.insert("false".to_string(), 1.0 - *p_true);
            RawAttribute {
                kind: "boolean".into(),
                candidates: None,
                prior: Some(prior),
                lower: None,
                upper: None,
                step: None,
            }
        }
        Distribution::NumericRange { lower, upper, step } => RawAttribute {
            kind: "numeric_range".into(),
            candidates: None,
            prior: None,
            lower: Some(*lower),
            upper: Some(*upper),
            step: Some(*step),
        },
    }
}

/// Signifier pool as written in a spec file: either a named built-in pool
/// (`"zodiac"`, `"mbti"`) or an explicit list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RawPool {
    Named(String),
    Explicit(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSpec {
    group: PersonaGroup,
    demographics: IndexMap<String, RawAttribute>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    signifier_pool: Option<RawPool>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    business: IndexMap<String, RawAttribute>,
}

/// A validated persona spec.
#[derive(Debug, Clone)]
pub struct PersonaSpec {
    pub group: PersonaGroup,
    pub demographics: Vec<AttributeDistribution>,
    pub signifier_pool: Vec<String>,
    pub business: Vec<AttributeDistribution>,
}

impl PersonaSpec {
    /// Parse a spec from JSON text and validate it.
    pub fn from_json(text: &str, what: &str) -> Result<Self> {
        let raw: RawSpec = serde_json::from_str(text).map_err(|e| Error::parse(what, e))?;
        let mut demographics = Vec::with_capacity(raw.demographics.len());
        for (name, attr) in raw.demographics {
            demographics.push(attr.into_typed(&name)?);
        }
        let mut business = Vec::with_capacity(raw.business.len());
        for (name, attr) in raw.business {
            business.push(attr.into_typed(&name)?);
        }
        let signifier_pool = match raw.signifier_pool {
            None => Vec::new(),
            Some(RawPool::Named(name)) => match name.as_str() {
                "zodiac" => ZODIAC_SIGNS.iter().map(|s| s.to_string()).collect(),
                "mbti" => MBTI_TYPES.iter().map(|s| s.to_string()).collect(),
                other => {
                    return Err(Error::InvalidPersonaSpec {
                        group: raw.group.to_string(),
                        message: format!("unknown named signifier pool `{other}`"),
                    })
                }
            },
            Some(RawPool::Explicit(pool)) => pool,
        };
        let spec = PersonaSpec {
            group: raw.group,
            demographics,
            signifier_pool,
            business,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Load a spec from a JSON file.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// One of the four shipped specs by group name.
    pub fn builtin(group: PersonaGroup) -> Self {
        let text = match group {
            PersonaGroup::Base => include_str!("../assets/personas/base.json"),
            PersonaGroup::Sign => include_str!("../assets/personas/sign.json"),
            PersonaGroup::Mbti => include_str!("../assets/personas/mbti.json"),
            PersonaGroup::Busi => include_str!("../assets/personas/busi.json"),
            PersonaGroup::Custom => include_str!("../assets/personas/base.json"),
        };
        Self::from_json(text, "builtin persona spec").expect("builtin specs are valid")
    }

    /// Serialize back to the on-disk JSON shape.
    pub fn to_json(&self) -> String {
        let raw = RawSpec {
            group: self.group,
            demographics: self
                .demographics
                .iter()
                .map(|a| (a.name.clone(), to_raw(a)))
                .collect(),
            signifier_pool: if self.signifier_pool.is_empty() {
                None
            } else {
                Some(RawPool::Explicit(self.signifier_pool.clone()))
            },
            business: self
                .business
                .iter()
                .map(|a| (a.name.clone(), to_raw(a)))
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("spec serializes")
    }

    /// Check distribution well-formedness and the per-group structural
    /// invariants (signifier pool presence, business block presence).
    pub fn validate(&self) -> Result<()> {
        if self.demographics.is_empty() {
            return Err(Error::InvalidPersonaSpec {
                group: self.group.to_string(),
                message: "no demographic attributes".into(),
            });
        }
        for attr in self.demographics.iter().chain(self.business.iter()) {
            attr.validate()?;
        }
        let pool = !self.signifier_pool.is_empty();
        let business = !self.business.is_empty();
        let fail = |message: &str| {
            Err(Error::InvalidPersonaSpec {
                group: self.group.to_string(),
                message: message.into(),
            })
        };
        match self.group {
            PersonaGroup::Base => {
                if pool {
                    return fail("base group must not define a signifier pool");
                }
                if business {
                    return fail("base group must not define business attributes");
                }
            }
            PersonaGroup::Sign | PersonaGroup::Mbti => {
                if !pool {
                    return fail("signifier group requires a non-empty signifier pool");
                }
            }
            PersonaGroup::Busi => {
                if !pool {
                    return fail("busi group requires a non-empty signifier pool");
                }
                if !business {
                    return fail("busi group requires business attributes");
                }
            }
            PersonaGroup::Custom => {}
        }
        Ok(())
    }

    /// A copy of this spec reduced to the demographics-only `base` form.
    /// Used when a richer group needs a plain-persona baseline run.
    pub fn to_base(&self) -> PersonaSpec {
        PersonaSpec {
            group: PersonaGroup::Base,
            demographics: self.demographics.clone(),
            signifier_pool: Vec::new(),
            business: Vec::new(),
        }
    }
}

/// One sampled persona.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserPersona {
    /// Content digest of the sampled values plus a counter, so duplicate
    /// attribute maps still get distinct ids.
    pub id: String,
    pub group: PersonaGroup,
    /// All sampled attributes (demographics first, then business), in spec
    /// order.
    pub attributes: IndexMap<String, AttrValue>,
    /// Names of the attributes that came from the business block, so
    /// rendering can split them out of the demographic profile.
    pub business_keys: Vec<String>,
    /// Personality signifier (Zodiac sign, MBTI type, ...), if the spec has
    /// a pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signifier: Option<String>,
    /// Master seed of the sampling call that produced this persona.
    pub seed: u64,
}

/// Draw `n` personas from `spec`, deterministically in `seed`.
pub fn sample_personas(spec: &PersonaSpec, n: usize, seed: u64) -> Result<Vec<UserPersona>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput {
            what: "persona count".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut personas = Vec::with_capacity(n);
    for i in 0..n {
        let mut attributes = IndexMap::new();
        for attr in &spec.demographics {
            attributes.insert(attr.name.clone(), attr.sample(&mut rng));
        }
        let mut business_keys = Vec::with_capacity(spec.business.len());
        for attr in &spec.business {
            attributes.insert(attr.name.clone(), attr.sample(&mut rng));
            business_keys.push(attr.name.clone());
        }
        let signifier = if spec.signifier_pool.is_empty() {
            None
        } else {
            let idx = rng.random_range(0..spec.signifier_pool.len());
            Some(spec.signifier_pool[idx].clone())
        };
        let fingerprint = serde_json::to_string(&(&attributes, &signifier, i))
            .expect("persona values serialize");
        personas.push(UserPersona {
            id: format!("u-{}-{i:04}", short_digest(fingerprint.as_bytes())),
            group: spec.group,
            attributes,
            business_keys,
            signifier,
            seed,
        });
    }
    Ok(personas)
}

// ---------------------------------------------------------------------------
// Attitude state space
// ---------------------------------------------------------------------------

/// Decision-funnel stage an attitude belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunnelStage {
    Attention,
    Interest,
    Desire,
    Action,
}

impl FunnelStage {
    pub const ALL: [FunnelStage; 4] = [
        FunnelStage::Attention,
        FunnelStage::Interest,
        FunnelStage::Desire,
        FunnelStage::Action,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FunnelStage::Attention => "attention",
            FunnelStage::Interest => "interest",
            FunnelStage::Desire => "desire",
            FunnelStage::Action => "action",
        }
    }

    /// Attitude polarity group this stage corresponds to.
    pub fn group_label(&self) -> &'static str {
        match self {
            FunnelStage::Attention => "Negative",
            FunnelStage::Interest => "Neutral",
            FunnelStage::Desire => "Positive",
            FunnelStage::Action => "Acceptance",
        }
    }
}

impl fmt::Display for FunnelStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One attitude state: a funnel stage plus a display label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttitudeState {
    /// Stable slug, `<stage>.<label_snake>`.
    pub id: String,
    pub stage: FunnelStage,
    pub label: String,
}

fn state_id(stage: FunnelStage, label: &str) -> String {
    let slug: String = label
        .trim()
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '_' })
        .collect();
    format!("{}.{slug}", stage.as_str())
}

/// An ordered, named set of attitude states. Indices into this set are what
/// attitude chains and transition matrices store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateSpace {
    pub name: String,
    states: Vec<AttitudeState>,
}

impl StateSpace {
    /// Build a space from `(stage, label)` pairs. Requires at least two
    /// states and unique `(stage, label)` combinations.
    pub fn new(name: impl Into<String>, pairs: Vec<(FunnelStage, String)>) -> Result<Self> {
        let name = name.into();
        if pairs.len() < 2 {
            return Err(Error::InvalidStateSpace {
                space: name,
                message: "need at least two states".into(),
            });
        }
        let mut states = Vec::with_capacity(pairs.len());
        let mut seen = std::collections::HashSet::new();
        for (stage, label) in pairs {
            let id = state_id(stage, &label);
            if !seen.insert(id.clone()) {
                return Err(Error::InvalidStateSpace {
                    space: name,
                    message: format!("duplicate state `{id}`"),
                });
            }
            states.push(AttitudeState { id, stage, label });
        }
        Ok(StateSpace { name, states })
    }

    /// Load a space from a JSON file of the form
    /// `{"name": "...", "states": [{"stage": "attention", "label": "Refusal"}, ...]}`.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct RawState {
            stage: FunnelStage,
            label: String,
        }
        #[derive(Deserialize)]
        struct RawSpace {
            name: String,
            states: Vec<RawState>,
        }
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let raw: RawSpace =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        StateSpace::new(raw.name, raw.states.into_iter().map(|s| (s.stage, s.label)).collect())
    }

    pub fn states(&self) -> &[AttitudeState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Index of the state with this display label (trimmed,
    /// case-insensitive). Returns `None` for labels outside the space.
    pub fn index_of_label(&self, label: &str) -> Option<usize> {
        let needle = label.trim().to_lowercase();
        self.states
            .iter()
            .position(|s| s.label.to_lowercase() == needle)
    }

    /// Display labels in index order.
    pub fn labels(&self) -> Vec<String> {
        self.states.iter().map(|s| s.label.clone()).collect()
    }

    /// Human-readable block describing the space, grouped by funnel stage,
    /// for injection into classifier prompts.
    pub fn description_block(&self) -> String {
        let mut out = String::new();
        for stage in FunnelStage::ALL {
            let labels: Vec<&str> = self
                .states
                .iter()
                .filter(|s| s.stage == stage)
                .map(|s| s.label.as_str())
                .collect();
            if labels.is_empty() {
                continue;
            }
            out.push_str(&format!(
                "{} ({} stage): {}\n",
                stage.group_label(),
                stage,
                labels.join(", ")
            ));
        }
        let all: Vec<&str> = self.states.iter().map(|s| s.label.as_str()).collect();
        out.push_str(&format!("Allowed attitude labels: {}\n", all.join(" | ")));
        out
    }
}

/// The default sixteen-state attitude space: four funnel stages crossed
/// with four attitudes each, ordered from outright refusal to acceptance.
/// `Refusal` is index 0.
pub fn default_state_space() -> StateSpace {
    use FunnelStage::*;
    let pairs = [
        (Attention, "Refusal"),
        (Attention, "Resistance"),
        (Attention, "Disinterest"),
        (Attention, "Doubt"),
        (Interest, "Indifference"),
        (Interest, "Cautious"),
        (Interest, "Hesitant"),
        (Interest, "Weighing Options"),
        (Desire, "Interested"),
        (Desire, "Attention"),
        (Desire, "Consideration"),
        (Desire, "Seeking Value"),
        (Action, "Active"),
        (Action, "Cooperative"),
        (Action, "Satisfied"),
        (Action, "Acceptance"),
    ];
    StateSpace::new(
        "funnel16",
        pairs.iter().map(|(st, l)| (*st, l.to_string())).collect(),
    )
    .expect("default space is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn health_status_spec() -> &'static str {
        r#"{
          "group": "custom",
          "demographics": {
            "health_status": {
              "type": "categorical",
              "candidates": [
                {"value": "Hypertension", "p": 0.10},
                {"value": "Diabetes", "p": 0.05},
                {"value": "Heart Disease", "p": 0.05},
                {"value": "Asthma", "p": 0.05},
                {"value": "Cancer Survivor", "p": 0.05},
                {"value": "Minor Chronic Condition", "p": 0.30},
                {"value": "Healthy", "p": 0.40}
              ]
            },
            "purchased_insurance_before": {
              "type": "boolean",
              "prior": {"true": 0.5, "false": 0.5}
            }
          }
        }"#
    }

    #[test]
    fn weighted_attribute_spec_parses() {
        let spec = PersonaSpec::from_json(health_status_spec(), "test").unwrap();
        assert_eq!(spec.demographics.len(), 2);
        match &spec.demographics[0].dist {
            Distribution::Categorical { candidates } => {
                assert_eq!(candidates.len(), 7);
                assert_eq!(candidates[6].p, 0.40);
            }
            other => panic!("expected categorical, got {other:?}"),
        }
    }

    #[test]
    fn point_mass_is_valid() {
        let attr = AttributeDistribution {
            name: "fixed".into(),
            dist: Distribution::Categorical {
                candidates: vec![Candidate {
                    value: AttrValue::Text("only".into()),
                    p: 1.0,
                }],
            },
        };
        attr.validate().unwrap();
    }

    #[test]
    fn bad_probability_sum_is_rejected_by_name() {
        let text = r#"{
          "group": "custom",
          "demographics": {
            "mood": {"type": "categorical", "candidates": [
              {"value": "happy", "p": 0.5}, {"value": "sad", "p": 0.45}
            ]}
          }
        }"#;
        let err = PersonaSpec::from_json(text, "test").unwrap_err();
        match err {
            Error::ProbabilitySum { attribute, sum } => {
                assert_eq!(attribute, "mood");
                assert!((sum - 0.95).abs() < 1e-12);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_is_rejected_by_name() {
        let text = r#"{
          "group": "custom",
          "demographics": {"x": {"type": "gaussian"}}
        }"#;
        let err = PersonaSpec::from_json(text, "test").unwrap_err();
        match err {
            Error::UnknownKind { attribute, kind } => {
                assert_eq!(attribute, "x");
                assert_eq!(kind, "gaussian");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn group_invariants_are_enforced() {
        // base must not carry a pool
        let text = r#"{
          "group": "base",
          "demographics": {"age": {"type": "numeric_range", "lower": 20, "upper": 30, "step": 1}},
          "signifier_pool": ["Aries"]
        }"#;
        assert!(PersonaSpec::from_json(text, "test").is_err());

        // busi requires business attributes
        let text = r#"{
          "group": "busi",
          "demographics": {"age": {"type": "numeric_range", "lower": 20, "upper": 30, "step": 1}},
          "signifier_pool": "zodiac"
        }"#;
        assert!(PersonaSpec::from_json(text, "test").is_err());
    }

    #[test]
    fn builtin_specs_validate_and_sample() {
        for group in [
            PersonaGroup::Base,
            PersonaGroup::Sign,
            PersonaGroup::Mbti,
            PersonaGroup::Busi,
        ] {
            let spec = PersonaSpec::builtin(group);
            let personas = sample_personas(&spec, 3, 7).unwrap();
            assert_eq!(personas.len(), 3);
            for p in &personas {
                assert_eq!(p.group, group);
                match group {
                    PersonaGroup::Base => assert!(p.signifier.is_none()),
                    PersonaGroup::Sign => {
                        assert!(ZODIAC_SIGNS.contains(&p.signifier.as_deref().unwrap()))
                    }
                    PersonaGroup::Mbti => {
                        assert!(MBTI_TYPES.contains(&p.signifier.as_deref().unwrap()))
                    }
                    PersonaGroup::Busi => {
                        assert!(p.signifier.is_some());
                        assert!(!p.business_keys.is_empty());
                        for key in &p.business_keys {
                            assert!(p.attributes.contains_key(key));
                        }
                    }
                    PersonaGroup::Custom => {}
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let spec = PersonaSpec::builtin(PersonaGroup::Busi);
        let a = sample_personas(&spec, 10, 42).unwrap();
        let b = sample_personas(&spec, 10, 42).unwrap();
        let c = sample_personas(&spec, 10, 43).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn duplicate_value_maps_get_distinct_ids() {
        let text = r#"{
          "group": "custom",
          "demographics": {
            "fixed": {"type": "categorical", "candidates": [{"value": "only", "p": 1.0}]}
          }
        }"#;
        let spec = PersonaSpec::from_json(text, "test").unwrap();
        let personas = sample_personas(&spec, 3, 0).unwrap();
        assert_eq!(personas[0].attributes, personas[1].attributes);
        let ids: std::collections::HashSet<_> = personas.iter().map(|p| &p.id).collect();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn sampled_frequencies_track_weights() {
        // Small-scale smoke check; the large-sample version lives in the
        // acceptance suite.
        let spec = PersonaSpec::from_json(health_status_spec(), "test").unwrap();
        let personas = sample_personas(&spec, 5000, 9).unwrap();
        let healthy = personas
            .iter()
            .filter(|p| p.attributes["health_status"] == AttrValue::Text("Healthy".into()))
            .count() as f64
            / 5000.0;
        assert!((healthy - 0.40).abs() < 0.03, "healthy share {healthy}");
    }

    #[test]
    fn numeric_range_respects_bounds_and_grid() {
        let attr = AttributeDistribution {
            name: "age".into(),
            dist: Distribution::NumericRange {
                lower: 20.0,
                upper: 30.0,
                step: 2.0,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            match attr.sample(&mut rng) {
                AttrValue::Number(n) => {
                    assert!((20.0..=30.0).contains(&n));
                    assert_eq!((n - 20.0) % 2.0, 0.0);
                }
                other => panic!("expected number, got {other:?}"),
            }
        }
    }

    #[test]
    fn default_space_has_sixteen_states_with_refusal_first() {
        let space = default_state_space();
        assert_eq!(space.len(), 16);
        assert_eq!(space.index_of_label("Refusal"), Some(0));
        assert_eq!(space.index_of_label("refusal"), Some(0));
        assert_eq!(space.index_of_label("Acceptance"), Some(15));
        assert_eq!(space.index_of_label("Euphoric"), None);
        for stage in FunnelStage::ALL {
            let count = space.states().iter().filter(|s| s.stage == stage).count();
            assert_eq!(count, 4, "stage {stage} should hold four states");
        }
        // Stage-scoped labels keep ids unique even when a label repeats
        // across stages ("Attention" is both a stage and a Desire label).
        assert_eq!(space.states()[9].id, "desire.attention");
    }

    #[test]
    fn tiny_spaces_and_duplicates_are_rejected() {
        assert!(StateSpace::new("one", vec![(FunnelStage::Action, "Yes".into())]).is_err());
        assert!(StateSpace::new(
            "dup",
            vec![
                (FunnelStage::Action, "Yes".into()),
                (FunnelStage::Action, "yes".into()),
            ]
        )
        .is_err());
    }

    #[test]
    fn description_block_lists_every_label() {
        let space = default_state_space();
        let block = space.description_block();
        for state in space.states() {
            assert!(block.contains(state.label.as_str()), "{}", state.label);
        }
        assert!(block.contains("Negative"));
        assert!(block.contains("Acceptance"));
    }
}
