use serde::{Deserialize, Serialize};

use super::{ConceptAssignment, ConceptSpec};
use crate::error::{Error, Result};

/// Weight applied to an activated concept's energy.
pub const DEFAULT_POSITIVE_WEIGHT: f64 = 1.0;
/// Weight applied to a negated concept's energy.
pub const DEFAULT_NEGATIVE_WEIGHT: f64 = -0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionState {
    Active,
    Negated,
    Neutral,
}

/// How a negated concept enters the weighted energy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegationMode {
    /// Keep the target-value token and apply the negative weight.
    #[default]
    Weighted,
    /// Apply the positive weight to the complementary value's token.
    /// Binary concepts only.
    ValueFlip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionEntry {
    pub state: InterventionState,
    /// Value whose token conditions the energy. For negated concepts this
    /// is the value being negated.
    pub target: usize,
    /// Overrides the default weight for this concept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl InterventionEntry {
    pub const NEUTRAL: Self = Self { state: InterventionState::Neutral, target: 0, weight: None };
}

/// One weighted per-concept energy in an intervention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyTerm {
    pub concept: usize,
    pub token_value: usize,
    pub weight: f64,
}

/// Per-concept intervention states plus the activation and negation
/// weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    entries: Vec<InterventionEntry>,
    positive_weight: f64,
    negative_weight: f64,
    #[serde(default)]
    negation: NegationMode,
}

impl InterventionSpec {
    /// Every concept active at the corresponding value of `c`.
    pub fn all_active(c: &ConceptAssignment) -> Self {
        Self {
            entries: c
                .values()
                .iter()
                .map(|&v| InterventionEntry { state: InterventionState::Active, target: v, weight: None })
                .collect(),
            positive_weight: DEFAULT_POSITIVE_WEIGHT,
            negative_weight: DEFAULT_NEGATIVE_WEIGHT,
            negation: NegationMode::Weighted,
        }
    }

    pub fn builder(concepts: &ConceptSpec) -> InterventionBuilder<'_> {
        InterventionBuilder {
            concepts,
            items: Vec::new(),
            positive_weight: DEFAULT_POSITIVE_WEIGHT,
            negative_weight: DEFAULT_NEGATIVE_WEIGHT,
            negation: NegationMode::Weighted,
        }
    }

    pub fn entries(&self) -> &[InterventionEntry] {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> &InterventionEntry {
        &self.entries[k]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positive_weight(&self) -> f64 {
        self.positive_weight
    }

    pub fn negative_weight(&self) -> f64 {
        self.negative_weight
    }

    pub fn negation(&self) -> NegationMode {
        self.negation
    }

    pub fn is_all_neutral(&self) -> bool {
        self.entries.iter().all(|e| e.state == InterventionState::Neutral)
    }

    /// Copy of this spec with every effective weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.positive_weight *= factor;
        out.negative_weight *= factor;
        for e in &mut out.entries {
            e.weight = e.weight.map(|w| w * factor);
        }
        out
    }

    pub fn with_negation(mut self, mode: NegationMode) -> Self {
        self.negation = mode;
        self
    }

    /// The weighted energies to sum, in concept order. Neutral concepts
    /// contribute nothing.
    pub fn terms(&self) -> Vec<EnergyTerm> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(k, e)| match e.state {
                InterventionState::Neutral => None,
                InterventionState::Active => Some(EnergyTerm {
                    concept: k,
                    token_value: e.target,
                    weight: e.weight.unwrap_or(self.positive_weight),
                }),
                InterventionState::Negated => Some(match self.negation {
                    NegationMode::Weighted => EnergyTerm {
                        concept: k,
                        token_value: e.target,
                        weight: e.weight.unwrap_or(self.negative_weight),
                    },
                    NegationMode::ValueFlip => EnergyTerm {
                        concept: k,
                        token_value: e.target ^ 1,
                        weight: e.weight.unwrap_or(self.positive_weight),
                    },
                }),
            })
            .collect()
    }

    /// Checks the spec against a concept set.
    pub fn validate(&self, concepts: &ConceptSpec) -> Result<()> {
        if self.entries.len() != concepts.len() {
            return Err(Error::invalid(format!(
                "intervention covers {} concepts, model has {}",
                self.entries.len(),
                concepts.len()
            )));
        }
        for (k, e) in self.entries.iter().enumerate() {
            if e.state == InterventionState::Neutral {
                continue;
            }
            concepts.check_value(k, e.target)?;
            if let Some(w) = e.weight {
                if !w.is_finite() {
                    return Err(Error::invalid(format!("weight for `{}` is not finite", concepts.concept(k).name)));
                }
            }
            if e.state == InterventionState::Negated
                && self.negation == NegationMode::ValueFlip
                && concepts.cardinality(k) != 2
            {
                return Err(Error::invalid(format!(
                    "value-flip negation needs a binary concept, `{}` has {} values",
                    concepts.concept(k).name,
                    concepts.cardinality(k)
                )));
            }
        }
        if !(self.positive_weight.is_finite() && self.negative_weight.is_finite()) {
            return Err(Error::invalid("intervention weights must be finite"));
        }
        if self.is_all_neutral() {
            return Err(Error::AllNeutral);
        }
        Ok(())
    }
}

/// Collects activate/negate/neutral requests into an [`InterventionSpec`].
#[derive(Debug)]
pub struct InterventionBuilder<'a> {
    concepts: &'a ConceptSpec,
    items: Vec<(usize, InterventionEntry)>,
    positive_weight: f64,
    negative_weight: f64,
    negation: NegationMode,
}

impl InterventionBuilder<'_> {
    pub fn activate(self, k: usize, value: usize) -> Self {
        self.entry(k, InterventionEntry { state: InterventionState::Active, target: value, weight: None })
    }

    /// Negates the positive value (1) of concept `k`.
    pub fn negate(self, k: usize) -> Self {
        self.negate_value(k, 1)
    }

    pub fn negate_value(self, k: usize, value: usize) -> Self {
        self.entry(k, InterventionEntry { state: InterventionState::Negated, target: value, weight: None })
    }

    pub fn neutral(self, k: usize) -> Self {
        self.entry(k, InterventionEntry::NEUTRAL)
    }

    pub fn entry(mut self, k: usize, entry: InterventionEntry) -> Self {
        self.items.push((k, entry));
        self
    }

    pub fn weights(mut self, positive: f64, negative: f64) -> Self {
        self.positive_weight = positive;
        self.negative_weight = negative;
        self
    }

    pub fn negation(mut self, mode: NegationMode) -> Self {
        self.negation = mode;
        self
    }

    /// Fails on an empty request list, a repeated concept, or indices and
    /// values outside the concept set. Unlisted concepts are neutral.
    pub fn build(self) -> Result<InterventionSpec> {
        if self.items.is_empty() {
            return Err(Error::invalid("no interventions given"));
        }
        let mut entries = vec![None; self.concepts.len()];
        for (k, e) in self.items {
            self.concepts.check_concept(k)?;
            if entries[k].is_some() {
                return Err(Error::invalid(format!("concept `{}` listed twice", self.concepts.concept(k).name)));
            }
            entries[k] = Some(e);
        }
        let spec = InterventionSpec {
            entries: entries.into_iter().map(|e| e.unwrap_or(InterventionEntry::NEUTRAL)).collect(),
            positive_weight: self.positive_weight,
            negative_weight: self.negative_weight,
            negation: self.negation,
        };
        match spec.validate(self.concepts) {
            Ok(()) | Err(Error::AllNeutral) => Ok(spec),
            Err(e) => Err(e),
        }
    }
}
