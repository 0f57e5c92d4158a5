use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    pub cardinality: usize,
}

/// The named concept set and the number of values each concept takes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Concept>", into = "Vec<Concept>")]
pub struct ConceptSpec {
    concepts: Vec<Concept>,
    offsets: Vec<usize>,
}

impl TryFrom<Vec<Concept>> for ConceptSpec {
    type Error = Error;

    fn try_from(concepts: Vec<Concept>) -> Result<Self> {
        Self::new(concepts)
    }
}

impl From<ConceptSpec> for Vec<Concept> {
    fn from(spec: ConceptSpec) -> Self {
        spec.concepts
    }
}

impl ConceptSpec {
    pub fn new(concepts: Vec<Concept>) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::invalid("a concept spec needs at least one concept"));
        }
        for (i, c) in concepts.iter().enumerate() {
            if c.cardinality < 2 {
                return Err(Error::invalid(format!("concept `{}` has cardinality {} (< 2)", c.name, c.cardinality)));
            }
            if c.name.is_empty() || c.name.contains([',', '=', '+', '-']) || c.name.trim() != c.name {
                return Err(Error::invalid(format!("concept name `{}` is not a valid identifier", c.name)));
            }
            if concepts[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::invalid(format!("duplicate concept name `{}`", c.name)));
            }
        }
        let offsets = concepts
            .iter()
            .scan(0, |acc, c| {
                let o = *acc;
                *acc += c.cardinality;
                Some(o)
            })
            .collect();
        Ok(Self { concepts, offsets })
    }

    /// Binary concepts with the given names.
    pub fn binary<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(names.iter().map(|n| Concept { name: n.as_ref().to_string(), cardinality: 2 }).collect())
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn concept(&self, k: usize) -> &Concept {
        &self.concepts[k]
    }

    pub fn cardinality(&self, k: usize) -> usize {
        self.concepts[k].cardinality
    }

    pub fn names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownConcept { name: name.to_string(), valid: self.names() })
    }

    /// Row of the `(concept, value)` pair in the token embedding table.
    pub fn token(&self, k: usize, value: usize) -> usize {
        self.offsets[k] + value
    }

    /// Number of `(concept, value)` tokens, Σ_k n_k.
    pub fn total_values(&self) -> usize {
        self.concepts.iter().map(|c| c.cardinality).sum()
    }

    pub fn check_concept(&self, k: usize) -> Result<()> {
        if k >= self.len() {
            return Err(Error::invalid(format!("concept index {k} out of range for {} concepts", self.len())));
        }
        Ok(())
    }

    pub fn check_value(&self, k: usize, value: usize) -> Result<()> {
        self.check_concept(k)?;
        if value >= self.cardinality(k) {
            return Err(Error::invalid(format!(
                "value {value} out of range for concept `{}` with {} values",
                self.concepts[k].name,
                self.cardinality(k)
            )));
        }
        Ok(())
    }

    pub fn check_assignment(&self, c: &ConceptAssignment) -> Result<()> {
        if c.len() != self.len() {
            return Err(Error::invalid(format!("assignment has {} values for {} concepts", c.len(), self.len())));
        }
        c.values().iter().enumerate().try_for_each(|(k, &v)| self.check_value(k, v))
    }
}

/// One value per concept.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptAssignment(Vec<usize>);

impl ConceptAssignment {
    pub fn new(values: Vec<usize>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn get(&self, k: usize) -> usize {
        self.0[k]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<usize>> for ConceptAssignment {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}
