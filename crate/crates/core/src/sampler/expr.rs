//! Text form of an intervention: comma-separated terms, each
//! `+Name[=value]` (activate, value 1 by default) or `-Name[=value]`
//! (negate, value 1 by default). Unlisted concepts are neutral.

use crate::energymodel::{ConceptSpec, InterventionSpec, InterventionState};
use crate::error::{Error, Result};

pub fn parse_spec(expr: &str, concepts: &ConceptSpec) -> Result<InterventionSpec> {
    let mut b = InterventionSpec::builder(concepts);
    for raw in expr.split(',') {
        let term = raw.trim();
        let (negate, rest) = match term.chars().next() {
            Some('+') => (false, &term[1..]),
            Some('-') => (true, &term[1..]),
            Some(_) => return Err(Error::invalid(format!("term `{term}` must start with `+` or `-`"))),
            None => return Err(Error::invalid(format!("empty term in `{expr}`"))),
        };
        let (name, value) = match rest.split_once('=') {
            Some((n, v)) => {
                let v = v.trim().parse::<usize>().map_err(|_| Error::invalid(format!("bad value in term `{term}`")))?;
                (n.trim(), v)
            }
            None => (rest.trim(), 1),
        };
        let k = concepts.index_of(name)?;
        b = if negate { b.negate_value(k, value) } else { b.activate(k, value) };
    }
    b.build()
}

/// Canonical text of a spec in concept order; weight overrides are not
/// represented.
pub fn format_spec(spec: &InterventionSpec, concepts: &ConceptSpec) -> String {
    let mut terms = Vec::new();
    for (k, e) in spec.entries().iter().enumerate() {
        let sign = match e.state {
            InterventionState::Neutral => continue,
            InterventionState::Active => '+',
            InterventionState::Negated => '-',
        };
        let name = &concepts.concept(k).name;
        terms.push(if e.target == 1 { format!("{sign}{name}") } else { format!("{sign}{name}={}", e.target) });
    }
    terms.join(",")
}
