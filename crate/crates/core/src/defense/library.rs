//! Concept banks and importance scores for every class, loaded together.

use std::collections::BTreeMap;
use std::path::Path;

use crate::concepts::ConceptBank;
use crate::error::{Error, Result};
use crate::importance::{ImportanceScores, NnlsSolver};

#[derive(Debug, Clone)]
pub struct ClassConcepts {
    pub bank: ConceptBank,
    pub scores: ImportanceScores,
    pub solver: NnlsSolver,
}

#[derive(Debug, Clone, Default)]
pub struct ConceptLibrary {
    classes: BTreeMap<usize, ClassConcepts>,
}

impl ConceptLibrary {
    pub fn new(banks: Vec<ConceptBank>, scores: Vec<ImportanceScores>) -> Result<Self> {
        let mut by_class: BTreeMap<usize, ImportanceScores> =
            scores.into_iter().map(|s| (s.class_id, s)).collect();
        let mut classes = BTreeMap::new();
        for bank in banks {
            let class = bank.class_id();
            let scores = by_class
                .remove(&class)
                .ok_or_else(|| Error::Config(format!("class {class} has a concept bank but no scores")))?;
            if scores.ranking.len() != bank.k() {
                return Err(Error::Config(format!(
                    "class {class}: {} scores for {} concepts",
                    scores.ranking.len(),
                    bank.k()
                )));
            }
            let solver = bank.solver();
            classes.insert(class, ClassConcepts { bank, scores, solver });
        }
        if let Some(class) = by_class.keys().next() {
            return Err(Error::Config(format!("class {class} has scores but no concept bank")));
        }
        Ok(ConceptLibrary { classes })
    }

    /// Reads `bank_*.json` and `scores_*.json` for classes `0..num_classes`.
    pub fn load(banks_dir: &Path, scores_dir: &Path, num_classes: usize) -> Result<Self> {
        let mut banks = Vec::new();
        let mut scores = Vec::new();
        for class in 0..num_classes {
            banks.push(ConceptBank::load(&banks_dir.join(ConceptBank::file_name(class)))?);
            scores.push(ImportanceScores::load(&scores_dir.join(ImportanceScores::file_name(class)))?);
        }
        Self::new(banks, scores)
    }

    pub fn get(&self, class: usize) -> Result<&ClassConcepts> {
        self.classes
            .get(&class)
            .ok_or_else(|| Error::Config(format!("no concept bank or scores for class {class}")))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Smallest bank size across classes.
    pub fn min_k(&self) -> usize {
        self.classes.values().map(|c| c.bank.k()).min().unwrap_or(0)
    }
}
