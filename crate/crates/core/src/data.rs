//! Bundled assets.

use crate::error::Result;
use crate::pairminer::{parse_term_groups, parse_templates, Template, TermGroup};

pub const GENDER_PAIRS: &str = include_str!("../data/gender_pairs.txt");
pub const TEMPLATES: &str = include_str!("../data/templates.txt");
pub const OCCUPATION_RATINGS: &str = include_str!("../data/occupation_ratings.csv");
/// About 500 hand-style sentences for tests and smoke runs.
pub const MINI_CORPUS: &str = include_str!("../data/mini_corpus.txt");
/// Pairs mined from [`MINI_CORPUS`] with the bundled term pairs, computed
/// independently of the miner.
pub const MINI_CORPUS_PAIRS: &str = include_str!("../data/mini_corpus_pairs.jsonl");

pub fn gender_groups() -> Vec<TermGroup> {
    parse_term_groups(GENDER_PAIRS).expect("bundled term pairs are valid")
}

pub fn templates() -> Vec<Template> {
    parse_templates(TEMPLATES).expect("bundled templates are valid")
}

pub fn mini_corpus() -> Vec<String> {
    MINI_CORPUS.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

pub fn check() -> Result<()> {
    parse_term_groups(GENDER_PAIRS)?;
    parse_templates(TEMPLATES)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_lists_have_expected_sizes() {
        assert_eq!(gender_groups().len(), 11);
        assert!(gender_groups().iter().all(|g| g.len() == 2));
        assert_eq!(templates().len(), 12);
        assert!((450..=550).contains(&mini_corpus().len()));
    }
}
