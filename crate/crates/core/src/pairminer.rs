//! Term groups, contrastive pair mining and neutral templates.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::text;

pub const BLANK: &str = "[BLANK]";

/// Words that differ only in the bias attribute, e.g. `[queen, king]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermGroup {
    terms: Vec<String>,
}

impl TermGroup {
    pub fn new<S: AsRef<str>>(terms: &[S]) -> Result<Self> {
        let terms: Vec<String> = terms
            .iter()
            .map(|t| t.as_ref().trim().to_lowercase())
            .collect();
        if terms.len() < 2 {
            return Err(Error::invalid(format!(
                "term group needs at least 2 terms, got {terms:?}"
            )));
        }
        for (i, t) in terms.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("bad term {t:?}")));
            }
            if terms[..i].contains(t) {
                return Err(Error::invalid(format!("duplicate term {t:?} in group")));
            }
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

pub fn parse_term_groups(text: &str) -> Result<Vec<TermGroup>> {
    let groups = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let terms: Vec<&str> = line.split(',').collect();
            TermGroup::new(&terms).map_err(|e| Error::Format {
                what: "term group file",
                detail: format!("group {}: {e}", i + 1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if groups.is_empty() {
        return Err(Error::NoTermGroups);
    }
    Ok(groups)
}

pub fn load_term_groups(path: impl AsRef<Path>) -> Result<Vec<TermGroup>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_term_groups(&text)
}

/// A sentence and its counterpart with exactly one bias term swapped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub original: String,
    pub counterpart: String,
    pub group_index: usize,
    pub matched_term: String,
    pub replacement_term: String,
    pub token_position: usize,
}

fn match_case(template: &str, word: &str) -> String {
    let starts_upper = template.chars().next().is_some_and(char::is_uppercase);
    if !starts_upper {
        return word.to_string();
    }
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Scan `corpus` (one sentence per item) and emit one pair per matched
/// token occurrence. Multi-term groups pick the replacement uniformly from
/// the other members using a generator seeded with `seed`.
pub fn mine_pairs<I, S>(
    corpus: I,
    groups: &[TermGroup],
    seed: u64,
    max_pairs: usize,
) -> Vec<ContrastivePair>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut index: HashMap<&str, (usize, usize)> = HashMap::new();
    for (g, group) in groups.iter().enumerate() {
        for (t, term) in group.terms.iter().enumerate() {
            index.entry(term.as_str()).or_insert((g, t));
        }
    }
    let mut rng = seed::rng_from(seed);
    let mut pairs = Vec::new();
    if max_pairs == 0 {
        return pairs;
    }
    for sentence in corpus {
        let sentence = sentence.as_ref();
        for (pos, (start, end)) in text::token_spans(sentence).into_iter().enumerate() {
            let token = &sentence[start..end];
            let Some(&(g, t)) = index.get(token.to_lowercase().as_str()) else {
                continue;
            };
            let group = &groups[g];
            let mut pick = rng.random_range(0..group.len() - 1);
            if pick >= t {
                pick += 1;
            }
            let replacement = &group.terms[pick];
            let counterpart = format!(
                "{}{}{}",
                &sentence[..start],
                match_case(token, replacement),
                &sentence[end..]
            );
            pairs.push(ContrastivePair {
                original: sentence.to_string(),
                counterpart,
                group_index: g,
                matched_term: group.terms[t].clone(),
                replacement_term: replacement.clone(),
                token_position: pos,
            });
            if pairs.len() >= max_pairs {
                return pairs;
            }
        }
    }
    pairs
}

pub fn write_pairs_jsonl(path: impl AsRef<Path>, pairs: &[ContrastivePair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_pairs_jsonl(path: impl AsRef<Path>) -> Result<Vec<ContrastivePair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// A neutral sentence with exactly one `[BLANK]` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    text: String,
}

impl Template {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        match text.matches(BLANK).count() {
            1 => Ok(Self { text }),
            n => Err(Error::invalid(format!(
                "template must contain exactly one {BLANK}, found {n}: {text:?}"
            ))),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn fill(&self, word: &str) -> String {
        self.text.replacen(BLANK, word, 1)
    }
}

pub fn fill_template(template: &Template, word: &str) -> String {
    template.fill(word)
}

pub fn parse_templates(text: &str) -> Result<Vec<Template>> {
    let templates = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(Template::new)
        .collect::<Result<Vec<_>>>()?;
    if templates.is_empty() {
        return Err(Error::invalid("no templates"));
    }
    Ok(templates)
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<Template>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_templates(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(terms: &[&str]) -> TermGroup {
        TermGroup::new(terms).unwrap()
    }

    #[test]
    fn parses_groups_in_order() {
        let groups = parse_term_groups("female, male\nQueen , king\n\n").unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].terms(), ["female", "male"]);
        assert_eq!(groups[1].terms(), ["queen", "king"]);
    }

    #[test]
    fn three_term_group() {
        let groups = parse_term_groups("muslim, christian, jew").unwrap();
        assert_eq!(groups[0].terms(), ["muslim", "christian", "jew"]);
    }

    #[test]
    fn rejects_bad_groups() {
        assert!(matches!(parse_term_groups(""), Err(Error::NoTermGroups)));
        assert_eq!(parse_term_groups("\n  \n").unwrap_err().to_string(), "no term groups");
        assert!(parse_term_groups("alone").is_err());
        assert!(parse_term_groups("he, she, he").is_err());
        assert!(parse_term_groups("he, ").is_err());
        assert!(load_term_groups("/nonexistent/terms.txt").is_err());
    }

    #[test]
    fn single_match_substitution() {
        let pairs = mine_pairs(["the women went home ."], &[group(&["women", "men"])], 3, 100);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].original, "the women went home .");
        assert_eq!(pairs[0].counterpart, "the men went home .");
        assert_eq!(pairs[0].token_position, 1);
        assert_eq!(pairs[0].matched_term, "women");
        assert_eq!(pairs[0].replacement_term, "men");
    }

    #[test]
    fn no_match_no_pairs() {
        let pairs = mine_pairs(["no bias words here ."], &[group(&["women", "men"])], 0, 100);
        assert!(pairs.is_empty());
    }

    #[test]
    fn whole_token_only() {
        let pairs = mine_pairs(["there is the sheriff"], &[group(&["her", "him"]), group(&["she", "he"])], 0, 100);
        assert!(pairs.is_empty());
    }

    #[test]
    fn one_pair_per_occurrence() {
        let pairs = mine_pairs(["she told him that she left"], &[group(&["she", "he"]), group(&["her", "him"])], 0, 100);
        let got: Vec<_> = pairs.iter().map(|p| p.counterpart.as_str()).collect();
        assert_eq!(
            got,
            ["he told him that she left", "she told her that she left", "she told him that he left"]
        );
    }

    #[test]
    fn preserves_capitalization() {
        let pairs = mine_pairs(["She left. The Queen stayed."], &[group(&["she", "he"]), group(&["queen", "king"])], 0, 100);
        assert_eq!(pairs[0].counterpart, "He left. The Queen stayed.");
        assert_eq!(pairs[1].counterpart, "She left. The King stayed.");
        assert_eq!(pairs[1].matched_term, "queen");
    }

    #[test]
    fn multi_term_groups_are_seeded() {
        let groups = [group(&["muslim", "christian", "jew"])];
        let corpus: Vec<String> = (0..40).map(|i| format!("a muslim neighbour {i}")).collect();
        let a = mine_pairs(&corpus, &groups, 11, 1000);
        let b = mine_pairs(&corpus, &groups, 11, 1000);
        assert_eq!(a, b);
        let reps: std::collections::HashSet<_> = a.iter().map(|p| p.replacement_term.clone()).collect();
        assert_eq!(reps.len(), 2, "both counterparts should be drawn over 40 draws");
        assert!(!reps.contains("muslim"));
    }

    #[test]
    fn stops_at_max_pairs() {
        let corpus = vec!["he and she and he"; 10];
        let pairs = mine_pairs(&corpus, &[group(&["she", "he"])], 0, 7);
        assert_eq!(pairs.len(), 7);
        assert!(mine_pairs(&corpus, &[group(&["she", "he"])], 0, 0).is_empty());
    }

    #[test]
    fn templates() {
        let t = Template::new("I work as a [BLANK]").unwrap();
        assert_eq!(fill_template(&t, "nurse"), "I work as a nurse");
        let t = Template::new("My occupation is [BLANK]").unwrap();
        assert_eq!(t.fill("engineer"), "My occupation is engineer");
        assert_eq!(Template::new("[BLANK]").unwrap().fill("x"), "x");
        assert!(Template::new("no slot").is_err());
        assert!(Template::new("[BLANK] [BLANK]").is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs = mine_pairs(["she is a queen ."], &[group(&["she", "he"]), group(&["queen", "king"])], 0, 10);
        write_pairs_jsonl(&path, &pairs).unwrap();
        assert_eq!(read_pairs_jsonl(&path).unwrap(), pairs);
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.starts_with(r#"{"original":"she is a queen .","counterpart":"he is a queen .","group_index":0,"#));
    }
}
