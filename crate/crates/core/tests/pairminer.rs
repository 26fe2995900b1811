use debias_core::pairminer::{mine_pairs, ContrastivePair};
use debias_core::text::split_tokens;
use debias_core::{data, TermGroup};
use proptest::prelude::*;

#[test]
fn mini_corpus_matches_golden_pairs() {
    let golden: Vec<ContrastivePair> = data::MINI_CORPUS_PAIRS
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for seed in [0, 1, 99] {
        let mined = mine_pairs(data::mini_corpus(), &data::gender_groups(), seed, usize::MAX);
        assert_eq!(mined, golden);
    }
}

const WORDS: [&str; 16] = [
    "she", "He", "the", "queen", "King", "was", "her", "him", "Mother", "a", "nurse", "women", "boy", ".", ",", "herself",
];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 0..12).prop_map(|w| w.join(" "))
}

fn term_count(s: &str, groups: &[TermGroup]) -> usize {
    split_tokens(s)
        .iter()
        .filter(|t| groups.iter().any(|g| g.terms().contains(&t.to_lowercase())))
        .count()
}

proptest! {
    #[test]
    fn pairs_differ_in_exactly_the_matched_token(corpus in prop::collection::vec(sentence(), 0..8), seed in any::<u64>()) {
        let groups = data::gender_groups();
        let pairs = mine_pairs(&corpus, &groups, seed, usize::MAX);
        let expected: usize = corpus.iter().map(|s| term_count(s, &groups)).sum();
        prop_assert_eq!(pairs.len(), expected);
        for p in &pairs {
            let a = split_tokens(&p.original);
            let b = split_tokens(&p.counterpart);
            prop_assert_eq!(a.len(), b.len());
            let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
            prop_assert_eq!(diff, vec![p.token_position]);
            let g = groups[p.group_index].terms();
            prop_assert!(g.contains(&p.matched_term) && g.contains(&p.replacement_term));
            prop_assert_ne!(&p.matched_term, &p.replacement_term);
            prop_assert_eq!(a[p.token_position].to_lowercase(), p.matched_term.clone());
            prop_assert_eq!(b[p.token_position].to_lowercase(), p.replacement_term.clone());
        }
    }

    #[test]
    fn swapping_back_restores_the_original(s in sentence()) {
        let groups = data::gender_groups();
        for p in mine_pairs([&s], &groups, 0, usize::MAX) {
            let back = mine_pairs([&p.counterpart], &groups, 0, usize::MAX);
            let restored = back.iter().find(|q| q.token_position == p.token_position).unwrap();
            prop_assert_eq!(&restored.counterpart, &p.original);
        }
    }

    #[test]
    fn max_pairs_truncates_in_order(corpus in prop::collection::vec(sentence(), 0..8), max in 0usize..20) {
        let groups = data::gender_groups();
        let all = mine_pairs(&corpus, &groups, 3, usize::MAX);
        let some = mine_pairs(&corpus, &groups, 3, max);
        prop_assert_eq!(some.len(), all.len().min(max));
        prop_assert_eq!(&all[..some.len()], &some[..]);
    }
}
