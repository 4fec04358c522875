//! Matching genes to tasks via keyword signals.
//!
//! A task text is reduced to a set of lowercase alphanumeric tokens
//! ([`extract_signals`]); a gene's score is the fraction of its keywords
//! whose tokens all appear in that set ([`score_gene`]). Selection policies
//! pick from a pool by score with a lexicographic-by-id tie break
//! ([`select`]). Everything here is a pure function over immutable inputs:
//! identical inputs give identical outputs on any thread.

use crate::objects::{Canonical, Gene};
use crate::rate::Rate;
use std::collections::BTreeSet;

/// How to choose genes from a pool.
///
/// `Single` (the default) returns the one best-scoring gene. `TopK` returns
/// the first `k` of the score-sorted pool. `Explicit` bypasses scoring and
/// returns the named genes in the given order — used to express composition
/// experiments (complementary or conflicting gene sets) as configuration.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum SelectionPolicy {
    #[default]
    Single,
    TopK(usize),
    Explicit(Vec<String>),
}

/// Selection failures.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SelectError {
    #[error("selection over an empty gene pool")]
    EmptyPool,
    #[error("top_k requires k >= 1")]
    ZeroK,
    #[error("explicit selection names gene {0:?}, which is not in the pool")]
    UnknownGene(String),
}

/// Lowercase alphanumeric tokens of a task text, deduplicated.
///
/// Tokens are maximal alphanumeric runs; all punctuation and whitespace
/// separate. The result is an ordered set, so iteration is deterministic.
pub fn extract_signals(task_text: &str) -> BTreeSet<String> {
    task_text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|run| !run.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn keyword_tokens(keyword: &str) -> Vec<String> {
    keyword
        .split(|c: char| !c.is_alphanumeric())
        .filter(|run| !run.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Fraction of the gene's keywords matched by the signal set, as an exact
/// rational. A multiword keyword matches only when all of its tokens are
/// present; a keyword with no alphanumeric tokens never matches.
pub fn score_gene(gene: &Canonical<Gene>, signals: &BTreeSet<String>) -> Rate {
    let keywords = &gene.object().signals_match;
    let matched = keywords
        .iter()
        .filter(|k| {
            let tokens = keyword_tokens(k);
            !tokens.is_empty() && tokens.iter().all(|t| signals.contains(t))
        })
        .count();
    Rate::new(matched as i64, keywords.len() as i64)
        .expect("matched/total keyword ratio is always in [0,1]")
}

/// The whole pool scored against a task and sorted by (score descending,
/// gene id ascending). `TopK` outputs are prefixes of this order.
pub fn rank<'a>(pool: &'a [Canonical<Gene>], task_text: &str) -> Vec<(Rate, &'a Canonical<Gene>)> {
    let signals = extract_signals(task_text);
    let mut scored: Vec<(Rate, &Canonical<Gene>)> = pool
        .iter()
        .map(|g| (score_gene(g, &signals), g))
        .collect();
    scored.sort_by(|(sa, ga), (sb, gb)| {
        sb.cmp(sa).then_with(|| ga.object().id.cmp(&gb.object().id))
    });
    scored
}

/// Applies a selection policy to a pool, returning genes in selection
/// order.
///
/// # Errors
///
/// `Single` and `TopK` require a non-empty pool; `TopK(0)` is invalid;
/// `Explicit` fails if any named gene id is absent from the pool.
pub fn select(
    pool: &[Canonical<Gene>],
    task_text: &str,
    policy: &SelectionPolicy,
) -> Result<Vec<Canonical<Gene>>, SelectError> {
    match policy {
        SelectionPolicy::Single => {
            if pool.is_empty() {
                return Err(SelectError::EmptyPool);
            }
            Ok(vec![rank(pool, task_text)[0].1.clone()])
        }
        SelectionPolicy::TopK(k) => {
            if *k == 0 {
                return Err(SelectError::ZeroK);
            }
            if pool.is_empty() {
                return Err(SelectError::EmptyPool);
            }
            Ok(rank(pool, task_text)
                .into_iter()
                .take(*k)
                .map(|(_, g)| g.clone())
                .collect())
        }
        SelectionPolicy::Explicit(ids) => {
            let mut out = Vec::with_capacity(ids.len());
            for id in ids {
                let gene = pool
                    .iter()
                    .find(|g| &g.object().id == id)
                    .ok_or_else(|| SelectError::UnknownGene(id.clone()))?;
                out.push(gene.clone());
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objects::{canonicalize, SourceTag, StepKind, StrategyStep};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn gene(id: &str, keywords: &[&str]) -> Canonical<Gene> {
        let g = Gene::new(
            id,
            keywords.iter().map(|k| k.to_string()).collect(),
            "summary text",
            vec![StrategyStep::new(StepKind::Do, "do something", 1)],
            SourceTag::Manual,
        );
        canonicalize(&g).unwrap()
    }

    #[test]
    fn signal_extraction_matches_the_stated_rule() {
        let signals = extract_signals("Detect UV-Vis peaks, compute FWHM");
        let expected: BTreeSet<String> = ["detect", "uv", "vis", "peaks", "compute", "fwhm"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(signals, expected);
        assert!(extract_signals("").is_empty());
    }

    #[test]
    fn signal_extraction_is_idempotent_on_its_own_output() {
        let first = extract_signals("Detect UV-Vis peaks, compute FWHM!");
        let rejoined = first.iter().cloned().collect::<Vec<_>>().join(" ");
        assert_eq!(extract_signals(&rejoined), first);
    }

    #[test]
    fn scoring_counts_whole_keywords_with_all_tokens_present() {
        let g = gene(
            "gene_uv",
            &["uv-vis", "fwhm", "peak detection", "unit conversion"],
        );
        let signals = extract_signals("uv vis fwhm peak detection spectra");
        assert_eq!(score_gene(&g, &signals), Rate::new(3, 4).unwrap());

        let none = extract_signals("unrelated words entirely");
        assert_eq!(score_gene(&g, &none), Rate::zero());

        let all = extract_signals("uv vis fwhm peak detection unit conversion");
        assert_eq!(score_gene(&g, &all), Rate::one());
    }

    #[test]
    fn partial_multiword_match_does_not_count() {
        let g = gene("gene_pd", &["peak detection"]);
        let signals = extract_signals("peak only");
        assert_eq!(score_gene(&g, &signals), Rate::zero());
    }

    #[test]
    fn single_mode_picks_argmax_with_id_tie_break() {
        let pool = vec![
            gene("gene_b", &["alpha", "beta", "gamma", "delta"]),
            gene("gene_a", &["alpha", "beta", "missing", "absent"]),
            gene("gene_c", &["alpha", "beta", "missing", "absent"]),
        ];
        let picked = select(&pool, "alpha beta gamma", &SelectionPolicy::Single).unwrap();
        assert_eq!(picked[0].object().id, "gene_b");

        let tied = select(&pool, "alpha beta", &SelectionPolicy::Single).unwrap();
        assert_eq!(tied[0].object().id, "gene_a");
    }

    #[test]
    fn top_k_is_a_prefix_and_clamps_to_pool_size() {
        let pool = vec![
            gene("gene_a", &["alpha"]),
            gene("gene_b", &["beta"]),
            gene("gene_c", &["alpha", "beta"]),
        ];
        let full = rank(&pool, "alpha beta");
        let two = select(&pool, "alpha beta", &SelectionPolicy::TopK(2)).unwrap();
        assert_eq!(two.len(), 2);
        for (i, g) in two.iter().enumerate() {
            assert_eq!(g.object().id, full[i].1.object().id);
        }
        let ten = select(&pool, "alpha beta", &SelectionPolicy::TopK(10)).unwrap();
        assert_eq!(ten.len(), 3);
        assert_eq!(
            select(&pool, "x", &SelectionPolicy::TopK(0)),
            Err(SelectError::ZeroK)
        );
    }

    #[test]
    fn explicit_mode_preserves_order_and_rejects_unknown_ids() {
        let pool = vec![gene("gene_a", &["alpha"]), gene("gene_b", &["beta"])];
        let picked = select(
            &pool,
            "irrelevant",
            &SelectionPolicy::Explicit(vec!["gene_b".to_string(), "gene_a".to_string()]),
        )
        .unwrap();
        assert_eq!(picked[0].object().id, "gene_b");
        assert_eq!(picked[1].object().id, "gene_a");
        assert_eq!(
            select(
                &pool,
                "irrelevant",
                &SelectionPolicy::Explicit(vec!["gene_zz".to_string()])
            ),
            Err(SelectError::UnknownGene("gene_zz".to_string()))
        );
    }

    #[test]
    fn empty_pool_is_an_error_for_scored_modes() {
        assert_eq!(
            select(&[], "task", &SelectionPolicy::Single),
            Err(SelectError::EmptyPool)
        );
        assert_eq!(
            select(&[], "task", &SelectionPolicy::TopK(2)),
            Err(SelectError::EmptyPool)
        );
        assert_eq!(
            select(&[], "task", &SelectionPolicy::Explicit(vec![])),
            Ok(vec![])
        );
    }

    #[test]
    fn hundred_random_pools_agree_with_a_brute_force_argmax_oracle() {
        let vocabulary = [
            "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa",
        ];
        let mut rng = StdRng::seed_from_u64(20240801);
        for case in 0..100 {
            let pool_size = rng.gen_range(1..=8);
            let pool: Vec<Canonical<Gene>> = (0..pool_size)
                .map(|i| {
                    let n = rng.gen_range(1..=4);
                    let mut keywords: Vec<&str> = Vec::new();
                    while keywords.len() < n {
                        let k = vocabulary[rng.gen_range(0..vocabulary.len())];
                        if !keywords.contains(&k) {
                            keywords.push(k);
                        }
                    }
                    gene(&format!("gene_case{case}_{i}"), &keywords)
                })
                .collect();
            let task: Vec<&str> = (0..rng.gen_range(0..6))
                .map(|_| vocabulary[rng.gen_range(0..vocabulary.len())])
                .collect();
            let task = task.join(" ");

            // Brute-force oracle: compare every pair directly.
            let signals = extract_signals(&task);
            let best = pool
                .iter()
                .min_by(|a, b| {
                    score_gene(b, &signals)
                        .cmp(&score_gene(a, &signals))
                        .then_with(|| a.object().id.cmp(&b.object().id))
                })
                .unwrap();
            let picked = select(&pool, &task, &SelectionPolicy::Single).unwrap();
            assert_eq!(picked[0].object().id, best.object().id, "case {case}");
        }
    }

    #[test]
    fn ranking_depends_only_on_score_order() {
        // Two pools with different absolute scores but the same comparative
        // order must rank identically: 2/2 > 1/2 > 0/2 vs 3/3 > 1/3 > 0/3.
        let pool_halves = vec![
            gene("gene_low", &["nope", "nada"]),
            gene("gene_mid", &["alpha", "nada"]),
            gene("gene_top", &["alpha", "beta"]),
        ];
        let pool_thirds = vec![
            gene("gene_low", &["nope", "nada", "zilch"]),
            gene("gene_mid", &["alpha", "nada", "zilch"]),
            gene("gene_top", &["alpha", "beta", "gamma"]),
        ];
        let task = "alpha beta gamma";
        let order_a: Vec<String> = rank(&pool_halves, task)
            .iter()
            .map(|(_, g)| g.object().id.clone())
            .collect();
        let order_b: Vec<String> = rank(&pool_thirds, task)
            .iter()
            .map(|(_, g)| g.object().id.clone())
            .collect();
        assert_eq!(order_a, order_b);
        assert_eq!(order_a, vec!["gene_top", "gene_mid", "gene_low"]);
    }
}
