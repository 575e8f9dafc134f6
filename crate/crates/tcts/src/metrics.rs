//! Reference-based caption scoring: CIDEr-D, BLEU-1..4 and ROUGE-L.
//!
//! Conventions, fixed here so scores are comparable across runs:
//! - CIDEr-D: clipped tf-idf cosine per n-gram order 1..=4, Gaussian length
//!   penalty with sigma = 6, averaged over references then orders, scaled by
//!   10. Zero-norm vectors contribute similarity 0 (the 0/0 -> 0 convention,
//!   which keeps degenerate corpora from producing NaN rewards). N-grams
//!   absent from every reference set take document frequency 1 for idf.
//! - BLEU: single-sentence clipped precision with brevity penalty; for
//!   n >= 2 a zero precision is smoothed to 1/(denominator+1).
//! - ROUGE-L: LCS F-measure with beta = 1.2, max over references.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::text::{lcs_partition, ngrams, Caption};

/// Gaussian length-penalty width for CIDEr-D.
const CIDER_SIGMA: f64 = 6.0;
/// Recall weight in the ROUGE-L F-measure.
const ROUGE_BETA: f64 = 1.2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("reference set is empty")]
    MissingReferences,
}

/// Per-order document frequencies over a reference corpus.
///
/// Built from reference captions only, never from candidates. `idf` is
/// computed lazily as `ln(num_images / df)`.
#[derive(Debug, Clone)]
pub struct IdfTable {
    df: [BTreeMap<Vec<usize>, usize>; 4],
    num_images: usize,
}

impl IdfTable {
    /// Counts, for each n-gram, the number of images whose reference set
    /// contains it at least once.
    pub fn build(refs: &[Vec<Caption>]) -> Result<IdfTable, MetricError> {
        if refs.is_empty() || refs.iter().any(|set| set.is_empty()) {
            return Err(MetricError::MissingReferences);
        }
        let mut df: [BTreeMap<Vec<usize>, usize>; 4] = Default::default();
        for set in refs {
            for n in 1..=4 {
                let mut seen = BTreeMap::new();
                for r in set {
                    for gram in ngrams(r.interior(), n).into_keys() {
                        seen.insert(gram, ());
                    }
                }
                for (gram, ()) in seen {
                    *df[n - 1].entry(gram).or_insert(0) += 1;
                }
            }
        }
        Ok(IdfTable {
            df,
            num_images: refs.len(),
        })
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn df(&self, n: usize, gram: &[usize]) -> usize {
        self.df[n - 1].get(gram).copied().unwrap_or(0)
    }

    /// `ln(num_images / df)`; unseen n-grams are treated as df = 1.
    pub fn idf(&self, n: usize, gram: &[usize]) -> f64 {
        let df = self.df(n, gram).max(1);
        (self.num_images as f64 / df as f64).ln()
    }
}

/// tf-idf vector for one caption at one n-gram order.
fn tfidf_vec(caption: &Caption, n: usize, idf: &IdfTable) -> BTreeMap<Vec<usize>, f64> {
    ngrams(caption.interior(), n)
        .into_iter()
        .map(|(gram, count)| {
            let w = count as f64 * idf.idf(n, &gram);
            (gram, w)
        })
        .collect()
}

fn norm(v: &BTreeMap<Vec<usize>, f64>) -> f64 {
    v.values().map(|x| x * x).sum::<f64>().sqrt()
}

/// CIDEr-D score of a candidate against a reference set, >= 0.
pub fn cider(candidate: &Caption, refs: &[Caption], idf: &IdfTable) -> Result<f64, MetricError> {
    if refs.is_empty() {
        return Err(MetricError::MissingReferences);
    }
    let mut order_sum = 0.0;
    for n in 1..=4 {
        let cvec = tfidf_vec(candidate, n, idf);
        let cnorm = norm(&cvec);
        let mut ref_sum = 0.0;
        for r in refs {
            let rvec = tfidf_vec(r, n, idf);
            let rnorm = norm(&rvec);
            let mut sim = 0.0;
            if cnorm > 0.0 && rnorm > 0.0 {
                // Clipped similarity: repeated candidate n-grams only count
                // up to their reference frequency.
                let dot: f64 = cvec
                    .iter()
                    .filter_map(|(g, &cw)| rvec.get(g).map(|&rw| cw.min(rw) * rw))
                    .sum();
                sim = dot / (cnorm * rnorm);
            }
            let delta = candidate.len() as f64 - r.len() as f64;
            sim *= (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            ref_sum += sim;
        }
        order_sum += ref_sum / refs.len() as f64;
    }
    Ok(10.0 * order_sum / 4.0)
}

/// Single-sentence BLEU-1..4 with clipped precision and brevity penalty.
pub fn bleu(candidate: &Caption, refs: &[Caption]) -> Result<[f64; 4], MetricError> {
    if refs.is_empty() {
        return Err(MetricError::MissingReferences);
    }
    let c_len = candidate.len();
    if c_len == 0 {
        return Ok([0.0; 4]);
    }

    // Closest reference length; ties prefer the shorter reference.
    let r_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c_len), l))
        .unwrap();
    let bp = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };

    let mut precisions = [0.0f64; 4];
    for n in 1..=4 {
        let cgrams = ngrams(candidate.interior(), n);
        let denom: usize = cgrams.values().sum();
        let mut matched = 0usize;
        for (gram, &count) in &cgrams {
            let best_ref = refs
                .iter()
                .map(|r| ngrams(r.interior(), n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matched += count.min(best_ref);
        }
        precisions[n - 1] = if matched > 0 {
            matched as f64 / denom as f64
        } else if n >= 2 {
            // Add-one smoothing keeps higher orders informative at
            // sentence scale.
            1.0 / (denom as f64 + 1.0)
        } else {
            0.0
        };
    }

    let mut scores = [0.0f64; 4];
    for n in 1..=4 {
        let log_sum: f64 = precisions[..n]
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .sum();
        scores[n - 1] = if log_sum.is_finite() {
            bp * (log_sum / n as f64).exp()
        } else {
            0.0
        };
    }
    Ok(scores)
}

/// ROUGE-L: LCS-based F-measure, maximum over references.
pub fn rouge_l(candidate: &Caption, refs: &[Caption]) -> Result<f64, MetricError> {
    if refs.is_empty() {
        return Err(MetricError::MissingReferences);
    }
    let mut best = 0.0f64;
    for r in refs {
        if candidate.len() == 0 || r.len() == 0 {
            continue;
        }
        let lcs = lcs_partition(candidate, r).n as f64;
        let prec = lcs / candidate.len() as f64;
        let rec = lcs / r.len() as f64;
        let denom = rec + ROUGE_BETA * ROUGE_BETA * prec;
        if denom > 0.0 {
            let f = (1.0 + ROUGE_BETA * ROUGE_BETA) * rec * prec / denom;
            best = best.max(f);
        }
    }
    Ok(best)
}

/// One caption's scores across the full metric suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
}

impl MetricReport {
    pub fn score(
        candidate: &Caption,
        refs: &[Caption],
        idf: &IdfTable,
    ) -> Result<MetricReport, MetricError> {
        Ok(MetricReport {
            bleu: bleu(candidate, refs)?,
            rouge_l: rouge_l(candidate, refs)?,
            cider: cider(candidate, refs, idf)?,
        })
    }

    /// Arithmetic mean of per-record reports.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let k = reports.len().max(1) as f64;
        let mut bleu = [0.0; 4];
        let mut rouge = 0.0;
        let mut cider = 0.0;
        for r in reports {
            for (acc, v) in bleu.iter_mut().zip(r.bleu) {
                *acc += v;
            }
            rouge += r.rouge_l;
            cider += r.cider;
        }
        MetricReport {
            bleu: bleu.map(|b| b / k),
            rouge_l: rouge / k,
            cider: cider / k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Caption;
    use proptest::prelude::*;

    fn cap(ids: &[usize]) -> Caption {
        Caption::from_interior(ids)
    }

    #[test]
    fn idf_hand_values() {
        // Two images; 10 in both, 11 in one.
        let refs = vec![vec![cap(&[10, 11])], vec![cap(&[10, 12])]];
        let idf = IdfTable::build(&refs).unwrap();
        assert_eq!(idf.df(1, &[10]), 2);
        assert!((idf.idf(1, &[10]) - 0.0).abs() < 1e-12);
        assert!((idf.idf(1, &[11]) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn idf_rejects_empty_reference_set() {
        let refs: Vec<Vec<Caption>> = vec![vec![cap(&[10])], vec![]];
        assert_eq!(
            IdfTable::build(&refs).unwrap_err(),
            MetricError::MissingReferences
        );
    }

    #[test]
    fn cider_perfect_match_scores_ten() {
        // Length >= 4 so every order has n-grams; a second image with
        // disjoint tokens keeps all idf weights positive.
        let a = cap(&[10, 11, 12, 13]);
        let b = cap(&[20, 21, 22, 23]);
        let idf = IdfTable::build(&[vec![a.clone()], vec![b]]).unwrap();
        let score = cider(&a, &[a.clone()], &idf).unwrap();
        assert!((score - 10.0).abs() < 1e-9, "score = {score}");
    }

    #[test]
    fn cider_orthogonal_candidate_scores_zero() {
        let a = cap(&[10, 11, 12, 13]);
        let b = cap(&[20, 21, 22, 23]);
        let idf = IdfTable::build(&[vec![a.clone()], vec![b.clone()]]).unwrap();
        assert_eq!(cider(&b, &[a], &idf).unwrap(), 0.0);
    }

    #[test]
    fn cider_degenerate_idf_scores_zero() {
        // Every n-gram appears in every image, so idf = 0 everywhere and
        // the 0/0 -> 0 convention applies.
        let a = cap(&[10, 11, 12, 13]);
        let idf = IdfTable::build(&[vec![a.clone()], vec![a.clone()]]).unwrap();
        assert_eq!(cider(&a, &[a.clone()], &idf).unwrap(), 0.0);
    }

    #[test]
    fn cider_requires_references() {
        let a = cap(&[10]);
        let idf = IdfTable::build(&[vec![a.clone()]]).unwrap();
        assert_eq!(cider(&a, &[], &idf), Err(MetricError::MissingReferences));
    }

    #[test]
    fn bleu_perfect_match_is_one() {
        let a = cap(&[10, 11, 12, 13]);
        let scores = bleu(&a, &[cap(&[20, 21]), a.clone()]).unwrap();
        for s in scores {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_zero_overlap_is_zero() {
        let scores = bleu(&cap(&[10, 11]), &[cap(&[20, 21])]).unwrap();
        assert_eq!(scores, [0.0; 4]);
    }

    #[test]
    fn bleu_brevity_penalty_hand_value() {
        // candidate [the, cat] vs ref [the, cat, sat]: BLEU-1 = exp(1 - 3/2).
        let scores = bleu(&cap(&[10, 11]), &[cap(&[10, 11, 12])]).unwrap();
        let expected = (1.0f64 - 1.5).exp();
        assert!((scores[0] - expected).abs() < 1e-12, "{}", scores[0]);
    }

    #[test]
    fn rouge_perfect_and_disjoint() {
        let a = cap(&[10, 11, 12]);
        assert!((rouge_l(&a, &[a.clone()]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&a, &[cap(&[20, 21])]).unwrap(), 0.0);
    }

    #[test]
    fn rouge_hand_value_with_equal_precision_recall() {
        // candidate [a,b], ref [a,c]: LCS 1, P = R = 0.5 -> F = 0.5.
        let f = rouge_l(&cap(&[10, 11]), &[cap(&[10, 12])]).unwrap();
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicated_references_within_image_leave_cider_unchanged() {
        let a = cap(&[10, 11, 12, 13]);
        let r = cap(&[10, 11, 14, 13]);
        let idf = IdfTable::build(&[vec![r.clone()], vec![cap(&[20, 21, 22, 23])]]).unwrap();
        let once = cider(&a, &[r.clone()], &idf).unwrap();
        let twice = cider(&a, &[r.clone(), r.clone()], &idf).unwrap();
        assert!((once - twice).abs() < 1e-12);
    }

    fn arb_caption() -> impl Strategy<Value = Caption> {
        proptest::collection::vec(10usize..16, 1..=6).prop_map(|ids| cap(&ids))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scores_are_in_range(
            c in arb_caption(),
            refs in proptest::collection::vec(arb_caption(), 1..=3),
        ) {
            let idf = IdfTable::build(&[refs.clone()]).unwrap();
            let cid = cider(&c, &refs, &idf).unwrap();
            prop_assert!(cid >= 0.0 && cid.is_finite());
            for b in bleu(&c, &refs).unwrap() {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            }
            let r = rouge_l(&c, &refs).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        }

        #[test]
        fn reference_permutation_invariance(
            c in arb_caption(),
            refs in proptest::collection::vec(arb_caption(), 2..=4),
        ) {
            let idf = IdfTable::build(&[refs.clone()]).unwrap();
            let mut rev = refs.clone();
            rev.reverse();
            prop_assert!((cider(&c, &refs, &idf).unwrap() - cider(&c, &rev, &idf).unwrap()).abs() < 1e-12);
            let b1 = bleu(&c, &refs).unwrap();
            let b2 = bleu(&c, &rev).unwrap();
            for (x, y) in b1.iter().zip(b2.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((rouge_l(&c, &refs).unwrap() - rouge_l(&c, &rev).unwrap()).abs() < 1e-12);
        }
    }
}
