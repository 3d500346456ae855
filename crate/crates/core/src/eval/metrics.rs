//! Edit distance, error rates and the sign-test probability.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Unit-cost Levenshtein distance with the edits split by kind. The
/// traceback prefers a substitution (or match), then a deletion, then an
/// insertion whenever several moves are optimal.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = EditCounts {
        distance: d[n * w + m],
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[(i - 1) * w + j - 1] + diff == here {
                c.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Word,
    Char,
}

fn units(s: &str, unit: Unit) -> Vec<&str> {
    match unit {
        Unit::Word => s.split_whitespace().collect(),
        Unit::Char => s
            .char_indices()
            .map(|(i, ch)| &s[i..i + ch.len_utf8()])
            .collect(),
    }
}

/// Corpus error rate in percent: total edits over total reference length.
/// `Unit::Char` gives CER.
pub fn wer(refs: &[&str], hyps: &[&str], unit: Unit) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::shape("wer", &[refs.len()], &[hyps.len()]));
    }
    let mut edits = 0;
    let mut total = 0;
    for (r, h) in refs.iter().zip(hyps) {
        let r = units(r, unit);
        edits += edit_distance(&r, &units(h, unit)).distance;
        total += r.len();
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("reference text is empty".into()));
    }
    Ok(100.0 * edits as f64 / total as f64)
}

/// `1 − Σ_{i=m}^{n} C(n,i) / 2ⁿ`: the chance that a fair coin lands heads
/// fewer than `m` times in `n` flips. Exact for `n ≤ 63`.
pub fn sign_test_probability(n: u32, m: u32) -> Result<f64> {
    if m > n {
        return Err(Error::Domain {
            op: "sign_test_probability",
            detail: format!("m = {m} exceeds n = {n}"),
        });
    }
    if n > 63 {
        return Err(Error::Domain {
            op: "sign_test_probability",
            detail: format!("n = {n} exceeds 63"),
        });
    }
    // Summing the lower tail keeps the result exact instead of cancelling.
    let mut c: u128 = 1;
    let mut below: u128 = 0;
    for i in 0..m as u128 {
        below += c;
        c = c * (n as u128 - i) / (i + 1);
    }
    Ok(below as f64 / (1u128 << n) as f64)
}

/// Fraction of positions where the two lists agree; lengths must match.
pub fn token_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("token_accuracy", &[truth.len()], &[pred.len()]));
    }
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("no tokens to score".into()));
    }
    let ok = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(ok as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_single_substitution() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]).distance, 0);
        let c = edit_distance(&["a", "b", "c"], &["a", "x", "c"]);
        assert_eq!((c.distance, c.substitutions), (1, 1));
    }

    #[test]
    fn counts_sum_to_distance() {
        let c = edit_distance(b"kitten", b"sitting");
        assert_eq!(c.distance, 3);
        assert_eq!(c.substitutions + c.insertions + c.deletions, 3);
        assert_eq!(c.insertions, 1);
        let e = edit_distance::<u8>(&[], b"abc");
        assert_eq!((e.distance, e.insertions), (3, 3));
        let e = edit_distance::<u8>(b"ab", &[]);
        assert_eq!((e.distance, e.deletions), (2, 2));
    }

    #[test]
    fn tie_prefers_substitution_then_deletion() {
        // "ab" → "b": deleting `a` is the only optimal script.
        let c = edit_distance(b"ab", b"b");
        assert_eq!((c.deletions, c.substitutions), (1, 0));
        // "ab" → "ba": two substitutions tie with delete + insert.
        let c = edit_distance(b"ab", b"ba");
        assert_eq!((c.substitutions, c.deletions, c.insertions), (2, 0, 0));
    }

    #[test]
    fn wer_cases() {
        assert_eq!(wer(&["a b c d"], &["a b c d"], Unit::Word).unwrap(), 0.0);
        assert_eq!(wer(&["a b c d"], &["a b x d"], Unit::Word).unwrap(), 25.0);
        assert_eq!(wer(&["abcd"], &["abd"], Unit::Char).unwrap(), 25.0);
        assert!(matches!(wer(&[""], &["x"], Unit::Word), Err(Error::UndefinedMetric(_))));
        assert!(wer(&["a"], &[], Unit::Word).is_err());
    }

    #[test]
    fn sign_test_cases() {
        assert_eq!(sign_test_probability(1, 0).unwrap(), 0.0);
        assert_eq!(sign_test_probability(2, 2).unwrap(), 0.75);
        assert_eq!(sign_test_probability(63, 63).unwrap(), 1.0 - 0.5f64.powi(63));
        assert!(sign_test_probability(3, 4).is_err());
        assert!(sign_test_probability(64, 1).is_err());
    }
}
