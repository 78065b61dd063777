//! Style-reference selection inside one style set.

use crate::error::{Error, Result};

/// Index of the member most similar to member `i`, excluding `i` itself.
/// Ties go to the lowest index.
pub fn select_style_reference<T>(set: &[T], i: usize, sim: impl Fn(&T, &T) -> f64) -> Result<usize> {
    if set.len() < 2 {
        return Err(Error::invalid(format!("a style set needs at least 2 images, got {}", set.len())));
    }
    if i >= set.len() {
        return Err(Error::invalid(format!("query {i} outside a set of {}", set.len())));
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, item) in set.iter().enumerate() {
        if k == i {
            continue;
        }
        let s = sim(&set[i], item);
        if s.is_nan() {
            return Err(Error::NonFinite(format!("similarity between {i} and {k}")));
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    Ok(best.expect("set has another member").0)
}

/// Selection for every member of the set.
pub fn select_all_references<T>(set: &[T], sim: impl Fn(&T, &T) -> f64) -> Result<Vec<usize>> {
    (0..set.len()).map(|i| select_style_reference(set, i, &sim)).collect()
}

/// Cosine similarity of two equal-length vectors; 0 when either is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(m: &'static [[f64; 3]; 3]) -> impl Fn(&usize, &usize) -> f64 {
        move |a, b| m[*a][*b]
    }

    #[test]
    fn pair_picks_the_other() {
        let set = [0usize, 1];
        let sim = |a: &usize, b: &usize| if a == b { 1.0 } else { -5.0 };
        assert_eq!(select_style_reference(&set, 0, sim).unwrap(), 1);
        assert_eq!(select_style_reference(&set, 1, sim).unwrap(), 0);
    }

    #[test]
    fn highest_similarity_wins_and_self_is_skipped() {
        static M: [[f64; 3]; 3] = [[1.0, 0.9, 0.4], [0.9, 1.0, 0.2], [0.4, 0.2, 1.0]];
        let set = [0usize, 1, 2];
        assert_eq!(select_style_reference(&set, 0, table(&M)).unwrap(), 1);
        assert_eq!(select_style_reference(&set, 2, table(&M)).unwrap(), 0);
    }

    #[test]
    fn ties_go_low_and_small_sets_fail() {
        let set = [0usize, 1, 2, 3];
        assert_eq!(select_style_reference(&set, 3, |_, _| 0.5).unwrap(), 0);
        assert_eq!(select_style_reference(&set, 0, |_, _| 0.5).unwrap(), 1);
        assert!(select_style_reference(&[0usize], 0, |_, _| 1.0).is_err());
    }
}
