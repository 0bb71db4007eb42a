use super::{ExprTree, Notation};

/// Token-level Levenshtein distance (unit-cost insert, remove, substitute).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Reconstruction error between two trees: Levenshtein distance of their
/// postfix token sequences.
pub fn edit_distance(a: &ExprTree, b: &ExprTree) -> usize {
    levenshtein(&a.to_notation(Notation::Postfix), &b.to_notation(Notation::Postfix))
}
