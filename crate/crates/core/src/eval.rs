//! Agreement between two labelings up to a renaming of labels.

/// Best fraction of vertices on which `a` and `b` agree under an injective
/// matching of labels. Exhaustive over matchings when both sides have at most
/// eight labels, greedy on the contingency table otherwise.
pub fn label_agreement(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    if a.is_empty() {
        return 1.0;
    }
    best_matching_count(a, b) as f64 / a.len() as f64
}

/// Number of vertices whose label differs from `b` after the best matching.
pub fn disagreement_count(a: &[usize], b: &[usize]) -> usize {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    a.len() - best_matching_count(a, b)
}

fn best_matching_count(a: &[usize], b: &[usize]) -> usize {
    let ka = a.iter().copied().max().map_or(0, |m| m + 1);
    let kb = b.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    if ka <= 8 && kb <= 8 {
        exhaustive(&table, 0, &mut vec![false; kb])
    } else {
        greedy(table)
    }
}

fn exhaustive(table: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
    if row == table.len() {
        return 0;
    }
    // leaving this row unmatched is allowed when it has more labels than the other side
    let mut best = exhaustive(table, row + 1, used);
    for col in 0..used.len() {
        if !used[col] {
            used[col] = true;
            best = best.max(table[row][col] + exhaustive(table, row + 1, used));
            used[col] = false;
        }
    }
    best
}

fn greedy(mut table: Vec<Vec<usize>>) -> usize {
    let mut total = 0;
    loop {
        let mut best = (0, 0, 0);
        for (i, row) in table.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        if best.2 == 0 {
            return total;
        }
        total += best.2;
        table[best.0].iter_mut().for_each(|v| *v = 0);
        table.iter_mut().for_each(|row| row[best.1] = 0);
    }
}
