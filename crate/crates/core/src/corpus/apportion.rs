//! Largest-remainder (Hamilton) apportionment.

/// Splits `n` seats across `weights` in proportion. Floors are assigned
/// first and leftover seats go to the largest fractional remainders; equal
/// remainders favour the lower index. Counts always sum to `n`.
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut seats: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n.saturating_sub(assigned);
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        seats[i] += 1;
        left -= 1;
    }
    seats
}

/// Exact integer variant: apportions `n` seats over groups with sizes
/// `counts`, quota `counts[i] * n / sum(counts)`, without floating point.
pub fn apportion_counts(n: usize, counts: &[usize]) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let mut seats: Vec<usize> = counts.iter().map(|&c| c * n / total).collect();
    let rems: Vec<usize> = counts.iter().map(|&c| c * n % total).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    let mut left = n - seats.iter().sum::<usize>();
    for &i in &order {
        if left == 0 {
            break;
        }
        seats[i] += 1;
        left -= 1;
    }
    seats
}
