fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf.push(v[i]);
            i += 1;
        } else {
            buf.push(v[j]);
            inv += (mid - i) as u64;
            j += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Sample Kendall's tau of tie-free data in O(n log n).
pub fn kendall(x: &[f64], y: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let disc = count_inversions(&mut ys, &mut Vec::with_capacity(x.len())) as f64;
    let n = x.len() as f64;
    1.0 - 4.0 * disc / (n * (n - 1.0))
}
