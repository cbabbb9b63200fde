//! Accuracy and weighted F1 by direct counting over expanded (truth,
//! prediction) pairs. Shares no code with the library.

pub fn expand(conf: &[Vec<u64>]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (t, row) in conf.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat_n((t, p), n as usize));
        }
    }
    pairs
}

pub fn accuracy(pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().filter(|(t, p)| t == p).count() as f64 / pairs.len() as f64
}

pub fn weighted_f1(pairs: &[(usize, usize)], classes: usize) -> f64 {
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for c in 0..classes {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let fp = pairs.iter().filter(|&&(t, p)| t != c && p == c).count() as f64;
        let fn_ = pairs.iter().filter(|&&(t, p)| t == c && p != c).count() as f64;
        let support = tp + fn_;
        // F1 = 2TP / (2TP + FP + FN), which is 0 when P + R = 0
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        total += support / n * f1;
    }
    total
}
