//! Brute-force reference implementations, written straight from the formulas
//! with explicit loops and no shared code with the library.

use hsomrl::contrastive::LossVariant;
use hsomrl::diffcore::Matrix;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// exp(sign·z_q·z_a) / Σ_{a'} exp(sign·z_q·z_a'), without any max shift.
fn hardness(w: &Matrix, q: usize, set: &[usize], sign: f64) -> Vec<f64> {
    let mut total = 0.0;
    for &a in set {
        total += (sign * dot(w.row(q), w.row(a))).exp();
    }
    set.iter().map(|&a| (sign * dot(w.row(q), w.row(a))).exp() / total).collect()
}

/// Batch-mean contrastive loss with |P|/|N| rescaled hardness weights.
pub fn contrastive(w: &Matrix, labels: &[usize], variant: LossVariant, beta: f64) -> f64 {
    let n = w.rows();
    let (hard_pos, hard_neg) = match variant {
        LossVariant::Scl => (false, false),
        LossVariant::Hg => (false, true),
        LossVariant::Hp => (true, false),
        LossVariant::Hphg => (true, true),
    };
    let mut total = 0.0;
    for q in 0..n {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for a in 0..n {
            if a == q {
                continue;
            }
            if labels[a] == labels[q] {
                pos.push(a);
            } else {
                neg.push(a);
            }
        }
        let wp = if hard_pos {
            hardness(w, q, &pos, -1.0).iter().map(|x| x * pos.len() as f64).collect()
        } else {
            vec![1.0; pos.len()]
        };
        let wn = if hard_neg {
            hardness(w, q, &neg, 1.0).iter().map(|x| x * neg.len() as f64).collect()
        } else {
            vec![1.0; neg.len()]
        };
        let mut z_pos = 0.0;
        for (i, &a) in pos.iter().enumerate() {
            z_pos += wp[i] * (dot(w.row(q), w.row(a)) / beta).exp();
        }
        let mut z_neg = 0.0;
        for (i, &a) in neg.iter().enumerate() {
            z_neg += wn[i] * (dot(w.row(q), w.row(a)) / beta).exp();
        }
        let mut anchor = 0.0;
        for (i, &p) in pos.iter().enumerate() {
            let numerator = wp[i] * (dot(w.row(q), w.row(p)) / beta).exp();
            anchor += -(numerator / (z_pos + z_neg)).ln();
        }
        total += anchor / pos.len() as f64;
    }
    total / n as f64
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

pub fn uniformity(z: &Matrix, t: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..z.rows() {
        for j in 0..z.rows() {
            if i < j {
                sum += (-t * sq_dist(z.row(i), z.row(j))).exp();
                count += 1.0;
            }
        }
    }
    (sum / count).ln()
}

pub fn alignment(a: &Matrix, b: &Matrix) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.rows() {
        sum += sq_dist(a.row(i), b.row(i));
    }
    sum / a.rows() as f64
}

/// τ-expectile of `xs`: the root of Σ |τ - 1(x<m)| (x - m) = 0, found by bisection.
pub fn expectile(xs: &[f64], tau: f64) -> f64 {
    let grad = |m: f64| -> f64 {
        let mut g = 0.0;
        for &x in xs {
            let w = if x < m { 1.0 - tau } else { tau };
            g += w * (x - m);
        }
        g
    };
    let mut lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if grad(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
