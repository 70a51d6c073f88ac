//! Correlation statistics.

use crate::error::{Error, Result};

/// A correlation coefficient. Undefined coefficients (a constant input) are
/// reported as 0 with `degenerate` set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("correlating {} against {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::contract("correlation needs at least two points"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::contract("correlation input contains a non-finite value"));
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        value: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<Correlation> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    // textbook formulas, written independently of the code under test
    fn pearson_ref(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let sx: f64 = a.iter().sum();
        let sy: f64 = b.iter().sum();
        let sxy: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let sxx: f64 = a.iter().map(|x| x * x).sum();
        let syy: f64 = b.iter().map(|y| y * y).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    fn rank_ref(v: &[f64]) -> Vec<f64> {
        // rank = 1 + #smaller + (#equal − 1)/2
        v.iter()
            .map(|x| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let eq = v.iter().filter(|y| *y == x).count() as f64;
                1.0 + less + (eq - 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_reference() {
        let mut rng = Rng::new(17);
        for case in 0..10 {
            let n = 5 + case;
            // quantize some inputs so ties occur
            let mut a: Vec<f64> = (0..n).map(|_| (rng.uniform_f64() * 4.0).floor()).collect();
            a[0] = -1.0;
            let b: Vec<f64> = (0..n).map(|i| a[i] * 0.5 + rng.uniform_f64()).collect();
            let p = pearson(&a, &b).unwrap().value;
            assert!((p - pearson_ref(&a, &b)).abs() < 1e-12);
            let s = spearman(&a, &b).unwrap().value;
            assert!((s - pearson_ref(&rank_ref(&a), &rank_ref(&b))).abs() < 1e-12);
            assert_eq!(average_ranks(&a), rank_ref(&a));
        }
    }

    #[test]
    fn examples() {
        let a = [1.0, 5.0, 2.0, 9.0];
        let s = spearman(&a, &a).unwrap();
        assert_eq!(s, Correlation { value: 1.0, degenerate: false });
        let b: Vec<f64> = a.iter().map(|x| x * x * x).collect();
        assert_eq!(spearman(&a, &b).unwrap().value, 1.0);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_eq!(spearman(&a, &neg).unwrap().value, -1.0);
        let c = spearman(&a, &[2.0; 4]).unwrap();
        assert_eq!(c, Correlation { value: 0.0, degenerate: true });
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
