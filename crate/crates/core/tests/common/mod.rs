//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use demand_dml_core::rng::{seeded, standard_normal};
use demand_dml_core::Matrix;

/// OLS through the normal equations, solved by Gauss-Jordan elimination
/// with partial pivoting. `x` rows exclude the intercept unless added.
pub fn ols_normal_equations(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            a[i][p] += row[i] * yi;
        }
    }
    for c in 0..p {
        let piv = (c..p)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, piv);
        let d = a[c][c];
        assert!(d.abs() > 1e-300, "singular normal equations");
        for v in a[c].iter_mut() {
            *v /= d;
        }
        for r in 0..p {
            if r != c {
                let f = a[r][c];
                if f != 0.0 {
                    for k in 0..=p {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
    }
    a.iter().map(|r| r[p]).collect()
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Hubert–Arabie adjusted Rand index.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; kb]; ka];
    for (&i, &j) in a.iter().zip(b) {
        table[i][j] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&n| choose2(n)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = choose2(a.len());
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Brute-force assignment: `perm[est] = truth` maximizing agreement.
pub fn best_label_match(truth: &[usize], est: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![vec![0usize; k]; k];
    for (&t, &e) in truth.iter().zip(est) {
        counts[e][t] += 1;
    }
    permutations(k)
        .into_iter()
        .max_by_key(|p| (0..k).map(|e| counts[e][p[e]]).sum::<usize>())
        .unwrap()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

pub fn gaussian_matrix(n: usize, p: usize, seed: u64) -> Matrix {
    let mut rng = seeded(seed);
    let data = (0..n * p).map(|_| standard_normal(&mut rng)).collect();
    Matrix::from_vec(n, p, data).unwrap()
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows().map(|r| r.to_vec()).collect()
}
