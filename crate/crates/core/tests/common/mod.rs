#![allow(dead_code)]

use flexdti::DiffusionTensor6;

/// Cyclic Jacobi eigensolver for symmetric 3×3 matrices. Eigenvalues come
/// back descending, eigenvectors as columns of the returned matrix.
pub fn jacobi_eig(a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = a;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..100 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let diag = a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2);
        if off <= 1e-34 * diag || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for k in 0..3 {
                let (vkp, vkq) = (v[k][p], v[k][q]);
                v[k][p] = c * vkp - s * vkq;
                v[k][q] = s * vkp + c * vkq;
            }
        }
    }
    let mut idx = [0, 1, 2];
    idx.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = idx.map(|i| a[i][i]);
    let mut vecs = [[0.0; 3]; 3];
    for (col, &i) in idx.iter().enumerate() {
        for r in 0..3 {
            vecs[r][col] = v[r][i];
        }
    }
    (values, vecs)
}

pub fn frobenius(a: &DiffusionTensor6, b: &DiffusionTensor6) -> f64 {
    let (ma, mb) = (a.matrix(), b.matrix());
    let mut s = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            s += (ma[r][c] - mb[r][c]).powi(2);
        }
    }
    s.sqrt()
}

pub fn tensor_norm(a: &DiffusionTensor6) -> f64 {
    frobenius(a, &DiffusionTensor6::ZERO)
}

/// Prints one acceptance line and returns whether it passed.
pub fn verdict(id: usize, name: &str, pass: bool, detail: &str) -> bool {
    println!("criterion {id:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}
