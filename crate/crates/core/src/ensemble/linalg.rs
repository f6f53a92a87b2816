//! Tiny dense linear algebra for the diversity term: determinants and
//! adjugates of the small Gram matrices built from team predictions. Sizes
//! are bounded by the team size, so direct O(n^3) LU and cofactor expansion
//! are plenty.

/// Determinant by LU decomposition with partial pivoting.
pub fn det(a: &[f64], n: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return 1.0;
    }
    let mut m = a.to_vec();
    let mut sign = 1.0;
    let mut d = 1.0;
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if m[row * n + col].abs() > m[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if m[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            sign = -sign;
        }
        let p = m[col * n + col];
        d *= p;
        for row in col + 1..n {
            let f = m[row * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
        }
    }
    sign * d
}

/// Adjugate (transposed cofactor matrix). Satisfies A * adj(A) = det(A) * I
/// and equals the gradient of det with respect to A's transpose; for the
/// symmetric Gram matrices used here it is itself symmetric. Works at rank
/// deficiency where det * inverse would not.
pub fn adjugate(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return vec![];
    }
    if n == 1 {
        return vec![1.0];
    }
    let mut adj = vec![0.0; n * n];
    let mut minor = vec![0.0; (n - 1) * (n - 1)];
    for i in 0..n {
        for j in 0..n {
            let mut t = 0;
            for r in 0..n {
                if r == i {
                    continue;
                }
                for c in 0..n {
                    if c == j {
                        continue;
                    }
                    minor[t] = a[r * n + c];
                    t += 1;
                }
            }
            let cof = det(&minor, n - 1);
            let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            // adj = transpose of the cofactor matrix.
            adj[j * n + i] = s * cof;
        }
    }
    adj
}
