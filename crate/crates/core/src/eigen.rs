//! Eigenvalues of a real nonsymmetric matrix: balancing, Householder
//! reduction to upper Hessenberg form, then Francis double-shift QR.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EigenError {
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("QR iteration did not converge for eigenvalue {0}")]
    NoConvergence(usize),
}

const MAX_ITS_PER_EIGENVALUE: usize = 60;

/// 1-based square buffer so the QR sweep reads like the classical algorithm.
struct Mat {
    n: usize,
    a: Vec<f64>,
}

impl Mat {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * (self.n + 1) + j]
    }
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * (self.n + 1) + j] = v;
    }
    fn add(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * (self.n + 1) + j] += v;
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// All eigenvalues, sorted by descending real part then descending imaginary part.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>, EigenError> {
    let (r, c) = a.shape();
    if r != c {
        return Err(EigenError::NotSquare(r, c));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(EigenError::NonFinite);
    }
    let n = r;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut m = Mat {
        n,
        a: vec![0.0; (n + 1) * (n + 1)],
    };
    for i in 0..n {
        for j in 0..n {
            m.set(i + 1, j + 1, a[(i, j)]);
        }
    }
    balance(&mut m);
    hessenberg(&mut m);
    let mut out = hqr(&mut m)?;
    out.sort_by(|x, y| {
        y.re.partial_cmp(&x.re)
            .unwrap()
            .then(y.im.partial_cmp(&x.im).unwrap())
    });
    Ok(out)
}

fn balance(m: &mut Mat) {
    const RADIX: f64 = 2.0;
    let n = m.n;
    let sqrdx = RADIX * RADIX;
    let mut done = false;
    while !done {
        done = true;
        for i in 1..=n {
            let (mut c, mut r) = (0.0, 0.0);
            for j in 1..=n {
                if j != i {
                    c += m.at(j, i).abs();
                    r += m.at(i, j).abs();
                }
            }
            if c != 0.0 && r != 0.0 {
                let mut g = r / RADIX;
                let mut f = 1.0;
                let s = c + r;
                while c < g {
                    f *= RADIX;
                    c *= sqrdx;
                }
                g = r * RADIX;
                while c > g {
                    f /= RADIX;
                    c /= sqrdx;
                }
                if (c + r) / f < 0.95 * s {
                    done = false;
                    let g = 1.0 / f;
                    for j in 1..=n {
                        m.set(i, j, m.at(i, j) * g);
                    }
                    for j in 1..=n {
                        m.set(j, i, m.at(j, i) * f);
                    }
                }
            }
        }
    }
}

/// Householder similarity reduction to upper Hessenberg form.
fn hessenberg(m: &mut Mat) {
    let n = m.n;
    if n < 3 {
        return;
    }
    let mut v = vec![0.0; n + 1];
    for k in 1..=n - 2 {
        let norm: f64 = ((k + 1)..=n).map(|i| m.at(i, k).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = -sign(norm, m.at(k + 1, k));
        for i in (k + 1)..=n {
            v[i] = m.at(i, k);
        }
        v[k + 1] -= alpha;
        let vnorm2: f64 = ((k + 1)..=n).map(|i| v[i] * v[i]).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // A <- (I - 2vv'/v'v) A
        for j in 1..=n {
            let dot: f64 = ((k + 1)..=n).map(|i| v[i] * m.at(i, j)).sum();
            let f = 2.0 * dot / vnorm2;
            for i in (k + 1)..=n {
                m.add(i, j, -f * v[i]);
            }
        }
        // A <- A (I - 2vv'/v'v)
        for i in 1..=n {
            let dot: f64 = ((k + 1)..=n).map(|j| m.at(i, j) * v[j]).sum();
            let f = 2.0 * dot / vnorm2;
            for j in (k + 1)..=n {
                m.add(i, j, -f * v[j]);
            }
        }
        for i in (k + 2)..=n {
            m.set(i, k, 0.0);
        }
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix.
fn hqr(m: &mut Mat) -> Result<Vec<Complex64>, EigenError> {
    let n = m.n;
    let mut wr = vec![0.0; n + 1];
    let mut wi = vec![0.0; n + 1];
    let mut anorm = 0.0;
    for i in 1..=n {
        for j in i.saturating_sub(1).max(1)..=n {
            anorm += m.at(i, j).abs();
        }
    }
    let mut nn = n;
    let mut t = 0.0;
    while nn >= 1 {
        let mut its = 0;
        loop {
            let mut l = nn;
            while l >= 2 {
                let mut s = m.at(l - 1, l - 1).abs() + m.at(l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if m.at(l, l - 1).abs() + s == s {
                    m.set(l, l - 1, 0.0);
                    break;
                }
                l -= 1;
            }
            let mut x = m.at(nn, nn);
            if l == nn {
                wr[nn] = x + t;
                wi[nn] = 0.0;
                nn -= 1;
            } else {
                let mut y = m.at(nn - 1, nn - 1);
                let mut w = m.at(nn, nn - 1) * m.at(nn - 1, nn);
                if l == nn - 1 {
                    let p = 0.5 * (y - x);
                    let q = p * p + w;
                    let mut z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        z = p + sign(z, p);
                        wr[nn - 1] = x + z;
                        wr[nn] = x + z;
                        if z != 0.0 {
                            wr[nn] = x - w / z;
                        }
                        wi[nn - 1] = 0.0;
                        wi[nn] = 0.0;
                    } else {
                        wr[nn - 1] = x + p;
                        wr[nn] = x + p;
                        wi[nn - 1] = -z;
                        wi[nn] = z;
                    }
                    nn -= 2;
                } else {
                    if its == MAX_ITS_PER_EIGENVALUE {
                        return Err(EigenError::NoConvergence(nn));
                    }
                    if its == 10 || its == 20 || its == 40 {
                        // exceptional shift
                        t += x;
                        for i in 1..=nn {
                            m.add(i, i, -x);
                        }
                        let s = m.at(nn, nn - 1).abs() + m.at(nn - 1, nn - 2).abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    let (mut p, mut q, mut r, mut z);
                    let mut mm = nn - 2;
                    loop {
                        z = m.at(mm, mm);
                        r = x - z;
                        let s = y - z;
                        p = (r * s - w) / m.at(mm + 1, mm) + m.at(mm, mm + 1);
                        q = m.at(mm + 1, mm + 1) - z - r - s;
                        r = m.at(mm + 2, mm + 1);
                        let s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if mm == l {
                            break;
                        }
                        let u = m.at(mm, mm - 1).abs() * (q.abs() + r.abs());
                        let v = p.abs() * (m.at(mm - 1, mm - 1).abs() + z.abs() + m.at(mm + 1, mm + 1).abs());
                        if u + v == v {
                            break;
                        }
                        mm -= 1;
                    }
                    for i in (mm + 2)..=nn {
                        m.set(i, i - 2, 0.0);
                        if i != mm + 2 {
                            m.set(i, i - 3, 0.0);
                        }
                    }
                    let mut k = mm;
                    while k + 1 <= nn {
                        if k != mm {
                            p = m.at(k, k - 1);
                            q = m.at(k + 1, k - 1);
                            r = 0.0;
                            if k != nn - 1 {
                                r = m.at(k + 2, k - 1);
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let s = sign((p * p + q * q + r * r).sqrt(), p);
                        if s != 0.0 {
                            if k == mm {
                                if l != mm {
                                    m.set(k, k - 1, -m.at(k, k - 1));
                                }
                            } else {
                                m.set(k, k - 1, -s * x);
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..=nn {
                                let mut pp = m.at(k, j) + q * m.at(k + 1, j);
                                if k != nn - 1 {
                                    pp += r * m.at(k + 2, j);
                                    m.add(k + 2, j, -pp * z);
                                }
                                m.add(k + 1, j, -pp * y);
                                m.add(k, j, -pp * x);
                            }
                            let mmin = if nn < k + 3 { nn } else { k + 3 };
                            for i in l..=mmin {
                                let mut pp = x * m.at(i, k) + y * m.at(i, k + 1);
                                if k != nn - 1 {
                                    pp += z * m.at(i, k + 2);
                                    m.add(i, k + 2, -pp * r);
                                }
                                m.add(i, k + 1, -pp * q);
                                m.add(i, k, -pp);
                            }
                        }
                        k += 1;
                    }
                }
            }
            if nn < 2 || l >= nn.saturating_sub(1) {
                break;
            }
        }
    }
    Ok((1..=n).map(|i| Complex64::new(wr[i], wi[i])).collect())
}
