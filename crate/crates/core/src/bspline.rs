//! Clamped B-spline dictionary on [0, 1] with equally spaced breakpoints.

#[derive(Debug, Clone)]
pub struct BSplineDictionary {
    degree: usize,
    knots: Vec<f64>,
    breakpoints: Vec<f64>,
}

impl BSplineDictionary {
    /// `n_breaks` equally spaced breakpoints including both endpoints.
    pub fn uniform(n_breaks: usize, degree: usize) -> Self {
        assert!(n_breaks >= 2 && degree >= 1);
        let breakpoints: Vec<f64> = (0..n_breaks)
            .map(|i| i as f64 / (n_breaks - 1) as f64)
            .collect();
        let mut knots = vec![0.0; degree];
        knots.extend_from_slice(&breakpoints);
        knots.extend(std::iter::repeat(1.0).take(degree));
        BSplineDictionary {
            degree,
            knots,
            breakpoints,
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Coefficients of the monomial `x^k` (`k ≤ degree`): the blossom of
    /// `x^k` at the interior knots of each basis function.
    pub fn monomial_coefficients(&self, k: usize) -> Vec<f64> {
        let p = self.degree;
        assert!(k <= p);
        let binom = (0..k).fold(1.0, |acc, j| acc * (p - j) as f64 / (j + 1) as f64);
        (0..self.dim())
            .map(|i| {
                // Elementary symmetric polynomial e_k(t_{i+1}, …, t_{i+p}).
                let mut e = vec![0.0; k + 1];
                e[0] = 1.0;
                for t in &self.knots[i + 1..=i + p] {
                    for j in (1..=k).rev() {
                        e[j] += e[j - 1] * t;
                    }
                }
                e[k] / binom
            })
            .collect()
    }

    fn span(&self, x: f64) -> usize {
        let p = self.degree;
        let n = self.dim() - 1;
        if x >= self.knots[n + 1] {
            return n;
        }
        if x <= self.knots[p] {
            return p;
        }
        let (mut lo, mut hi) = (p, n + 1);
        let mut mid = (lo + hi) / 2;
        while x < self.knots[mid] || x >= self.knots[mid + 1] {
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
            mid = (lo + hi) / 2;
        }
        mid
    }

    /// Nonzero basis values at `x`: returns the index of the first nonzero
    /// function and writes `degree + 1` values into `out`.
    pub fn eval_nonzero(&self, x: f64, out: &mut [f64]) -> usize {
        let x = x.clamp(0.0, 1.0);
        let p = self.degree;
        let span = self.span(x);
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        span - p
    }

    /// `order`-th derivatives of the nonzero basis functions at `x`.
    pub fn eval_derivative_nonzero(&self, x: f64, order: usize, out: &mut [f64]) -> usize {
        let x = x.clamp(0.0, 1.0);
        let p = self.degree;
        let span = self.span(x);
        let first = span - p;
        if order > p {
            out[..=p].iter_mut().for_each(|v| *v = 0.0);
            return first;
        }
        // Triangular table of lower-degree basis values (Piegl & Tiller A2.3).
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        if order == 0 {
            for j in 0..=p {
                out[j] = ndu[j][p];
            }
            return first;
        }
        let k = order;
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            let mut d = 0.0;
            for kk in 1..=k {
                d = 0.0;
                let rk = r as isize - kk as isize;
                let pk = p - kk;
                if r >= kk {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { kk - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][kk] = -a[s1][kk - 1] / ndu[pk + 1][r];
                    d += a[s2][kk] * ndu[r][pk];
                }
                std::mem::swap(&mut s1, &mut s2);
            }
            out[r] = d;
        }
        let mut fac = p as f64;
        for j in 1..k {
            fac *= (p - j) as f64;
        }
        for v in out[..=p].iter_mut() {
            *v *= fac;
        }
        first
    }
}
