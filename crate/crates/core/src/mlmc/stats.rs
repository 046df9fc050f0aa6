//! Power sums and unbiased central-moment estimators (h-statistics).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `S[a][b] = sum_i X+_i^a X-_i^b` for `a, b <= 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSums {
    pub n: usize,
    s: [[f64; 5]; 5],
}

impl PowerSums {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.s[a][b]
    }
}

pub fn power_sums(x_plus: &[f64], x_minus: &[f64]) -> Result<PowerSums> {
    if x_plus.len() != x_minus.len() {
        return Err(Error::Shape(format!(
            "power sums of vectors with lengths {} and {}",
            x_plus.len(),
            x_minus.len()
        )));
    }
    let mut s = [[0.0; 5]; 5];
    for (&p, &m) in x_plus.iter().zip(x_minus) {
        let mut pa = 1.0;
        for row in s.iter_mut() {
            let mut mb = 1.0;
            for v in row.iter_mut() {
                *v += pa * mb;
                mb *= m;
            }
            pa *= p;
        }
    }
    Ok(PowerSums { n: x_plus.len(), s })
}

fn sums(x: &[f64]) -> [f64; 5] {
    let mut s = [0.0; 5];
    for &v in x {
        let mut p = 1.0;
        for e in s.iter_mut() {
            *e += p;
            p *= v;
        }
    }
    s
}

fn need(x: &[f64], r: usize) -> Result<()> {
    if x.len() < r {
        return Err(Error::InsufficientSamples(format!(
            "order-{r} h-statistic needs {r} samples, got {}",
            x.len()
        )));
    }
    Ok(())
}

/// Unbiased variance.
pub fn h2(x: &[f64]) -> Result<f64> {
    need(x, 2)?;
    // Centring first keeps the power sums well scaled.
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let [n, s1, s2, ..] = sums(&c);
    Ok((n * s2 - s1 * s1) / (n * (n - 1.0)))
}

/// Unbiased third central moment.
pub fn h3(x: &[f64]) -> Result<f64> {
    need(x, 3)?;
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let [n, s1, s2, s3, _] = sums(&c);
    Ok((2.0 * s1.powi(3) - 3.0 * n * s1 * s2 + n * n * s3) / (n * (n - 1.0) * (n - 2.0)))
}

/// Unbiased fourth central moment.
pub fn h4(x: &[f64]) -> Result<f64> {
    need(x, 4)?;
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let [n, s1, s2, s3, s4] = sums(&c);
    let num = -3.0 * s1.powi(4)
        + 6.0 * n * s1 * s1 * s2
        + (9.0 - 6.0 * n) * s2 * s2
        + (-4.0 * n * n + 8.0 * n - 12.0) * s1 * s3
        + (n.powi(3) - 2.0 * n * n + 3.0 * n) * s4;
    Ok(num / (n * (n - 1.0) * (n - 2.0) * (n - 3.0)))
}

pub fn h_stat(x: &[f64], r: usize) -> Result<f64> {
    match r {
        2 => h2(x),
        3 => h3(x),
        4 => h4(x),
        _ => Err(Error::InvalidParameter(format!(
            "moment order {r} not in 2..=4"
        ))),
    }
}

/// Paired samples of one level. At level 0 there is no coarse partner and
/// the coarse values are taken as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEnsemble {
    pub level: usize,
    pub indices: Vec<u64>,
    pub fine: Vec<f64>,
    pub coarse: Option<Vec<f64>>,
    pub costs: Vec<f64>,
}

impl LevelEnsemble {
    pub fn new(level: usize, fine: Vec<f64>, coarse: Option<Vec<f64>>) -> Result<Self> {
        if let Some(c) = &coarse {
            if c.len() != fine.len() {
                return Err(Error::Shape("fine and coarse sample counts differ".into()));
            }
        }
        if level > 0 && coarse.is_none() {
            return Err(Error::Shape(format!("level {level} needs coarse samples")));
        }
        let n = fine.len();
        Ok(LevelEnsemble {
            level,
            indices: (0..n as u64).collect(),
            fine,
            coarse,
            costs: vec![0.0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }

    pub fn coarse_or_zero(&self) -> Vec<f64> {
        self.coarse
            .clone()
            .unwrap_or_else(|| vec![0.0; self.fine.len()])
    }

    /// `fine - coarse` per sample.
    pub fn differences(&self) -> Vec<f64> {
        match &self.coarse {
            Some(c) => self.fine.iter().zip(c).map(|(f, c)| f - c).collect(),
            None => self.fine.clone(),
        }
    }

    pub fn mean_delta(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Empty(format!("level {} has no samples", self.level)));
        }
        Ok(self.differences().iter().sum::<f64>() / self.len() as f64)
    }

    /// Per-sample variance of `fine - coarse`.
    pub fn var_delta(&self) -> Result<f64> {
        h2(&self.differences())
    }

    /// `h_r(fine) - h_r(coarse)`.
    pub fn delta_h(&self, r: usize) -> Result<f64> {
        if r == 2 {
            return delta_h2(self);
        }
        let fine = h_stat(&self.fine, r)?;
        let coarse = match &self.coarse {
            Some(c) => h_stat(c, r)?,
            None => 0.0,
        };
        Ok(fine - coarse)
    }

    /// Per-sample variance of the centred-square differences, used as the
    /// statistical-error proxy of `delta_h(2)`.
    pub fn var_delta_h2(&self) -> Result<f64> {
        need(&self.fine, 2)?;
        let n = self.len() as f64;
        let coarse = self.coarse_or_zero();
        let mf = self.fine.iter().sum::<f64>() / n;
        let mc = coarse.iter().sum::<f64>() / n;
        let y: Vec<f64> = self
            .fine
            .iter()
            .zip(&coarse)
            .map(|(f, c)| (f - mf).powi(2) - (c - mc).powi(2))
            .collect();
        h2(&y)
    }

    pub fn mean_cost(&self) -> f64 {
        if self.costs.is_empty() {
            0.0
        } else {
            self.costs.iter().sum::<f64>() / self.costs.len() as f64
        }
    }
}

/// `(N S11 - S01 S10) / ((N - 1) N)` with `X+ = fine + coarse`, `X- = fine - coarse`.
pub fn delta_h2(ens: &LevelEnsemble) -> Result<f64> {
    need(&ens.fine, 2)?;
    let coarse = ens.coarse_or_zero();
    // The identity is shift invariant; centring on the fine mean limits cancellation.
    let shift = ens.fine.iter().sum::<f64>() / ens.len() as f64;
    let (plus, minus): (Vec<f64>, Vec<f64>) = ens
        .fine
        .iter()
        .zip(&coarse)
        .map(|(f, c)| {
            let (f, c) = (
                f - shift,
                if ens.coarse.is_some() { c - shift } else { 0.0 },
            );
            (f + c, f - c)
        })
        .unzip();
    let s = power_sums(&plus, &minus)?;
    let n = s.n as f64;
    Ok((n * s.get(1, 1) - s.get(0, 1) * s.get(1, 0)) / ((n - 1.0) * n))
}

fn check_levels(ensembles: &[LevelEnsemble]) -> Result<()> {
    if ensembles.is_empty() {
        return Err(Error::Empty("no level ensembles".into()));
    }
    for (l, e) in ensembles.iter().enumerate() {
        if e.level != l {
            return Err(Error::Shape(format!(
                "ensemble {l} holds level {}",
                e.level
            )));
        }
        if e.is_empty() {
            return Err(Error::Empty(format!("level {l} has no samples")));
        }
    }
    Ok(())
}

/// Telescoping sum of level means.
pub fn mlmc_mean(ensembles: &[LevelEnsemble]) -> Result<f64> {
    check_levels(ensembles)?;
    ensembles.iter().map(LevelEnsemble::mean_delta).sum()
}

/// Telescoping sum of h-statistic differences, `r` in 2..=4.
pub fn mlmc_central_moment(ensembles: &[LevelEnsemble], r: usize) -> Result<f64> {
    check_levels(ensembles)?;
    ensembles.iter().map(|e| e.delta_h(r)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_sum_examples() {
        let s = power_sums(&[2.0], &[0.0]).unwrap();
        assert_eq!((s.get(1, 1), s.get(1, 0), s.get(0, 1)), (0.0, 2.0, 0.0));
        assert_eq!(s.get(0, 0), 1.0);
        let x = [0.3, -1.2, 2.5, 0.0, 4.0];
        let s = power_sums(&x, &[0.0; 5]).unwrap();
        for b in 1..5 {
            for a in 0..5 {
                assert_eq!(s.get(a, b), 0.0);
            }
        }
        assert!(power_sums(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn h_stat_hand_values() {
        assert_eq!(h2(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 5.0 / 3.0);
        assert_eq!(h3(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
        // Exact rational results from the U-statistic definition.
        assert!((h3(&[0.0, 0.0, 3.0]).unwrap() - 9.0).abs() < 1e-13);
        assert!((h4(&[1.0, 2.0, 3.0, 4.0]).unwrap() - 19.0 / 6.0).abs() < 1e-14);
        assert!(h4(&[1.0, 2.0, 3.0]).is_err());
        assert!(h2(&[1.0]).is_err());
        assert!(h_stat(&[1.0, 2.0], 5).is_err());
    }

    #[test]
    fn delta_h2_examples() {
        let f = vec![1.0, 4.0, 2.0, 8.0];
        let e = LevelEnsemble::new(1, f.clone(), Some(f.clone())).unwrap();
        assert_eq!(delta_h2(&e).unwrap(), 0.0);
        let e = LevelEnsemble::new(1, vec![3.0; 5], Some(vec![-1.0; 5])).unwrap();
        assert_eq!(delta_h2(&e).unwrap(), 0.0);
        let e0 = LevelEnsemble::new(0, f.clone(), None).unwrap();
        assert!((delta_h2(&e0).unwrap() - h2(&f).unwrap()).abs() < 1e-14);
        assert!(LevelEnsemble::new(1, f.clone(), None).is_err());
        assert!(LevelEnsemble::new(1, f, Some(vec![1.0])).is_err());
    }

    #[test]
    fn telescoping() {
        let l0 = LevelEnsemble::new(0, vec![1.0, 2.0, 6.0, 3.0], None).unwrap();
        assert_eq!(mlmc_mean(&[l0.clone()]).unwrap(), 3.0);
        let same = vec![5.0, 7.0, 1.0, 0.5];
        let l1 = LevelEnsemble::new(1, same.clone(), Some(same)).unwrap();
        assert_eq!(mlmc_mean(&[l0.clone(), l1.clone()]).unwrap(), 3.0);
        for r in 2..=4 {
            let want = h_stat(&l0.fine, r).unwrap();
            let got = mlmc_central_moment(&[l0.clone(), l1.clone()], r).unwrap();
            assert!((got - want).abs() < 1e-12, "r={r}");
        }
        assert!(mlmc_mean(&[]).is_err());
        assert!(mlmc_mean(&[l1]).is_err());
    }
}
