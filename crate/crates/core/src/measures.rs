//! Finite measures on [0,1] and on the infinite simplex.
//!
//! A measure on the unit interval is a finite mixture of point atoms and Beta
//! components. Mixed moments integral of x^j (1-x)^l are exact: atoms
//! contribute monomials, a Beta(a,b) component contributes the rising-factorial
//! ratio B(a+j, b+l) / B(a,b), evaluated as an interleaved product so no
//! intermediate overflows or underflows.
//!
//! JSON schema (serde): `{"atoms": [[x, w], ...], "beta": [[alpha, beta, w], ...]}`.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MeasureError {
    #[error("atom location {x} outside [0,1]")]
    AtomOutOfRange { x: f64 },
    #[error("weight {w} must be positive and finite")]
    BadWeight { w: f64 },
    #[error("Beta parameters ({alpha}, {beta}) must be positive and finite")]
    BadBetaParams { alpha: f64, beta: f64 },
    #[error("moment orders j + l = {got} exceed the supported 64")]
    MomentOrderTooLarge { got: u32 },
    #[error("sampling requires a probability measure; total mass is {mass}")]
    NotAProbability { mass: f64 },
    #[error("simplex atom coordinates must be positive, non-increasing, sum <= 1 and carry positive squared mass")]
    BadSimplexAtom,
    #[error("measure has no mass")]
    Empty,
}

/// Finite measure on [0,1]: point atoms plus weighted Beta densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureOnUnitInterval {
    /// `[x, weight]` pairs, 0 <= x <= 1, weight > 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atoms: Vec<[f64; 2]>,
    /// `[alpha, beta, weight]` triples, alpha, beta, weight > 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub beta: Vec<[f64; 3]>,
}

impl MeasureOnUnitInterval {
    pub fn new(atoms: Vec<[f64; 2]>, beta: Vec<[f64; 3]>) -> Result<Self, MeasureError> {
        let m = MeasureOnUnitInterval { atoms, beta };
        m.validate()?;
        Ok(m)
    }

    /// Unit point mass at x.
    pub fn dirac(x: f64) -> Self {
        MeasureOnUnitInterval::new(vec![[x, 1.0]], vec![]).expect("unit atom is valid")
    }

    /// Unit-mass Beta(alpha, beta) component.
    pub fn beta_measure(alpha: f64, beta: f64) -> Self {
        MeasureOnUnitInterval::new(vec![], vec![[alpha, beta, 1.0]]).expect("beta params checked")
    }

    /// Uniform measure on [0,1] (Beta(1,1)).
    pub fn uniform() -> Self {
        Self::beta_measure(1.0, 1.0)
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        for &[x, w] in &self.atoms {
            if !(0.0..=1.0).contains(&x) || !x.is_finite() {
                return Err(MeasureError::AtomOutOfRange { x });
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(MeasureError::BadWeight { w });
            }
        }
        for &[a, b, w] in &self.beta {
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(MeasureError::BadBetaParams { alpha: a, beta: b });
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(MeasureError::BadWeight { w });
            }
        }
        if self.atoms.is_empty() && self.beta.is_empty() {
            return Err(MeasureError::Empty);
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a[1]).sum::<f64>() + self.beta.iter().map(|b| b[2]).sum::<f64>()
    }

    /// Exact mixed moment: integral of x^j (1-x)^l d(measure).
    pub fn moment(&self, j: u32, l: u32) -> Result<f64, MeasureError> {
        if j + l > 64 {
            return Err(MeasureError::MomentOrderTooLarge { got: j + l });
        }
        let mut total = 0.0;
        for &[x, w] in &self.atoms {
            total += w * x.powi(j as i32) * (1.0 - x).powi(l as i32);
        }
        for &[a, b, w] in &self.beta {
            total += w * beta_moment(a, b, j, l);
        }
        Ok(total)
    }

    /// Draw from the measure; requires total mass 1 (within 1e-9).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64, MeasureError> {
        let mass = self.total_mass();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(MeasureError::NotAProbability { mass });
        }
        let mut u: f64 = rng.random::<f64>() * mass;
        for &[x, w] in &self.atoms {
            if u < w {
                return Ok(x);
            }
            u -= w;
        }
        for &[a, b, w] in &self.beta {
            if u < w {
                let dist = rand_distr::Beta::new(a, b).expect("params validated");
                return Ok(dist.sample(rng));
            }
            u -= w;
        }
        // Floating-point slack: fall back to the last component.
        if let Some(&[x, _]) = self.atoms.last() {
            if self.beta.is_empty() {
                return Ok(x);
            }
        }
        let [a, b, _] = self.beta[self.beta.len() - 1];
        Ok(rand_distr::Beta::new(a, b).expect("params validated").sample(rng))
    }

    /// Structural report; callers decide which findings matter in context
    /// (an atom at zero is fine for a plain coalescent driving measure but
    /// not for the within-deme reproduction measure).
    pub fn diagnostics(&self) -> MeasureDiagnostics {
        let mut issues = Vec::new();
        if let Err(e) = self.validate() {
            issues.push(e.to_string());
        }
        let atom_at_zero = self.atoms.iter().any(|&[x, _]| x == 0.0);
        if atom_at_zero {
            issues.push("atom at zero".to_string());
        }
        MeasureDiagnostics { total_mass: self.total_mass(), atom_at_zero, issues }
    }

    pub fn is_probability(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= 1e-9
    }
}

/// B(a+j, b+l) / B(a, b) as an interleaved rising-factorial ratio.
fn beta_moment(a: f64, b: f64, j: u32, l: u32) -> f64 {
    let mut r = 1.0;
    for i in 0..j {
        r *= (a + i as f64) / (a + b + i as f64);
    }
    for i in 0..l {
        r *= (b + i as f64) / (a + b + (j + i) as f64);
    }
    r
}

#[derive(Debug, Clone)]
pub struct MeasureDiagnostics {
    pub total_mass: f64,
    pub atom_at_zero: bool,
    pub issues: Vec<String>,
}

/// One atom of a simplex measure: finitely many positive coordinates in
/// non-increasing order, summing to at most 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexAtom {
    pub coords: Vec<f64>,
    pub weight: f64,
}

/// Finite measure on the infinite simplex, split as a Kingman component
/// (mass at the zero sequence) plus atoms with positive coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiMeasure {
    /// Weight of the atom at zero (binary-merger component).
    #[serde(default)]
    pub kingman_mass: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atoms: Vec<SimplexAtom>,
}

impl XiMeasure {
    pub fn new(kingman_mass: f64, atoms: Vec<SimplexAtom>) -> Result<Self, MeasureError> {
        if !(kingman_mass >= 0.0 && kingman_mass.is_finite()) {
            return Err(MeasureError::BadWeight { w: kingman_mass });
        }
        for atom in &atoms {
            if !(atom.weight > 0.0 && atom.weight.is_finite()) {
                return Err(MeasureError::BadWeight { w: atom.weight });
            }
            let coords = &atom.coords;
            let ok = !coords.is_empty()
                && coords.iter().all(|&x| x > 0.0 && x.is_finite())
                && coords.windows(2).all(|w| w[0] >= w[1])
                && coords.iter().sum::<f64>() <= 1.0 + 1e-12;
            if !ok {
                return Err(MeasureError::BadSimplexAtom);
            }
        }
        Ok(XiMeasure { kingman_mass, atoms })
    }

    /// Pure Kingman measure (unit mass at zero).
    pub fn kingman() -> Self {
        XiMeasure { kingman_mass: 1.0, atoms: Vec::new() }
    }

    /// Embed a measure on [0,1]: each atom (x, w) becomes the simplex atom
    /// (x, 0, 0, ...) carrying weight w. Only atomic measures embed exactly.
    pub fn from_interval_atoms(lambda: &MeasureOnUnitInterval) -> Result<Self, MeasureError> {
        let mut atoms = Vec::new();
        let mut kingman = 0.0;
        for &[x, w] in &lambda.atoms {
            if x == 0.0 {
                // An atom at zero is exactly the binary-merger part: both
                // conventions put a 1/x^2 (resp. x^{-2} via x^{k-2}) in front.
                kingman += w;
            } else {
                // Weight-preserving: the 1/(sum of squares) factor in the
                // simplex rate cancels the x^{k} vs x^{k-2} exponent shift.
                atoms.push(SimplexAtom { coords: vec![x], weight: w });
            }
        }
        XiMeasure::new(kingman, atoms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Adaptive Simpson quadrature, test-only oracle for Beta moments.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        let whole = simpson(f, a, b);
        let m = 0.5 * (a + b);
        let halves = simpson(f, a, m) + simpson(f, m, b);
        if depth == 0 || (halves - whole).abs() <= 15.0 * tol {
            halves + (halves - whole) / 15.0
        } else {
            adaptive_simpson(f, a, m, tol / 2.0, depth - 1)
                + adaptive_simpson(f, m, b, tol / 2.0, depth - 1)
        }
    }

    fn ln_beta(a: f64, b: f64) -> f64 {
        lgamma(a) + lgamma(b) - lgamma(a + b)
    }

    /// Lanczos log-gamma, tested range a,b in [1, 20].
    fn lgamma(x: f64) -> f64 {
        const G: [f64; 9] = [
            0.99999999999980993,
            676.5203681218851,
            -1259.1392167224028,
            771.32342877765313,
            -176.61502916214059,
            12.507343278686905,
            -0.13857109526572012,
            9.9843695780195716e-6,
            1.5056327351493116e-7,
        ];
        if x < 0.5 {
            return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - lgamma(1.0 - x);
        }
        let x = x - 1.0;
        let mut a = G[0];
        let t = x + 7.5;
        for (i, &g) in G.iter().enumerate().skip(1) {
            a += g / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    #[test]
    fn beta22_second_moment() {
        let m = MeasureOnUnitInterval::beta_measure(2.0, 2.0);
        assert!((m.moment(2, 0).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn dirac_moments_are_monomials() {
        let m = MeasureOnUnitInterval::dirac(0.5);
        assert!((m.moment(3, 2).unwrap() - 0.5f64.powi(5)).abs() < 1e-16);
        let at_zero = MeasureOnUnitInterval::dirac(0.0);
        assert_eq!(at_zero.moment(0, 0).unwrap(), 1.0);
        assert_eq!(at_zero.moment(1, 0).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_matches_quadrature_on_random_mixtures() {
        // Oracle: adaptive Simpson on the mixture density. Draws keep
        // alpha, beta >= 1 so the integrand stays bounded at the endpoints.
        let mut rng = ChaCha8Rng::seed_from_u64(0xBE7A);
        for _ in 0..100 {
            let n_beta = rng.random_range(1..=3);
            let beta: Vec<[f64; 3]> = (0..n_beta)
                .map(|_| {
                    [
                        1.0 + 9.0 * rng.random::<f64>(),
                        1.0 + 9.0 * rng.random::<f64>(),
                        0.1 + rng.random::<f64>(),
                    ]
                })
                .collect();
            let m = MeasureOnUnitInterval::new(vec![], beta.clone()).unwrap();
            let j = rng.random_range(0..=6u32);
            let l = rng.random_range(0..=(10 - j).min(6));
            let integrand = move |x: f64| -> f64 {
                beta.iter()
                    .map(|&[a, b, w]| {
                        let log_density = (a - 1.0) * x.max(1e-300).ln()
                            + (b - 1.0) * (1.0 - x).max(1e-300).ln()
                            - ln_beta(a, b);
                        w * log_density.exp()
                    })
                    .sum::<f64>()
                    * x.powi(j as i32)
                    * (1.0 - x).powi(l as i32)
            };
            let oracle = adaptive_simpson(&integrand, 0.0, 1.0, 1e-13, 40);
            let exact = m.moment(j, l).unwrap();
            assert!(
                (exact - oracle).abs() < 1e-10,
                "j={j} l={l}: closed form {exact} vs quadrature {oracle}"
            );
        }
    }

    #[test]
    fn binomial_expansion_recovers_total_mass() {
        // sum_k C(b,k) x^k (1-x)^(b-k) = 1, so the moment sum gives the mass.
        let m = MeasureOnUnitInterval::new(
            vec![[0.3, 0.4], [1.0, 0.2]],
            vec![[2.0, 5.0, 0.7], [0.5, 0.5, 0.3]],
        )
        .unwrap();
        for b in [1u32, 4, 9] {
            let sum: f64 = (0..=b)
                .map(|k| crate::comb::binomial(b as u64, k as u64) as f64 * m.moment(k, b - k).unwrap())
                .sum();
            assert!((sum - m.total_mass()).abs() < 1e-12, "b={b}");
        }
    }

    #[test]
    fn moment_order_guard() {
        let m = MeasureOnUnitInterval::uniform();
        assert!(m.moment(40, 25).is_err());
        assert!(m.moment(32, 32).is_ok());
    }

    #[test]
    fn sampling_rejects_unnormalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MeasureOnUnitInterval::new(vec![[0.5, 2.0]], vec![]).unwrap();
        assert!(matches!(m.sample(&mut rng), Err(MeasureError::NotAProbability { .. })));
    }

    #[test]
    fn sample_mean_matches_first_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = MeasureOnUnitInterval::new(vec![[0.2, 0.5]], vec![[2.0, 2.0, 0.5]]).unwrap();
        let reps = 200_000;
        let mean: f64 =
            (0..reps).map(|_| m.sample(&mut rng).unwrap()).sum::<f64>() / reps as f64;
        let expected = m.moment(1, 0).unwrap();
        // 3 sigma with variance bounded by 1/4.
        assert!((mean - expected).abs() < 3.0 * 0.5 / (reps as f64).sqrt());
    }

    #[test]
    fn diagnostics_flag_atom_at_zero_without_judging() {
        let m = MeasureOnUnitInterval::dirac(0.0);
        let d = m.diagnostics();
        assert!(d.atom_at_zero);
        assert!((d.total_mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn validation_errors() {
        assert!(MeasureOnUnitInterval::new(vec![[1.5, 1.0]], vec![]).is_err());
        assert!(MeasureOnUnitInterval::new(vec![[0.5, -1.0]], vec![]).is_err());
        assert!(MeasureOnUnitInterval::new(vec![], vec![[0.0, 1.0, 1.0]]).is_err());
        assert!(MeasureOnUnitInterval::new(vec![], vec![]).is_err());
    }

    #[test]
    fn json_schema_round_trip() {
        let m = MeasureOnUnitInterval::new(vec![[0.5, 0.25]], vec![[2.0, 3.0, 0.75]]).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"atoms":[[0.5,0.25]],"beta":[[2.0,3.0,0.75]]}"#);
        let back: MeasureOnUnitInterval = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let atoms_only: MeasureOnUnitInterval =
            serde_json::from_str(r#"{"atoms":[[1.0,1.0]]}"#).unwrap();
        assert_eq!(atoms_only.beta.len(), 0);
    }

    #[test]
    fn xi_measure_validation() {
        assert!(XiMeasure::new(1.0, vec![]).is_ok());
        let bad_order = SimplexAtom { coords: vec![0.2, 0.5], weight: 1.0 };
        assert!(XiMeasure::new(0.0, vec![bad_order]).is_err());
        let too_heavy = SimplexAtom { coords: vec![0.8, 0.4], weight: 1.0 };
        assert!(XiMeasure::new(0.0, vec![too_heavy]).is_err());
        let fine = SimplexAtom { coords: vec![0.5, 0.3], weight: 2.0 };
        assert!(XiMeasure::new(0.5, vec![fine]).is_ok());
    }

    #[test]
    fn interval_embedding_preserves_weights_and_splits_off_kingman_part() {
        let lambda = MeasureOnUnitInterval::new(vec![[0.5, 2.0], [0.0, 0.3]], vec![]).unwrap();
        let xi = XiMeasure::from_interval_atoms(&lambda).unwrap();
        assert!((xi.kingman_mass - 0.3).abs() < 1e-15, "atom at zero becomes the binary part");
        assert_eq!(xi.atoms.len(), 1);
        assert_eq!(xi.atoms[0].coords, vec![0.5]);
        assert!((xi.atoms[0].weight - 2.0).abs() < 1e-15, "positive atoms keep their weight");
    }
}
