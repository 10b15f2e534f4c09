//! Static model data: the two utility functions, the population split, and
//! the derived interaction functions ψ_k, ψ_k⁺ shared by every other module.

use std::fmt;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("utility of family {family} is not positive on [0,1] (minimum {minimum})")]
    NonPositiveUtility { family: Family, minimum: f64 },
    #[error("population split leaves an empty family (N1={n1}, N2={n2})")]
    DegeneratePopulation { n1: usize, n2: usize },
    #[error("family-1 fraction r1={0} is not in (0,1)")]
    BadFraction(f64),
    #[error("total population N={0} must be at least 2")]
    PopulationTooSmall(usize),
    #[error("argument z={0} is outside [0,1]")]
    OutOfDomain(f64),
    #[error("invalid utility parameters: {0}")]
    BadUtility(String),
}

/// One of the two families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    One,
    Two,
}

impl Family {
    pub const BOTH: [Family; 2] = [Family::One, Family::Two];

    pub fn other(self) -> Family {
        match self {
            Family::One => Family::Two,
            Family::Two => Family::One,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Family::One => 0,
            Family::Two => 1,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index() + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Increasing,
    Decreasing,
    Constant,
}

/// A perceived-utility function on `[0,1]` from one of two closed-form
/// families, so that first and second derivatives are exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UtilityFn {
    /// `slope·z + intercept`
    Linear { slope: f64, intercept: f64 },
    /// `scale·exp(rate·z)`, `scale > 0`
    Exponential { scale: f64, rate: f64 },
}

impl UtilityFn {
    pub fn value(&self, z: f64) -> f64 {
        match *self {
            UtilityFn::Linear { slope, intercept } => slope * z + intercept,
            UtilityFn::Exponential { scale, rate } => scale * (rate * z).exp(),
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            UtilityFn::Linear { slope, .. } => slope,
            UtilityFn::Exponential { scale, rate } => scale * rate * (rate * z).exp(),
        }
    }

    pub fn second_derivative(&self, z: f64) -> f64 {
        match *self {
            UtilityFn::Linear { .. } => 0.0,
            UtilityFn::Exponential { scale, rate } => scale * rate * rate * (rate * z).exp(),
        }
    }

    /// Both families are monotone, so extrema on `[0, upper]` sit at the endpoints.
    pub fn min_on(&self, upper: f64) -> f64 {
        self.value(0.0).min(self.value(upper))
    }

    pub fn max_on(&self, upper: f64) -> f64 {
        self.value(0.0).max(self.value(upper))
    }

    pub fn orientation(&self) -> Orientation {
        let slope = match *self {
            UtilityFn::Linear { slope, .. } => slope,
            UtilityFn::Exponential { rate, .. } => rate,
        };
        if slope > 0.0 {
            Orientation::Increasing
        } else if slope < 0.0 {
            Orientation::Decreasing
        } else {
            Orientation::Constant
        }
    }

    fn check(&self) -> Result<(), ModelError> {
        let finite = match *self {
            UtilityFn::Linear { slope, intercept } => slope.is_finite() && intercept.is_finite(),
            UtilityFn::Exponential { scale, rate } => {
                if !(scale > 0.0) {
                    return Err(ModelError::BadUtility(format!("exponential scale {scale} must be > 0")));
                }
                scale.is_finite() && rate.is_finite()
            }
        };
        if finite {
            Ok(())
        } else {
            Err(ModelError::BadUtility(format!("non-finite parameter in {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilitySpec {
    pub family1: UtilityFn,
    pub family2: UtilityFn,
}

impl UtilitySpec {
    pub fn get(&self, family: Family) -> &UtilityFn {
        match family {
            Family::One => &self.family1,
            Family::Two => &self.family2,
        }
    }

    /// The standard Lotka–Volterra pair `φ₁(z)=a z+b₁`, `φ₂(z)=−a z+b₂`.
    pub fn linear_lv(a: f64, b1: f64, b2: f64) -> Self {
        UtilitySpec {
            family1: UtilityFn::Linear { slope: a, intercept: b1 },
            family2: UtilityFn::Linear { slope: -a, intercept: b2 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// `N1 = round(r1·N)`
    Deterministic,
    /// `N1 ~ Binomial(N, r1)` drawn once from the given seed (quenched disorder).
    BernoulliSampled { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationSpec {
    pub n: usize,
    pub r1: f64,
    pub split: SplitMode,
}

impl PopulationSpec {
    pub fn deterministic(n: usize, r1: f64) -> Self {
        PopulationSpec { n, r1, split: SplitMode::Deterministic }
    }

    /// Resolved family sizes `(N1, N2)`.
    pub fn resolve(&self) -> Result<(usize, usize), ModelError> {
        if !(self.r1 > 0.0 && self.r1 < 1.0) {
            return Err(ModelError::BadFraction(self.r1));
        }
        if self.n < 2 {
            return Err(ModelError::PopulationTooSmall(self.n));
        }
        let n1 = match self.split {
            SplitMode::Deterministic => (self.r1 * self.n as f64).round() as usize,
            SplitMode::BernoulliSampled { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let binomial = Binomial::new(self.n as u64, self.r1).expect("r1 checked above");
                binomial.sample(&mut rng) as usize
            }
        };
        let n2 = self.n - n1.min(self.n);
        if n1 == 0 || n2 == 0 {
            return Err(ModelError::DegeneratePopulation { n1, n2 });
        }
        Ok((n1, n2))
    }
}

/// ψ_k, ψ_k⁺ and ψ_k′ evaluated at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiValues {
    pub psi: f64,
    pub plus: f64,
    pub prime: f64,
}

/// Parameters of a linear Lotka–Volterra model `φ₁=a z+b₁, φ₂=−a z+b₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearLv {
    pub a: f64,
    pub b1: f64,
    pub b2: f64,
}

/// Immutable, validated model. Cheap to clone and safe to share between
/// threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedModel {
    utility: UtilitySpec,
    population: PopulationSpec,
    sizes: [usize; 2],
    reach: [f64; 2],
    orientation: [Orientation; 2],
}

/// Checks every invariant of the utility pair and the population and returns
/// the model handle.
///
/// φ_k is only ever evaluated at `r_j z` or `(N_j/N) z` with `z ∈ [0,1]`, so
/// positivity is required on `[0, max(r_j, N_j/N)]`. This admits the standard
/// pair `φ₂(z) = 1 − z`, which vanishes only at `z = 1`.
pub fn validate(utility: UtilitySpec, population: PopulationSpec) -> Result<ValidatedModel, ModelError> {
    utility.family1.check()?;
    utility.family2.check()?;
    let (n1, n2) = population.resolve()?;
    let n = (n1 + n2) as f64;
    let reach = [
        (1.0 - population.r1).max(n2 as f64 / n),
        population.r1.max(n1 as f64 / n),
    ];
    for family in Family::BOTH {
        let minimum = utility.get(family).min_on(reach[family.index()]);
        if !(minimum > 0.0) {
            return Err(ModelError::NonPositiveUtility { family, minimum });
        }
    }
    Ok(ValidatedModel {
        utility,
        population,
        sizes: [n1, n2],
        reach,
        orientation: [utility.family1.orientation(), utility.family2.orientation()],
    })
}

impl ValidatedModel {
    pub fn utility(&self) -> &UtilitySpec {
        &self.utility
    }

    pub fn population(&self) -> &PopulationSpec {
        &self.population
    }

    pub fn n(&self) -> usize {
        self.sizes[0] + self.sizes[1]
    }

    pub fn family_size(&self, family: Family) -> usize {
        self.sizes[family.index()]
    }

    /// Asymptotic fraction `r_k` (`r₂ = 1 − r₁`).
    pub fn r(&self, family: Family) -> f64 {
        match family {
            Family::One => self.population.r1,
            Family::Two => 1.0 - self.population.r1,
        }
    }

    /// Finite-size fraction `N_k / N`.
    pub fn finite_fraction(&self, family: Family) -> f64 {
        self.family_size(family) as f64 / self.n() as f64
    }

    pub fn phi(&self, family: Family) -> &UtilityFn {
        self.utility.get(family)
    }

    pub fn orientation(&self, family: Family) -> Orientation {
        self.orientation[family.index()]
    }

    /// Both utilities strictly monotone.
    pub fn is_monotone(&self) -> bool {
        self.orientation.iter().all(|o| *o != Orientation::Constant)
    }

    /// φ₁ strictly increasing and φ₂ strictly decreasing.
    pub fn is_lotka_volterra(&self) -> bool {
        self.orientation == [Orientation::Increasing, Orientation::Decreasing]
    }

    /// `Some` iff the utilities have the linear Lotka–Volterra form with a
    /// common slope magnitude `a > 0`.
    pub fn linear_lv(&self) -> Option<LinearLv> {
        match (self.utility.family1, self.utility.family2) {
            (
                UtilityFn::Linear { slope: a, intercept: b1 },
                UtilityFn::Linear { slope: minus_a, intercept: b2 },
            ) if a > 0.0 && minus_a == -a => Some(LinearLv { a, b1, b2 }),
            _ => None,
        }
    }

    /// Upper end of the interval on which φ_k is evaluated.
    pub fn reach(&self, family: Family) -> f64 {
        self.reach[family.index()]
    }

    /// Dominating constant `C = max(sup φ₁, sup φ₂)` over the evaluated
    /// ranges; bounds every per-particle jump rate, finite-N or limiting.
    pub fn dominating_rate(&self) -> f64 {
        Family::BOTH
            .iter()
            .map(|&f| self.phi(f).max_on(self.reach(f)))
            .fold(0.0, f64::max)
    }

    /// ψ_k, ψ_k⁺, ψ_k′ at `z`, with `r_j` the other family's fraction. No
    /// domain check; see [`psi_eval`].
    pub fn psi(&self, family: Family, z: f64) -> PsiValues {
        let phi = self.phi(family);
        let rj = self.r(family.other());
        let (lo, hi) = (rj * z, rj * (1.0 - z));
        PsiValues {
            psi: phi.value(lo) - phi.value(hi),
            plus: phi.value(lo) + phi.value(hi),
            prime: rj * (phi.derivative(lo) + phi.derivative(hi)),
        }
    }

    /// Stable 64-bit fingerprint of the parameters (cache keys, manifests).
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for family in Family::BOTH {
            match *self.phi(family) {
                UtilityFn::Linear { slope, intercept } => {
                    0u8.hash(&mut hasher);
                    slope.to_bits().hash(&mut hasher);
                    intercept.to_bits().hash(&mut hasher);
                }
                UtilityFn::Exponential { scale, rate } => {
                    1u8.hash(&mut hasher);
                    scale.to_bits().hash(&mut hasher);
                    rate.to_bits().hash(&mut hasher);
                }
            }
        }
        self.population.r1.to_bits().hash(&mut hasher);
        self.sizes.hash(&mut hasher);
        hasher.finish()
    }

    /// Same utilities and `r1`, resized to a new total population with the
    /// same split mode.
    pub fn with_population(&self, n: usize) -> Result<ValidatedModel, ModelError> {
        validate(self.utility, PopulationSpec { n, ..self.population })
    }
}

/// Checked evaluation of the derived interaction functions.
pub fn psi_eval(model: &ValidatedModel, family: Family, z: f64) -> Result<PsiValues, ModelError> {
    if !(0.0..=1.0).contains(&z) {
        return Err(ModelError::OutOfDomain(z));
    }
    Ok(model.psi(family, z))
}
