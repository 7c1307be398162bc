//! Numeric backends shared by the protocol, the checkers, and the dense oracle.
//!
//! Two backends are first-class: IEEE doubles (`FloatArith`) for production
//! runs and arbitrary-precision rationals (`RationalArith`) for exact oracle
//! runs at small scale. `SmallRationalArith` keeps exact `i64` rationals for
//! short horizons where the denominators stay tiny; it panics on overflow in
//! debug builds rather than losing exactness silently.
//!
//! Running sums are held in a dedicated accumulator type. For doubles this is
//! a two-float compensated value: the difference of two consecutive cumulative
//! running sums then reproduces the accumulated increment bit-for-bit, which
//! is what makes the running-sum reformulation of the ratio iteration produce
//! byte-identical state trajectories to the plain iteration.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::{BigInt, Sign};
use num_rational::{BigRational, Ratio, Rational64};
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

/// Which numeric backend a run uses. Stored in configs and trace headers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithmeticKind {
    Float,
    Rational,
}

impl fmt::Display for ArithmeticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArithmeticKind::Float => write!(f, "float"),
            ArithmeticKind::Rational => write!(f, "rational"),
        }
    }
}

/// A number the protocol can compute with.
///
/// Implementations must be exact for `from_ratio` inputs (`1/(1+D)` style
/// weights) up to their representable precision, and must round-trip through
/// `to_json`/`from_json` without loss.
pub trait Scalar:
    Clone
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Zero
    + One
    + Neg<Output = Self>
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + for<'a> Add<&'a Self, Output = Self>
    + for<'a> Sub<&'a Self, Output = Self>
    + for<'a> Mul<&'a Self, Output = Self>
    + for<'a> Div<&'a Self, Output = Self>
    + Send
    + Sync
    + 'static
{
    /// Exact (or correctly rounded) value of `num/den`. `den` must be nonzero.
    fn from_ratio(num: i64, den: i64) -> Self;

    /// Converts a finite double without loss (doubles are dyadic rationals).
    fn from_f64_exact(v: f64) -> Self;

    /// Nearest double, saturating to ±inf when out of range.
    fn to_f64(&self) -> f64;

    fn to_json(&self) -> serde_json::Value;

    fn from_json(v: &serde_json::Value) -> Result<Self, String>;

    /// True when arithmetic is exact (no rounding anywhere).
    fn exact() -> bool;

    fn abs_f64(&self) -> f64 {
        self.to_f64().abs()
    }
}

impl Scalar for f64 {
    fn from_ratio(num: i64, den: i64) -> Self {
        assert!(den != 0, "zero denominator");
        num as f64 / den as f64
    }

    fn from_f64_exact(v: f64) -> Self {
        assert!(v.is_finite(), "non-finite value {v}");
        v
    }

    fn to_f64(&self) -> f64 {
        *self
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::Number::from_f64(*self)
            .map(serde_json::Value::Number)
            .unwrap_or(serde_json::Value::Null)
    }

    fn from_json(v: &serde_json::Value) -> Result<Self, String> {
        if v.is_null() {
            return Ok(f64::NAN);
        }
        v.as_f64().ok_or_else(|| format!("expected number, got {v}"))
    }

    fn exact() -> bool {
        false
    }
}

impl Scalar for BigRational {
    fn from_ratio(num: i64, den: i64) -> Self {
        assert!(den != 0, "zero denominator");
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    fn from_f64_exact(v: f64) -> Self {
        BigRational::from_float(v).unwrap_or_else(|| panic!("non-finite value {v}"))
    }

    fn to_f64(&self) -> f64 {
        big_rational_to_f64(self)
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::Value::String(self.to_string())
    }

    fn from_json(v: &serde_json::Value) -> Result<Self, String> {
        match v {
            serde_json::Value::String(s) => {
                s.parse::<BigRational>().map_err(|e| format!("bad rational {s:?}: {e}"))
            }
            serde_json::Value::Number(_) => {
                let f = v.as_f64().ok_or_else(|| format!("bad number {v}"))?;
                Ok(Self::from_f64_exact(f))
            }
            other => Err(format!("expected rational string, got {other}")),
        }
    }

    fn exact() -> bool {
        true
    }
}

impl Scalar for Rational64 {
    fn from_ratio(num: i64, den: i64) -> Self {
        assert!(den != 0, "zero denominator");
        Ratio::new(num, den)
    }

    fn from_f64_exact(v: f64) -> Self {
        let big = BigRational::from_float(v).unwrap_or_else(|| panic!("non-finite value {v}"));
        let numer = big.numer().to_i64().expect("numerator exceeds i64");
        let denom = big.denom().to_i64().expect("denominator exceeds i64");
        Ratio::new(numer, denom)
    }

    fn to_f64(&self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::Value::String(self.to_string())
    }

    fn from_json(v: &serde_json::Value) -> Result<Self, String> {
        match v {
            serde_json::Value::String(s) => {
                s.parse::<Rational64>().map_err(|e| format!("bad rational {s:?}: {e}"))
            }
            serde_json::Value::Number(_) => {
                let f = v.as_f64().ok_or_else(|| format!("bad number {v}"))?;
                Ok(Self::from_f64_exact(f))
            }
            other => Err(format!("expected rational string, got {other}")),
        }
    }

    fn exact() -> bool {
        true
    }
}

/// Nearest double for a big rational, robust to numerators/denominators far
/// outside the double range (long exact runs produce denominators like 3^1000).
fn big_rational_to_f64(q: &BigRational) -> f64 {
    if q.is_zero() {
        return 0.0;
    }
    let sign = if q.numer().sign() == Sign::Minus { -1.0 } else { 1.0 };
    let n = q.numer().magnitude();
    let d = q.denom().magnitude();
    let nb = n.bits() as i64;
    let db = d.bits() as i64;
    // Scale so the integer quotient carries ~80 significant bits, then undo.
    let shift = 80 - (nb - db);
    let quotient = if shift >= 0 {
        (n << shift as u64) / d
    } else {
        n / (d << (-shift) as u64)
    };
    let approx = quotient.to_f64().unwrap_or(f64::INFINITY);
    let scale = if shift.unsigned_abs() > 2000 {
        if shift > 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        2f64.powi(-(shift as i32))
    };
    sign * approx * scale
}

/// Running-sum accumulator over a scalar type.
///
/// `accumulate` folds in one increment; `delta_since` recovers the total added
/// between two snapshots, rounded to the scalar type. For the compensated
/// double accumulator the recovered delta of two consecutive snapshots equals
/// the single increment bit-for-bit at any practical horizon.
pub trait SigmaAcc<V>: Clone + PartialEq + fmt::Debug + Send + Sync + 'static {
    fn zero() -> Self;
    fn accumulate(&self, inc: &V) -> Self;
    fn delta_since(&self, earlier: &Self) -> V;
    fn value(&self) -> V;
}

/// Two-float compensated value: `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompensatedF64 {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bv = s - a;
    let err = (a - (s - bv)) + (b - bv);
    (s, err)
}

#[inline]
fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    // requires |a| >= |b| (or a == 0)
    let s = a + b;
    let err = b - (s - a);
    (s, err)
}

impl SigmaAcc<f64> for CompensatedF64 {
    fn zero() -> Self {
        CompensatedF64 { hi: 0.0, lo: 0.0 }
    }

    fn accumulate(&self, inc: &f64) -> Self {
        let (s, e) = two_sum(self.hi, *inc);
        let lo = self.lo + e;
        let (hi, lo) = fast_two_sum(s, lo);
        CompensatedF64 { hi, lo }
    }

    fn delta_since(&self, earlier: &Self) -> f64 {
        let (s, e) = two_sum(self.hi, -earlier.hi);
        let t = (self.lo - earlier.lo) + e;
        s + t
    }

    fn value(&self) -> f64 {
        self.hi
    }
}

impl<V> SigmaAcc<V> for V
where
    V: Scalar,
{
    fn zero() -> Self {
        V::zero()
    }

    fn accumulate(&self, inc: &V) -> Self {
        self.clone() + inc
    }

    fn delta_since(&self, earlier: &Self) -> V {
        self.clone() - earlier
    }

    fn value(&self) -> V {
        self.clone()
    }
}

/// Bundles the state scalar with its running-sum accumulator.
pub trait Arithmetic: Clone + Copy + fmt::Debug + Default + Send + Sync + 'static {
    type Value: Scalar;
    type Accum: SigmaAcc<Self::Value>;
    const KIND: ArithmeticKind;
}

/// IEEE doubles with compensated running sums. The production backend.
#[derive(Clone, Copy, Debug, Default)]
pub struct FloatArith;

impl Arithmetic for FloatArith {
    type Value = f64;
    type Accum = CompensatedF64;
    const KIND: ArithmeticKind = ArithmeticKind::Float;
}

/// Arbitrary-precision rationals. Exact; desk scale only.
#[derive(Clone, Copy, Debug, Default)]
pub struct RationalArith;

impl Arithmetic for RationalArith {
    type Value = BigRational;
    type Accum = BigRational;
    const KIND: ArithmeticKind = ArithmeticKind::Rational;
}

/// `i64` rationals for exhaustive short-horizon enumeration. Exact while the
/// denominators fit; debug builds panic on overflow.
#[derive(Clone, Copy, Debug, Default)]
pub struct SmallRationalArith;

impl Arithmetic for SmallRationalArith {
    type Value = Rational64;
    type Accum = Rational64;
    const KIND: ArithmeticKind = ArithmeticKind::Rational;
}

/// The per-node 2-vector: `y` carries the value mass, `z` the counting mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair<T> {
    pub y: T,
    pub z: T,
}

/// A node state `x_j = [y_j, z_j]`.
pub type StateVector<V> = Pair<V>;

impl<T> Pair<T> {
    pub fn new(y: T, z: T) -> Self {
        Pair { y, z }
    }
}

impl<V: Scalar> Pair<V> {
    pub fn zero() -> Self {
        Pair::new(V::zero(), V::zero())
    }

    pub fn from_f64s(y: f64, z: f64) -> Self {
        Pair::new(V::from_f64_exact(y), V::from_f64_exact(z))
    }

    pub fn add(&self, other: &Self) -> Self {
        Pair::new(self.y.clone() + &other.y, self.z.clone() + &other.z)
    }

    pub fn sub(&self, other: &Self) -> Self {
        Pair::new(self.y.clone() - &other.y, self.z.clone() - &other.z)
    }

    pub fn scale(&self, w: &V) -> Self {
        Pair::new(self.y.clone() * w, self.z.clone() * w)
    }

    pub fn is_zero(&self) -> bool {
        self.y.is_zero() && self.z.is_zero()
    }

    pub fn inf_norm_f64(&self) -> f64 {
        self.y.abs_f64().max(self.z.abs_f64())
    }

    pub fn to_f64s(&self) -> (f64, f64) {
        (self.y.to_f64(), self.z.to_f64())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(vec![self.y.to_json(), self.z.to_json()])
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, String> {
        let arr = v.as_array().filter(|a| a.len() == 2).ok_or_else(|| {
            format!("expected [y, z] pair, got {v}")
        })?;
        Ok(Pair::new(V::from_json(&arr[0])?, V::from_json(&arr[1])?))
    }
}

impl<T> Pair<T> {
    /// Accumulates a pair of increments into a pair of running sums.
    pub fn accumulate<V>(&self, inc: &Pair<V>) -> Pair<T>
    where
        T: SigmaAcc<V>,
    {
        Pair::new(self.y.accumulate(&inc.y), self.z.accumulate(&inc.z))
    }

    pub fn delta_since<V>(&self, earlier: &Pair<T>) -> Pair<V>
    where
        T: SigmaAcc<V>,
    {
        Pair::new(self.y.delta_since(&earlier.y), self.z.delta_since(&earlier.z))
    }

    pub fn value<V>(&self) -> Pair<V>
    where
        T: SigmaAcc<V>,
    {
        Pair::new(self.y.value(), self.z.value())
    }

    pub fn acc_zero<V>() -> Pair<T>
    where
        T: SigmaAcc<V>,
    {
        Pair::new(T::zero(), T::zero())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_ratio_matches_division() {
        assert_eq!(f64::from_ratio(1, 3), 1.0 / 3.0);
        assert_eq!(BigRational::from_ratio(2, 6), BigRational::from_ratio(1, 3));
        assert_eq!(Rational64::from_ratio(2, 6), Rational64::from_ratio(1, 3));
    }

    #[test]
    fn rational_json_round_trip() {
        let q = BigRational::from_ratio(-7, 12);
        let j = q.to_json();
        assert_eq!(BigRational::from_json(&j).unwrap(), q);
        let from_num = BigRational::from_json(&serde_json::json!(0.5)).unwrap();
        assert_eq!(from_num, BigRational::from_ratio(1, 2));
    }

    #[test]
    fn big_rational_to_f64_handles_extremes() {
        let tiny = BigRational::from_ratio(1, 3).pow(1000);
        assert_eq!(tiny.to_f64(), 0.0);
        let huge = BigRational::from_ratio(3, 1).pow(1000);
        assert_eq!(huge.to_f64(), f64::INFINITY);
        let q = BigRational::from_ratio(355, 113);
        assert!((q.to_f64() - 355.0 / 113.0).abs() < 1e-15);
        let exact = BigRational::from_f64_exact(0.1);
        assert_eq!(exact.to_f64(), 0.1);
    }

    #[test]
    fn compensated_zero_delta_is_exact_zero() {
        let a = CompensatedF64::zero().accumulate(&0.125);
        assert_eq!(a.delta_since(&a), 0.0);
    }

    proptest! {
        // The property the running-sum reformulation relies on: consecutive
        // cumulative snapshots recover each increment bit-for-bit.
        #[test]
        fn compensated_delta_recovers_increment(
            incs in proptest::collection::vec(-1e6f64..1e6, 1..400),
        ) {
            let mut acc = CompensatedF64::zero();
            for inc in &incs {
                let next = acc.accumulate(inc);
                prop_assert_eq!(next.delta_since(&acc).to_bits(), inc.to_bits());
                acc = next;
            }
        }

        #[test]
        fn f64_json_round_trip(v in -1e12f64..1e12) {
            let j = v.to_json();
            let text = serde_json::to_string(&j).unwrap();
            let back: serde_json::Value = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(f64::from_json(&back).unwrap().to_bits(), v.to_bits());
        }

        #[test]
        fn compensated_tracks_exact_sum(
            incs in proptest::collection::vec(-1e3f64..1e3, 1..200),
        ) {
            let mut acc = CompensatedF64::zero();
            let mut exact = BigRational::zero();
            for inc in &incs {
                acc = acc.accumulate(inc);
                exact += BigRational::from_f64_exact(*inc);
            }
            let err = (BigRational::from_f64_exact(acc.value()) - &exact).to_f64().abs();
            prop_assert!(err <= 1e-10, "accumulator drifted: {err}");
        }
    }
}
