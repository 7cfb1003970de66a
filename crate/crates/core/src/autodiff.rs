//! Reverse-mode automatic differentiation on a thread-local tape.
//!
//! [`Ad`] is a scalar that records every arithmetic operation onto a tape so
//! that one backward sweep yields exact gradients with respect to all
//! variables. It implements `nalgebra::RealField`, which means the whole
//! generic numeric core (quaternion algebra, the filter recursion, the GRU
//! network) runs on it unchanged — training backpropagates through the very
//! code that inference executes.
//!
//! Constants (anything built through [`Ad::cst`] or scalar conversion) do not
//! touch the tape, and operations between constants fold away, so recorded
//! graphs only contain the parameter-dependent subgraph.
//!
//! The tape is thread-local: each thread differentiates independently. A
//! typical session is `reset_tape()` → create variables with [`Ad::var`] →
//! run the computation → [`backward`] → read gradients via
//! [`Gradients::wrt`].

use std::cell::RefCell;
use std::fmt;
use std::ops::{
    Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign,
};

use approx::{AbsDiffEq, RelativeEq, UlpsEq};
use num_traits::{Bounded, FromPrimitive, Num, NumCast, One, Signed, ToPrimitive, Zero};
use simba::scalar::SubsetOf;
use simba::simd::SimdValue;

use crate::real::Real;

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    b: u32,
    pa: f64,
    pb: f64,
}

thread_local! {
    static TAPE: RefCell<Vec<Node>> = const { RefCell::new(Vec::new()) };
}

fn push(a: u32, b: u32, pa: f64, pb: f64) -> u32 {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.push(Node { a, b, pa, pb });
        (t.len() - 1) as u32
    })
}

/// Clear the current thread's tape. Call before each differentiated pass.
pub fn reset_tape() {
    TAPE.with(|t| t.borrow_mut().clear());
}

/// Number of nodes currently recorded on this thread's tape.
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().len())
}

/// Reverse-mode autodiff scalar. See the module docs.
#[derive(Clone, Copy)]
pub struct Ad {
    val: f64,
    ix: u32,
}

impl Ad {
    /// A constant: carries no derivative and is never recorded.
    #[inline]
    pub fn cst(v: f64) -> Ad {
        Ad { val: v, ix: NONE }
    }

    /// A differentiable leaf variable, recorded on the tape.
    pub fn var(v: f64) -> Ad {
        Ad {
            val: v,
            ix: push(NONE, NONE, 0.0, 0.0),
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.val
    }

    #[inline]
    fn unary(self, v: f64, d: f64) -> Ad {
        if self.ix == NONE {
            Ad::cst(v)
        } else {
            Ad {
                val: v,
                ix: push(self.ix, NONE, d, 0.0),
            }
        }
    }

    #[inline]
    fn binary(self, o: Ad, v: f64, da: f64, db: f64) -> Ad {
        if self.ix == NONE && o.ix == NONE {
            Ad::cst(v)
        } else {
            Ad {
                val: v,
                ix: push(self.ix, o.ix, da, db),
            }
        }
    }
}

/// Gradients of one output with respect to every tape node.
pub struct Gradients(Vec<f64>);

impl Gradients {
    /// Gradient with respect to `x` (zero for constants).
    pub fn wrt(&self, x: Ad) -> f64 {
        if x.ix == NONE {
            0.0
        } else {
            self.0[x.ix as usize]
        }
    }
}

/// Single backward sweep from `output` over the current tape.
pub fn backward(output: Ad) -> Gradients {
    TAPE.with(|t| {
        let t = t.borrow();
        let mut g = vec![0.0f64; t.len()];
        if output.ix != NONE {
            g[output.ix as usize] = 1.0;
        }
        for i in (0..t.len()).rev() {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            let n = t[i];
            if n.a != NONE {
                g[n.a as usize] += n.pa * gi;
            }
            if n.b != NONE {
                g[n.b as usize] += n.pb * gi;
            }
        }
        Gradients(g)
    })
}

// ---- arithmetic -----------------------------------------------------------

impl Add for Ad {
    type Output = Ad;
    #[inline]
    fn add(self, o: Ad) -> Ad {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl Sub for Ad {
    type Output = Ad;
    #[inline]
    fn sub(self, o: Ad) -> Ad {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl Mul for Ad {
    type Output = Ad;
    #[inline]
    fn mul(self, o: Ad) -> Ad {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl Div for Ad {
    type Output = Ad;
    #[inline]
    fn div(self, o: Ad) -> Ad {
        let inv = 1.0 / o.val;
        self.binary(o, self.val * inv, inv, -self.val * inv * inv)
    }
}

impl Rem for Ad {
    type Output = Ad;
    fn rem(self, o: Ad) -> Ad {
        // d(a mod b)/da = 1, d/db = -trunc(a/b), almost everywhere
        self.binary(o, self.val % o.val, 1.0, -(self.val / o.val).trunc())
    }
}

impl Neg for Ad {
    type Output = Ad;
    #[inline]
    fn neg(self) -> Ad {
        self.unary(-self.val, -1.0)
    }
}

impl AddAssign for Ad {
    #[inline]
    fn add_assign(&mut self, o: Ad) {
        *self = *self + o;
    }
}
impl SubAssign for Ad {
    #[inline]
    fn sub_assign(&mut self, o: Ad) {
        *self = *self - o;
    }
}
impl MulAssign for Ad {
    #[inline]
    fn mul_assign(&mut self, o: Ad) {
        *self = *self * o;
    }
}
impl DivAssign for Ad {
    #[inline]
    fn div_assign(&mut self, o: Ad) {
        *self = *self / o;
    }
}
impl RemAssign for Ad {
    fn rem_assign(&mut self, o: Ad) {
        *self = *self % o;
    }
}

// ---- comparisons & formatting ---------------------------------------------

impl PartialEq for Ad {
    fn eq(&self, other: &Self) -> bool {
        self.val == other.val
    }
}

impl PartialOrd for Ad {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.val.partial_cmp(&other.val)
    }
}

impl fmt::Debug for Ad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ad({})", self.val)
    }
}

impl fmt::Display for Ad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.val, f)
    }
}

// ---- num-traits -----------------------------------------------------------

impl Zero for Ad {
    fn zero() -> Self {
        Ad::cst(0.0)
    }
    fn is_zero(&self) -> bool {
        self.val == 0.0
    }
}

impl One for Ad {
    fn one() -> Self {
        Ad::cst(1.0)
    }
}

impl Num for Ad {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(str: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(str, radix).map(Ad::cst)
    }
}

impl ToPrimitive for Ad {
    fn to_i64(&self) -> Option<i64> {
        self.val.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.val.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.val)
    }
}

impl NumCast for Ad {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Ad::cst)
    }
}

impl FromPrimitive for Ad {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Ad::cst(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Ad::cst(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Ad::cst(n))
    }
}

impl Signed for Ad {
    fn abs(&self) -> Self {
        self.unary(self.val.abs(), if self.val < 0.0 { -1.0 } else { 1.0 })
    }
    fn abs_sub(&self, other: &Self) -> Self {
        if self.val <= other.val {
            Ad::cst(0.0)
        } else {
            *self - *other
        }
    }
    fn signum(&self) -> Self {
        Ad::cst(self.val.signum())
    }
    fn is_positive(&self) -> bool {
        self.val.is_sign_positive()
    }
    fn is_negative(&self) -> bool {
        self.val.is_sign_negative()
    }
}

impl Bounded for Ad {
    fn min_value() -> Self {
        Ad::cst(f64::MIN)
    }
    fn max_value() -> Self {
        Ad::cst(f64::MAX)
    }
}

// ---- approx ---------------------------------------------------------------

impl AbsDiffEq for Ad {
    type Epsilon = Ad;
    fn default_epsilon() -> Ad {
        Ad::cst(f64::default_epsilon())
    }
    fn abs_diff_eq(&self, other: &Self, epsilon: Ad) -> bool {
        self.val.abs_diff_eq(&other.val, epsilon.val)
    }
}

impl RelativeEq for Ad {
    fn default_max_relative() -> Ad {
        Ad::cst(f64::default_max_relative())
    }
    fn relative_eq(&self, other: &Self, epsilon: Ad, max_relative: Ad) -> bool {
        self.val.relative_eq(&other.val, epsilon.val, max_relative.val)
    }
}

impl UlpsEq for Ad {
    fn default_max_ulps() -> u32 {
        f64::default_max_ulps()
    }
    fn ulps_eq(&self, other: &Self, epsilon: Ad, max_ulps: u32) -> bool {
        self.val.ulps_eq(&other.val, epsilon.val, max_ulps)
    }
}

// ---- simba ----------------------------------------------------------------

impl SimdValue for Ad {
    const LANES: usize = 1;
    type Element = Ad;
    type SimdBool = bool;

    #[inline]
    fn splat(val: Ad) -> Ad {
        val
    }
    #[inline]
    fn extract(&self, _: usize) -> Ad {
        *self
    }
    #[inline]
    unsafe fn extract_unchecked(&self, _: usize) -> Ad {
        *self
    }
    #[inline]
    fn replace(&mut self, _: usize, val: Ad) {
        *self = val;
    }
    #[inline]
    unsafe fn replace_unchecked(&mut self, _: usize, val: Ad) {
        *self = val;
    }
    #[inline]
    fn select(self, cond: bool, other: Ad) -> Ad {
        if cond {
            self
        } else {
            other
        }
    }
}

impl simba::scalar::Field for Ad {}

impl SubsetOf<Ad> for Ad {
    fn to_superset(&self) -> Ad {
        *self
    }
    fn from_superset_unchecked(element: &Ad) -> Ad {
        *element
    }
    fn is_in_subset(_: &Ad) -> bool {
        true
    }
}

impl SubsetOf<Ad> for f64 {
    fn to_superset(&self) -> Ad {
        Ad::cst(*self)
    }
    fn from_superset_unchecked(element: &Ad) -> f64 {
        element.val
    }
    fn is_in_subset(_: &Ad) -> bool {
        true
    }
}

impl SubsetOf<Ad> for f32 {
    fn to_superset(&self) -> Ad {
        Ad::cst(*self as f64)
    }
    fn from_superset_unchecked(element: &Ad) -> f32 {
        element.val as f32
    }
    fn is_in_subset(_: &Ad) -> bool {
        true
    }
}

impl nalgebra::ComplexField for Ad {
    type RealField = Ad;

    fn from_real(re: Ad) -> Self {
        re
    }
    fn real(self) -> Ad {
        self
    }
    fn imaginary(self) -> Ad {
        Ad::cst(0.0)
    }
    fn modulus(self) -> Ad {
        Signed::abs(&self)
    }
    fn modulus_squared(self) -> Ad {
        self * self
    }
    fn argument(self) -> Ad {
        if self.val >= 0.0 {
            Ad::cst(0.0)
        } else {
            Ad::cst(std::f64::consts::PI)
        }
    }
    fn norm1(self) -> Ad {
        Signed::abs(&self)
    }
    fn scale(self, factor: Ad) -> Ad {
        self * factor
    }
    fn unscale(self, factor: Ad) -> Ad {
        self / factor
    }

    fn floor(self) -> Ad {
        Ad::cst(self.val.floor())
    }
    fn ceil(self) -> Ad {
        Ad::cst(self.val.ceil())
    }
    fn round(self) -> Ad {
        Ad::cst(self.val.round())
    }
    fn trunc(self) -> Ad {
        Ad::cst(self.val.trunc())
    }
    fn fract(self) -> Ad {
        self.unary(self.val.fract(), 1.0)
    }
    fn mul_add(self, a: Ad, b: Ad) -> Ad {
        self * a + b
    }
    fn abs(self) -> Ad {
        Signed::abs(&self)
    }
    fn hypot(self, other: Ad) -> Ad {
        let h = self.val.hypot(other.val);
        if h == 0.0 {
            self.binary(other, 0.0, 0.0, 0.0)
        } else {
            self.binary(other, h, self.val / h, other.val / h)
        }
    }
    fn recip(self) -> Ad {
        let inv = 1.0 / self.val;
        self.unary(inv, -inv * inv)
    }
    fn conjugate(self) -> Ad {
        self
    }

    fn sin(self) -> Ad {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Ad {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn sin_cos(self) -> (Ad, Ad) {
        (nalgebra::ComplexField::sin(self), nalgebra::ComplexField::cos(self))
    }
    fn tan(self) -> Ad {
        let t = self.val.tan();
        self.unary(t, 1.0 + t * t)
    }
    fn asin(self) -> Ad {
        self.unary(self.val.asin(), 1.0 / (1.0 - self.val * self.val).sqrt())
    }
    fn acos(self) -> Ad {
        self.unary(self.val.acos(), -1.0 / (1.0 - self.val * self.val).sqrt())
    }
    fn atan(self) -> Ad {
        self.unary(self.val.atan(), 1.0 / (1.0 + self.val * self.val))
    }
    fn sinh(self) -> Ad {
        self.unary(self.val.sinh(), self.val.cosh())
    }
    fn cosh(self) -> Ad {
        self.unary(self.val.cosh(), self.val.sinh())
    }
    fn tanh(self) -> Ad {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn asinh(self) -> Ad {
        self.unary(self.val.asinh(), 1.0 / (self.val * self.val + 1.0).sqrt())
    }
    fn acosh(self) -> Ad {
        self.unary(self.val.acosh(), 1.0 / (self.val * self.val - 1.0).sqrt())
    }
    fn atanh(self) -> Ad {
        self.unary(self.val.atanh(), 1.0 / (1.0 - self.val * self.val))
    }

    fn log(self, base: Ad) -> Ad {
        nalgebra::ComplexField::ln(self) / nalgebra::ComplexField::ln(base)
    }
    fn log2(self) -> Ad {
        self.unary(self.val.log2(), 1.0 / (self.val * std::f64::consts::LN_2))
    }
    fn log10(self) -> Ad {
        self.unary(self.val.log10(), 1.0 / (self.val * std::f64::consts::LN_10))
    }
    fn ln(self) -> Ad {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn ln_1p(self) -> Ad {
        self.unary(self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }
    fn sqrt(self) -> Ad {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn exp(self) -> Ad {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn exp2(self) -> Ad {
        let e = self.val.exp2();
        self.unary(e, e * std::f64::consts::LN_2)
    }
    fn exp_m1(self) -> Ad {
        self.unary(self.val.exp_m1(), self.val.exp())
    }
    fn powi(self, n: i32) -> Ad {
        self.unary(self.val.powi(n), (n as f64) * self.val.powi(n - 1))
    }
    fn powf(self, n: Ad) -> Ad {
        let v = self.val.powf(n.val);
        let da = n.val * self.val.powf(n.val - 1.0);
        let db = if self.val > 0.0 { v * self.val.ln() } else { 0.0 };
        self.binary(n, v, da, db)
    }
    fn powc(self, n: Ad) -> Ad {
        nalgebra::ComplexField::powf(self, n)
    }
    fn cbrt(self) -> Ad {
        let c = self.val.cbrt();
        self.unary(c, 1.0 / (3.0 * c * c))
    }
    fn is_finite(&self) -> bool {
        self.val.is_finite()
    }
    fn try_sqrt(self) -> Option<Ad> {
        if self.val > 0.0 {
            Some(nalgebra::ComplexField::sqrt(self))
        } else if self.val == 0.0 {
            Some(Ad::cst(0.0))
        } else {
            None
        }
    }
}

impl nalgebra::RealField for Ad {
    fn is_sign_positive(&self) -> bool {
        self.val.is_sign_positive()
    }
    fn is_sign_negative(&self) -> bool {
        self.val.is_sign_negative()
    }
    fn copysign(self, sign: Ad) -> Ad {
        let flip = self.val.is_sign_negative() != sign.val.is_sign_negative();
        self.unary(self.val.copysign(sign.val), if flip { -1.0 } else { 1.0 })
    }
    fn max(self, other: Ad) -> Ad {
        if self.val >= other.val {
            self.binary(other, self.val, 1.0, 0.0)
        } else {
            self.binary(other, other.val, 0.0, 1.0)
        }
    }
    fn min(self, other: Ad) -> Ad {
        if self.val <= other.val {
            self.binary(other, self.val, 1.0, 0.0)
        } else {
            self.binary(other, other.val, 0.0, 1.0)
        }
    }
    fn clamp(self, min: Ad, max: Ad) -> Ad {
        nalgebra::RealField::min(nalgebra::RealField::max(self, min), max)
    }
    fn atan2(self, other: Ad) -> Ad {
        let d = self.val * self.val + other.val * other.val;
        if d == 0.0 {
            self.binary(other, self.val.atan2(other.val), 0.0, 0.0)
        } else {
            self.binary(other, self.val.atan2(other.val), other.val / d, -self.val / d)
        }
    }
    fn min_value() -> Option<Ad> {
        Some(Ad::cst(f64::MIN_POSITIVE))
    }
    fn max_value() -> Option<Ad> {
        Some(Ad::cst(f64::MAX))
    }

    fn pi() -> Ad {
        Ad::cst(std::f64::consts::PI)
    }
    fn two_pi() -> Ad {
        Ad::cst(std::f64::consts::TAU)
    }
    fn frac_pi_2() -> Ad {
        Ad::cst(std::f64::consts::FRAC_PI_2)
    }
    fn frac_pi_3() -> Ad {
        Ad::cst(std::f64::consts::FRAC_PI_3)
    }
    fn frac_pi_4() -> Ad {
        Ad::cst(std::f64::consts::FRAC_PI_4)
    }
    fn frac_pi_6() -> Ad {
        Ad::cst(std::f64::consts::FRAC_PI_6)
    }
    fn frac_pi_8() -> Ad {
        Ad::cst(std::f64::consts::FRAC_PI_8)
    }
    fn frac_1_pi() -> Ad {
        Ad::cst(std::f64::consts::FRAC_1_PI)
    }
    fn frac_2_pi() -> Ad {
        Ad::cst(std::f64::consts::FRAC_2_PI)
    }
    fn frac_2_sqrt_pi() -> Ad {
        Ad::cst(std::f64::consts::FRAC_2_SQRT_PI)
    }
    fn e() -> Ad {
        Ad::cst(std::f64::consts::E)
    }
    fn log2_e() -> Ad {
        Ad::cst(std::f64::consts::LOG2_E)
    }
    fn log10_e() -> Ad {
        Ad::cst(std::f64::consts::LOG10_E)
    }
    fn ln_2() -> Ad {
        Ad::cst(std::f64::consts::LN_2)
    }
    fn ln_10() -> Ad {
        Ad::cst(std::f64::consts::LN_10)
    }
}

impl Real for Ad {
    #[inline]
    fn of(x: f64) -> Self {
        Ad::cst(x)
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self.val
    }
}
