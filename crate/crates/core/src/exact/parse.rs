//! Parsers for the exact scalar encodings used in config files.
//!
//! Accepted coordinate forms:
//! - rationals: `"1/3"`, `"-2/7"`, `"0"`, `"5"`
//! - decimals with declared precision: `"0.4142135"` (the declared error is
//!   half an ulp of the last digit)
//! - surd expressions: sums of terms like `"sqrt(2)-1"`,
//!   `"(1+2*sqrt(5))/3"`, `"3/4*sqrt(7)"`

use crate::error::{CoreError, Result};
use crate::exact::surd::SurdExpr;
use crate::exact::torus::TorusCoord;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Pow, Zero};

/// Parse an exact rational from `"p/q"`, `"p"`, or a decimal literal.
pub fn parse_rational(s: &str) -> Result<BigRational> {
    let s = s.trim();
    if let Some((p, q)) = s.split_once('/') {
        let num: BigInt = p
            .trim()
            .parse()
            .map_err(|_| CoreError::Parse(format!("bad numerator in {s:?}")))?;
        let den: BigInt = q
            .trim()
            .parse()
            .map_err(|_| CoreError::Parse(format!("bad denominator in {s:?}")))?;
        if den.is_zero() {
            return Err(CoreError::Parse(format!("zero denominator in {s:?}")));
        }
        return Ok(BigRational::new(num, den));
    }
    if let Some((int_part, frac_part)) = s.split_once('.') {
        let negative = int_part.trim_start().starts_with('-');
        let ip: BigInt = if int_part.is_empty() || int_part == "-" {
            BigInt::zero()
        } else {
            int_part
                .parse()
                .map_err(|_| CoreError::Parse(format!("bad decimal in {s:?}")))?
        };
        if !frac_part.chars().all(|c| c.is_ascii_digit()) {
            return Err(CoreError::Parse(format!("bad decimal in {s:?}")));
        }
        let scale = BigInt::from(10u32).pow(frac_part.len() as u32);
        let fp: BigInt = if frac_part.is_empty() {
            BigInt::zero()
        } else {
            frac_part
                .parse()
                .map_err(|_| CoreError::Parse(format!("bad decimal in {s:?}")))?
        };
        let signed_fp = if negative { -fp } else { fp };
        return Ok(BigRational::new(ip * &scale + signed_fp, scale));
    }
    let n: BigInt = s
        .parse()
        .map_err(|_| CoreError::Parse(format!("bad rational {s:?}")))?;
    Ok(BigRational::from_integer(n))
}

/// Parse one torus coordinate. Decimal literals are treated as rationals
/// with a declared half-ulp error; everything else is exact.
pub fn parse_coordinate(s: &str) -> Result<TorusCoord> {
    let s = s.trim();
    if s.contains("sqrt") {
        let expr = parse_surd_sum(s)?;
        return Ok(TorusCoord::exact(expr));
    }
    if s.contains('.') {
        let value = parse_rational(s)?;
        let digits = s.split('.').nth(1).map_or(0, str::len);
        let err = 0.5 * 10f64.powi(-(digits as i32));
        return Ok(TorusCoord::with_error(SurdExpr::from_rational(value), err));
    }
    Ok(TorusCoord::exact(SurdExpr::from_rational(parse_rational(
        s,
    )?)))
}

/// Sum grammar: term (('+'|'-') term)*, with an optional leading sign.
fn parse_surd_sum(s: &str) -> Result<SurdExpr> {
    let mut terms: Vec<(bool, String)> = Vec::new();
    let mut current = String::new();
    let mut negative = false;
    let mut depth = 0usize;
    let mut chars = s.chars().peekable();
    // leading sign
    if let Some(&c) = chars.peek() {
        if c == '-' {
            negative = true;
            chars.next();
        } else if c == '+' {
            chars.next();
        }
    }
    for c in chars {
        match c {
            '(' => {
                depth += 1;
                current.push(c);
            }
            ')' => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| CoreError::Parse(format!("unbalanced parens in {s:?}")))?;
                current.push(c);
            }
            '+' | '-' if depth == 0 => {
                terms.push((negative, std::mem::take(&mut current)));
                negative = c == '-';
            }
            c if c.is_whitespace() => {}
            _ => current.push(c),
        }
    }
    if depth != 0 {
        return Err(CoreError::Parse(format!("unbalanced parens in {s:?}")));
    }
    terms.push((negative, current));
    let mut acc = SurdExpr::zero();
    for (neg, term) in terms {
        let t = parse_surd_term(&term)?;
        acc += if neg { -t } else { t };
    }
    Ok(acc)
}

/// Term grammar: `rational`, `sqrt(k)`, `c*sqrt(k)`, `sqrt(k)/c`,
/// `c*sqrt(k)/m`, or a parenthesized sum with an optional `/c` divisor.
fn parse_surd_term(t: &str) -> Result<SurdExpr> {
    let t = t.trim();
    if t.is_empty() {
        return Err(CoreError::Parse("empty term".into()));
    }
    // (expr)/c
    if let Some(rest) = t.strip_prefix('(') {
        if let Some(close) = find_matching(rest) {
            let inner = &rest[..close];
            let tail = rest[close + 1..].trim();
            let inner_expr = parse_surd_sum(inner)?;
            if tail.is_empty() {
                return Ok(inner_expr);
            }
            if let Some(div) = tail.strip_prefix('/') {
                let c = parse_rational(div)?;
                if c.is_zero() {
                    return Err(CoreError::Parse(format!("division by zero in {t:?}")));
                }
                let inv = BigRational::one() / c;
                return Ok(inner_expr.scale_rational(&inv));
            }
            return Err(CoreError::Parse(format!("bad term {t:?}")));
        }
    }
    // [c*]sqrt(k)[/m]
    if let Some(pos) = t.find("sqrt(") {
        let coeff = if pos == 0 {
            BigRational::one()
        } else {
            let head = t[..pos]
                .trim()
                .strip_suffix('*')
                .ok_or_else(|| CoreError::Parse(format!("bad term {t:?}")))?;
            parse_rational(head)?
        };
        let rest = &t[pos + 5..];
        let close = rest
            .find(')')
            .ok_or_else(|| CoreError::Parse(format!("bad term {t:?}")))?;
        let k: u64 = rest[..close]
            .trim()
            .parse()
            .map_err(|_| CoreError::Parse(format!("bad radicand in {t:?}")))?;
        let tail = rest[close + 1..].trim();
        let coeff = if tail.is_empty() {
            coeff
        } else if let Some(div) = tail.strip_prefix('/') {
            coeff / parse_rational(div)?
        } else {
            return Err(CoreError::Parse(format!("bad term {t:?}")));
        };
        return Ok(SurdExpr::surd(coeff, k));
    }
    Ok(SurdExpr::from_rational(parse_rational(t)?))
}

fn find_matching(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                if depth == 0 {
                    return Some(i);
                }
                depth -= 1;
            }
            _ => {}
        }
    }
    None
}
