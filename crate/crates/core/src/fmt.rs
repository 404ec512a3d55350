//! Number formatting shared by the CSV writers.

/// Formats `x` with `sig` significant digits the way C's `%g` does.
pub fn sig(x: f64, sig: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sig = sig.max(1);
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= sig as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Six significant digits, the precision of every report CSV.
pub fn g6(x: f64) -> String {
    sig(x, 6)
}

/// Round-trip exact representation used by weight files.
pub fn exact(x: f64) -> String {
    format!("{:.16e}", x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_printf_g() {
        assert_eq!(g6(0.0), "0");
        assert_eq!(g6(3.8), "3.8");
        assert_eq!(g6(1234567.0), "1.23457e+06");
        assert_eq!(g6(0.000123456789), "0.000123457");
        assert_eq!(g6(0.0000123456789), "1.23457e-05");
        assert_eq!(g6(-2.5), "-2.5");
        assert_eq!(g6(100000.0), "100000");
        assert_eq!(g6(23.0), "23");
    }

    #[test]
    fn exact_round_trips() {
        for &x in &[0.1, -1.0 / 3.0, 1e-300, 6.02e23, f64::MIN_POSITIVE] {
            assert_eq!(exact(x).parse::<f64>().unwrap(), x);
        }
    }
}
