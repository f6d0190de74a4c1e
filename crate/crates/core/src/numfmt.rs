//! Fixed-significance decimal formatting for the text file formats.

/// Scientific notation with 9 significant digits.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Scientific notation with 17 significant digits (round-trips any f64).
pub fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Rounds `x` to what `sig9` would print, so in-memory values survive a
/// save/load cycle unchanged.
pub fn quantize9(x: f64) -> f64 {
    sig9(x).parse().expect("formatted float parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_is_idempotent() {
        for x in [0.1, 1.0 / 3.0, -2.718281828459045, 1e-300, 4.999999999] {
            let q = quantize9(x);
            assert_eq!(quantize9(q), q);
            assert_eq!(sig9(q).parse::<f64>().unwrap(), q);
        }
    }

    #[test]
    fn sig17_round_trips() {
        for x in [0.1, 1.0 / 3.0, -1e-17, 123456.789] {
            assert_eq!(sig17(x).parse::<f64>().unwrap(), x);
        }
    }
}
