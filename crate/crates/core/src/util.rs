//! Small shared helpers.

/// `ceil(rate * n)` guarded against float round-up when `rate * n` is an
/// exact integer (e.g. 0.1 * 50000 must give 5000, not 5001).
pub(crate) fn ceil_rate(rate: f64, n: usize) -> usize {
    ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_products_do_not_round_up() {
        assert_eq!(ceil_rate(0.1, 50_000), 5_000);
        assert_eq!(ceil_rate(0.01, 5_000), 50);
        assert_eq!(ceil_rate(0.0, 100), 0);
        assert_eq!(ceil_rate(0.25, 4), 1);
        assert_eq!(ceil_rate(0.26, 4), 2);
        assert_eq!(ceil_rate(1.0, 7), 7);
    }
}
