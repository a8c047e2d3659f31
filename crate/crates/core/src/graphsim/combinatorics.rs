use num_bigint::BigUint;
use num_traits::One;

use crate::error::{Error, Result};

/// Size of the joint (cores, frequency) action space for `n_tiers` tiers
/// sharing `total_cores` cores with `freq_levels` frequency settings:
/// `C(total_cores - 1, n_tiers - 1) * n_tiers^freq_levels`, exactly.
///
/// The frequency factor is kept in the `N^F` orientation even though
/// independent per-tier choice would give `F^N`.
pub fn action_space_size(n_tiers: u64, total_cores: u64, freq_levels: u64) -> Result<BigUint> {
    if n_tiers < 1 || total_cores < n_tiers || freq_levels < 1 {
        return Err(Error::input(format!(
            "need total_cores >= n_tiers >= 1 and freq_levels >= 1, got N={n_tiers} C={total_cores} F={freq_levels}"
        )));
    }
    let exp = u32::try_from(freq_levels).map_err(|_| Error::input("freq_levels too large"))?;
    Ok(binomial(total_cores - 1, n_tiers - 1) * BigUint::from(n_tiers).pow(exp))
}

/// Exact binomial coefficient.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        // acc * (n - i) is always divisible by (i + 1) at this point
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}
