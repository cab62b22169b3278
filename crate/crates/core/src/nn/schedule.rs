use crate::error::{Error, Result};

/// Cosine decay from `lr0` at round 0 to zero at `total_rounds`.
pub fn cosine_lr(round: usize, total_rounds: usize, lr0: f64) -> Result<f64> {
    if total_rounds == 0 || round > total_rounds {
        return Err(Error::InvalidArgument(format!(
            "round {round} outside schedule of {total_rounds} rounds"
        )));
    }
    let progress = round as f64 / total_rounds as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 40, 0.05).unwrap(), 0.05);
        assert!(cosine_lr(40, 40, 0.05).unwrap().abs() < 1e-18);
        assert!((cosine_lr(20, 40, 0.05).unwrap() - 0.025).abs() < 1e-15);
    }

    #[test]
    fn out_of_range() {
        assert!(cosine_lr(41, 40, 0.05).is_err());
        assert!(cosine_lr(0, 0, 0.05).is_err());
    }

    #[test]
    fn monotone_decay() {
        let lrs: Vec<f64> = (0..=10).map(|r| cosine_lr(r, 10, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
