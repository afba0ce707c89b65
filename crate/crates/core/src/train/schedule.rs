/// Linear warmup to `base_lr` over `warmup_steps`, then inverse-sqrt decay.
pub fn lr_schedule(step: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    let w = warmup_steps.max(1) as f64;
    let s = (step + 1) as f64;
    base_lr * (s / w).min((w / s).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_points() {
        assert_eq!(lr_schedule(999, 1000, 1e-3), 1e-3);
        assert!((lr_schedule(0, 1000, 1e-3) - 1e-6).abs() < 1e-18);
        assert!((lr_schedule(3999, 1000, 1e-3) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn rises_then_falls() {
        let lrs: Vec<f64> = (0..400).map(|s| lr_schedule(s, 100, 1.0)).collect();
        assert!(lrs[..100].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[99..].windows(2).all(|w| w[1] < w[0]));
    }
}
