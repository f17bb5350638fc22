use crate::train::TrainConfig;

/// Linear warm-up to `lr0`, then `lr0·(1 − (iter − warmup)/max_iter)^power`,
/// floored at zero. `max_iter` is the number of post-warm-up iterations.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig, max_iter: usize) -> f64 {
    if iter < cfg.warmup_iters {
        return cfg.lr0 * iter as f64 / cfg.warmup_iters as f64;
    }
    let progress = (iter - cfg.warmup_iters) as f64 / max_iter.max(1) as f64;
    cfg.lr0 * (1.0 - progress).max(0.0).powf(cfg.power)
}
