//! Config-document handling: TOML files with `[detector]` and `[train]`
//! sections, merged under any command-line flags (flags win). Unknown keys
//! are rejected.

use gcepnet_core::detector::{DetectorConfig, TrainConfig};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub n_t: Option<usize>,
    pub n_r: Option<usize>,
    pub k: Option<u32>,
    pub iterations: Option<usize>,
    pub gnn_layers: Option<usize>,
    pub n_u: Option<usize>,
    pub n_h1: Option<usize>,
    pub n_h2: Option<usize>,
    pub cheb_order: Option<usize>,
    pub damping: Option<f64>,
    pub variance_floor: Option<f64>,
    pub detach_ep: Option<bool>,
    pub share_layer_params: Option<bool>,
    pub shared_node_bias: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub iters_per_epoch: Option<usize>,
    pub batch_size: Option<usize>,
    pub snr_lo: Option<f64>,
    pub snr_hi: Option<f64>,
    pub val_snrs: Option<Vec<f64>>,
    pub val_samples_per_snr: Option<usize>,
    pub lr: Option<f64>,
    pub sched_factor: Option<f64>,
    pub sched_patience: Option<usize>,
    pub sched_period: Option<usize>,
    pub sched_threshold: Option<f64>,
    pub lr_min: Option<f64>,
    pub seed: Option<u64>,
}

pub fn load_file(path: &std::path::Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
}

/// Apply a config-file section onto a default detector config; flags are
/// applied by the caller afterwards.
pub fn apply_detector_section(cfg: &mut DetectorConfig, s: &DetectorSection) {
    if let Some(v) = s.n_t {
        cfg.n_t = v;
    }
    if let Some(v) = s.n_r {
        cfg.n_r = v;
    }
    if let Some(v) = s.k {
        cfg.k = v;
    }
    if let Some(v) = s.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = s.gnn_layers {
        cfg.gnn_layers = v;
    }
    if let Some(v) = s.n_u {
        cfg.n_u = v;
    }
    if let Some(v) = s.n_h1 {
        cfg.n_h1 = v;
    }
    if let Some(v) = s.n_h2 {
        cfg.n_h2 = v;
    }
    if let Some(v) = s.cheb_order {
        cfg.cheb_order = v;
    }
    if let Some(v) = s.damping {
        cfg.damping = v;
    }
    if let Some(v) = s.variance_floor {
        cfg.variance_floor = v;
    }
    if let Some(v) = s.detach_ep {
        cfg.detach_ep = v;
    }
    if let Some(v) = s.share_layer_params {
        cfg.share_layer_params = v;
    }
    if let Some(v) = s.shared_node_bias {
        cfg.shared_node_bias = v;
    }
    if let Some(v) = s.seed {
        cfg.seed = v;
    }
}

pub fn apply_train_section(tc: &mut TrainConfig, s: &TrainSection) {
    if let Some(v) = s.epochs {
        tc.epochs = v;
    }
    if let Some(v) = s.iters_per_epoch {
        tc.iters_per_epoch = v;
    }
    if let Some(v) = s.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = s.snr_lo {
        tc.snr_lo = v;
    }
    if let Some(v) = s.snr_hi {
        tc.snr_hi = v;
    }
    if let Some(v) = &s.val_snrs {
        tc.val_snrs = v.clone();
    }
    if let Some(v) = s.val_samples_per_snr {
        tc.val_samples_per_snr = v;
    }
    if let Some(v) = s.lr {
        tc.lr = v;
    }
    if let Some(v) = s.sched_factor {
        tc.sched_factor = v;
    }
    if let Some(v) = s.sched_patience {
        tc.sched_patience = v;
    }
    if let Some(v) = s.sched_period {
        tc.sched_period = v;
    }
    if let Some(v) = s.sched_threshold {
        tc.sched_threshold = v;
    }
    if let Some(v) = s.lr_min {
        tc.lr_min = v;
    }
    if let Some(v) = s.seed {
        tc.seed = v;
    }
}

/// Flat key/value dump of a resolved detector config, for provenance
/// comments and checkpoint hyper blocks.
pub fn detector_entries(cfg: &DetectorConfig) -> Vec<(String, String)> {
    vec![
        ("n_t".into(), cfg.n_t.to_string()),
        ("n_r".into(), cfg.n_r.to_string()),
        ("k".into(), cfg.k.to_string()),
        ("iterations".into(), cfg.iterations.to_string()),
        ("gnn_layers".into(), cfg.gnn_layers.to_string()),
        ("n_u".into(), cfg.n_u.to_string()),
        ("n_h1".into(), cfg.n_h1.to_string()),
        ("n_h2".into(), cfg.n_h2.to_string()),
        ("cheb_order".into(), cfg.cheb_order.to_string()),
        ("damping".into(), format!("{}", cfg.damping)),
        ("variance_floor".into(), format!("{:e}", cfg.variance_floor)),
        ("detach_ep".into(), cfg.detach_ep.to_string()),
        ("share_layer_params".into(), cfg.share_layer_params.to_string()),
        ("shared_node_bias".into(), cfg.shared_node_bias.to_string()),
        ("seed".into(), cfg.seed.to_string()),
    ]
}

pub fn train_entries(tc: &TrainConfig) -> Vec<(String, String)> {
    let snrs: Vec<String> = tc.val_snrs.iter().map(|v| v.to_string()).collect();
    vec![
        ("epochs".into(), tc.epochs.to_string()),
        ("iters_per_epoch".into(), tc.iters_per_epoch.to_string()),
        ("batch_size".into(), tc.batch_size.to_string()),
        ("snr_lo".into(), tc.snr_lo.to_string()),
        ("snr_hi".into(), tc.snr_hi.to_string()),
        ("val_snrs".into(), snrs.join(",")),
        ("val_samples_per_snr".into(), tc.val_samples_per_snr.to_string()),
        ("lr".into(), format!("{:e}", tc.lr)),
        ("sched_factor".into(), tc.sched_factor.to_string()),
        ("sched_patience".into(), tc.sched_patience.to_string()),
        ("sched_period".into(), tc.sched_period.to_string()),
        ("sched_threshold".into(), format!("{:e}", tc.sched_threshold)),
        ("lr_min".into(), format!("{:e}", tc.lr_min)),
        ("train_seed".into(), tc.seed.to_string()),
    ]
}

/// Parse an inclusive `lo:hi:step` grid.
pub fn parse_snr_grid(spec: &str) -> Result<Vec<f64>, String> {
    if let Ok(single) = spec.parse::<f64>() {
        return Ok(vec![single]);
    }
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("bad SNR grid {spec:?}: expected lo:hi:step or a single value"));
    }
    let lo: f64 = parts[0].parse().map_err(|_| format!("bad grid start {:?}", parts[0]))?;
    let hi: f64 = parts[1].parse().map_err(|_| format!("bad grid end {:?}", parts[1]))?;
    let step: f64 = parts[2].parse().map_err(|_| format!("bad grid step {:?}", parts[2]))?;
    if step <= 0.0 {
        return Err("grid step must be positive".to_string());
    }
    if hi < lo {
        return Err("grid end must not be below its start".to_string());
    }
    let mut out = Vec::new();
    let mut v = lo;
    let eps = step * 1e-9;
    while v <= hi + eps {
        out.push(v);
        v += step;
    }
    Ok(out)
}

pub fn parse_list_usize(spec: &str) -> Result<Vec<usize>, String> {
    spec.split(',')
        .map(|tok| tok.trim().parse::<usize>().map_err(|_| format!("bad integer {tok:?}")))
        .collect()
}

pub fn parse_list_f64(spec: &str) -> Result<Vec<f64>, String> {
    spec.split(',')
        .map(|tok| tok.trim().parse::<f64>().map_err(|_| format!("bad number {tok:?}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_grid_inclusive() {
        assert_eq!(parse_snr_grid("0:12:4").unwrap(), vec![0.0, 4.0, 8.0, 12.0]);
        assert_eq!(parse_snr_grid("5").unwrap(), vec![5.0]);
        assert_eq!(parse_snr_grid("2:2:1").unwrap(), vec![2.0]);
        assert!(parse_snr_grid("5:1:1").is_err());
        assert!(parse_snr_grid("a:b:c").is_err());
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let bad = "[detector]\nnot_a_key = 1\n";
        assert!(toml::from_str::<FileConfig>(bad).is_err());
        let good = "[detector]\nn_t = 4\n[train]\nepochs = 2\n";
        let parsed: FileConfig = toml::from_str(good).unwrap();
        assert_eq!(parsed.detector.n_t, Some(4));
        assert_eq!(parsed.train.epochs, Some(2));
    }
}
