//! Analytic parameter and multiply-accumulate accounting.
//!
//! Conventions: a parameter is any trainable scalar (the census matches the
//! parameter store exactly, element for element). MACs count one
//! multiply-accumulate per inner step of a matmul or convolution for a
//! single 224px (or configured-size) image; normalizations, softmaxes,
//! activations, and elementwise residuals are not counted. For the
//! low-rank (la) mixer only the attention against the m compressed tokens
//! is charged, not the compression matmuls themselves, matching how the
//! published totals were measured.

use crate::attention::AttentionKind;
use crate::error::Result;
use crate::model::{ModelConfig, Structure};

#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: usize,
    pub total_macs: u64,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }
}

/// Asymptotic cost of one mixer layer in tokens N, width C, and the
/// mixer's own hyperparameter.
pub fn complexity_term(kind: AttentionKind) -> &'static str {
    match kind {
        AttentionKind::Softmax => "O(N^2 C)",
        AttentionKind::Linformer => "O(N C m)",
        AttentionKind::Efficient => "O(N C^2)",
        AttentionKind::Performer => "O(N C r)",
        AttentionKind::Additive => "O(N C)",
        AttentionKind::CrossCovariance => "O(N C^2)",
        AttentionKind::Window => "O(N C w^2)",
    }
}

/// MACs of the mixer itself (excluding the shared q/k/v/out projections)
/// for one block at n tokens, width c.
fn mixer_macs(cfg: &ModelConfig, n: usize, c: usize, grid: usize) -> Result<u64> {
    let (n, c) = (n as u64, c as u64);
    let d = cfg.head_dim as u64;
    let h = c / d;
    Ok(match cfg.attention.kind {
        AttentionKind::Softmax => 2 * n * n * c,
        AttentionKind::Linformer => {
            let m = cfg.attention.m_for(n as usize) as u64;
            2 * n * m * c
        }
        AttentionKind::Efficient => 2 * n * d * c,
        AttentionKind::Performer => {
            let r = cfg.attention.r_features() as u64;
            h * (4 * n * d * r + n * r)
        }
        AttentionKind::Additive => 6 * n * c,
        AttentionKind::CrossCovariance => 2 * n * d * c,
        AttentionKind::Window => {
            let w = cfg.attention.window_for((grid, grid))? as u64;
            2 * n * w * w * c
        }
    })
}

/// Per-layer parameter/MAC breakdown for a model configuration.
pub fn analyze(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let patch_feat = 3 * cfg.patch_size * cfg.patch_size;
    let c0 = cfg.stage_dims[0];
    let n0 = cfg.tokens(0);

    layers.push(LayerCost {
        name: "embed".into(),
        params: patch_feat * c0 + c0,
        macs: (n0 * patch_feat * c0) as u64,
    });
    layers.push(LayerCost {
        name: "pos".into(),
        params: 64 * c0 + c0,
        macs: (n0 * 64 * c0) as u64,
    });

    for si in 0..cfg.stages() {
        let c = cfg.stage_dims[si];
        let n = cfg.tokens(si);
        let g = cfg.grid_side(si);
        let h = cfg.heads(si);
        if cfg.attention.kind == AttentionKind::Linformer {
            let m = cfg.attention.m_for(n);
            layers.push(LayerCost {
                name: format!("s{si}.wproj"),
                params: m * n,
                macs: 0,
            });
        }
        for bi in 0..cfg.stage_depths[si] {
            // shared projections + feed-forward
            let mut params = 12 * c * c + 13 * c;
            let mut macs = (12 * n * c * c) as u64;
            macs += mixer_macs(cfg, n, c, g)?;
            match cfg.attention.kind {
                AttentionKind::CrossCovariance
                    if cfg.attention.xca_mode == crate::attention::XcaMode::Canonical =>
                {
                    params += h;
                }
                AttentionKind::Additive => params += 2 * cfg.head_dim * h,
                _ => {}
            }
            if cfg.lpi_enabled {
                params += 22 * c;
                macs += (18 * n * c) as u64;
            }
            layers.push(LayerCost {
                name: format!("s{si}.b{bi}"),
                params,
                macs,
            });
        }
        if cfg.structure == Structure::Pyramid && si + 1 < cfg.stages() {
            let c_next = cfg.stage_dims[si + 1];
            layers.push(LayerCost {
                name: format!("s{si}.merge"),
                params: 4 * c * c_next + 2 * c_next,
                macs: ((n / 4) * 4 * c * c_next) as u64,
            });
        }
    }
    let c_last = *cfg.stage_dims.last().unwrap();
    layers.push(LayerCost {
        name: "head".into(),
        params: c_last * cfg.num_classes + cfg.num_classes,
        macs: (c_last * cfg.num_classes) as u64,
    });

    let total_params = layers.iter().map(|l| l.params).sum();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    Ok(CostReport {
        layers,
        total_params,
        total_macs,
    })
}

pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(analyze(cfg)?.total_params)
}

pub fn count_macs(cfg: &ModelConfig) -> Result<u64> {
    Ok(analyze(cfg)?.total_macs)
}

/// One published benchmark row: label, parameter count (millions), GFLOPs,
/// the rounded compute ratio, and the row the ratio is taken against.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceRow {
    pub label: &'static str,
    pub params_m: f64,
    pub gflops: f64,
    pub ratio: f64,
    pub baseline: &'static str,
}

/// The 18 published configurations. Patch-7 pyramid rows are measured
/// against sa-7, everything else against sa-4.
pub const REFERENCE: [ReferenceRow; 18] = [
    ReferenceRow { label: "sa-4", params_m: 28.27, gflops: 8.821, ratio: 1.0, baseline: "sa-4" },
    ReferenceRow { label: "sa-7", params_m: 28.28, gflops: 1.915, ratio: 1.0, baseline: "sa-7" },
    ReferenceRow { label: "la-4", params_m: 30.91, gflops: 5.496, ratio: 0.62, baseline: "sa-4" },
    ReferenceRow { label: "la-7", params_m: 28.56, gflops: 1.561, ratio: 0.81, baseline: "sa-7" },
    ReferenceRow { label: "ea-4", params_m: 28.27, gflops: 4.480, ratio: 0.51, baseline: "sa-4" },
    ReferenceRow { label: "ea-7", params_m: 28.28, gflops: 1.473, ratio: 0.77, baseline: "sa-7" },
    ReferenceRow { label: "pa-4", params_m: 28.27, gflops: 4.481, ratio: 0.51, baseline: "sa-4" },
    ReferenceRow { label: "pa-7", params_m: 28.28, gflops: 1.473, ratio: 0.77, baseline: "sa-7" },
    ReferenceRow { label: "aa-4", params_m: 28.27, gflops: 4.394, ratio: 0.50, baseline: "sa-4" },
    ReferenceRow { label: "aa-7", params_m: 28.28, gflops: 1.445, ratio: 0.75, baseline: "sa-7" },
    ReferenceRow { label: "xca-4", params_m: 28.27, gflops: 4.480, ratio: 0.51, baseline: "sa-4" },
    ReferenceRow { label: "xca-7", params_m: 28.28, gflops: 1.473, ratio: 0.77, baseline: "sa-7" },
    ReferenceRow { label: "swin-4", params_m: 28.27, gflops: 4.528, ratio: 0.51, baseline: "sa-4" },
    ReferenceRow { label: "swin-7", params_m: 28.28, gflops: 1.500, ratio: 0.78, baseline: "sa-7" },
    ReferenceRow { label: "lpi-4", params_m: 28.38, gflops: 4.520, ratio: 0.51, baseline: "sa-4" },
    ReferenceRow { label: "lpi-7", params_m: 28.39, gflops: 1.486, ratio: 0.78, baseline: "sa-7" },
    ReferenceRow { label: "col-14", params_m: 22.00, gflops: 6.117, ratio: 0.69, baseline: "sa-4" },
    ReferenceRow { label: "col-16", params_m: 22.00, gflops: 4.589, ratio: 0.52, baseline: "sa-4" },
];

/// Build the model configuration behind a published row label.
pub fn config_for(label: &str) -> Result<ModelConfig> {
    let l = label.trim().to_ascii_lowercase();
    let cfg = match l.as_str() {
        "col-14" => ModelConfig::columnar(14, AttentionKind::Softmax),
        "col-16" => ModelConfig::columnar(16, AttentionKind::Softmax),
        "lpi-4" | "lpi-7" => {
            let patch = if l.ends_with("4") { 4 } else { 7 };
            let mut c = ModelConfig::pyramid(patch, AttentionKind::CrossCovariance);
            c.lpi_enabled = true;
            c
        }
        _ => {
            let (kind_s, patch_s) = l
                .rsplit_once('-')
                .ok_or_else(|| crate::error::Error::Config(format!(
                    "unknown model label '{label}'"
                )))?;
            let kind = match kind_s {
                "swin" => AttentionKind::Window,
                other => AttentionKind::parse(other)?,
            };
            let patch: usize = patch_s.parse().map_err(|_| {
                crate::error::Error::Config(format!("bad patch size in label '{label}'"))
            })?;
            ModelConfig::pyramid(patch, kind)
        }
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    // analytic totals for every published configuration, frozen after
    // hand-derivation; the acceptance suite separately checks them
    // against the published numbers
    const FROZEN: [(&str, usize, u64); 18] = [
        ("sa-4", 28_266_856, 8_802_591_744),
        ("sa-7", 28_276_360, 1_909_733_376),
        ("la-4", 30_889_385, 5_478_030_336),
        ("la-7", 28_555_976, 1_555_249_152),
        ("ea-4", 28_266_856, 4_461_213_696),
        ("ea-7", 28_276_360, 1_466_972_160),
        ("pa-4", 28_266_856, 4_461_928_704),
        ("pa-7", 28_276_360, 1_467_205_632),
        ("aa-4", 28_275_688, 4_378_272_768),
        ("aa-7", 28_285_192, 1_439_889_408),
        ("xca-4", 28_266_994, 4_461_213_696),
        ("xca-7", 28_276_498, 1_466_972_160),
        ("swin-4", 28_266_856, 4_509_834_240),
        ("swin-7", 28_276_360, 1_494_497_280),
        ("lpi-4", 28_364_146, 4_486_953_984),
        ("lpi-7", 28_373_650, 1_475_377_152),
        ("col-14", 21_929_704, 6_104_275_968),
        ("col-16", 21_998_824, 4_578_843_648),
    ];

    #[test]
    fn frozen_totals() {
        for (label, params, macs) in FROZEN {
            let cfg = config_for(label).unwrap();
            let report = analyze(&cfg).unwrap();
            assert_eq!(report.total_params, params, "{label} params");
            assert_eq!(report.total_macs, macs, "{label} macs");
        }
    }

    #[test]
    fn census_matches_store() {
        // the analytic parameter count must equal the literal number of
        // scalars a built model holds
        for label in ["sa-4", "la-7", "pa-7", "aa-7", "xca-7", "swin-7", "lpi-7", "col-16"] {
            let cfg = config_for(label).unwrap();
            let analytic = count_params(&cfg).unwrap();
            let model: crate::model::Model<f32> = crate::model::Model::init(cfg).unwrap();
            assert_eq!(analytic, model.params.total_scalars(), "{label}");
        }
    }

    #[test]
    fn tiny_census_matches_store() {
        for kind in AttentionKind::ALL {
            let cfg = ModelConfig::tiny(kind);
            let analytic = count_params(&cfg).unwrap();
            let model: crate::model::Model<f32> = crate::model::Model::init(cfg).unwrap();
            assert_eq!(analytic, model.params.total_scalars(), "{kind}");
        }
    }
}
