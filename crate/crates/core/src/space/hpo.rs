use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const OPTIMIZERS: [&str; 2] = ["sgd", "adam"];
pub const LEARNING_RATES: [f64; 3] = [3e-4, 1e-3, 3e-2];
pub const MIN_CROP_RATIOS: [f64; 2] = [0.3, 0.55];
pub const IOU_THRESHOLDS: [f64; 3] = [0.4, 0.5, 0.6];
pub const LOC_LOSS_WEIGHTS: [f64; 3] = [2.0, 4.0, 8.0];
pub const NEGPOS_RATIOS: [f64; 2] = [2.0, 7.0];

/// Domain size of each field, in enumeration order.
pub const HPO_CARDINALITIES: [usize; 6] = [2, 3, 2, 3, 3, 2];
pub const HPO_ONEHOT_LEN: usize = 15;

const LR_TEXT: [&str; 3] = ["3e-04", "1e-03", "3e-02"];
const CROP_TEXT: [&str; 2] = ["0.3", "0.55"];
const IOU_TEXT: [&str; 3] = ["0.4", "0.5", "0.6"];
const LOCW_TEXT: [&str; 3] = ["2.0", "4.0", "8.0"];
const NEGP_TEXT: [&str; 2] = ["2.0", "7.0"];

/// One point of the detector hyper-parameter grid, stored as indices into
/// the field domains in the order optimizer, learning rate, min crop ratio,
/// IoU threshold, location loss weight, neg-pos ratio. The derived `Ord`
/// is the enumeration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HpoConfig {
    idx: [u8; 6],
}

impl HpoConfig {
    pub fn from_indices(idx: [usize; 6]) -> Result<Self> {
        let mut out = [0u8; 6];
        for (k, (&i, &card)) in idx.iter().zip(&HPO_CARDINALITIES).enumerate() {
            if i >= card {
                return Err(Error::InvalidConfig(format!("field {k} index {i} out of range")));
            }
            out[k] = i as u8;
        }
        Ok(Self { idx: out })
    }

    pub fn indices(&self) -> [usize; 6] {
        self.idx.map(usize::from)
    }

    pub fn optimizer(&self) -> &'static str {
        OPTIMIZERS[self.idx[0] as usize]
    }

    pub fn learning_rate(&self) -> f64 {
        LEARNING_RATES[self.idx[1] as usize]
    }

    pub fn min_crop_ratio(&self) -> f64 {
        MIN_CROP_RATIOS[self.idx[2] as usize]
    }

    pub fn iou_threshold(&self) -> f64 {
        IOU_THRESHOLDS[self.idx[3] as usize]
    }

    /// Negative matching threshold, `pos / 2 + 0.05`.
    pub fn negative_iou_threshold(&self) -> f64 {
        self.iou_threshold() / 2.0 + 0.05
    }

    pub fn loc_loss_weight(&self) -> f64 {
        LOC_LOSS_WEIGHTS[self.idx[4] as usize]
    }

    pub fn negpos_ratio(&self) -> f64 {
        NEGPOS_RATIOS[self.idx[5] as usize]
    }

    /// Position in [`enumerate_hpo`].
    pub fn ordinal(&self) -> usize {
        self.idx
            .iter()
            .zip(&HPO_CARDINALITIES)
            .fold(0, |acc, (&i, &c)| acc * c + i as usize)
    }

    pub fn from_ordinal(mut n: usize) -> Result<Self> {
        if n >= 216 {
            return Err(Error::InvalidConfig(format!("hpo ordinal {n} out of range")));
        }
        let mut idx = [0usize; 6];
        for k in (0..6).rev() {
            idx[k] = n % HPO_CARDINALITIES[k];
            n /= HPO_CARDINALITIES[k];
        }
        Self::from_indices(idx)
    }
}

/// All 216 configurations in lexicographic index order.
pub fn enumerate_hpo() -> Vec<HpoConfig> {
    (0..216)
        .map(|n| HpoConfig::from_ordinal(n).expect("ordinal in range"))
        .collect()
}

/// Concatenated one-hot blocks, one per field.
pub fn encode_hpo_onehot(c: &HpoConfig) -> Vec<f64> {
    let mut out = vec![0.0; HPO_ONEHOT_LEN];
    let mut offset = 0;
    for (&i, &card) in c.idx.iter().zip(&HPO_CARDINALITIES) {
        out[offset + i as usize] = 1.0;
        offset += card;
    }
    out
}

impl fmt::Display for HpoConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = self.indices();
        write!(
            f,
            "crop:{}_iou:{}_locw:{}_negp:{}_lr:{}_{}",
            CROP_TEXT[i[2]], IOU_TEXT[i[3]], LOCW_TEXT[i[4]], NEGP_TEXT[i[5]], LR_TEXT[i[1]], OPTIMIZERS[i[0]]
        )
    }
}

fn match_value(input: &str, key: &str, text: &str, domain: &[f64]) -> Result<usize> {
    let err = |reason: String| Error::ConfigParse {
        input: input.to_string(),
        reason,
    };
    let v: f64 = text
        .parse()
        .map_err(|_| err(format!("`{key}` value `{text}` is not a number")))?;
    domain
        .iter()
        .position(|d| (d - v).abs() <= 1e-12 * d.abs().max(1.0))
        .ok_or_else(|| err(format!("`{key}` value {v} outside its domain")))
}

impl FromStr for HpoConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = |reason: &str| Error::ConfigParse {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = s.split('_').collect();
        if parts.len() != 6 {
            return Err(err("expected six `_`-separated fields"));
        }
        let mut idx = [usize::MAX; 6];
        for part in parts {
            match part.split_once(':') {
                Some(("crop", v)) => idx[2] = match_value(s, "crop", v, &MIN_CROP_RATIOS)?,
                Some(("iou", v)) => idx[3] = match_value(s, "iou", v, &IOU_THRESHOLDS)?,
                Some(("locw", v)) => idx[4] = match_value(s, "locw", v, &LOC_LOSS_WEIGHTS)?,
                Some(("negp", v)) => idx[5] = match_value(s, "negp", v, &NEGPOS_RATIOS)?,
                Some(("lr", v)) => idx[1] = match_value(s, "lr", v, &LEARNING_RATES)?,
                Some((k, _)) => return Err(err(&format!("unknown field `{k}`"))),
                None => {
                    idx[0] = OPTIMIZERS
                        .iter()
                        .position(|o| *o == part)
                        .ok_or_else(|| err(&format!("unknown optimizer `{part}`")))?
                }
            }
        }
        if idx.contains(&usize::MAX) {
            return Err(err("missing field"));
        }
        HpoConfig::from_indices(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_size_and_first() {
        let all = enumerate_hpo();
        assert_eq!(all.len(), HPO_CARDINALITIES.iter().product::<usize>());
        let f = all[0];
        assert_eq!(f.optimizer(), "sgd");
        assert_eq!(f.learning_rate(), 3e-4);
        assert_eq!(f.min_crop_ratio(), 0.3);
        assert_eq!(f.iou_threshold(), 0.4);
        assert_eq!(f.loc_loss_weight(), 2.0);
        assert_eq!(f.negpos_ratio(), 2.0);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn serialization_style() {
        let c = HpoConfig::from_indices([0, 0, 1, 1, 2, 0]).unwrap();
        assert_eq!(c.to_string(), "crop:0.55_iou:0.5_locw:8.0_negp:2.0_lr:3e-04_sgd");
        assert_eq!(c.to_string().parse::<HpoConfig>().unwrap(), c);
    }

    #[test]
    fn parse_errors() {
        assert!("crop:0.55_iou:0.5".parse::<HpoConfig>().is_err());
        assert!("crop:0.9_iou:0.5_locw:8.0_negp:2.0_lr:3e-04_sgd"
            .parse::<HpoConfig>()
            .is_err());
        assert!("crop:0.55_iou:0.5_locw:8.0_negp:2.0_lr:3e-04_rmsprop"
            .parse::<HpoConfig>()
            .is_err());
    }

    #[test]
    fn onehot_blocks() {
        for c in enumerate_hpo() {
            let v = encode_hpo_onehot(&c);
            assert_eq!(v.len(), 15);
            let mut off = 0;
            for card in HPO_CARDINALITIES {
                assert_eq!(v[off..off + card].iter().sum::<f64>(), 1.0);
                off += card;
            }
        }
    }

    #[test]
    fn negative_threshold() {
        let c = HpoConfig::from_indices([0, 0, 0, 2, 0, 0]).unwrap();
        assert!((c.negative_iou_threshold() - 0.35).abs() < 1e-15);
    }
}
