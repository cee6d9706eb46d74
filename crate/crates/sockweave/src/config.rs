//! Model configuration, ablation variants, and the config hash that guards
//! checkpoint compatibility.

use serde::{Deserialize, Serialize};

/// Ablation variants of the model architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// The proposed model: masked-depth input, 3D keypoints, selective
    /// kernel attention, hierarchical LSTM.
    Full,
    /// Depth removed: binary-mask input channels, 2D keypoints.
    NoDam,
    /// Somatosensory inputs bypass the selective kernel attention.
    NoSknet,
    /// Single flat LSTM over concatenated modalities.
    NoHier,
    /// Raw rendered grayscale replaces the masked-depth channels; 2D
    /// keypoints.
    NoSamDam,
}

impl VariantKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "full" => VariantKind::Full,
            "no_dam" => VariantKind::NoDam,
            "no_sknet" => VariantKind::NoSknet,
            "no_hier" => VariantKind::NoHier,
            "no_sam_dam" => VariantKind::NoSamDam,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            VariantKind::Full => "full",
            VariantKind::NoDam => "no_dam",
            VariantKind::NoSknet => "no_sknet",
            VariantKind::NoHier => "no_hier",
            VariantKind::NoSamDam => "no_sam_dam",
        }
    }

    pub const ALL: [VariantKind; 5] = [
        VariantKind::Full,
        VariantKind::NoDam,
        VariantKind::NoSknet,
        VariantKind::NoHier,
        VariantKind::NoSamDam,
    ];
}

/// Per-component weights of the composite training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub img: f64,
    pub angle: f64,
    pub torque: f64,
    pub tactile: f64,
    pub pt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            img: 0.1,
            angle: 1.5,
            torque: 1.0,
            tactile: 0.2,
            pt: 0.1,
        }
    }
}

/// Architecture hyperparameters. `desk()` is the production configuration;
/// `toy()` is small enough for exhaustive finite-difference verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: VariantKind,
    /// Input image edge length; the encoder reduces it 4x.
    pub img: usize,
    /// Channels after each encoder conv; the last is the keypoint count.
    pub enc_channels: [usize; 3],
    /// Hidden width of the mid decoder layer.
    pub dec_mid_channels: usize,
    /// Bottom (per-modality) LSTM hidden width d.
    pub bottom_width: usize,
    /// Union LSTM hidden width d_u.
    pub union_width: usize,
    /// Channels the 1-D selective kernel attention lifts each signal to.
    pub sknet_channels: usize,
    /// Compact projection width in its fuse stage.
    pub sknet_reduced: usize,
    /// Spatial-softmax temperature.
    pub temperature: f64,
    /// Heatmap spread in normalized coordinates.
    pub heatmap_sigma: f64,
    /// Train the keypoint loss on (x, y, z) instead of (x, y).
    pub keypoint_loss_3d: bool,
    pub loss_weights: LossWeights,
}

impl ModelConfig {
    pub fn desk(variant: VariantKind) -> Self {
        ModelConfig {
            variant,
            img: 64,
            enc_channels: [8, 16, 6],
            dec_mid_channels: 8,
            bottom_width: 32,
            union_width: 64,
            sknet_channels: 8,
            sknet_reduced: 4,
            temperature: 1.0,
            heatmap_sigma: 0.1,
            keypoint_loss_3d: false,
            loss_weights: LossWeights::default(),
        }
    }

    /// Reduced dims for finite-difference checks: d=4, 8x8 images, T=3.
    pub fn toy(variant: VariantKind) -> Self {
        ModelConfig {
            img: 8,
            bottom_width: 4,
            union_width: 8,
            ..ModelConfig::desk(variant)
        }
    }

    /// Input image channels: sock+foot masked depth (or masks), or one raw
    /// grayscale channel.
    pub fn in_channels(&self) -> usize {
        match self.variant {
            VariantKind::NoSamDam => 1,
            _ => 2,
        }
    }

    /// Keypoint coordinate count: (x, y, z) normally, (x, y) without depth.
    pub fn keypoint_dims(&self) -> usize {
        match self.variant {
            VariantKind::NoDam | VariantKind::NoSamDam => 2,
            _ => 3,
        }
    }

    pub fn keypoint_count(&self) -> usize {
        self.enc_channels[2]
    }

    /// Width of the vision modality vector fed to the recurrent core.
    pub fn vision_dims(&self) -> usize {
        self.keypoint_count() * self.keypoint_dims()
    }

    pub fn sknet_enabled(&self) -> bool {
        self.variant != VariantKind::NoSknet
    }

    pub fn hierarchical(&self) -> bool {
        self.variant != VariantKind::NoHier
    }

    /// Spatial extent of the encoder feature grid (two stride-2 convs).
    pub fn feature_hw(&self) -> usize {
        let half = self.img.div_ceil(2);
        half.div_ceil(2)
    }

    /// Hex SHA-256 of the canonical JSON form; stored in checkpoints and
    /// verified on load.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_grid_is_quarter_resolution() {
        assert_eq!(ModelConfig::desk(VariantKind::Full).feature_hw(), 16);
        assert_eq!(ModelConfig::toy(VariantKind::Full).feature_hw(), 2);
    }

    #[test]
    fn variant_dims() {
        let full = ModelConfig::desk(VariantKind::Full);
        assert_eq!((full.in_channels(), full.vision_dims()), (2, 18));
        let no_dam = ModelConfig::desk(VariantKind::NoDam);
        assert_eq!((no_dam.in_channels(), no_dam.vision_dims()), (2, 12));
        let no_sam = ModelConfig::desk(VariantKind::NoSamDam);
        assert_eq!((no_sam.in_channels(), no_sam.vision_dims()), (1, 12));
    }

    #[test]
    fn hash_distinguishes_variants_and_dims() {
        let a = ModelConfig::desk(VariantKind::Full).hash();
        let b = ModelConfig::desk(VariantKind::NoHier).hash();
        let c = ModelConfig::toy(VariantKind::Full).hash();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, ModelConfig::desk(VariantKind::Full).hash());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in VariantKind::ALL {
            assert_eq!(VariantKind::parse(v.name()), Some(v));
        }
        assert_eq!(VariantKind::parse("bogus"), None);
    }
}
