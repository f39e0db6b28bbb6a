use serde::{Deserialize, Serialize};

use super::LossError;
use crate::manifold::ManifoldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Lorentz,
    Euclidean,
}

/// Which pair sets enter an entailment loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElMode {
    None,
    Pos,
    PosNeg,
}

/// Which entailment objective is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entailment {
    None,
    /// Deepest label entails the image (and optionally the DNA) embedding.
    Single,
    /// Intra-rank label chain plus the inter-modal terms.
    Stacked,
}

/// The six method rows of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Clibd,
    Cl,
    ElCl,
    Sel,
    SelCl,
    SelClFt,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Clibd,
        Method::Cl,
        Method::ElCl,
        Method::Sel,
        Method::SelCl,
        Method::SelClFt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Clibd => "clibd",
            Method::Cl => "cl",
            Method::ElCl => "el_cl",
            Method::Sel => "sel",
            Method::SelCl => "sel_cl",
            Method::SelClFt => "sel_cl_ft",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub geometry: Geometry,
    #[serde(default)]
    pub manifold: ManifoldConfig,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_temperature")]
    pub init_temperature: f64,
    pub el_mode: ElMode,
    pub entailment: Entailment,
    /// Also apply single-level entailment from the label to the DNA embedding.
    #[serde(default = "default_true")]
    pub single_entailment_dna: bool,
    /// Image-label and DNA-label contrastive pairs at the deepest label.
    pub contrastive_text: bool,
    pub use_image_dna_contrastive: bool,
    /// Adds image-full text and DNA-full text contrastive pairs.
    pub use_full_text: bool,
    #[serde(default = "default_weight")]
    pub weight_cl: f64,
    #[serde(default = "default_weight")]
    pub weight_sel: f64,
}

fn default_margin() -> f64 {
    0.1
}

fn default_temperature() -> f64 {
    0.07
}

fn default_weight() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl LossConfig {
    pub fn preset(method: Method) -> LossConfig {
        let base = LossConfig {
            geometry: Geometry::Lorentz,
            manifold: ManifoldConfig::default(),
            margin: default_margin(),
            init_temperature: default_temperature(),
            el_mode: ElMode::None,
            entailment: Entailment::None,
            single_entailment_dna: true,
            contrastive_text: false,
            use_image_dna_contrastive: false,
            use_full_text: false,
            weight_cl: 1.0,
            weight_sel: 1.0,
        };
        let full_cl = LossConfig {
            contrastive_text: true,
            use_image_dna_contrastive: true,
            use_full_text: true,
            ..base.clone()
        };
        let sel = LossConfig {
            el_mode: ElMode::PosNeg,
            entailment: Entailment::Stacked,
            ..base.clone()
        };
        match method {
            Method::Clibd => LossConfig {
                geometry: Geometry::Euclidean,
                ..full_cl
            },
            Method::Cl => full_cl,
            Method::ElCl => LossConfig {
                el_mode: ElMode::Pos,
                entailment: Entailment::Single,
                ..full_cl
            },
            Method::Sel => sel,
            Method::SelCl => LossConfig {
                use_image_dna_contrastive: true,
                ..sel
            },
            Method::SelClFt => LossConfig {
                use_image_dna_contrastive: true,
                use_full_text: true,
                ..sel
            },
        }
    }

    pub fn has_contrastive(&self) -> bool {
        self.contrastive_text || self.use_image_dna_contrastive || self.use_full_text
    }

    /// Whether label embeddings are needed at all.
    pub fn uses_labels(&self) -> bool {
        self.contrastive_text || self.entailment != Entailment::None
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |msg: &str| Err(LossError::InvalidConfig(msg.to_string()));
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return bad("margin must be finite and >= 0");
        }
        if !(self.init_temperature.is_finite() && self.init_temperature > 0.0) {
            return bad("init_temperature must be finite and > 0");
        }
        for (name, w) in [("weight_cl", self.weight_cl), ("weight_sel", self.weight_sel)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(LossError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        match (self.entailment, self.el_mode) {
            (Entailment::None, ElMode::None) => {}
            (Entailment::None, _) => return bad("el_mode is set but no entailment objective is enabled"),
            (_, ElMode::None) => return bad("entailment objective enabled with el_mode = none"),
            _ => {}
        }
        if self.entailment != Entailment::None && self.geometry == Geometry::Euclidean {
            return bad("entailment cones require lorentz geometry");
        }
        if self.entailment == Entailment::None && !self.has_contrastive() {
            return bad("no objective enabled");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_round_trip() {
        for m in Method::ALL {
            let cfg = LossConfig::preset(m);
            cfg.validate().unwrap();
            let json = serde_json::to_string(&cfg).unwrap();
            let back: LossConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back, cfg, "{}", m.name());
        }
    }

    #[test]
    fn contradictory_flags_are_rejected() {
        let mut cfg = LossConfig::preset(Method::Cl);
        cfg.el_mode = ElMode::Pos;
        assert!(cfg.validate().is_err());

        let mut cfg = LossConfig::preset(Method::Sel);
        cfg.el_mode = ElMode::None;
        assert!(cfg.validate().is_err());

        let mut cfg = LossConfig::preset(Method::SelCl);
        cfg.geometry = Geometry::Euclidean;
        assert!(cfg.validate().is_err());

        let mut cfg = LossConfig::preset(Method::Cl);
        cfg.contrastive_text = false;
        cfg.use_image_dna_contrastive = false;
        cfg.use_full_text = false;
        assert!(cfg.validate().is_err());

        let mut cfg = LossConfig::preset(Method::Sel);
        cfg.margin = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn el_and_sel_cannot_both_be_on() {
        let json = r#"{"geometry":"lorentz","el_mode":"pos","entailment":"single,stacked",
            "contrastive_text":true,"use_image_dna_contrastive":true,"use_full_text":false}"#;
        assert!(serde_json::from_str::<LossConfig>(json).is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let json = r#"{"geometry":"lorentz","el_mode":"pos_neg","entailment":"stacked",
            "contrastive_text":false,"use_image_dna_contrastive":true,"use_full_text":false}"#;
        let cfg: LossConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg, LossConfig::preset(Method::SelCl));
    }
}
